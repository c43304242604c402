"""Input checks and seed derivation shared by the estimators."""

import zlib

import numpy as np


class NumericalError(RuntimeError):
    """A NaN or Inf appeared where finite values are required."""


def derive_seed(seed, *keys):
    """Deterministic child seed from a top-level seed and string/int keys."""
    words = [int(seed) & 0xFFFFFFFF]
    for key in keys:
        words.append(zlib.crc32(key.encode("utf-8")) if isinstance(key, str) else int(key) & 0xFFFFFFFF)
    return int(np.random.SeedSequence(words).generate_state(1, np.uint64)[0])


def check_image(x, name="image", allow_out_of_range=False):
    """Return ``x`` as a finite float32 ``[H, W]`` array."""
    arr = np.asarray(x, dtype=np.float32)
    if arr.ndim == 4 and arr.shape[:2] == (1, 1):
        arr = arr[0, 0]
    if arr.ndim != 2 or min(arr.shape) < 1:
        raise ValueError(f"{name} must be a 2-D grayscale array, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains NaN or Inf")
    if not allow_out_of_range and (arr.min() < 0.0 or arr.max() > 1.0):
        raise ValueError(f"{name} values must lie in [0, 1]")
    return arr


def check_images(X, allow_out_of_range=False):
    """Accept a single image, an ``[N, H, W]`` array or a sequence of images."""
    if isinstance(X, np.ndarray) and X.ndim == 2:
        X = [X]
    elif isinstance(X, np.ndarray) and X.ndim == 4 and X.shape[1] == 1:
        X = list(X[:, 0])
    images = [check_image(x, f"image {i}", allow_out_of_range) for i, x in enumerate(X)]
    if not images:
        raise ValueError("no images given")
    return images


def check_pairs(noisy, clean):
    noisy = check_images(noisy, allow_out_of_range=True)
    clean = check_images(clean)
    if len(noisy) != len(clean):
        raise ValueError(f"{len(noisy)} noisy images but {len(clean)} clean ones")
    for i, (a, b) in enumerate(zip(noisy, clean)):
        if a.shape != b.shape:
            raise ValueError(f"pair {i}: noisy {a.shape} vs clean {b.shape}")
    return noisy, clean


def stack_if_uniform(images):
    if len({im.shape for im in images}) == 1:
        return np.stack(images)
    return images
