"""Desk-scale grayscale corpus cut from the sample images bundled with scikit-image.

Every crop is a distinct, non-overlapping 128x128 grid cell. Cells from all
sources are interleaved and dealt to the backbone, fusion and test splits, so
the three splits are disjoint but follow the same image distribution.
"""

import os

import numpy as np

from .imageio import save_gray, to_uint8

SOURCES = ("camera", "coins", "astronaut", "rocket", "clock", "moon", "gravel", "brick", "grass",
           "hubble_deep_field", "immunohistochemistry", "retina", "cell", "page", "text", "chelsea",
           "coffee")

_LUMA = np.array([0.299, 0.587, 0.114])


def _load_source(name):
    import skimage.data

    img = np.asarray(getattr(skimage.data, name)(), dtype=np.float64)
    if img.ndim == 3:
        img = img[..., :3] @ _LUMA
    return img / 255.0


def _cells(img, size):
    h, w = img.shape
    return [(r, c) for r in range(0, h - size + 1, size) for c in range(0, w - size + 1, size)]


def _textured(crop, min_std=0.04):
    return crop.std() >= min_std


def desk_corpus(size=128, n_backbone=20, n_fusion=20, n_test=5, seed=0):
    """Return ``{"backbone": [...], "fusion": [...], "test": [...]}`` of
    ``(name, image)`` pairs with 8-bit-quantized float32 images in [0, 1].

    Names are ``<source>_<row>_<col>``. Low-contrast cells are skipped.
    """
    rng = np.random.Generator(np.random.Philox(seed))
    wanted = {"backbone": n_backbone, "fusion": n_fusion, "test": n_test}
    if min(wanted.values()) < 0:
        raise ValueError("split sizes must be non-negative")

    pool = []
    for name in SOURCES:
        img = _load_source(name)
        cells = [cell for cell in _cells(img, size)
                 if _textured(img[cell[0]:cell[0] + size, cell[1]:cell[1] + size])]
        pool.append([(f"{name}_{r}_{c}", (to_uint8(img[r:r + size, c:c + size]) / 255.0).astype(np.float32))
                     for r, c in (cells[i] for i in rng.permutation(len(cells)))])
    # one cell per source per round keeps every split diverse
    picked = []
    for depth in range(max(len(crops) for crops in pool)):
        picked.extend(crops[depth] for crops in pool if depth < len(crops))
    total = sum(wanted.values())
    if len(picked) < total:
        raise ValueError(f"only {len(picked)} distinct crops available, {total} requested")

    splits = {key: [] for key in wanted}
    for item in picked[:total]:
        # deal to the split that is furthest behind its quota
        key = max((k for k in wanted if len(splits[k]) < wanted[k]),
                  key=lambda k: (wanted[k] - len(splits[k])) / wanted[k])
        splits[key].append(item)
    return splits


def write_desk_corpus(directory, **kwargs):
    """Write the corpus as PNGs under ``directory/{backbone,fusion,test}``."""
    corpus = desk_corpus(**kwargs)
    paths = {}
    for split, items in corpus.items():
        d = os.path.join(directory, split)
        os.makedirs(d, exist_ok=True)
        paths[split] = d
        for name, img in items:
            save_gray(os.path.join(d, f"{name}.png"), img)
    return paths
