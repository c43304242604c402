"""The single frozen denoiser behind every ensemble branch.

A small residual CNN (conv-ReLU stack without normalization layers) predicts
the noise in its input; the denoised image is the input minus that
prediction, clamped to ``[0, 1]``.
"""

import logging
from dataclasses import asdict, dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .archive import ArchiveError, WeightArchive
from .core import Adam, Parameter, Tensor, backward, conv2d, mse_loss, relu
from .validation import NumericalError, check_images, derive_seed, stack_if_uniform

logger = logging.getLogger(__name__)

BACKBONE_KIND = "residual-denoiser"


@dataclass(frozen=True)
class DenoiserSpec:
    depth: int = 7
    channels: int = 32
    kernel_size: int = 3
    residual: bool = True

    def __post_init__(self):
        if self.depth < 2:
            raise ValueError(f"depth must be >= 2, got {self.depth}")
        if self.channels < 1:
            raise ValueError(f"channels must be positive, got {self.channels}")
        if self.kernel_size % 2 == 0 or self.kernel_size < 1:
            raise ValueError(f"kernel_size must be odd, got {self.kernel_size}")
        if not self.residual:
            raise ValueError("only residual (noise-predicting) denoisers are supported")

    def layer_shapes(self):
        widths = [1] + [self.channels] * (self.depth - 1) + [1]
        k = self.kernel_size
        return [(widths[i + 1], widths[i], k, k) for i in range(self.depth)]


def init_weights(spec=None, seed=0):
    """He-normal initialization; the last layer is scaled down so training
    starts close to the identity denoiser."""
    spec = spec or DenoiserSpec()
    rng = np.random.Generator(np.random.Philox(seed))
    params = {}
    shapes = spec.layer_shapes()
    for i, shape in enumerate(shapes):
        fan_in = shape[1] * shape[2] * shape[3]
        std = np.sqrt(2.0 / fan_in) * (0.1 if i == len(shapes) - 1 else 1.0)
        params[f"conv{i}.weight"] = rng.standard_normal(shape) * std
        params[f"conv{i}.bias"] = np.zeros(shape[0])
    return WeightArchive(BACKBONE_KIND, asdict(spec), params, {"seed": seed})


def spec_of(weights):
    if weights.kind != BACKBONE_KIND:
        raise ArchiveError(f"expected a {BACKBONE_KIND!r} archive, got {weights.kind!r}")
    spec = DenoiserSpec(**weights.spec)
    for i, shape in enumerate(spec.layer_shapes()):
        for name, want in ((f"conv{i}.weight", shape), (f"conv{i}.bias", shape[:1])):
            got = weights.params.get(name)
            if got is None or got.shape != want:
                raise ArchiveError(f"weights do not match spec at {name}: "
                                   f"expected {want}, got {None if got is None else got.shape}")
    return spec


def predict_noise(x, layers):
    """Network body: ``layers`` is a list of (kernel, bias) tensors."""
    h = x
    for i, (w, b) in enumerate(layers):
        h = conv2d(h, w, b)
        if i < len(layers) - 1:
            h = relu(h)
    return h


def _layers(weights, spec, as_parameters=False):
    out = []
    for i in range(spec.depth):
        w, b = weights.params[f"conv{i}.weight"], weights.params[f"conv{i}.bias"]
        if as_parameters:
            out.append((Parameter(w.copy(), f"conv{i}.weight"), Parameter(b.copy(), f"conv{i}.bias")))
        else:
            out.append((Tensor(w), Tensor(b)))
    return out


def denoise(noisy, weights):
    """Denoise ``[H, W]``, ``[N, H, W]`` or ``[N, 1, H, W]`` images with frozen weights."""
    spec = spec_of(weights)
    x = np.asarray(noisy, dtype=np.float32)
    shape = x.shape
    if x.ndim == 2:
        x = x[None, None]
    elif x.ndim == 3:
        x = x[:, None]
    elif x.ndim != 4 or x.shape[1] != 1:
        raise ValueError(f"expected grayscale [H, W], [N, H, W] or [N, 1, H, W], got {shape}")
    layers = _layers(weights, spec)
    out = np.empty_like(x)
    # one image at a time bounds the im2col buffers
    for n in range(x.shape[0]):
        noise = predict_noise(Tensor(x[n:n + 1]), layers).data
        out[n:n + 1] = np.clip(x[n:n + 1] - noise, 0.0, 1.0)
    return out.reshape(shape)


def add_awgn(clean, sigma, seed):
    """Add i.i.d. N(0, (sigma/255)^2) noise from a seeded Philox stream (no clamping)."""
    if sigma < 0:
        raise ValueError(f"sigma must be non-negative, got {sigma}")
    clean = np.asarray(clean, dtype=np.float32)
    rng = np.random.Generator(np.random.Philox(seed))
    noise = rng.standard_normal(clean.shape) * (sigma / 255.0)
    return (clean + noise.astype(np.float32)).astype(np.float32)


def extract_patches(images, size=40, stride=20):
    patches = []
    for img in images:
        h, w = img.shape
        for i in range(0, h - size + 1, stride):
            for j in range(0, w - size + 1, stride):
                patches.append(img[i:i + size, j:j + size])
    if not patches:
        raise ValueError(f"no {size}x{size} patches fit in the given images")
    return np.stack(patches).astype(np.float32)


def train_backbone(clean_patches, noise_sigma, epochs, seed=0, spec=None, batch_size=16,
                   learning_rate=1e-3):
    """Fit the residual denoiser on synthetic AWGN pairs.

    Noise and batch order are redrawn each epoch from seeds derived from
    ``seed``. Returns ``(archive, losses)`` where ``losses[0]`` is the loss of
    the initialization on the first epoch's noise and ``losses[e]`` the mean
    batch loss of epoch ``e``.
    """
    patches = np.asarray(clean_patches, dtype=np.float32)
    if patches.ndim != 3 or len(patches) == 0:
        raise ValueError("clean_patches must be a non-empty [N, H, W] stack")
    spec = spec or DenoiserSpec()
    archive = init_weights(spec, seed)
    if epochs == 0:
        return archive, []
    layers = _layers(archive, spec, as_parameters=True)
    params = [p for pair in layers for p in pair]
    opt = Adam(params, learning_rate=learning_rate)

    def batch_loss(noisy, noise):
        return mse_loss(predict_noise(Tensor(noisy[:, None]), layers), Tensor(noise[:, None]))

    def epoch_noise(epoch):
        noisy = add_awgn(patches, noise_sigma, derive_seed(seed, "noise", epoch))
        return noisy, noisy - patches

    noisy, noise = epoch_noise(0)
    losses = [float(np.mean([batch_loss(noisy[i:i + batch_size], noise[i:i + batch_size]).item()
                             for i in range(0, len(patches), batch_size)]))]
    for epoch in range(epochs):
        noisy, noise = epoch_noise(epoch)
        rng = np.random.Generator(np.random.Philox(derive_seed(seed, "order", epoch)))
        order = rng.permutation(len(patches))
        total = 0.0
        for start in range(0, len(order), batch_size):
            idx = np.sort(order[start:start + batch_size])
            loss = batch_loss(noisy[idx], noise[idx])
            value = loss.item()
            if not np.isfinite(value):
                raise NumericalError(f"non-finite backbone loss at epoch {epoch}")
            backward(loss)
            opt.step()
            total += value * len(idx)
        losses.append(total / len(patches))
        logger.info("backbone epoch %d/%d loss %.6g", epoch + 1, epochs, losses[-1])
    trained = {p.name: p.data for p in params}
    return WeightArchive(BACKBONE_KIND, asdict(spec), trained,
                         {"seed": seed, "sigma": float(noise_sigma), "epochs": epochs}), losses


class ResidualDenoiser(TransformerMixin, BaseEstimator):
    """Residual CNN denoiser for one noise level.

    ``fit`` takes clean grayscale images in ``[0, 1]`` and trains on noisy
    patches synthesized on the fly; ``transform`` denoises noisy images.

    Parameters
    ----------
    sigma : float
        Training noise level on the 0-255 scale.
    depth, channels, kernel_size : int
        Architecture of the convolution stack.
    epochs, batch_size, learning_rate : training schedule.
    patch_size, stride : int
        Patch extraction grid over the training images.
    random_state : int
        Seed for initialization, noise and batch order.
    """

    def __init__(self, sigma=25.0, depth=7, channels=32, kernel_size=3, epochs=30,
                 batch_size=16, learning_rate=1e-3, patch_size=40, stride=20, random_state=0):
        self.sigma = sigma
        self.depth = depth
        self.channels = channels
        self.kernel_size = kernel_size
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.patch_size = patch_size
        self.stride = stride
        self.random_state = random_state

    def fit(self, X, y=None):
        images = check_images(X)
        patches = extract_patches(images, self.patch_size, self.stride)
        spec = DenoiserSpec(self.depth, self.channels, self.kernel_size)
        self.archive_, self.loss_curve_ = train_backbone(
            patches, self.sigma, self.epochs, seed=self.random_state, spec=spec,
            batch_size=self.batch_size, learning_rate=self.learning_rate)
        return self

    def transform(self, X):
        check_is_fitted(self, "archive_")
        images = check_images(X, allow_out_of_range=True)
        return stack_if_uniform([denoise(im, self.archive_) for im in images])

    @classmethod
    def from_archive(cls, archive):
        spec = spec_of(archive)
        est = cls(sigma=archive.metadata.get("sigma", 25.0), depth=spec.depth,
                  channels=spec.channels, kernel_size=spec.kernel_size,
                  random_state=archive.metadata.get("seed", 0))
        est.archive_ = archive
        est.loss_curve_ = []
        return est
