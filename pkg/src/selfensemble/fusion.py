"""Decoupled dual-attention fusion of ensemble branches.

Two independent paths each turn the branch stack into normalized weights:

* spatial attention: a small conv stack emits one logit map per branch,
  softmax-normalized across branches at every pixel;
* channel attention: global average pooling, a two-layer bottleneck and a
  softmax give one scalar weight per branch.

Each path fuses the branches as a weighted sum. The full model concatenates
the two fused images and merges them with a single 3x3 convolution.
"""

import logging
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .archive import ArchiveError, WeightArchive
from .core import (
    Adam,
    Parameter,
    Tensor,
    backward,
    concat,
    conv2d,
    fully_connected,
    global_average_pool,
    mse_loss,
    mul,
    relu,
    reshape,
    softmax_over_channels,
    sum_,
)
from .ensemble import EnsembleStack, _as_archive, build_stack, subset_indices
from .transforms import MASK_CATALOG
from .validation import NumericalError, check_images, check_pairs, derive_seed, stack_if_uniform

logger = logging.getLogger(__name__)

FUSION_KIND = "attention-fusion"
MODES = ("dual", "spatial", "channel")


def _check_mode(mode):
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    return mode


class FusionWeights:
    """Learnable parameters of both attention paths and the merge layer.

    ``subset`` fixes which ensemble branches the model consumes; the number
    of branches sets the input/output widths of both paths.
    """

    def __init__(self, params, subset="joint", hidden=32, mode="dual"):
        self.subset = str(subset).lower()
        self.n_branches = len(subset_indices(self.subset))
        self.hidden = int(hidden)
        self.mode = _check_mode(mode)
        self.params = {}
        for name, shape in self.shapes().items():
            value = params[name]
            if value.shape != shape:
                raise ArchiveError(f"{name}: expected shape {shape}, got {value.shape}")
            self.params[name] = value if isinstance(value, Parameter) else Parameter(value, name, dtype=value.dtype)

    def shapes(self):
        b, h = self.n_branches, self.hidden
        return {
            "spatial.conv0.weight": (h, b, 3, 3), "spatial.conv0.bias": (h,),
            "spatial.conv1.weight": (h, h, 3, 3), "spatial.conv1.bias": (h,),
            "spatial.conv2.weight": (b, h, 3, 3), "spatial.conv2.bias": (b,),
            "channel.fc0.weight": (h, b), "channel.fc0.bias": (h,),
            "channel.fc1.weight": (b, h), "channel.fc1.bias": (b,),
            "merge.weight": (1, 2, 3, 3), "merge.bias": (1,),
        }

    def __getitem__(self, name):
        return self.params[name]

    def parameters(self, path=None):
        prefixes = {"spatial": ("spatial.",), "channel": ("channel.",), None: ("",),
                    "dual": ("",)}[path]
        return [p for name, p in self.params.items() if name.startswith(prefixes)]

    @property
    def parameter_count(self):
        return sum(p.size for p in self.params.values())

    @classmethod
    def initialize(cls, subset="joint", hidden=32, seed=0, mode="dual", dtype=np.float32):
        """Seeded start point: He-normal hidden layers, zero output layers (so
        both paths start as the plain branch average) and a merge that
        averages the two fused images."""
        rng = np.random.Generator(np.random.Philox(seed))
        proto = cls.__new__(cls)
        proto.n_branches, proto.hidden = len(subset_indices(subset)), int(hidden)
        params = {}
        for name, shape in proto.shapes().items():
            if name.endswith("bias") or name in ("spatial.conv2.weight", "channel.fc1.weight"):
                params[name] = np.zeros(shape, dtype=dtype)
            elif name == "merge.weight":
                w = np.zeros(shape, dtype=dtype)
                w[0, :, 1, 1] = 0.5
                params[name] = w
            else:
                fan_in = int(np.prod(shape[1:]))
                params[name] = (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)
        return cls(params, subset, hidden, mode)

    def to_archive(self, metadata=None):
        return WeightArchive(FUSION_KIND,
                             {"subset": self.subset, "hidden": self.hidden,
                              "n_branches": self.n_branches, "mode": self.mode},
                             {name: p.data for name, p in self.params.items()},
                             dict(metadata or {}))

    @classmethod
    def from_archive(cls, archive):
        if archive.kind != FUSION_KIND:
            raise ArchiveError(f"expected a {FUSION_KIND!r} archive, got {archive.kind!r}")
        spec = archive.spec
        weights = cls(dict(archive.params), spec["subset"], spec["hidden"], spec.get("mode", "dual"))
        if weights.n_branches != spec["n_branches"]:
            raise ArchiveError("branch count disagrees with subset")
        return weights

    def copy(self):
        return FusionWeights({n: p.data.copy() for n, p in self.params.items()},
                             self.subset, self.hidden, self.mode)


@dataclass(frozen=True, eq=False)
class FusionOutput:
    fused: np.ndarray
    spatial_weights: np.ndarray
    channel_weights: np.ndarray
    fused_spatial: np.ndarray
    fused_channel: np.ndarray


# ---------------------------------------------------------------- graph builders
# These take a [N, B, H, W] tensor of branches and return tensors.

def spatial_path(branches, w):
    h = relu(conv2d(branches, w["spatial.conv0.weight"], w["spatial.conv0.bias"]))
    h = relu(conv2d(h, w["spatial.conv1.weight"], w["spatial.conv1.bias"]))
    logits = conv2d(h, w["spatial.conv2.weight"], w["spatial.conv2.bias"])
    maps = softmax_over_channels(logits)
    return maps, sum_(mul(maps, branches), axis=1, keepdims=True)


def channel_path(branches, w):
    n, b = branches.shape[:2]
    pooled = reshape(global_average_pool(branches), (n, b))
    h = relu(fully_connected(pooled, w["channel.fc0.weight"], w["channel.fc0.bias"]))
    logits = fully_connected(h, w["channel.fc1.weight"], w["channel.fc1.bias"])
    scores = softmax_over_channels(reshape(logits, (n, b, 1, 1)))
    return scores, sum_(mul(scores, branches), axis=1, keepdims=True)


def merge(fused_spatial, fused_channel, w):
    return conv2d(concat([fused_spatial, fused_channel], axis=1), w["merge.weight"], w["merge.bias"])


def forward(branches, w, mode="dual"):
    """Fused ``[N, 1, H, W]`` tensor for the given mode."""
    if mode == "spatial":
        return spatial_path(branches, w)[1]
    if mode == "channel":
        return channel_path(branches, w)[1]
    return merge(spatial_path(branches, w)[1], channel_path(branches, w)[1], w)


# ---------------------------------------------------------------- stack-level API

def _branches(stack, weights):
    if isinstance(stack, EnsembleStack):
        arr = stack.select(weights.subset)
    else:
        arr = np.asarray(stack)
        if arr.shape[0] == 13 and weights.n_branches != 13:
            arr = arr[list(subset_indices(weights.subset))]
    if arr.ndim != 3 or arr.shape[0] != weights.n_branches:
        raise ValueError(f"expected {weights.n_branches} branches of shape [H, W], got {arr.shape}")
    dtype = weights["merge.weight"].dtype
    return Tensor(arr[None].astype(dtype, copy=False))


def spatial_attention(stack, weights):
    """Per-pixel weight maps ``[B, H, W]`` and the spatially fused image."""
    maps, fused = spatial_path(_branches(stack, weights), weights)
    return maps.data[0], fused.data[0, 0]


def channel_attention(stack, weights):
    """Per-branch weights ``[B]`` and the channel-fused image."""
    scores, fused = channel_path(_branches(stack, weights), weights)
    return scores.data[0, :, 0, 0], fused.data[0, 0]


def dual_fuse(stack, weights):
    x = _branches(stack, weights)
    maps, fused_sp = spatial_path(x, weights)
    scores, fused_ch = channel_path(x, weights)
    fused = merge(fused_sp, fused_ch, weights)
    return FusionOutput(fused.data[0, 0], maps.data[0], scores.data[0, :, 0, 0],
                        fused_sp.data[0, 0], fused_ch.data[0, 0])


def single_path_fuse(stack, weights, path):
    """Fused image of one attention path on its own."""
    if path == "spatial":
        return spatial_attention(stack, weights)[1]
    if path == "channel":
        return channel_attention(stack, weights)[1]
    raise ValueError(f"path must be 'spatial' or 'channel', got {path!r}")


def fuse(stack, weights, mode=None):
    """Output of the model as trained: dual merge or a single path."""
    mode = mode or weights.mode
    if mode == "dual":
        return dual_fuse(stack, weights).fused
    return single_path_fuse(stack, weights, mode)


# ---------------------------------------------------------------- training

def _crop_batches(stacks, clean, crop, crops_per_image, batch_size, seed):
    rng = np.random.Generator(np.random.Philox(seed))
    jobs = []
    for i, s in enumerate(stacks):
        h, w = s.shape[1:]
        for _ in range(crops_per_image):
            jobs.append((i, int(rng.integers(0, h - crop + 1)), int(rng.integers(0, w - crop + 1))))
    order = rng.permutation(len(jobs))
    for start in range(0, len(order), batch_size):
        chosen = [jobs[k] for k in order[start:start + batch_size]]
        x = np.stack([stacks[i][:, r:r + crop, c:c + crop] for i, r, c in chosen])
        y = np.stack([clean[i][None, r:r + crop, c:c + crop] for i, r, c in chosen])
        yield x, y


def train_fusion(stacks, clean, mode="dual", subset="joint", epochs=100, seed=0, hidden=32,
                 crop_size=48, crops_per_image=4, batch_size=8, learning_rate=1e-3):
    """Fit attention fusion on precomputed ensemble stacks.

    ``stacks`` are :class:`EnsembleStack` objects (or ``[13, H, W]`` arrays)
    built by a frozen backbone; only fusion parameters receive gradients.
    Each epoch draws ``crops_per_image`` random crops per image with seeds
    derived from ``seed``. Returns ``(weights, losses)`` where ``losses[0]``
    is the loss of the initialization on the first epoch's crops.
    """
    _check_mode(mode)
    idx = list(subset_indices(subset))
    arrays = [(s.branches if isinstance(s, EnsembleStack) else np.asarray(s))[idx] for s in stacks]
    clean = [np.asarray(c, dtype=np.float32) for c in clean]
    if not arrays:
        raise ValueError("no training pairs given")
    if len(arrays) != len(clean):
        raise ValueError(f"{len(arrays)} stacks but {len(clean)} clean images")
    weights = FusionWeights.initialize(subset, hidden, seed, mode)
    if epochs == 0:
        return weights, []
    crop = min(crop_size, *(min(a.shape[1:]) for a in arrays))
    params = weights.parameters(mode)
    opt = Adam(params, learning_rate=learning_rate)

    def batch_loss(x, y):
        return mse_loss(forward(Tensor(x), weights.params, mode), Tensor(y))

    def epoch_batches(epoch):
        return _crop_batches(arrays, clean, crop, crops_per_image, batch_size,
                             derive_seed(seed, "fusion-crops", epoch))

    losses = [float(np.mean([batch_loss(x, y).item() for x, y in epoch_batches(0)]))]
    for epoch in range(epochs):
        total, count = 0.0, 0
        for x, y in epoch_batches(epoch):
            loss = batch_loss(x, y)
            value = loss.item()
            if not np.isfinite(value):
                raise NumericalError(f"non-finite fusion loss at epoch {epoch}")
            backward(loss)
            opt.step()
            total += value * len(x)
            count += len(x)
        losses.append(total / count)
        logger.info("fusion[%s/%s] epoch %d/%d loss %.6g", mode, subset, epoch + 1, epochs, losses[-1])
    # parameters off the trained path stay at initialization and may hold stale gradients
    for p in weights.params.values():
        p.zero_grad()
    return weights, losses


class AttentionFusion(BaseEstimator):
    """Attention-based fusion over a self-ensemble of one frozen backbone.

    Parameters
    ----------
    backbone : WeightArchive or fitted ResidualDenoiser
        Frozen denoiser that produces the ensemble branches.
    mode : {"dual", "spatial", "channel"}
        Full decoupled model or one attention path alone.
    subset : {"joint", "sm", "fm"}
        Which branches are fused (branch 0 is always included).
    epochs, crop_size, crops_per_image, batch_size, learning_rate :
        Training schedule.
    hidden : int
        Width of the hidden layers in both attention paths.
    mask_catalog : sequence of (r_low_frac, r_high_frac)
    random_state : int
    """

    def __init__(self, backbone=None, mode="dual", subset="joint", epochs=100, crop_size=48,
                 crops_per_image=4, batch_size=8, learning_rate=1e-3, hidden=32,
                 mask_catalog=MASK_CATALOG, random_state=0):
        self.backbone = backbone
        self.mode = mode
        self.subset = subset
        self.epochs = epochs
        self.crop_size = crop_size
        self.crops_per_image = crops_per_image
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.hidden = hidden
        self.mask_catalog = mask_catalog
        self.random_state = random_state

    def _stacks(self, X):
        weights = _as_archive(self.backbone)
        return [build_stack(x, weights, self.mask_catalog) for x in X]

    def fit(self, X, y):
        """``X``: noisy images, ``y``: matching clean images."""
        noisy, clean = check_pairs(X, y)
        return self.fit_stacks(self._stacks(noisy), clean)

    def fit_stacks(self, stacks, clean):
        self.weights_, self.loss_curve_ = train_fusion(
            stacks, clean, self.mode, self.subset, self.epochs, self.random_state, self.hidden,
            self.crop_size, self.crops_per_image, self.batch_size, self.learning_rate)
        return self

    def predict(self, X):
        check_is_fitted(self, "weights_")
        noisy = check_images(X, allow_out_of_range=True)
        return stack_if_uniform(self.predict_stacks(self._stacks(noisy)))

    def predict_stacks(self, stacks):
        check_is_fitted(self, "weights_")
        return [fuse(s, self.weights_, self.mode) for s in stacks]

    def score(self, X, y):
        """Mean PSNR (dB) of the fused output against clean images."""
        from .analysis import psnr

        preds = self.predict(X)
        return float(np.mean([psnr(p, c) for p, c in zip(preds, y)]))
