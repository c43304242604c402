"""Thirteen-branch virtual ensemble built from one frozen denoiser."""

import csv
import os
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .archive import WeightArchive
from .backbone import ResidualDenoiser, denoise, spec_of
from .imageio import save_gray
from .transforms import (
    FREQUENCY_IDS,
    MASK_CATALOG,
    SPATIAL_IDS,
    ManipulationId,
    apply_frequency_mask,
    apply_spatial,
    build_mask,
    invert_spatial,
)
from .validation import check_image, check_images

N_BRANCHES = 13

# every subset keeps the plain denoised image (branch 0)
SUBSETS = {
    "sm": tuple(range(0, 8)),
    "fm": (0,) + tuple(range(8, 13)),
    "joint": tuple(range(13)),
}


def subset_indices(subset):
    try:
        return SUBSETS[str(subset).lower()]
    except KeyError:
        raise ValueError(f"subset must be one of {sorted(SUBSETS)}, got {subset!r}") from None


@dataclass(frozen=True, eq=False)
class EnsembleStack:
    """Denoised branches in the noisy image's coordinate frame, ordered by
    :class:`ManipulationId` index."""

    branches: np.ndarray
    noisy: np.ndarray
    sigma: float = None
    provenance: tuple = tuple(ManipulationId)
    mask_catalog: tuple = MASK_CATALOG

    def __post_init__(self):
        if self.branches.ndim != 3 or self.branches.shape[1:] != self.noisy.shape:
            raise ValueError(f"branches {self.branches.shape} do not align with noisy "
                             f"image {self.noisy.shape}")
        if len(self.provenance) != self.branches.shape[0]:
            raise ValueError("one provenance entry is needed per branch")

    @property
    def shape(self):
        return self.noisy.shape

    def select(self, subset):
        return self.branches[list(subset_indices(subset))]


def _as_archive(backbone):
    if isinstance(backbone, ResidualDenoiser):
        return backbone.archive_
    if not isinstance(backbone, WeightArchive):
        raise TypeError(f"expected a WeightArchive or fitted ResidualDenoiser, got {type(backbone)}")
    return backbone


def build_stack(noisy, weights, mask_catalog=MASK_CATALOG, sigma=None):
    """Denoise the noisy image and its twelve manipulations with one network.

    Spatially manipulated outputs are mapped back to the original frame;
    frequency-masked outputs are used as produced since masking has no
    inverse.
    """
    weights = _as_archive(weights)
    spec_of(weights)
    noisy = check_image(noisy, "noisy", allow_out_of_range=True)
    h, w = noisy.shape
    branches = np.empty((N_BRANCHES, h, w), dtype=np.float32)
    branches[0] = denoise(noisy, weights)
    for mid in SPATIAL_IDS:
        out = denoise(apply_spatial(noisy, mid), weights)
        branches[mid] = invert_spatial(out, mid)
    masked = np.stack([apply_frequency_mask(noisy, build_mask(lo, hi, h, w))
                       for lo, hi in mask_catalog])
    branches[list(FREQUENCY_IDS)] = denoise(masked, weights)
    return EnsembleStack(branches, noisy, None if sigma is None else float(sigma),
                         tuple(ManipulationId), tuple(tuple(m) for m in mask_catalog))


def average_fuse(stack, subset="joint"):
    """Plain mean over branch 0 and the chosen subset."""
    branches = stack.select(subset) if isinstance(stack, EnsembleStack) else np.asarray(stack)
    return branches.mean(axis=0, dtype=np.float64).astype(np.float32)


def dump_stack(stack, directory):
    """Write each branch as an 8-bit PNG plus a ``manifest.csv``."""
    os.makedirs(directory, exist_ok=True)
    with open(os.path.join(directory, "manifest.csv"), "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["index", "manipulation", "kind", "parameters", "file"])
        for mid in stack.provenance:
            name = f"branch_{int(mid):02d}.png"
            if mid.kind == "frequency":
                lo, hi = stack.mask_catalog[mid - 8]
                params = f"r_low_frac={lo};r_high_frac={hi}"
            else:
                params = mid.label
            save_gray(os.path.join(directory, name), stack.branches[mid])
            writer.writerow([int(mid), mid.name, mid.kind, params, name])


class SelfEnsemble(TransformerMixin, BaseEstimator):
    """Turn noisy images into ``[N, 13, H, W]`` branch stacks.

    ``backbone`` is a backbone :class:`WeightArchive` or a fitted
    :class:`ResidualDenoiser`; it is used read-only.
    """

    def __init__(self, backbone=None, mask_catalog=MASK_CATALOG):
        self.backbone = backbone
        self.mask_catalog = mask_catalog

    def fit(self, X=None, y=None):
        self.weights_ = _as_archive(self.backbone)
        spec_of(self.weights_)
        return self

    def transform(self, X):
        check_is_fitted(self, "weights_")
        images = check_images(X, allow_out_of_range=True)
        stacks = [build_stack(im, self.weights_, self.mask_catalog).branches for im in images]
        if len({s.shape for s in stacks}) == 1:
            return np.stack(stacks)
        return stacks
