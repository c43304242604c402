"""Error diagnostics and PSNR evaluation of the ensemble and its fusions."""

import csv
from dataclasses import dataclass

import numpy as np

from .ensemble import N_BRANCHES, SUBSETS, EnsembleStack, average_fuse, build_stack
from .fusion import fuse
from .transforms import MASK_CATALOG

METHODS = ("baseline", "ensemble", "spatial", "channel", "dual")
SUBSET_ORDER = ("sm", "fm", "joint")


def psnr(a, b, peak=1.0):
    """Peak signal-to-noise ratio in dB; ``inf`` for identical inputs."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    mse = np.mean((a - b) ** 2)
    if mse == 0:
        return float("inf")
    return float(10.0 * np.log10(peak * peak / mse))


@dataclass(frozen=True, eq=False)
class CorrelationMatrix:
    """Pairwise Pearson r between branch errors; NaN rows mark branches with
    zero error variance."""

    values: np.ndarray
    ordering: tuple = tuple(range(N_BRANCHES))

    def mean_abs_offdiagonal(self, indices):
        idx = list(indices)
        block = np.abs(self.values[np.ix_(idx, idx)])
        mask = ~np.eye(len(idx), dtype=bool)
        return float(np.mean(block[mask]))


@dataclass(frozen=True)
class ErrorSample:
    row: int
    col: int
    residuals: tuple
    image_id: str = ""
    sigma: float = None


def correlation_matrix(errors):
    """Pearson correlation between branches.

    ``errors`` is a sequence of :class:`ErrorSample` or an array of shape
    ``[n_samples, n_branches]``.
    """
    if len(errors) and isinstance(errors[0], ErrorSample):
        data = np.array([e.residuals for e in errors], dtype=np.float64)
    else:
        data = np.asarray(errors, dtype=np.float64)
    if data.ndim != 2 or data.shape[0] < 2:
        raise ValueError(f"need at least 2 samples of per-branch errors, got shape {data.shape}")
    centered = data - data.mean(axis=0)
    norms = np.sqrt((centered ** 2).sum(axis=0))
    # a constant column can leave rounding residue after centering
    defined = (np.ptp(data, axis=0) > 0) & (norms > 0)
    with np.errstate(invalid="ignore", divide="ignore"):
        r = (centered.T @ centered) / np.outer(norms, norms)
    r = np.clip(r, -1.0, 1.0)
    r = (r + r.T) / 2.0
    np.fill_diagonal(r, 1.0)
    r[~defined, :] = np.nan
    r[:, ~defined] = np.nan
    return CorrelationMatrix(r, tuple(range(data.shape[1])))


def pixel_errors(stack, clean):
    """All per-pixel residuals ``branch - clean`` as ``[H*W, n_branches]``."""
    clean = np.asarray(clean, dtype=np.float32)
    return (stack.branches - clean[None]).reshape(stack.branches.shape[0], -1).T


def error_distribution(stack, clean, n_pixels=50, seed=0, image_id="", sigma=None):
    """Residuals of every branch at ``n_pixels`` pixels drawn without replacement."""
    clean = np.asarray(clean, dtype=np.float32)
    h, w = clean.shape
    if n_pixels > h * w:
        raise ValueError(f"cannot sample {n_pixels} pixels from a {h}x{w} image")
    rng = np.random.Generator(np.random.Philox(seed))
    flat = np.sort(rng.choice(h * w, size=n_pixels, replace=False))
    sigma = stack.sigma if sigma is None else sigma
    samples = []
    for p in flat:
        r, c = divmod(int(p), w)
        res = tuple(float(v) for v in stack.branches[:, r, c] - clean[r, c])
        samples.append(ErrorSample(r, c, res, image_id, sigma))
    return samples


def evaluation_report(noisy, clean, backbone, fusion_models, mask_catalog=MASK_CATALOG,
                      sigma=None, stacks=None):
    """Mean test PSNR per (method, subset).

    ``fusion_models`` maps ``(mode, subset)`` to trained ``FusionWeights``;
    missing entries are skipped. Returns a dict keyed by ``(method, subset)``
    with subset ``"-"`` for the baseline.
    """
    if stacks is None:
        stacks = [build_stack(x, backbone, mask_catalog, sigma) for x in noisy]
    scores = {("baseline", "-"): []}
    for subset in SUBSET_ORDER:
        scores[("ensemble", subset)] = []
    for mode in ("spatial", "channel", "dual"):
        for subset in SUBSET_ORDER:
            if (mode, subset) in fusion_models:
                scores[(mode, subset)] = []
    for stack, target in zip(stacks, clean):
        scores[("baseline", "-")].append(psnr(stack.branches[0], target))
        for subset in SUBSET_ORDER:
            scores[("ensemble", subset)].append(psnr(average_fuse(stack, subset), target))
        for (mode, subset), weights in fusion_models.items():
            scores[(mode, subset)].append(psnr(fuse(stack, weights, mode), target))
    return {key: float(np.mean(vals)) for key, vals in scores.items()}


def table_rows(reports):
    """Flatten ``{sigma: report}`` into rows ordered by method then subset."""
    sigmas = sorted(reports)
    keys = [("baseline", "-")] + [(m, s) for m in METHODS[1:] for s in SUBSET_ORDER]
    rows = []
    for key in keys:
        if not any(key in reports[s] for s in sigmas):
            continue
        rows.append([key[0], key[1]] + [reports[s].get(key, float("nan")) for s in sigmas])
    return sigmas, rows


def _fmt(x):
    return "inf" if x == float("inf") else ("nan" if x != x else f"{x:.6f}")


def write_evaluation_csv(path, reports):
    sigmas, rows = table_rows(reports)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["method", "subset"] + [f"sigma_{s:g}" for s in sigmas])
        for row in rows:
            writer.writerow(row[:2] + [_fmt(v) for v in row[2:]])


def read_evaluation_csv(path):
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader)
        sigmas = [float(h.split("_", 1)[1]) for h in header[2:]]
        table = {s: {} for s in sigmas}
        for row in reader:
            for s, v in zip(sigmas, row[2:]):
                table[s][(row[0], row[1])] = float(v)
    return table


def write_correlation_csv(path, matrix):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["index"] + [str(i) for i in matrix.ordering])
        for i, row in zip(matrix.ordering, matrix.values):
            writer.writerow([str(i)] + [_fmt(v) for v in row])


def read_correlation_csv(path):
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    return np.array([[float(v) for v in r[1:]] for r in rows[1:]])


def write_error_samples_csv(path, samples):
    """Long format: one row per (sample, branch)."""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["image_id", "sigma", "row", "col", "branch", "residual"])
        for s in samples:
            for b, r in enumerate(s.residuals):
                writer.writerow([s.image_id, _fmt(s.sigma) if s.sigma is not None else "",
                                 s.row, s.col, b, f"{r:.8f}"])


__all__ = [
    "CorrelationMatrix", "ErrorSample", "EnsembleStack", "SUBSETS", "correlation_matrix",
    "error_distribution", "evaluation_report", "pixel_errors", "psnr", "read_correlation_csv",
    "read_evaluation_csv", "table_rows", "write_correlation_csv", "write_error_samples_csv",
    "write_evaluation_csv",
]
