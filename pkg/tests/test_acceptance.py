"""Acceptance suite: one pass/fail line per criterion, listed after the run.

Criteria 4 and 5 train a desk-scale pipeline (20 backbone crops, 20 fusion
crops, 5 held-out test crops, sigma 25, fixed seeds) once per session.
"""

import itertools
import math
import time

import numpy as np
import pytest
from conftest import ACCEPTANCE_LINES

from selfensemble import cli
from selfensemble.analysis import correlation_matrix, evaluation_report, pixel_errors
from selfensemble.backbone import add_awgn, extract_patches, train_backbone
from selfensemble.core import (
    Parameter,
    Tensor,
    backward,
    concat,
    conv2d,
    fully_connected,
    global_average_pool,
    mse_loss,
    mul,
    numerical_gradient,
    relative_error,
    relu,
    reshape,
    softmax_over_channels,
    sum_,
)
from selfensemble.datasets import desk_corpus
from selfensemble.ensemble import build_stack
from selfensemble.fusion import FusionWeights, channel_attention, single_path_fuse, spatial_attention, train_fusion
from selfensemble.transforms import (
    FREQUENCY_IDS,
    MASK_CATALOG,
    SPATIAL_IDS,
    apply_frequency_mask,
    apply_spatial,
    build_mask,
    dct2,
    idct2,
    invert_spatial,
)

SIGMA = 25.0
SEED = 0
BACKBONE_EPOCHS = 40
FUSION_EPOCHS = 100

# tolerances
GRAD_EPS, GRAD_TOL, GRAD_BUDGET_S = 1e-3, 1e-3, 60.0
DCT_ROUND_TRIP_TOL, DCT_ORACLE_TOL = 1e-5, 1e-5
IDEMPOTENCE_TOL = 1e-4
DUAL_MARGIN_DB = 0.05
CORRELATION_RATIO = 1.5
NORMALIZATION_TOL, CONVEXITY_TOL = 1e-6, 1e-6


def record(number, title, ok, detail=""):
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {title}"
    ACCEPTANCE_LINES[number] = line + (f" ({detail})" if detail else "")
    print(ACCEPTANCE_LINES[number])
    return ok


# ---------------------------------------------------------------- 1. numerical core

def _operator_cases(rng):
    """(name, parameters, loss builder) for every differentiable operator."""
    def p(shape, name, away_from_zero=False):
        x = rng.standard_normal(shape)
        if away_from_zero:
            x = np.where(np.abs(x) < 0.05, x + 0.1 * np.sign(x + 1e-12), x)
        return Parameter(x, name)

    def target(shape):
        return Tensor(rng.standard_normal(shape))

    x, k, b = p((2, 3, 5, 4), "x"), p((2, 3, 3, 3), "k"), p((2,), "b")
    t_conv = target((2, 2, 5, 4))
    yield "conv2d", [x, k, b], lambda: mse_loss(conv2d(x, k, b), t_conv)
    r = p((2, 3, 4, 4), "r", away_from_zero=True)
    t_relu = target((2, 3, 4, 4))
    yield "relu", [r], lambda: mse_loss(relu(r), t_relu)
    s = p((2, 5, 3, 3), "s")
    t_soft = Tensor(rng.random((2, 5, 3, 3)))
    yield "softmax_over_channels", [s], lambda: mse_loss(softmax_over_channels(s), t_soft)
    g = p((3, 4, 5, 5), "g")
    t_pool = target((3, 4, 1, 1))
    yield "global_average_pool", [g], lambda: mse_loss(global_average_pool(g), t_pool)
    f, w, fb = p((3, 4), "f"), p((2, 4), "w"), p((2,), "fb")
    t_fc = target((3, 2))
    yield "fully_connected", [f, w, fb], lambda: mse_loss(fully_connected(f, w, fb), t_fc)
    m, c = p((2, 3, 4, 4), "m"), p((2, 3, 1, 1), "c")
    t_glue = target((2, 2, 4, 4))
    yield "mul+sum_+concat+sub+add", [m, c], lambda: mse_loss(
        concat([sum_(mul(m, c), axis=1, keepdims=True), sum_((m - c) + m, axis=1, keepdims=True)], axis=1),
        t_glue)
    q = p((2, 6), "q")
    t_reshape = target((2, 3, 2, 1))
    yield "reshape", [q], lambda: mse_loss(reshape(q, (2, 3, 2, 1)), t_reshape)
    a, z = p((2, 3), "a"), p((2, 3), "z")
    yield "mse_loss", [a, z], lambda: mse_loss(a, z)


def test_criterion_1_gradient_checks():
    start = time.perf_counter()
    worst = {}
    for seed in range(10):
        for name, params, loss in _operator_cases(np.random.default_rng(seed)):
            backward(loss())
            for prm in params:
                numeric = numerical_gradient(lambda: loss().item(), prm.data, GRAD_EPS)
                worst[name] = max(worst.get(name, 0.0), relative_error(prm.grad, numeric))
    elapsed = time.perf_counter() - start
    ok = all(v < GRAD_TOL for v in worst.values()) and elapsed < GRAD_BUDGET_S
    record(1, "finite-difference gradient checks, 10 tensors per operator", ok,
           f"{len(worst)} operator groups, worst rel err {max(worst.values()):.2e} "
           f"< {GRAD_TOL:g}, {elapsed:.1f}s < {GRAD_BUDGET_S:g}s")
    assert ok, worst


# ---------------------------------------------------------------- 2. transforms

def _naive_dct2(x):
    h, w = x.shape
    out = np.zeros((h, w))
    for u, v in itertools.product(range(h), range(w)):
        au = math.sqrt((1.0 if u == 0 else 2.0) / h)
        av = math.sqrt((1.0 if v == 0 else 2.0) / w)
        acc = 0.0
        for i, j in itertools.product(range(h), range(w)):
            acc += x[i, j] * math.cos(math.pi * (2 * i + 1) * u / (2 * h)) \
                * math.cos(math.pi * (2 * j + 1) * v / (2 * w))
        out[u, v] = au * av * acc
    return out


def test_criterion_2_transform_exactness():
    rng = np.random.default_rng(2)
    round_trip = 0.0
    for _ in range(100):
        h, w = rng.integers(1, 65, size=2)
        x = rng.random((h, w)).astype(np.float32)
        round_trip = max(round_trip, float(np.max(np.abs(idct2(dct2(x)) - x))))
    oracle = 0.0
    for h, w in [(1, 1), (2, 3), (4, 4), (5, 7), (8, 8), (8, 3)]:
        x = rng.random((h, w))
        oracle = max(oracle, float(np.max(np.abs(dct2(x) - _naive_dct2(x)))))
    exact = True
    for mid in SPATIAL_IDS:
        x = rng.random((13, 9)).astype(np.float32)
        exact &= invert_spatial(apply_spatial(x, mid), mid).tobytes() == x.tobytes()
    ok = round_trip < DCT_ROUND_TRIP_TOL and oracle < DCT_ORACLE_TOL and exact
    record(2, "DCT round trip, naive DCT oracle, bit-exact SM round trips", ok,
           f"round trip {round_trip:.1e}, oracle {oracle:.1e}, SM exact={exact}")
    assert ok


# ---------------------------------------------------------------- 3. mask geometry

def test_criterion_3_mask_geometry():
    sizes = [(n, n) for n in range(8, 65)] + [(8, 64), (64, 8), (17, 40), (33, 21)]
    mismatches = 0
    for h, w in sizes:
        r_max = math.hypot(h - 1, w - 1)
        for lo, hi in MASK_CATALOG:
            brute = {(u, v) for u in range(h) for v in range(w)
                     if lo * r_max <= math.sqrt(u * u + v * v) <= hi * r_max}
            got = {tuple(map(int, p)) for p in np.argwhere(build_mask(lo, hi, h, w).values == 0)}
            mismatches += got != brute
    nested = True
    for h, w in [(8, 8), (31, 17), (64, 64)]:
        z1, z2, z3 = (build_mask(lo, hi, h, w).values == 0 for lo, hi in MASK_CATALOG[:3])
        nested &= bool(np.all(z3 <= z2) and np.all(z2 <= z1))
    rng = np.random.default_rng(3)
    idem = 0.0
    for lo, hi in MASK_CATALOG:
        for _ in range(10):
            h, w = rng.integers(8, 65, size=2)
            mask = build_mask(lo, hi, h, w)
            once = apply_frequency_mask(rng.random((h, w)).astype(np.float32), mask)
            idem = max(idem, float(np.max(np.abs(apply_frequency_mask(once, mask) - once))))
    ok = mismatches == 0 and nested and idem < IDEMPOTENCE_TOL
    record(3, "mask zero-sets match brute force 8x8..64x64, nesting, idempotence", ok,
           f"{mismatches} mismatching masks of {len(sizes) * len(MASK_CATALOG)}, nested={nested}, "
           f"idempotence err {idem:.1e}")
    assert ok


# ---------------------------------------------------------------- desk pipeline

@pytest.fixture(scope="session")
def desk_run():
    start = time.perf_counter()
    corpus = desk_corpus(seed=SEED)
    patches = extract_patches([im for _, im in corpus["backbone"]])
    backbone, backbone_losses = train_backbone(patches, SIGMA, BACKBONE_EPOCHS,
                                               seed=cli.derive_seed(SEED, "backbone"))

    def noisy_pairs(split):
        return ([add_awgn(im, SIGMA, cli.derive_seed(SEED, "awgn", split, i))
                 for i, (_, im) in enumerate(corpus[split])], [im for _, im in corpus[split]])

    fusion_noisy, fusion_clean = noisy_pairs("fusion")
    test_noisy, test_clean = noisy_pairs("test")
    fusion_stacks = [build_stack(x, backbone, sigma=SIGMA) for x in fusion_noisy]
    test_stacks = [build_stack(x, backbone, sigma=SIGMA) for x in test_noisy]
    backbone_bytes = backbone.to_bytes()
    models, losses = {}, {}
    for mode in ("spatial", "channel", "dual"):
        weights, curve = train_fusion(fusion_stacks, fusion_clean, mode=mode, subset="joint",
                                      epochs=FUSION_EPOCHS, seed=cli.derive_seed(SEED, "fusion", mode))
        models[(mode, "joint")], losses[mode] = weights, curve
    frozen = backbone.to_bytes() == backbone_bytes
    report = evaluation_report(test_noisy, test_clean, backbone, models, stacks=test_stacks)
    errors = np.concatenate([pixel_errors(s, c) for s, c in zip(test_stacks, test_clean)])
    return {
        "report": report, "correlation": correlation_matrix(errors), "frozen": frozen,
        "backbone_losses": backbone_losses, "fusion_losses": losses,
        "seconds": time.perf_counter() - start,
    }


def test_criterion_4_directional_table(desk_run):
    rep = desk_run["report"]
    base, dual = rep[("baseline", "-")], rep[("dual", "joint")]
    spatial, channel = rep[("spatial", "joint")], rep[("channel", "joint")]
    avg_joint, avg_fm = rep[("ensemble", "joint")], rep[("ensemble", "fm")]
    checks = {
        "dual >= baseline + 0.05": dual >= base + DUAL_MARGIN_DB,
        "dual >= spatial": dual >= spatial,
        "dual >= channel": dual >= channel,
        "spatial >= avg-joint": spatial >= avg_joint,
        "channel >= avg-joint": channel >= avg_joint,
        "avg-fm < baseline": avg_fm < base,
    }
    failed = [k for k, v in checks.items() if not v]
    detail = (f"baseline {base:.3f}, avg-fm {avg_fm:.3f}, avg-joint {avg_joint:.3f}, "
              f"spatial {spatial:.3f}, channel {channel:.3f}, dual {dual:.3f} dB; "
              f"run {desk_run['seconds'] / 60:.1f} min"
              + (f"; failed: {', '.join(failed)}" if failed else ""))
    record(4, "desk-scale PSNR ordering at sigma 25", not failed, detail)
    assert not failed, detail


def test_criterion_5_error_correlation(desk_run):
    m = desk_run["correlation"]
    sm = m.mean_abs_offdiagonal([int(i) for i in SPATIAL_IDS])
    fm = m.mean_abs_offdiagonal([int(i) for i in FREQUENCY_IDS])
    ok = sm >= CORRELATION_RATIO * fm
    record(5, "SM errors more correlated than FM errors", ok,
           f"mean |r| SM {sm:.3f}, FM {fm:.3f}, ratio {sm / fm:.2f} vs required {CORRELATION_RATIO}")
    assert ok


# ---------------------------------------------------------------- 6. contracts

def _cli_pipeline(root, out):
    args = ["--config", str(root / "run.ini"), "--out", str(root / out)]
    return [cli.main([command, *args]) for command in
            ("prepare", "train-backbone", "train-fusion", "evaluate", "analyze")]


def test_criterion_6_frozen_backbone_and_determinism(desk_run, tmp_path):
    from test_cli import CONFIG, make_corpus

    make_corpus(tmp_path)
    (tmp_path / "run.ini").write_text(CONFIG)
    codes = _cli_pipeline(tmp_path, "a") + _cli_pipeline(tmp_path, "b")
    identical = all(
        (tmp_path / "a" / "results" / name).read_bytes() == (tmp_path / "b" / "results" / name).read_bytes()
        for name in ("evaluation.csv", "correlation_sigma_25.csv", "error_samples_sigma_25.csv"))
    ok = desk_run["frozen"] and set(codes) == {0} and identical
    record(6, "backbone frozen during fusion training; repeated pipeline byte-identical", ok,
           f"backbone unchanged={desk_run['frozen']}, exit codes {codes}, CSVs identical={identical}")
    assert ok


# ---------------------------------------------------------------- 7. normalization

def test_criterion_7_normalization_and_convexity():
    rng = np.random.default_rng(7)
    worst_sum, worst_excursion = 0.0, 0.0
    for trial in range(1000):
        subset = ("sm", "fm", "joint")[trial % 3]
        weights = FusionWeights.initialize(subset, hidden=8, seed=trial)
        if trial % 4:
            for prm in weights.params.values():
                prm.data[...] += (rng.standard_normal(prm.shape) * 2).astype(np.float32)
        h, w = rng.integers(3, 10, size=2)
        stack = (rng.random((weights.n_branches, h, w)) * rng.choice([1.0, 10.0])).astype(np.float32)
        maps, fused_sp = spatial_attention(stack, weights)
        scores, fused_ch = channel_attention(stack, weights)
        worst_sum = max(worst_sum, float(np.max(np.abs(maps.sum(axis=0, dtype=np.float64) - 1.0))),
                        abs(float(scores.sum(dtype=np.float64)) - 1.0))
        lo, hi = stack.min(axis=0), stack.max(axis=0)
        for fused in (fused_sp, fused_ch, single_path_fuse(stack, weights, "spatial")):
            worst_excursion = max(worst_excursion, float(np.max(lo - fused)), float(np.max(fused - hi)))
    ok = worst_sum <= NORMALIZATION_TOL and worst_excursion <= CONVEXITY_TOL
    record(7, "attention weights sum to 1 and single paths stay in the branch range, 1000 stacks", ok,
           f"max |sum - 1| {worst_sum:.1e}, max excursion {max(worst_excursion, 0.0):.1e}")
    assert ok
