"""Command-line pipeline: prepare data, train, evaluate, analyze, denoise one image.

Every subcommand reads the same key-value config file (``--config``) and
accepts ``--seed``, ``--sigma`` and ``--out`` overrides. Layout under the
output directory::

    prepared/sigma_<s>/{backbone,fusion,test}/<name>_{clean,noisy}.npy
    prepared/sigma_<s>/manifest.csv
    models/backbone_sigma_<s>.sear
    models/fusion_<mode>_<subset>_sigma_<s>.sear
    logs/<model>.csv                        (epoch, loss)
    results/evaluation.csv
    results/correlation_sigma_<s>.csv
    results/error_samples_sigma_<s>.csv
    results/correlation_summary.csv

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

import argparse
import configparser
import csv
import hashlib
import logging
import os
import sys
import tempfile
from dataclasses import dataclass, fields, replace

import numpy as np

from .analysis import (
    correlation_matrix,
    error_distribution,
    evaluation_report,
    pixel_errors,
    write_correlation_csv,
    write_error_samples_csv,
    write_evaluation_csv,
)
from .archive import ArchiveError, WeightArchive
from .backbone import DenoiserSpec, add_awgn, extract_patches, train_backbone
from .ensemble import build_stack
from .fusion import MODES, FusionWeights, fuse, train_fusion
from .imageio import load_gray, save_gray
from .transforms import FREQUENCY_IDS, MASK_CATALOG, SPATIAL_IDS, parse_mask_catalog
from .validation import NumericalError, derive_seed

logger = logging.getLogger(__name__)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 1, 2, 3
SPLITS = ("backbone", "fusion", "test")
SUBSET_NAMES = ("sm", "fm", "joint")
ALL_MODELS = tuple(f"{mode}:{subset}" for mode in ("spatial", "channel", "dual") for subset in SUBSET_NAMES)


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


# ---------------------------------------------------------------- config

def _floats(text):
    return tuple(float(v) for v in str(text).replace(" ", "").split(",") if v)


def _models(text):
    items = tuple(v for v in str(text).replace(" ", "").split(",") if v)
    for item in items:
        mode, _, subset = item.partition(":")
        if mode not in MODES or subset not in SUBSET_NAMES:
            raise UsageError(f"bad fusion model {item!r}; expected <mode>:<subset> with mode in "
                             f"{MODES} and subset in {SUBSET_NAMES}")
    return items


@dataclass(frozen=True)
class PipelineConfig:
    backbone_dir: str = ""
    fusion_dir: str = ""
    test_dir: str = ""
    out: str = "selfensemble-run"
    sigmas: tuple = (10.0, 20.0, 30.0, 40.0, 50.0)
    seed: int = 0
    backbone_epochs: int = 40
    backbone_depth: int = 7
    backbone_channels: int = 32
    patch_size: int = 40
    patch_stride: int = 20
    fusion_epochs: int = 100
    fusion_models: tuple = ALL_MODELS
    fusion_hidden: int = 32
    fusion_crop: int = 48
    fusion_crops_per_image: int = 4
    mask_catalog: tuple = MASK_CATALOG
    error_pixels: int = 50

    def validate(self):
        if not self.sigmas:
            raise UsageError("at least one sigma is required")
        if any(s < 0 or not np.isfinite(s) for s in self.sigmas):
            raise UsageError(f"sigmas must be non-negative, got {self.sigmas}")
        for name in ("backbone_epochs", "fusion_epochs"):
            if getattr(self, name) < 0:
                raise UsageError(f"{name} must be >= 0")
        for name in ("backbone_depth", "backbone_channels", "patch_size", "patch_stride",
                     "fusion_hidden", "fusion_crop", "fusion_crops_per_image", "error_pixels"):
            if getattr(self, name) < 1:
                raise UsageError(f"{name} must be >= 1")
        if self.backbone_depth < 2:
            raise UsageError("backbone_depth must be >= 2")
        dirs = [os.path.realpath(d) for d in (self.backbone_dir, self.fusion_dir, self.test_dir) if d]
        if len(set(dirs)) != len(dirs):
            raise UsageError("backbone_dir, fusion_dir and test_dir must be distinct directories")
        return self

    def split_dir(self, split):
        return getattr(self, f"{split}_dir")


_CONVERTERS = {
    "sigmas": _floats,
    "fusion_models": _models,
    "mask_catalog": lambda text: tuple(parse_mask_catalog(_read_catalog(text))),
}


def _read_catalog(text):
    text = str(text).strip()
    if os.path.isfile(text):
        with open(text) as f:
            return f.read()
    # inline form: "0.1:1.0, 0.3:1.0, ..."
    pairs = [p.split(":") for p in text.replace(" ", "").split(",") if p]
    return "\n".join(f"{FREQUENCY_IDS[0] + i},{lo},{hi}" for i, (lo, hi) in enumerate(pairs))


def _convert(name, value):
    if name in _CONVERTERS:
        return _CONVERTERS[name](value)
    default = {f.name: f.default for f in fields(PipelineConfig)}[name]
    return type(default)(value)


def load_config(path=None, overrides=None):
    """Build a :class:`PipelineConfig` from an optional key-value file plus
    overrides; overrides win. The file may omit a section header, otherwise
    keys are read from ``[pipeline]``."""
    known = {f.name for f in fields(PipelineConfig)}
    values = {}
    if path:
        if not os.path.isfile(path):
            raise UsageError(f"config file not found: {path}")
        with open(path) as f:
            text = f.read()
        parser = configparser.ConfigParser()
        try:
            if not text.lstrip().startswith("["):
                text = "[pipeline]\n" + text
            parser.read_string(text)
        except configparser.Error as exc:
            raise UsageError(f"cannot parse config {path}: {exc}") from exc
        if "pipeline" not in parser:
            raise UsageError(f"config {path} has no [pipeline] section")
        base = os.path.dirname(os.path.abspath(path))
        for key, raw in parser["pipeline"].items():
            if key not in known:
                raise UsageError(f"unknown config key {key!r}")
            if key.endswith("_dir") or key == "out":
                raw = os.path.join(base, raw) if raw and not os.path.isabs(raw) else raw
            values[key] = raw
    for key, raw in (overrides or {}).items():
        if raw is not None:
            values[key] = raw
    try:
        converted = {k: (_convert(k, v) if isinstance(v, str) else v) for k, v in values.items()}
    except (ValueError, TypeError) as exc:
        raise UsageError(f"bad config value: {exc}") from exc
    return replace(PipelineConfig(), **converted).validate()


# ---------------------------------------------------------------- paths and output

def _sig(sigma):
    return f"{sigma:g}"


def prepared_dir(cfg, sigma):
    return os.path.join(cfg.out, "prepared", f"sigma_{_sig(sigma)}")


def backbone_path(cfg, sigma):
    return os.path.join(cfg.out, "models", f"backbone_sigma_{_sig(sigma)}.sear")


def fusion_path(cfg, model, sigma):
    mode, subset = model.split(":")
    return os.path.join(cfg.out, "models", f"fusion_{mode}_{subset}_sigma_{_sig(sigma)}.sear")


def _claim(paths):
    """Refuse to overwrite: outputs are written once per run directory."""
    taken = [p for p in paths if os.path.exists(p)]
    if taken:
        raise DataError(f"output already exists: {taken[0]} (use a fresh --out directory)")


def _atomic_write(path, write):
    """Write via a temporary file in the target directory, then rename."""
    directory = os.path.dirname(path) or "."
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    os.close(fd)
    try:
        write(tmp)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.remove(tmp)


def _write_csv(path, header, rows):
    def write(tmp):
        with open(tmp, "w", newline="") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(header)
            writer.writerows(rows)
    _atomic_write(path, write)


def _write_loss_log(cfg, name, losses):
    _write_csv(os.path.join(cfg.out, "logs", f"{name}.csv"), ["epoch", "loss"],
               [[e, f"{v:.9g}"] for e, v in enumerate(losses)])


def _save_archive(path, archive):
    _atomic_write(path, archive.save)


def _load_archive(path):
    if not os.path.isfile(path):
        raise DataError(f"missing archive {path}; run the training command first")
    try:
        return WeightArchive.load(path)
    except (ArchiveError, OSError) as exc:
        raise DataError(f"cannot read archive {path}: {exc}") from exc


def _file_hash(path):
    with open(path, "rb") as f:
        return hashlib.sha256(f.read()).hexdigest()


# ---------------------------------------------------------------- data

def _list_images(directory):
    if not directory:
        raise DataError("corpus directory not configured")
    if not os.path.isdir(directory):
        raise DataError(f"corpus directory not found: {directory}")
    names = sorted(n for n in os.listdir(directory) if n.lower().endswith(".png"))
    if not names:
        raise DataError(f"no PNG images in {directory}")
    return [os.path.join(directory, n) for n in names]


def _read_corpus(cfg, split):
    items = []
    for path in _list_images(cfg.split_dir(split)):
        try:
            items.append((os.path.splitext(os.path.basename(path))[0], load_gray(path)))
        except OSError as exc:
            raise DataError(f"cannot read image {path}: {exc}") from exc
    return items


def _read_prepared(cfg, sigma, split):
    """``[(name, noisy, clean)]`` for a prepared split, in manifest order."""
    root = prepared_dir(cfg, sigma)
    manifest = os.path.join(root, "manifest.csv")
    if not os.path.isfile(manifest):
        raise DataError(f"missing {manifest}; run 'prepare' first")
    with open(manifest, newline="") as f:
        rows = [r for r in csv.DictReader(f) if r["split"] == split]
    if not rows:
        raise DataError(f"no {split} images in {manifest}")
    out = []
    for r in rows:
        try:
            noisy = np.load(os.path.join(root, r["noisy_file"]))
            clean = np.load(os.path.join(root, r["clean_file"]))
        except OSError as exc:
            raise DataError(f"cannot read prepared pair {r['name']}: {exc}") from exc
        out.append((r["name"], noisy, clean))
    return out


# ---------------------------------------------------------------- commands

def cmd_prepare(cfg):
    """Write noisy/clean float32 pairs and a manifest for every sigma."""
    corpora = {split: _read_corpus(cfg, split) for split in SPLITS}
    _claim([prepared_dir(cfg, s) for s in cfg.sigmas])
    for sigma in cfg.sigmas:
        root = prepared_dir(cfg, sigma)
        rows = []
        for split in SPLITS:
            os.makedirs(os.path.join(root, split))
            for index, (name, clean) in enumerate(corpora[split]):
                seed = derive_seed(cfg.seed, "awgn", split, index, _sig(sigma))
                noisy = add_awgn(clean, sigma, seed) if sigma > 0 else clean.copy()
                clean_file = os.path.join(split, f"{name}_clean.npy")
                noisy_file = os.path.join(split, f"{name}_noisy.npy")
                np.save(os.path.join(root, clean_file), clean)
                np.save(os.path.join(root, noisy_file), noisy)
                std = float(np.std(noisy.astype(np.float64) - clean) * 255.0)
                rows.append([split, name, _sig(sigma), seed, clean_file, noisy_file, f"{std:.6f}"])
        _write_csv(os.path.join(root, "manifest.csv"),
                   ["split", "name", "sigma", "seed", "clean_file", "noisy_file", "noise_std"], rows)
        logger.info("prepared sigma=%s: %d pairs", _sig(sigma), len(rows))
    return EXIT_OK


def cmd_train_backbone(cfg):
    spec = DenoiserSpec(depth=cfg.backbone_depth, channels=cfg.backbone_channels)
    data = {s: _read_prepared(cfg, s, "backbone") for s in cfg.sigmas}
    _claim([backbone_path(cfg, s) for s in cfg.sigmas])
    for sigma in cfg.sigmas:
        images = [clean for _, _, clean in data[sigma]]
        if min(min(im.shape) for im in images) < cfg.patch_size:
            raise DataError(f"backbone images are smaller than patch_size={cfg.patch_size}")
        patches = extract_patches(images, cfg.patch_size, cfg.patch_stride)
        archive, losses = train_backbone(patches, sigma, cfg.backbone_epochs,
                                         seed=derive_seed(cfg.seed, "backbone", _sig(sigma)), spec=spec)
        _save_archive(backbone_path(cfg, sigma), archive)
        _write_loss_log(cfg, f"backbone_sigma_{_sig(sigma)}", losses)
    return EXIT_OK


def _stacks(cfg, sigma, split, backbone):
    pairs = _read_prepared(cfg, sigma, split)
    stacks = [build_stack(noisy, backbone, cfg.mask_catalog, sigma) for _, noisy, _ in pairs]
    return pairs, stacks


def cmd_train_fusion(cfg):
    backbones = {s: _load_archive(backbone_path(cfg, s)) for s in cfg.sigmas}
    _claim([fusion_path(cfg, m, s) for s in cfg.sigmas for m in cfg.fusion_models])
    for sigma in cfg.sigmas:
        path = backbone_path(cfg, sigma)
        before = _file_hash(path)
        pairs, stacks = _stacks(cfg, sigma, "fusion", backbones[sigma])
        clean = [c for _, _, c in pairs]
        for model in cfg.fusion_models:
            mode, subset = model.split(":")
            weights, losses = train_fusion(
                stacks, clean, mode=mode, subset=subset, epochs=cfg.fusion_epochs,
                seed=derive_seed(cfg.seed, "fusion", mode, subset, _sig(sigma)),
                hidden=cfg.fusion_hidden, crop_size=cfg.fusion_crop,
                crops_per_image=cfg.fusion_crops_per_image)
            meta = {"sigma": sigma, "epochs": cfg.fusion_epochs, "backbone_sha256": before}
            _save_archive(fusion_path(cfg, model, sigma), weights.to_archive(meta))
            _write_loss_log(cfg, f"fusion_{mode}_{subset}_sigma_{_sig(sigma)}", losses)
        if _file_hash(path) != before:
            raise DataError(f"backbone archive {path} changed during fusion training")
    return EXIT_OK


def _fusion_models(cfg, sigma):
    return {tuple(m.split(":")): FusionWeights.from_archive(_load_archive(fusion_path(cfg, m, sigma)))
            for m in cfg.fusion_models}


def cmd_evaluate(cfg):
    target = os.path.join(cfg.out, "results", "evaluation.csv")
    loaded = {s: (_load_archive(backbone_path(cfg, s)), _fusion_models(cfg, s)) for s in cfg.sigmas}
    tests = {s: _read_prepared(cfg, s, "test") for s in cfg.sigmas}
    _claim([target])
    reports = {}
    for sigma in cfg.sigmas:
        backbone, models = loaded[sigma]
        pairs = tests[sigma]
        reports[sigma] = evaluation_report([n for _, n, _ in pairs], [c for _, _, c in pairs],
                                           backbone, models, cfg.mask_catalog, sigma)
        if any(np.isnan(v) for v in reports[sigma].values()):
            raise NumericalError(f"NaN PSNR at sigma={_sig(sigma)}")
    _atomic_write(target, lambda tmp: write_evaluation_csv(tmp, reports))
    logger.info("wrote %s", target)
    return EXIT_OK


def correlation_summary(matrix):
    sm = matrix.mean_abs_offdiagonal([int(i) for i in SPATIAL_IDS])
    fm = matrix.mean_abs_offdiagonal([int(i) for i in FREQUENCY_IDS])
    return sm, fm


def cmd_analyze(cfg):
    results = os.path.join(cfg.out, "results")
    targets = [os.path.join(results, f"correlation_sigma_{_sig(s)}.csv") for s in cfg.sigmas]
    targets += [os.path.join(results, f"error_samples_sigma_{_sig(s)}.csv") for s in cfg.sigmas]
    targets.append(os.path.join(results, "correlation_summary.csv"))
    backbones = {s: _load_archive(backbone_path(cfg, s)) for s in cfg.sigmas}
    for s in cfg.sigmas:
        _read_prepared(cfg, s, "test")
    _claim(targets)
    summary = []
    for sigma in cfg.sigmas:
        pairs, stacks = _stacks(cfg, sigma, "test", backbones[sigma])
        errors = np.concatenate([pixel_errors(st, c) for st, (_, _, c) in zip(stacks, pairs)])
        matrix = correlation_matrix(errors)
        samples = []
        for index, (st, (name, _, clean)) in enumerate(zip(stacks, pairs)):
            n = min(cfg.error_pixels, clean.size)
            samples += error_distribution(st, clean, n, derive_seed(cfg.seed, "pixels", index, _sig(sigma)),
                                          image_id=name, sigma=sigma)
        tag = _sig(sigma)
        _atomic_write(os.path.join(results, f"correlation_sigma_{tag}.csv"),
                      lambda tmp: write_correlation_csv(tmp, matrix))
        _atomic_write(os.path.join(results, f"error_samples_sigma_{tag}.csv"),
                      lambda tmp: write_error_samples_csv(tmp, samples))
        sm, fm = correlation_summary(matrix)
        summary.append([tag, f"{sm:.6f}", f"{fm:.6f}", f"{sm / fm:.6f}" if fm > 0 else "nan"])
    _write_csv(os.path.join(results, "correlation_summary.csv"),
               ["sigma", "sm_mean_abs_r", "fm_mean_abs_r", "sm_over_fm"], summary)
    return EXIT_OK


def cmd_denoise_one(cfg, args):
    if len(cfg.sigmas) != 1:
        raise UsageError("denoise-one needs exactly one --sigma")
    sigma = cfg.sigmas[0]
    model = f"{args.mode}:{args.subset}"
    _models(model)
    if not os.path.isfile(args.input):
        raise DataError(f"input image not found: {args.input}")
    backbone = _load_archive(backbone_path(cfg, sigma))
    weights = FusionWeights.from_archive(_load_archive(fusion_path(cfg, model, sigma)))
    _claim([args.output])
    try:
        image = load_gray(args.input)
    except OSError as exc:
        raise DataError(f"cannot read image {args.input}: {exc}") from exc
    if args.add_noise:
        image = add_awgn(image, sigma, derive_seed(cfg.seed, "denoise-one"))
    stack = build_stack(image, backbone, cfg.mask_catalog, sigma)
    fused = fuse(stack, weights, args.mode)
    if not np.all(np.isfinite(fused)):
        raise NumericalError("fused image contains NaN or Inf")
    _atomic_write(args.output, lambda tmp: save_gray(tmp, fused))
    return EXIT_OK


def cmd_make_corpus(cfg, args):
    from .datasets import write_desk_corpus

    _claim([os.path.join(args.directory, split) for split in SPLITS])
    write_desk_corpus(args.directory, size=args.size, seed=cfg.seed)
    return EXIT_OK


# ---------------------------------------------------------------- entry point

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser():
    common = _Parser(add_help=False)
    common.add_argument("--config", help="key-value config file ([pipeline] section optional)")
    common.add_argument("--seed", type=int, help="top-level seed (overrides config)")
    common.add_argument("--sigma", action="append",
                        help="noise level(s) on the 0-255 scale; repeat or comma-separate")
    common.add_argument("--out", help="output directory (overrides config)")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress")

    parser = _Parser(prog="selfensemble", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    sub.required = True
    sub.add_parser("prepare", parents=[common], help="add seeded AWGN to the three corpora")
    bb = sub.add_parser("train-backbone", parents=[common], help="train one residual denoiser per sigma")
    bb.add_argument("--epochs", type=int, dest="backbone_epochs")
    fu = sub.add_parser("train-fusion", parents=[common], help="train attention fusion on a frozen backbone")
    fu.add_argument("--epochs", type=int, dest="fusion_epochs")
    fu.add_argument("--models", dest="fusion_models", help="comma list of mode:subset")
    ev = sub.add_parser("evaluate", parents=[common], help="write the PSNR table")
    ev.add_argument("--models", dest="fusion_models", help="comma list of mode:subset")
    sub.add_parser("analyze", parents=[common], help="write error correlation and samples")
    one = sub.add_parser("denoise-one", parents=[common], help="fuse the ensemble for one PNG")
    one.add_argument("input")
    one.add_argument("output")
    one.add_argument("--mode", default="dual", choices=MODES)
    one.add_argument("--subset", default="joint", choices=SUBSET_NAMES)
    one.add_argument("--add-noise", action="store_true", help="corrupt the input with AWGN first")
    mk = sub.add_parser("make-corpus", parents=[common], help="write the bundled desk-scale corpus as PNGs")
    mk.add_argument("directory")
    mk.add_argument("--size", type=int, default=128)
    return parser


def _overrides(args):
    keys = ("seed", "out", "backbone_epochs", "fusion_epochs", "fusion_models")
    values = {k: getattr(args, k, None) for k in keys}
    if args.sigma:
        values["sigmas"] = ",".join(args.sigma)
    return values


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        cfg = load_config(args.config, _overrides(args))
        if args.command == "denoise-one":
            return cmd_denoise_one(cfg, args)
        if args.command == "make-corpus":
            return cmd_make_corpus(cfg, args)
        command = {"prepare": cmd_prepare, "train-backbone": cmd_train_backbone,
                   "train-fusion": cmd_train_fusion, "evaluate": cmd_evaluate,
                   "analyze": cmd_analyze}[args.command]
        return command(cfg)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except ValueError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
