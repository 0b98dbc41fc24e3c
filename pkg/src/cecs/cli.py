"""Command-line entry point: ``cecs <command> [flags]``.

Exit status is 0 on success, 1 for usage or configuration errors and 2 for
runtime failures (bad data, divergence, a failing gradient check).
"""

from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .augment import GridSpec, augment_triplet, dataset_donor_sampler, resize_bilinear
from .autodiff import GraphError
from .backbone import ModelParams, activation_map, extract_features
from .codec import CodecError, decode_rawt, encode_rawt, read_image, write_image
from .config import ConfigError, RunConfig, parse_config
from .data import DatasetError, SynthSpec, generate_synthetic, save_image_folder
from .gradcheck import DegeneratePointError, op_suite, pipeline_check
from .trainer import (
    AblationResult,
    DivergenceError,
    datasets_for,
    evaluate_top1,
    prepare,
    run_ablation,
    train,
    write_metrics_csv,
)

logger = logging.getLogger("cecs")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse exits with 2 on bad usage; this CLI reserves 2 for runtime failures."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", metavar="PATH", help="key = value config file")
    p.add_argument("--seed", type=int)
    p.add_argument("--mode", choices=("baseline", "ce", "cecs"))
    p.add_argument("--q", type=int)
    p.add_argument("--n", type=int)
    p.add_argument("--data", metavar="PATH", help="image folder (default: built-in synthetic set)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override any config key")
    p.add_argument("--published", action="store_true", help="start from the published schedule instead of desk defaults")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cecs", description="Region replacement/masking training on ultra-fine-grained leaves.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth-data", help="write the synthetic dataset as an image folder")
    p.add_argument("--out", required=True, metavar="PATH")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--k", type=int, default=SynthSpec.k)
    p.add_argument("--m", type=int, default=SynthSpec.m)
    p.add_argument("--side", type=int, default=SynthSpec.side)
    p.add_argument("--class-delta", type=float, default=SynthSpec.class_delta)
    p.add_argument("--noise", type=float, default=SynthSpec.noise)
    p.add_argument("--format", choices=("ppm", "rawt"), default="ppm")

    p = sub.add_parser("train", help="train one run into runs/<timestamp>-<seed>/")
    _config_flags(p)
    p.add_argument("--out", default="runs", metavar="PATH", help="parent of the run directory")

    p = sub.add_parser("eval", help="print top-1 accuracy of a trained run")
    p.add_argument("--run", metavar="DIR", help="run directory (resolved.cfg + params.rawt)")
    p.add_argument("--params", metavar="PATH", help="params file (default: <run>/params.rawt)")
    _config_flags(p)
    p.add_argument("--split", choices=("train", "test"), default="test")

    p = sub.add_parser("ablate", help="module and/or patch-size ablation over several seeds")
    _config_flags(p)
    p.add_argument("--study", choices=("module", "patch", "all"), default="all")
    p.add_argument("--seeds", type=int, default=5, help="use seeds 0..N-1")
    p.add_argument("--out", default=".", metavar="PATH", help="directory for ablation.csv")

    p = sub.add_parser("preview-augment", help="write original/donor/replaced/masked images for one sample")
    _config_flags(p)
    p.add_argument("--out", required=True, metavar="PATH")

    p = sub.add_parser("gradcheck", help="finite-difference check of every op and the full pipeline")
    p.add_argument("--trials", type=int, default=100, help="random graphs per op")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-entries", type=int, default=None, help="subsample pipeline entries per tensor")

    p = sub.add_parser("cam", help="write a class activation heatmap (PGM) per image")
    p.add_argument("--run", metavar="DIR")
    _config_flags(p)
    p.add_argument("--params", metavar="PATH")
    p.add_argument("--out", required=True, metavar="PATH")
    p.add_argument("--class", dest="class_idx", type=int, default=None, help="default: predicted class")
    p.add_argument("--index", type=int, action="append", default=[], help="test-split sample index")
    p.add_argument("images", nargs="*", help="image files (.ppm/.pgm/.rawt)")
    return parser


# -- helpers -------------------------------------------------------------------------


def resolve_config(args: argparse.Namespace) -> RunConfig:
    base = RunConfig.published() if getattr(args, "published", False) else RunConfig()
    overrides = {}
    for item in getattr(args, "set", []):
        key, sep, value = item.partition("=")
        if not sep:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        overrides[key.strip()] = value
    for key in ("seed", "mode", "q", "n", "data", "epochs"):
        value = getattr(args, key, None)
        if value is not None:
            overrides[key] = value
    return parse_config(args.config, overrides, base)


def make_run_dir(parent: Path, seed: int) -> Path:
    stamp = time.strftime("%Y%m%d-%H%M%S")
    run = parent / f"{stamp}-{seed}"
    i = 1
    while run.exists():
        run = parent / f"{stamp}-{seed}.{i}"
        i += 1
    run.mkdir(parents=True)
    return run


def load_params(path: Path, num_classes: int, in_channels: int) -> ModelParams:
    return ModelParams.unflatten(decode_rawt(path.read_bytes()), num_classes, in_channels)


def _run_inputs(args) -> tuple:
    """Config and params path for eval/cam, from --run and/or --config/--params."""
    run = Path(args.run) if args.run else None
    if run is not None and args.config is None:
        args.config = str(run / "resolved.cfg")
    if args.params:
        params_path = Path(args.params)
    elif run is not None:
        params_path = run / "params.rawt"
    else:
        raise UsageError("need --run or --params")
    return resolve_config(args), params_path


# -- commands ------------------------------------------------------------------------


def cmd_synth_data(args) -> int:
    spec = SynthSpec(k=args.k, m=args.m, side=args.side, class_delta=args.class_delta, noise=args.noise, seed=args.seed)
    ds = generate_synthetic(spec)
    save_image_folder(ds, args.out, fmt=args.format)
    print(f"wrote {len(ds)} images in {ds.category_count} categories to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    config = resolve_config(args)
    train_set, test_set = datasets_for(config)
    run = make_run_dir(Path(args.out), config.seed)
    (run / "resolved.cfg").write_text(config.dump(), encoding="utf-8")

    def report(rec):
        logger.info("epoch %d  total %.4f  train %.3f  test %.3f", rec.epoch, rec.losses["total"],
                    rec.train_top1, rec.test_top1)

    params, history = train(config, train_set, test_set, on_epoch=report)
    write_metrics_csv(run / "metrics.csv", history)
    (run / "params.rawt").write_bytes(encode_rawt(params.flatten().astype(np.float32)))
    print(run)
    return EXIT_OK


def cmd_eval(args) -> int:
    config, params_path = _run_inputs(args)
    train_set, test_set = datasets_for(config)
    prep = prepare(config, train_set, test_set)
    params = load_params(params_path, train_set.category_count, prep.train.shape[3])
    if args.split == "train":
        acc = evaluate_top1(params, prep.train, prep.train_labels)
    else:
        acc = evaluate_top1(params, prep.test, prep.test_labels)
    sys.stdout.write(f"{acc:.4f}\n")
    return EXIT_OK


def cmd_ablate(args) -> int:
    base = resolve_config(args)
    train_set, test_set = datasets_for(base)
    studies = ("module", "patch") if args.study == "all" else (args.study,)
    merged = AblationResult(args.study)
    memo = {}
    for study in studies:
        res = run_ablation(base, train_set, test_set, seeds=range(args.seeds), study=study, memo=memo)
        merged.rows.extend(res.rows)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    merged.write_csv(out / "ablation.csv")
    for label in merged.labels():
        print(f"{label:<9} median test_top1 {merged.median(label):.4f}  per seed {merged.per_seed(label)}")
    return EXIT_OK


def cmd_preview(args) -> int:
    config = resolve_config(args)
    train_set, _ = datasets_for(config)
    side = config.image_side
    images = np.stack([resize_bilinear(img, side, side) for img in train_set.images])
    rng = np.random.default_rng(config.seed)
    idx = int(rng.integers(len(images)))
    sampler = dataset_donor_sampler(images, train_set.labels)
    picked = {}

    def recording_sampler(label, rng):
        picked["donor"], donor_label = sampler(label, rng)
        return picked["donor"], donor_label

    trip = augment_triplet(images[idx], int(train_set.labels[idx]), recording_sampler, config.n, config.q, rng)
    rows, cols = trip.region.pixel_slices(GridSpec.for_image(side, side, config.n))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for name, img in (("original", trip.original), ("donor", picked["donor"]), ("replaced", trip.replaced),
                      ("masked", trip.masked)):
        write_image(out / f"{name}.ppm", img)
    r = trip.region
    print(f"sample {idx} label {trip.label} donor_label {trip.donor_label} "
          f"region rows {rows.start}:{rows.stop} cols {cols.start}:{cols.stop} (cells r={r.r} c={r.c} q={r.q})")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    ok = True
    worst = op_suite(trials=args.trials, seed=args.seed)
    for kind, err in worst.items():
        flag = "ok  " if err < 1e-4 else "FAIL"
        ok &= err < 1e-4
        print(f"{flag} op {kind:<16} max rel err {err:.3e} over {args.trials} trials")
    report = pipeline_check(seed=args.seed, max_entries=args.max_entries)
    print(report.summary())
    ok &= report.passed
    print("gradcheck passed" if ok else "gradcheck FAILED")
    return EXIT_OK if ok else EXIT_RUNTIME


def cmd_cam(args) -> int:
    if not args.images and not args.index:
        raise UsageError("give image files and/or --index")
    config, params_path = _run_inputs(args)
    train_set, test_set = datasets_for(config)
    prep = prepare(config, train_set, test_set)
    params = load_params(params_path, train_set.category_count, prep.train.shape[3])
    side = config.image_side
    jobs = [(f"test{i:04d}", prep.test[i]) for i in args.index]
    for path in args.images:
        img = resize_bilinear(read_image(path), side, side)
        jobs.append((Path(path).stem, (img - prep.mean) / prep.std))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for name, x in jobs:
        res = extract_features(params, x)
        cls = int(np.argmax(res.logits)) if args.class_idx is None else args.class_idx
        cam = activation_map(res, params, cls)
        write_image(out / f"{name}_cam{cls}.pgm", resize_bilinear(cam[:, :, None], side, side))
        print(out / f"{name}_cam{cls}.pgm")
    return EXIT_OK


COMMANDS = {
    "synth-data": cmd_synth_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "preview-augment": cmd_preview,
    "gradcheck": cmd_gradcheck,
    "cam": cmd_cam,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError) as exc:
        print(f"cecs {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DatasetError, CodecError, DivergenceError, DegeneratePointError, GraphError, OSError,
            ValueError, IndexError) as exc:
        print(f"cecs {args.command}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
