"""Command-line front end.

Exit codes: 0 success, 2 usage/config, 3 I/O or file format, 4 numerical
abort, 5 verification failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from collections import Counter
from pathlib import Path

import numpy as np

from . import config as runconfig
from .data import build_dataset, load_manifest, load_volume, save_volume
from .errors import ConfigError, FormatError, NumericalError
from .evaluation import evaluate, format_table, write_csv, write_summary
from .gradcheck import run_all
from .model import MODES
from .training import denoise, load_checkpoint, train

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC, EXIT_VERIFY = 0, 2, 3, 4, 5

log = logging.getLogger("petprompt")


def _load_config(path) -> runconfig.RunConfig:
    return runconfig.load(path) if path else runconfig.RunConfig()


def cmd_synth(args) -> int:
    cfg = _load_config(args.config)
    out = Path(args.out)
    runconfig.echo(cfg, out)
    manifest = build_dataset(cfg.data, out)
    counts = Counter(s.split for s in manifest.studies)
    reals = Counter()
    deltas = []
    for s in manifest.studies:
        reals[s.split] += len(s.realizations)
        deltas += [r.delta for r in s.realizations]
    print(f"manifest: {out / 'manifest.json'}")
    for split in ("train", "val", "test"):
        print(f"  {split:<5} studies={counts[split]:3d} low-count realizations={reals[split]:4d}")
    hist, edges = np.histogram(deltas, bins=9, range=tuple(cfg.data.delta_range))
    print("  delta histogram:")
    for n, lo, hi in zip(hist, edges[:-1], edges[1:]):
        print(f"    [{lo:.3f}, {hi:.3f}) {n:4d} {'#' * int(n)}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load_config(args.config)
    if args.mode:
        cfg.model.mode = args.mode
    if args.epochs is not None:
        cfg.train.epochs = args.epochs
    out = Path(args.out)
    runconfig.echo(cfg, out)
    manifest = load_manifest(args.data)
    result = train(manifest, cfg.train, cfg.model, out)
    best = result.best
    print(f"best checkpoint: {out / 'best.ckpt'} (epoch {best.epoch}, val MAE {best.val_mae:.5f})")
    print(f"last checkpoint: {out / 'last.ckpt'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _load_config(args.config)
    manifest = load_manifest(args.data)
    if not manifest.split(args.split):
        raise ConfigError(f"manifest has no {args.split!r} split")
    ckpts = [load_checkpoint(p) for p in args.ckpt]
    report = Path(args.report)
    report.parent.mkdir(parents=True, exist_ok=True)
    runconfig.echo(cfg, report.parent, "eval_config.json")
    result = evaluate(
        ckpts,
        manifest,
        args.split,
        ssim_cfg=cfg.metrics.ssim,
        data_range=cfg.metrics.data_range,
        use_support_mask=cfg.metrics.use_support_mask,
        slices_dir=args.slices,
    )
    write_csv(result, report)
    if args.summary:
        write_summary(result, args.summary)
    print(format_table(result))
    return EXIT_OK


def cmd_denoise(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    vol = load_volume(args.input)
    out = denoise(ckpt, vol, args.delta, clamp=args.clamp)
    save_volume(out, args.out)
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    report = run_all(args.seed, args.tolerance, corrupt=args.corrupt_group)
    print(report.table())
    print(f"{len(report.groups)} groups in {report.seconds:.1f}s")
    if not report.passed:
        names = ", ".join(f"{g.suite}/{g.group}" for g in report.failures())
        print(f"FAILED: {names}", file=sys.stderr)
        return EXIT_VERIFY
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="petprompt", description="Count-level-aware prompt denoising of 3D volumes.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="synthesize a phantom dataset")
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", help="train one model")
    s.add_argument("--config")
    s.add_argument("--data", required=True, help="manifest.json or its directory")
    s.add_argument("--mode", choices=MODES)
    s.add_argument("--epochs", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="score checkpoints on a split")
    s.add_argument("--config")
    s.add_argument("--ckpt", nargs="+", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--split", default="test", choices=("train", "val", "test"))
    s.add_argument("--report", required=True, help="per-realization CSV")
    s.add_argument("--summary", help="JSON summary")
    s.add_argument("--slices", help="directory for mid-axial slice images")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("denoise", help="denoise one volume file")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--input", required=True)
    s.add_argument("--delta", type=float)
    s.add_argument("--clamp", action="store_true", help="zero negative output voxels")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_denoise)

    s = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--tolerance", type=float)
    s.add_argument("--corrupt-group", help=argparse.SUPPRESS)
    s.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except NumericalError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FormatError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, KeyError, json.JSONDecodeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
