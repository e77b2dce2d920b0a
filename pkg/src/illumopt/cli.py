"""Command-line entry point.

Every failure ends with one JSON line on stderr, ``{"error": <category>,
"message": ...}``, and an exit code tied to the category.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import experiment
from .config import ConfigError, load_config
from .network import TrainingDivergence
from .phantom import PhantomError

EXIT_CODES = {"config": 2, "io": 3, "training": 4, "shape": 5, "internal": 70}


class CliError(Exception):
    def __init__(self, category: str, message: str):
        super().__init__(message)
        self.category = category


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _str_list(text: str) -> list[str]:
    return [v.strip() for v in text.split(",") if v.strip()]


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="YAML experiment config")
    common.add_argument("--profile", choices=("desk", "full"), default="desk")
    common.add_argument("--out", type=Path, default=Path("runs"), help="output directory")
    common.add_argument("--seeds", type=_int_list)
    common.add_argument("--depths", type=_int_list)
    common.add_argument("--modes", type=_str_list)
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="illumopt", description="Learned LED illumination experiments")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("simulate", parents=[common], help="build the phantom dataset")
    sub.add_parser("train", parents=[common], help="run the mode x depth x seed sweep")
    sub.add_parser("evaluate", parents=[common], help="re-evaluate finished cells and rewrite reports")
    ex = sub.add_parser("export-pattern", parents=[common], help="export a checkpoint's LED pattern")
    ex.add_argument("checkpoint", type=Path)
    ex.add_argument("--exposures", type=Path, help="one exposure per LED, whitespace separated")
    ex.add_argument("--split", action="store_true", help="export positive and negative parts")
    sp = sub.add_parser("analyze-spectrum", parents=[common], help="spatial-frequency moments of test images")
    sp.add_argument("checkpoints", type=Path, nargs="*",
                    help="checkpoints to analyze; default is every learned cell under --out")
    sp.add_argument("--exclude-dc", action="store_true")
    return parser


def _config(args):
    overrides = {"sweep": {}}
    for name in ("seeds", "depths", "modes"):
        value = getattr(args, name)
        if value is not None:
            overrides["sweep"][name] = value
    return load_config(args.config, args.profile, overrides)


def _dispatch(args) -> dict:
    cfg = _config(args)
    out = args.out
    if args.command == "simulate":
        ds = experiment.simulate(cfg, out)
        return {"dataset": str(out / "dataset"), "manifest_hash": ds.manifest_hash, "config_hash": cfg.hash}
    if args.command == "train":
        result = experiment.run_sweep(cfg, out)
        if result["failures"]:
            cell, exc = result["failures"][0]
            raise CliError("training", f"{len(result['failures'])} cell(s) failed, first {cell}: {exc}; "
                                       f"see {out / 'failures.tsv'}")
        return {"ran": result["ran"], "skipped": result["skipped"], "relative": result["relative"]}
    if args.command == "evaluate":
        result = experiment.reevaluate(cfg, out)
        return {"rows": len(result["rows"]), "relative": result["relative"]}
    if args.command == "export-pattern":
        exposures = None
        if args.exposures is not None:
            exposures = np.loadtxt(args.exposures, ndmin=1)
        files = experiment.export_checkpoint_pattern(args.checkpoint, out, exposures, args.split)
        return {"files": [str(f) for f in files]}
    if args.command == "analyze-spectrum":
        ds = experiment.open_dataset(cfg, out)
        paths = args.checkpoints or [out / "cells" / c.key(cfg) / "model.ckpt"
                                     for c in experiment.cells(cfg) if c.mode == "learned"]
        paths = [p for p in paths if Path(p).exists()] if not args.checkpoints else paths
        if not paths:
            raise CliError("io", "no checkpoints to analyze")
        rows = experiment.analyze_spectrum(paths, ds, out / "spectrum", args.exclude_dc)
        return {"rows": len(rows), "table": str(out / "spectrum" / "spectrum.tsv")}
    raise CliError("internal", f"unknown command {args.command}")


def _category(exc: BaseException) -> str:
    if isinstance(exc, CliError):
        return exc.category
    if isinstance(exc, ConfigError):
        return "config"
    if isinstance(exc, (TrainingDivergence, PhantomError)):
        return "training"
    if isinstance(exc, (OSError, KeyError)):
        return "io"
    if isinstance(exc, ValueError):
        return "shape"
    return "internal"


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        result = _dispatch(args)
    except Exception as exc:  # noqa: BLE001 - every failure maps to a category
        category = _category(exc)
        print(json.dumps({"error": category, "message": str(exc)}), file=sys.stderr)
        return EXIT_CODES[category]
    print(json.dumps(result, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
