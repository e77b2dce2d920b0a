"""Sweep orchestration over pattern modes, bit depths and seeds.

Layout of an output directory::

    dataset/            simulated stacks plus dataset.manifest and config.json
    labels/bits<d>.json fitted k-means quantizers
    cells/<key>/        model.ckpt, pattern/ export and row.json per sweep cell
    report.tsv          one row per finished cell, sorted, no timestamps
    summary.tsv         seed means and standard deviations per (depth, mode)
    relative.tsv        R_MSE per depth
    failures.tsv        cells that raised, with the error
    metadata.json       timestamps and library versions

A cell is finished once its ``row.json`` exists, which is written last, so an
interrupted sweep resumes by skipping finished cells.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import platform
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .config import ExperimentConfig
from .labels import QuantizationModel, fit_kmeans, quantize, round_to_depth
from .metrics import BaselineKind, avg_spatial_freq_power, mse, relative_mse, ssim, standard_pattern
from .network import TrainedModel, load_checkpoint, save_checkpoint, train
from .phantom import Dataset, build_dataset, read_dataset, write_dataset
from .physlayer import export_pattern, normalize_by_exposure, split_pattern

log = logging.getLogger(__name__)

REPORT_COLUMNS = ("pattern", "bits", "seed", "mse", "ssim", "cell", "config_hash")
DATA_SECTIONS = ("optics", "phantom")
CELL_SECTIONS = ("optics", "phantom", "network", "training")


@dataclass(frozen=True)
class Cell:
    mode: str
    bits: int
    seed: int

    def key(self, cfg: ExperimentConfig) -> str:
        blob = json.dumps({"config": cfg.slice_hash(*CELL_SECTIONS), "random_seed": cfg.random_baseline_seed,
                           "mode": self.mode, "bits": self.bits, "seed": self.seed}, sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def cells(cfg: ExperimentConfig) -> list[Cell]:
    return [Cell(m, d, s) for m in cfg.modes for d in cfg.depths for s in cfg.seeds]


def _write_json(path: Path, doc) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    tmp.replace(path)


# -- dataset and labels ----------------------------------------------------------

def simulate(cfg: ExperimentConfig, out) -> Dataset:
    root = Path(out) / "dataset"
    ds = build_dataset(cfg.phantom, cfg.array, cfg.pupil, counts=cfg.counts, grid=cfg.grid)
    write_dataset(ds, root)
    _write_json(root / "config.json", {"config_hash": cfg.slice_hash(*DATA_SECTIONS),
                                       "config": {s: cfg.raw[s] for s in DATA_SECTIONS}})
    return ds


def open_dataset(cfg: ExperimentConfig, out) -> Dataset:
    """Read the dataset under ``out``; refuse one built from other settings."""
    root = Path(out) / "dataset"
    if not (root / "dataset.manifest").exists():
        raise FileNotFoundError(f"no dataset under {root}; run 'simulate' first")
    stamp = json.loads((root / "config.json").read_text())["config_hash"]
    if stamp != cfg.slice_hash(*DATA_SECTIONS):
        raise ValueError(f"dataset under {root} was built from a different optics/phantom config")
    return read_dataset(root)


def quantizer(ds: Dataset, bits: int, out) -> QuantizationModel:
    """Fit once per depth on the training targets and cache to disk."""
    path = Path(out) / "labels" / f"bits{bits}.json"
    if path.exists():
        return QuantizationModel.from_json(path.read_text())
    _, targets = ds.arrays("train")
    model = fit_kmeans(targets.ravel(), bits)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(model.to_json())
    return model


# -- one cell ----------------------------------------------------------------------

def pattern_for(cfg: ExperimentConfig, mode: str):
    if mode == "learned":
        return None
    kind = BaselineKind(mode, cfg.random_baseline_seed) if mode == "random" else mode
    return standard_pattern(kind, cfg.array, cfg.pupil)


def evaluate_model(model: TrainedModel, ds: Dataset, q: QuantizationModel) -> tuple[float, float]:
    """Test-set means of per-image MSE and SSIM against quantized labels."""
    stacks, targets = ds.arrays("test")
    pred = round_to_depth(model.predict(stacks), q.bits)
    labels = quantize(targets.astype(np.float64), q)
    errors = [mse(p, t) for p, t in zip(pred, labels)]
    sims = [ssim(p, t) for p, t in zip(pred, labels)]
    return math.fsum(errors) / len(errors), math.fsum(sims) / len(sims)


def run_cell(cfg: ExperimentConfig, ds: Dataset, cell: Cell, out) -> dict:
    key = cell.key(cfg)
    directory = Path(out) / "cells" / key
    q = quantizer(ds, cell.bits, out)
    model = train(ds, cfg.unet, cfg.train_config(cell.seed), pattern_for(cfg, cell.mode), q)
    stamp = {"config_hash": cfg.hash, "cell": key, "mode": cell.mode, "bits": cell.bits, "seed": cell.seed}
    save_checkpoint(model, directory / "model.ckpt", extra=stamp)
    export_pattern(model.pattern, directory / "pattern", comment=f"config_hash={cfg.hash} cell={key}")
    err, sim = evaluate_model(model, ds, q)
    row = {"pattern": cell.mode, "bits": cell.bits, "seed": cell.seed, "mse": err, "ssim": sim,
           "cell": key, "config_hash": cfg.hash}
    _write_json(directory / "row.json", row)
    return row


# -- reports ------------------------------------------------------------------------

def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, float) else str(v)


def _table(rows: list[dict], columns, comment: str) -> str:
    lines = [f"# {comment}", "\t".join(columns)]
    lines += ["\t".join(_fmt(r[c]) for c in columns) for r in rows]
    return "\n".join(lines) + "\n"


def read_table(text: str) -> list[dict]:
    """Parse a report table back; numeric fields come back as int or float."""
    lines = [ln for ln in text.splitlines() if ln and not ln.startswith("#")]
    header = lines[0].split("\t")
    out = []
    for ln in lines[1:]:
        row = {}
        for name, raw in zip(header, ln.split("\t")):
            try:
                row[name] = int(raw)
            except ValueError:
                try:
                    row[name] = float(raw)
                except ValueError:
                    row[name] = raw
        out.append(row)
    return out


def collect_rows(cfg: ExperimentConfig, out) -> list[dict]:
    """Finished rows for this config's cells, deduplicated by cell key."""
    rows = {}
    for cell in cells(cfg):
        path = Path(out) / "cells" / cell.key(cfg) / "row.json"
        if path.exists():
            rows[cell.key(cfg)] = json.loads(path.read_text())
    order = {m: i for i, m in enumerate(cfg.modes)}
    return sorted(rows.values(), key=lambda r: (r["bits"], order[r["pattern"]], r["seed"]))


def summarize(rows: list[dict]) -> tuple[list[dict], list[dict]]:
    groups: dict[tuple, list[dict]] = {}
    for r in rows:
        groups.setdefault((r["bits"], r["pattern"]), []).append(r)
    summary = []
    for (bits, mode), rs in groups.items():
        m, s = np.array([r["mse"] for r in rs]), np.array([r["ssim"] for r in rs])
        summary.append({"bits": bits, "pattern": mode, "n": len(rs), "mse_mean": float(m.mean()),
                        "mse_std": float(m.std()), "ssim_mean": float(s.mean()), "ssim_std": float(s.std())})
    relative = []
    for bits in sorted({b for b, _ in groups}):
        means = {r["pattern"]: r["mse_mean"] for r in summary if r["bits"] == bits}
        standard = {k: v for k, v in means.items() if k != "learned"}
        if "learned" in means and standard:
            best = min(standard, key=standard.get)
            relative.append({"bits": bits, "r_mse": relative_mse(standard, means["learned"]),
                             "learned_mse": means["learned"], "best_standard": best,
                             "best_standard_mse": standard[best]})
    return summary, relative


def write_reports(cfg: ExperimentConfig, out) -> dict:
    out = Path(out)
    rows = collect_rows(cfg, out)
    summary, relative = summarize(rows)
    tag = f"config_hash={cfg.hash}"
    (out / "report.tsv").write_text(_table(rows, REPORT_COLUMNS, tag))
    (out / "summary.tsv").write_text(_table(
        summary, ("bits", "pattern", "n", "mse_mean", "mse_std", "ssim_mean", "ssim_std"), tag))
    (out / "relative.tsv").write_text(_table(
        relative, ("bits", "r_mse", "learned_mse", "best_standard", "best_standard_mse"), tag))
    return {"rows": rows, "summary": summary, "relative": relative}


def _record_failure(out: Path, cell: Cell, key: str, exc: BaseException) -> None:
    path = out / "failures.tsv"
    new = not path.exists()
    with path.open("a") as fh:
        if new:
            fh.write("cell\tpattern\tbits\tseed\terror\n")
        msg = f"{type(exc).__name__}: {exc}".replace("\t", " ").replace("\n", " ")
        fh.write(f"{key}\t{cell.mode}\t{cell.bits}\t{cell.seed}\t{msg}\n")


def run_sweep(cfg: ExperimentConfig, out, ds: Dataset | None = None) -> dict:
    """Train and evaluate every unfinished cell, then rewrite the reports.

    Errors in one cell are logged to ``failures.tsv`` and the sweep moves on;
    the returned dict lists them under ``"failures"``.
    """
    out = Path(out)
    ds = ds if ds is not None else open_dataset(cfg, out)
    started = time.time()
    failures, ran, skipped = [], 0, 0
    for cell in cells(cfg):
        key = cell.key(cfg)
        if (out / "cells" / key / "row.json").exists():
            skipped += 1
            continue
        log.info("cell %s: %s bits=%d seed=%d", key, cell.mode, cell.bits, cell.seed)
        try:
            run_cell(cfg, ds, cell, out)
            ran += 1
        except (ArithmeticError, RuntimeError, ValueError) as exc:
            _record_failure(out, cell, key, exc)
            failures.append((cell, exc))
    result = write_reports(cfg, out)
    _write_json(out / "metadata.json", {
        "config_hash": cfg.hash, "started": started, "finished": time.time(), "cells_run": ran,
        "cells_skipped": skipped, "python": platform.python_version(), "numpy": np.__version__,
        "torch": torch.__version__,
    })
    return {**result, "failures": failures, "ran": ran, "skipped": skipped}


def reevaluate(cfg: ExperimentConfig, out) -> dict:
    """Recompute every finished cell's metrics from its checkpoint."""
    out = Path(out)
    ds = open_dataset(cfg, out)
    for cell in cells(cfg):
        directory = out / "cells" / cell.key(cfg)
        if not (directory / "model.ckpt").exists():
            continue
        model = load_checkpoint(directory / "model.ckpt")
        err, sim = evaluate_model(model, ds, quantizer(ds, cell.bits, out))
        _write_json(directory / "row.json", {"pattern": cell.mode, "bits": cell.bits, "seed": cell.seed,
                                             "mse": err, "ssim": sim, "cell": cell.key(cfg),
                                             "config_hash": cfg.hash})
    return write_reports(cfg, out)


# -- export and spectrum --------------------------------------------------------------

def export_checkpoint_pattern(checkpoint, directory, exposures=None, split: bool = False) -> list[Path]:
    model = load_checkpoint(checkpoint)
    pattern = model.pattern
    if exposures is not None:
        pattern = normalize_by_exposure(pattern, exposures)
    comment = f"config_hash={model.provenance.get('config_hash', 'unknown')}"
    if not split:
        return export_pattern(pattern, directory, comment=comment)
    pos, neg = split_pattern(pattern)
    return (export_pattern(pos, directory, "positive", comment)
            + export_pattern(neg, directory, "negative", comment))


def spectrum(model: TrainedModel, ds: Dataset, exclude_dc: bool = False) -> tuple[np.ndarray, float]:
    stacks, _ = ds.arrays("test")
    if stacks.shape[1] != model.pattern.array.n:
        raise ValueError(f"dataset has {stacks.shape[1]} LEDs, checkpoint expects {model.pattern.array.n}")
    return avg_spatial_freq_power(model.synthesize(stacks), exclude_dc=exclude_dc)


def analyze_spectrum(checkpoints, ds: Dataset, out, exclude_dc: bool = False) -> list[dict]:
    """Moment table (one row per checkpoint) plus radial profiles."""
    rows, profiles = [], []
    for path in checkpoints:
        model = load_checkpoint(path)
        prov = model.provenance
        profile, moment = spectrum(model, ds, exclude_dc)
        rows.append({"pattern": prov.get("mode", "unknown"), "bits": prov.get("bits", -1),
                     "seed": prov.get("seed", -1), "moment": moment, "cell": prov.get("cell", Path(path).stem),
                     "config_hash": prov.get("config_hash", "unknown")})
        profiles.append(profile)
    order = sorted(range(len(rows)), key=lambda i: (rows[i]["bits"], rows[i]["pattern"], rows[i]["seed"]))
    rows = [rows[i] for i in order]
    profiles = [profiles[i] for i in order]
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    hashes = sorted({r["config_hash"] for r in rows})
    tag = f"config_hash={','.join(hashes)}"
    (out / "spectrum.tsv").write_text(_table(rows, ("pattern", "bits", "seed", "moment", "cell", "config_hash"), tag))
    width = max((len(p) for p in profiles), default=0)
    prof_rows = [{"cell": r["cell"], **{f"r{i}": float(p[i]) if i < len(p) else 0.0 for i in range(width)}}
                 for r, p in zip(rows, profiles)]
    (out / "profiles.tsv").write_text(_table(prof_rows, ("cell",) + tuple(f"r{i}" for i in range(width)), tag))
    by_depth: dict[int, list[float]] = {}
    for r in rows:
        by_depth.setdefault(r["bits"], []).append(r["moment"])
    depth_rows = [{"bits": b, "n": len(v), "moment_mean": float(np.mean(v)), "moment_std": float(np.std(v))}
                  for b, v in sorted(by_depth.items())]
    (out / "moments.tsv").write_text(_table(depth_rows, ("bits", "n", "moment_mean", "moment_std"), tag))
    return rows
