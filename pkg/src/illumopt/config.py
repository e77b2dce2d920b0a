"""Experiment configuration: profiles, YAML loading and validation.

Unknown keys are errors and every diagnostic carries the line number of the
offending key, since a silently ignored hyperparameter typo is the easiest
way to lose reproducibility.
"""

from __future__ import annotations

import copy
import hashlib
import json
import math
from dataclasses import dataclass
from pathlib import Path

import yaml

from .metrics import BASELINES, RANDOM_BASELINE_SEED
from .network import ConfigError, TrainConfig, UNetConfig
from .optics import LedArray, Pupil
from .phantom import PhantomParams
from .physlayer import NoiseConfig

MODES = ("learned",) + BASELINES


DESK = {
    "optics": {
        "grid": 64,
        "na": 0.085,
        "rows": 7,
        "cols": 7,
        "pitch": 4e-3,
        "distance": 80e-3,
        "wavelengths": [632e-9, 540e-9, 480e-9],
        "pixel_size": 1.42e-6,
    },
    "phantom": {
        "mode": "membrane",
        "cell_count_range": [2, 4],
        "cell_radius_range": [7.0, 12.0],
        "phase_range": [0.5, 1.5],
        "absorption_range": [0.0, 0.15],
        "band_width": 3.0,
        "margin": 2.0,
        "seed": 1,
        "counts": [48, 12, 12],
    },
    "network": {
        "initial_filters": 8,
        "filter_expansion_ratio": 2.0,
        "conv_layers_per_block": 2,
        "down_sampling_blocks": 3,
        "up_sampling_blocks": 3,
        "kernel_size": [3, 3],
        "activation": "relu",
        "final_activation": "sigmoid",
        "batchnorm_frequency": "after_every_convolution",
        "padding": [1, 1],
    },
    "training": {
        "optimizer": "adam",
        "initial_learning_rate": 0.005,
        "lr_reduction_factor": math.sqrt(10),
        "lr_reduction_patience": 5,
        "noise_level": 0.3,
        "l1_penalty": 0.0004,
        "batch_size": 4,
        "max_epochs": 60,
        "early_stop_patience": 15,
    },
    "sweep": {
        "modes": list(MODES),
        "depths": [1, 7],
        "seeds": [0, 1, 2],
        "random_baseline_seed": RANDOM_BASELINE_SEED,
    },
}

FULL = copy.deepcopy(DESK)
FULL["optics"].update(grid=256, rows=15, cols=15)
FULL["phantom"].update(counts=[820, 108, 108], cell_count_range=[20, 40], cell_radius_range=[10.0, 18.0])
FULL["network"].update(initial_filters=16, down_sampling_blocks=5, up_sampling_blocks=5)
FULL["training"].update(max_epochs=150)
FULL["sweep"].update(depths=[1, 2, 3, 4, 5, 6, 7])

PROFILES = {"desk": DESK, "full": FULL}

# values the implementation supports in exactly one form
FIXED = {
    ("network", "kernel_size"): [3, 3],
    ("network", "activation"): "relu",
    ("network", "final_activation"): "sigmoid",
    ("network", "batchnorm_frequency"): "after_every_convolution",
    ("network", "padding"): [1, 1],
    ("training", "optimizer"): "adam",
}


def _positive(v):
    return v > 0


def _at_least_one(v):
    return v >= 1 and float(v).is_integer()


# per-key checks run before the sub-configs are built so errors point at a line
CHECKS = {
    ("optics", "grid"): (_at_least_one, "a positive integer"),
    ("optics", "na"): (lambda v: 0 < v < 1, "in (0, 1)"),
    ("optics", "rows"): (_at_least_one, "a positive integer"),
    ("optics", "cols"): (_at_least_one, "a positive integer"),
    ("optics", "pitch"): (_positive, "positive"),
    ("optics", "distance"): (_positive, "positive"),
    ("optics", "pixel_size"): (_positive, "positive"),
    ("phantom", "band_width"): (_positive, "positive"),
    ("phantom", "margin"): (lambda v: v >= 0, "nonnegative"),
    ("network", "initial_filters"): (_at_least_one, "a positive integer"),
    ("network", "filter_expansion_ratio"): (_positive, "positive"),
    ("network", "conv_layers_per_block"): (_at_least_one, "a positive integer"),
    ("network", "down_sampling_blocks"): (_at_least_one, "a positive integer"),
    ("network", "up_sampling_blocks"): (_at_least_one, "a positive integer"),
    ("training", "initial_learning_rate"): (_positive, "positive"),
    ("training", "lr_reduction_factor"): (lambda v: v > 1, "greater than 1"),
    ("training", "lr_reduction_patience"): (_at_least_one, "a positive integer"),
    ("training", "noise_level"): (lambda v: v >= 0, "nonnegative"),
    ("training", "l1_penalty"): (lambda v: v >= 0, "nonnegative"),
    ("training", "batch_size"): (_at_least_one, "a positive integer"),
    ("training", "max_epochs"): (_at_least_one, "a positive integer"),
    ("training", "early_stop_patience"): (_at_least_one, "a positive integer"),
}


@dataclass
class ExperimentConfig:
    raw: dict
    array: LedArray
    pupil: Pupil
    grid: int
    phantom: PhantomParams
    counts: tuple[int, int, int]
    unet: UNetConfig
    train: TrainConfig
    modes: list[str]
    depths: list[int]
    seeds: list[int]
    random_baseline_seed: int

    @property
    def hash(self) -> str:
        return config_hash(self.raw)

    def slice_hash(self, *sections: str) -> str:
        return config_hash({s: self.raw[s] for s in sections})

    def train_config(self, seed: int) -> TrainConfig:
        return TrainConfig(**{**_train_dict(self.train), "seed": seed,
                              "noise": NoiseConfig(self.train.noise.k, True, seed)})


def _train_dict(cfg: TrainConfig) -> dict:
    return {f: getattr(cfg, f) for f in cfg.__dataclass_fields__}


def config_hash(raw: dict) -> str:
    return hashlib.sha256(json.dumps(raw, sort_keys=True).encode()).hexdigest()[:16]


def _lines(node, prefix=()) -> dict:
    """Map key paths to 1-based line numbers from a composed YAML node."""
    out = {}
    if isinstance(node, yaml.MappingNode):
        for k, v in node.value:
            path = prefix + (k.value,)
            out[path] = k.start_mark.line + 1
            out.update(_lines(v, path))
    return out


def _merge(base: dict, override: dict, lines: dict, prefix=()) -> dict:
    merged = copy.deepcopy(base)
    for key, value in override.items():
        path = prefix + (key,)
        where = f"line {lines.get(path, '?')}"
        if key not in base:
            raise ConfigError(f"{where}: unknown key {'.'.join(path)!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{where}: {'.'.join(path)} must be a mapping")
            merged[key] = _merge(base[key], value, lines, path)
        else:
            merged[key] = value
    return merged


def load_config(path=None, profile: str = "desk", overrides: dict | None = None) -> ExperimentConfig:
    """Profile defaults, then the YAML file, then command-line overrides."""
    if profile not in PROFILES:
        raise ConfigError(f"unknown profile {profile!r}; expected one of {sorted(PROFILES)}")
    raw = copy.deepcopy(PROFILES[profile])
    lines: dict = {}
    if path is not None:
        text = Path(path).read_text()
        try:
            node = yaml.compose(text)
            data = yaml.safe_load(text) or {}
        except yaml.YAMLError as exc:
            mark = getattr(exc, "problem_mark", None)
            where = f"line {mark.line + 1}" if mark else "unknown line"
            raise ConfigError(f"{where}: invalid YAML ({getattr(exc, 'problem', exc)})") from None
        if not isinstance(data, dict):
            raise ConfigError("line 1: top level must be a mapping")
        lines = _lines(node)
        data.pop("profile", None)
        raw = _merge(raw, data, lines)
    if overrides:
        for section, values in overrides.items():
            raw[section].update(values)
    return build_config(raw, lines)


def build_config(raw: dict, lines: dict | None = None) -> ExperimentConfig:
    lines = lines or {}

    def fail(path, msg):
        raise ConfigError(f"line {lines.get(path, '?')}: {'.'.join(path)}: {msg}")

    for path, (ok, what) in CHECKS.items():
        value = raw[path[0]][path[1]]
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            fail(path, f"expected a number, got {value!r}")
        if not ok(value):
            fail(path, f"must be {what}, got {value!r}")
    for path, expected in FIXED.items():
        value = raw[path[0]][path[1]]
        if value != expected:
            fail(path, f"only {expected!r} is supported, got {value!r}")

    def attempt(path, factory):
        try:
            return factory()
        except (ValueError, TypeError) as exc:
            fail(path, str(exc))

    o, p, n, t, s = (raw[k] for k in ("optics", "phantom", "network", "training", "sweep"))
    array = attempt(("optics",), lambda: LedArray(
        rows=int(o["rows"]), cols=int(o["cols"]), channels=tuple(float(w) for w in o["wavelengths"]),
        pitch=float(o["pitch"]), distance=float(o["distance"])))
    pupil = attempt(("optics", "na"), lambda: Pupil(float(o["na"])))
    grid = int(o["grid"])
    if grid < 16:
        fail(("optics", "grid"), "grid must be at least 16")
    phantom = attempt(("phantom",), lambda: PhantomParams(
        mode=p["mode"], cell_count_range=tuple(int(v) for v in p["cell_count_range"]),
        cell_radius_range=tuple(float(v) for v in p["cell_radius_range"]),
        phase_range=tuple(float(v) for v in p["phase_range"]),
        absorption_range=tuple(float(v) for v in p["absorption_range"]),
        band_width=float(p["band_width"]), margin=float(p["margin"]),
        pixel_size=float(o["pixel_size"]), seed=int(p["seed"])))
    counts = tuple(int(c) for c in p["counts"])
    if len(counts) != 3 or min(counts) < 1:
        fail(("phantom", "counts"), "need three split counts, each at least 1")
    unet = attempt(("network",), lambda: UNetConfig(
        initial_filters=int(n["initial_filters"]), expansion_ratio=float(n["filter_expansion_ratio"]),
        convs_per_block=int(n["conv_layers_per_block"]), down_blocks=int(n["down_sampling_blocks"]),
        up_blocks=int(n["up_sampling_blocks"])))
    if grid % 2**unet.down_blocks:
        fail(("optics", "grid"), f"grid {grid} not divisible by 2**{unet.down_blocks} (network down-sampling)")
    train = attempt(("training",), lambda: TrainConfig(
        initial_lr=float(t["initial_learning_rate"]), lr_reduce_factor=float(t["lr_reduction_factor"]),
        lr_patience=int(t["lr_reduction_patience"]), batch_size=int(t["batch_size"]),
        l1_coefficient=float(t["l1_penalty"]), noise=NoiseConfig(float(t["noise_level"])),
        max_epochs=int(t["max_epochs"]), early_stop_patience=int(t["early_stop_patience"])))

    modes = list(s["modes"])
    for m in modes:
        if m not in MODES:
            fail(("sweep", "modes"), f"unknown mode {m!r}; expected {MODES}")
    depths = [int(d) for d in s["depths"]]
    if any(not 1 <= d <= 7 for d in depths):
        fail(("sweep", "depths"), "bit depths must lie in 1..7")
    seeds = [int(v) for v in s["seeds"]]
    for key, values in (("modes", modes), ("depths", depths), ("seeds", seeds)):
        if not values:
            fail(("sweep", key), "must not be empty")
    return ExperimentConfig(raw, array, pupil, grid, phantom, counts, unet, train, modes, depths, seeds,
                            int(s["random_baseline_seed"]))


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(cfg.raw, sort_keys=False)
