"""The illumination layer: LED-weighted stack synthesis, noise, L1 and export.

NumPy functions are the reference contracts; :class:`PhysicalLayer` and
:class:`NoiseLayer` are the torch equivalents used inside training.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .optics import ImageStack, LedArray


@dataclass
class IlluminationPattern:
    weights: np.ndarray
    array: LedArray
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.weights.shape != (self.array.n,):
            raise ValueError(f"pattern has {self.weights.shape} weights, array has {self.array.n} LEDs")
        if not np.all(np.isfinite(self.weights)):
            raise ValueError("pattern weights must be finite")

    def grids(self) -> np.ndarray:
        """Weights as ``(channels, rows, cols)``."""
        a = self.array
        return self.weights.reshape(len(a.channels), a.rows, a.cols)


@dataclass(frozen=True)
class NoiseConfig:
    k: float = 0.3
    enabled: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.k < 0:
            raise ValueError("noise scale k must be nonnegative")


def weighted_sum(stack: ImageStack, pattern: IlluminationPattern) -> np.ndarray:
    """``I'(r) = Σ_n w_n I_n(r)``."""
    w = pattern.weights
    if stack.n != w.shape[0]:
        raise ValueError(f"stack has {stack.n} images but pattern has {w.shape[0]} weights")
    return np.tensordot(w, stack.images.astype(np.float64), axes=1)


def noise_generator(seed: int, step: int) -> np.random.Generator:
    """Counter-based stream keyed by ``(seed, step)``."""
    return np.random.Generator(np.random.Philox(key=[seed & 0xFFFFFFFFFFFFFFFF, step]))


def apply_noise(image, cfg: NoiseConfig, step: int = 0) -> np.ndarray:
    """Per-pixel ``Normal(I', k·|I'|)``; fresh draws for each ``step``."""
    image = np.asarray(image, dtype=np.float64)
    if not cfg.enabled or cfg.k == 0:
        return image.copy()
    eps = noise_generator(cfg.seed, step).standard_normal(image.shape)
    return image + np.sqrt(cfg.k * np.abs(image)) * eps


def l1_penalty(pattern: IlluminationPattern, coefficient: float) -> tuple[float, np.ndarray]:
    if coefficient < 0:
        raise ValueError("L1 coefficient must be nonnegative")
    w = pattern.weights
    return coefficient * float(np.sum(np.abs(w))), coefficient * np.sign(w)


def split_pattern(pattern: IlluminationPattern) -> tuple[IlluminationPattern, IlluminationPattern]:
    """Two nonnegative captures whose difference is the signed pattern."""
    w = pattern.weights
    pos = replace(pattern, weights=np.maximum(w, 0.0), metadata={**pattern.metadata, "part": "positive"})
    neg = replace(pattern, weights=np.maximum(-w, 0.0), metadata={**pattern.metadata, "part": "negative"})
    return pos, neg


def normalize_by_exposure(pattern: IlluminationPattern, exposures) -> IlluminationPattern:
    exposures = np.asarray(exposures, dtype=np.float64)
    if exposures.shape != pattern.weights.shape:
        raise ValueError("one exposure per LED required")
    if np.any(exposures <= 0):
        raise ValueError("exposures must be positive")
    return replace(pattern, weights=pattern.weights / exposures)


def initial_weights(n: int, rng: np.random.Generator) -> np.ndarray:
    w = rng.uniform(0.0, 1.0 / n, size=n)
    return w - w.mean()


# -- export ------------------------------------------------------------------

def pattern_table(pattern: IlluminationPattern, comment: str | None = None) -> str:
    lines = [f"# {comment}"] if comment else []
    lines.append("index\trow\tcol\tchannel\tweight")
    for i, w in enumerate(pattern.weights):
        row, col, ch = pattern.array.unravel(i)
        lines.append(f"{i}\t{row}\t{col}\t{ch}\t{float(w)!r}")
    return "\n".join(lines) + "\n"


def read_pattern_table(text: str, array: LedArray) -> IlluminationPattern:
    lines = [line for line in text.strip().splitlines() if not line.startswith("#")]
    rows = [line.split("\t") for line in lines[1:]]
    weights = np.zeros(array.n)
    for idx, _, _, _, w in rows:
        weights[int(idx)] = float(w)
    return IlluminationPattern(weights, array)


def write_pgm(path, grid: np.ndarray, scale: int = 16, vmin=None, vmax=None) -> Path:
    """8-bit binary PGM, each LED drawn as a ``scale × scale`` block."""
    grid = np.asarray(grid, dtype=np.float64)
    lo = grid.min() if vmin is None else vmin
    hi = grid.max() if vmax is None else vmax
    span = hi - lo if hi > lo else 1.0
    pixels = np.clip(np.rint((grid - lo) / span * 255), 0, 255).astype(np.uint8)
    pixels = np.kron(pixels, np.ones((scale, scale), dtype=np.uint8))
    path = Path(path)
    h, w = pixels.shape
    path.write_bytes(f"P5\n{w} {h}\n255\n".encode() + pixels.tobytes())
    return path


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(maxsplit=4)
    w, h = int(parts[1]), int(parts[2])
    return np.frombuffer(parts[4], dtype=np.uint8)[: w * h].reshape(h, w)


def export_pattern(pattern: IlluminationPattern, directory, stem: str = "pattern",
                   comment: str | None = None) -> list[Path]:
    """Write ``<stem>.tsv`` plus one PGM grid per color channel.

    All channels share one gray scale so relative brightness is comparable.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    table = directory / f"{stem}.tsv"
    table.write_text(pattern_table(pattern, comment))
    grids = pattern.grids()
    lo, hi = float(grids.min()), float(grids.max())
    out = [table]
    for ch, lam in enumerate(pattern.array.channels):
        out.append(write_pgm(directory / f"{stem}_{round(lam * 1e9)}nm.pgm", grids[ch], vmin=lo, vmax=hi))
    return out


# -- torch layers ------------------------------------------------------------

class PhysicalLayer(nn.Module):
    """Learnable LED weights applied to a batch of stacks ``(B, N, H, W)``."""

    def __init__(self, weights: np.ndarray, trainable: bool = True):
        super().__init__()
        self.weights = nn.Parameter(torch.as_tensor(np.asarray(weights), dtype=torch.float32),
                                    requires_grad=trainable)

    def forward(self, stacks: torch.Tensor) -> torch.Tensor:
        return torch.einsum("n,bnhw->bhw", self.weights, stacks).unsqueeze(1)


class NoiseLayer(nn.Module):
    """Intensity-proportional Gaussian noise, active only in training mode.

    Draws come from a generator reseeded per call with ``(seed, call index)``.
    """

    def __init__(self, cfg: NoiseConfig):
        super().__init__()
        self.cfg = cfg
        self.calls = 0

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if not (self.training and self.cfg.enabled and self.cfg.k > 0):
            return x
        gen = torch.Generator().manual_seed((self.cfg.seed * 1_000_003 + self.calls) % (2**63))
        self.calls += 1
        eps = torch.randn(x.shape, generator=gen, dtype=x.dtype)
        # clamp keeps d(sqrt)/dx finite at zero intensity
        std = torch.sqrt(torch.clamp(self.cfg.k * x.abs(), min=1e-20))
        return x + std * eps
