"""Global k-means quantization of fluorescence targets and prediction rounding."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

TOLERANCE = 1e-5
MAX_ITERATIONS = 20


@dataclass
class QuantizationModel:
    bits: int
    means: np.ndarray
    converged: bool
    iterations_used: int
    objective: list[float] = field(default_factory=list)

    @property
    def k(self) -> int:
        return 2**self.bits

    def to_json(self) -> str:
        d = asdict(self)
        d["means"] = [float(m) for m in self.means]
        return json.dumps(d, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "QuantizationModel":
        d = json.loads(text)
        d["means"] = np.asarray(d["means"], dtype=np.float64)
        return cls(**d)


def _check_bits(bits: int) -> None:
    if not 1 <= bits <= 7:
        raise ValueError(f"bits must lie in [1, 7], got {bits}")


def _assign(values: np.ndarray, means: np.ndarray) -> np.ndarray:
    # means are sorted, so nearest-mean is a search over midpoints;
    # side="left" sends exact midpoints to the lower mean
    boundaries = (means[:-1] + means[1:]) / 2
    return np.searchsorted(boundaries, values, side="left")


def fit_kmeans(values, bits: int) -> QuantizationModel:
    """Naive 1-D k-means with ``k = 2**bits`` means initialised at ``i/k``.

    Stops when every mean moves less than ``TOLERANCE`` or after
    ``MAX_ITERATIONS`` updates.  An empty cluster keeps its previous mean.
    Lloyd updates in 1-D keep the means strictly increasing, so no
    duplicate collapsing is ever needed.
    """
    _check_bits(bits)
    values = np.asarray(values, dtype=np.float64).ravel()
    if values.size == 0:
        raise ValueError("cannot fit k-means on an empty collection")
    if values.min() < 0 or values.max() > 1:
        raise ValueError("values must lie in [0, 1]")
    k = 2**bits
    means = np.arange(1, k + 1, dtype=np.float64) / k
    objective = [float(np.sum((values - means[_assign(values, means)]) ** 2))]
    converged = False
    iterations = 0
    while iterations < MAX_ITERATIONS:
        labels = _assign(values, means)
        counts = np.bincount(labels, minlength=k)
        sums = np.bincount(labels, weights=values, minlength=k)
        updated = np.where(counts > 0, sums / np.maximum(counts, 1), means)
        iterations += 1
        shift = np.max(np.abs(updated - means))
        means = updated
        objective.append(float(np.sum((values - means[_assign(values, means)]) ** 2)))
        if shift < TOLERANCE:
            converged = True
            break
    return QuantizationModel(bits, means, converged, iterations, objective)


def quantize(image, model: QuantizationModel) -> np.ndarray:
    """Replace each pixel by its nearest mean (ties to the lower mean)."""
    image = np.asarray(image, dtype=np.float64)
    return model.means[_assign(image, model.means)]


def round_to_depth(prediction, bits: int) -> np.ndarray:
    """Round to the uniform grid ``j / (2**bits - 1)``, halves rounding up."""
    _check_bits(bits)
    levels = 2**bits - 1
    x = np.clip(np.asarray(prediction, dtype=np.float64), 0.0, 1.0)
    return np.floor(x * levels + 0.5) / levels
