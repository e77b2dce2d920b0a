"""Standard illumination baselines and evaluation metrics."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .optics import LedArray, LedClass, Pupil, classify_led, led_spec
from .physlayer import IlluminationPattern

BASELINES = ("center", "all", "dc", "offaxis", "random")
OFF_AXIS_OFFSET = 4e-3
RANDOM_BASELINE_SEED = 20200101


@dataclass(frozen=True)
class BaselineKind:
    name: str
    seed: int = RANDOM_BASELINE_SEED

    def __post_init__(self):
        if self.name not in BASELINES:
            raise ValueError(f"unknown baseline {self.name!r}; expected one of {BASELINES}")


def _positions(array: LedArray):
    r0, c0 = array.center_index
    for index in range(array.n):
        row, col, ch = array.unravel(index)
        yield index, row - r0, col - c0, ch


def standard_pattern(kind, array: LedArray, pupil: Pupil) -> IlluminationPattern:
    """One of the five fixed comparison patterns.

    ``dc`` lights bright-field LEDs left of the center column with +1 and
    right of it with -1.  ``offaxis`` lights every color of the LED position
    whose lateral offset is closest to 4 mm (lowest index on ties).
    """
    if isinstance(kind, str):
        kind = BaselineKind(kind)
    w = np.zeros(array.n)
    if kind.name == "center":
        for index, dr, dc, _ in _positions(array):
            if dr == 0 and dc == 0:
                w[index] = 1.0
    elif kind.name == "all":
        w[:] = 1.0
    elif kind.name == "dc":
        for index, _, dc, _ in _positions(array):
            if classify_led(led_spec(array, index), pupil) is LedClass.BRIGHT_FIELD and dc != 0:
                w[index] = 1.0 if dc < 0 else -1.0
    elif kind.name == "offaxis":
        best = min(
            ((row, col) for row in range(array.rows) for col in range(array.cols)),
            key=lambda rc: abs(math.hypot(*array.offset(*rc)) - OFF_AXIS_OFFSET),
        )
        for ch in range(len(array.channels)):
            w[array.ravel(best[0], best[1], ch)] = 1.0
    elif kind.name == "random":
        w = np.random.default_rng(kind.seed).uniform(0.0, 1.0, size=array.n)
    return IlluminationPattern(w, array, {"name": kind.name})


def _same_shape(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def mse(a, b) -> float:
    a, b = _same_shape(a, b)
    return float(np.mean((a - b) ** 2))


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    n = g.size
    rows = sliding_window_view(img, n, axis=0) @ g
    return sliding_window_view(rows, n, axis=1) @ g


def ssim(a, b, data_range: float = 1.0, window: int = 11, sigma: float = 1.5) -> float:
    """Mean SSIM over all fully-contained Gaussian windows."""
    a, b = _same_shape(a, b)
    if a.ndim != 2 or min(a.shape) < window:
        raise ValueError(f"SSIM needs 2-D images at least {window}x{window}, got {a.shape}")
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    g = gaussian_window(window, sigma)
    mu_a = _filter_valid(a, g)
    mu_b = _filter_valid(b, g)
    var_a = _filter_valid(a * a, g) - mu_a**2
    var_b = _filter_valid(b * b, g) - mu_b**2
    cov = _filter_valid(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def relative_mse(standard_mses, learned_mse: float) -> float:
    """Best standard MSE over learned MSE; ``inf`` when learned MSE is zero."""
    standard = list(standard_mses.values()) if isinstance(standard_mses, dict) else list(standard_mses)
    if not standard:
        raise ValueError("need at least one standard MSE")
    if learned_mse < 0:
        raise ValueError("MSE must be nonnegative")
    if learned_mse == 0:
        return math.inf
    return min(standard) / learned_mse


def radial_bins(size: int) -> np.ndarray:
    """Integer distance of each fftshifted bin from the zero-frequency bin."""
    c = size // 2
    y, x = np.indices((size, size))
    return np.rint(np.hypot(y - c, x - c)).astype(int)


def avg_spatial_freq_power(images, exclude_dc: bool = False) -> tuple[np.ndarray, float]:
    """Set-averaged power spectrum, binned by integer radius, and its first moment.

    Returns ``(profile, moment)`` where ``profile[r]`` is total power at
    radius ``r`` (frequency-bin units).  Zero total power gives moment 0.
    """
    images = [np.asarray(im, dtype=np.float64) for im in images]
    if not images:
        raise ValueError("need at least one image")
    size = images[0].shape[0]
    if any(im.shape != (size, size) for im in images):
        raise ValueError("images must be square and equally sized")
    power = np.zeros((size, size))
    for im in images:
        power += np.abs(np.fft.fft2(im)) ** 2
    power = np.fft.fftshift(power / len(images))
    if exclude_dc:
        power[size // 2, size // 2] = 0.0
    radius = radial_bins(size)
    profile = np.bincount(radius.ravel(), weights=power.ravel())
    total = math.fsum(profile)
    if total == 0:
        return profile, 0.0
    return profile, math.fsum(np.arange(profile.size) * profile) / total
