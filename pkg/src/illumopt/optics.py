"""Coherent image formation for an LED-array microscope.

Each LED is a quasi-monochromatic plane wave at the sample.  A thin specimen
``o(r)`` tilted by the LED wavevector is low-passed by an ideal circular pupil
and the detected intensity is the modulus squared.  Multi-LED images are the
incoherent sum of single-LED images, which is what makes the per-LED stack a
sufficient statistic for any illumination pattern.

Grids are periodic (discrete Fourier transforms throughout).
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class OpticsError(ValueError):
    """Invalid optical configuration or incompatible inputs."""


@dataclass(frozen=True)
class LedArray:
    """Rectangular multi-color LED grid.

    LED indices are channel-major: ``index = (channel * rows + row) * cols + col``.
    """

    rows: int = 7
    cols: int = 7
    channels: tuple[float, ...] = (632e-9, 540e-9, 480e-9)
    pitch: float = 4e-3
    distance: float = 80e-3
    center_index: tuple[int, int] | None = None

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(float(c) for c in self.channels))
        if self.center_index is None:
            object.__setattr__(self, "center_index", (self.rows // 2, self.cols // 2))
        else:
            object.__setattr__(self, "center_index", tuple(int(i) for i in self.center_index))
        if self.rows < 1 or self.cols < 1 or not self.channels:
            raise OpticsError("LED array needs at least one row, column and channel")
        if self.pitch <= 0 or self.distance <= 0:
            raise OpticsError("pitch and distance must be positive")
        if any(c <= 0 for c in self.channels):
            raise OpticsError("wavelengths must be positive")
        r, c = self.center_index
        if not (0 <= r < self.rows and 0 <= c < self.cols):
            raise OpticsError(f"center_index {self.center_index} outside the grid")

    @property
    def n(self) -> int:
        return self.rows * self.cols * len(self.channels)

    def unravel(self, index: int) -> tuple[int, int, int]:
        """Return ``(row, col, channel)`` for a flat LED index."""
        if not 0 <= index < self.n:
            raise IndexError(f"LED index {index} out of range [0, {self.n})")
        channel, rem = divmod(index, self.rows * self.cols)
        row, col = divmod(rem, self.cols)
        return row, col, channel

    def ravel(self, row: int, col: int, channel: int) -> int:
        if not (0 <= row < self.rows and 0 <= col < self.cols and 0 <= channel < len(self.channels)):
            raise IndexError(f"LED ({row}, {col}, {channel}) out of range")
        return (channel * self.rows + row) * self.cols + col

    def offset(self, row: int, col: int) -> tuple[float, float]:
        """Lateral (x, y) position of an LED relative to the optical axis, in meters."""
        r0, c0 = self.center_index
        return (col - c0) * self.pitch, (row - r0) * self.pitch

    def to_dict(self) -> dict:
        return {
            "rows": self.rows,
            "cols": self.cols,
            "channels": list(self.channels),
            "pitch": self.pitch,
            "distance": self.distance,
            "center_index": list(self.center_index),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LedArray":
        return cls(
            rows=int(d["rows"]),
            cols=int(d["cols"]),
            channels=tuple(d["channels"]),
            pitch=float(d["pitch"]),
            distance=float(d["distance"]),
            center_index=tuple(d["center_index"]),
        )


@dataclass(frozen=True)
class LedSpec:
    index: int
    transverse_wavevector: tuple[float, float]
    wavelength: float
    angle: float

    @property
    def sin_angle(self) -> float:
        return math.sin(self.angle)

    @property
    def spatial_frequency(self) -> tuple[float, float]:
        """Transverse wavevector in cycles/meter."""
        kx, ky = self.transverse_wavevector
        return kx / (2 * math.pi), ky / (2 * math.pi)


def led_spec(array: LedArray, index: int) -> LedSpec:
    """Illumination angle and transverse wavevector of one LED."""
    row, col, channel = array.unravel(index)
    x, y = array.offset(row, col)
    wavelength = array.channels[channel]
    lateral = math.hypot(x, y)
    radius = math.sqrt(lateral**2 + array.distance**2)
    k = 2 * math.pi / wavelength
    # direction cosines; exact zero on axis
    kx = k * x / radius
    ky = k * y / radius
    return LedSpec(
        index=index,
        transverse_wavevector=(kx, ky),
        wavelength=wavelength,
        angle=math.atan2(lateral, array.distance),
    )


@dataclass(frozen=True)
class Pupil:
    """Ideal circular coherent transfer function (no aberrations)."""

    na: float = 0.085

    def __post_init__(self):
        if not 0 < self.na <= 1:
            raise OpticsError(f"NA must lie in (0, 1], got {self.na}")

    def cutoff_frequency(self, wavelength: float) -> float:
        return self.na / wavelength

    def transfer(self, shape: int, pixel_size: float, wavelength: float,
                 shift: tuple[float, float] = (0.0, 0.0)) -> np.ndarray:
        """Binary pupil sampled on the unshifted DFT frequency grid.

        ``shift`` evaluates ``P(f + shift)``; the oblique-illumination form of
        the coherent transfer function.
        """
        fx, fy = frequency_grid(shape, pixel_size)
        fc = self.cutoff_frequency(wavelength)
        return ((fx + shift[0]) ** 2 + (fy + shift[1]) ** 2 <= fc**2).astype(np.complex128)


class LedClass(enum.Enum):
    BRIGHT_FIELD = "bright-field"
    DARK_FIELD = "dark-field"


def classify_led(led: LedSpec, pupil: Pupil) -> LedClass:
    """Bright-field iff ``sin(angle) <= NA`` (boundary inclusive)."""
    if led.sin_angle <= pupil.na:
        return LedClass.BRIGHT_FIELD
    return LedClass.DARK_FIELD


def frequency_grid(shape: int, pixel_size: float) -> tuple[np.ndarray, np.ndarray]:
    f = np.fft.fftfreq(shape, d=pixel_size)
    fx, fy = np.meshgrid(f, f, indexing="xy")
    return fx, fy


@dataclass
class Specimen:
    """Thin complex specimen with co-registered fluorescence.

    ``transmittance`` maps wavelength (meters) to a complex square field.
    """

    transmittance: dict[float, np.ndarray]
    pixel_size: float
    fluorescence: np.ndarray
    cells: list = field(default_factory=list)

    def __post_init__(self):
        shapes = {t.shape for t in self.transmittance.values()}
        if len(shapes) != 1:
            raise OpticsError("all transmittance channels must share one shape")
        (shape,) = shapes
        if len(shape) != 2 or shape[0] != shape[1]:
            raise OpticsError(f"square 2-D grids required, got {shape}")
        if self.fluorescence.shape != shape:
            raise OpticsError("fluorescence and transmittance shapes differ")
        if self.pixel_size <= 0:
            raise OpticsError("pixel_size must be positive")

    @property
    def size(self) -> int:
        return self.fluorescence.shape[0]

    def field_at(self, wavelength: float) -> np.ndarray:
        for lam, t in self.transmittance.items():
            if math.isclose(lam, wavelength, rel_tol=1e-9):
                return t
        raise OpticsError(f"specimen has no channel at {wavelength * 1e9:.1f} nm")

    @classmethod
    def uniform(cls, size: int, wavelengths, pixel_size: float = 1e-6, value: complex = 1.0):
        return cls(
            transmittance={float(w): np.full((size, size), value, dtype=np.complex128) for w in wavelengths},
            pixel_size=pixel_size,
            fluorescence=np.zeros((size, size)),
        )


def coherent_field(specimen: Specimen, led: LedSpec, pupil: Pupil) -> np.ndarray:
    """Complex image-plane field for one LED, in the tilted frame.

    Computed as ``IFFT(FFT(o) * P(f + f_led))``: the spectrum of ``o·exp(ik·r)``
    is the object spectrum shifted by the LED frequency, and low-passing it
    with ``P(f)`` before demodulating the carrier is the same as low-passing
    the unshifted spectrum with the shifted pupil.  The two agree exactly when
    ``f_led`` lies on the DFT grid and this form stays exact off-grid.
    """
    o = specimen.field_at(led.wavelength)
    transfer = pupil.transfer(specimen.size, specimen.pixel_size, led.wavelength,
                              shift=led.spatial_frequency)
    return np.fft.ifft2(np.fft.fft2(o) * transfer)


def coherent_image(specimen: Specimen, led: LedSpec, pupil: Pupil) -> np.ndarray:
    """Intensity ``|(o·exp(ik·r)) ⋆ h|²`` for a single LED."""
    return np.abs(coherent_field(specimen, led, pupil)) ** 2


@dataclass
class ImageStack:
    """Per-LED intensity images for one field of view, shape ``(N, H, W)``."""

    images: np.ndarray
    exposures: np.ndarray | None = None

    def __post_init__(self):
        if self.images.ndim != 3:
            raise OpticsError(f"stack must be (N, H, W), got {self.images.shape}")
        if self.exposures is None:
            self.exposures = np.ones(self.images.shape[0])
        self.exposures = np.asarray(self.exposures, dtype=np.float64)
        if self.exposures.shape != (self.images.shape[0],):
            raise OpticsError("one exposure per LED image required")
        if np.any(self.exposures <= 0):
            raise OpticsError("exposures must be positive")

    @property
    def n(self) -> int:
        return self.images.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.images.shape[1:]


def simulate_stack(specimen: Specimen, array: LedArray, pupil: Pupil,
                   exposures=None) -> ImageStack:
    """Simulate one image per LED, turned on individually.

    Intensities are in units of a unit-amplitude plane wave through a clear
    aperture, so a blank field under the center LED reads exactly 1.
    """
    exposures = np.ones(array.n) if exposures is None else np.asarray(exposures, dtype=np.float64)
    n = specimen.size
    images = np.empty((array.n, n, n))
    spectra = {}
    for index in range(array.n):
        led = led_spec(array, index)
        if led.wavelength not in spectra:
            spectra[led.wavelength] = np.fft.fft2(specimen.field_at(led.wavelength))
        transfer = pupil.transfer(n, specimen.pixel_size, led.wavelength, shift=led.spatial_frequency)
        images[index] = np.abs(np.fft.ifft2(spectra[led.wavelength] * transfer)) ** 2
        images[index] *= exposures[index]
    return ImageStack(images=images, exposures=exposures)


# -- persistence -------------------------------------------------------------

def _write_raw(path: Path, image: np.ndarray) -> None:
    path.write_bytes(np.ascontiguousarray(image, dtype="<f4").tobytes(order="C"))


def _read_raw(path: Path, size: int) -> np.ndarray:
    data = np.frombuffer(path.read_bytes(), dtype="<f4")
    if data.size != size * size:
        raise OpticsError(f"{path} holds {data.size} values, expected {size * size}")
    return data.reshape(size, size).copy()


def write_stack(directory, stack: ImageStack, array: LedArray, fluorescence: np.ndarray,
                pixel_size: float, extra: dict | None = None) -> Path:
    """Write a stack as ``manifest`` + ``led_<i>.raw`` + ``fluor.raw``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    if stack.n != array.n:
        raise OpticsError(f"stack has {stack.n} images but the array has {array.n} LEDs")
    size = stack.shape[0]
    manifest = {
        "grid": size,
        "pixel_size": pixel_size,
        "led_array": array.to_dict(),
        "exposures": [float(e) for e in stack.exposures],
        "dtype": "float32",
        "byte_order": "little",
        "layout": "row-major",
    }
    if extra:
        manifest.update(extra)
    for i, img in enumerate(stack.images):
        _write_raw(directory / f"led_{i}.raw", img)
    _write_raw(directory / "fluor.raw", fluorescence)
    (directory / "manifest").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return directory


def read_stack(directory) -> tuple[ImageStack, np.ndarray, dict]:
    """Inverse of :func:`write_stack`; returns ``(stack, fluorescence, manifest)``."""
    directory = Path(directory)
    manifest = json.loads((directory / "manifest").read_text())
    if manifest.get("dtype") != "float32" or manifest.get("byte_order") != "little":
        raise OpticsError(f"unsupported stack encoding in {directory}")
    size = int(manifest["grid"])
    array = LedArray.from_dict(manifest["led_array"])
    images = np.stack([_read_raw(directory / f"led_{i}.raw", size) for i in range(array.n)])
    fluor = _read_raw(directory / "fluor.raw", size)
    return ImageStack(images, np.asarray(manifest["exposures"])), fluor, manifest
