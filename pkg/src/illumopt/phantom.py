"""Synthetic cell phantoms and train/val/test dataset assembly.

Cells are non-overlapping ellipses whose optical thickness is a Gaussian bump
tapered to zero at the cell boundary.  Each cell carries a nucleus (an inner
ellipse with extra thickness and a weak, color-dependent absorption).  The
fluorescence target marks either nuclei or a thin membrane band.
"""

from __future__ import annotations

import enum
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .optics import ImageStack, LedArray, Pupil, Specimen, read_stack, simulate_stack, write_stack

REFERENCE_WAVELENGTH = 540e-9
SPLITS = ("train", "val", "test")


class PhantomError(RuntimeError):
    pass


class Mode(str, enum.Enum):
    NUCLEI = "nuclei"
    MEMBRANE = "membrane"


@dataclass(frozen=True)
class PhantomParams:
    mode: Mode = Mode.MEMBRANE
    cell_count_range: tuple[int, int] = (2, 4)
    cell_radius_range: tuple[float, float] = (7.0, 12.0)
    phase_range: tuple[float, float] = (0.5, 1.5)
    absorption_range: tuple[float, float] = (0.0, 0.15)
    band_width: float = 3.0
    margin: float = 2.0
    pixel_size: float = 1.42e-6
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "mode", Mode(self.mode))
        for name in ("cell_count_range", "cell_radius_range", "phase_range", "absorption_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name} is empty: {lo} > {hi}")
            object.__setattr__(self, name, (lo, hi))
        if self.cell_count_range[0] < 0:
            raise ValueError("cell counts must be nonnegative")
        if self.cell_radius_range[0] <= 0:
            raise ValueError("cell radii must be positive")
        if not (0 <= self.absorption_range[0] and self.absorption_range[1] < 1):
            raise ValueError("absorption must lie in [0, 1)")
        if self.band_width <= 0:
            raise ValueError("band_width must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mode"] = self.mode.value
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


@dataclass(frozen=True)
class Cell:
    cy: float
    cx: float
    a: float  # semi-axis along the rotated x direction, pixels
    b: float
    theta: float
    phase: float
    absorption: float
    taper: float
    brightness: float
    nucleus_scale: float

    def rho(self, yy: np.ndarray, xx: np.ndarray) -> np.ndarray:
        """Ellipse-normalized radius; 1 on the cell boundary."""
        dy, dx = yy - self.cy, xx - self.cx
        c, s = math.cos(self.theta), math.sin(self.theta)
        u = c * dx + s * dy
        v = -s * dx + c * dy
        return np.sqrt((u / self.a) ** 2 + (v / self.b) ** 2)

    def band_inner_rho(self, band_width: float) -> float:
        """Inner edge of the membrane band in normalized radius."""
        return max(0.0, 1.0 - band_width / min(self.a, self.b))


def _thickness(rho: np.ndarray, taper: float) -> np.ndarray:
    # Gaussian bump shifted and rescaled so it reaches zero at rho = 1
    edge = math.exp(-0.5 / taper**2)
    t = (np.exp(-0.5 * rho**2 / taper**2) - edge) / (1.0 - edge)
    return np.where(rho < 1.0, t, 0.0)


def _place_cells(rng: np.random.Generator, params: PhantomParams, size: int) -> list[Cell]:
    lo, hi = params.cell_count_range
    target = int(rng.integers(lo, hi + 1))
    cells: list[Cell] = []
    attempts = 0
    max_attempts = 200 * max(target, 1)
    while len(cells) < target and attempts < max_attempts:
        attempts += 1
        a = rng.uniform(*params.cell_radius_range)
        b = a * rng.uniform(0.7, 1.0)
        reach = a + params.margin
        if 2 * reach >= size:
            continue
        cy, cx = rng.uniform(reach, size - reach, size=2)
        if any(math.hypot(cy - c.cy, cx - c.cx) < a + c.a + params.margin for c in cells):
            continue
        cells.append(Cell(
            cy=float(cy), cx=float(cx), a=float(a), b=float(b),
            theta=float(rng.uniform(0, math.pi)),
            phase=float(rng.uniform(*params.phase_range)),
            absorption=float(rng.uniform(*params.absorption_range)),
            taper=float(rng.uniform(0.4, 0.8)),
            brightness=0.0,
            nucleus_scale=float(rng.uniform(0.3, 0.5)),
        ))
    if len(cells) < target:
        raise PhantomError(f"placed {len(cells)} of {target} cells after {attempts} attempts")
    return cells


def generate_phantom(params: PhantomParams, grid: int, wavelengths) -> Specimen:
    """Random cell specimen on a ``grid × grid`` periodic field.

    Phase scales as ``REFERENCE_WAVELENGTH / λ`` across channels.  Nuclei
    absorb more at short wavelengths.  Fluorescence brightness grows with
    cell thickness, so multi-level targets depend on recovering phase.
    """
    rng = np.random.default_rng(params.seed)
    cells = _place_cells(rng, params, grid)
    yy, xx = np.mgrid[0:grid, 0:grid].astype(np.float64)

    thickness = np.zeros((grid, grid))
    absorb = np.zeros((grid, grid))
    fluor = np.zeros((grid, grid))
    placed = []
    phase_lo, phase_hi = params.phase_range
    for cell in cells:
        # brighter stain for thicker cells, plus some cell-to-cell spread
        rel = 0.5 if phase_hi == phase_lo else (cell.phase - phase_lo) / (phase_hi - phase_lo)
        brightness = float(np.clip(0.6 + 0.35 * rel + rng.uniform(-0.05, 0.05), 0.05, 1.0))
        cell = Cell(**{**asdict(cell), "brightness": brightness})
        placed.append(cell)

        rho = cell.rho(yy, xx)
        body = _thickness(rho, cell.taper)
        nuc = _thickness(rho / cell.nucleus_scale, 0.6)
        thickness += cell.phase * (body + 0.5 * nuc)
        absorb += cell.absorption * (0.3 * body + nuc)

        if params.mode is Mode.NUCLEI:
            fluor += brightness * (rho < cell.nucleus_scale) * (0.8 + 0.2 * nuc)
        else:
            inner = cell.band_inner_rho(params.band_width)
            band = (rho >= inner) & (rho < 1.0)
            # brighter toward the outer edge of the band
            profile = 0.8 + 0.2 * np.clip((rho - inner) / max(1.0 - inner, 1e-12), 0.0, 1.0)
            fluor += brightness * band * profile

    transmittance = {}
    for lam in wavelengths:
        scale = REFERENCE_WAVELENGTH / lam
        amplitude = np.exp(-absorb * scale**2)
        transmittance[float(lam)] = amplitude * np.exp(1j * thickness * scale)
    return Specimen(
        transmittance=transmittance,
        pixel_size=params.pixel_size,
        fluorescence=np.clip(fluor, 0.0, 1.0),
        cells=placed,
    )


def tile_stack(stack: ImageStack, fluorescence: np.ndarray, patch: int) -> list[tuple[ImageStack, np.ndarray]]:
    """Cut a large field into non-overlapping ``patch × patch`` tiles.

    For imported stacks bigger than the network input.  Partial tiles at the
    right and bottom edges are dropped.
    """
    h, w = stack.shape
    if fluorescence.shape != (h, w):
        raise ValueError(f"fluorescence {fluorescence.shape} does not match stack {(h, w)}")
    if patch < 1 or patch > min(h, w):
        raise ValueError(f"patch {patch} does not fit a {h}x{w} field")
    tiles = []
    for top in range(0, h - patch + 1, patch):
        for left in range(0, w - patch + 1, patch):
            win = (slice(top, top + patch), slice(left, left + patch))
            tiles.append((ImageStack(stack.images[(slice(None),) + win], stack.exposures), fluorescence[win]))
    return tiles


@dataclass
class DatasetItem:
    specimen_id: str
    split: str
    stack: ImageStack
    fluorescence: np.ndarray
    seed: int


@dataclass
class Dataset:
    items: list[DatasetItem]
    array: LedArray
    pupil: Pupil
    params: PhantomParams
    counts: tuple[int, int, int]
    grid: int
    manifest: dict = field(default_factory=dict)

    def split(self, name: str) -> list[DatasetItem]:
        return [it for it in self.items if it.split == name]

    def arrays(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        """``(stacks (S, N, H, W), targets (S, H, W))`` for one split, float32."""
        items = self.split(name)
        stacks = np.stack([it.stack.images for it in items]).astype(np.float32)
        targets = np.stack([it.fluorescence for it in items]).astype(np.float32)
        return stacks, targets

    @property
    def manifest_hash(self) -> str:
        blob = json.dumps(self.manifest, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


def _specimen_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1, dtype=np.uint64)[0])


def build_dataset(params: PhantomParams, array: LedArray, pupil: Pupil,
                  counts=(1, 1, 1), grid: int = 64) -> Dataset:
    """Simulate a stack per specimen and assign whole specimens to splits."""
    counts = tuple(int(c) for c in counts)
    if len(counts) != 3 or min(counts) < 1:
        raise ValueError(f"need at least one specimen per split, got {counts}")
    total = sum(counts)
    order = np.random.default_rng(params.seed).permutation(total)
    labels = np.repeat(np.array(SPLITS), counts)
    split_of = {int(j): str(labels[pos]) for pos, j in enumerate(order)}

    items = []
    for j in range(total):
        seed = _specimen_seed(params.seed, j)
        spec = generate_phantom(PhantomParams(**{**asdict(params), "seed": seed}), grid, array.channels)
        stack = simulate_stack(spec, array, pupil)
        # the on-disk format is float32; keep memory and disk bit-identical
        stack = ImageStack(stack.images.astype(np.float32), stack.exposures)
        items.append(DatasetItem(
            specimen_id=f"s{j:05d}", split=split_of[j], stack=stack,
            fluorescence=spec.fluorescence.astype(np.float32), seed=seed,
        ))
    manifest = {
        "params": params.to_dict(),
        "led_array": array.to_dict(),
        "na": pupil.na,
        "grid": grid,
        "counts": dict(zip(SPLITS, counts)),
        "specimens": [{"id": it.specimen_id, "split": it.split, "seed": it.seed} for it in items],
    }
    return Dataset(items, array, pupil, params, counts, grid, manifest)


def write_dataset(dataset: Dataset, root) -> Path:
    root = Path(root)
    for it in dataset.items:
        write_stack(root / "split" / it.split / it.specimen_id, it.stack, dataset.array,
                    it.fluorescence, dataset.params.pixel_size,
                    extra={"specimen_id": it.specimen_id, "seed": it.seed, "na": dataset.pupil.na})
    (root / "dataset.manifest").write_text(json.dumps(dataset.manifest, indent=2, sort_keys=True) + "\n")
    return root


def read_dataset(root) -> Dataset:
    root = Path(root)
    manifest = json.loads((root / "dataset.manifest").read_text())
    p = manifest["params"]
    params = PhantomParams(**{k: tuple(v) if isinstance(v, list) else v for k, v in p.items()})
    array = LedArray.from_dict(manifest["led_array"])
    items = []
    for entry in manifest["specimens"]:
        stack, fluor, _ = read_stack(root / "split" / entry["split"] / entry["id"])
        items.append(DatasetItem(entry["id"], entry["split"], stack, fluor, entry["seed"]))
    counts = tuple(manifest["counts"][s] for s in SPLITS)
    return Dataset(items, array, Pupil(manifest["na"]), params, counts, manifest["grid"], manifest)
