"""Synthetic noise canvases and particle planting.

Fields are white Gaussian noise keyed by ``(seed, stream)``; planted
canvases add variance-normalized structure at non-overlapping sites and
then the same noise field on top, so a planted canvas minus its clean
signal equals the pure-noise field for that key exactly.
"""

import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import ArgumentError, DegenerateTemplateError, SaturationError, ShapeError
from .rng import STREAM_PLACEMENT, generator

MAX_PLACEMENT_ATTEMPTS = 1_000_000
MAX_FILL_FRACTION = 0.25


@dataclass(frozen=True)
class NoiseSpec:
    """White-noise scale plus the RNG key that makes a field reproducible."""

    sigma: float
    seed: int
    stream: int = 0

    def __post_init__(self):
        if not np.isfinite(self.sigma) or self.sigma <= 0.0:
            raise ArgumentError(f"sigma must be positive and finite, got {self.sigma}")


@dataclass(frozen=True)
class PlantRecord:
    """Ground-truth location of one planted structure (center voxel)."""

    index: int
    position: tuple
    projection_index: int


@dataclass
class SyntheticField:
    """A noisy canvas, its ground-truth plant list, and the planted SNR."""

    canvas: np.ndarray
    truth: list = field(default_factory=list)
    snr: float = 0.0
    spec: NoiseSpec = None


def gaussian_field(dims, spec):
    """White Gaussian noise with standard deviation ``spec.sigma``.

    The Philox key is ``(seed, stream)``, so the same key always yields
    the same field and distinct streams are independent.
    """
    dims = tuple(int(d) for d in dims)
    if len(dims) not in (2, 3) or any(d < 1 for d in dims):
        raise ShapeError(f"canvas dims must be 2D or 3D positive, got {dims}")
    rng = generator(spec.seed, spec.stream)
    return rng.standard_normal(dims) * spec.sigma


def _normalize_projections(projections):
    stack = np.asarray(projections, dtype=np.float64)
    if stack.ndim not in (3, 4):
        raise ShapeError("projections must be a stack of 2D or 3D patches")
    sides = stack.shape[1:]
    if len(set(sides)) != 1:
        raise ShapeError(f"projections must be square/cubic, got {sides}")
    out = np.empty_like(stack)
    for i, proj in enumerate(stack):
        spread = proj.std()
        if spread < 1e-12:
            raise DegenerateTemplateError(f"projection {i} has zero variance")
        out[i] = proj / spread
    return out


def draw_positions(dims, side, count, rng, occupied=(), budget=MAX_PLACEMENT_ATTEMPTS):
    """Uniform centers whose boxes fit inside the canvas and never overlap.

    Overlap means L-infinity center distance below the patch side.  Draws
    are rejected and retried up to a global attempt budget; exhausting it
    raises a saturation error.
    """
    dims = tuple(dims)
    half = side // 2
    highs = np.array([dim - side + 1 for dim in dims], dtype=np.int64)
    placed = [np.asarray(p, dtype=np.int64) for p in occupied]
    fresh = []
    attempts = 0
    while len(fresh) < count:
        if attempts >= budget:
            raise SaturationError(
                f"placed {len(fresh)} of {count} patches after {attempts} attempts"
            )
        attempts += 1
        center = rng.integers(0, highs) + half
        if all(np.abs(center - p).max() >= side for p in placed):
            placed.append(center)
            fresh.append(center)
    return fresh


def plant_particles(dims, projections, count, spec, target_snr):
    """Plant ``count`` variance-normalized structures in a noisy canvas.

    Each site gets a uniformly chosen projection scaled so its per-pixel
    variance over the patch is ``target_snr * sigma^2``; the full noise
    field for ``spec`` is added afterwards.  Positions are centers, drawn
    uniformly without overlap and fully inside the canvas.

    With ``count=0`` this returns a pure-noise field (snr 0).
    """
    dims = tuple(int(d) for d in dims)
    canvas = gaussian_field(dims, spec)
    if count == 0:
        return SyntheticField(canvas=canvas, truth=[], snr=0.0, spec=spec)
    if count < 0:
        raise ArgumentError("count must be nonnegative")
    if not np.isfinite(target_snr) or target_snr <= 0.0:
        raise ArgumentError("target_snr must be positive when planting")
    stack = _normalize_projections(projections)
    side = stack.shape[1]
    if any(side > dim for dim in dims):
        raise ShapeError(f"patch side {side} exceeds canvas dims {dims}")
    if len(dims) != stack.ndim - 1:
        raise ShapeError("projection rank must match canvas rank")
    if count * side ** len(dims) > MAX_FILL_FRACTION * np.prod(dims):
        raise ArgumentError(
            f"{count} patches of side {side} exceed {MAX_FILL_FRACTION:.0%} of the canvas"
        )
    rng = generator(spec.seed, spec.stream ^ STREAM_PLACEMENT)
    positions = draw_positions(dims, side, count, rng)
    scale = np.sqrt(target_snr) * spec.sigma
    clean = np.zeros(dims)
    truth = []
    half = side // 2
    for index, center in enumerate(positions):
        pick = int(rng.integers(0, len(stack)))
        corner = tuple(int(c) - half for c in center)
        window = tuple(slice(c, c + side) for c in corner)
        clean[window] += scale * stack[pick]
        truth.append(
            PlantRecord(index=index, position=tuple(int(c) for c in center), projection_index=pick)
        )
    return SyntheticField(canvas=clean + canvas, truth=truth, snr=float(target_snr), spec=spec)


def write_truth(path, fields_or_truth, ndim=None):
    """Write plant records as CSV: index, center axes, projection index."""
    if isinstance(fields_or_truth, SyntheticField):
        records = fields_or_truth.truth
        ndim = fields_or_truth.canvas.ndim
    else:
        records = list(fields_or_truth)
        if ndim is None:
            ndim = len(records[0].position) if records else 2
    axes = [f"axis{i}" for i in range(ndim)]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["index", *axes, "projection_index"])
        for rec in records:
            writer.writerow([rec.index, *rec.position, rec.projection_index])
    return path


def read_truth(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][0] != "index" or rows[0][-1] != "projection_index":
        raise ArgumentError(f"{path}: not a truth table")
    records = []
    for row in rows[1:]:
        records.append(
            PlantRecord(
                index=int(row[0]),
                position=tuple(int(v) for v in row[1:-1]),
                projection_index=int(row[-1]),
            )
        )
    return records
