"""Template sets derived from a source volume, for use by the pickers.

A template set holds L unit-norm signal patterns of equal dims, either 2D
projections of a rotated volume, 3D rotated copies of it, or externally
supplied arrays. Sets are immutable once built.
"""

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    ArgumentError,
    DegenerateTemplateError,
    ShapeError,
    UndefinedCorrelationError,
)
from .metrics import pcc
from .tensors import (
    Rotation,
    RotationGrid,
    as_tensor,
    project_volume,
    read_tensor,
    rotate_volume,
    sample_rotation_grid,
    write_tensor,
)

KINDS = ("projection-2d", "rotation-3d", "external")

UNIT_NORM_TOL = 1e-9
DISTINCT_PCC_TOL = 1e-6
MANIFEST_NAME = "manifest.csv"


def _normalize(values):
    norm = float(np.linalg.norm(values))
    if norm < 1e-12:
        raise DegenerateTemplateError("template norm is below 1e-12")
    return values / norm


def _check_distinct_pair(a, b, i, j):
    try:
        score = pcc(a, b)
    except UndefinedCorrelationError:
        score = 1.0 if np.allclose(a, b, atol=1e-9) else 0.0
    if score >= 1.0 - DISTINCT_PCC_TOL:
        raise ArgumentError(f"templates {i} and {j} are not distinct (pcc={score:.9f})")


@dataclass(frozen=True)
class TemplateSet:
    """Stack of L unit-norm templates plus how they were made."""

    templates: np.ndarray
    kind: str
    source: np.ndarray | None = None
    grid: RotationGrid | None = None

    def __post_init__(self):
        stack = np.asarray(self.templates, dtype=np.float64)
        if stack.ndim not in (3, 4):
            raise ShapeError(f"expected a stack of 2D or 3D templates, got {stack.ndim - 1}D")
        if stack.shape[0] < 1:
            raise ArgumentError("template set is empty")
        sides = set(stack.shape[1:])
        if len(sides) != 1:
            raise ShapeError(f"templates must be square or cubic, got dims {stack.shape[1:]}")
        if not np.all(np.isfinite(stack)):
            raise ArgumentError("templates contain non-finite values")
        norms = np.linalg.norm(stack.reshape(stack.shape[0], -1), axis=1)
        if np.any(np.abs(norms - 1.0) > UNIT_NORM_TOL):
            worst = int(np.argmax(np.abs(norms - 1.0)))
            raise ArgumentError(f"template {worst} has norm {norms[worst]!r}, expected 1")
        for i in range(stack.shape[0]):
            for j in range(i + 1, stack.shape[0]):
                _check_distinct_pair(stack[i], stack[j], i, j)
        if self.kind not in KINDS:
            raise ArgumentError(f"unknown template kind {self.kind!r}")
        if self.grid is not None and len(self.grid) != stack.shape[0]:
            raise ArgumentError("rotation grid length does not match template count")
        stack.setflags(write=False)
        object.__setattr__(self, "templates", stack)

    def __len__(self):
        return self.templates.shape[0]

    def __getitem__(self, index):
        return self.templates[index]

    def __iter__(self):
        return iter(self.templates)

    @property
    def side(self):
        return self.templates.shape[1]

    @property
    def template_ndim(self):
        return self.templates.ndim - 1


def _resolve_grid(count, seed, grid):
    if count < 1:
        raise ArgumentError("need at least one template")
    if grid is None:
        return sample_rotation_grid(count, seed)
    if len(grid) != count:
        raise ArgumentError(f"grid holds {len(grid)} rotations but {count} were requested")
    return grid


def make_projection_templates(volume, count, seed, grid=None, interp="trilinear"):
    """Project `count` rotated copies of a cubic volume down to 2D images."""
    volume = as_tensor(volume, ndim=3)
    grid = _resolve_grid(count, seed, grid)
    templates = np.stack(
        [_normalize(project_volume(rotate_volume(volume, r, interp=interp))) for r in grid]
    )
    return TemplateSet(templates, kind="projection-2d", source=volume, grid=grid)


def make_rotation_templates(volume, count, seed, grid=None, interp="trilinear"):
    """Rotate a cubic volume `count` times without projecting."""
    volume = as_tensor(volume, ndim=3)
    grid = _resolve_grid(count, seed, grid)
    templates = np.stack(
        [_normalize(rotate_volume(volume, r, interp=interp)) for r in grid]
    )
    return TemplateSet(templates, kind="rotation-3d", source=volume, grid=grid)


def external_templates(stack):
    """Adopt caller-supplied arrays as templates, normalizing each one."""
    stack = np.asarray(stack, dtype=np.float64)
    if stack.ndim not in (3, 4):
        raise ShapeError("external templates must be a stack of 2D or 3D arrays")
    templates = np.stack([_normalize(t) for t in stack])
    return TemplateSet(templates, kind="external")


def lowpass(template_set, cutoff):
    """Zero Fourier content beyond `cutoff` (as a fraction of Nyquist).

    Applies a hard spherical mask of radius cutoff/2 cycles per pixel and
    renormalizes. cutoff=1 keeps the full band and returns the set as is.
    """
    if not 0.0 < cutoff <= 1.0:
        raise ArgumentError(f"cutoff must lie in (0, 1], got {cutoff}")
    if cutoff == 1.0:
        return template_set
    side = template_set.side
    freqs = np.fft.fftfreq(side)
    axes = np.meshgrid(*([freqs] * template_set.template_ndim), indexing="ij")
    mask = sum(f ** 2 for f in axes) <= (0.5 * cutoff) ** 2
    filtered = np.stack(
        [_normalize(np.fft.ifftn(np.fft.fftn(t) * mask).real) for t in template_set]
    )
    return TemplateSet(
        filtered,
        kind=template_set.kind,
        source=template_set.source,
        grid=template_set.grid,
    )


def save_templates(template_set, directory):
    """Write one tensor file per template plus a manifest CSV."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    rows = []
    for index, template in enumerate(template_set):
        write_tensor(directory / f"template_{index:03d}.sfn", template)
        if template_set.grid is not None:
            q = template_set.grid[index].quaternion
        else:
            q = np.array([1.0, 0.0, 0.0, 0.0])
        rows.append((index, *q, template_set.kind))
    with open(directory / MANIFEST_NAME, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["index", "qw", "qx", "qy", "qz", "kind"])
        for index, qw, qx, qy, qz, kind in rows:
            writer.writerow([index] + ["%.17g" % c for c in (qw, qx, qy, qz)] + [kind])
    return directory / MANIFEST_NAME


def load_templates(directory):
    """Rebuild a set saved by save_templates.

    Templates are stored in 32-bit files, so each one is renormalized on
    load to restore the unit-norm invariant.
    """
    directory = Path(directory)
    manifest = directory / MANIFEST_NAME
    if not manifest.is_file():
        raise ArgumentError(f"no template manifest at {manifest}")
    rotations = []
    kinds = set()
    indices = []
    with open(manifest, newline="") as handle:
        for row in csv.DictReader(handle):
            indices.append(int(row["index"]))
            kinds.add(row["kind"])
            quaternion = [float(row[k]) for k in ("qw", "qx", "qy", "qz")]
            rotations.append(Rotation.from_quaternion(quaternion))
    if not indices:
        raise ArgumentError(f"empty template manifest at {manifest}")
    if len(kinds) != 1:
        raise ArgumentError(f"manifest mixes template kinds: {sorted(kinds)}")
    kind = kinds.pop()
    if kind not in KINDS:
        raise ArgumentError(f"unknown template kind {kind!r} in manifest")
    if sorted(indices) != list(range(len(indices))):
        raise ArgumentError("manifest indices are not 0..L-1")
    order = np.argsort(indices)
    templates = np.stack(
        [
            _normalize(read_tensor(directory / f"template_{indices[i]:03d}.sfn"))
            for i in order
        ]
    )
    grid = None
    if kind != "external":
        grid = RotationGrid.from_rotations([rotations[i] for i in order])
    return TemplateSet(templates, kind=kind, grid=grid)
