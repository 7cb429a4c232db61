"""Dense tensors, rotations, projection, and the on-disk tensor format.

Volumes follow the active rotation convention: the rotated volume reads
the original at inversely rotated coordinates, measured about the grid
center ``(n - 1) / 2``.  Resampling interpolates trilinearly by default;
nearest-neighbor lookup is available where exactness matters more than
smoothness (single-voxel oracles).
"""

import struct
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import ArgumentError, ShapeError
from .rng import STREAM_ROTATION_GRID, generator

TENSOR_MAGIC = b"SFN1"
INTERPOLATIONS = ("trilinear", "nearest")
_INTERP_ORDER = {"trilinear": 1, "nearest": 0}

# Grid rotations closer than this (radians) count as duplicates.
MIN_GRID_ANGLE = 1e-9


def as_tensor(values, ndim=None):
    """Validate and return a float64 tensor with 1 to 3 axes."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim < 1 or arr.ndim > 3:
        raise ShapeError(f"tensors carry 1 to 3 axes, got {arr.ndim}")
    if ndim is not None and arr.ndim != ndim:
        raise ShapeError(f"expected {ndim} axes, got {arr.ndim}")
    if not np.all(np.isfinite(arr)):
        raise ArgumentError("tensor values must be finite")
    return arr


def _check_cubic(volume):
    v = np.asarray(volume, dtype=np.float64)
    if v.ndim != 3 or len(set(v.shape)) != 1:
        raise ShapeError(f"expected a cubic volume, got shape {v.shape}")
    return v


@dataclass(frozen=True)
class Rotation:
    """A 3D rotation stored as a unit quaternion ``(w, x, y, z)``."""

    w: float
    x: float
    y: float
    z: float

    def __post_init__(self):
        norm = np.sqrt(self.w ** 2 + self.x ** 2 + self.y ** 2 + self.z ** 2)
        if not np.isfinite(norm) or abs(norm - 1.0) > 1e-12:
            raise ArgumentError(f"quaternion norm must be 1 within 1e-12, got {norm!r}")

    @classmethod
    def identity(cls):
        return cls(1.0, 0.0, 0.0, 0.0)

    @classmethod
    def from_quaternion(cls, q):
        """Build from any nonzero 4-vector, normalizing it."""
        q = np.asarray(q, dtype=np.float64)
        if q.shape != (4,):
            raise ShapeError("quaternion must have 4 components")
        norm = np.linalg.norm(q)
        if not np.isfinite(norm) or norm < 1e-12:
            raise ArgumentError("quaternion must be nonzero and finite")
        q = q / norm
        return cls(*q)

    @classmethod
    def from_axis_angle(cls, axis, angle):
        axis = np.asarray(axis, dtype=np.float64)
        norm = np.linalg.norm(axis)
        if norm < 1e-12:
            raise ArgumentError("rotation axis must be nonzero")
        half = 0.5 * angle
        return cls.from_quaternion(
            np.concatenate(([np.cos(half)], np.sin(half) * axis / norm))
        )

    @property
    def quaternion(self):
        return np.array([self.w, self.x, self.y, self.z])

    def compose(self, other):
        """Rotation equal to applying ``other`` first, then ``self``."""
        w1, v1 = self.w, np.array([self.x, self.y, self.z])
        w2, v2 = other.w, np.array([other.x, other.y, other.z])
        w = w1 * w2 - v1 @ v2
        v = w1 * v2 + w2 * v1 + np.cross(v1, v2)
        return Rotation.from_quaternion(np.concatenate(([w], v)))

    def inverse(self):
        return Rotation(self.w, -self.x, -self.y, -self.z)

    def as_matrix(self):
        """3x3 matrix acting on column coordinates."""
        w, x, y, z = self.w, self.x, self.y, self.z
        return np.array(
            [
                [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
                [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
                [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
            ]
        )

    def angle_to(self, other):
        """Geodesic angle (radians) between two rotations."""
        chord = min(
            np.linalg.norm(self.quaternion - other.quaternion),
            np.linalg.norm(self.quaternion + other.quaternion),
        )
        return 4.0 * np.arcsin(min(chord, 2.0) / 2.0)


@dataclass(frozen=True)
class RotationGrid:
    """An ordered set of pairwise-distinct rotations plus its seed."""

    quaternions: np.ndarray
    seed: int

    def __post_init__(self):
        q = np.asarray(self.quaternions, dtype=np.float64)
        if q.ndim != 2 or q.shape[1] != 4 or q.shape[0] < 1:
            raise ShapeError("quaternions must form an (L, 4) array")
        norms = np.linalg.norm(q, axis=1)
        if not np.allclose(norms, 1.0, atol=1e-12):
            raise ArgumentError("grid quaternions must be unit norm")
        object.__setattr__(self, "quaternions", q)
        self._check_distinct(q)

    @staticmethod
    def _check_distinct(q):
        # Dots first (cheap); only near-duplicates get the exact chordal test.
        max_chord = 2.0 * np.sin(MIN_GRID_ANGLE / 4.0)
        block = 1024
        for start in range(0, len(q), block):
            rows = q[start : start + block]
            dots = np.abs(rows @ q.T)
            for i, j in zip(*np.nonzero(dots > 1.0 - 1e-10)):
                gi = start + i
                if gi >= j:
                    continue
                chord = min(
                    np.linalg.norm(q[gi] - q[j]), np.linalg.norm(q[gi] + q[j])
                )
                if chord < max_chord:
                    raise ArgumentError(
                        f"grid rotations {gi} and {j} coincide within {MIN_GRID_ANGLE} rad"
                    )

    def __len__(self):
        return len(self.quaternions)

    def __getitem__(self, index):
        return Rotation.from_quaternion(self.quaternions[index])

    def __iter__(self):
        for q in self.quaternions:
            yield Rotation.from_quaternion(q)

    @classmethod
    def identity(cls):
        """Single-rotation grid holding only the identity."""
        return cls(np.array([[1.0, 0.0, 0.0, 0.0]]), seed=-1)

    @classmethod
    def from_rotations(cls, rotations, seed=-1):
        return cls(np.stack([r.quaternion for r in rotations]), seed=seed)


def sample_rotation_grid(count, seed):
    """Sample ``count`` uniform rotations (normalized 4D Gaussians).

    Deterministic for a fixed ``(count, seed)`` pair.
    """
    if count < 1:
        raise ArgumentError("grid needs at least one rotation")
    rng = generator(seed, STREAM_ROTATION_GRID)
    q = rng.standard_normal((count, 4))
    norms = np.linalg.norm(q, axis=1, keepdims=True)
    if norms.min() < 1e-12:
        raise ArgumentError("degenerate quaternion draw; use a different seed")
    return RotationGrid(q / norms, seed=seed)


def rotate_volume(volume, rotation, interp="trilinear"):
    """Rotate a cubic volume about its center.

    Output voxel ``x`` reads the input at ``R^-1 (x - c) + c``; points
    falling outside the domain contribute zero.
    """
    v = _check_cubic(volume)
    if interp not in _INTERP_ORDER:
        raise ArgumentError(f"interp must be one of {INTERPOLATIONS}, got {interp!r}")
    center = (np.array(v.shape, dtype=np.float64) - 1.0) / 2.0
    inverse = rotation.as_matrix().T
    offset = center - inverse @ center
    return ndimage.affine_transform(
        v,
        inverse,
        offset=offset,
        order=_INTERP_ORDER[interp],
        mode="constant",
        cval=0.0,
        prefilter=False,
    )


def project_volume(volume):
    """Sum a cubic volume along its third axis: dims are the first two."""
    return _check_cubic(volume).sum(axis=2)


def write_tensor(path, values):
    """Write a tensor file: magic, ndim byte, u32 dims, float32 payload.

    Accepts 1 to 4 axes; the fourth axis covers stacked patch containers.
    """
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim < 1 or arr.ndim > 4:
        raise ShapeError(f"tensor files carry 1 to 4 axes, got {arr.ndim}")
    if not np.all(np.isfinite(arr)):
        raise ArgumentError("refusing to write non-finite values")
    with open(path, "wb") as fh:
        fh.write(TENSOR_MAGIC)
        fh.write(struct.pack("<B", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return path


def read_tensor(path):
    """Read a tensor file back as float64 (payload is stored float32)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != TENSOR_MAGIC:
        raise ArgumentError(f"{path}: not a tensor file (bad magic)")
    if len(blob) < 5:
        raise ArgumentError(f"{path}: truncated header")
    ndim = blob[4]
    if ndim < 1 or ndim > 4:
        raise ArgumentError(f"{path}: unsupported rank {ndim}")
    header_end = 5 + 4 * ndim
    dims = struct.unpack(f"<{ndim}I", blob[5:header_end])
    if any(d < 1 for d in dims):
        raise ArgumentError(f"{path}: dims must be positive, got {dims}")
    expected = int(np.prod(dims)) * 4
    payload = blob[header_end:]
    if len(payload) != expected:
        raise ArgumentError(
            f"{path}: payload holds {len(payload)} bytes, expected {expected}"
        )
    data = np.frombuffer(payload, dtype="<f4").reshape(dims)
    arr = data.astype(np.float64)
    if not np.all(np.isfinite(arr)):
        raise ArgumentError(f"{path}: non-finite values in payload")
    return arr
