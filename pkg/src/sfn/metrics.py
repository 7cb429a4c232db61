"""Correlation metrics, shell correlation, matching, and scaling probes."""

import csv
import io
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import optimize

from .errors import ArgumentError, ShapeError, UndefinedCorrelationError
from .rng import STREAM_REFINE, generator
from .tensors import Rotation, rotate_volume

NYQUIST = 0.5


def pcc(a, b):
    """Pearson cross-correlation between two equally shaped tensors.

    Both inputs are centered and normalized; constant input has no
    defined correlation and raises.
    """
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ShapeError("correlation needs equally shaped inputs")
    a = a - a.mean()
    b = b - b.mean()
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na < 1e-300 or nb < 1e-300:
        raise UndefinedCorrelationError("correlation against a constant input")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


@dataclass
class FscCurve:
    """Shell correlations between two volumes.

    ``radii`` are spatial frequencies in cycles per pixel; shell 0 holds
    the DC coefficient alone, the remaining shells evenly partition
    (0, Nyquist].  ``counts`` are Fourier samples per shell.
    """

    radii: np.ndarray
    correlations: np.ndarray
    counts: np.ndarray

    def to_csv_text(self):
        buf = io.StringIO()
        writer = csv.writer(buf)
        writer.writerow(["frequency", "correlation", "samples"])
        for radius, corr, count in zip(self.radii, self.correlations, self.counts):
            writer.writerow([f"{radius:.17g}", f"{corr:.17g}", int(count)])
        return buf.getvalue()


def fsc(a, b, n_shells=9):
    """Fourier shell correlation between two cubic volumes.

    Per shell: ``Re(sum F_a conj(F_b)) / sqrt(sum |F_a|^2 sum |F_b|^2)``.
    Samples beyond Nyquist (corner frequencies) are ignored.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 3 or len(set(a.shape)) != 1:
        raise ShapeError("shell correlation needs two equal cubic volumes")
    if n_shells < 2:
        raise ArgumentError("need at least two shells (DC plus one)")
    n = a.shape[0]
    fa = np.fft.fftn(a)
    fb = np.fft.fftn(b)
    freqs = np.fft.fftfreq(n)
    radius = np.sqrt(
        sum(f ** 2 for f in np.meshgrid(freqs, freqs, freqs, indexing="ij"))
    ).ravel()
    width = NYQUIST / (n_shells - 1)
    shell = np.where(radius == 0.0, 0, np.ceil(radius / width - 1e-12).astype(np.int64))
    valid = radius <= NYQUIST + 1e-12
    shell = shell[valid]
    cross = (fa.ravel() * np.conj(fb.ravel()))[valid]
    pa = (np.abs(fa.ravel()) ** 2)[valid]
    pb = (np.abs(fb.ravel()) ** 2)[valid]
    counts = np.bincount(shell, minlength=n_shells)
    num = np.bincount(shell, weights=cross.real, minlength=n_shells)
    da = np.bincount(shell, weights=pa, minlength=n_shells)
    db = np.bincount(shell, weights=pb, minlength=n_shells)
    denom = np.sqrt(da * db)
    corr = np.zeros(n_shells)
    filled = denom > 0.0
    corr[filled] = np.clip(num[filled] / denom[filled], -1.0, 1.0)
    radii = np.concatenate(([0.0], (np.arange(1, n_shells) - 0.5) * width))
    return FscCurve(radii=radii, correlations=corr, counts=counts)


def fsc_resolution(curve, criterion=0.143):
    """First criterion crossing as a real-space period in pixels.

    Linearly interpolates between the shells straddling the crossing.
    If the curve never falls below the criterion the Nyquist-limit
    period (2 pixels) is returned and a warning is emitted.
    """
    radii = np.asarray(curve.radii)
    corr = np.asarray(curve.correlations)
    if corr[0] < criterion:
        return float(1.0 / radii[1])
    for j in range(1, len(corr)):
        if corr[j] < criterion:
            prev_r, prev_c = radii[j - 1], corr[j - 1]
            frac = (prev_c - criterion) / (prev_c - corr[j])
            crossing = prev_r + frac * (radii[j] - prev_r)
            return float(1.0 / crossing)
    warnings.warn("correlation never fell below the criterion; at Nyquist limit")
    return float(1.0 / NYQUIST)


def mean_fsc_below(curve, max_frequency, include_dc=False):
    """Average shell correlation for shells with radius <= max_frequency.

    DC is excluded by default: its correlation only reflects the sign of
    the two volume means, not structural consistency.
    """
    radii = np.asarray(curve.radii)
    mask = radii <= max_frequency
    if not include_dc:
        mask &= radii > 0.0
    if not mask.any():
        raise ArgumentError("no shells below the requested frequency")
    return float(np.asarray(curve.correlations)[mask].mean())


@dataclass
class BiasReport:
    """How closely fitted class means track the picking templates."""

    permutation: np.ndarray
    per_class_pcc: np.ndarray
    mean_pcc: float
    scaled_errors: np.ndarray
    alphas: np.ndarray
    threshold: float

    def to_csv_text(self):
        buf = io.StringIO()
        writer = csv.writer(buf)
        writer.writerow(["template", "matched_mean", "pcc", "scaled_error", "alpha"])
        for ell in range(len(self.permutation)):
            writer.writerow(
                [
                    ell,
                    int(self.permutation[ell]),
                    f"{self.per_class_pcc[ell]:.17g}",
                    f"{self.scaled_errors[ell]:.17g}",
                    f"{self.alphas[ell]:.17g}",
                ]
            )
        return buf.getvalue()


def _template_stack(templates):
    stack = getattr(templates, "templates", templates)
    return np.asarray(stack, dtype=np.float64)


def match_classes(means, templates, threshold=1.0):
    """Assign fitted means to templates by maximum total correlation.

    Uses the Hungarian algorithm on the pairwise PCC matrix.  Reported
    per template ``ell``: the matched mean index, PCC, the scaled error
    ``|mean / T - x|``-style residual ``|mean - T x|^2``, and the axis
    projection ``<mean, x>``.
    """
    means = np.asarray(means, dtype=np.float64)
    stack = _template_stack(templates)
    if means.shape != stack.shape:
        raise ShapeError(
            f"means {means.shape} and templates {stack.shape} must align"
        )
    count = len(stack)
    score = np.empty((count, count))
    for i in range(count):
        for j in range(count):
            score[i, j] = pcc(means[i], stack[j])
    rows, cols = optimize.linear_sum_assignment(score, maximize=True)
    permutation = np.empty(count, dtype=np.int64)
    permutation[cols] = rows
    flat_means = means.reshape(count, -1)
    flat_templates = stack.reshape(count, -1)
    per_class = np.array([score[permutation[ell], ell] for ell in range(count)])
    scaled_errors = np.array(
        [
            np.sum((flat_means[permutation[ell]] - threshold * flat_templates[ell]) ** 2)
            for ell in range(count)
        ]
    )
    alphas = np.array(
        [flat_means[permutation[ell]] @ flat_templates[ell] for ell in range(count)]
    )
    return BiasReport(
        permutation=permutation,
        per_class_pcc=per_class,
        mean_pcc=float(per_class.mean()),
        scaled_errors=scaled_errors,
        alphas=alphas,
        threshold=float(threshold),
    )


@dataclass
class ComplexityFit:
    """Log-log slopes of mean-square error against sample count and dimension."""

    slope_samples: float
    slope_dimension: float
    fixed_dimension: int
    fixed_samples: int


def complexity_probe(results):
    """Fit scaling exponents from ``(samples, dimension, mse)`` rows.

    The samples slope is fitted on the dimension value carrying the most
    distinct sample counts, and vice versa.  Requires at least three
    distinct values on each axis.
    """
    rows = [(int(m), int(d), float(mse)) for m, d, mse in results]
    if any(mse <= 0.0 for _, _, mse in rows):
        raise ArgumentError("mse values must be positive for log-log fits")

    def best_group(fixed_of, varying_of):
        groups = {}
        for row in rows:
            groups.setdefault(fixed_of(row), set()).add(varying_of(row))
        fixed, varying = max(groups.items(), key=lambda kv: len(kv[1]))
        if len(varying) < 3:
            raise ArgumentError("need at least three distinct values per axis")
        return fixed

    fixed_d = best_group(lambda r: r[1], lambda r: r[0])
    fixed_m = best_group(lambda r: r[0], lambda r: r[1])

    def fit(points):
        xs = np.log([p[0] for p in points])
        ys = np.log([p[1] for p in points])
        return float(np.polyfit(xs, ys, 1)[0])

    slope_m = fit([(m, mse) for m, d, mse in rows if d == fixed_d])
    slope_d = fit([(d, mse) for m, d, mse in rows if m == fixed_m])
    return ComplexityFit(
        slope_samples=slope_m,
        slope_dimension=slope_d,
        fixed_dimension=fixed_d,
        fixed_samples=fixed_m,
    )


def best_rotation_pcc(volume, reference, grid, refine=50, seed=0, interp="trilinear"):
    """Maximum PCC of ``volume`` against rotated copies of ``reference``.

    Scans the grid, then hill-climbs with ``refine`` random perturbations
    of shrinking angle around the best grid rotation.  Returns
    ``(pcc, rotation)``.
    """
    best_corr = -np.inf
    best_rot = None
    for rotation in grid:
        corr = pcc(volume, rotate_volume(reference, rotation, interp=interp))
        if corr > best_corr:
            best_corr, best_rot = corr, rotation
    if refine > 0:
        rng = generator(seed, STREAM_REFINE)
        angle = 0.35
        for step in range(refine):
            axis = rng.standard_normal(3)
            delta = rng.uniform(-angle, angle)
            candidate = Rotation.from_axis_angle(axis, delta).compose(best_rot)
            corr = pcc(volume, rotate_volume(reference, candidate, interp=interp))
            if corr > best_corr:
                best_corr, best_rot = corr, candidate
            angle = max(angle * 0.93, 0.02)
    return best_corr, best_rot
