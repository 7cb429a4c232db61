"""Reference-free maximum-likelihood estimators fitted to picked patches.

Two estimators share the machinery: a Gaussian mixture with one shared
isotropic covariance for 2D class averages, and a single-volume model over
a discrete rotation grid for 3D reconstruction. Both run standard EM in
the log domain and are deterministic for a fixed seed.

The models are deliberately plain Gaussians; picked data actually follow
truncated laws, and quantifying what the mismatch does to the estimates is
the whole point of the surrounding experiments.
"""

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import logsumexp

from .errors import (
    ArgumentError,
    DegenerateDataError,
    EmptyClassError,
    ShapeError,
)
from .rng import STREAM_EM_INIT, generator
from .tensors import RotationGrid, read_tensor, rotate_volume, write_tensor

WEIGHT_MODES = ("fixed-uniform", "estimated")
# relative slack for the monotone log-likelihood invariant
TRACE_TOL = 1e-9


def labeled_class_means(subsets):
    """Plain per-subset averages of the patches."""
    means = []
    for index, subset in enumerate(subsets):
        if len(subset) == 0:
            raise EmptyClassError(f"subset {index} holds no patches")
        means.append(subset.patches.mean(axis=0))
    return means


def _check_trace(trace):
    trace = np.asarray(trace, dtype=np.float64)
    if trace.size > 1:
        floor = trace[:-1] - TRACE_TOL * np.maximum(1.0, np.abs(trace[:-1]))
        if np.any(trace[1:] < floor):
            worst = int(np.argmin(trace[1:] - floor))
            raise ArgumentError(
                f"log-likelihood decreased at iteration {worst + 1}: "
                f"{trace[worst]} -> {trace[worst + 1]}"
            )
    return trace


@dataclass(frozen=True)
class Gmm2dConfig:
    """Settings for the shared-isotropic-covariance mixture fit."""

    class_count: int
    sigma: float = 1.0
    weights_mode: str = "fixed-uniform"
    max_iters: int = 200
    rel_tol: float = 1e-8
    restarts: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.class_count < 1:
            raise ArgumentError("class_count must be at least 1")
        if not (np.isfinite(self.sigma) and self.sigma > 0):
            raise ArgumentError("sigma must be positive and finite")
        if self.weights_mode not in WEIGHT_MODES:
            raise ArgumentError(f"weights_mode must be one of {WEIGHT_MODES}")
        if self.max_iters < 1:
            raise ArgumentError("max_iters must be at least 1")
        if self.rel_tol <= 0:
            raise ArgumentError("rel_tol must be positive")
        if self.restarts < 1:
            raise ArgumentError("restarts must be at least 1")


@dataclass(frozen=True)
class Gmm2dState:
    """Fitted mixture: class means, weights, and the likelihood trace."""

    means: np.ndarray
    weights: np.ndarray
    log_likelihoods: np.ndarray
    class_totals: np.ndarray
    converged: bool

    def __post_init__(self):
        weights = np.asarray(self.weights, dtype=np.float64)
        if np.any(weights < 0) or abs(weights.sum() - 1.0) > 1e-12:
            raise ArgumentError("weights must be nonnegative and sum to 1")
        trace = _check_trace(self.log_likelihoods)
        object.__setattr__(self, "means", np.asarray(self.means, dtype=np.float64))
        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "log_likelihoods", trace)
        object.__setattr__(self, "class_totals", np.asarray(self.class_totals, dtype=np.float64))


def _patch_stack(picks):
    stack = np.asarray(getattr(picks, "patches", picks), dtype=np.float64)
    if stack.ndim < 2:
        raise ShapeError("expected a stack of patches")
    return stack


def _log_posteriors(flat, means_flat, log_weights, sigma):
    sq = (
        np.einsum("ij,ij->i", flat, flat)[:, None]
        - 2.0 * flat @ means_flat.T
        + np.einsum("ij,ij->i", means_flat, means_flat)[None, :]
    )
    width = flat.shape[1]
    log_prob = log_weights[None, :] - sq / (2.0 * sigma ** 2)
    log_prob -= 0.5 * width * np.log(2.0 * np.pi * sigma ** 2)
    log_norm = logsumexp(log_prob, axis=1)
    return log_prob, log_norm


def em_classify2d(picks, config):
    """Fit the postulated Gaussian mixture to the picked patches.

    Runs the configured number of freshly seeded EM restarts and keeps the
    one with the best final log-likelihood.
    """
    stack = _patch_stack(picks)
    count = stack.shape[0]
    if count < config.class_count:
        raise ArgumentError(
            f"need at least {config.class_count} patches, got {count}"
        )
    flat = stack.reshape(count, -1)
    if count > 1 and float(np.ptp(flat, axis=0).max(initial=0.0)) < 1e-15:
        raise DegenerateDataError("all patches are identical")

    best = None
    for restart in range(config.restarts):
        rng = generator(config.seed, STREAM_EM_INIT + restart)
        means = config.sigma * rng.standard_normal(
            (config.class_count, flat.shape[1])
        )
        weights = np.full(config.class_count, 1.0 / config.class_count)
        trace = []
        totals = np.full(config.class_count, count / config.class_count)
        converged = False
        for _ in range(config.max_iters):
            log_prob, log_norm = _log_posteriors(
                flat, means, np.log(weights), config.sigma
            )
            ll = float(log_norm.sum())
            if trace and abs(ll - trace[-1]) <= config.rel_tol * max(1.0, abs(ll)):
                trace.append(ll)
                converged = True
                break
            trace.append(ll)
            resp = np.exp(log_prob - log_norm[:, None])
            totals = resp.sum(axis=0)
            if totals.min() < 1e-300:
                raise DegenerateDataError("a class lost all responsibility mass")
            means = (resp.T @ flat) / totals[:, None]
            if config.weights_mode == "estimated":
                weights = totals / count
        state = Gmm2dState(
            means=means.reshape((config.class_count,) + stack.shape[1:]),
            weights=weights,
            log_likelihoods=np.asarray(trace),
            class_totals=totals,
            converged=converged,
        )
        if best is None or state.log_likelihoods[-1] > best.log_likelihoods[-1]:
            best = state
    return best


@dataclass(frozen=True)
class Recon3dConfig:
    """Settings for the discrete-rotation volume fit."""

    grid: RotationGrid
    sigma: float = 1.0
    rotation_weights: np.ndarray | None = None
    max_iters: int = 200
    rel_tol: float = 1e-8
    restarts: int = 1
    seed: int = 0
    interp: str = "trilinear"

    def __post_init__(self):
        if len(self.grid) < 1:
            raise ArgumentError("rotation grid is empty")
        if not (np.isfinite(self.sigma) and self.sigma > 0):
            raise ArgumentError("sigma must be positive and finite")
        if self.max_iters < 1:
            raise ArgumentError("max_iters must be at least 1")
        if self.rel_tol <= 0:
            raise ArgumentError("rel_tol must be positive")
        if self.restarts < 1:
            raise ArgumentError("restarts must be at least 1")
        weights = self.rotation_weights
        if weights is None:
            weights = np.full(len(self.grid), 1.0 / len(self.grid))
        else:
            weights = np.asarray(weights, dtype=np.float64)
            if weights.shape != (len(self.grid),):
                raise ShapeError("rotation_weights must give one value per rotation")
            if np.any(weights < 0) or abs(weights.sum() - 1.0) > 1e-12:
                raise ArgumentError("rotation_weights must be nonnegative and sum to 1")
        object.__setattr__(self, "rotation_weights", weights)


@dataclass(frozen=True)
class Recon3dState:
    """Fitted volume and its likelihood trace."""

    volume: np.ndarray
    log_likelihoods: np.ndarray
    converged: bool

    def __post_init__(self):
        trace = _check_trace(self.log_likelihoods)
        object.__setattr__(self, "volume", np.asarray(self.volume, dtype=np.float64))
        object.__setattr__(self, "log_likelihoods", trace)


def em_reconstruct3d(picks, config):
    """Fit one volume to cubic patches observed under unknown rotations.

    The E-step assigns each patch a posterior over the grid rotations; the
    M-step averages back-rotated patches with per-voxel coverage weights.
    Because interpolated rotation is not exactly unitary the update can in
    rare cases reduce the likelihood; such steps are rejected and the fit
    stops at the previous volume, keeping the trace monotone.
    """
    stack = _patch_stack(picks)
    if stack.ndim != 4 or len(set(stack.shape[1:])) != 1:
        raise ShapeError("expected a stack of cubic patches")
    count = stack.shape[0]
    if count == 0:
        raise ArgumentError("no patches to reconstruct from")
    dims = stack.shape[1:]
    flat = stack.reshape(count, -1)
    grid = config.grid
    log_rotation_weights = np.log(np.maximum(config.rotation_weights, 1e-300))
    inverses = [rotation.inverse() for rotation in grid]
    ones = np.ones(dims)
    coverage = np.stack(
        [rotate_volume(ones, inverse, interp=config.interp) for inverse in inverses]
    )

    best = None
    for restart in range(config.restarts):
        rng = generator(config.seed, STREAM_EM_INIT + restart)
        volume = config.sigma * rng.standard_normal(dims)
        trace = []
        converged = False
        previous = volume
        for _ in range(config.max_iters):
            rotated = np.stack(
                [rotate_volume(volume, rotation, interp=config.interp) for rotation in grid]
            ).reshape(len(grid), -1)
            log_prob, log_norm = _log_posteriors(
                flat, rotated, log_rotation_weights, config.sigma
            )
            ll = float(log_norm.sum())
            if trace and ll < trace[-1] - TRACE_TOL * max(1.0, abs(trace[-1])):
                volume = previous
                converged = True
                break
            if trace and abs(ll - trace[-1]) <= config.rel_tol * max(1.0, abs(ll)):
                trace.append(ll)
                converged = True
                break
            trace.append(ll)
            resp = np.exp(log_prob - log_norm[:, None])
            rotation_totals = resp.sum(axis=0)
            sums = (resp.T @ flat).reshape((len(grid),) + dims)
            numer = np.zeros(dims)
            denom = np.zeros(dims)
            for index, inverse in enumerate(inverses):
                numer += rotate_volume(sums[index], inverse, interp=config.interp)
                denom += rotation_totals[index] * coverage[index]
            previous = volume
            volume = np.where(denom > 1e-12, numer / np.where(denom > 1e-12, denom, 1.0), 0.0)
        state = Recon3dState(
            volume=volume,
            log_likelihoods=np.asarray(trace),
            converged=converged,
        )
        if best is None or state.log_likelihoods[-1] > best.log_likelihoods[-1]:
            best = state
    return best


def _write_trace(path, trace):
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["iter", "log_lik", "delta"])
        for i, value in enumerate(trace):
            delta = 0.0 if i == 0 else value - trace[i - 1]
            writer.writerow([i, "%.17g" % value, "%.17g" % delta])


def _read_trace(path):
    values = []
    with open(path, newline="") as handle:
        for row in csv.DictReader(handle):
            values.append(float(row["log_lik"]))
    return np.asarray(values)


def save_gmm_state(state, directory, name="classes"):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_tensor(directory / f"{name}_means.sfn", state.means)
    _write_trace(directory / f"{name}_trace.csv", state.log_likelihoods)
    with open(directory / f"{name}_meta.csv", "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["key", "value"])
        writer.writerow(["converged", int(state.converged)])
        writer.writerow(["weights", ";".join("%.17g" % w for w in state.weights)])
        writer.writerow(["class_totals", ";".join("%.17g" % t for t in state.class_totals)])
    return directory / f"{name}_means.sfn"


def load_gmm_state(directory, name="classes"):
    directory = Path(directory)
    means = read_tensor(directory / f"{name}_means.sfn")
    trace = _read_trace(directory / f"{name}_trace.csv")
    meta = {}
    with open(directory / f"{name}_meta.csv", newline="") as handle:
        for row in csv.DictReader(handle):
            meta[row["key"]] = row["value"]
    weights = np.array([float(w) for w in meta["weights"].split(";")])
    totals = np.array([float(t) for t in meta["class_totals"].split(";")])
    return Gmm2dState(
        means=means,
        weights=weights,
        log_likelihoods=trace,
        class_totals=totals,
        converged=bool(int(meta["converged"])),
    )


def save_recon_state(state, directory, name="volume"):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_tensor(directory / f"{name}.sfn", state.volume)
    _write_trace(directory / f"{name}_trace.csv", state.log_likelihoods)
    with open(directory / f"{name}_meta.csv", "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["key", "value"])
        writer.writerow(["converged", int(state.converged)])
    return directory / f"{name}.sfn"


def load_recon_state(directory, name="volume"):
    directory = Path(directory)
    volume = read_tensor(directory / f"{name}.sfn")
    trace = _read_trace(directory / f"{name}_trace.csv")
    meta = {}
    with open(directory / f"{name}_meta.csv", newline="") as handle:
        for row in csv.DictReader(handle):
            meta[row["key"]] = row["value"]
    return Recon3dState(
        volume=volume,
        log_likelihoods=trace,
        converged=bool(int(meta["converged"])),
    )
