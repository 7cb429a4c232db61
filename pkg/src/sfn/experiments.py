"""End-to-end experiment pipelines with deterministic artifacts.

Each experiment kind composes the synthesis, picking, fitting, and
metric modules into one reproducible run: same config, same bytes.
Independent fields are scheduled across worker processes and always
reassembled in index order, so the thread count never changes results.
"""

import csv
import hashlib
import math
from concurrent.futures import ProcessPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import resolved_items
from .em import (
    Gmm2dConfig,
    Recon3dConfig,
    em_classify2d,
    em_reconstruct3d,
    save_gmm_state,
    save_recon_state,
)
from .errors import ConfigError, SfnError
from .metrics import (
    best_rotation_pcc,
    complexity_probe,
    fsc,
    fsc_resolution,
    match_classes,
    mean_fsc_below,
)
from .noisegen import NoiseSpec, SyntheticField, gaussian_field, plant_particles, write_truth
from .picker import PickSet, pick_iid, pick_micrograph, pick_random, save_picks
from .preview import export_preview
from .rng import STREAM_FIELD, STREAM_SPLIT, generator
from .templates import (
    lowpass,
    make_projection_templates,
    make_rotation_templates,
    save_templates,
)
from .tensors import RotationGrid, write_tensor
from .truncgauss import (
    TruncMixture,
    TruncSpec,
    effective_variance,
    normalizer,
    sample_mixture,
    trunc_mean,
    trunc_var,
)

MANIFEST_NAME = "manifest.csv"

# Nyquist is 0.5 cycles per pixel; "below half-Nyquist" means <= 0.25.
HALF_NYQUIST = 0.25

_PHANTOM_BLOBS = (
    ((0.38, 0.42, 0.50), 0.16, 1.00),
    ((0.60, 0.58, 0.44), 0.11, 0.75),
    ((0.50, 0.62, 0.64), 0.08, 0.55),
)

_DECOY_BLOBS = (
    ((0.25, 0.25, 0.70), 0.07, 1.00),
    ((0.75, 0.30, 0.30), 0.07, 0.90),
    ((0.30, 0.75, 0.35), 0.07, 0.80),
    ((0.70, 0.70, 0.65), 0.07, 0.70),
)


def _blob_sum(side, blobs):
    axes = np.arange(side, dtype=np.float64)
    zz, yy, xx = np.meshgrid(axes, axes, axes, indexing="ij")
    volume = np.zeros((side, side, side))
    for center, width, weight in blobs:
        cz, cy, cx = (c * (side - 1) for c in center)
        radius_sq = (zz - cz) ** 2 + (yy - cy) ** 2 + (xx - cx) ** 2
        volume += weight * np.exp(-radius_sq / (2.0 * (width * side) ** 2))
    return volume


def phantom_volume(side):
    """Deterministic asymmetric three-blob structure, the default truth."""
    return _blob_sum(side, _PHANTOM_BLOBS)


def decoy_volume(side):
    """A clearly different four-blob structure for mismatched templates."""
    return _blob_sum(side, _DECOY_BLOBS)


def split_halves(fields, seed):
    """Deterministic disjoint halves: seeded shuffle, then index parity."""
    items = list(fields)
    if len(items) < 2:
        raise ConfigError(f"need at least 2 fields to split, got {len(items)}")
    order = generator(seed, STREAM_SPLIT).permutation(len(items))
    half_a = [items[i] for i in order[0::2]]
    half_b = [items[i] for i in order[1::2]]
    return half_a, half_b


def git_blob_hash(data):
    """SHA-1 of the git blob header plus content, as ``git hash-object``."""
    digest = hashlib.sha1()
    digest.update(b"blob %d\x00" % len(data))
    digest.update(data)
    return digest.hexdigest()


@contextmanager
def _stage(name):
    """Prefix any domain error with the pipeline stage that raised it."""
    try:
        yield
    except SfnError as exc:
        exc.args = (f"[stage {name}] {exc}",)
        raise


@dataclass(frozen=True)
class ExperimentResult:
    kind: str
    out_dir: str
    summary: dict
    manifest: str


def _format_cell(value):
    if isinstance(value, float):
        return f"{value:.17g}"
    return str(value)


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([_format_cell(cell) for cell in row])
    return path


def _write_summary(path, summary):
    _write_csv(path, ["key", "value"], sorted(summary.items()))


def _write_manifest(out_dir, cfg):
    entries = [("config", key, value) for key, value in resolved_items(cfg)]
    files = sorted(
        p for p in Path(out_dir).rglob("*") if p.is_file() and p.name != MANIFEST_NAME
    )
    for path in files:
        relative = path.relative_to(out_dir).as_posix()
        entries.append(("file", relative, git_blob_hash(path.read_bytes())))
    return _write_csv(Path(out_dir) / MANIFEST_NAME, ["entry", "key", "value"], entries)


def _build_templates(cfg, three_d):
    """Truth structure, its template set, and the picking template set.

    The picking set equals the truth set for the matched variant; the
    mismatched variant reuses the same rotation grid on a different
    structure, so only the assumed shape is wrong, not the grid.
    """
    side = cfg.patch_side if three_d else cfg.source_side
    maker = make_rotation_templates if three_d else make_projection_templates
    source = phantom_volume(side)
    truth_set = maker(source, cfg.template_count, seed=cfg.seed)
    if cfg.template_variant == "matched":
        pick_set = truth_set
    else:
        pick_set = maker(decoy_volume(side), cfg.template_count, seed=cfg.seed)
    if cfg.lowpass < 1.0:
        pick_set = lowpass(pick_set, cfg.lowpass)
    return source, truth_set, pick_set


def tile_field(canvas, side):
    """Disjoint side-aligned tiles; the trailing remainder is dropped."""
    steps = [dim // side for dim in canvas.shape]
    trimmed = canvas[tuple(slice(0, n * side) for n in steps)]
    if canvas.ndim == 2:
        a, b = steps
        tiles = trimmed.reshape(a, side, b, side).transpose(0, 2, 1, 3)
        return tiles.reshape(a * b, side, side)
    a, b, c = steps
    tiles = trimmed.reshape(a, side, b, side, c, side).transpose(0, 2, 4, 1, 3, 5)
    return tiles.reshape(a * b * c, side, side, side)


def _field_task(task):
    """Synthesize one field and pick it; runs in a worker process."""
    index, cfg, templates, plant_stack, per_field, want_random = task
    spec = NoiseSpec(sigma=cfg.sigma, seed=cfg.seed, stream=STREAM_FIELD + index)
    if cfg.plant_count > 0:
        field = plant_particles(cfg.canvas, plant_stack, cfg.plant_count, spec, cfg.snr)
    else:
        field = SyntheticField(canvas=gaussian_field(cfg.canvas, spec), spec=spec)
    source_id = f"field_{index:04d}"
    if cfg.algorithm == "micrograph":
        picks = pick_micrograph(field.canvas, templates, cfg.threshold, source_id=source_id)
    elif cfg.algorithm == "iid":
        tiles = tile_field(field.canvas, templates.side)
        picks = pick_iid(tiles, templates, cfg.threshold, source_id=source_id)
    else:
        picks = pick_random(
            field.canvas, templates.side, per_field, seed=cfg.seed + index, source_id=source_id
        )
    random_picks = None
    if want_random:
        random_picks = pick_random(
            field.canvas,
            templates.side,
            max(len(picks), 1),
            seed=cfg.seed + index,
            source_id=source_id,
        )
    return picks, random_picks, field.truth


def _run_field_tasks(cfg, templates, plant_stack, threads, want_random=False):
    per_field = math.ceil(cfg.sample_target / cfg.field_count)
    tasks = [
        (index, cfg, templates, plant_stack, per_field, want_random)
        for index in range(cfg.field_count)
    ]
    if threads <= 1:
        return [_field_task(task) for task in tasks]
    with ProcessPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(_field_task, tasks, chunksize=1))


def _write_truth_tables(out_dir, results, ndim):
    total = 0
    for index, (_, _, truth) in enumerate(results):
        write_truth(Path(out_dir) / f"truth_{index:04d}.csv", truth, ndim=ndim)
        total += len(truth)
    return total


def _capped_concat(parts, target):
    picks = PickSet.concat(parts)
    if len(picks) > target:
        picks = picks.subset(np.arange(target))
    return picks


def _gmm_config(cfg):
    return Gmm2dConfig(
        class_count=cfg.template_count,
        sigma=cfg.em_sigma,
        max_iters=cfg.em_max_iters,
        rel_tol=cfg.em_rel_tol,
        restarts=cfg.em_restarts,
        seed=cfg.seed,
    )


def _recon_config(cfg, grid):
    return Recon3dConfig(
        grid=grid,
        sigma=cfg.em_sigma,
        max_iters=cfg.em_max_iters,
        rel_tol=cfg.em_rel_tol,
        restarts=cfg.em_restarts,
        seed=cfg.seed,
    )


def _probe_grid(grid):
    """The template grid extended with the identity gauge element."""
    identity = np.array([[1.0, 0.0, 0.0, 0.0]])
    return RotationGrid(np.concatenate([identity, grid.quaternions]), seed=grid.seed)


def _require_canvas(cfg, rank):
    if len(cfg.canvas) != rank:
        raise ConfigError(
            f"{cfg.kind} needs a {rank}D canvas, got {'x'.join(map(str, cfg.canvas))}"
        )
    side = cfg.patch_side if rank == 3 else cfg.source_side
    if side > min(cfg.canvas):
        raise ConfigError(f"patch side {side} exceeds canvas {cfg.canvas}")


def _run_oracle_check(cfg, out_dir, threads):
    rows = []
    for threshold in cfg.oracle_thresholds:
        spec = TruncSpec(cfg.sigma, threshold)
        asymptotic = "" if threshold == 0.0 else f"{effective_variance(spec):.17g}"
        rows.append(
            (
                cfg.sigma,
                threshold,
                trunc_mean(spec),
                trunc_var(spec),
                asymptotic,
                normalizer(spec),
            )
        )
    _write_csv(
        Path(out_dir) / "oracle.csv",
        ["sigma", "threshold", "trunc_mean", "trunc_var", "effective_variance", "normalizer"],
        rows,
    )
    return {"rows": len(rows)}


def _classify_pipeline(cfg, out_dir, threads, planted):
    out_dir = Path(out_dir)
    with _stage("templates"):
        _require_canvas(cfg, 2)
        _, truth_set, pick_set = _build_templates(cfg, three_d=False)
        save_templates(pick_set, out_dir / "templates")
        plant_stack = np.asarray(truth_set.templates) if planted else None
    with _stage("pick"):
        results = _run_field_tasks(cfg, pick_set, plant_stack, threads)
        picks = _capped_concat([r[0] for r in results], cfg.sample_target)
        save_picks(picks, out_dir / "picks")
        plant_total = _write_truth_tables(out_dir, results, ndim=2) if planted else 0
    with _stage("classify"):
        state = em_classify2d(picks, _gmm_config(cfg))
        save_gmm_state(state, out_dir / "classes")
    with _stage("report"):
        report = match_classes(state.means, truth_set, threshold=cfg.threshold)
        (out_dir / "report.csv").write_text(report.to_csv_text())
        previews = out_dir / "previews"
        previews.mkdir(exist_ok=True)
        for ell, mean in enumerate(state.means):
            export_preview(mean, previews / f"mean_{ell:02d}.pgm")
    summary = {
        "sample_count": len(picks),
        "mean_pcc": report.mean_pcc,
        "mean_scaled_error": float(np.mean(np.sqrt(report.scaled_errors)) / cfg.threshold),
        "min_alpha": float(report.alphas.min()),
    }
    if planted:
        summary["plant_total"] = plant_total
    return summary


def _recon_pipeline(cfg, out_dir, threads, planted):
    out_dir = Path(out_dir)
    with _stage("templates"):
        _require_canvas(cfg, 3)
        source, truth_set, pick_set = _build_templates(cfg, three_d=True)
        save_templates(pick_set, out_dir / "templates")
        write_tensor(out_dir / "truth_volume.sfn", source)
        plant_stack = np.asarray(truth_set.templates) if planted else None
    with _stage("pick"):
        results = _run_field_tasks(cfg, pick_set, plant_stack, threads)
        per_field = [r[0] for r in results]
        if planted:
            _write_truth_tables(out_dir, results, ndim=3)
        half_a, half_b = split_halves(range(cfg.field_count), seed=cfg.seed)
        target = cfg.sample_target // 2
        picks_a = _capped_concat([per_field[i] for i in half_a], target)
        picks_b = _capped_concat([per_field[i] for i in half_b], target)
        save_picks(picks_a, out_dir, name="picks_a")
        save_picks(picks_b, out_dir, name="picks_b")
    with _stage("reconstruct"):
        recon_cfg = _recon_config(cfg, pick_set.grid)
        state_a = em_reconstruct3d(picks_a, recon_cfg)
        state_b = em_reconstruct3d(picks_b, recon_cfg)
        save_recon_state(state_a, out_dir / "recon_a")
        save_recon_state(state_b, out_dir / "recon_b")
        combined = 0.5 * (state_a.volume + state_b.volume)
        write_tensor(out_dir / "volume.sfn", combined)
    with _stage("report"):
        corr, _ = best_rotation_pcc(combined, source, _probe_grid(pick_set.grid))
        curve = fsc(state_a.volume, state_b.volume)
        resolution = fsc_resolution(curve)
        mean_low = mean_fsc_below(curve, HALF_NYQUIST)
        _write_csv(
            out_dir / "fsc.csv",
            ["shell", "frequency", "correlation"],
            [(j, curve.radii[j], curve.correlations[j]) for j in range(len(curve.radii))],
        )
        previews = out_dir / "previews"
        previews.mkdir(exist_ok=True)
        export_preview(combined, previews / "volume.pgm")
    return {
        "sample_count": len(picks_a) + len(picks_b),
        "best_pcc": float(corr),
        "fsc_resolution": float(resolution),
        "mean_fsc": float(mean_low),
    }


def _run_threshold_sweep(cfg, out_dir, threads):
    with _stage("templates"):
        _, truth_set, pick_set = _build_templates(cfg, three_d=False)
        save_templates(pick_set, Path(out_dir) / "templates")
    rows = []
    for index, threshold in enumerate(cfg.sweep_thresholds):
        with _stage(f"sweep T={threshold:g}"):
            mixture = TruncMixture(TruncSpec(cfg.sigma, threshold), pick_set)
            samples, _ = sample_mixture(mixture, cfg.sample_target, seed=cfg.seed + index)
            state = em_classify2d(samples, _gmm_config(cfg))
            report = match_classes(state.means, truth_set, threshold=threshold)
            rows.append(
                (
                    threshold,
                    report.mean_pcc,
                    float(np.mean(np.sqrt(report.scaled_errors)) / threshold),
                    float(report.alphas.min()),
                )
            )
    _write_csv(
        Path(out_dir) / "sweep.csv",
        ["threshold", "mean_pcc", "mean_scaled_error", "min_alpha"],
        rows,
    )
    gains = [rows[j + 1][1] - rows[j][1] for j in range(len(rows) - 1)]
    return {
        "pcc_first": rows[0][1],
        "pcc_last": rows[-1][1],
        "pcc_gain": rows[-1][1] - rows[0][1],
        "non_decreasing": int(all(g >= 0.0 for g in gains)),
    }


def _run_halfmap_fsc(cfg, out_dir, threads):
    out_dir = Path(out_dir)
    with _stage("templates"):
        _require_canvas(cfg, 3)
        _, _, pick_set = _build_templates(cfg, three_d=True)
        save_templates(pick_set, out_dir / "templates")
    with _stage("pick"):
        if cfg.field_count < 2:
            raise ConfigError("halfmap-fsc needs at least 2 fields")
        results = _run_field_tasks(cfg, pick_set, None, threads, want_random=True)
        half_a, half_b = split_halves(range(cfg.field_count), seed=cfg.seed)
        target = cfg.sample_target // 2
        pickers = {
            "template": [r[0] for r in results],
            "random": [r[1] for r in results],
        }
        halves = {
            key: (
                _capped_concat([parts[i] for i in half_a], target),
                _capped_concat([parts[i] for i in half_b], target),
            )
            for key, parts in pickers.items()
        }
        for key, (picks_a, picks_b) in halves.items():
            save_picks(picks_a, out_dir, name=f"picks_{key}_a")
            save_picks(picks_b, out_dir, name=f"picks_{key}_b")
    curves = {}
    summary = {}
    previews = out_dir / "previews"
    previews.mkdir(exist_ok=True)
    with _stage("reconstruct"):
        recon_cfg = _recon_config(cfg, pick_set.grid)
        for key, (picks_a, picks_b) in halves.items():
            state_a = em_reconstruct3d(picks_a, recon_cfg)
            state_b = em_reconstruct3d(picks_b, recon_cfg)
            save_recon_state(state_a, out_dir / f"recon_{key}_a")
            save_recon_state(state_b, out_dir / f"recon_{key}_b")
            curves[key] = fsc(state_a.volume, state_b.volume)
            summary[f"{key}_mean_fsc"] = mean_fsc_below(curves[key], HALF_NYQUIST)
            summary[f"{key}_resolution"] = fsc_resolution(curves[key])
            summary[f"{key}_count"] = len(picks_a) + len(picks_b)
            export_preview(state_a.volume, previews / f"{key}_half_a.pgm")
    with _stage("report"):
        template_curve = curves["template"]
        random_curve = curves["random"]
        _write_csv(
            out_dir / "fsc.csv",
            ["shell", "frequency", "template", "random"],
            [
                (
                    j,
                    template_curve.radii[j],
                    template_curve.correlations[j],
                    random_curve.correlations[j],
                )
                for j in range(len(template_curve.radii))
            ],
        )
    return summary


def _run_complexity_scan(cfg, out_dir, threads):
    rows = []

    def scan_point(side, samples, seed_offset):
        templates = make_projection_templates(
            phantom_volume(side), cfg.template_count, seed=cfg.seed
        )
        spec = TruncSpec(cfg.sigma, cfg.threshold)
        mixture = TruncMixture(spec, templates)
        draws, _ = sample_mixture(mixture, samples, seed=cfg.seed + seed_offset)
        state = em_classify2d(draws, _gmm_config(cfg))
        report = match_classes(state.means, templates, threshold=trunc_mean(spec))
        return (samples, side * side, float(report.scaled_errors.mean()))

    for index, samples in enumerate(cfg.scan_samples):
        with _stage(f"scan M={samples}"):
            rows.append(scan_point(cfg.patch_side, samples, index))
    for index, side in enumerate(cfg.scan_sides):
        with _stage(f"scan d={side}^2"):
            rows.append(scan_point(side, cfg.sample_target, 100 + index))
    _write_csv(Path(out_dir) / "scan.csv", ["samples", "dimension", "mse"], rows)
    with _stage("fit"):
        fit = complexity_probe(rows)
    _write_csv(
        Path(out_dir) / "slopes.csv",
        ["slope_samples", "slope_dimension", "fixed_dimension", "fixed_samples"],
        [(fit.slope_samples, fit.slope_dimension, fit.fixed_dimension, fit.fixed_samples)],
    )
    return {
        "slope_samples": fit.slope_samples,
        "slope_dimension": fit.slope_dimension,
    }


_HANDLERS = {
    "oracle-check": _run_oracle_check,
    "pure-noise-2d": lambda cfg, out, threads: _classify_pipeline(cfg, out, threads, False),
    "planted-2d": lambda cfg, out, threads: _classify_pipeline(cfg, out, threads, True),
    "pure-noise-3d": lambda cfg, out, threads: _recon_pipeline(cfg, out, threads, False),
    "planted-3d": lambda cfg, out, threads: _recon_pipeline(cfg, out, threads, True),
    "threshold-sweep": _run_threshold_sweep,
    "halfmap-fsc": _run_halfmap_fsc,
    "complexity-scan": _run_complexity_scan,
}


def run_experiment(cfg, threads=1):
    """Run one configured experiment and write its artifact directory."""
    with _stage("configure"):
        if cfg.kind not in _HANDLERS:
            raise ConfigError(f"unknown experiment kind {cfg.kind!r}")
        if cfg.plant_count > 0 and cfg.snr <= 0.0:
            raise ConfigError("planting requires a positive noise.snr")
        out_dir = Path(cfg.out)
        out_dir.mkdir(parents=True, exist_ok=True)
    summary = _HANDLERS[cfg.kind](cfg, out_dir, max(1, int(threads)))
    _write_summary(out_dir / "summary.csv", summary)
    manifest = _write_manifest(out_dir, cfg)
    return ExperimentResult(
        kind=cfg.kind, out_dir=str(out_dir), summary=summary, manifest=str(manifest)
    )
