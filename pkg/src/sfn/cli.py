"""Command line driver.

Every subcommand is a thin wrapper over the library: either a full
configured experiment (``run``, ``oracle``, ``sweep``, ``halfmap``) or
one pipeline stage operating on artifact directories (``synth``,
``pick``, ``classify2d``, ``recon3d``, ``metrics``).  Domain errors map
onto stable exit codes; 0 means success.
"""

import argparse
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .config import ALGORITHMS, parse_config, parse_config_text
from .em import (
    Gmm2dConfig,
    Recon3dConfig,
    em_classify2d,
    em_reconstruct3d,
    load_gmm_state,
    save_gmm_state,
    save_recon_state,
)
from .errors import ConfigError, SfnError
from .experiments import phantom_volume, run_experiment, tile_field
from .metrics import best_rotation_pcc, fsc, fsc_resolution, match_classes, pcc
from .noisegen import NoiseSpec, SyntheticField, gaussian_field, plant_particles, write_truth
from .picker import PickSet, load_picks, pick_iid, pick_micrograph, pick_random, save_picks
from .preview import export_preview
from .rng import STREAM_FIELD
from .templates import load_templates, make_projection_templates, make_rotation_templates, save_templates
from .tensors import read_tensor, write_tensor


def _resolve_threads(args):
    if args.threads is not None:
        value = args.threads
    else:
        raw = os.environ.get("SFN_THREADS", "1")
        try:
            value = int(raw)
        except ValueError as exc:
            raise ConfigError(f"SFN_THREADS must be an integer, got {raw!r}") from exc
    if value < 1:
        raise ConfigError(f"thread count must be >= 1, got {value}")
    return value


def _out_dir(args):
    return Path(args.out if args.out is not None else "artifacts")


def _config_lines(pairs):
    lines = []
    for key, value in pairs:
        if value is not None:
            lines.append(f"{key} = {value}")
    return "\n".join(lines)


def _run_built_config(args, threads, pairs):
    pairs = [
        ("experiment.seed", args.seed if args.seed is not None else 0),
        ("experiment.out", str(_out_dir(args))),
    ] + pairs
    cfg = parse_config_text(_config_lines(pairs), origin="<cli>")
    result = run_experiment(cfg, threads=threads)
    print(f"wrote {result.out_dir}")
    for key, value in sorted(result.summary.items()):
        print(f"  {key} = {value}")
    return 0


def _cmd_run(args, threads):
    cfg = parse_config(args.config)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.out is not None:
        cfg = replace(cfg, out=args.out)
    result = run_experiment(cfg, threads=threads)
    print(f"wrote {result.out_dir}")
    for key, value in sorted(result.summary.items()):
        print(f"  {key} = {value}")
    return 0


def _cmd_oracle(args, threads):
    return _run_built_config(
        args,
        threads,
        [
            ("experiment.kind", "oracle-check"),
            ("noise.sigma", args.sigma),
            ("oracle.thresholds", args.thresholds),
        ],
    )


def _cmd_sweep(args, threads):
    return _run_built_config(
        args,
        threads,
        [
            ("experiment.kind", "threshold-sweep"),
            ("sweep.thresholds", args.thresholds),
            ("geometry.sample_target", args.samples),
            ("geometry.template_count", args.template_count),
            ("templates.source_side", args.source_side),
            ("noise.sigma", args.sigma),
            ("em.sigma", args.em_sigma),
            ("em.restarts", args.restarts),
        ],
    )


def _cmd_halfmap(args, threads):
    return _run_built_config(
        args,
        threads,
        [
            ("experiment.kind", "halfmap-fsc"),
            ("geometry.canvas", args.canvas),
            ("geometry.patch_side", args.patch_side),
            ("geometry.template_count", args.template_count),
            ("geometry.field_count", args.field_count),
            ("geometry.sample_target", args.samples),
            ("picker.threshold", args.threshold),
            ("noise.sigma", args.sigma),
            ("em.sigma", args.em_sigma),
            ("em.restarts", args.restarts),
            ("em.max_iters", args.max_iters),
        ],
    )


def _parse_canvas(text):
    dims = tuple(int(part) for part in text.lower().split("x"))
    if len(dims) not in (2, 3) or any(d < 1 for d in dims):
        raise ConfigError(f"canvas must be 2 or 3 positive sizes joined by 'x', got {text!r}")
    return dims


def _cmd_synth(args, threads):
    out_dir = _out_dir(args)
    fields_dir = out_dir / "fields"
    fields_dir.mkdir(parents=True, exist_ok=True)
    canvas = _parse_canvas(args.canvas)
    seed = args.seed if args.seed is not None else 0
    plant_stack = None
    if args.plants > 0:
        maker = make_rotation_templates if len(canvas) == 3 else make_projection_templates
        template_set = maker(phantom_volume(args.patch_side), args.template_count, seed=seed)
        save_templates(template_set, out_dir / "templates")
        plant_stack = np.asarray(template_set.templates)
    total = 0
    for index in range(args.count):
        spec = NoiseSpec(sigma=args.sigma, seed=seed, stream=STREAM_FIELD + index)
        if args.plants > 0:
            field = plant_particles(canvas, plant_stack, args.plants, spec, args.snr)
        else:
            field = SyntheticField(canvas=gaussian_field(canvas, spec), spec=spec)
        write_tensor(fields_dir / f"field_{index:04d}.sfn", field.canvas)
        write_truth(fields_dir / f"truth_{index:04d}.csv", field.truth, ndim=len(canvas))
        total += len(field.truth)
    print(f"wrote {args.count} fields ({total} planted) to {fields_dir}")
    return 0


def _cmd_pick(args, threads):
    template_set = load_templates(args.templates)
    paths = sorted(Path(args.fields).glob("field_*.sfn"))
    if not paths:
        raise ConfigError(f"no field_*.sfn files under {args.fields}")
    parts = []
    for index, path in enumerate(paths):
        canvas = read_tensor(path)
        source_id = path.stem
        if args.algorithm == "micrograph":
            parts.append(pick_micrograph(canvas, template_set, args.threshold, source_id=source_id))
        elif args.algorithm == "iid":
            tiles = tile_field(canvas, template_set.side)
            parts.append(pick_iid(tiles, template_set, args.threshold, source_id=source_id))
        else:
            seed = (args.seed if args.seed is not None else 0) + index
            parts.append(
                pick_random(canvas, template_set.side, args.count, seed=seed, source_id=source_id)
            )
    picks = PickSet.concat(parts)
    save_picks(picks, _out_dir(args) / "picks")
    print(f"picked {len(picks)} patches from {len(paths)} fields")
    return 0


def _cmd_classify2d(args, threads):
    picks = load_picks(args.picks, name=args.name)
    config = Gmm2dConfig(
        class_count=args.class_count,
        sigma=args.em_sigma,
        max_iters=args.max_iters,
        rel_tol=args.rel_tol,
        restarts=args.restarts,
        seed=args.seed if args.seed is not None else 0,
    )
    state = em_classify2d(picks, config)
    out_dir = _out_dir(args)
    save_gmm_state(state, out_dir / "classes")
    previews = out_dir / "previews"
    previews.mkdir(parents=True, exist_ok=True)
    for ell, mean in enumerate(state.means):
        export_preview(mean, previews / f"mean_{ell:02d}.pgm")
    if args.templates is not None:
        report = match_classes(state.means, load_templates(args.templates), threshold=args.threshold)
        (out_dir / "report.csv").write_text(report.to_csv_text())
        print(f"mean matched pcc = {report.mean_pcc:.6f}")
    print(f"classified {len(picks)} patches into {args.class_count} classes")
    return 0


def _cmd_recon3d(args, threads):
    picks = load_picks(args.picks, name=args.name)
    template_set = load_templates(args.templates)
    if template_set.grid is None:
        raise ConfigError("recon3d needs templates that carry a rotation grid")
    config = Recon3dConfig(
        grid=template_set.grid,
        sigma=args.em_sigma,
        max_iters=args.max_iters,
        rel_tol=args.rel_tol,
        restarts=args.restarts,
        seed=args.seed if args.seed is not None else 0,
    )
    state = em_reconstruct3d(picks, config)
    out_dir = _out_dir(args)
    save_recon_state(state, out_dir / "recon")
    previews = out_dir / "previews"
    previews.mkdir(parents=True, exist_ok=True)
    export_preview(state.volume, previews / "volume.pgm")
    if args.reference is not None:
        reference = read_tensor(args.reference)
        corr, _ = best_rotation_pcc(state.volume, reference, template_set.grid)
        print(f"best rotation pcc = {corr:.6f}")
    print(f"reconstructed from {len(picks)} patches")
    return 0


def _cmd_metrics(args, threads):
    out_dir = _out_dir(args)
    out_dir.mkdir(parents=True, exist_ok=True)
    if args.means is not None and args.templates is not None:
        state = load_gmm_state(args.means)
        report = match_classes(state.means, load_templates(args.templates), threshold=args.threshold)
        (out_dir / "report.csv").write_text(report.to_csv_text())
        print(f"mean matched pcc = {report.mean_pcc:.6f}")
        return 0
    if args.volume is not None and args.reference is not None:
        volume = read_tensor(args.volume)
        reference = read_tensor(args.reference)
        correlation = pcc(volume, reference)
        curve = fsc(volume, reference)
        rows = [
            (j, curve.radii[j], curve.correlations[j]) for j in range(len(curve.radii))
        ]
        with open(out_dir / "fsc.csv", "w", newline="") as fh:
            fh.write("shell,frequency,correlation\n")
            for shell, radius, corr in rows:
                fh.write(f"{shell},{radius:.17g},{corr:.17g}\n")
        print(f"pcc = {correlation:.6f}")
        print(f"fsc resolution = {fsc_resolution(curve):.6f} px")
        return 0
    raise ConfigError("metrics needs either --means and --templates, or --volume and --reference")


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="sfn",
        description="Synthetic template-picking experiments and their metrics.",
    )
    parser.add_argument("--seed", type=int, default=None, help="override the experiment seed")
    parser.add_argument(
        "--threads", type=int, default=None, help="worker processes (default: SFN_THREADS or 1)"
    )
    parser.add_argument("--out", default=None, help="artifact directory (default: artifacts)")
    commands = parser.add_subparsers(dest="command", required=True)

    cmd = commands.add_parser("run", help="run a configured experiment")
    cmd.add_argument("config", help="path to a section.key = value config file")
    cmd.set_defaults(handler=_cmd_run)

    cmd = commands.add_parser("oracle", help="tabulate truncated-Gaussian moments")
    cmd.add_argument("--sigma", type=float, default=None)
    cmd.add_argument("--thresholds", default=None, help="comma-separated thresholds")
    cmd.set_defaults(handler=_cmd_oracle)

    cmd = commands.add_parser("sweep", help="threshold sweep of class-mean bias")
    cmd.add_argument("--thresholds", default=None, help="comma-separated thresholds")
    cmd.add_argument("--samples", type=int, default=None)
    cmd.add_argument("--template-count", type=int, default=None)
    cmd.add_argument("--source-side", type=int, default=None)
    cmd.add_argument("--sigma", type=float, default=None)
    cmd.add_argument("--em-sigma", type=float, default=None)
    cmd.add_argument("--restarts", type=int, default=None)
    cmd.set_defaults(handler=_cmd_sweep)

    cmd = commands.add_parser("halfmap", help="half-map FSC, template vs random picking")
    cmd.add_argument("--canvas", default=None, help="e.g. 64x64x64")
    cmd.add_argument("--patch-side", type=int, default=None)
    cmd.add_argument("--template-count", type=int, default=None)
    cmd.add_argument("--field-count", type=int, default=None)
    cmd.add_argument("--samples", type=int, default=None)
    cmd.add_argument("--threshold", type=float, default=None)
    cmd.add_argument("--sigma", type=float, default=None)
    cmd.add_argument("--em-sigma", type=float, default=None)
    cmd.add_argument("--restarts", type=int, default=None)
    cmd.add_argument("--max-iters", type=int, default=None)
    cmd.set_defaults(handler=_cmd_halfmap)

    cmd = commands.add_parser("synth", help="write synthetic noise fields")
    cmd.add_argument("--canvas", default="256x256")
    cmd.add_argument("--count", type=int, default=4)
    cmd.add_argument("--sigma", type=float, default=1.0)
    cmd.add_argument("--snr", type=float, default=0.0)
    cmd.add_argument("--plants", type=int, default=0)
    cmd.add_argument("--patch-side", type=int, default=16)
    cmd.add_argument("--template-count", type=int, default=5)
    cmd.set_defaults(handler=_cmd_synth)

    cmd = commands.add_parser("pick", help="pick particles from saved fields")
    cmd.add_argument("--fields", required=True, help="directory of field_*.sfn")
    cmd.add_argument("--templates", required=True, help="saved template directory")
    cmd.add_argument("--threshold", type=float, default=5.0)
    cmd.add_argument("--algorithm", choices=ALGORITHMS, default="micrograph")
    cmd.add_argument("--count", type=int, default=100, help="random picks per field")
    cmd.set_defaults(handler=_cmd_pick)

    cmd = commands.add_parser("classify2d", help="fit a Gaussian mixture to picks")
    cmd.add_argument("--picks", required=True, help="directory holding saved picks")
    cmd.add_argument("--name", default="picks")
    cmd.add_argument("--class-count", type=int, required=True)
    cmd.add_argument("--em-sigma", type=float, default=1.0)
    cmd.add_argument("--max-iters", type=int, default=200)
    cmd.add_argument("--rel-tol", type=float, default=1e-8)
    cmd.add_argument("--restarts", type=int, default=3)
    cmd.add_argument("--templates", default=None, help="optional: write a bias report")
    cmd.add_argument("--threshold", type=float, default=1.0)
    cmd.set_defaults(handler=_cmd_classify2d)

    cmd = commands.add_parser("recon3d", help="reconstruct a volume from picks")
    cmd.add_argument("--picks", required=True)
    cmd.add_argument("--name", default="picks")
    cmd.add_argument("--templates", required=True, help="grid source")
    cmd.add_argument("--em-sigma", type=float, default=1.0)
    cmd.add_argument("--max-iters", type=int, default=200)
    cmd.add_argument("--rel-tol", type=float, default=1e-8)
    cmd.add_argument("--restarts", type=int, default=1)
    cmd.add_argument("--reference", default=None, help="optional truth volume tensor")
    cmd.set_defaults(handler=_cmd_recon3d)

    cmd = commands.add_parser("metrics", help="bias report or volume comparison")
    cmd.add_argument("--means", default=None, help="classes directory")
    cmd.add_argument("--templates", default=None)
    cmd.add_argument("--threshold", type=float, default=1.0)
    cmd.add_argument("--volume", default=None)
    cmd.add_argument("--reference", default=None)
    cmd.set_defaults(handler=_cmd_metrics)

    return parser


def main(argv=None):
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        threads = _resolve_threads(args)
        return args.handler(args, threads)
    except SfnError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
