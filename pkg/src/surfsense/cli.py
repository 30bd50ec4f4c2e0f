"""Command-line entry point: ``surfsense {gen-scene,train,extract,eval,render}``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical abort.
Results meant for scripts go to stdout; diagnostics go to stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, TrainConfig, desk_config, from_dict, merge, to_dict
from .dataio import DatasetError, load_dataset, read_ply, write_pfm, write_ply, write_png
from .evaluation import TriangleMesh, bbox_diagonal, evaluate_meshes, extract_mesh
from .fields import CheckpointError
from .losses import NumericalAbort
from .report import distance_histogram, loss_curve
from .scenes import PRESETS, generate_dataset, preset, scene_from_dict
from .training import Trainer, load_model, read_log, render_view

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("surfsense")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


class _HelpFormatter(argparse.ArgumentDefaultsHelpFormatter):
    # only show meaningful defaults; flags left unset inherit from the config
    def _get_help_string(self, action):
        if action.default in (None, False, argparse.SUPPRESS) or "default" in (action.help or ""):
            return action.help
        return super()._get_help_string(action)


def _fmt_help():
    return _HelpFormatter


# ----------------------------------------------------------------------------
# gen-scene


def cmd_gen_scene(args) -> int:
    if (args.preset is None) == (args.spec is None):
        raise UsageError("give exactly one of --preset or --spec")
    if args.preset is not None:
        if args.preset not in PRESETS:
            raise UsageError(f"unknown preset {args.preset!r}; choose from {', '.join(PRESETS)}")
        spec = preset(args.preset, args.views, args.width, args.height, args.seed)
    else:
        try:
            data = json.loads(Path(args.spec).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise DatasetError(f"cannot read scene spec {args.spec}: {exc}") from exc
        try:
            spec = scene_from_dict(data)
        except ValueError as exc:
            raise DatasetError(f"invalid scene spec: {exc}") from exc
    report = generate_dataset(spec, args.out, mesh_resolution=args.mesh_res)
    print(json.dumps({"out": str(args.out), **{k: v for k, v in report.items() if k != "coverage"},
                      "coverage": {str(k): v for k, v in report["coverage"].items()}}))
    return EXIT_OK


# ----------------------------------------------------------------------------
# train


def build_train_config(args) -> TrainConfig:
    """Defaults (full or desk profile) < ``--config`` file < explicit flags."""
    base = to_dict(desk_config() if args.desk else TrainConfig())
    if args.config is not None:
        try:
            data = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError("config file must hold a JSON object")
        base = merge(base, data)
    flags = {}
    for key in ("epochs", "seed", "threads", "iters_per_epoch", "batch_rays", "chunk_rays", "lr",
                "n_coarse", "n_fine", "checkpoint_every", "init_radius"):
        val = getattr(args, key)
        if val is not None:
            flags[key] = val
    if args.no_wj:
        flags["use_wj"] = False
    if args.no_eta:
        flags["use_eta"] = False
    if args.pixel_ncc:
        flags["pixel_ncc"] = True
    if args.depth_alignment:
        flags["depth_alignment"] = True
    if args.dump_patches:
        flags["dump_patches"] = True
    patch = {}
    if args.no_pull:
        patch["pull"] = False
    if args.patch_J is not None:
        patch["J"] = args.patch_J
    if args.tau_mult is not None:
        patch["tau_mult"] = args.tau_mult
    if args.anchor_source is not None:
        patch["anchor_source"] = args.anchor_source
    if patch:
        flags["patch"] = patch
    weights = {}
    if args.surface_weight_mult is not None:
        weights["surface_mult"] = args.surface_weight_mult
    for i in range(1, 7):
        val = getattr(args, f"lambda{i}")
        if val is not None:
            weights[f"lambda{i}"] = val
    if weights:
        flags["weights"] = weights
    return from_dict(TrainConfig, merge(base, flags))


def cmd_train(args) -> int:
    cfg = build_train_config(args)
    ds = load_dataset(args.dataset)
    out = Path(args.out)
    trainer = Trainer(ds, cfg, out)

    def progress(row):
        if args.quiet:
            return
        if row["step"] % max(1, trainer.iters_per_epoch * args.log_every) == 0:
            print(f"step {row['step']:6d} epoch {row['epoch']:7.2f} loss {row['loss']:.5f} "
                  f"rgb {row['rgb']:.4f} beta {row['beta']:.4f}", file=sys.stderr)

    result = trainer.run(progress)
    if result.log_path is not None:
        loss_curve(read_log(result.log_path), result.log_path.with_name("loss_curve.png"))
    summary = {"steps": result.steps, "final_loss": result.final_loss,
               "checkpoint": str(result.checkpoint) if result.checkpoint else None,
               "log": str(result.log_path) if result.log_path else None, "aborted": result.aborted}
    if result.aborted:
        summary["message"] = result.message
        print(json.dumps(summary))
        print(f"numerical abort: {result.message}; last good parameters in {result.checkpoint}",
              file=sys.stderr)
        return EXIT_NUMERIC
    print(json.dumps(summary))
    return EXIT_OK


# ----------------------------------------------------------------------------
# extract / eval / render


def cmd_extract(args) -> int:
    model, store, meta = load_model(args.checkpoint)
    lo, hi = np.asarray(meta["bbox"], dtype=np.float64)
    pad = args.pad * (hi - lo)
    mesh = extract_mesh(model.field(store).distance, (lo - pad, hi + pad), args.resolution)
    if mesh.empty:
        print("extraction produced no surface", file=sys.stderr)
        return EXIT_DATA
    write_ply(args.out, mesh.vertices, mesh.faces, mesh.normals)
    print(json.dumps({"out": str(args.out), "vertices": len(mesh.vertices), "faces": len(mesh.faces),
                      "watertight": mesh.is_watertight(), "area": mesh.area()}))
    return EXIT_OK


def _read_mesh(path) -> TriangleMesh:
    v, f, n = read_ply(path)
    if f is None or len(f) == 0:
        raise DatasetError(f"{path}: PLY has no faces")
    return TriangleMesh(v, f, n)


def cmd_eval(args) -> int:
    pred = _read_mesh(args.pred)
    gt = _read_mesh(args.gt)
    if args.threshold is not None:
        threshold = args.threshold
    elif args.scene is not None:
        lo, hi = load_dataset(args.scene).bbox
        threshold = args.threshold_frac * float(np.linalg.norm(hi - lo))
    else:
        threshold = args.threshold_frac * bbox_diagonal(gt.vertices)
    crop = None
    if args.crop is not None:
        crop = (np.asarray(args.crop[:3]), np.asarray(args.crop[3:]))
    report, d_pg, d_gp = evaluate_meshes(pred, gt, threshold, args.points, args.seed, crop,
                                         return_distances=True)
    prefix = Path(args.out)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    prefix.with_suffix(".json").write_text(report.to_json())
    prefix.with_suffix(".csv").write_text(report.csv_header() + "\n" + report.csv_row() + "\n")
    distance_histogram(d_pg, d_gp, threshold, prefix.with_name(prefix.name + "_hist.png"))
    print(report.csv_row())
    return EXIT_OK if report.valid else EXIT_DATA


def cmd_render(args) -> int:
    model, store, meta = load_model(args.checkpoint)
    ds = load_dataset(args.dataset)
    if not 0 <= args.view < len(ds.views):
        raise UsageError(f"view index {args.view} out of range (0..{len(ds.views) - 1})")
    view = ds.views[args.view]
    out = render_view(model, store, view.camera, float(meta["bound_radius"]), args.n_coarse, args.n_fine,
                      seed=args.seed)
    prefix = Path(args.out)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    write_png(prefix.with_name(prefix.name + "_rgb.png"), out["rgb"])
    write_pfm(prefix.with_name(prefix.name + "_depth.pfm"), out["depth"])
    write_pfm(prefix.with_name(prefix.name + "_normal.pfm"), out["normal"])
    l1 = float(np.mean(np.sum(np.abs(np.clip(out["rgb"], 0, 1) - view.rgb), axis=-1)))
    print(json.dumps({"view": args.view, "rgb_l1": l1, "out": str(prefix)}))
    return EXIT_OK


# ----------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="surfsense", description="Neural SDF reconstruction from posed RGB-D-N views.",
                formatter_class=_fmt_help())
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging on stderr")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    g = sub.add_parser("gen-scene", help="render a synthetic dataset", formatter_class=_fmt_help())
    g.add_argument("--preset", help=f"one of {', '.join(PRESETS)}")
    g.add_argument("--spec", help="JSON scene spec file (alternative to --preset)")
    g.add_argument("-o", "--out", required=True, help="output dataset directory")
    g.add_argument("--views", type=int, default=24)
    g.add_argument("--width", type=int, default=96)
    g.add_argument("--height", type=int, default=96)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--mesh-res", type=int, default=128, help="marching-cubes resolution of gt_mesh.ply")
    g.set_defaults(func=cmd_gen_scene)

    d = TrainConfig()
    t = sub.add_parser("train", help="optimise a model on a dataset", formatter_class=_fmt_help())
    t.add_argument("dataset", help="dataset directory")
    t.add_argument("-o", "--out", required=True, help="run directory")
    t.add_argument("--config", help="JSON config; flags given here override it")
    t.add_argument("--desk", action="store_true",
                   help="reduced profile for small synthetic scenes on a CPU (see README)")
    run = t.add_argument_group("run (unset flags fall back to the config, then the defaults shown)")
    run.add_argument("--epochs", type=int, help=f"default {d.epochs}")
    run.add_argument("--seed", type=int, help=f"default {d.seed}")
    run.add_argument("--threads", type=int, help="default: available cores")
    run.add_argument("--iters-per-epoch", type=int, help="default: number of views")
    run.add_argument("--batch-rays", type=int, help=f"default {d.batch_rays}")
    run.add_argument("--chunk-rays", type=int, help=f"default {d.chunk_rays}")
    run.add_argument("--lr", type=float, help=f"default {d.lr}")
    run.add_argument("--n-coarse", type=int, help=f"default {d.n_coarse}")
    run.add_argument("--n-fine", type=int, help=f"default {d.n_fine}")
    run.add_argument("--checkpoint-every", type=int, help=f"epochs; default {d.checkpoint_every}")
    run.add_argument("--init-radius", type=float, help="default: from the dataset")
    w = d.weights
    lw = t.add_argument_group("loss weights")
    lw.add_argument("--lambda1", type=float, help=f"depth, default {w.lambda1}")
    lw.add_argument("--lambda2", type=float, help=f"normal, default {w.lambda2}")
    lw.add_argument("--lambda3", type=float, help=f"eikonal, default {w.lambda3}")
    lw.add_argument("--lambda4", type=float, help=f"depth consistency, default {w.lambda4}")
    lw.add_argument("--lambda5", type=float,
                    help=f"photometric, default {w.lambda5} after a {w.ncc_delay_epochs:g}-epoch delay")
    lw.add_argument("--lambda6", type=float, help=f"surface fitting, default {w.lambda6}")
    lw.add_argument("--surface-weight-mult", type=float,
                    help="scale lambda4-6 together (e.g. 10 or 0.1); default 1")
    ab = t.add_argument_group("surface sensing and ablations")
    ab.add_argument("--patch-J", type=int, help=f"points per patch, default {d.patch.J}")
    ab.add_argument("--tau-mult", type=float, help="multiplier on the sampling variance, default 1")
    ab.add_argument("--anchor-source", choices=("depth", "intersection"), help="default depth")
    ab.add_argument("--no-pull", action="store_true", help="use raw Gaussian samples (no pulling)")
    ab.add_argument("--no-wj", action="store_true", help=f"drop the {d.visibility_mm:g} mm visibility mask")
    ab.add_argument("--no-eta", action="store_true", help="drop the normal-agreement confidence")
    ab.add_argument("--pixel-ncc", action="store_true", help="per-pixel photometric term instead of NCC")
    ab.add_argument("--depth-alignment", action="store_true", help="solve scale/shift for the GT depth")
    ab.add_argument("--dump-patches", action="store_true", help="write pulled points with checkpoints")
    t.add_argument("--log-every", type=int, default=10, help="progress line every N epochs")
    t.add_argument("-q", "--quiet", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("extract", help="marching cubes on a checkpoint", formatter_class=_fmt_help())
    e.add_argument("checkpoint")
    e.add_argument("-o", "--out", required=True, help="output PLY")
    e.add_argument("--resolution", type=int, default=128)
    e.add_argument("--pad", type=float, default=0.02, help="grid padding as a fraction of the bbox")
    e.set_defaults(func=cmd_extract)

    v = sub.add_parser("eval", help="compare a mesh with ground truth", formatter_class=_fmt_help())
    v.add_argument("pred", help="predicted mesh PLY")
    v.add_argument("gt", help="ground-truth mesh PLY")
    v.add_argument("-o", "--out", required=True,
                   help="output prefix; writes PREFIX.json, PREFIX.csv and PREFIX_hist.png")
    thr = v.add_mutually_exclusive_group()
    thr.add_argument("--threshold", type=float, help="F-score distance in scene units")
    thr.add_argument("--threshold-frac", type=float, default=0.05,
                     help="F-score distance as a fraction of the bbox diagonal (GT mesh, or --scene)")
    v.add_argument("--scene", help="dataset directory whose scene bbox sets the diagonal")
    v.add_argument("--points", type=int, default=100_000, help="samples per mesh")
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--crop", type=float, nargs=6, metavar=("XMIN", "YMIN", "ZMIN", "XMAX", "YMAX", "ZMAX"))
    v.set_defaults(func=cmd_eval)

    r = sub.add_parser("render", help="render a dataset view from a checkpoint", formatter_class=_fmt_help())
    r.add_argument("checkpoint")
    r.add_argument("dataset")
    r.add_argument("--view", type=int, default=0)
    r.add_argument("-o", "--out", required=True,
                   help="output prefix; writes PREFIX_rgb.png, PREFIX_depth.pfm, PREFIX_normal.pfm")
    r.add_argument("--n-coarse", type=int, default=64)
    r.add_argument("--n-fine", type=int, default=64)
    r.add_argument("--seed", type=int, default=0)
    r.set_defaults(func=cmd_render)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
        if args.command is None:
            parser.print_help(sys.stderr)
            return EXIT_USAGE
        return args.func(args)
    except UsageError as exc:
        print(f"surfsense: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"surfsense: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DatasetError, CheckpointError, FileNotFoundError) as exc:
        print(f"surfsense: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalAbort as exc:
        print(f"surfsense: numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"surfsense: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
