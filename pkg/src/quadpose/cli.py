"""Command line: render, train, build-db, estimate, evaluate, gradcheck, experiment.

Exit codes: 0 success, 1 computation error, 2 usage or I/O error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from . import evaluation as ev
from .config import load_config, resolve_mesh, train_config
from .errors import BadInput, ParseError, QuadposeError
from .experiments import QuerySettings, ablation, mean_accuracy, transfer, write_comparison
from .formats import read_ppm, write_dpt, write_json, write_mask, write_ppm
from .gradcheck import format_table, run_all
from .inference import DescriptorDatabase, build_database, estimate_pose
from .render import render_all, sample_viewsphere
from .training import load_networks, save_checkpoint, train

log = logging.getLogger("quadpose")

EXIT_OK, EXIT_COMPUTE, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _query_settings(cfg: dict) -> QuerySettings:
    q = cfg["query"]
    return QuerySettings(q["k"], q["ratio"], q["reproj_thresh"], q["iters"], q["nms_radius"],
                         cfg["database"]["n_views"], cfg["database"]["k"])


def _require(path, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise UsageError(f"{what} not found: {p}")
    return p


def _out_dir(args, default: str) -> Path:
    out = Path(args.out or default)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _arm_of(ckpt: Path) -> str:
    from .formats import read_json

    return read_json(ckpt / "run.json")["config"]["schedule"]


# ---------------------------------------------------------------------------
# subcommands


def cmd_render(args, cfg) -> int:
    instance, mesh = resolve_mesh(args.mesh or cfg["mesh"])
    tc = train_config(cfg)
    K = tc.intrinsics()
    r = mesh.bounding_radius
    views = sample_viewsphere(cfg["render"]["step"], [f * r for f in cfg["render"]["distance_factors"]], r)
    out = _out_dir(args, "render")
    manifest = {"instance": instance, "intrinsics": [K.fx, K.fy, K.cx, K.cy, K.width, K.height], "views": []}
    for i, view in enumerate(views):
        rd = render_all(mesh, view.pose, K, tc.background)
        stem = f"view_{i:04d}"
        write_dpt(out / f"{stem}.dpt", rd.depth)
        write_ppm(out / f"{stem}.ppm", rd.rgb)
        write_mask(out / f"{stem}.msk", rd.mask)
        manifest["views"].append({
            "file": stem,
            "azimuth": view.euler.azimuth,
            "elevation": view.euler.elevation,
            "in_plane": view.euler.in_plane,
            "distance": view.distance,
            "rotation": view.pose.rotation.ravel().tolist(),
            "translation": view.pose.translation.tolist(),
        })
    write_json(out / "views.json", manifest)
    print(f"rendered {len(views)} views to {out}")
    return EXIT_OK


def cmd_train(args, cfg) -> int:
    tc = train_config(cfg, seed=cfg["seed"])
    meshes = [resolve_mesh(args.mesh or cfg["mesh"])[1]]
    state = train(meshes, tc, log_every=args.log_every)
    out = _out_dir(args, "checkpoint")
    save_checkpoint(state, tc, out)
    write_json(out / "effective_config.json", cfg)
    print(f"trained {state.step} steps ({tc.schedule}); checkpoint in {out}")
    return EXIT_OK


def cmd_build_db(args, cfg) -> int:
    ckpt = _require(args.ckpt, "checkpoint directory")
    net_abc, _, tc = load_networks(ckpt)
    instance, mesh = resolve_mesh(args.mesh or cfg["mesh"])
    db = build_database(mesh, net_abc, tc.intrinsics(), cfg["database"]["n_views"], cfg["database"]["k"],
                        instance_id=instance)
    out = Path(args.db) if args.db else _out_dir(args, "database") / "db.qpd"
    out.parent.mkdir(parents=True, exist_ok=True)
    db.save(out)
    print(f"database with {len(db)} entries written to {out}")
    return EXIT_OK


def cmd_estimate(args, cfg) -> int:
    ckpt = _require(args.ckpt, "checkpoint directory")
    db_path = _require(args.db, "database")
    image_path = _require(args.image, "query image")
    net_abc, net_d, tc = load_networks(ckpt)
    db = DescriptorDatabase.load(db_path)
    image = read_ppm(image_path)
    arm = _arm_of(ckpt)
    net, modality = (net_abc, "gray") if arm == "baseline-a" else (net_d, "rgb")
    q = _query_settings(cfg)
    est = estimate_pose(image, net, db, tc.intrinsics(), k=q.k, ratio=q.ratio, reproj_thresh=q.reproj_thresh,
                        iters=q.iters, seed=cfg["seed"], nms_radius=q.nms_radius, modality=modality)
    print(json.dumps({
        "rotation": est.pose.rotation.ravel().tolist(),
        "translation": est.pose.translation.tolist(),
        "inliers": est.inliers,
        "inlier_ratio": est.inlier_ratio,
        "rms": est.rms,
    }))
    return EXIT_OK


def cmd_evaluate(args, cfg) -> int:
    if args.csv:
        rows = ev.parse_csv(_require(args.csv, "records CSV").read_text())
        report = ev.metrics_from_rows(rows)
    else:
        if not (args.ckpt and args.db):
            raise UsageError("evaluate needs --csv, or both --ckpt and --db")
        ckpt = _require(args.ckpt, "checkpoint directory")
        db = DescriptorDatabase.load(_require(args.db, "database"))
        net_abc, net_d, tc = load_networks(ckpt)
        instance, mesh = resolve_mesh(args.mesh or cfg["mesh"])
        arm = _arm_of(ckpt)
        net, modality = (net_abc, "gray") if arm == "baseline-a" else (net_d, "rgb")
        K = tc.intrinsics()
        e = cfg["evaluation"]
        q = _query_settings(cfg)
        queries = ev.make_testset(mesh, K, e["n_views"], e["seed"], background=tc.background, step=tc.view_step)

        def estimator(qv):
            return estimate_pose(qv.rgb, net, db, K, k=q.k, ratio=q.ratio, reproj_thresh=q.reproj_thresh,
                                 iters=q.iters, seed=e["seed"] + qv.view, nms_radius=q.nms_radius,
                                 modality=modality)

        records = ev.run_queries(queries, estimator, instance)
        report = ev.evaluate(records)
        paths = ev.emit_report(report, records, _out_dir(args, "report"))
        print(f"report written to {paths['csv']} and {paths['svg']}")
    for key, value in report.to_dict().items():
        print(f"{key} = {value:.6g}" if isinstance(value, float) else f"{key} = {value}")
    return EXIT_OK


def cmd_gradcheck(args, cfg) -> int:
    results = run_all(cfg["seed"])
    print(format_table(results))
    return EXIT_OK if all(r.passed for r in results) else EXIT_COMPUTE


def cmd_experiment(args, cfg) -> int:
    tc = train_config(cfg)
    q = _query_settings(cfg)
    e = cfg["experiment"]
    n_test = cfg["evaluation"]["n_views"]
    test_seed = cfg["evaluation"]["seed"]
    seeds = [args.seed] if args.seed is not None else e["seeds"]
    if args.name == "ablation":
        mesh = resolve_mesh(args.mesh or cfg["mesh"])
        results = ablation(mesh, tc, q, seeds, e["arms"], n_test, test_seed)
    else:
        train_m = [resolve_mesh(s) for s in e["train_meshes"]]
        test_m = [resolve_mesh(s) for s in e["test_meshes"]]
        results = transfer(train_m, test_m, tc, q, seeds, e["transfer_arms"], n_test, test_seed)
    paths = write_comparison(args.name, results, _out_dir(args, f"experiment_{args.name}"))
    for arm, acc in mean_accuracy(results).items():
        print(f"{arm}: mean acc_pi6 = {acc:.4f}")
    print(f"comparison written to {paths['csv']} and {paths['svg']}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="quadpose", description=__doc__.splitlines()[0])
    p.add_argument("--config", help="run configuration JSON")
    p.add_argument("--seed", type=int, help="override the configured seed")
    p.add_argument("--threads", type=int, default=1, help="torch intra-op threads (weights update single-threaded)")
    p.add_argument("--out", help="output directory")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("render", help="render depth, proxy-RGB and masks over the viewsphere")
    s.add_argument("--mesh", help="OBJ path or procedural:<seed>[:<kind>]")
    s.add_argument("--step", type=float, help="viewsphere step in degrees")
    s.set_defaults(func=cmd_render)

    s = sub.add_parser("train", help="train the networks")
    s.add_argument("--mesh", help="OBJ path or procedural:<seed>[:<kind>]")
    s.add_argument("--steps", type=int)
    s.add_argument("--schedule", choices=["joint", "alternate", "baseline-a", "zdda"])
    s.add_argument("--log-every", type=int, default=0)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("build-db", help="build a descriptor database for one mesh")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--mesh")
    s.add_argument("--db", help="output database path (default <out>/db.qpd)")
    s.set_defaults(func=cmd_build_db)

    s = sub.add_parser("estimate", help="estimate the pose of one query image")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--db", required=True)
    s.add_argument("--image", required=True, help="binary PPM query")
    s.set_defaults(func=cmd_estimate)

    s = sub.add_parser("evaluate", help="evaluate on a held-out test set, or re-score a records CSV")
    s.add_argument("--csv")
    s.add_argument("--ckpt")
    s.add_argument("--db")
    s.add_argument("--mesh")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("gradcheck", help="finite-difference checks of all gradients")
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("experiment", help="ablation or transfer study")
    s.add_argument("name", choices=["ablation", "transfer"])
    s.add_argument("--mesh")
    s.add_argument("--steps", type=int)
    s.set_defaults(func=cmd_experiment)
    return p


def _overrides(args) -> dict:
    o: dict = {}
    if args.seed is not None:
        o["seed"] = args.seed
    train_o = {}
    if getattr(args, "steps", None) is not None:
        train_o["steps"] = args.steps
    if getattr(args, "schedule", None) is not None:
        train_o["schedule"] = args.schedule
    if train_o:
        o["train"] = train_o
    if getattr(args, "step", None) is not None:
        o["render"] = {"step": args.step}
    return o


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    torch.set_num_threads(max(1, args.threads))
    try:
        cfg = load_config(args.config, _overrides(args))
        return args.func(args, cfg)
    except (UsageError, BadInput, ParseError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (QuadposeError, ValueError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_COMPUTE


if __name__ == "__main__":
    sys.exit(main())
