"""Ablation (schedules side by side) and transfer (held-out meshes) studies."""
from __future__ import annotations

import csv
import io
import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .evaluation import EvalRecord, MetricsReport, evaluate, make_testset, run_queries, svg_bars
from .inference import build_database, estimate_pose
from .mesh import TriangleMesh
from .network import BranchNet
from .training import TrainConfig, TrainState, ViewBank, train

log = logging.getLogger(__name__)

ARM_NAMES = {"baseline-a": "Baseline-A", "joint": "Proposed-joint", "alternate": "Proposed-alternate",
             "zdda": "Baseline-ZDDA"}
COMPARISON_HEADER = ["study", "arm", "seed", "instance", "acc_pi6", "med_err", "az_acc", "el_acc", "pl_acc",
                     "n_total", "n_failed"]


@dataclass(frozen=True)
class QuerySettings:
    k: int = 200
    ratio: float = 0.9
    reproj_thresh: float | None = None
    iters: int = 1000
    nms_radius: float | None = None
    db_views: int = 20
    db_k: int = 100


@dataclass
class ArmResult:
    arm: str
    seed: int
    instance: str
    report: MetricsReport
    records: list[EvalRecord] = field(repr=False)
    train_seconds: float = 0.0


def query_network(state: TrainState, arm: str) -> tuple[BranchNet, str]:
    """Baseline-A applies the depth network to colour queries (as luminance); other arms use branch D."""
    if arm == "baseline-a":
        return state.net_abc, "gray"
    return state.net_d, "rgb"


def evaluate_state(state: TrainState, arm: str, mesh: TriangleMesh, instance: str, config: TrainConfig,
                   query: QuerySettings, n_test: int, test_seed: int) -> tuple[MetricsReport, list[EvalRecord]]:
    K = config.intrinsics()
    db = build_database(mesh, state.net_abc, K, query.db_views, query.db_k, instance_id=instance)
    net, modality = query_network(state, arm)
    queries = make_testset(mesh, K, n_test, test_seed, background=config.background, step=config.view_step)

    def estimator(q):
        return estimate_pose(q.rgb, net, db, K, k=query.k, ratio=query.ratio, reproj_thresh=query.reproj_thresh,
                             iters=query.iters, seed=test_seed + q.view, nms_radius=query.nms_radius,
                             modality=modality)

    records = run_queries(queries, estimator, instance)
    return evaluate(records), records


def run_arm(arm: str, seed: int, train_meshes, test_meshes, config: TrainConfig, query: QuerySettings,
            n_test: int = 100, test_seed: int = 1000, banks: list[ViewBank] | None = None) -> list[ArmResult]:
    """Train one arm and evaluate it on every ``(instance, mesh)`` of ``test_meshes``."""
    cfg = replace(config, schedule=arm, seed=seed)
    t0 = time.perf_counter()
    state = train([m for _, m in train_meshes], cfg, banks=banks)
    seconds = time.perf_counter() - t0
    out = []
    for instance, mesh in test_meshes:
        report, records = evaluate_state(state, arm, mesh, instance, cfg, query, n_test, test_seed)
        log.info("%s seed %d on %s: acc %.3f med %.3f", arm, seed, instance, report.acc_pi6, report.med_err)
        out.append(ArmResult(arm, seed, instance, report, records, seconds))
    return out


def ablation(mesh: tuple[str, TriangleMesh], config: TrainConfig, query: QuerySettings, seeds=(0,),
             arms=("baseline-a", "joint", "alternate"), n_test: int = 100, test_seed: int = 1000) -> list[ArmResult]:
    """Every arm trained and tested on one mesh, per seed."""
    bank = ViewBank(mesh[1], config, mesh[0])
    results = []
    for seed in seeds:
        for arm in arms:
            results += run_arm(arm, seed, [mesh], [mesh], config, query, n_test, test_seed, [bank])
    return results


def transfer(train_meshes, test_meshes, config: TrainConfig, query: QuerySettings, seeds=(0,),
             arms=("baseline-a", "alternate"), n_test: int = 100, test_seed: int = 1000) -> list[ArmResult]:
    """Train on ``train_meshes``; test only on ``test_meshes`` (disjoint by id)."""
    overlap = {i for i, _ in train_meshes} & {i for i, _ in test_meshes}
    if overlap:
        raise ValueError(f"test meshes overlap training meshes: {sorted(overlap)}")
    banks = [ViewBank(m, config, i) for i, m in train_meshes]
    results = []
    for seed in seeds:
        for arm in arms:
            results += run_arm(arm, seed, train_meshes, test_meshes, config, query, n_test, test_seed, banks)
    return results


def mean_accuracy(results: list[ArmResult]) -> dict[str, float]:
    """Mean Acc_{pi/6} per arm over seeds and instances."""
    by_arm: dict[str, list[float]] = {}
    for r in results:
        by_arm.setdefault(r.arm, []).append(r.report.acc_pi6)
    return {arm: float(np.mean(v)) for arm, v in by_arm.items()}


def comparison_csv(study: str, results: list[ArmResult]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(COMPARISON_HEADER)
    for r in results:
        rep = r.report
        w.writerow([study, ARM_NAMES.get(r.arm, r.arm), r.seed, r.instance, f"{rep.acc_pi6:.9g}",
                    f"{rep.med_err:.9g}", f"{rep.az_acc:.9g}", f"{rep.el_acc:.9g}", f"{rep.pl_acc:.9g}",
                    rep.n_total, rep.n_failed])
    return buf.getvalue()


def comparison_svg(study: str, results: list[ArmResult]) -> str:
    means = mean_accuracy(results)
    labels = [ARM_NAMES.get(a, a) for a in means]
    return svg_bars(f"{study}: mean acc_pi6 per arm", labels, list(means.values()))


def write_comparison(study: str, results: list[ArmResult], out_dir) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"csv": out / f"{study}.csv", "svg": out / f"{study}.svg"}
    paths["csv"].write_text(comparison_csv(study, results))
    paths["svg"].write_text(comparison_svg(study, results))
    return paths

