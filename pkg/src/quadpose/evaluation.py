"""Pose metrics, held-out query sets and CSV / SVG reports."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import EmptyInput, FormatError, QuadposeError
from .geometry import (
    CameraIntrinsics,
    EulerPose,
    RigidTransform,
    euler_angle_distance,
    geodesic_distance,
    geodesic_distance_batch,
    rotation_to_euler,
)
from .mesh import TriangleMesh
from .render import DEFAULT_DISTANCE_FACTORS, DepthNoise, apply_depth_noise, render_all, sample_viewsphere, view_pose

ACC_THRESHOLD = math.pi / 6
CSV_HEADER = ["instance", "view", "gt_az", "gt_el", "gt_pl", "est_az", "est_el", "est_pl", "geodesic_err",
              "inliers", "failed"]
CSV_NAME = "records.csv"
SVG_NAME = "summary.svg"


@dataclass(frozen=True)
class EvalRecord:
    instance: str
    view: int
    gt: RigidTransform
    estimate: RigidTransform | None = None
    inliers: int = 0

    @property
    def failed(self) -> bool:
        return self.estimate is None

    def error(self) -> float:
        """Geodesic rotation error; failures count as the worst case."""
        if self.estimate is None:
            return math.pi
        return geodesic_distance(self.gt.rotation, self.estimate.rotation)


@dataclass(frozen=True)
class MetricsReport:
    acc_pi6: float
    med_err: float
    az_acc: float
    el_acc: float
    pl_acc: float
    n_total: int
    n_failed: int

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def _median(x: np.ndarray) -> float:
    s = np.sort(x)
    n = len(s)
    mid = n // 2
    return float(s[mid]) if n % 2 else float(0.5 * (s[mid - 1] + s[mid]))


def metrics_from_errors(geo, az, el, pl, failed) -> MetricsReport:
    """Aggregate per-record errors (radians).  Failed rows are misses for every accuracy."""
    geo = np.asarray(geo, dtype=np.float64)
    n = len(geo)
    if n == 0:
        raise EmptyInput("no records to evaluate")
    failed = np.asarray(failed, dtype=bool)
    ok = ~failed

    def acc(e):
        return float(np.count_nonzero(ok & (np.asarray(e) <= ACC_THRESHOLD)) / n)

    geo_eff = np.where(failed, math.pi, geo)
    return MetricsReport(acc(geo), _median(geo_eff), acc(az), acc(el), acc(pl), n, int(failed.sum()))


def _q(x: float) -> float:
    # metrics use the values exactly as the CSV stores them
    return float(format(float(x), ".9g"))


def record_errors(r: EvalRecord) -> tuple[float, float, float, float]:
    if r.estimate is None:
        return math.pi, math.pi, math.pi, math.pi
    g = rotation_to_euler(r.gt.rotation)
    e = rotation_to_euler(r.estimate.rotation)
    return (
        _q(r.error()),
        euler_angle_distance(_q(g.azimuth), _q(e.azimuth)),
        euler_angle_distance(_q(g.elevation), _q(e.elevation)),
        euler_angle_distance(_q(g.in_plane), _q(e.in_plane)),
    )


def evaluate(records) -> MetricsReport:
    records = list(records)
    if not records:
        raise EmptyInput("no records to evaluate")
    errs = np.array([record_errors(r) for r in records]).reshape(-1, 4)
    failed = [r.failed for r in records]
    return metrics_from_errors(errs[:, 0], errs[:, 1], errs[:, 2], errs[:, 3], failed)


# ---------------------------------------------------------------------------
# test sets


@dataclass
class QueryView:
    view: int
    pose: RigidTransform
    rgb: np.ndarray
    depth: np.ndarray
    mask: np.ndarray


def grid_rotations(step: float = 15.0) -> np.ndarray:
    return np.stack([v.pose.rotation for v in sample_viewsphere(step, [1.0])])


def sample_test_poses(mesh: TriangleMesh, n: int, seed: int, step: float = 15.0, min_sep_deg: float = 3.0,
                      distance_factors=DEFAULT_DISTANCE_FACTORS) -> list[RigidTransform]:
    """Continuous viewsphere poses at least ``min_sep_deg`` from every training-grid rotation."""
    rng = np.random.default_rng(seed)
    grid = grid_rotations(step)
    el_max = math.radians(max(abs(e) for e in _elevations(step)))
    lo, hi = min(distance_factors), max(distance_factors)
    sep = math.radians(min_sep_deg)
    out = []
    while len(out) < n:
        az = rng.uniform(-math.pi, math.pi)
        el = rng.uniform(-el_max, el_max)
        d = rng.uniform(lo, hi) * mesh.bounding_radius
        pose = view_pose(EulerPose(az, el, 0.0), d)
        if geodesic_distance_batch(grid, pose.rotation).min() >= sep:
            out.append(pose)
    return out


def _elevations(step: float) -> list[float]:
    k = int(math.floor(90.0 / step - 1e-9))
    return [i * step for i in range(-k, k + 1)]


def make_testset(mesh: TriangleMesh, K: CameraIntrinsics, n: int = 100, seed: int = 0, noise: DepthNoise | None = None,
                 background: float = 0.0, step: float = 15.0) -> list[QueryView]:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 7]))
    out = []
    for i, pose in enumerate(sample_test_poses(mesh, n, seed, step)):
        r = render_all(mesh, pose, K, background)
        depth = r.depth if noise is None or noise.is_identity else apply_depth_noise(r.depth, noise, rng)
        out.append(QueryView(i, pose, r.rgb, depth, r.mask))
    return out


def run_queries(queries, estimator, instance: str = "object") -> list[EvalRecord]:
    """``estimator(query) -> PoseEstimate``; pipeline errors become failed records."""
    records = []
    for q in queries:
        try:
            est = estimator(q)
            records.append(EvalRecord(instance, q.view, q.pose, est.pose, int(est.inliers)))
        except QuadposeError:
            records.append(EvalRecord(instance, q.view, q.pose))
    return records


# ---------------------------------------------------------------------------
# reports


def _g(x: float) -> str:
    return format(float(x) + 0.0, ".9g")


def records_to_rows(records) -> list[list[str]]:
    rows = []
    for r in records:
        g = rotation_to_euler(r.gt.rotation)
        if r.estimate is None:
            est = ["nan", "nan", "nan"]
            err = math.pi
        else:
            e = rotation_to_euler(r.estimate.rotation)
            est = [_g(e.azimuth), _g(e.elevation), _g(e.in_plane)]
            err = r.error()
        rows.append([r.instance, str(r.view), _g(g.azimuth), _g(g.elevation), _g(g.in_plane), *est, _g(err),
                     str(r.inliers), "1" if r.failed else "0"])
    return rows


def rows_to_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    w.writerows(rows)
    return buf.getvalue()


def parse_csv(text: str) -> list[dict]:
    reader = csv.DictReader(io.StringIO(text))
    if reader.fieldnames != CSV_HEADER:
        raise FormatError(f"unexpected CSV header {reader.fieldnames}")
    return list(reader)


def metrics_from_rows(rows: list[dict]) -> MetricsReport:
    """Recompute a report from parsed CSV rows (angles re-read at 9 significant digits)."""
    geo, az, el, pl, failed = [], [], [], [], []
    for row in rows:
        f = row["failed"] == "1"
        failed.append(f)
        geo.append(float(row["geodesic_err"]))
        if f:
            az.append(math.pi)
            el.append(math.pi)
            pl.append(math.pi)
        else:
            az.append(euler_angle_distance(float(row["gt_az"]), float(row["est_az"])))
            el.append(euler_angle_distance(float(row["gt_el"]), float(row["est_el"])))
            pl.append(euler_angle_distance(float(row["gt_pl"]), float(row["est_pl"])))
    return metrics_from_errors(geo, az, el, pl, failed)


def svg_bars(title: str, labels, values, fmt="{:.3f}", vmax: float = 1.0) -> str:
    """Plain horizontal bar chart; byte-deterministic for identical inputs."""
    bar_h, gap, left, width = 22, 8, 150, 300
    height = 40 + len(labels) * (bar_h + gap)
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{left + width + 90}" height="{height}" '
        f'font-family="monospace" font-size="12">',
        f'<text x="10" y="20" font-size="14">{title}</text>',
    ]
    for i, (lab, val) in enumerate(zip(labels, values)):
        y = 34 + i * (bar_h + gap)
        frac = 0.0 if vmax <= 0 else min(max(val / vmax, 0.0), 1.0)
        parts.append(f'<text x="10" y="{y + 15}">{lab}</text>')
        parts.append(f'<rect x="{left}" y="{y}" width="{frac * width:.2f}" height="{bar_h}" fill="#4a7bb7"/>')
        parts.append(f'<text x="{left + frac * width + 6:.2f}" y="{y + 15}">{fmt.format(val)}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def report_svg(report: MetricsReport) -> str:
    labels = ["acc_pi6", "az_acc", "el_acc", "pl_acc", "med_err/pi"]
    values = [report.acc_pi6, report.az_acc, report.el_acc, report.pl_acc, report.med_err / math.pi]
    title = f"n_total={report.n_total} n_failed={report.n_failed} med_err={report.med_err:.4f} rad"
    return svg_bars(title, labels, values)


def emit_report(report: MetricsReport, records, out_dir) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"csv": out / CSV_NAME, "svg": out / SVG_NAME}
    paths["csv"].write_text(rows_to_csv(records_to_rows(records)))
    paths["svg"].write_text(report_svg(report))
    return paths
