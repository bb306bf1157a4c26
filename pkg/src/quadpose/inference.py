"""Test-time pipeline: descriptor database, 2D-3D matching and RANSAC + PnP."""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import BadInput, DegenerateSample, EmptyDatabase, NoConsensus
from .formats import database_from_bytes, database_to_bytes, read_json, write_json
from .geometry import (
    CameraIntrinsics,
    RigidTransform,
    geodesic_distance_batch,
    kabsch_batch,
    project_points,
)
from .losses import lift_keypoints
from .mesh import TriangleMesh
from .network import (
    BranchNet,
    Keypoint,
    depth_to_input,
    extract_descriptors,
    kpn_forward,
    backbone_forward,
    nms,
    rgb_to_gray_input,
    rgb_to_input,
    select_topk,
    to_batch,
)
from .render import ViewSample, render_depth, sample_viewsphere


@dataclass(frozen=True)
class DatabaseEntry:
    descriptor: np.ndarray
    point: np.ndarray  # model frame
    view_id: int


@dataclass
class DescriptorDatabase:
    descriptors: np.ndarray  # (n, d) float32, unit rows
    points: np.ndarray  # (n, 3) model frame
    view_ids: np.ndarray  # (n,)
    instance_id: str = "object"
    manifest: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.descriptors)

    @property
    def dim(self) -> int:
        return self.descriptors.shape[1]

    def entry(self, i: int) -> DatabaseEntry:
        return DatabaseEntry(self.descriptors[i], self.points[i], int(self.view_ids[i]))

    def to_bytes(self) -> bytes:
        return database_to_bytes(self.descriptors, self.points, self.view_ids)

    def save(self, path) -> None:
        path = Path(path)
        path.write_bytes(self.to_bytes())
        write_json(path.with_suffix(path.suffix + ".json"), {"instance_id": self.instance_id, **self.manifest})

    @classmethod
    def load(cls, path) -> "DescriptorDatabase":
        path = Path(path)
        desc, pts, views = database_from_bytes(path.read_bytes(), path)
        side = path.with_suffix(path.suffix + ".json")
        meta = read_json(side) if side.exists() else {}
        instance = meta.pop("instance_id", "object")
        return cls(desc, pts, views, instance, meta)


@dataclass(frozen=True)
class Match2D3D:
    u: float
    v: float
    point: np.ndarray
    distance: float


@dataclass(frozen=True)
class PoseEstimate:
    pose: RigidTransform
    inliers: int
    inlier_ratio: float
    rms: float
    inlier_mask: np.ndarray = field(default=None, compare=False, repr=False)


# ---------------------------------------------------------------------------
# database


def farthest_view_subset(views: list[ViewSample], n: int) -> list[int]:
    """Greedy farthest-point selection over view rotations, seeded at the view nearest identity."""
    rots = np.stack([v.pose.rotation for v in views])
    first = int(np.argmin(geodesic_distance_batch(rots, np.eye(3))))
    chosen = [first]
    dmin = geodesic_distance_batch(rots, rots[first])
    while len(chosen) < min(n, len(views)):
        nxt = int(np.argmax(dmin))
        if dmin[nxt] <= 0:
            break
        chosen.append(nxt)
        dmin = np.minimum(dmin, geodesic_distance_batch(rots, rots[nxt]))
    return chosen


def database_views(mesh: TriangleMesh, n_views: int = 20, step: float = 15.0,
                   distance_factor: float = 2.8) -> list[ViewSample]:
    grid = sample_viewsphere(step, [distance_factor * mesh.bounding_radius], mesh.bounding_radius)
    return [grid[i] for i in farthest_view_subset(grid, n_views)]


def weights_checksum(net: BranchNet) -> str:
    return hashlib.sha256(net.weights_bytes()).hexdigest()


@torch.no_grad()
def describe_depth(net: BranchNet, depth: np.ndarray, k: int):
    """Top-k keypoints and their descriptors for one depth image."""
    feat, probs = net(to_batch(depth_to_input(depth)))
    kps = select_topk(probs[0].double().numpy(), k, net.config.stride)
    desc = extract_descriptors(feat[0], kps, net)
    return kps, desc.double().numpy()


def build_database(mesh: TriangleMesh, net: BranchNet, K: CameraIntrinsics, n_views: int = 20, k: int = 100,
                   instance_id: str = "object", views: list[ViewSample] | None = None) -> DescriptorDatabase:
    views = database_views(mesh, n_views) if views is None else views
    all_desc, all_pts, all_ids = [], [], []
    for vid, view in enumerate(views):
        depth = render_depth(mesh, view.pose, K)
        kps, desc = describe_depth(net, depth, k)
        if not kps:
            continue
        pts, valid = lift_keypoints(kps, depth, K)
        if not valid.any():
            continue
        all_desc.append(desc[valid])
        all_pts.append(view.pose.inverse().apply(pts[valid]))
        all_ids.append(np.full(int(valid.sum()), vid))
    if not all_desc:
        raise EmptyDatabase("no keypoint landed on the object in any database view")
    manifest = {
        "views": [[v.euler.azimuth, v.euler.elevation, v.euler.in_plane, v.distance] for v in views],
        "k": k,
        "weights_sha256": weights_checksum(net),
    }
    return DescriptorDatabase(
        np.concatenate(all_desc).astype(np.float32),
        np.concatenate(all_pts),
        np.concatenate(all_ids).astype(np.int64),
        instance_id,
        manifest,
    )


# ---------------------------------------------------------------------------
# matching


def match_descriptors(keypoints: list[Keypoint], descriptors: np.ndarray, db: DescriptorDatabase,
                      ratio: float = 0.9) -> list[Match2D3D]:
    """Exhaustive nearest neighbour with a nearest / second-nearest ratio filter.

    ``ratio >= 1`` disables the filter.
    """
    q = np.asarray(descriptors, dtype=np.float64)
    if len(q) == 0 or len(db) == 0:
        return []
    d = np.sqrt(np.maximum(((q[:, None, :] - db.descriptors[None].astype(np.float64)) ** 2).sum(axis=2), 0.0))
    order = np.argsort(d, axis=1, kind="stable")
    out = []
    for i, kp in enumerate(keypoints):
        j = order[i, 0]
        d1 = d[i, j]
        if ratio < 1.0 and d.shape[1] > 1:
            d2 = d[i, order[i, 1]]
            if not d1 < ratio * d2:
                continue
        out.append(Match2D3D(float(kp.u), float(kp.v), db.points[j].copy(), float(d1)))
    return out


# ---------------------------------------------------------------------------
# minimal solver


def bearings(uv: np.ndarray, K: CameraIntrinsics) -> np.ndarray:
    b = np.stack([(uv[..., 0] - K.cx) / K.fx, (uv[..., 1] - K.cy) / K.fy, np.ones(uv.shape[:-1])], axis=-1)
    return b / np.linalg.norm(b, axis=-1, keepdims=True)


def _quartic_real_roots(coef: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Real roots of ``coef[:, 0] x^4 + ... + coef[:, 4]`` per row; ``(B, 4)`` roots and validity."""
    B = len(coef)
    roots = np.zeros((B, 4))
    valid = np.zeros((B, 4), dtype=bool)
    lead = coef[:, 0]
    scale = np.abs(coef).max(axis=1)
    ok = np.abs(lead) > 1e-12 * np.maximum(scale, 1e-300)
    if not ok.any():
        return roots, valid
    c = coef[ok] / lead[ok, None]
    comp = np.zeros((len(c), 4, 4))
    comp[:, 0, :] = -c[:, 1:]
    comp[:, 1, 0] = comp[:, 2, 1] = comp[:, 3, 2] = 1.0
    ev = np.linalg.eigvals(comp)
    r = ev.real.copy()
    # accept nearly-real roots, then polish on the polynomial
    real = np.abs(ev.imag) <= 1e-5 * np.maximum(1.0, np.abs(ev))
    for _ in range(3):
        p = (((r + c[:, 1:2]) * r + c[:, 2:3]) * r + c[:, 3:4]) * r + c[:, 4:5]
        dp = ((4 * r + 3 * c[:, 1:2]) * r + 2 * c[:, 2:3]) * r + c[:, 3:4]
        step = np.where(np.abs(dp) > 1e-300, p / np.where(dp == 0, 1.0, dp), 0.0)
        r = r - step
    roots[ok] = r
    valid[ok] = real & np.isfinite(r)
    return roots, valid


def p3p_grunert(X: np.ndarray, j: np.ndarray):
    """Grunert's three-point solution, batched.

    ``X`` are ``(B, 3, 3)`` model points and ``j`` the matching unit bearings.
    Returns rotations ``(B, 4, 3, 3)``, translations ``(B, 4, 3)`` and a
    validity mask ``(B, 4)``.
    """
    B = len(X)
    a2 = ((X[:, 1] - X[:, 2]) ** 2).sum(-1)
    b2 = ((X[:, 0] - X[:, 2]) ** 2).sum(-1)
    c2 = ((X[:, 0] - X[:, 1]) ** 2).sum(-1)
    ca = (j[:, 1] * j[:, 2]).sum(-1)
    cb = (j[:, 0] * j[:, 2]).sum(-1)
    cg = (j[:, 0] * j[:, 1]).sum(-1)
    amc = (a2 - c2) / b2
    apc = (a2 + c2) / b2
    A4 = (amc - 1) ** 2 - 4 * c2 / b2 * ca ** 2
    A3 = 4 * (amc * (1 - amc) * cb - (1 - apc) * ca * cg + 2 * c2 / b2 * ca ** 2 * cb)
    A2 = 2 * (amc ** 2 - 1 + 2 * amc ** 2 * cb ** 2 + 2 * (b2 - c2) / b2 * ca ** 2
              - 4 * apc * ca * cb * cg + 2 * (b2 - a2) / b2 * cg ** 2)
    A1 = 4 * (-amc * (1 + amc) * cb + 2 * a2 / b2 * cg ** 2 * cb - (1 - apc) * ca * cg)
    A0 = (1 + amc) ** 2 - 4 * a2 / b2 * cg ** 2
    v, valid = _quartic_real_roots(np.stack([A4, A3, A2, A1, A0], axis=1))
    with np.errstate(divide="ignore", invalid="ignore"):
        den = 2 * (cg[:, None] - v * ca[:, None])
        u = ((-1 + amc[:, None]) * v ** 2 - 2 * amc[:, None] * cb[:, None] * v + 1 + amc[:, None]) / den
        s1sq = b2[:, None] / (1 + v ** 2 - 2 * v * cb[:, None])
        s1 = np.sqrt(s1sq)
    s = np.stack([s1, u * s1, v * s1], axis=-1)  # (B, 4, 3)
    valid &= np.all(np.isfinite(s), axis=-1) & np.all(s > 0, axis=-1) & (s1sq > 0)
    cam = s[..., None] * j[:, None, :, :]  # (B, 4, 3, 3)
    cam = np.where(valid[..., None, None], cam, X[:, None])
    R, t, _ = kabsch_batch(np.repeat(X, 4, axis=0), cam.reshape(B * 4, 3, 3))
    return R.reshape(B, 4, 3, 3), t.reshape(B, 4, 3), valid


def _collinear(X: np.ndarray, tol: float = 1e-9) -> np.ndarray:
    area = np.linalg.norm(np.cross(X[:, 1] - X[:, 0], X[:, 2] - X[:, 0]), axis=-1)
    size = np.maximum(((X[:, 1] - X[:, 0]) ** 2).sum(-1), ((X[:, 2] - X[:, 0]) ** 2).sum(-1))
    return area <= tol * np.maximum(size, 1e-300)


def _matches_to_arrays(matches) -> tuple[np.ndarray, np.ndarray]:
    uv = np.array([(m.u, m.v) for m in matches], dtype=np.float64).reshape(-1, 2)
    xyz = np.array([m.point for m in matches], dtype=np.float64).reshape(-1, 3)
    return uv, xyz


def reprojection_errors(R: np.ndarray, t: np.ndarray, xyz: np.ndarray, uv: np.ndarray, K: CameraIntrinsics):
    """Pixel errors for ``(..., 3, 3)`` / ``(..., 3)`` poses over all points; inf behind the camera."""
    cam = np.einsum("...ij,nj->...ni", R, xyz) + t[..., None, :]
    z = cam[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        proj = project_points(cam, K)
        err = np.sqrt(((proj - uv) ** 2).sum(-1))
    return np.where(z > 1e-9, err, np.inf)


def pnp_minimal(matches, K: CameraIntrinsics, polish_iters: int = 10) -> list[RigidTransform]:
    """P3P on the first three matches, each root polished on all four; best fit first.

    The fourth match disambiguates the roots.  Polishing (a few Gauss-Newton
    steps over the four reprojections) leaves exact solutions untouched and
    spreads pixel noise over all four points instead of three.
    """
    if len(matches) != 4:
        raise BadInput("pnp_minimal needs exactly 4 matches")
    uv, xyz = _matches_to_arrays(matches)
    if _collinear(xyz[None, :3])[0]:
        raise DegenerateSample("the first three model points are collinear")
    R, t, valid = p3p_grunert(xyz[None, :3], bearings(uv[None, :3], K))
    err = reprojection_errors(R[0], t[0], xyz, uv, K)  # (4, 4)
    roots = [RigidTransform(R[0, i], t[0, i]) for i in range(4) if valid[0, i] and np.all(np.isfinite(err[i]))]
    if polish_iters > 0:
        roots = [gauss_newton(r, xyz, uv, K, polish_iters) for r in roots]
    sq = [float((reprojection_errors(r.rotation, r.translation, xyz, uv, K) ** 2).sum()) for r in roots]
    out: list[RigidTransform] = []
    for i in sorted(range(len(roots)), key=lambda i: sq[i]):
        cand = roots[i]
        if not np.isfinite(sq[i]) or np.any(xyz @ cand.rotation.T[:, 2] + cand.translation[2] <= 0):
            continue
        if not any(np.abs(cand.as_matrix() - o.as_matrix()).max() < 1e-9 for o in out):
            out.append(cand)
    return out


# ---------------------------------------------------------------------------
# refit: EPnP-style linear solve and Gauss-Newton


def _skew(v):
    return np.array([[0, -v[2], v[1]], [v[2], 0, -v[0]], [-v[1], v[0], 0]])


def _so3_exp(w):
    th = np.linalg.norm(w)
    W = _skew(w)
    if th < 1e-12:
        return np.eye(3) + W
    return np.eye(3) + math.sin(th) / th * W + (1 - math.cos(th)) / th ** 2 * W @ W


def epnp(xyz: np.ndarray, uv: np.ndarray, K: CameraIntrinsics) -> RigidTransform | None:
    """Linear pose from n >= 4 correspondences via control-point barycentrics.

    Uses four control points (three on planar data) and tries the one- and
    two-vector null-space solutions, keeping the lower reprojection error.
    """
    n = len(xyz)
    if n < 4:
        return None
    c0 = xyz.mean(axis=0)
    d = xyz - c0
    evals, evecs = np.linalg.eigh(d.T @ d / n)
    axes = [evecs[:, i] * math.sqrt(max(evals[i], 0.0)) for i in (2, 1, 0)]
    planar = evals[0] <= 1e-10 * max(evals[2], 1e-300)
    if evals[1] <= 1e-10 * max(evals[2], 1e-300):
        return None
    ctrl = np.array([c0] + [c0 + a for a in (axes[:2] if planar else axes)])
    nc = len(ctrl)
    # barycentric coordinates: xyz = alphas @ ctrl, sum(alphas) = 1
    A = np.vstack([ctrl.T, np.ones(nc)])
    rhs = np.vstack([xyz.T, np.ones(n)])
    alphas = np.linalg.lstsq(A, rhs, rcond=None)[0].T  # (n, nc)
    x = (uv[:, 0] - K.cx) / K.fx
    y = (uv[:, 1] - K.cy) / K.fy
    M = np.zeros((2 * n, 3 * nc))
    for k in range(nc):
        M[0::2, 3 * k] = alphas[:, k]
        M[0::2, 3 * k + 2] = -alphas[:, k] * x
        M[1::2, 3 * k + 1] = alphas[:, k]
        M[1::2, 3 * k + 2] = -alphas[:, k] * y
    _, _, Vt = np.linalg.svd(M)
    null = Vt[::-1][:2]  # smallest singular directions first
    pairs = [(a, b) for a in range(nc) for b in range(a + 1, nc)]
    dw = np.array([np.linalg.norm(ctrl[a] - ctrl[b]) for a, b in pairs])
    best, best_err = None, np.inf

    def finish(vec):
        cc = vec.reshape(nc, 3)
        cam = alphas @ cc
        if np.median(cam[:, 2]) < 0:
            cam = -cam
        try:
            R, t, _ = kabsch_batch(xyz[None], cam[None])
        except np.linalg.LinAlgError:
            return None, np.inf
        err = reprojection_errors(R[0], t[0], xyz, uv, K)
        return RigidTransform(R[0], t[0]), float(np.mean(err))

    v1 = null[0].reshape(nc, 3)
    dc = np.array([np.linalg.norm(v1[a] - v1[b]) for a, b in pairs])
    if dc @ dc > 0:
        beta = (dc @ dw) / (dc @ dc)
        cand, err = finish(beta * null[0])
        if err < best_err:
            best, best_err = cand, err
    va, vb = null[0].reshape(nc, 3), null[1].reshape(nc, 3)
    L = []
    for a, b in pairs:
        da, db = va[a] - va[b], vb[a] - vb[b]
        L.append([da @ da, 2 * da @ db, db @ db])
    sol = np.linalg.lstsq(np.array(L), dw ** 2, rcond=None)[0]
    if sol[0] > 0 and sol[2] > 0:
        b1 = math.sqrt(sol[0])
        b2 = math.copysign(math.sqrt(sol[2]), sol[1])
        cand, err = finish(b1 * null[0] + b2 * null[1])
        if err < best_err:
            best, best_err = cand, err
    return best


def gauss_newton(pose: RigidTransform, xyz: np.ndarray, uv: np.ndarray, K: CameraIntrinsics,
                 iters: int = 5, robust_scale: float | None = None) -> RigidTransform:
    """Reprojection refinement; each step is kept only if it lowers the cost.

    With ``robust_scale`` the steps are iteratively reweighted for a Cauchy
    loss of that scale (pixels), otherwise plain least squares.
    """
    R, t = pose.rotation.copy(), pose.translation.copy()

    def cost(R_, t_):
        e = reprojection_errors(R_, t_, xyz, uv, K)
        if not np.all(np.isfinite(e)):
            return np.inf
        if robust_scale is None:
            return float((e ** 2).sum())
        return float(np.log1p((e / robust_scale) ** 2).sum())

    cur = cost(R, t)
    for _ in range(iters):
        P = xyz @ R.T + t
        z = P[:, 2]
        if np.any(z <= 1e-9):
            break
        res = project_points(P, K) - uv
        if robust_scale is None:
            w = np.ones(len(P))
        else:
            w = 1.0 / (1.0 + (res ** 2).sum(axis=1) / robust_scale ** 2)
        dproj = np.zeros((len(P), 2, 3))
        dproj[:, 0, 0] = K.fx / z
        dproj[:, 0, 2] = -K.fx * P[:, 0] / z ** 2
        dproj[:, 1, 1] = K.fy / z
        dproj[:, 1, 2] = -K.fy * P[:, 1] / z ** 2
        dP_dw = -np.stack([_skew(p) for p in xyz @ R.T])
        J = np.concatenate([dproj @ dP_dw, dproj], axis=2)  # (n, 2, 6)
        Jw = J * w[:, None, None]
        H = np.einsum("nki,nkj->ij", Jw, J)
        H += 1e-12 * np.trace(H) * np.eye(6)
        try:
            delta = -np.linalg.solve(H, np.einsum("nki,nk->i", Jw, res))
        except np.linalg.LinAlgError:
            break
        R_new = _so3_exp(delta[:3]) @ R
        t_new = t + delta[3:]
        new = cost(R_new, t_new)
        if not new < cur:
            break
        R, t, cur = R_new, t_new, new
        if np.abs(delta).max() < 1e-14:
            break
    return RigidTransform(R, t)


# ---------------------------------------------------------------------------
# RANSAC


def msac_cost(err: np.ndarray, thresh: float) -> np.ndarray:
    """Truncated quadratic consensus cost along the last axis (lower is better)."""
    return np.minimum(err, thresh) ** 2 @ np.ones(err.shape[-1])


def _ransac_arrays(uv, xyz, K, iters, thresh, seed, confidence, batch=64):
    n = len(uv)
    rng = np.random.default_rng(seed)
    samples = np.argsort(rng.random((iters, n)), axis=1)[:, :4]
    j_all = bearings(uv, K)
    best_cost, best_R, best_t = np.inf, None, None
    needed = iters
    done = 0
    while done < min(needed, iters):
        idx = samples[done:done + batch]
        done += len(idx)
        X = xyz[idx]
        keep = ~_collinear(X[:, :3])
        if not keep.any():
            continue
        idx, X = idx[keep], X[keep]
        R, t, valid = p3p_grunert(X[:, :3], j_all[idx[:, :3]])
        R = R[valid]
        t = t[valid]
        if not len(R):
            continue
        err = reprojection_errors(R, t, xyz, uv, K)  # (C, n)
        cost = msac_cost(err, thresh)
        c0 = int(np.argmin(cost))
        if cost[c0] < best_cost:
            best_cost, best_R, best_t = float(cost[c0]), R[c0], t[c0]
            ratio = float((err[c0] < thresh).mean())
            if ratio >= 1.0:
                needed = 0
            elif ratio > 0:
                needed = int(math.ceil(math.log(1 - confidence) / math.log(1 - ratio ** 4)))
    return best_R, best_t


def ransac_pnp(matches, K: CameraIntrinsics, iters: int = 1000, reproj_thresh: float = 4.0, seed: int = 0,
               confidence: float = 0.999, refine_iters: int = 10) -> PoseEstimate:
    """Robust pose from 2D-3D matches: P3P hypotheses scored by MSAC, linear refit, Gauss-Newton."""
    if len(matches) < 4:
        raise NoConsensus(f"need at least 4 matches, got {len(matches)}")
    uv, xyz = _matches_to_arrays(matches)
    return ransac_pnp_arrays(uv, xyz, K, iters, reproj_thresh, seed, confidence, refine_iters)


def ransac_pnp_arrays(uv, xyz, K, iters=1000, reproj_thresh=4.0, seed=0, confidence=0.999,
                      refine_iters=10) -> PoseEstimate:
    n = len(uv)
    if n < 4:
        raise NoConsensus(f"need at least 4 matches, got {n}")
    R, t = _ransac_arrays(uv, xyz, K, iters, reproj_thresh, seed, confidence)
    if R is None:
        raise NoConsensus("no valid minimal hypothesis")
    hyp = RigidTransform(R, t)

    def errors(p):
        return reprojection_errors(p.rotation, p.translation, xyz, uv, K)

    inl = errors(hyp) < reproj_thresh
    if inl.sum() < 4:
        raise NoConsensus(f"best hypothesis has {int(inl.sum())} inliers")
    candidates = [hyp]
    lin = epnp(xyz[inl], uv[inl], K)
    if lin is not None:
        candidates.append(lin)
    # Cauchy scale from the spread of the consensus residuals, so a near-threshold
    # outlier inside an otherwise tight inlier set has almost no pull
    spread = 1.4826 * float(np.median(errors(hyp)[inl]))
    scale = min(max(spread, 1e-3 * reproj_thresh), reproj_thresh / 4.0)

    def robust(p):
        e = errors(p)[inl]
        return float(np.log1p((e / scale) ** 2).sum()) if np.all(np.isfinite(e)) else np.inf

    start = min(candidates, key=robust)
    final = gauss_newton(start, xyz[inl], uv[inl], K, refine_iters, robust_scale=scale)
    err = errors(final)
    mask = err < reproj_thresh
    k = int(mask.sum())
    if k < 4:
        raise NoConsensus(f"refined pose has {k} inliers")
    rms = float(np.sqrt(np.mean(err[mask] ** 2)))
    return PoseEstimate(final, k, k / n, rms, mask)


# ---------------------------------------------------------------------------
# end to end


@torch.no_grad()
def describe_image(net: BranchNet, image: np.ndarray, k: int = 200, nms_radius: float | None = None,
                   modality: str = "rgb"):
    """Keypoints (top-k then NMS) and descriptors of a query image.

    ``modality`` is ``"rgb"`` for a colour network, ``"gray"`` to feed a depth
    network the luminance of a colour image, or ``"depth"``.
    """
    if modality == "rgb":
        x = rgb_to_input(image)
    elif modality == "gray":
        x = rgb_to_gray_input(image)
    elif modality == "depth":
        x = depth_to_input(image)
    else:
        raise BadInput(f"unknown modality {modality!r}")
    feat = backbone_forward(to_batch(x), net)
    probs = kpn_forward(feat, net)
    stride = net.config.stride
    kps = select_topk(probs[0].double().numpy(), k, stride)
    kps = nms(kps, stride if nms_radius is None else nms_radius)
    desc = extract_descriptors(feat[0], kps, net).double().numpy()
    return kps, desc


def estimate_pose(image: np.ndarray, net: BranchNet, db: DescriptorDatabase, K: CameraIntrinsics, k: int = 200,
                  ratio: float = 0.9, reproj_thresh: float | None = None, iters: int = 1000, seed: int = 0,
                  nms_radius: float | None = None, modality: str = "rgb") -> PoseEstimate:
    """Query image to model->camera pose; the inlier threshold defaults to half a stride cell."""
    kps, desc = describe_image(net, image, k, nms_radius, modality)
    matches = match_descriptors(kps, desc, db, ratio)
    thresh = net.config.stride / 2.0 if reproj_thresh is None else reproj_thresh
    return ransac_pnp(matches, K, iters=iters, reproj_thresh=thresh, seed=seed)
