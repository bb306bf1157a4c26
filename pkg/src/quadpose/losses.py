"""Training objectives with explicit gradients.

Each loss returns a :class:`LossValue` whose ``grads`` map a site
``(branch, name)`` to the gradient of the loss with respect to that branch
output.  Sites:

``kp_score``   keypoint probabilities of a branch's keypoints, shape ``(n,)``
``scoremap``   the full ``(2, h, w)`` softmax output of the KPN
``desc``       descriptor matrix ``(n, d)`` of a branch's keypoints

All values and gradients are float64.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyKeypointSet, NoTriplet, ShapeMismatch, TooFewCorrespondences
from .geometry import CameraIntrinsics, RigidTransform, backproject_points, weighted_kabsch

EPS = 1e-12
KPN_SITES = frozenset({"kp_score", "scoremap"})
DEFAULT_WEIGHTS = {"triplet": 1.0, "rel_pose": 1.0, "local_l2": 1.0, "consistency": 1.0, "mask": 0.25}


@dataclass
class LossValue:
    value: float
    grads: dict = field(default_factory=dict)

    def scaled(self, k: float) -> "LossValue":
        return LossValue(k * self.value, {site: k * g for site, g in self.grads.items()})


@dataclass(frozen=True)
class Correspondence:
    i_a: int
    i_b: int
    p: np.ndarray  # camera-A frame
    q: np.ndarray  # camera-B frame
    w: float


@dataclass(frozen=True)
class TripletSample:
    anchor: int  # keypoint index in A
    positive: int  # keypoint index in B
    negative: int  # keypoint index in B
    d_pos: float  # metres
    d_neg: float  # metres
    scale: float = 1.0  # object bounding radius, metres

    @property
    def margin(self) -> float:
        return (self.d_neg - self.d_pos) / self.scale


# ---------------------------------------------------------------------------
# lifting and correspondences


def lift_keypoints(keypoints, depth: np.ndarray, K: CameraIntrinsics) -> tuple[np.ndarray, np.ndarray]:
    """Camera-frame 3D points of keypoints and a validity mask (False on no-hit pixels)."""
    uv = np.array([(kp.u, kp.v) for kp in keypoints], dtype=np.float64).reshape(-1, 2)
    cols = np.clip(np.rint(uv[:, 0]).astype(int), 0, depth.shape[1] - 1)
    rows = np.clip(np.rint(uv[:, 1]).astype(int), 0, depth.shape[0] - 1)
    z = depth[rows, cols]
    valid = z > 0
    pts = backproject_points(uv, np.where(valid, z, 1.0), K)
    pts[~valid] = np.nan
    return pts, valid


def relative_transform(pose_a: RigidTransform, pose_b: RigidTransform) -> RigidTransform:
    """Camera-A frame to camera-B frame."""
    return pose_b.compose(pose_a.inverse())


def pairwise_distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.sqrt(((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=2))


def build_correspondences(kp_a, kp_b, depth_a, depth_b, pose_a: RigidTransform, pose_b: RigidTransform,
                          K: CameraIntrinsics, tau: float) -> list[Correspondence]:
    """One-to-one 3D matches between two keypoint sets, greedily by distance.

    Weights are ``s_A + s_B`` from the keypoint scores.
    """
    pa, va = lift_keypoints(kp_a, depth_a, K)
    pb, vb = lift_keypoints(kp_b, depth_b, K)
    ia = np.flatnonzero(va)
    ib = np.flatnonzero(vb)
    out: list[Correspondence] = []
    if len(ia) and len(ib):
        moved = relative_transform(pose_a, pose_b).apply(pa[ia])
        dist = pairwise_distances(moved, pb[ib])
        cand = np.argwhere(dist <= tau)
        order = np.lexsort((cand[:, 1], cand[:, 0], dist[cand[:, 0], cand[:, 1]]))
        used_a, used_b = set(), set()
        for r, c in cand[order]:
            if r in used_a or c in used_b:
                continue
            used_a.add(r)
            used_b.add(c)
            a, b = int(ia[r]), int(ib[c])
            out.append(Correspondence(a, b, pa[a], pb[b], float(kp_a[a].score + kp_b[b].score)))
    if len(out) < 3:
        raise TooFewCorrespondences(f"only {len(out)} correspondences within tau = {tau:.4g}")
    out.sort(key=lambda c: (c.i_a, c.i_b))
    return out


# ---------------------------------------------------------------------------
# relative pose loss


def relative_pose_loss(corrs: list[Correspondence], n_a: int | None = None, n_b: int | None = None,
                       scale: float = 1.0) -> LossValue:
    """``(1/n) sum_i w_i |R p_i + t - q_i|^2`` with ``(R, t)`` the weighted alignment.

    ``scale`` divides all coordinates first (use the object radius to make the
    loss unit-free).  Score gradients are ``g_i / n``.  Because the loss is the
    minimised alignment objective itself, holding ``(R, t)`` fixed gives the
    exact derivative (envelope theorem).
    """
    n = len(corrs)
    if n < 3:
        raise TooFewCorrespondences(f"need at least 3 correspondences, got {n}")
    P = np.array([c.p for c in corrs]) / scale
    Q = np.array([c.q for c in corrs]) / scale
    w = np.array([c.w for c in corrs], dtype=np.float64)
    T = weighted_kabsch(P, Q, w)
    g = ((T.apply(P) - Q) ** 2).sum(axis=1)
    value = float((w * g).sum() / n)
    n_a = (max(c.i_a for c in corrs) + 1) if n_a is None else n_a
    n_b = (max(c.i_b for c in corrs) + 1) if n_b is None else n_b
    ga = np.zeros(n_a)
    gb = np.zeros(n_b)
    np.add.at(ga, [c.i_a for c in corrs], g / n)
    np.add.at(gb, [c.i_b for c in corrs], g / n)
    return LossValue(value, {("A", "kp_score"): ga, ("B", "kp_score"): gb})


# ---------------------------------------------------------------------------
# triplets


def sample_triplets(kp_a, kp_b, depth_a, depth_b, pose_a: RigidTransform, pose_b: RigidTransform,
                    K: CameraIntrinsics, rng: np.random.Generator, d_pos: float, d_neg: float,
                    n: int = 1, scale: float = 1.0) -> list[TripletSample]:
    """Anchors from A; positive is the 3D-nearest B keypoint within ``d_pos``,
    negative a uniformly chosen B keypoint at least ``d_neg`` away."""
    if not d_neg > d_pos:
        raise ValueError("d_neg must exceed d_pos")
    pa, va = lift_keypoints(kp_a, depth_a, K)
    pb, vb = lift_keypoints(kp_b, depth_b, K)
    ia = np.flatnonzero(va)
    ib = np.flatnonzero(vb)
    if not len(ia) or not len(ib):
        raise NoTriplet("no valid keypoints")
    dist = pairwise_distances(relative_transform(pose_a, pose_b).apply(pa[ia]), pb[ib])
    nearest = dist.argmin(axis=1)
    d_near = dist[np.arange(len(ia)), nearest]
    eligible = np.flatnonzero((d_near <= d_pos) & (dist.max(axis=1) >= d_neg))
    if not len(eligible):
        raise NoTriplet(f"no anchor has a positive within {d_pos:.4g} and a negative beyond {d_neg:.4g}")
    out = []
    for r in rng.choice(eligible, size=n):
        negs = np.flatnonzero(dist[r] >= d_neg)
        c = int(rng.choice(negs))
        out.append(TripletSample(int(ia[r]), int(ib[nearest[r]]), int(ib[c]), float(d_near[r]),
                                 float(dist[r, c]), float(scale)))
    return out


def triplet_terms(f_a, f_p, f_n, margin: float):
    """Hinge value and gradients for one triplet."""
    dp = f_a - f_p
    dn = f_a - f_n
    value = float(dp @ dp - dn @ dn + margin)
    if value <= 0.0:
        z = np.zeros_like(f_a)
        return 0.0, z, z, z
    return value, 2.0 * (f_n - f_p), -2.0 * dp, 2.0 * dn


def triplet_loss(t: TripletSample, f_a, f_p, f_n) -> LossValue:
    """``max(0, |f_a - f_p|^2 - |f_a - f_n|^2 + m)`` with ``m = D_n - D_p`` (radius-normalised)."""
    f_a, f_p, f_n = (np.asarray(x, dtype=np.float64) for x in (f_a, f_p, f_n))
    value, ga, gp, gn = triplet_terms(f_a, f_p, f_n, t.margin)
    return LossValue(value, {("A", "f_a"): ga, ("B", "f_p"): gp, ("B", "f_n"): gn})


def triplet_batch_loss(triplets: list[TripletSample], desc_a: np.ndarray, desc_b: np.ndarray) -> LossValue:
    """Mean triplet loss; gradients scattered onto the A and B descriptor matrices."""
    desc_a = np.asarray(desc_a, dtype=np.float64)
    desc_b = np.asarray(desc_b, dtype=np.float64)
    ga = np.zeros_like(desc_a)
    gb = np.zeros_like(desc_b)
    total = 0.0
    n = len(triplets)
    if n == 0:
        raise NoTriplet("empty triplet batch")
    for t in triplets:
        v, g_a, g_p, g_n = triplet_terms(desc_a[t.anchor], desc_b[t.positive], desc_b[t.negative], t.margin)
        total += v
        ga[t.anchor] += g_a / n
        gb[t.positive] += g_p / n
        gb[t.negative] += g_n / n
    return LossValue(total / n, {("A", "desc"): ga, ("B", "desc"): gb})


# ---------------------------------------------------------------------------
# cross-modal terms


def local_l2_loss(f_hat, f) -> LossValue:
    """``(1/k) sum_i |f_hat_i - f_i|`` (unsquared); only ``f_hat`` (branch D) gets gradient."""
    f_hat = np.asarray(f_hat, dtype=np.float64)
    f = np.asarray(f, dtype=np.float64)
    if f_hat.shape != f.shape:
        raise ShapeMismatch(f"descriptor sets differ in shape: {f_hat.shape} vs {f.shape}")
    k = f_hat.shape[0]
    if k == 0:
        raise EmptyKeypointSet("no keypoints to align")
    diff = f_hat - f
    norm = np.linalg.norm(diff, axis=1)
    safe = np.where(norm > 0, norm, 1.0)
    grad = np.where((norm > 0)[:, None], diff / safe[:, None], 0.0) / k
    return LossValue(float(norm.sum() / k), {("D", "desc"): grad})


def consistency_loss(y_c, y_d) -> LossValue:
    """Soft-target cross-entropy ``-(1/n) sum y_C log(y_D + eps)`` over grid locations."""
    y_c = np.asarray(y_c, dtype=np.float64)
    y_d = np.asarray(y_d, dtype=np.float64)
    if y_c.shape != y_d.shape or y_c.ndim != 3 or y_c.shape[0] != 2:
        raise ShapeMismatch(f"score maps must both be (2, h, w): {y_c.shape} vs {y_d.shape}")
    n = y_c.shape[1] * y_c.shape[2]
    value = float(-(y_c * np.log(y_d + EPS)).sum() / n)
    return LossValue(value, {("D", "scoremap"): -y_c / (y_d + EPS) / n})


def entropy_per_location(y) -> float:
    y = np.asarray(y, dtype=np.float64)
    n = y.shape[1] * y.shape[2]
    return float(-(y * np.log(y + EPS)).sum() / n)


def downsample_mask(mask: np.ndarray, stride: int) -> np.ndarray:
    """Majority vote of each ``stride x stride`` cell (ties count as object)."""
    h, w = mask.shape
    if h % stride or w % stride:
        raise ShapeMismatch(f"mask {mask.shape} not divisible by stride {stride}")
    cells = (np.asarray(mask) != 0).reshape(h // stride, stride, w // stride, stride).mean(axis=(1, 3))
    return (cells >= 0.5).astype(np.uint8)


def mask_loss(scoremap, grid_mask, branch: str = "A") -> LossValue:
    """Two-class cross-entropy of the score map against the downsampled object mask."""
    y = np.asarray(scoremap, dtype=np.float64)
    lab = np.asarray(grid_mask).astype(bool)
    if y.ndim != 3 or y.shape[0] != 2 or y.shape[1:] != lab.shape:
        raise ShapeMismatch(f"score map {y.shape} does not match mask {lab.shape}")
    n = lab.size
    picked = np.where(lab, y[1], y[0])
    value = float(-np.log(picked + EPS).sum() / n)
    grad = np.zeros_like(y)
    g = -1.0 / (picked + EPS) / n
    grad[1] = np.where(lab, g, 0.0)
    grad[0] = np.where(lab, 0.0, g)
    return LossValue(value, {(branch, "scoremap"): grad})


def total_loss(parts: dict[str, LossValue], weights: dict[str, float] | None = None) -> LossValue:
    """Weighted sum of named parts; gradients merge additively per site."""
    weights = {**DEFAULT_WEIGHTS, **(weights or {})}
    value = 0.0
    grads: dict = {}
    for name, part in parts.items():
        lam = weights.get(name, 1.0)
        value += lam * part.value
        for site, g in part.grads.items():
            grads[site] = grads[site] + lam * g if site in grads else lam * g
    return LossValue(value, grads)


def is_finite(loss: LossValue) -> bool:
    return math.isfinite(loss.value) and all(np.all(np.isfinite(g)) for g in loss.grads.values())
