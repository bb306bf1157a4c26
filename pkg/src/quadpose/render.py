"""Synthetic aligned modalities: depth, object mask and proxy-RGB by raycasting.

Pixel ``(row v, col u)`` looks along the ray through image point ``(u, v)``
so a pixel index is its own image coordinate.  Depth is camera-frame z of the
nearest hit, 0 where nothing is hit.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import BadInput, NoValidPair
from .geometry import (
    CameraIntrinsics,
    EulerPose,
    RigidTransform,
    euler_to_rotation,
    geodesic_distance_batch,
)
from .mesh import TriangleMesh

DEFAULT_DISTANCE_FACTORS = (2.2, 2.8, 3.4)
PAIR_MIN_ANGLE = math.pi / 12
PAIR_MAX_ANGLE = math.pi / 3


@dataclass(frozen=True)
class ViewSample:
    euler: EulerPose
    distance: float
    pose: RigidTransform  # model -> camera


def view_pose(euler: EulerPose, distance: float) -> RigidTransform:
    """Camera on the viewsphere, object centre on the optical axis."""
    return RigidTransform(euler_to_rotation(euler), np.array([0.0, 0.0, float(distance)]))


def make_view(euler: EulerPose, distance: float) -> ViewSample:
    return ViewSample(euler, float(distance), view_pose(euler, distance))


def default_distances(mesh: TriangleMesh, factors=DEFAULT_DISTANCE_FACTORS) -> list[float]:
    r = mesh.bounding_radius
    return [f * r for f in factors]


def viewsphere_angles(step: float = 15.0) -> tuple[list[float], list[float]]:
    """Azimuths over the full circle and elevations strictly between the poles, in degrees."""
    if not step > 0 or abs(360.0 / step - round(360.0 / step)) > 1e-9:
        raise BadInput(f"step {step} must divide 360")
    n_az = int(round(360.0 / step))
    azimuths = [i * step for i in range(n_az)]
    k_max = int(math.floor(90.0 / step - 1e-9))
    elevations = [k * step for k in range(-k_max, k_max + 1)]
    return azimuths, elevations


def sample_viewsphere(step: float = 15.0, distances=(2.2, 2.8, 3.4), radius: float | None = None) -> list[ViewSample]:
    distances = [float(d) for d in distances]
    if not distances:
        raise BadInput("at least one distance is required")
    limit = 0.0 if radius is None else radius
    if any(not d > limit for d in distances):
        raise BadInput("every distance must exceed the bounding radius")
    azimuths, elevations = viewsphere_angles(step)
    views = []
    for d in distances:
        for el in elevations:
            for az in azimuths:
                views.append(make_view(EulerPose(math.radians(az), math.radians(el), 0.0), d))
    return views


def view_rotations(views) -> np.ndarray:
    return np.stack([v.pose.rotation for v in views])


def sample_training_pair(views, rng: np.random.Generator, lo: float = PAIR_MIN_ANGLE, hi: float = PAIR_MAX_ANGLE,
                         max_attempts: int = 10000, rotations: np.ndarray | None = None) -> tuple[int, int]:
    """Indices ``(a, b)`` of a uniformly drawn pair whose relative rotation lies in ``[lo, hi]``."""
    n = len(views)
    if n < 2:
        raise NoValidPair("need at least two views")
    rots = view_rotations(views) if rotations is None else rotations
    for _ in range(max_attempts):
        a, b = rng.integers(n, size=2)
        if a == b:
            continue
        ang = float(geodesic_distance_batch(rots[a], rots[b]))
        if lo - 1e-9 <= ang <= hi + 1e-9:
            return int(a), int(b)
    raise NoValidPair(f"no pair within [{lo:.4f}, {hi:.4f}] rad after {max_attempts} attempts")


# ---------------------------------------------------------------------------
# raycasting


def ray_directions(K: CameraIntrinsics) -> np.ndarray:
    """``(H, W, 3)`` unnormalised ray directions with unit z."""
    u = np.arange(K.width, dtype=np.float64)
    v = np.arange(K.height, dtype=np.float64)
    uu, vv = np.meshgrid(u, v)
    return np.stack([(uu - K.cx) / K.fx, (vv - K.cy) / K.fy, np.ones_like(uu)], axis=-1)


def _intersect(dirs: np.ndarray, v0, v1, v2) -> np.ndarray:
    """Moller-Trumbore for rays from the origin; returns hit distance along ``dirs`` or inf."""
    e1 = v1 - v0
    e2 = v2 - v0
    pvec = np.cross(dirs, e2)
    det = pvec @ e1
    out = np.full(len(dirs), np.inf)
    ok = np.abs(det) > 1e-14
    if not ok.any():
        return out
    inv = np.zeros_like(det)
    inv[ok] = 1.0 / det[ok]
    tvec = -v0
    bu = (pvec @ tvec) * inv
    qvec = np.cross(tvec, e1)
    bv = (dirs @ qvec) * inv
    t = float(e2 @ qvec) * inv
    hit = ok & (bu >= 0.0) & (bv >= 0.0) & (bu + bv <= 1.0) & (t > 1e-9)
    out[hit] = t[hit]
    return out


def raycast(mesh: TriangleMesh, pose: RigidTransform, K: CameraIntrinsics) -> tuple[np.ndarray, np.ndarray]:
    """Per-pixel nearest hit: ``(depth, face_index)`` with 0 / -1 for misses."""
    H, W = K.height, K.width
    dirs = ray_directions(K)
    zbuf = np.full((H, W), np.inf)
    face = np.full((H, W), -1, dtype=np.int64)
    verts = pose.apply(mesh.vertices)
    tris = verts[mesh.triangles]
    for fi, (v0, v1, v2) in enumerate(tris):
        z = np.array([v0[2], v1[2], v2[2]])
        if np.all(z <= 1e-9):
            continue
        if np.all(z > 1e-9):
            uv = np.stack([K.fx * tris[fi, :, 0] / z + K.cx, K.fy * tris[fi, :, 1] / z + K.cy], axis=1)
            u0 = max(int(math.floor(uv[:, 0].min())), 0)
            u1 = min(int(math.ceil(uv[:, 0].max())), W - 1)
            r0 = max(int(math.floor(uv[:, 1].min())), 0)
            r1 = min(int(math.ceil(uv[:, 1].max())), H - 1)
            if u0 > u1 or r0 > r1:
                continue
        else:
            u0, u1, r0, r1 = 0, W - 1, 0, H - 1
        sub = dirs[r0:r1 + 1, u0:u1 + 1].reshape(-1, 3)
        t = _intersect(sub, v0, v1, v2).reshape(r1 - r0 + 1, u1 - u0 + 1)
        zb = zbuf[r0:r1 + 1, u0:u1 + 1]
        closer = t < zb
        zb[closer] = t[closer]
        face[r0:r1 + 1, u0:u1 + 1][closer] = fi
    depth = np.where(np.isfinite(zbuf), zbuf, 0.0)
    return depth, face


def render_depth(mesh: TriangleMesh, pose: RigidTransform, K: CameraIntrinsics) -> np.ndarray:
    return raycast(mesh, pose, K)[0]


def mask_from_depth(depth: np.ndarray) -> np.ndarray:
    return (depth > 0).astype(np.uint8)


def render_mask(mesh: TriangleMesh, pose: RigidTransform, K: CameraIntrinsics) -> np.ndarray:
    return mask_from_depth(render_depth(mesh, pose, K))


# directions towards the lights, camera frame (x right, y down, z forward)
HEAD_ON_LIGHT = np.array([0.0, 0.0, -1.0])
SIDE_LIGHT = np.array([-0.5, -0.7, -0.5]) / np.linalg.norm([-0.5, -0.7, -0.5])
DEFAULT_LIGHTS = ((HEAD_ON_LIGHT, 0.55), (SIDE_LIGHT, 0.35))
AMBIENT = 0.1


def lambert_shade(normals: np.ndarray, lights=DEFAULT_LIGHTS, ambient: float = AMBIENT) -> np.ndarray:
    """Cosine-law shading for camera-frame unit normals ``(..., 3)``, clipped to [0, 1]."""
    s = np.full(normals.shape[:-1], float(ambient))
    for direction, weight in lights:
        s = s + weight * np.clip(normals @ np.asarray(direction, dtype=np.float64), 0.0, None)
    return np.clip(s, 0.0, 1.0)


def shade_faces(mesh: TriangleMesh, pose: RigidTransform, face: np.ndarray, K: CameraIntrinsics,
                background: float = 0.0, lights=DEFAULT_LIGHTS) -> np.ndarray:
    H, W = face.shape
    rgb = np.full((H, W, 3), float(background))
    hit = face >= 0
    if not hit.any():
        return rgb
    n_model = mesh.face_normals()[face[hit]]
    n_cam = n_model @ pose.rotation.T
    dirs = ray_directions(K)[hit]
    # faces seen from behind are lit and coloured as their flipped side
    flip = np.sign(np.einsum("ij,ij->i", n_cam, dirs))
    flip[flip == 0] = 1.0
    n_cam = -flip[:, None] * n_cam
    n_model = -flip[:, None] * n_model
    shade = lambert_shade(n_cam, lights)
    colour = 0.5 * shade[:, None] + 0.5 * (n_model + 1.0) / 2.0
    rgb[hit] = np.clip(colour, 0.0, 1.0)
    return rgb


def render_proxy_rgb(mesh: TriangleMesh, pose: RigidTransform, K: CameraIntrinsics, background: float = 0.0,
                     lights=DEFAULT_LIGHTS) -> np.ndarray:
    _, face = raycast(mesh, pose, K)
    return shade_faces(mesh, pose, face, K, background, lights)


@dataclass(frozen=True)
class Render:
    depth: np.ndarray
    mask: np.ndarray
    rgb: np.ndarray
    face: np.ndarray


def render_all(mesh: TriangleMesh, pose: RigidTransform, K: CameraIntrinsics, background: float = 0.0) -> Render:
    """All three modalities from a single raycast."""
    depth, face = raycast(mesh, pose, K)
    return Render(depth, mask_from_depth(depth), shade_faces(mesh, pose, face, K, background), face)


# ---------------------------------------------------------------------------
# depth noise


@dataclass(frozen=True)
class DepthNoise:
    sigma_scale: float = 0.0  # std = sigma_scale * depth**2
    edge_dropout: float = 0.0  # probability of zeroing a discontinuity pixel
    edge_threshold: float = 0.05  # metres between 4-neighbours
    random_dropout: float = 0.0  # probability of zeroing any hit pixel

    def __post_init__(self):
        for name in ("sigma_scale", "edge_dropout", "edge_threshold", "random_dropout"):
            if getattr(self, name) < 0:
                raise BadInput(f"{name} must be non-negative")
        if self.edge_dropout > 1 or self.random_dropout > 1:
            raise BadInput("dropout probabilities must be at most 1")

    @property
    def is_identity(self) -> bool:
        return self.sigma_scale == 0 and self.edge_dropout == 0 and self.random_dropout == 0


def discontinuity_mask(depth: np.ndarray, threshold: float) -> np.ndarray:
    """Hit pixels with a 4-neighbour that is a miss or differs by more than ``threshold``."""
    hit = depth > 0
    edge = np.zeros_like(hit)
    for axis in (0, 1):
        diff = np.abs(np.diff(depth, axis=axis))
        miss = np.diff(hit.astype(np.int8), axis=axis) != 0
        jump = (diff > threshold) | miss
        lo = [slice(None)] * 2
        hi = [slice(None)] * 2
        lo[axis] = slice(0, -1)
        hi[axis] = slice(1, None)
        edge[tuple(lo)] |= jump
        edge[tuple(hi)] |= jump
    return edge & hit


def apply_depth_noise(depth: np.ndarray, params: DepthNoise, rng: np.random.Generator) -> np.ndarray:
    out = np.array(depth, dtype=np.float64, copy=True)
    if params.is_identity:
        return out
    hit = out > 0
    edges = discontinuity_mask(out, params.edge_threshold)
    if params.sigma_scale > 0:
        noise = rng.normal(size=out.shape) * (params.sigma_scale * out * out)
        out[hit] += noise[hit]
    if params.edge_dropout > 0:
        out[edges & (rng.random(out.shape) < params.edge_dropout)] = 0.0
    if params.random_dropout > 0:
        out[hit & (rng.random(out.shape) < params.random_dropout)] = 0.0
    return np.clip(out, 0.0, None)
