"""Rigid-body math: weighted alignment, SO(3) metrics, Euler angles, pinhole camera.

Vectors are plain ``(3,)`` float64 arrays and rotations ``(3, 3)`` arrays;
the small dataclasses below bundle them where a pose or a camera travels
as a unit.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import BadInput, BehindCamera, DegenerateConfiguration, InvalidDepth

TWO_PI = 2.0 * math.pi
GIMBAL_TOL = 1e-6
ROTATION_TOL = 1e-6


def _as_points(x, name: str) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if a.ndim != 2 or a.shape[1] != 3:
        raise BadInput(f"{name} must have shape (n, 3), got {a.shape}")
    if not np.all(np.isfinite(a)):
        raise BadInput(f"{name} contains non-finite values")
    return a


def is_rotation(m, tol: float = ROTATION_TOL) -> bool:
    m = np.asarray(m, dtype=np.float64)
    if m.shape != (3, 3) or not np.all(np.isfinite(m)):
        return False
    return bool(np.abs(m.T @ m - np.eye(3)).max() <= tol and abs(np.linalg.det(m) - 1.0) <= tol)


def _check_rotation(m, name: str = "rotation") -> np.ndarray:
    if not is_rotation(m):
        raise BadInput(f"{name} is not a proper rotation matrix")
    return np.asarray(m, dtype=np.float64)


@dataclass(frozen=True)
class RigidTransform:
    """Maps points ``x`` to ``R @ x + t``."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=np.float64).reshape(3, 3))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64).reshape(3))

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, m) -> "RigidTransform":
        m = np.asarray(m, dtype=np.float64)
        return cls(m[:3, :3], m[:3, 3])

    def as_matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def apply(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64)
        return p @ self.rotation.T + self.translation

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """``self ∘ other``: apply ``other`` first."""
        return RigidTransform(self.rotation @ other.rotation, self.rotation @ other.translation + self.translation)

    def inverse(self) -> "RigidTransform":
        rt = self.rotation.T
        return RigidTransform(rt, -rt @ self.translation)

    def __matmul__(self, other: "RigidTransform") -> "RigidTransform":
        return self.compose(other)


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise BadInput("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise BadInput("principal point must lie inside the image")

    @classmethod
    def default(cls, size: int = 128) -> "CameraIntrinsics":
        return cls(fx=float(size), fy=float(size), cx=(size - 1) / 2.0, cy=(size - 1) / 2.0, width=size, height=size)

    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])


@dataclass(frozen=True)
class EulerPose:
    """Azimuth/elevation/in-plane angles in radians.

    ``gimbal_lock`` is set by :func:`rotation_to_euler` when the decomposition
    was not unique; it does not take part in equality.
    """

    azimuth: float
    elevation: float
    in_plane: float
    gimbal_lock: bool = field(default=False, compare=False)

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.azimuth, self.elevation, self.in_plane)


# ---------------------------------------------------------------------------
# weighted rigid alignment


def kabsch_batch(P: np.ndarray, Q: np.ndarray, w: np.ndarray | None = None):
    """Vectorised weighted alignment over a leading batch axis.

    ``P`` and ``Q`` are ``(B, n, 3)``, ``w`` is ``(B, n)``.  Returns
    ``(R, t, singular_values)``; no validation is done here.
    """
    if w is None:
        w = np.ones(P.shape[:2])
    wsum = w.sum(axis=1, keepdims=True)
    wn = (w / wsum)[..., None]
    pc = (wn * P).sum(axis=1)
    qc = (wn * Q).sum(axis=1)
    Pd = P - pc[:, None, :]
    Qd = Q - qc[:, None, :]
    H = np.einsum("bn,bni,bnj->bij", w, Pd, Qd)
    U, S, Vt = np.linalg.svd(H)
    V = np.swapaxes(Vt, 1, 2)
    Ut = np.swapaxes(U, 1, 2)
    d = np.sign(np.linalg.det(V @ Ut))
    d[d == 0] = 1.0
    # flip the least significant singular direction when the fit would be a reflection
    V = V.copy()
    V[:, :, 2] *= d[:, None]
    R = V @ Ut
    t = qc - np.einsum("bij,bj->bi", R, pc)
    return R, t, S


def weighted_kabsch(P, Q, w=None) -> RigidTransform:
    """Closed-form ``argmin_{R,t} sum_i w_i |R p_i + t - q_i|^2`` over SE(3).

    Weights must be non-negative with a positive sum; zero-weight pairs do not
    influence the result.  Raises :class:`DegenerateConfiguration` when the
    weighted points are collinear or coincident.
    """
    P = _as_points(P, "P")
    Q = _as_points(Q, "Q")
    n = P.shape[0]
    w = np.ones(n) if w is None else np.asarray(w, dtype=np.float64).reshape(-1)
    if Q.shape[0] != n or w.shape[0] != n:
        raise BadInput("P, Q and w must have equal length")
    if n < 3:
        raise BadInput("at least 3 correspondences are required")
    if not np.all(np.isfinite(w)):
        raise BadInput("weights contain non-finite values")
    if np.any(w < 0):
        raise BadInput("weights must be non-negative")
    wsum = w.sum()
    if not wsum > 0:
        raise DegenerateConfiguration("sum of weights is zero")
    R, t, S = kabsch_batch(P[None], Q[None], w[None])
    S = S[0]
    scale = max(np.abs(P).max(), np.abs(Q).max(), 1e-300) ** 2 * wsum
    if S[0] <= 1e-14 * scale or S[1] <= 1e-10 * S[0]:
        raise DegenerateConfiguration("weighted point sets are collinear or coincident")
    return RigidTransform(R[0], t[0])


# ---------------------------------------------------------------------------
# rotation metrics


def geodesic_distance(R1, R2) -> float:
    """Angle of the relative rotation ``R1^T R2``, in ``[0, pi]``."""
    R1 = _check_rotation(R1, "R1")
    R2 = _check_rotation(R2, "R2")
    return float(geodesic_distance_batch(R1, R2))


def geodesic_distance_batch(R1: np.ndarray, R2: np.ndarray) -> np.ndarray:
    """Unchecked broadcasting variant for ``(..., 3, 3)`` stacks.

    atan2 of the skew and trace parts keeps full precision near 0 and pi,
    where an arccos of the trace alone loses about half the digits.
    """
    M = np.swapaxes(R1, -1, -2) @ R2
    skew = np.stack([M[..., 2, 1] - M[..., 1, 2], M[..., 0, 2] - M[..., 2, 0], M[..., 1, 0] - M[..., 0, 1]], -1)
    tr = np.trace(M, axis1=-2, axis2=-1)
    return np.arctan2(np.linalg.norm(skew, axis=-1), tr - 1.0)


def euler_angle_distance(a: float, b: float) -> float:
    d = math.fmod(abs(a - b), TWO_PI)
    return min(TWO_PI - d, d)


# ---------------------------------------------------------------------------
# Euler angles.  R = Rz(in_plane) @ Rx(elevation) @ Ry(azimuth): the object is
# spun about its vertical (y) axis, tilted about the camera x axis, then rolled
# about the optical axis.


def rot_x(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rot_y(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rot_z(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def wrap_angle(a: float) -> float:
    a = math.fmod(a, TWO_PI)
    if a < 0:
        a += TWO_PI
    if a >= TWO_PI:
        a = 0.0
    return a


def euler_to_rotation(e: EulerPose) -> np.ndarray:
    return rot_z(e.in_plane) @ rot_x(e.elevation) @ rot_y(e.azimuth)


def rotation_to_euler(R) -> EulerPose:
    R = _check_rotation(R)
    s_el = min(1.0, max(-1.0, R[2, 1]))
    el = math.asin(s_el)
    if abs(abs(el) - math.pi / 2) <= GIMBAL_TOL:
        # azimuth and in-plane share one axis; put everything into azimuth
        az = math.atan2(R[0, 2], R[0, 0])
        return EulerPose(wrap_angle(az), math.copysign(math.pi / 2, el), 0.0, gimbal_lock=True)
    az = math.atan2(-R[2, 0], R[2, 2])
    pl = math.atan2(-R[0, 1], R[1, 1])
    return EulerPose(wrap_angle(az), el, wrap_angle(pl))


# ---------------------------------------------------------------------------
# pinhole camera


def project(p, K: CameraIntrinsics) -> tuple[float, float]:
    p = np.asarray(p, dtype=np.float64).reshape(3)
    if not p[2] > 0:
        raise BehindCamera(f"point has z = {p[2]}")
    return (K.fx * p[0] / p[2] + K.cx, K.fy * p[1] / p[2] + K.cy)


def project_points(P: np.ndarray, K: CameraIntrinsics) -> np.ndarray:
    """Unchecked ``(n, 3) -> (n, 2)`` projection."""
    z = P[..., 2]
    return np.stack([K.fx * P[..., 0] / z + K.cx, K.fy * P[..., 1] / z + K.cy], axis=-1)


def backproject(u: float, v: float, depth: float, K: CameraIntrinsics) -> np.ndarray:
    if not depth > 0:
        raise InvalidDepth(f"depth must be positive, got {depth}")
    return np.array([(u - K.cx) / K.fx * depth, (v - K.cy) / K.fy * depth, float(depth)])


def backproject_points(uv: np.ndarray, depth: np.ndarray, K: CameraIntrinsics) -> np.ndarray:
    uv = np.asarray(uv, dtype=np.float64)
    depth = np.asarray(depth, dtype=np.float64)
    return np.stack([(uv[..., 0] - K.cx) / K.fx * depth, (uv[..., 1] - K.cy) / K.fy * depth, depth], axis=-1)


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Uniformly distributed rotation (Haar measure) via a random unit quaternion."""
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ]
    )
