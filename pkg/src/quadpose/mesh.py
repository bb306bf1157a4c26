"""Triangle meshes: Wavefront OBJ input/output and seeded procedural furniture."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import EmptyMesh, ParseError


@dataclass(frozen=True)
class TriangleMesh:
    vertices: np.ndarray  # (n, 3) float64, model frame
    triangles: np.ndarray  # (m, 3) int64

    @property
    def bounding_radius(self) -> float:
        return float(np.linalg.norm(self.vertices, axis=1).max())

    def corners(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        v = self.vertices
        t = self.triangles
        return v[t[:, 0]], v[t[:, 1]], v[t[:, 2]]

    def face_normals(self) -> np.ndarray:
        a, b, c = self.corners()
        n = np.cross(b - a, c - a)
        return n / np.linalg.norm(n, axis=1, keepdims=True)


def make_mesh(vertices, triangles, recenter: bool = True) -> TriangleMesh:
    """Validate, drop zero-area faces and optionally recentre the bounding box."""
    v = np.asarray(vertices, dtype=np.float64).reshape(-1, 3)
    t = np.asarray(triangles, dtype=np.int64).reshape(-1, 3)
    if len(v) == 0 or len(t) == 0:
        raise EmptyMesh("mesh has no vertices or no faces")
    if t.min() < 0 or t.max() >= len(v):
        raise ParseError("face index out of range")
    if not np.all(np.isfinite(v)):
        raise ParseError("non-finite vertex coordinate")
    if recenter:
        v = v - 0.5 * (v.min(axis=0) + v.max(axis=0))
    a, b, c = v[t[:, 0]], v[t[:, 1]], v[t[:, 2]]
    area2 = np.linalg.norm(np.cross(b - a, c - a), axis=1)
    extent = max(float(np.ptp(v, axis=0).max()), 1e-300)
    t = t[area2 > 1e-12 * extent * extent]
    if len(t) == 0:
        raise EmptyMesh("all faces are degenerate")
    mesh = TriangleMesh(v, t)
    if not mesh.bounding_radius > 0:
        raise EmptyMesh("mesh has zero extent")
    return mesh


def _face_index(token: str, nverts: int, path, lineno: int) -> int:
    head = token.split("/")[0]
    try:
        idx = int(head)
    except ValueError:
        raise ParseError(f"{path}:{lineno}: bad face index {token!r}") from None
    if idx < 0:
        idx = nverts + idx + 1
    if idx < 1 or idx > nverts:
        raise ParseError(f"{path}:{lineno}: face index {token!r} out of range (1..{nverts})")
    return idx - 1


def parse_obj(text: str, path="<string>") -> TriangleMesh:
    verts: list[list[float]] = []
    faces: list[tuple[int, int, int]] = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        tag = parts[0]
        if tag == "v":
            if len(parts) < 4:
                raise ParseError(f"{path}:{lineno}: vertex needs 3 coordinates")
            try:
                verts.append([float(x) for x in parts[1:4]])
            except ValueError:
                raise ParseError(f"{path}:{lineno}: bad vertex {line!r}") from None
        elif tag == "f":
            if len(parts) < 4:
                raise ParseError(f"{path}:{lineno}: face needs at least 3 vertices")
            idx = [_face_index(tok, len(verts), path, lineno) for tok in parts[1:]]
            for k in range(1, len(idx) - 1):
                faces.append((idx[0], idx[k], idx[k + 1]))
    if not verts or not faces:
        raise EmptyMesh(f"{path}: no vertices or faces")
    return make_mesh(verts, faces)


def load_obj(path) -> TriangleMesh:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ParseError(f"cannot read mesh {path}: {exc}") from exc
    return parse_obj(text, path)


def save_obj(mesh: TriangleMesh, path) -> None:
    lines = [f"v {x:.9g} {y:.9g} {z:.9g}" for x, y, z in mesh.vertices]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.triangles]
    Path(path).write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# procedural shapes

# outward-facing (counter-clockwise seen from outside) faces of a unit box
_BOX_FACES = np.array(
    [
        [0, 2, 1], [0, 3, 2],  # z-
        [4, 5, 6], [4, 6, 7],  # z+
        [0, 1, 5], [0, 5, 4],  # y-
        [3, 7, 6], [3, 6, 2],  # y+
        [0, 4, 7], [0, 7, 3],  # x-
        [1, 2, 6], [1, 6, 5],  # x+
    ]
)


def box(lo, hi) -> tuple[np.ndarray, np.ndarray]:
    x0, y0, z0 = lo
    x1, y1, z1 = hi
    v = np.array(
        [
            [x0, y0, z0], [x1, y0, z0], [x1, y1, z0], [x0, y1, z0],
            [x0, y0, z1], [x1, y0, z1], [x1, y1, z1], [x0, y1, z1],
        ],
        dtype=np.float64,
    )
    return v, _BOX_FACES.copy()


def union_of_boxes(boxes) -> TriangleMesh:
    verts, faces = [], []
    offset = 0
    for lo, hi in boxes:
        v, f = box(lo, hi)
        verts.append(v)
        faces.append(f + offset)
        offset += len(v)
    return make_mesh(np.concatenate(verts), np.concatenate(faces))


def unit_cube() -> TriangleMesh:
    return union_of_boxes([((-0.5, -0.5, -0.5), (0.5, 0.5, 0.5))])


def procedural_mesh(seed: int, kind: str | None = None) -> TriangleMesh:
    """Chair- or table-like union of boxes; "up" is the model -y axis.

    Every shape carries an asymmetric part (a chair back, a side drawer) so
    that no non-trivial rotation maps it onto itself.
    """
    rng = np.random.default_rng(seed)
    if kind is None:
        kind = "chair" if rng.random() < 0.5 else "table"
    if kind not in ("chair", "table"):
        raise ValueError(f"unknown shape kind {kind!r}")
    width = rng.uniform(0.4, 0.6)  # x
    depth = rng.uniform(0.35, 0.55)  # z
    leg_h = rng.uniform(0.3, 0.5)
    leg_t = rng.uniform(0.04, 0.07)
    top_t = rng.uniform(0.05, 0.09)
    boxes = []
    hx, hz = width / 2, depth / 2
    # y grows downward: floor at y = 0, seat/top at y = -leg_h
    for sx in (-1, 1):
        for sz in (-1, 1):
            x0 = sx * hx - (leg_t if sx > 0 else 0.0)
            z0 = sz * hz - (leg_t if sz > 0 else 0.0)
            boxes.append(((x0, -leg_h, z0), (x0 + leg_t, 0.0, z0 + leg_t)))
    boxes.append(((-hx, -leg_h - top_t, -hz), (hx, -leg_h, hz)))
    if kind == "chair":
        back_h = rng.uniform(0.35, 0.55)
        back_t = rng.uniform(0.04, 0.07)
        boxes.append(((-hx, -leg_h - top_t - back_h, hz - back_t), (hx, -leg_h - top_t, hz)))
        arm_h = rng.uniform(0.12, 0.2)
        boxes.append(((hx - 0.05, -leg_h - top_t - arm_h, -hz + 0.05), (hx, -leg_h - top_t, hz - back_t)))
    else:
        drawer_w = rng.uniform(0.35, 0.5) * width
        drawer_h = rng.uniform(0.1, 0.2)
        boxes.append(((hx - drawer_w, -leg_h, -hz + leg_t), (hx - leg_t, -leg_h + drawer_h, hz - leg_t)))
        shelf_y = -rng.uniform(0.08, 0.15)
        boxes.append(((-hx + leg_t, shelf_y - 0.03, -hz + leg_t), (0.0, shelf_y, hz - leg_t)))
    return union_of_boxes(boxes)
