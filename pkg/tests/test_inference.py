import math

import numpy as np
import pytest

from quadpose.errors import DegenerateSample, NoConsensus
from quadpose.geometry import CameraIntrinsics, geodesic_distance, project_points, random_rotation
from quadpose.inference import (
    DescriptorDatabase,
    Match2D3D,
    build_database,
    database_views,
    describe_depth,
    estimate_pose,
    match_descriptors,
    pnp_minimal,
    ransac_pnp,
)
from quadpose.losses import lift_keypoints
from quadpose.mesh import procedural_mesh
from quadpose.network import BackboneConfig, BranchNet, Keypoint
from quadpose.render import raycast

K = CameraIntrinsics.default(128)
TETRA = np.array([[1, 1, 1], [1, -1, -1], [-1, 1, -1], [-1, -1, 1]]) / math.sqrt(3)


def synth(rng, n, spread=0.5, dist=2.5):
    R = random_rotation(rng)
    t = np.array([0.0, 0.0, dist]) + rng.normal(scale=0.05, size=3)
    X = rng.uniform(-spread, spread, size=(n, 3))
    uv = project_points(X @ R.T + t, K)
    return R, t, X, uv


def to_matches(uv, X):
    return [Match2D3D(float(u), float(v), x, 0.0) for (u, v), x in zip(uv, X)]


# matching --------------------------------------------------------------------

def make_db(rng, n=40, d=16):
    desc = rng.normal(size=(n, d))
    desc /= np.linalg.norm(desc, axis=1, keepdims=True)
    return DescriptorDatabase(desc.astype(np.float32), rng.normal(size=(n, 3)), np.arange(n) % 5)


def brute_force_matches(kps, q, db, ratio):
    out = []
    ref = db.descriptors.astype(np.float64)
    for kp, f in zip(kps, q):
        dists = [math.sqrt(sum((a - b) ** 2 for a, b in zip(f, g))) for g in ref]
        order = sorted(range(len(dists)), key=lambda j: (dists[j], j))
        d1, d2 = dists[order[0]], dists[order[1]]
        if ratio >= 1.0 or d1 < ratio * d2:
            out.append((kp.u, kp.v, order[0]))
    return out


def test_match_identical_descriptor(rng):
    db = make_db(rng)
    kp = [Keypoint(0, 0, 8.0, 8.0)]
    (m,) = match_descriptors(kp, db.descriptors[7:8].astype(np.float64), db, 0.9)
    assert np.array_equal(m.point, db.points[7])
    assert m.distance == pytest.approx(0.0, abs=1e-6)


@pytest.mark.parametrize("ratio", [0.7, 0.9, 1.0])
def test_match_equals_brute_force(rng, ratio):
    db = make_db(rng)
    q = rng.normal(size=(25, 16))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    kps = [Keypoint(i, 0, 16.0 * i + 8, 8.0) for i in range(25)]
    got = [(m.u, m.v, int(np.flatnonzero((db.points == m.point).all(1))[0])) for m in
           match_descriptors(kps, q, db, ratio)]
    assert got == brute_force_matches(kps, q, db, ratio)
    if ratio == 1.0:
        assert len(got) == 25


def test_match_empty():
    db = make_db(np.random.default_rng(0))
    assert match_descriptors([], np.zeros((0, 16)), db) == []


# minimal solver --------------------------------------------------------------

def test_pnp_minimal_exact(rng):
    for _ in range(100):
        R, t, X, uv = synth(rng, 4)
        cands = pnp_minimal(to_matches(uv, X), K)
        assert cands
        assert geodesic_distance(cands[0].rotation, R) < 1e-6
        assert np.abs(cands[0].translation - t).max() < 1e-6


def test_pnp_minimal_collinear():
    X = np.array([[0.0, 0, 0], [0.1, 0.1, 0.1], [0.2, 0.2, 0.2], [0.3, -0.1, 0.0]])
    uv = project_points(X + [0, 0, 2.5], K)
    with pytest.raises(DegenerateSample):
        pnp_minimal(to_matches(uv, X), K)


def test_pnp_minimal_noise(rng):
    errs = []
    for _ in range(200):
        R = random_rotation(rng)
        t = np.array([0.0, 0.0, 2.5])
        X = TETRA + rng.normal(scale=0.03, size=(4, 3))
        uv = project_points(X @ R.T + t, K) + rng.normal(scale=0.5, size=(4, 2))
        cands = pnp_minimal(to_matches(uv, X), K)
        errs.append(geodesic_distance(cands[0].rotation, R))
    assert max(errs) < 0.05


def test_pnp_candidates_in_front(rng):
    for _ in range(50):
        R, t, X, uv = synth(rng, 4)
        for c in pnp_minimal(to_matches(uv, X), K):
            assert np.all(c.apply(X)[:, 2] > 0)


# RANSAC ----------------------------------------------------------------------

def test_ransac_all_exact(rng):
    R, t, X, uv = synth(rng, 100)
    est = ransac_pnp(to_matches(uv, X), K, seed=1)
    assert geodesic_distance(est.pose.rotation, R) < 1e-6
    assert est.inliers == 100
    assert est.inlier_ratio == 1.0


def test_ransac_half_outliers(rng):
    fails = 0
    for trial in range(30):
        R, t, X, uv = synth(rng, 50)
        Xo = rng.uniform(-0.5, 0.5, size=(50, 3))
        uvo = rng.uniform(0, 128, size=(50, 2))
        est = ransac_pnp(to_matches(np.vstack([uv, uvo]), np.vstack([X, Xo])), K, seed=trial)
        if not (geodesic_distance(est.pose.rotation, R) < 1e-3 and est.inliers >= 50):
            fails += 1
    assert fails == 0


def test_ransac_too_few():
    X = TETRA[:3]
    with pytest.raises(NoConsensus):
        ransac_pnp(to_matches(project_points(X + [0, 0, 2.5], K), X), K)


def test_ransac_rms_below_threshold(rng):
    for trial in range(20):
        R, t, X, uv = synth(rng, 60)
        uv = uv + rng.normal(scale=1.0, size=uv.shape)
        est = ransac_pnp(to_matches(uv, X), K, reproj_thresh=4.0, seed=trial)
        assert 0 <= est.rms < 4.0
        assert est.inliers <= 60


def test_ransac_deterministic(rng):
    R, t, X, uv = synth(rng, 60)
    uv[:20] = rng.uniform(0, 128, size=(20, 2))
    m = to_matches(uv, X)
    a, b = ransac_pnp(m, K, seed=3), ransac_pnp(m, K, seed=3)
    assert np.array_equal(a.pose.as_matrix(), b.pose.as_matrix()) and a.inliers == b.inliers


def test_ransac_monotone_in_appended_inliers(rng):
    for trial in range(10):
        R, t, X, uv = synth(rng, 80)
        uv[:30] = rng.uniform(0, 128, size=(30, 2))  # 30 outliers, 50 inliers
        base = ransac_pnp(to_matches(uv[:60], X[:60]), K, seed=trial)
        grown = ransac_pnp(to_matches(uv, X), K, seed=trial)
        assert grown.inliers >= base.inliers


# database and end to end -----------------------------------------------------

@pytest.fixture(scope="module")
def small_db():
    mesh = procedural_mesh(0)
    net = BranchNet(BackboneConfig(), 1, seed=0)
    return mesh, net, build_database(mesh, net, K, 20, 100, instance_id="procedural:0")


def test_database_structure(small_db):
    mesh, net, db = small_db
    assert 0 < len(db) <= 20 * 100
    assert db.descriptors.shape[1] == net.config.descriptor_dim
    assert np.allclose(np.linalg.norm(db.descriptors, axis=1), 1.0, atol=1e-6)
    assert set(np.unique(db.view_ids)) <= set(range(20))
    assert db.manifest["k"] == 100 and len(db.manifest["views"]) == 20


def test_database_lifting_consistency(small_db):
    mesh, net, db = small_db
    views = database_views(mesh, 20)
    for vid, view in enumerate(views):
        depth, face = raycast(mesh, view.pose, K)
        kps, _ = describe_depth(net, depth, 100)
        _, valid = lift_keypoints(kps, depth, K)
        kept = [kp for kp, ok in zip(kps, valid) if ok]
        pts = db.points[db.view_ids == vid]
        assert len(pts) == len(kept)
        uv = project_points(view.pose.apply(pts), K)
        for (u, v), kp, p in zip(uv, kept, pts):
            assert math.hypot(u - kp.u, v - kp.v) <= net.config.stride
            # the point lies on the face hit at its pixel
            col, row = int(round(kp.u)), int(round(kp.v))
            f = face[row, col]
            a, b, c = (x[f] for x in mesh.corners())
            n = np.cross(b - a, c - a)
            n /= np.linalg.norm(n)
            assert abs(np.dot(p - a, n)) < 1e-6


def test_database_bytes_deterministic(tmp_path, small_db):
    mesh, net, db = small_db
    again = build_database(mesh, net, K, 20, 100, instance_id="procedural:0")
    db.save(tmp_path / "a.qpd")
    again.save(tmp_path / "b.qpd")
    assert (tmp_path / "a.qpd").read_bytes() == (tmp_path / "b.qpd").read_bytes()
    assert (tmp_path / "a.qpd.json").read_bytes() == (tmp_path / "b.qpd.json").read_bytes()
    back = DescriptorDatabase.load(tmp_path / "a.qpd")
    assert back.instance_id == "procedural:0"
    back.save(tmp_path / "c.qpd")
    assert (tmp_path / "c.qpd").read_bytes() == (tmp_path / "a.qpd").read_bytes()


def test_database_views_spread():
    views = database_views(procedural_mesh(0), 20)
    rots = [v.pose.rotation for v in views]
    assert len(views) == 20
    assert min(geodesic_distance(a, b) for i, a in enumerate(rots) for b in rots[i + 1:]) > 0.3


def test_background_only_query_no_consensus(small_db):
    mesh, net, db = small_db
    net_d = BranchNet(BackboneConfig(), 3, seed=1)
    with pytest.raises(NoConsensus):
        estimate_pose(np.zeros((128, 128, 3)), net_d, db, K)


def test_estimate_deterministic_on_db_view(small_db):
    mesh, net, db = small_db
    view = database_views(mesh, 20)[3]
    from quadpose.render import render_depth
    depth = render_depth(mesh, view.pose, K)
    outcome = []
    for _ in range(2):
        try:
            est = estimate_pose(depth, net, db, K, seed=5, modality="depth", ratio=1.0)
            outcome.append((est.pose.as_matrix().tobytes(), est.inliers, est.rms))
        except NoConsensus as exc:
            outcome.append(str(exc))
    assert outcome[0] == outcome[1]
