import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from quadpose.errors import EmptyKeypointSet, NoTriplet, ShapeMismatch, TooFewCorrespondences
from quadpose.geometry import CameraIntrinsics, EulerPose
from quadpose.losses import (
    KPN_SITES,
    Correspondence,
    LossValue,
    TripletSample,
    build_correspondences,
    consistency_loss,
    downsample_mask,
    entropy_per_location,
    lift_keypoints,
    local_l2_loss,
    mask_loss,
    relative_pose_loss,
    relative_transform,
    sample_triplets,
    total_loss,
    triplet_batch_loss,
    triplet_loss,
)
from quadpose.mesh import unit_cube
from quadpose.network import grid_keypoints
from quadpose.render import make_view, render_depth

from oracles import random_rigid, weighted_residual_loss

K = CameraIntrinsics.default(128)
CUBE = unit_cube()
DIST = 2.8 * CUBE.bounding_radius


def cube_view(az_deg, el_deg=20.0):
    v = make_view(EulerPose(math.radians(az_deg), math.radians(el_deg), 0.0), DIST)
    return v.pose, render_depth(CUBE, v.pose, K)


def keypoints(rng, stride=8):
    n = 128 // stride
    return grid_keypoints(n, n, stride, rng.uniform(0.05, 1.0, (n, n)))


def fd(f, x, h=1e-6):
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (f(xp) - f(xm)) / (2 * h)
    return g


def rel_err(a, b):
    return np.abs(a - b).max() / max(np.abs(b).max(), 1e-8)


# correspondences -----------------------------------------------------------

def test_identical_views_match_themselves(rng):
    pose, depth = cube_view(30)
    kps = keypoints(rng)
    corrs = build_correspondences(kps, kps, depth, depth, pose, pose, K, tau=0.05)
    _, valid = lift_keypoints(kps, depth, K)
    assert len(corrs) == valid.sum()
    for c in corrs:
        assert c.i_a == c.i_b
        assert np.abs(c.p - c.q).max() < 1e-12
        assert c.w == pytest.approx(kps[c.i_a].score * 2)


def test_disjoint_surfaces_too_few(rng):
    pose, depth = cube_view(0)
    empty = np.zeros_like(depth)
    with pytest.raises(TooFewCorrespondences):
        build_correspondences(keypoints(rng), keypoints(rng), depth, empty, pose, pose, K, tau=0.1)
    # opposite sides of the cube share no surface points within a small tau
    pose_b, depth_b = cube_view(180, -20)
    with pytest.raises(TooFewCorrespondences):
        build_correspondences(keypoints(rng), keypoints(rng), depth, depth_b, pose, pose_b, K, tau=0.01)


def test_fifteen_degree_cube_brute_force(rng):
    pose_a, depth_a = cube_view(10)
    pose_b, depth_b = cube_view(25)
    ka, kb = keypoints(rng), keypoints(rng)
    tau = 0.08
    corrs = build_correspondences(ka, kb, depth_a, depth_b, pose_a, pose_b, K, tau)
    T = relative_transform(pose_a, pose_b)
    pa, va = lift_keypoints(ka, depth_a, K)
    pb, vb = lift_keypoints(kb, depth_b, K)
    # every pair within tau, one-to-one, and on valid pixels
    assert len({c.i_a for c in corrs}) == len(corrs) == len({c.i_b for c in corrs})
    for c in corrs:
        assert va[c.i_a] and vb[c.i_b]
        assert np.linalg.norm(T.apply(c.p) - c.q) <= tau
    # greedy-by-distance oracle with explicit loops
    cands = []
    for i in range(len(ka)):
        for j in range(len(kb)):
            if va[i] and vb[j]:
                d = float(np.linalg.norm(T.apply(pa[i]) - pb[j]))
                if d <= tau:
                    cands.append((d, i, j))
    cands.sort()
    used_a, used_b, want = set(), set(), []
    for _, i, j in cands:
        if i not in used_a and j not in used_b:
            used_a.add(i)
            used_b.add(j)
            want.append((i, j))
    assert sorted(want) == [(c.i_a, c.i_b) for c in corrs]


# relative pose loss ----------------------------------------------------------

def exact_corrs(rng, n, scores_a=None, scores_b=None):
    R, t = random_rigid(rng)
    P = rng.normal(size=(n, 3))
    Q = P @ R.T + t
    sa = rng.uniform(0, 1, n) if scores_a is None else scores_a
    sb = rng.uniform(0, 1, n) if scores_b is None else scores_b
    return [Correspondence(i, i, P[i], Q[i], float(sa[i] + sb[i])) for i in range(n)]


def test_zero_residual_any_scores(rng):
    for _ in range(100):
        corrs = exact_corrs(rng, int(rng.integers(3, 30)))
        loss = relative_pose_loss(corrs)
        assert abs(loss.value) < 1e-9
        for g in loss.grads.values():
            assert np.abs(g).max() < 1e-9


def test_corrupted_correspondence_has_largest_gradient(rng):
    corrs = exact_corrs(rng, 10)
    bad = corrs[4]
    corrs[4] = Correspondence(bad.i_a, bad.i_b, bad.p, bad.q + np.array([0.5, -0.3, 0.2]), bad.w)
    loss = relative_pose_loss(corrs)
    ga = loss.grads[("A", "kp_score")]
    assert np.argmax(ga) == 4
    assert ga[4] > np.delete(ga, 4).max()


def test_rel_pose_matches_oracle(rng):
    for _ in range(50):
        n = int(rng.integers(3, 7))
        corrs = exact_corrs(rng, n)
        corrs = [Correspondence(c.i_a, c.i_b, c.p, c.q + rng.normal(scale=0.2, size=3), c.w) for c in corrs]
        P = np.array([c.p for c in corrs])
        Q = np.array([c.q for c in corrs])
        w = np.array([c.w for c in corrs])
        assert abs(relative_pose_loss(corrs).value - weighted_residual_loss(P, Q, w)) < 1e-6


def test_rel_pose_gradient_is_residual_over_n_and_matches_fd(rng):
    corrs = exact_corrs(rng, 8)
    corrs = [Correspondence(c.i_a, c.i_b, c.p, c.q + rng.normal(scale=0.3, size=3), c.w) for c in corrs]
    loss = relative_pose_loss(corrs)
    P = np.array([c.p for c in corrs])
    Q = np.array([c.q for c in corrs])
    w = np.array([c.w for c in corrs])
    # residuals under the fixed solve
    from quadpose.geometry import weighted_kabsch
    T = weighted_kabsch(P, Q, w)
    g = ((T.apply(P) - Q) ** 2).sum(1)
    assert np.array_equal(loss.grads[("A", "kp_score")], g / 8)
    assert np.array_equal(loss.grads[("B", "kp_score")], g / 8)
    # the fixed-(R, t) rule is also the true derivative of the minimised objective
    numeric = fd(lambda ww: weighted_residual_loss(P, Q, ww), w)
    assert rel_err(g / 8, numeric) < 1e-5


def test_rel_pose_needs_three():
    with pytest.raises(TooFewCorrespondences):
        relative_pose_loss(exact_corrs(np.random.default_rng(0), 2))


# triplets --------------------------------------------------------------------

def test_identical_views_zero_positive_distance(rng):
    pose, depth = cube_view(30)
    kps = keypoints(rng)
    ts = sample_triplets(kps, kps, depth, depth, pose, pose, K, rng, d_pos=0.1, d_neg=0.3, n=200)
    assert all(t.d_pos < 1e-12 and t.positive == t.anchor for t in ts)


def test_negative_beyond_diameter_no_triplet(rng):
    pose, depth = cube_view(30)
    kps = keypoints(rng)
    with pytest.raises(NoTriplet):
        sample_triplets(kps, kps, depth, depth, pose, pose, K, rng, d_pos=0.1, d_neg=2 * CUBE.bounding_radius + 0.01)


def test_triplet_distance_ordering_10k(rng):
    pose_a, depth_a = cube_view(10)
    pose_b, depth_b = cube_view(35, 5)
    ka, kb = keypoints(rng), keypoints(rng)
    d_pos, d_neg = 0.1, 0.3
    ts = sample_triplets(ka, kb, depth_a, depth_b, pose_a, pose_b, K, rng, d_pos, d_neg, n=10_000)
    pa, _ = lift_keypoints(ka, depth_a, K)
    pb, _ = lift_keypoints(kb, depth_b, K)
    T = relative_transform(pose_a, pose_b)
    for t in ts:
        assert t.d_neg >= d_neg > d_pos >= t.d_pos
        assert np.linalg.norm(T.apply(pa[t.anchor]) - pb[t.negative]) == pytest.approx(t.d_neg)
    # anchors cover more than one keypoint
    assert len({t.anchor for t in ts}) > 10


def unit(rng, d=16):
    x = rng.normal(size=d)
    return x / np.linalg.norm(x)


def test_triplet_loss_examples(rng):
    fa, fn = unit(rng), unit(rng)
    t = TripletSample(0, 0, 0, d_pos=0.1, d_neg=0.3)
    m = t.margin
    assert m == pytest.approx(0.2)
    far = -fa
    assert triplet_loss(t, fa, fa, far).value == 0.0
    assert triplet_loss(t, fa, fn, fn).value == pytest.approx(m)
    scaled = TripletSample(0, 0, 0, 0.1, 0.3, scale=0.5)
    assert scaled.margin == pytest.approx(0.4)


def test_triplet_gradient_fd(rng):
    fa, fp, fn = unit(rng), unit(rng), unit(rng)
    t = TripletSample(0, 0, 0, 0.0, 1.5)
    loss = triplet_loss(t, fa, fp, fn)
    assert loss.value > 0
    x = np.concatenate([fa, fp, fn])
    num = fd(lambda z: triplet_loss(t, z[:16], z[16:32], z[32:]).value, x)
    ana = np.concatenate([loss.grads[("A", "f_a")], loss.grads[("B", "f_p")], loss.grads[("B", "f_n")]])
    assert rel_err(ana, num) < 1e-5
    assert not any(site[1] in KPN_SITES for site in loss.grads)


def test_triplet_batch_routes_to_descriptors_only(rng):
    da, db = rng.normal(size=(5, 8)), rng.normal(size=(5, 8))
    ts = [TripletSample(i, (i + 1) % 5, (i + 2) % 5, 0.0, 1.0) for i in range(5)]
    loss = triplet_batch_loss(ts, da, db)
    assert set(loss.grads) == {("A", "desc"), ("B", "desc")}
    num = fd(lambda z: triplet_batch_loss(ts, z, db).value, da)
    assert rel_err(loss.grads[("A", "desc")], num) < 1e-5
    with pytest.raises(NoTriplet):
        triplet_batch_loss([], da, db)


# local l2 --------------------------------------------------------------------

def test_local_l2_examples(rng):
    f = rng.normal(size=(6, 8))
    zero = local_l2_loss(f, f)
    assert zero.value == 0.0
    assert not zero.grads[("D", "desc")].any()
    one = local_l2_loss(np.array([[0.5, 0.0]]), np.array([[0.0, 0.0]]))
    assert one.value == pytest.approx(0.5)
    with pytest.raises(EmptyKeypointSet):
        local_l2_loss(np.zeros((0, 4)), np.zeros((0, 4)))
    with pytest.raises(ShapeMismatch):
        local_l2_loss(np.zeros((2, 4)), np.zeros((3, 4)))


def test_local_l2_gradient_fd_and_routing(rng):
    fh, f = rng.normal(size=(6, 8)), rng.normal(size=(6, 8))
    loss = local_l2_loss(fh, f)
    assert set(loss.grads) == {("D", "desc")}
    num = fd(lambda z: local_l2_loss(z, f).value, fh)
    assert rel_err(loss.grads[("D", "desc")], num) < 1e-5


# consistency -----------------------------------------------------------------

def softmax2(rng, shape=(4, 5), scale=2.0):
    z = rng.normal(scale=scale, size=(2,) + shape)
    e = np.exp(z - z.max(0))
    return e / e.sum(0)


def test_consistency_examples(rng):
    onehot = np.zeros((2, 3, 3))
    onehot[1] = 1.0
    assert consistency_loss(onehot, onehot).value < 1e-9
    uni = np.full((2, 3, 3), 0.5)
    assert consistency_loss(uni, uni).value == pytest.approx(math.log(2), abs=1e-9)
    with pytest.raises(ShapeMismatch):
        consistency_loss(uni, np.full((2, 3, 4), 0.5))


@given(st.integers(0, 2**31))
def test_consistency_gibbs_and_self_entropy(seed):
    rng = np.random.default_rng(seed)
    yc, yd = softmax2(rng), softmax2(rng)
    assert consistency_loss(yc, yd).value >= entropy_per_location(yc) - 1e-9
    assert abs(consistency_loss(yc, yc).value - entropy_per_location(yc)) < 1e-6


def test_consistency_gradient_fd_and_routing(rng):
    yc, yd = softmax2(rng), softmax2(rng)
    loss = consistency_loss(yc, yd)
    assert set(loss.grads) == {("D", "scoremap")}
    num = fd(lambda z: consistency_loss(yc, z).value, yd)
    assert rel_err(loss.grads[("D", "scoremap")], num) < 1e-5


# mask ------------------------------------------------------------------------

def test_mask_examples():
    lab = np.array([[1, 0], [0, 1]])
    perfect = np.stack([1 - lab, lab]).astype(float)
    assert mask_loss(perfect, lab).value < 1e-9
    uni = np.full((2, 2, 2), 0.5)
    assert mask_loss(uni, lab).value == pytest.approx(math.log(2))
    with pytest.raises(ShapeMismatch):
        mask_loss(uni, np.zeros((3, 3)))


def test_mask_gradient_fd_and_routing(rng):
    y = softmax2(rng)
    lab = rng.random((4, 5)) > 0.5
    for branch in ("A", "B"):
        loss = mask_loss(y, lab, branch)
        assert set(loss.grads) == {(branch, "scoremap")}
    num = fd(lambda z: mask_loss(z, lab).value, y)
    assert rel_err(mask_loss(y, lab).grads[("A", "scoremap")], num) < 1e-5


def test_downsample_mask_majority():
    m = np.zeros((4, 4), dtype=np.uint8)
    m[:2, :2] = [[1, 1], [1, 0]]
    m[2:, 2:] = [[1, 0], [0, 0]]
    assert downsample_mask(m, 2).tolist() == [[1, 0], [0, 0]]
    with pytest.raises(ShapeMismatch):
        downsample_mask(np.zeros((5, 4)), 2)


# total -----------------------------------------------------------------------

def test_total_examples(rng):
    zero = {name: LossValue(0.0, {}) for name in ("triplet", "rel_pose", "local_l2", "consistency", "mask")}
    assert total_loss(zero).value == 0.0
    g = rng.normal(size=4)
    part = LossValue(1.7, {("D", "desc"): g})
    single = total_loss({"local_l2": part})
    assert single.value == 1.7 and np.array_equal(single.grads[("D", "desc")], g)
    base = total_loss({"rel_pose": part, "mask": LossValue(0.4, {("D", "desc"): g})})
    doubled = total_loss({"rel_pose": part, "mask": LossValue(0.4, {("D", "desc"): g})}, {"rel_pose": 2.0})
    assert np.allclose(doubled.grads[("D", "desc")] - base.grads[("D", "desc")], g, atol=0)
    assert base.value == pytest.approx(1.7 + 0.25 * 0.4)


def test_losses_nonnegative(rng):
    for _ in range(20):
        yc, yd = softmax2(rng), softmax2(rng)
        assert consistency_loss(yc, yd).value >= 0
        assert mask_loss(yd, rng.random((4, 5)) > 0.5).value >= 0
        assert local_l2_loss(rng.normal(size=(3, 4)), rng.normal(size=(3, 4))).value >= 0
        assert triplet_loss(TripletSample(0, 0, 0, 0.0, 1.0), unit(rng), unit(rng), unit(rng)).value >= 0
