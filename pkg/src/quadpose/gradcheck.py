"""Central finite-difference checks of every differentiable op and loss, in float64.

Each check compares an analytic gradient with ``(f(x + h) - f(x - h)) / 2h``
at randomly drawn coordinates.  The networks are piecewise smooth (ReLU, max
pooling, hinge), so a coordinate whose second difference shows a kink inside
``[x - h, x + h]`` is redrawn rather than scored.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch

from .geometry import RigidTransform, random_rotation
from .losses import (
    Correspondence,
    TripletSample,
    consistency_loss,
    local_l2_loss,
    mask_loss,
    relative_pose_loss,
    total_loss,
    triplet_batch_loss,
)
from .network import BackboneConfig, BranchNet, backbone_forward, extract_descriptors, grid_keypoints, kpn_forward

STEP = 1e-6
TOL = 1e-5


@dataclass(frozen=True)
class CheckResult:
    name: str
    max_rel_err: float
    n_coords: int
    tol: float = TOL

    @property
    def passed(self) -> bool:
        return self.n_coords > 0 and self.max_rel_err < self.tol


def rel_error(a: float, n: float, floor: float) -> float:
    return abs(a - n) / max(abs(a), abs(n), floor)


def fd_check(name: str, f: Callable[[np.ndarray], float], x: np.ndarray, grad: np.ndarray, rng: np.random.Generator,
             n_coords: int = 32, h: float = STEP, tol: float = TOL, max_draws: int = 2000) -> CheckResult:
    """Compare ``grad`` with central differences of scalar ``f`` at ``n_coords`` coordinates of ``x``.

    ``f`` receives a perturbed copy of ``x``.  The relative error is floored at
    1e-3 of the largest analytic gradient so vanishing entries are scored absolutely.
    """
    x = np.array(x, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64).reshape(x.shape)
    floor = max(1e-3 * float(np.abs(grad).max(initial=0.0)), 1e-12)
    f0 = f(x)
    worst = 0.0
    done = 0
    draws = 0
    flat = x.reshape(-1)
    while done < n_coords and draws < max_draws:
        draws += 1
        i = int(rng.integers(flat.size))
        xp = flat.copy()
        xm = flat.copy()
        xp[i] += h
        xm[i] -= h
        fp = f(xp.reshape(x.shape))
        fm = f(xm.reshape(x.shape))
        second = abs(fp - 2.0 * f0 + fm)
        if second > 1e-4 * abs(fp - fm) + 1e-11 * max(abs(f0), 1.0):
            continue  # kink within the stencil
        num = (fp - fm) / (2.0 * h)
        worst = max(worst, rel_error(float(grad.reshape(-1)[i]), num, floor))
        done += 1
    return CheckResult(name, worst, done, tol)


# ---------------------------------------------------------------------------
# network ops


def _small_net(in_channels: int, seed: int) -> BranchNet:
    cfg = BackboneConfig(layers=((4, 3, 2), (6, 3, 2), (8, 3, 2), (8, 3, 2)), descriptor_dim=8, kpn_hidden=6)
    return BranchNet(cfg, in_channels, seed=seed).double()


def _param_check(name, net: BranchNet, param: torch.Tensor, scalar: Callable[[], torch.Tensor], rng) -> CheckResult:
    net.zero_grad()
    out = scalar()
    out.backward()
    grad = param.grad.detach().numpy().copy()
    base = param.detach().clone()

    def f(v):
        with torch.no_grad():
            param.copy_(torch.from_numpy(v))
            val = float(scalar())
            param.copy_(base)
        return val

    return fd_check(name, f, base.numpy(), grad, rng)


def _input_check(name, x0: np.ndarray, scalar: Callable[[torch.Tensor], torch.Tensor], rng) -> CheckResult:
    x = torch.from_numpy(x0.copy()).requires_grad_(True)
    scalar(x).backward()
    grad = x.grad.numpy().copy()

    def f(v):
        with torch.no_grad():
            return float(scalar(torch.from_numpy(v)))

    return fd_check(name, f, x0, grad, rng)


def check_network(seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    net = _small_net(1, seed)
    img = rng.normal(size=(1, 1, 64, 64))
    feat0 = backbone_forward(torch.from_numpy(img), net).detach().numpy()
    wf = torch.from_numpy(rng.normal(size=feat0.shape))
    wp = torch.from_numpy(rng.normal(size=(1, 2) + feat0.shape[2:]))
    kps = grid_keypoints(feat0.shape[2], feat0.shape[3], net.config.stride)
    wd = torch.from_numpy(rng.normal(size=(len(kps), net.config.descriptor_dim)))

    def conv_out(x):
        return (backbone_forward(x, net) * wf).sum()

    def kpn_out(feat):
        return (kpn_forward(feat, net) * wp).sum()

    def desc_out(feat):
        return (extract_descriptors(feat[0], kps, net) * wd).sum()

    img_t = torch.from_numpy(img)
    results = [
        _input_check("backbone/input", img, conv_out, rng),
        _param_check("backbone/conv0.weight", net, net.convs[0].weight, lambda: conv_out(img_t), rng),
        _param_check("backbone/conv3.weight", net, net.convs[3].weight, lambda: conv_out(img_t), rng),
        _param_check("backbone/conv2.bias", net, net.convs[2].bias, lambda: conv_out(img_t), rng),
        _input_check("kpn/features", feat0, kpn_out, rng),
        _param_check("kpn/kpn1.weight", net, net.kpn1.weight, lambda: kpn_out(torch.from_numpy(feat0)), rng),
        _param_check("kpn/kpn2.weight", net, net.kpn2.weight, lambda: kpn_out(torch.from_numpy(feat0)), rng),
        _input_check("roi_descriptor/features", feat0, desc_out, rng),
        _param_check("roi_descriptor/proj.weight", net, net.proj.weight, lambda: desc_out(torch.from_numpy(feat0)), rng),
    ]
    return results


# ---------------------------------------------------------------------------
# losses


def _random_unit(rng, n, d):
    x = rng.normal(size=(n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def _random_scores(rng, shape):
    p = rng.uniform(0.05, 0.95, size=shape)
    return np.stack([1.0 - p, p])


def check_relative_pose(rng) -> CheckResult:
    n = 40
    P = rng.normal(size=(n, 3))
    T = RigidTransform(random_rotation(rng), rng.normal(size=3))
    Q = T.apply(P) + 0.05 * rng.normal(size=(n, 3))
    s_a = rng.uniform(0.1, 1.0, n)
    s_b = rng.uniform(0.1, 1.0, n)
    ia = rng.permutation(n)
    ib = rng.permutation(n)

    def loss(sa, sb):
        corrs = [Correspondence(int(ia[i]), int(ib[i]), P[i], Q[i], float(sa[ia[i]] + sb[ib[i]])) for i in range(n)]
        return relative_pose_loss(corrs, n, n, scale=1.5)

    lv = loss(s_a, s_b)
    both = np.concatenate([s_a, s_b])
    grad = np.concatenate([lv.grads[("A", "kp_score")], lv.grads[("B", "kp_score")]])
    return fd_check("loss/relative_pose", lambda v: loss(v[:n], v[n:]).value, both, grad, rng)


def _triplets(rng, n_a, n_b, count):
    out = []
    for _ in range(count):
        d_p = rng.uniform(0.0, 0.2)
        d_n = rng.uniform(0.5, 2.0)
        out.append(TripletSample(int(rng.integers(n_a)), int(rng.integers(n_b)), int(rng.integers(n_b)), d_p, d_n, 1.0))
    return out


def check_triplet(rng) -> CheckResult:
    d = 16
    fa = _random_unit(rng, 20, d)
    fb = _random_unit(rng, 20, d)
    trips = _triplets(rng, 20, 20, 48)
    lv = triplet_batch_loss(trips, fa, fb)
    x = np.concatenate([fa.ravel(), fb.ravel()])
    grad = np.concatenate([lv.grads[("A", "desc")].ravel(), lv.grads[("B", "desc")].ravel()])

    def f(v):
        return triplet_batch_loss(trips, v[: fa.size].reshape(fa.shape), v[fa.size:].reshape(fb.shape)).value

    return fd_check("loss/triplet", f, x, grad, rng)


def check_local_l2(rng) -> CheckResult:
    f_hat = _random_unit(rng, 30, 16)
    f = _random_unit(rng, 30, 16)
    lv = local_l2_loss(f_hat, f)
    return fd_check("loss/local_l2", lambda v: local_l2_loss(v, f).value, f_hat, lv.grads[("D", "desc")], rng)


def check_consistency(rng) -> CheckResult:
    y_c = _random_scores(rng, (6, 6))
    y_d = _random_scores(rng, (6, 6))
    lv = consistency_loss(y_c, y_d)
    return fd_check("loss/consistency", lambda v: consistency_loss(y_c, v).value, y_d, lv.grads[("D", "scoremap")], rng)


def check_mask(rng) -> CheckResult:
    y = _random_scores(rng, (6, 6))
    lab = (rng.random((6, 6)) < 0.4).astype(np.uint8)
    lv = mask_loss(y, lab, "A")
    return fd_check("loss/mask", lambda v: mask_loss(v, lab, "A").value, y, lv.grads[("A", "scoremap")], rng)


def check_total(rng) -> CheckResult:
    """Weighted sum: gradient of a shared descriptor site combines triplet and alignment terms."""
    d = 16
    fa = _random_unit(rng, 20, d)
    fb = _random_unit(rng, 20, d)
    target = _random_unit(rng, 20, d)
    trips = _triplets(rng, 20, 20, 40)
    weights = {"triplet": 1.0, "local_l2": 0.7}

    def parts(a):
        t = triplet_batch_loss(trips, a, fb)
        l2 = local_l2_loss(a, target)
        # route the alignment term onto the same site as the triplet anchor gradient
        return {"triplet": t, "local_l2": type(l2)(l2.value, {("A", "desc"): l2.grads[("D", "desc")]})}

    lv = total_loss(parts(fa), weights)
    return fd_check("loss/total", lambda v: total_loss(parts(v), weights).value, fa, lv.grads[("A", "desc")], rng)


def check_losses(seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed + 1)
    return [check_relative_pose(rng), check_triplet(rng), check_local_l2(rng), check_consistency(rng),
            check_mask(rng), check_total(rng)]


# ---------------------------------------------------------------------------
# end to end through the training wiring


def check_training_wiring(seed: int = 0) -> list[CheckResult]:
    """Loss-to-parameter gradients of one quadruplet, as assembled by the training step."""
    from .mesh import procedural_mesh
    from .training import TrainConfig, ViewBank, build_quadruplet, compute_losses, init_state

    rng = np.random.default_rng(seed + 2)
    cfg = TrainConfig(image_size=128, n_triplets=16, distill_k=16,
                      backbone=BackboneConfig(layers=((4, 3, 2), (6, 3, 2), (8, 3, 2), (8, 3, 2)),
                                              descriptor_dim=8, kpn_hidden=6))
    bank = ViewBank(procedural_mesh(seed, "chair"), cfg)
    quad = build_quadruplet(bank, np.random.default_rng(seed))
    state = init_state(cfg)
    state.net_abc.double()
    state.net_d.double()
    results = []
    for stage, net, name in (("stage1", state.net_abc, "abc"), ("stage2", state.net_d, "d")):
        for pname in ("convs.1.weight", "kpn1.weight", "proj.weight"):
            param = dict(net.named_parameters())[pname]

            def scalar(stage=stage):
                return compute_losses(state, quad, cfg, stage, np.random.default_rng(11), backward=False)[0].value

            state.net_abc.zero_grad()
            state.net_d.zero_grad()
            compute_losses(state, quad, cfg, stage, np.random.default_rng(11), backward=True)
            grad = param.grad.detach().numpy().copy()
            base = param.detach().clone()

            def f(v, param=param, base=base, scalar=scalar):
                with torch.no_grad():
                    param.copy_(torch.from_numpy(v))
                    val = scalar()
                    param.copy_(base)
                return val

            results.append(fd_check(f"train/{stage}/{name}.{pname}", f, base.numpy(), grad, rng))
    return results


def run_all(seed: int = 0) -> list[CheckResult]:
    return check_network(seed) + check_losses(seed) + check_training_wiring(seed)


def format_table(results: list[CheckResult]) -> str:
    width = max(len(r.name) for r in results)
    lines = [f"{'op':<{width}}  {'max_rel_err':>12}  coords  status"]
    for r in results:
        lines.append(f"{r.name:<{width}}  {r.max_rel_err:12.3e}  {r.n_coords:6d}  {'ok' if r.passed else 'FAIL'}")
    return "\n".join(lines)

