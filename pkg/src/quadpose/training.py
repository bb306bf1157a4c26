"""Quadruplet sampling and the joint / alternating optimisation schedules."""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from .errors import DegenerateConfiguration, NoTriplet, NonFiniteLoss, TooFewCorrespondences
from .formats import write_json
from .geometry import CameraIntrinsics, RigidTransform
from .losses import (
    DEFAULT_WEIGHTS,
    LossValue,
    build_correspondences,
    consistency_loss,
    downsample_mask,
    is_finite,
    local_l2_loss,
    mask_loss,
    relative_pose_loss,
    sample_triplets,
    total_loss,
    triplet_batch_loss,
)
from .mesh import TriangleMesh
from .network import (
    BackboneConfig,
    BranchNet,
    depth_to_input,
    extract_descriptors,
    grid_keypoints,
    rgb_to_input,
    select_topk,
    to_batch,
)
from .render import (
    DEFAULT_DISTANCE_FACTORS,
    DepthNoise,
    Render,
    apply_depth_noise,
    render_all,
    sample_training_pair,
    sample_viewsphere,
    view_rotations,
)

log = logging.getLogger(__name__)

SCHEDULES = ("joint", "alternate", "baseline-a", "zdda")
ABC_LOSSES = ("triplet", "rel_pose", "mask")
D_LOSSES = ("local_l2", "consistency")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.001
    momentum: float = 0.9
    steps: int = 2000
    seed: int = 0
    schedule: str = "alternate"
    stage_fractions: tuple = (0.4, 0.2, 0.4)
    loss_weights: dict = field(default_factory=lambda: dict(DEFAULT_WEIGHTS))
    n_triplets: int = 32
    corr_cells: float = 1.0  # correspondence threshold, in stride cells of metric extent
    neg_factor: float = 2.0  # negatives at least this many thresholds away
    distill_k: int = 100  # branch-C keypoints used for descriptor alignment
    image_size: int = 128
    view_step: float = 15.0
    distance_factors: tuple = DEFAULT_DISTANCE_FACTORS
    background: float = 0.0
    depth_noise: DepthNoise | None = None
    backbone: BackboneConfig = field(default_factory=BackboneConfig)

    def __post_init__(self):
        if self.schedule not in SCHEDULES:
            raise ValueError(f"schedule must be one of {SCHEDULES}")
        if self.lr < 0 or self.steps < 0 or not 0 <= self.momentum < 1:
            raise ValueError("lr, steps must be non-negative and momentum in [0, 1)")
        if len(self.stage_fractions) != 3 or abs(sum(self.stage_fractions) - 1) > 1e-9:
            raise ValueError("stage_fractions must be three numbers summing to 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["backbone"] = self.backbone.to_dict()
        d["stage_fractions"] = list(self.stage_fractions)
        d["distance_factors"] = list(self.distance_factors)
        d["depth_noise"] = None if self.depth_noise is None else asdict(self.depth_noise)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "backbone" in d:
            d["backbone"] = BackboneConfig.from_dict(d["backbone"])
        if d.get("depth_noise") is not None:
            d["depth_noise"] = DepthNoise(**d["depth_noise"])
        for key in ("stage_fractions", "distance_factors"):
            if key in d:
                d[key] = tuple(d[key])
        if "loss_weights" in d:
            d["loss_weights"] = {**DEFAULT_WEIGHTS, **d["loss_weights"]}
        return cls(**d)

    def intrinsics(self) -> CameraIntrinsics:
        return CameraIntrinsics.default(self.image_size)

    def stages(self) -> list[tuple[str, int]]:
        """``(stage name, step count)`` in execution order."""
        if self.schedule == "alternate":
            n1 = int(round(self.stage_fractions[0] * self.steps))
            n2 = int(round(self.stage_fractions[1] * self.steps))
            return [("stage1", n1), ("stage2", n2), ("stage3", self.steps - n1 - n2)]
        name = {"joint": "joint", "baseline-a": "stage1", "zdda": "zdda"}[self.schedule]
        return [(name, self.steps)]


def stage_losses(stage: str) -> tuple[str, ...]:
    return {
        "stage1": ABC_LOSSES,
        "stage2": D_LOSSES,
        "stage3": ABC_LOSSES + D_LOSSES,
        "joint": ABC_LOSSES + D_LOSSES,
        "zdda": ("local_l2",),
    }[stage]


# ---------------------------------------------------------------------------
# data


class ViewBank:
    """Grid views of one mesh with lazily rendered, cached modalities."""

    def __init__(self, mesh: TriangleMesh, config: TrainConfig, mesh_id: str = "mesh"):
        self.mesh = mesh
        self.mesh_id = mesh_id
        self.K = config.intrinsics()
        self.background = config.background
        r = mesh.bounding_radius
        self.views = sample_viewsphere(config.view_step, [f * r for f in config.distance_factors], r)
        self.rotations = view_rotations(self.views)
        self._cache: dict[int, Render] = {}

    def __len__(self) -> int:
        return len(self.views)

    def render(self, i: int) -> Render:
        if i not in self._cache:
            self._cache[i] = render_all(self.mesh, self.views[i].pose, self.K, self.background)
        return self._cache[i]


@dataclass
class QuadrupletSample:
    depth_a: np.ndarray
    depth_b: np.ndarray
    mask_a: np.ndarray
    mask_b: np.ndarray
    pose_a: RigidTransform
    pose_b: RigidTransform
    depth_c: np.ndarray
    rgb_d: np.ndarray
    pose_cd: RigidTransform
    K: CameraIntrinsics
    radius: float
    views: tuple = ()  # (a, b, c) indices into the bank


def sample_quadruplet_views(bank: ViewBank, rng: np.random.Generator) -> tuple[int, int, int]:
    """A/B from the pose-difference window, C/D drawn independently and uniformly."""
    a, b = sample_training_pair(bank.views, rng, rotations=bank.rotations)
    c = int(rng.integers(len(bank)))
    return a, b, c


def build_quadruplet(bank: ViewBank, rng: np.random.Generator, noise: DepthNoise | None = None) -> QuadrupletSample:
    a, b, c = sample_quadruplet_views(bank, rng)
    ra, rb, rc = bank.render(a), bank.render(b), bank.render(c)
    da, db, dc = ra.depth, rb.depth, rc.depth
    if noise is not None and not noise.is_identity:
        da, db, dc = (apply_depth_noise(d, noise, rng) for d in (da, db, dc))
    return QuadrupletSample(
        da, db, ra.mask, rb.mask, bank.views[a].pose, bank.views[b].pose,
        dc, rc.rgb, bank.views[c].pose, bank.K, bank.mesh.bounding_radius, (a, b, c),
    )


# ---------------------------------------------------------------------------
# state


@dataclass
class TrainState:
    net_abc: BranchNet
    net_d: BranchNet
    opt_abc: torch.optim.Optimizer
    opt_d: torch.optim.Optimizer
    step: int = 0
    history: list = field(default_factory=list)


def init_state(config: TrainConfig) -> TrainState:
    seeds = np.random.SeedSequence(config.seed).generate_state(2)
    net_abc = BranchNet(config.backbone, 1, seed=int(seeds[0]))
    net_d = BranchNet(config.backbone, 3, seed=int(seeds[1]))
    opt_abc = torch.optim.SGD(net_abc.parameters(), lr=config.lr, momentum=config.momentum)
    opt_d = torch.optim.SGD(net_d.parameters(), lr=config.lr, momentum=config.momentum)
    return TrainState(net_abc, net_d, opt_abc, opt_d)


# ---------------------------------------------------------------------------
# one step


def _np(t: torch.Tensor) -> np.ndarray:
    return t.detach().double().numpy()


def _grad(g: np.ndarray, like: torch.Tensor) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(g)).to(like.dtype)


def compute_losses(state: TrainState, quad: QuadrupletSample, config: TrainConfig, stage: str,
                   rng: np.random.Generator, backward: bool = True) -> tuple[LossValue, dict]:
    """Forward all branches needed by ``stage``, evaluate its losses and (optionally) backpropagate."""
    active = stage_losses(stage)
    use_abc = any(name in ABC_LOSSES for name in active)
    use_d = any(name in D_LOSSES for name in active)
    net_abc, net_d = state.net_abc, state.net_d
    s = config.backbone.stride
    K = quad.K

    dtype = next(net_abc.parameters()).dtype
    with torch.set_grad_enabled(use_abc):
        x = to_batch(depth_to_input(quad.depth_a), depth_to_input(quad.depth_b), depth_to_input(quad.depth_c),
                     dtype=dtype)
        feat, probs = net_abc(x)
    h, w = probs.shape[2:]
    probs_np = _np(probs)
    parts: dict[str, LossValue] = {}
    outputs: dict[tuple, torch.Tensor] = {}

    if use_abc:
        kp_a = grid_keypoints(h, w, s, probs_np[0, 1])
        kp_b = grid_keypoints(h, w, s, probs_np[1, 1])
        tau = config.corr_cells * s * quad.pose_a.translation[2] / K.fx
        desc_a = extract_descriptors(feat[0], kp_a, net_abc)
        desc_b = extract_descriptors(feat[1], kp_b, net_abc)
        outputs[("A", "desc")] = desc_a
        outputs[("B", "desc")] = desc_b
        outputs[("ABC", "scoremap")] = probs
        if "rel_pose" in active:
            try:
                corrs = build_correspondences(kp_a, kp_b, quad.depth_a, quad.depth_b, quad.pose_a, quad.pose_b,
                                              K, tau)
                parts["rel_pose"] = relative_pose_loss(corrs, h * w, h * w, scale=quad.radius)
            except (TooFewCorrespondences, DegenerateConfiguration):
                pass
        if "triplet" in active:
            try:
                trips = sample_triplets(kp_a, kp_b, quad.depth_a, quad.depth_b, quad.pose_a, quad.pose_b, K, rng,
                                        tau, config.neg_factor * tau, config.n_triplets, quad.radius)
                parts["triplet"] = triplet_batch_loss(trips, _np(desc_a), _np(desc_b))
            except NoTriplet:
                pass
        if "mask" in active:
            ma = mask_loss(probs_np[0], downsample_mask(quad.mask_a, s), "A")
            mb = mask_loss(probs_np[1], downsample_mask(quad.mask_b, s), "B")
            parts["mask"] = LossValue(ma.value + mb.value, {**ma.grads, **mb.grads})

    if use_d:
        feat_d, probs_d = net_d(to_batch(rgb_to_input(quad.rgb_d), dtype=dtype))
        outputs[("D", "scoremap")] = probs_d
        if stage == "zdda":
            kp_c = grid_keypoints(h, w, s)
        else:
            kp_c = select_topk(probs_np[2], config.distill_k, s)
        with torch.no_grad():
            desc_c = extract_descriptors(feat[2].detach(), kp_c, net_abc)
        desc_d = extract_descriptors(feat_d[0], kp_c, net_d)
        outputs[("D", "desc")] = desc_d
        parts["local_l2"] = local_l2_loss(_np(desc_d), _np(desc_c))
        if "consistency" in active:
            parts["consistency"] = consistency_loss(probs_np[2], _np(probs_d[0]))

    total = total_loss(parts, config.loss_weights)
    if not is_finite(total):
        raise NonFiniteLoss(
            f"non-finite loss at step {state.step} ({stage}): "
            + json.dumps({k: v.value for k, v in parts.items()}, default=str)
        )
    if backward:
        _backward(total, outputs, h, w)
    return total, parts


def _backward(total: LossValue, outputs: dict, h: int, w: int) -> None:
    tensors, grads = [], []
    g = total.grads
    if ("ABC", "scoremap") in outputs:
        probs = outputs[("ABC", "scoremap")]
        gp = np.zeros(tuple(probs.shape))
        for i, br in enumerate("AB"):
            if (br, "scoremap") in g:
                gp[i] += g[(br, "scoremap")]
            if (br, "kp_score") in g:
                gp[i, 1] += g[(br, "kp_score")].reshape(h, w)
        if np.any(gp):
            tensors.append(probs)
            grads.append(_grad(gp, probs))
    for site in (("A", "desc"), ("B", "desc"), ("D", "desc")):
        if site in g and site in outputs:
            tensors.append(outputs[site])
            grads.append(_grad(g[site], outputs[site]))
    if ("D", "scoremap") in g:
        probs_d = outputs[("D", "scoremap")]
        tensors.append(probs_d)
        grads.append(_grad(g[("D", "scoremap")][None], probs_d))
    if tensors:
        torch.autograd.backward(tensors, grads)


def train_step(state: TrainState, quad: QuadrupletSample, config: TrainConfig, stage: str = "joint",
               rng: np.random.Generator | None = None) -> TrainState:
    """One SGD-with-momentum update of the networks that ``stage`` trains."""
    rng = np.random.default_rng(config.seed) if rng is None else rng
    active = stage_losses(stage)
    state.opt_abc.zero_grad(set_to_none=True)
    state.opt_d.zero_grad(set_to_none=True)
    total, parts = compute_losses(state, quad, config, stage, rng)
    if any(name in ABC_LOSSES for name in active):
        state.opt_abc.step()
    if any(name in D_LOSSES for name in active):
        state.opt_d.step()
    state.history.append({
        "step": state.step,
        "stage": stage,
        "total": total.value,
        **{k: v.value for k, v in sorted(parts.items())},
    })
    state.step += 1
    return state


# ---------------------------------------------------------------------------
# schedules


def make_banks(meshes, config: TrainConfig) -> list[ViewBank]:
    return [ViewBank(m, config, f"mesh{i}") for i, m in enumerate(meshes)]


def train(meshes, config: TrainConfig, state: TrainState | None = None, banks: list[ViewBank] | None = None,
          log_every: int = 0) -> TrainState:
    """Run every stage of ``config.schedule`` from a fresh (or given) state."""
    torch.manual_seed(config.seed)
    banks = make_banks(meshes, config) if banks is None else banks
    state = init_state(config) if state is None else state
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 1]))
    for stage, n in config.stages():
        for _ in range(n):
            bank = banks[int(rng.integers(len(banks)))]
            quad = build_quadruplet(bank, rng, config.depth_noise)
            train_step(state, quad, config, stage, rng)
            if log_every and state.step % log_every == 0:
                recent = [h["total"] for h in state.history[-log_every:]]
                log.info("step %d (%s) loss %.4f", state.step, stage, float(np.mean(recent)))
    return state


def train_joint(meshes, config: TrainConfig, **kw) -> TrainState:
    return train(meshes, replace(config, schedule="joint"), **kw)


def train_alternate(meshes, config: TrainConfig, **kw) -> TrainState:
    return train(meshes, replace(config, schedule="alternate"), **kw)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(state: TrainState, config: TrainConfig, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    state.net_abc.save(out / "weights_abc.qpw")
    state.net_d.save(out / "weights_d.qpw")
    stages = []
    for h in state.history:
        if not stages or stages[-1] != h["stage"]:
            stages.append(h["stage"])
    write_json(out / "run.json", {
        "config": config.to_dict(),
        "seed": config.seed,
        "step": state.step,
        "stages": stages,
        "stage": stages[-1] if stages else None,
        "history": state.history,
    })
    return out


def load_networks(ckpt_dir, config: TrainConfig | None = None) -> tuple[BranchNet, BranchNet, TrainConfig]:
    from .formats import read_json

    ckpt = Path(ckpt_dir)
    if config is None:
        config = TrainConfig.from_dict(read_json(ckpt / "run.json")["config"])
    net_abc = BranchNet.load(ckpt / "weights_abc.qpw", config.backbone, 1)
    net_d = BranchNet.load(ckpt / "weights_d.qpw", config.backbone, 3)
    return net_abc, net_d, config


def moving_average(x, n: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if len(x) < n:
        return np.array([x.mean()]) if len(x) else x
    return np.convolve(x, np.ones(n) / n, mode="valid")

