"""Branch network: conv backbone, keypoint proposal head and RoI descriptors.

Tensors are torch NCHW.  A branch network carries its own descriptor
projection, so one :class:`BranchNet` holds every learnable parameter of a
branch.  Branches A, B and C share one instance; branch D owns another.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import EmptyRoI, ShapeMismatch
from .formats import read_weights, weights_to_bytes, write_weights


@dataclass(frozen=True)
class BackboneConfig:
    # (out_channels, kernel, downsample factor) per block
    layers: tuple = ((16, 3, 2), (32, 3, 2), (64, 3, 2), (64, 3, 2))
    descriptor_dim: int = 64
    kpn_hidden: int = 64
    roi_box: int = 32
    roi_bins: int = 2

    @property
    def stride(self) -> int:
        return int(np.prod([s for _, _, s in self.layers]))

    @property
    def feature_dim(self) -> int:
        return self.layers[-1][0]

    def to_dict(self) -> dict:
        return {
            "layers": [list(x) for x in self.layers],
            "descriptor_dim": self.descriptor_dim,
            "kpn_hidden": self.kpn_hidden,
            "roi_box": self.roi_box,
            "roi_bins": self.roi_bins,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BackboneConfig":
        d = dict(d)
        d["layers"] = tuple(tuple(int(v) for v in x) for x in d.get("layers", cls.layers))
        return cls(**d)


@dataclass(frozen=True)
class Keypoint:
    gx: int
    gy: int
    u: float
    v: float
    score: float = field(compare=False, default=0.0)


class BranchNet(nn.Module):
    def __init__(self, config: BackboneConfig, in_channels: int, seed: int = 0):
        super().__init__()
        self.config = config
        self.in_channels = in_channels
        convs = []
        c = in_channels
        for out, k, _ in config.layers:
            convs.append(nn.Conv2d(c, out, k, padding=k // 2))
            c = out
        self.convs = nn.ModuleList(convs)
        self.kpn1 = nn.Conv2d(c, config.kpn_hidden, 3, padding=1)
        self.kpn2 = nn.Conv2d(config.kpn_hidden, 2, 1)
        self.proj = nn.Linear(c * config.roi_bins * config.roi_bins, config.descriptor_dim)
        self.reset_parameters(seed)

    def reset_parameters(self, seed: int) -> None:
        """Kaiming-uniform (fan-in) weights from a numpy generator, zero biases."""
        rng = np.random.default_rng(seed)
        relu_fed = list(self.convs) + [self.kpn1]
        linear_fed = [self.kpn2, self.proj]
        with torch.no_grad():
            for mod in relu_fed + linear_fed:
                w = mod.weight
                fan_in = w[0].numel()
                gain = math.sqrt(2.0) if mod in relu_fed else 1.0
                bound = gain * math.sqrt(3.0 / fan_in)
                w.copy_(torch.from_numpy(rng.uniform(-bound, bound, size=tuple(w.shape))))
                mod.bias.zero_()

    def named_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.detach().cpu().numpy() for k, v in self.state_dict().items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        dtype = next(self.parameters()).dtype
        state = {k: torch.from_numpy(np.asarray(v)).to(dtype) for k, v in arrays.items()}
        self.load_state_dict(state)

    def weights_bytes(self) -> bytes:
        return weights_to_bytes(self.named_arrays())

    def save(self, path) -> None:
        write_weights(path, self.named_arrays())

    @classmethod
    def load(cls, path, config: BackboneConfig, in_channels: int) -> "BranchNet":
        net = cls(config, in_channels)
        net.load_arrays(read_weights(path))
        return net

    def forward(self, images: torch.Tensor):
        feat = backbone_forward(images, self)
        return feat, kpn_forward(feat, self)


def backbone_forward(images: torch.Tensor, net: BranchNet) -> torch.Tensor:
    """``(N, C, H, W) -> (N, F, H/s, W/s)``."""
    if images.dim() != 4 or images.shape[1] != net.in_channels:
        raise ShapeMismatch(f"expected (N, {net.in_channels}, H, W) input, got {tuple(images.shape)}")
    s = net.config.stride
    if images.shape[2] % s or images.shape[3] % s:
        raise ShapeMismatch(f"image size {tuple(images.shape[2:])} not divisible by stride {s}")
    x = images
    for conv, (_, _, down) in zip(net.convs, net.config.layers):
        x = F.relu(conv(x))
        if down > 1:
            x = F.max_pool2d(x, down)
    return x


def kpn_logits(feat: torch.Tensor, net: BranchNet) -> torch.Tensor:
    if feat.dim() != 4 or feat.shape[1] != net.kpn1.in_channels:
        raise ShapeMismatch(f"feature map has shape {tuple(feat.shape)}")
    return net.kpn2(F.relu(net.kpn1(feat)))


def kpn_forward(feat: torch.Tensor, net: BranchNet) -> torch.Tensor:
    """Score map ``(N, 2, h, w)``; channel 1 is the keypoint probability."""
    return torch.softmax(kpn_logits(feat, net), dim=1)


# ---------------------------------------------------------------------------
# keypoints


def grid_keypoints(h: int, w: int, stride: int, scores: np.ndarray | None = None) -> list[Keypoint]:
    """Every cell of an ``h x w`` grid in row-major order."""
    half = stride / 2.0
    out = []
    for gy in range(h):
        for gx in range(w):
            sc = 0.0 if scores is None else float(scores[gy, gx])
            out.append(Keypoint(gx, gy, gx * stride + half, gy * stride + half, sc))
    return out


def select_topk(scoremap: np.ndarray, k: int, stride: int) -> list[Keypoint]:
    """Highest keypoint-probability cells, descending; ties by row-major order.

    ``scoremap`` is either the ``(h, w)`` keypoint channel or the full ``(2, h, w)`` map.
    """
    sm = np.asarray(scoremap)
    if sm.ndim == 3:
        sm = sm[1]
    h, w = sm.shape
    order = np.argsort(-sm.reshape(-1), kind="stable")[: max(int(k), 0)]
    half = stride / 2.0
    return [
        Keypoint(int(i % w), int(i // w), (i % w) * stride + half, (i // w) * stride + half, float(sm.flat[i]))
        for i in order
    ]


def nms(keypoints: list[Keypoint], radius: float) -> list[Keypoint]:
    """Greedy suppression: keep a keypoint unless a kept one lies within ``radius`` pixels."""
    if radius <= 0:
        return list(keypoints)
    order = sorted(range(len(keypoints)), key=lambda i: -keypoints[i].score)
    kept: list[Keypoint] = []
    r2 = radius * radius
    for i in order:
        kp = keypoints[i]
        if all((kp.u - o.u) ** 2 + (kp.v - o.v) ** 2 > r2 for o in kept):
            kept.append(kp)
    return kept


# ---------------------------------------------------------------------------
# RoI descriptors


def _cell_span(center: float, half_box: float, stride: int, n: int) -> tuple[int, int]:
    """Inclusive range of cells whose centres fall inside the box, clipped to the grid."""
    lo = math.ceil((center - half_box) / stride - 0.5 - 1e-9)
    hi = math.floor((center + half_box) / stride - 0.5 + 1e-9)
    return max(lo, 0), min(hi, n - 1)


def _bins(lo: int, hi: int, nbins: int) -> list[list[int]]:
    length = hi - lo + 1
    return [
        list(range(lo + (i * length) // nbins, lo + -((-(i + 1) * length) // nbins)))
        for i in range(nbins)
    ]


@lru_cache(maxsize=64)
def roi_index_table(centers: tuple, h: int, w: int, stride: int, box: int, nbins: int) -> np.ndarray:
    """``(K, nbins*nbins, M)`` flat cell indices pooled by each bin of each RoI.

    Bins follow the usual RoI max-pool split (``floor(i L / b)`` to
    ``ceil((i + 1) L / b)``) and are padded by repeating their first cell.
    """
    rows = []
    for u, v in centers:
        x0, x1 = _cell_span(u, box / 2.0, stride, w)
        y0, y1 = _cell_span(v, box / 2.0, stride, h)
        if x0 > x1 or y0 > y1:
            raise EmptyRoI(f"RoI at ({u}, {v}) covers no feature cell")
        xb = _bins(x0, x1, nbins)
        yb = _bins(y0, y1, nbins)
        rows.append([[gy * w + gx for gy in ys for gx in xs] for ys in yb for xs in xb])
    m = max(len(cells) for row in rows for cells in row)
    table = np.empty((len(rows), nbins * nbins, m), dtype=np.int64)
    for i, row in enumerate(rows):
        for j, cells in enumerate(row):
            table[i, j] = cells + [cells[0]] * (m - len(cells))
    return table


def roi_pool(feat: torch.Tensor, keypoints, stride: int, box: int, nbins: int) -> torch.Tensor:
    """Max-pool ``(F, h, w)`` features into ``(K, F * nbins * nbins)`` vectors."""
    f, h, w = feat.shape
    centers = tuple((float(kp.u), float(kp.v)) for kp in keypoints)
    table = torch.from_numpy(roi_index_table(centers, h, w, stride, box, nbins))
    k, b, m = table.shape
    flat = feat.reshape(f, h * w)
    gathered = flat[:, table.reshape(-1)].reshape(f, k, b, m)
    pooled = gathered.max(dim=3).values  # (F, K, B)
    return pooled.permute(1, 2, 0).reshape(k, b * f)


def extract_descriptors(feat: torch.Tensor, keypoints, net: BranchNet, box: int | None = None) -> torch.Tensor:
    """Unit-norm descriptors ``(K, d)`` for keypoints on one ``(F, h, w)`` feature map."""
    cfg = net.config
    if feat.dim() == 4:
        if feat.shape[0] != 1:
            raise ShapeMismatch("extract_descriptors works on a single feature map")
        feat = feat[0]
    if len(keypoints) == 0:
        return feat.new_zeros((0, cfg.descriptor_dim))
    pooled = roi_pool(feat, keypoints, cfg.stride, cfg.roi_box if box is None else box, cfg.roi_bins)
    x = net.proj(pooled)
    return x / x.norm(dim=1, keepdim=True).clamp_min(1e-12)


# ---------------------------------------------------------------------------
# input encodings


def depth_to_input(depth: np.ndarray) -> np.ndarray:
    """Scale-free depth encoding: background -1, object ~1 + 3 (median - d) / median."""
    depth = np.asarray(depth, dtype=np.float64)
    hit = depth > 0
    out = np.full(depth.shape, -1.0)
    if hit.any():
        med = float(np.median(depth[hit]))
        out[hit] = 1.0 + 3.0 * (med - depth[hit]) / med
    return out[None].astype(np.float32)


def rgb_to_input(rgb: np.ndarray) -> np.ndarray:
    return (np.asarray(rgb, dtype=np.float64).transpose(2, 0, 1) - 0.5).astype(np.float32)


def rgb_to_gray_input(rgb: np.ndarray) -> np.ndarray:
    """Luminance as a single channel, for running a depth network on colour input."""
    rgb = np.asarray(rgb, dtype=np.float64)
    return (rgb @ np.array([0.299, 0.587, 0.114]))[None].astype(np.float32)


def to_batch(*arrays: np.ndarray, dtype=torch.float32) -> torch.Tensor:
    return torch.from_numpy(np.stack(arrays)).to(dtype)
