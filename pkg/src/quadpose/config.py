"""Schema-versioned run configuration shared by every CLI subcommand."""
from __future__ import annotations

import copy
import json
from pathlib import Path

from .errors import BadInput
from .mesh import TriangleMesh, load_obj, procedural_mesh
from .network import BackboneConfig
from .render import DEFAULT_DISTANCE_FACTORS, DepthNoise
from .training import SCHEDULES, TrainConfig

SCHEMA_VERSION = 1


class ConfigError(BadInput):
    pass


def _train_defaults() -> dict:
    d = TrainConfig().to_dict()
    d.pop("seed")
    return d


DEFAULTS = {
    "schema_version": SCHEMA_VERSION,
    "seed": 0,
    "mesh": "procedural:0",
    "train": _train_defaults(),
    "render": {"step": 15.0, "distance_factors": [2.8]},
    "database": {"n_views": 20, "k": 100},
    "query": {"k": 200, "ratio": 0.9, "reproj_thresh": None, "iters": 1000, "nms_radius": None},
    "evaluation": {"n_views": 100, "seed": 1000},
    "experiment": {
        "seeds": [0, 1, 2],
        "arms": ["baseline-a", "joint", "alternate"],
        "train_meshes": ["procedural:0", "procedural:1", "procedural:2"],
        "test_meshes": ["procedural:3", "procedural:4"],
        "transfer_arms": ["baseline-a", "alternate"],
    },
}

# keys whose value is a free-form mapping or null rather than a nested section
_LEAF_SECTIONS = {("train", "backbone"), ("train", "loss_weights"), ("train", "depth_noise")}


def _merge(base: dict, override: dict, path: tuple = ()) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        where = ".".join(path + (key,))
        if key not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[key], dict) and path + (key,) not in _LEAF_SECTIONS:
            if not isinstance(value, dict):
                raise ConfigError(f"config key {where!r} must be an object")
            out[key] = _merge(base[key], value, path + (key,))
        else:
            out[key] = copy.deepcopy(value)
    return out


def validate(cfg: dict) -> dict:
    if cfg.get("schema_version") != SCHEMA_VERSION:
        raise ConfigError(f"unsupported schema_version {cfg.get('schema_version')!r} (expected {SCHEMA_VERSION})")
    if cfg["train"]["schedule"] not in SCHEDULES:
        raise ConfigError(f"train.schedule must be one of {SCHEDULES}")
    for arm in cfg["experiment"]["arms"] + cfg["experiment"]["transfer_arms"]:
        if arm not in SCHEDULES:
            raise ConfigError(f"unknown experiment arm {arm!r}")
    backbone = cfg["train"]["backbone"]
    unknown = set(backbone) - set(BackboneConfig().to_dict())
    if unknown:
        raise ConfigError(f"unknown backbone keys {sorted(unknown)}")
    noise = cfg["train"]["depth_noise"]
    if noise is not None:
        unknown = set(noise) - {"sigma_scale", "edge_dropout", "edge_threshold", "random_dropout"}
        if unknown:
            raise ConfigError(f"unknown depth_noise keys {sorted(unknown)}")
    try:
        train_config(cfg)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid train section: {exc}") from exc
    return cfg


def load_config(path=None, overrides: dict | None = None) -> dict:
    """Defaults, then the JSON file at ``path``, then ``overrides``; validated."""
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        try:
            user = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
        if not isinstance(user, dict):
            raise ConfigError(f"{path}: top level must be an object")
        cfg = _merge(cfg, user)
    if overrides:
        cfg = _merge(cfg, overrides)
    return validate(cfg)


def dump_config(cfg: dict) -> str:
    return json.dumps(cfg, sort_keys=True, indent=2) + "\n"


def train_config(cfg: dict, seed: int | None = None, schedule: str | None = None) -> TrainConfig:
    d = dict(cfg["train"])
    d["seed"] = cfg["seed"] if seed is None else seed
    if schedule is not None:
        d["schedule"] = schedule
    if d.get("distance_factors") is None:
        d["distance_factors"] = DEFAULT_DISTANCE_FACTORS
    return TrainConfig.from_dict(d)


def noise_from(cfg: dict) -> DepthNoise | None:
    n = cfg["train"]["depth_noise"]
    return None if n is None else DepthNoise(**n)


def resolve_mesh(spec: str) -> tuple[str, TriangleMesh]:
    """``procedural:<seed>[:<kind>]`` or a path to an OBJ file."""
    if spec.startswith("procedural:"):
        parts = spec.split(":")
        try:
            seed = int(parts[1])
        except (IndexError, ValueError) as exc:
            raise ConfigError(f"bad procedural mesh spec {spec!r}") from exc
        kind = parts[2] if len(parts) > 2 else None
        return spec, procedural_mesh(seed, kind)
    return Path(spec).stem, load_obj(spec)
