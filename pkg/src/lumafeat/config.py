"""Pipeline configuration: one TOML file with per-stage sections.

A single global seed deterministically derives every stage seed, so the
whole pipeline's artifacts are a pure function of (config, seed). Overrides
take ``section.key=value`` strings (values parsed as TOML fragments).
"""

from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .geometry import Intrinsics
from .losses import LossWeights
from .model import ExtractorConfig
from .renderer import SweepRanges
from .training import TrainConfig


class ConfigError(ValueError):
    pass


DEFAULT_CONFIG = {
    "seed": 7,
    "render": {
        "width": 160,
        "height": 120,
        "focal": 180.0,
    },
    "objects": {
        "count": 4,
        "shapes": ["cube", "plane", "sphere", "cylinder"],
        "textures": ["checker", "voronoi", "checker", "gradient"],
        "point_count": 2200,
        "size": 1.0,
        "texture_cell": 0.22,
        "bootstrap_views": 5,
        "superset_homographies": 10,
        "detector_quantile": 0.95,
        "nms_radius": 4,
        "max_superset_points": 400,
    },
    "scenes": {
        "count": 4,
        "pairs_per_scene": 1,
        "translation_box": 0.5,
    },
    "views": {
        "count": 10,
        "radius_factor": [2.4, 3.0],
        "elevation_deg": [20.0, 60.0],
        "min_visible_keypoints": 4,
    },
    "illumination": {
        "train_count": 5,
        "eval_count": 3,
        "intensity": [0.2, 1.6],
        "ambient": [0.0, 0.12],
        "elevation_deg": [15.0, 80.0],
        "saturation": [0.0, 0.55],
        "lights": [1, 3],
    },
    "dataset": {
        "occlusion_tol": 0.05,
    },
    "model": {
        "channels": [32, 64, 128],
        "head_channels": 256,
        "descriptor_dim": 256,
    },
    "training": {
        "steps": 1500,
        "learning_rate": 2e-3,
        "lr_schedule": "cosine",
        "lambda1": 1.0,
        "lambda2": 1.0,
        "lambda3": 0.1,
        "disparity_guard": 1e-6,
        "ablation": "full",
        "illum_subsample": 4,
        "max_disparity_keypoints": 64,
        "similarity_resolution": "full",
        "checkpoint_interval": 0,
        "eval_interval": 0,
    },
    "eval": {
        "epsilon": 1.0,
        "score_threshold": 0.02,
        "nms_radius": 4,
        "max_keypoints": 500,
        "homography_pairs": 8,
        "homography_epsilon": 3.0,
        "ransac_iterations": 500,
    },
    "bench": {
        "frames": 100,
        "width": 320,
        "height": 240,
    },
}


def _merge(base, update, path=""):
    out = copy.deepcopy(base)
    for key, value in update.items():
        where = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{where!r} must be a table")
            out[key] = _merge(base[key], value, where)
        else:
            out[key] = value
    return out


def parse_override(text):
    """``section.key=value`` -> (["section", "key"], parsed value)."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} must look like section.key=value")
    key, _, raw = text.partition("=")
    try:
        value = tomllib.loads(f"v = {raw}")["v"]
    except tomllib.TOMLDecodeError:
        value = raw  # bare string
    return key.strip().split("."), value


def load_config(path=None, overrides=(), seed=None):
    """Merged config dict from defaults, an optional TOML file, CLI
    overrides, and an optional seed override (in that order)."""
    merged = copy.deepcopy(DEFAULT_CONFIG)
    if path is not None:
        try:
            data = tomllib.loads(Path(path).read_text())
        except (OSError, tomllib.TOMLDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        merged = _merge(merged, data)
    for text in overrides:
        keys, value = parse_override(text)
        cursor = merged
        for key in keys[:-1]:
            if key not in cursor or not isinstance(cursor[key], dict):
                raise ConfigError(f"unknown config table {'.'.join(keys[:-1])!r}")
            cursor = cursor[key]
        if keys[-1] not in cursor:
            raise ConfigError(f"unknown config key {'.'.join(keys)!r}")
        cursor[keys[-1]] = value
    if seed is not None:
        merged["seed"] = int(seed)
    _validate(merged)
    return merged


def _validate(cfg):
    render = cfg["render"]
    if render["width"] % 8 or render["height"] % 8:
        raise ConfigError("render width/height must be divisible by 8")
    if cfg["illumination"]["train_count"] < 2:
        raise ConfigError("need at least 2 training illumination conditions")
    if cfg["training"]["steps"] <= 0:
        raise ConfigError("training.steps must be positive")
    if cfg["training"]["ablation"] not in ("full", "no_similarity", "no_disparity"):
        raise ConfigError("training.ablation invalid")
    if cfg["objects"]["count"] < 1 or cfg["scenes"]["count"] < 1:
        raise ConfigError("need at least one object and one scene")


def derive_seed(global_seed, stage: str) -> int:
    """Stable stage seed from the global seed and the stage name."""
    digest = hashlib.sha256(f"{global_seed}:{stage}".encode()).digest()
    return int.from_bytes(digest[:8], "little") % (2 ** 63)


def config_hash(cfg, sections) -> str:
    """Digest of the given config sections plus the global seed."""
    payload = {name: cfg[name] for name in sections}
    payload["seed"] = cfg["seed"]
    return hashlib.sha256(
        json.dumps(payload, sort_keys=True).encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# typed builders
# ---------------------------------------------------------------------------

def intrinsics_from(cfg) -> Intrinsics:
    render = cfg["render"]
    return Intrinsics(
        fx=float(render["focal"]), fy=float(render["focal"]),
        cx=render["width"] / 2.0, cy=render["height"] / 2.0,
        width=int(render["width"]), height=int(render["height"]),
    )


def sweep_ranges_from(cfg) -> SweepRanges:
    illum = cfg["illumination"]
    return SweepRanges(
        intensity=tuple(illum["intensity"]),
        ambient=tuple(illum["ambient"]),
        elevation_deg=tuple(illum["elevation_deg"]),
        saturation=tuple(illum["saturation"]),
        lights=tuple(illum["lights"]),
    )


def model_config_from(cfg) -> ExtractorConfig:
    model = cfg["model"]
    return ExtractorConfig(
        channels=tuple(model["channels"]),
        head_channels=int(model["head_channels"]),
        descriptor_dim=int(model["descriptor_dim"]),
    )


def train_config_from(cfg, ablation=None) -> TrainConfig:
    training = cfg["training"]
    return TrainConfig(
        weights=LossWeights(
            lambda1=float(training["lambda1"]),
            lambda2=float(training["lambda2"]),
            lambda3=float(training["lambda3"]),
            disparity_guard=float(training["disparity_guard"]),
        ),
        steps=int(training["steps"]),
        learning_rate=float(training["learning_rate"]),
        lr_schedule=training["lr_schedule"],
        seed=derive_seed(cfg["seed"], "training"),
        ablation=ablation or training["ablation"],
        illum_subsample=int(training["illum_subsample"]),
        max_disparity_keypoints=int(training["max_disparity_keypoints"]),
        similarity_resolution=training["similarity_resolution"],
        checkpoint_interval=int(training["checkpoint_interval"]),
        eval_interval=int(training["eval_interval"]),
        model=model_config_from(cfg),
    )
