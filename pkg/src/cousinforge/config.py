"""Single-file pipeline configuration with full defaults.

The config is a JSON object whose sections mirror the pipeline stages;
every key has a default, unknown keys are rejected, and the effective
(fully defaulted) config plus its hash is echoed into the provenance of
every CLI output, so a run is reproducible from any artifact it wrote.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

from .errors import SchemaError
from .fusion import FusionConfig
from .jsonio import canonical_dumps, read_json, sha256_bytes
from .navsim import EpisodeConfig, RewardWeights

DEFAULTS = {
    "seed": 0,
    "fusion": {
        "frame_stride": 3,
        "semantic_threshold": 0.80,
        "overlap_threshold": 0.30,
        "voxel": 0.10,
        "min_points": 20,
    },
    "retrieval": {
        "k": 5,
        "geometry_top_n": 1000,
    },
    "assembly": {
        "separation_margin": 0.01,
        "max_sweeps": 100,
    },
    "evaluation": {
        "match_gate": 5.0,
        "iou_threshold": 0.25,
    },
    "navsim": {
        "dt": 0.2,
        "horizon_steps": 300,
        "goal_tol": 2.0,
        "goal_dist_min": 10.0,
        "goal_dist_max": 30.0,
        "waypoint_spacing": 5.0,
        "agent_radius": 0.4,
        "reward": {
            "arrive": 2000.0,
            "collide": -200.0,
            "pos_coarse_std": 5.0,
            "pos_coarse_weight": 10.0,
            "pos_fine_std": 1.0,
            "pos_fine_weight": 50.0,
            "velocity_weight": 10.0,
        },
    },
}


def _merge(defaults: dict, overrides: dict, path: str) -> dict:
    merged = {}
    for key, default in defaults.items():
        here = f"{path}.{key}" if path else key
        if key in overrides:
            value = overrides[key]
            if isinstance(default, dict):
                if not isinstance(value, dict):
                    raise SchemaError("expected object", here)
                merged[key] = _merge(default, value, here)
            else:
                if isinstance(default, bool):
                    valid = isinstance(value, bool)
                elif isinstance(default, (int, float)):
                    valid = isinstance(value, (int, float)) and not isinstance(value, bool)
                else:
                    valid = isinstance(value, type(default))
                if not valid:
                    raise SchemaError(f"expected {type(default).__name__}", here)
                merged[key] = value
        else:
            merged[key] = copy.deepcopy(default)
    for key in overrides:
        if key not in defaults:
            here = f"{path}.{key}" if path else key
            raise SchemaError("unknown config key", here)
    return merged


@dataclass
class PipelineConfig:
    """Effective pipeline configuration (all defaults applied)."""

    data: dict = field(default_factory=lambda: copy.deepcopy(DEFAULTS))

    @property
    def seed(self) -> int:
        return int(self.data["seed"])

    def fusion(self) -> FusionConfig:
        f = self.data["fusion"]
        return FusionConfig(
            frame_stride=int(f["frame_stride"]),
            semantic_threshold=float(f["semantic_threshold"]),
            overlap_threshold=float(f["overlap_threshold"]),
            voxel=float(f["voxel"]),
            min_points=int(f["min_points"]),
        )

    @property
    def k(self) -> int:
        return int(self.data["retrieval"]["k"])

    @property
    def geometry_top_n(self) -> int:
        return int(self.data["retrieval"]["geometry_top_n"])

    @property
    def separation_margin(self) -> float:
        return float(self.data["assembly"]["separation_margin"])

    @property
    def max_sweeps(self) -> int:
        return int(self.data["assembly"]["max_sweeps"])

    @property
    def match_gate(self) -> float:
        return float(self.data["evaluation"]["match_gate"])

    @property
    def iou_threshold(self) -> float:
        return float(self.data["evaluation"]["iou_threshold"])

    def episode(self) -> EpisodeConfig:
        n = self.data["navsim"]
        return EpisodeConfig(
            dt=float(n["dt"]),
            horizon_steps=int(n["horizon_steps"]),
            goal_tol=float(n["goal_tol"]),
            goal_dist_range=(float(n["goal_dist_min"]), float(n["goal_dist_max"])),
            waypoint_spacing=float(n["waypoint_spacing"]),
            agent_radius=float(n["agent_radius"]),
        )

    def rewards(self) -> RewardWeights:
        r = self.data["navsim"]["reward"]
        return RewardWeights(
            arrive=float(r["arrive"]),
            collide=float(r["collide"]),
            pos_coarse_std=float(r["pos_coarse_std"]),
            pos_coarse_weight=float(r["pos_coarse_weight"]),
            pos_fine_std=float(r["pos_fine_std"]),
            pos_fine_weight=float(r["pos_fine_weight"]),
            velocity_weight=float(r["velocity_weight"]),
        )

    def effective(self) -> dict:
        return copy.deepcopy(self.data)

    def hash(self) -> str:
        return sha256_bytes(canonical_dumps(self.data).encode("utf-8"))


def load_config(path=None) -> PipelineConfig:
    """Load a config file (or defaults when path is None); unknown keys rejected."""
    if path is None:
        return PipelineConfig()
    raw = read_json(path)
    if not isinstance(raw, dict):
        raise SchemaError("config must be a JSON object", "config")
    return PipelineConfig(data=_merge(DEFAULTS, raw, ""))
