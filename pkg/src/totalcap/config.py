"""Pipeline configuration. Every constant is overridable from a JSON file."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path


@dataclass
class AssociationConfig:
    sigma_epipolar: float = 10.0  # px
    sigma_tracking: float = 25.0  # px
    bone_window: tuple[float, float] = (0.5, 1.8)
    min_edge_score: float = 0.05
    max_reprojection_px: float = 10.0
    parsing_min_depth: float = 1.0  # m, nearest plausible subject depth
    spawn_min_views: int = 2
    spawn_min_matching: float = 0.5
    spawn_min_joints: int = 5


@dataclass
class BootstrapConfig:
    hand_radius: float = 0.15  # m
    hand_extrapolation: float = 0.25
    face_radius: float = 0.12  # m
    roi_margin: float = 0.0  # px added to the projected radius
    iou_threshold: float = 0.5


@dataclass
class FitWeights:
    lambda_b3d: float = 10.0
    lambda_h2d: float = 1e-4
    lambda_f2d: float = 3e-4
    lambda_pri: float = 0.01
    lambda_theta_h: float = 0.01
    lambda_beta: float = 0.01
    lambda_eps: float = 0.01

    def __post_init__(self) -> None:
        for f in dataclasses.fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"{f.name} must be non-negative")


@dataclass
class FittingConfig:
    weights: FitWeights = field(default_factory=FitWeights)
    iterations: int = 20
    stage1_iterations: int = 20
    robustifier: str = "squared"  # or "huber"
    huber_delta: float = 5.0  # px
    initial_damping: float = 1e-3


@dataclass
class FeedbackConfig:
    enabled: bool = True
    falloff: float = 20.0  # px
    radius_torso: float = 0.12
    radius_limb: float = 0.05
    radius_head: float = 0.10
    radius_finger: float = 0.01


@dataclass
class Config:
    association: AssociationConfig = field(default_factory=AssociationConfig)
    bootstrap: BootstrapConfig = field(default_factory=BootstrapConfig)
    fitting: FittingConfig = field(default_factory=FittingConfig)
    feedback: FeedbackConfig = field(default_factory=FeedbackConfig)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "Config":
        return _build(cls, d)

    @classmethod
    def load(cls, path: str | Path) -> "Config":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def save(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)


def _build(cls, d: dict):
    kwargs = {}
    names = {f.name: f for f in dataclasses.fields(cls)}
    for key, value in d.items():
        if key not in names:
            raise KeyError(f"unknown config key {cls.__name__}.{key}")
        default = names[key].default_factory() if names[key].default_factory is not dataclasses.MISSING else None
        if dataclasses.is_dataclass(default):
            kwargs[key] = _build(type(default), value)
        elif isinstance(value, list):
            kwargs[key] = tuple(value)
        else:
            kwargs[key] = value
    return cls(**kwargs)
