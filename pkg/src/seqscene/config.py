"""Experiment configuration: YAML schema, validation and conversion to the
runtime parameter objects.

Precedence when building a config is command-line flag > file > built-in
default. Unknown keys are errors.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Literal

import numpy as np
import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .assoc import AssociationParams
from .detect import DetectorNoiseConfig, uniform_confusion
from .filter import ActionModelParams, DiffusionParams, LikelihoodParams, Workspace
from .geometry import CameraIntrinsics, LabelRegistry, ObjectModel, Pose6D, look_at
from .models import DEFAULT_OBJECTS, build_models
from .world import Bin, ExecutionNoiseConfig, Table, default_bins

DEFAULT_CONFIG_PATH = Path(__file__).with_name("default.yaml")


class ConfigError(ValueError):
    def __init__(self, violations: list[str]):
        self.violations = violations
        super().__init__("; ".join(violations))


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_default=True)


class CameraSection(_Section):
    width: int = Field(320, ge=1)
    height: int = Field(240, ge=1)
    fx: float = Field(262.5, gt=0)
    fy: float = Field(262.5, gt=0)
    cx: float = 159.5
    cy: float = 119.5
    near: float = Field(0.05, gt=0)
    far: float = 5.0
    eye: tuple[float, float, float] = (0.0, -0.45, 0.5)
    target: tuple[float, float, float] = (0.0, 0.0, 0.0)

    @model_validator(mode="after")
    def _clip(self):
        if not self.far > self.near:
            raise ValueError("far must exceed near")
        return self


class ObjectSection(_Section):
    category: Literal["cleaning", "non_cleaning"]
    shape: Literal["box", "cylinder", "l_shape"]
    size: tuple[float, float, float] | None = None
    radius: float | None = None
    height: float | None = None
    leg_x: float | None = None
    leg_y: float | None = None
    thickness: float | None = None

    @model_validator(mode="after")
    def _dims(self):
        need = {"box": ("size",), "cylinder": ("radius", "height"),
                "l_shape": ("leg_x", "leg_y", "thickness", "height")}[self.shape]
        missing = [k for k in need if getattr(self, k) is None]
        if missing:
            raise ValueError(f"{self.shape} needs {', '.join(missing)}")
        return self


def _default_objects() -> dict[str, ObjectSection]:
    return {name: ObjectSection(category=cat, **spec) for name, (cat, spec) in DEFAULT_OBJECTS.items()}


class SceneSection(_Section):
    object_count: int = Field(5, ge=1)
    objects: dict[str, ObjectSection] = Field(default_factory=_default_objects)
    table_height: float = 0.0
    placement_half_extent: tuple[float, float] = (0.2, 0.13)
    workspace_lo: tuple[float, float, float] = (-0.3, -0.25, 0.0)
    workspace_hi: tuple[float, float, float] = (0.3, 0.25, 0.1)
    tilt_sigma: float = Field(0.02, ge=0)
    depth_noise_sigma: float = Field(0.0, ge=0)
    # cloud points closer than this to the table top are dropped; null keeps them
    support_margin: float | None = Field(0.01, ge=0)

    @model_validator(mode="after")
    def _check(self):
        if self.object_count > len(self.objects):
            raise ValueError(f"object_count {self.object_count} exceeds the {len(self.objects)} registered labels")
        if not all(h > l for l, h in zip(self.workspace_lo, self.workspace_hi)):
            raise ValueError("workspace must have positive extent")
        return self


class DiffusionSection(_Section):
    trans_sigma: float = Field(0.01, ge=0)
    rot_sigma: float = Field(0.6, ge=0)
    decay: float = Field(0.92, gt=0, le=1)
    min_trans_sigma: float = Field(0.002, ge=0)
    min_rot_sigma: float = Field(0.02, ge=0)
    flip_prob: float = Field(0.1, ge=0, le=1)
    flip_trans_sigma: float = Field(0.0, ge=0)
    sharpness: float = Field(3.0, gt=0)


class ActionModelSection(_Section):
    sigma1: float = Field(0.04, ge=0)
    sigma2: float = Field(0.02, ge=0)
    sigma3: float = Field(0.01, ge=0)
    rot_sigma1: float = Field(0.4, ge=0)
    rot_sigma2: float = Field(0.2, ge=0)
    rot_sigma3: float = Field(0.1, ge=0)
    w1: float = Field(0.8, ge=0, le=1)
    w2: float = Field(0.2, ge=0, le=1)

    @model_validator(mode="after")
    def _weights(self):
        if abs(self.w1 + self.w2 - 1.0) > 1e-9:
            raise ValueError("ActionModelParams: w1 + w2 must equal 1")
        return self


class FilterSection(_Section):
    n_particles: int = Field(625, ge=1)
    iterations: int = Field(25, ge=1)
    epsilon: float = Field(0.008, gt=0)
    diffusion: DiffusionSection = Field(default_factory=DiffusionSection)
    action_model: ActionModelSection = Field(default_factory=ActionModelSection)


class DetectionSection(_Section):
    sigma_c: float = 0.1
    min_box_confidence: float = Field(0.0, ge=0, le=1)
    rejection_threshold: float = Field(0.1, ge=0, le=1)

    @field_validator("sigma_c")
    @classmethod
    def _sigma_c(cls, v):
        if not 0.0 < v < 1.0:
            raise ValueError("sigma_c must be in (0,1)")
        return v


class AssociationSection(_Section):
    K: int = Field(3, ge=1)
    score_threshold: float = Field(0.05, ge=0)


class DetectorSection(_Section):
    miss_rate: float = Field(0.0, ge=0, le=1)
    false_positive_rate: float = Field(0.0, ge=0)
    bbox_jitter_sigma: float = Field(0.0, ge=0)
    label_accuracy: float = Field(1.0, ge=0, le=1)
    # null means one-hot confidences
    confidence_concentration: float | None = Field(None, gt=0)
    box_confidence_range: tuple[float, float] = (1.0, 1.0)
    fp_box_confidence_range: tuple[float, float] = (0.3, 0.8)
    min_visible_fraction: float = Field(0.25, ge=0, le=1)

    @model_validator(mode="after")
    def _ranges(self):
        for name in ("box_confidence_range", "fp_box_confidence_range"):
            lo, hi = getattr(self, name)
            if not 0.0 <= lo <= hi <= 1.0:
                raise ValueError(f"{name} must satisfy 0 <= lo <= hi <= 1")
        return self


class ExecutionSection(_Section):
    pick_success_prob: float = Field(1.0, ge=0, le=1)
    place_sigma: float = Field(0.0, ge=0)
    fail_jitter_sigma: float = Field(0.0, ge=0)
    bystander_sigma: float = Field(0.0, ge=0)
    far_fail_prob: float = Field(0.0, ge=0, le=1)
    far_fail_sigma: float = Field(0.3, ge=0)


class SequenceSection(_Section):
    # null means three trials per object
    trial_cap: int | None = Field(None, ge=1)
    max_idle_frames: int = Field(3, ge=1)
    frames_per_scene: int = Field(1, ge=1)


class ExperimentConfig(_Section):
    mode: Literal["single_scene", "sequential"]
    seeds: list[int] = Field(min_length=1)
    # single-scene mode: scene ids crossed with seeds; null pairs each seed with itself
    scenes: list[int] | None = None
    rotation_metric: Literal["per_axis", "geodesic"] = "per_axis"
    camera: CameraSection = Field(default_factory=CameraSection)
    scene: SceneSection = Field(default_factory=SceneSection)
    filter: FilterSection = Field(default_factory=FilterSection)
    detection: DetectionSection = Field(default_factory=DetectionSection)
    association: AssociationSection = Field(default_factory=AssociationSection)
    detector: DetectorSection = Field(default_factory=DetectorSection)
    execution: ExecutionSection = Field(default_factory=ExecutionSection)
    sequence: SequenceSection = Field(default_factory=SequenceSection)

    def runs(self) -> list[tuple[int, int]]:
        """(scene id, seed) pairs to execute."""
        if self.mode == "single_scene" and self.scenes is not None:
            return [(sc, s) for sc in self.scenes for s in self.seeds]
        return [(s, s) for s in self.seeds]

    def trial_cap(self) -> int:
        return self.sequence.trial_cap or 3 * self.scene.object_count


# (dotted path, value) pairs pinned to the reference setup
REFERENCE_DEFAULTS = {
    "filter.n_particles": 625,
    "filter.iterations": 25,
    "filter.epsilon": 0.008,
    "detection.sigma_c": 0.1,
    "filter.action_model.sigma1": 0.04,
    "filter.action_model.sigma2": 0.02,
    "filter.action_model.sigma3": 0.01,
}


def _format_error(err: dict) -> str:
    loc = ".".join(str(p) for p in err["loc"])
    msg = err["msg"]
    if msg.startswith("Value error, "):
        msg = msg[len("Value error, "):]
    if err["type"] == "missing":
        msg = "required field missing"
    elif err["type"] == "extra_forbidden":
        msg = "unknown field"
    return f"{loc}: {msg}" if loc else msg


def _violations(exc: ValidationError) -> list[str]:
    return [_format_error(e) for e in exc.errors()]


def set_path(data: dict, dotted: str, value: Any) -> None:
    keys = dotted.split(".")
    node = data
    for k in keys[:-1]:
        nxt = node.setdefault(k, {})
        if not isinstance(nxt, dict):
            raise ConfigError([f"{dotted}: cannot descend into non-mapping {k!r}"])
        node = nxt
    node[keys[-1]] = value


def parse_override(text: str) -> tuple[str, Any]:
    if "=" not in text:
        raise ConfigError([f"override {text!r} must look like key=value"])
    key, raw = text.split("=", 1)
    return key.strip(), yaml.safe_load(raw)


def read_config_file(path) -> dict:
    try:
        with open(path) as fh:
            data = yaml.safe_load(fh)
    except yaml.YAMLError as exc:
        raise ConfigError([f"{path}: not valid YAML ({exc})"]) from exc
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError([f"{path}: top level must be a mapping"])
    return data


def merge(base: dict, top: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in top.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def build_config(file_data: dict | None = None, overrides: dict | None = None) -> ExperimentConfig:
    """Validate ``file_data`` with dotted-path ``overrides`` applied on top."""
    data = copy.deepcopy(file_data or {})
    for key, value in (overrides or {}).items():
        set_path(data, key, value)
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(_violations(exc)) from None


def load_config(path=None, overrides: dict | None = None) -> ExperimentConfig:
    return build_config(read_config_file(path) if path else {}, overrides)


def validate_data(data: dict) -> list[str]:
    """Every violation in ``data`` (empty when valid)."""
    try:
        ExperimentConfig.model_validate(data)
    except ValidationError as exc:
        return _violations(exc)
    return []


def get_path(cfg: BaseModel, dotted: str):
    node = cfg
    for k in dotted.split("."):
        node = getattr(node, k)
    return node


def reference_default_report(cfg: ExperimentConfig) -> list[tuple[str, Any, bool]]:
    """(field, value, matches the reference default) for each sourced field."""
    return [(k, get_path(cfg, k), math.isclose(get_path(cfg, k), v)) for k, v in REFERENCE_DEFAULTS.items()]


@dataclass(frozen=True, eq=False)
class Runtime:
    """Runtime objects derived from a validated config."""

    config: ExperimentConfig
    registry: LabelRegistry
    models: dict[str, ObjectModel]
    camera: CameraIntrinsics
    camera_pose: Pose6D
    workspace: Workspace
    table: Table
    bins: tuple[Bin, ...]
    likelihood: LikelihoodParams
    diffusion: DiffusionParams
    action_model: ActionModelParams
    association: AssociationParams
    detector: DetectorNoiseConfig
    execution: ExecutionNoiseConfig


def make_runtime(cfg: ExperimentConfig) -> Runtime:
    objects = {name: (o.category, o.model_dump(exclude={"category"}, exclude_none=True))
               for name, o in cfg.scene.objects.items()}
    registry, models = build_models(objects)
    cam = CameraIntrinsics(**cfg.camera.model_dump(exclude={"eye", "target"}))
    det = cfg.detector
    conc = np.inf if det.confidence_concentration is None else det.confidence_concentration
    confusion = None if det.label_accuracy == 1.0 else uniform_confusion(len(registry), det.label_accuracy)
    return Runtime(
        config=cfg,
        registry=registry,
        models=models,
        camera=cam,
        camera_pose=look_at(cfg.camera.eye, cfg.camera.target),
        workspace=Workspace(cfg.scene.workspace_lo, cfg.scene.workspace_hi),
        table=Table(height=cfg.scene.table_height, placement_half_extent=cfg.scene.placement_half_extent),
        bins=default_bins(),
        likelihood=LikelihoodParams(cfg.filter.epsilon),
        diffusion=DiffusionParams(**cfg.filter.diffusion.model_dump()),
        action_model=ActionModelParams(**cfg.filter.action_model.model_dump()),
        association=AssociationParams(cfg.association.K, cfg.association.score_threshold),
        detector=DetectorNoiseConfig(
            miss_rate=det.miss_rate,
            false_positive_rate=det.false_positive_rate,
            bbox_jitter_sigma=det.bbox_jitter_sigma,
            confusion=confusion,
            confidence_concentration=conc,
            box_confidence_range=det.box_confidence_range,
            fp_box_confidence_range=det.fp_box_confidence_range,
            min_visible_fraction=det.min_visible_fraction,
        ),
        execution=ExecutionNoiseConfig(**cfg.execution.model_dump()),
    )


# moderate detector/sensor noise used by the rejection and accuracy runs
MODERATE_NOISE = {
    "detector.miss_rate": 0.1,
    "detector.false_positive_rate": 1.0,
    "detector.bbox_jitter_sigma": 2.0,
    "detector.label_accuracy": 0.9,
    "detector.confidence_concentration": 20.0,
    "detector.box_confidence_range": [0.6, 1.0],
    "detector.fp_box_confidence_range": [0.2, 0.7],
    "scene.depth_noise_sigma": 0.002,
}
