"""Typed experiment configuration.

Defaults reproduce the YOLOv5-family hyper-parameters for the loss weights
and learning rates; iteration and epoch budgets are scaled to the 64 px
shapes task. Unknown keys are rejected, and validation errors name the key.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Literal, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator


class ConfigError(ValueError):
    pass


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", strict=True, validate_assignment=True)


class DatasetSpec(_Section):
    num_images: int = Field(5000, gt=0)
    image_size: int = Field(64, gt=0)
    num_classes: int = Field(6, ge=1, le=8)
    max_objects: int = Field(6, ge=1)
    count_p: float = Field(0.5, gt=0, lt=1)
    class_decay: float = Field(0.7, gt=0, le=1)
    min_size: float = Field(0.2, gt=0, lt=1)
    max_size: float = Field(0.45, gt=0, lt=1)
    val_fraction: float = Field(0.2, ge=0, lt=1)
    seed: int = 0

    @property
    def class_weights(self) -> np.ndarray:
        w = self.class_decay ** np.arange(self.num_classes)
        return w / w.sum()

    @property
    def count_probs(self) -> np.ndarray:
        p = (1.0 - self.count_p) ** np.arange(self.max_objects)
        return p / p.sum()


class ModelConfig(_Section):
    channels: list[int] = Field(default_factory=lambda: [16, 32, 64])
    seed: int = 0


class TeacherConfig(_Section):
    epochs: int = Field(15, gt=0)
    batch_size: int = Field(32, gt=0)
    lr: float = Field(3e-3, gt=0)
    weight_decay: float = Field(0.0, ge=0)
    loss_weights: list[float] = Field(default_factory=lambda: [0.05, 1.0, 0.5])
    eval_every: int = Field(0, ge=0)
    seed: int = 0


class SynthesisConfig(_Section):
    alpha_prior: float = Field(0.01, ge=0)
    alpha_detect: float = Field(0.5, ge=0)
    alpha_tv: float = Field(0.0, ge=0)
    alpha_l2: float = Field(5e-4, ge=0)
    iterations: int = Field(300, gt=0)
    label_iterations: int = Field(150, gt=0)
    lr: float = Field(1e-2, gt=0)
    resolution: int = Field(64, gt=0)
    low_res_factor: int = Field(4, ge=1)
    relabel_interval: Optional[int] = Field(None, gt=0)
    conf_thresh: float = Field(0.5, gt=0, lt=1)
    iou_thresh: float = Field(0.45, gt=0, lt=1)
    cutout_enabled: bool = True
    batch_size: int = Field(32, gt=0)
    seed: int = 0

    @property
    def low_resolution(self) -> int:
        return self.resolution // self.low_res_factor

    @property
    def interval(self) -> int:
        return self.relabel_interval or max(1, self.label_iterations // 10)

    @model_validator(mode="after")
    def _geometry(self):
        if self.resolution % 8 or self.low_resolution % 8 or self.low_resolution == 0:
            raise ValueError(f"resolution {self.resolution} and low resolution "
                             f"{self.low_resolution} must be divisible by the model stride 8")
        return self


class QATConfig(_Section):
    beta_kl: float = Field(0.1, ge=0)
    beta_feat: float = Field(1.0, ge=0)
    beta_detect: float = Field(0.04, ge=0)
    tau: float = 1.0
    epochs: int = Field(10, ge=0)
    batch_size: int = Field(32, gt=0)
    lr: float = Field(3e-5, gt=0)
    b_w: int = Field(8, ge=2)
    b_a: int = Field(8, ge=2)
    asymmetric_act: bool = False
    kd_objectness: bool = True
    feature_layers: list[str] = Field(default_factory=lambda: ["stage1", "stage2", "stage3"])
    student_bn: Literal["train", "eval"] = "eval"
    seed: int = 0

    @field_validator("tau")
    @classmethod
    def _tau(cls, v):
        if not v > 0:
            raise ValueError("tau must be > 0")
        return v

    @model_validator(mode="after")
    def _some_loss(self):
        if self.beta_kl <= 0 and self.beta_feat <= 0 and self.beta_detect <= 0:
            raise ValueError("at least one of beta_kl, beta_feat, beta_detect must be > 0")
        return self


class EvalConfig(_Section):
    conf_thresh: float = Field(0.001, ge=0, lt=1)
    nms_iou: float = Field(0.6, gt=0, le=1)


class BaselineConfig(_Section):
    count: int = Field(256, gt=0)
    multisample_out_count: int = Field(3, ge=1)
    tile_out_k: int = Field(2, ge=1)
    bits: list[str] = Field(default_factory=lambda: ["w6a6"])
    seeds: list[int] = Field(default_factory=lambda: [0])
    methods: list[str] = Field(default_factory=lambda: [
        "real", "adaptive", "multisample-in", "multisample-out", "tile-in", "tile-out", "gaussian"])
    detect_arms: list[bool] = Field(default_factory=lambda: [True, False])


class ExperimentConfig(_Section):
    seed: int = 0
    data: DatasetSpec = Field(default_factory=DatasetSpec)
    model: ModelConfig = Field(default_factory=ModelConfig)
    teacher: TeacherConfig = Field(default_factory=TeacherConfig)
    synthesis: SynthesisConfig = Field(default_factory=SynthesisConfig)
    qat: QATConfig = Field(default_factory=QATConfig)
    eval: EvalConfig = Field(default_factory=EvalConfig)
    baselines: BaselineConfig = Field(default_factory=BaselineConfig)

    def canonical_json(self) -> str:
        return json.dumps(self.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))

    def digest(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()


def _error_message(exc: ValidationError) -> str:
    parts = []
    for err in exc.errors():
        key = ".".join(str(p) for p in err["loc"]) or "<root>"
        parts.append(f"{key}: {err['msg']}")
    return "; ".join(parts)


def config_from_dict(doc: dict) -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate(doc)
    except ValidationError as exc:
        raise ConfigError(_error_message(exc)) from None


def load_config(path=None) -> ExperimentConfig:
    """Parse a JSON config file; ``None`` yields all defaults."""
    if path is None:
        return ExperimentConfig()
    try:
        doc = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: malformed JSON at line {exc.lineno}: {exc.msg}") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return config_from_dict(doc)


def _parse_scalar(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(cfg: ExperimentConfig, overrides: dict[str, object]) -> ExperimentConfig:
    """Apply dotted-key overrides (``"qat.tau": 2.0``) on top of ``cfg``."""
    doc = cfg.model_dump(mode="json")
    for key, value in overrides.items():
        if isinstance(value, str):
            value = _parse_scalar(value)
        node = doc
        parts = key.split(".")
        for p in parts[:-1]:
            if not isinstance(node.get(p), dict):
                raise ConfigError(f"{key}: unknown config section {p!r}")
            node = node[p]
        if parts[-1] not in node:
            raise ConfigError(f"{key}: unknown config key")
        node[parts[-1]] = value
    return config_from_dict(doc)
