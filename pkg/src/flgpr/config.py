"""Experiment configuration: YAML file validated against a pydantic schema."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Literal

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .classifiers import CLASSIFIERS
from .dataset import CHANNELS, DEFAULT_BRIGHT_CLUTTER, DEFAULT_SNR, LaneSpec, SignatureParams

FEATURE_CONFIGS = ("Raw", "SIFT", "LSTAT", "FFT2D", "LogGabor",
                   "BOV(Raw)", "BOV(SIFT)", "FV(Raw)", "FV(SIFT)")


class ConfigError(ValueError):
    """Schema violation; the message starts with the offending field path."""


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class LaneConfig(_Strict):
    lane_id: str
    length_m: float = Field(gt=0)
    width_m: float = Field(gt=0)
    n_targets: int = Field(ge=0)
    n_metal: int | None = None
    target_snr_db: dict[str, tuple[float, float]] = Field(
        default_factory=lambda: {k: tuple(v) for k, v in DEFAULT_SNR.items()})
    clutter_density: float = Field(0.05, ge=0)
    clutter_bright_prob: dict[str, float] = Field(
        default_factory=lambda: dict(DEFAULT_BRIGHT_CLUTTER))
    frame_spacing_m: float = Field(2.0, gt=0)
    seed: int | None = None  # default: experiment seed * 1000 + lane index
    signature: dict = Field(default_factory=dict)

    @field_validator("target_snr_db", "clutter_bright_prob")
    @classmethod
    def _channels(cls, v):
        for ch in v:
            if ch not in CHANNELS:
                raise ValueError(f"unknown polarization {ch!r}")
        return v

    @field_validator("signature")
    @classmethod
    def _signature(cls, v):
        known = set(SignatureParams.__dataclass_fields__)
        bad = set(v) - known
        if bad:
            raise ValueError(f"unknown signature parameter(s) {sorted(bad)}")
        return v

    def to_spec(self, default_seed: int, channels) -> LaneSpec:
        sig = SignatureParams(**{k: tuple(x) if isinstance(x, list) else x
                                 for k, x in self.signature.items()})
        return LaneSpec(self.lane_id, self.length_m, self.width_m, self.n_targets,
                        {k: tuple(v) for k, v in self.target_snr_db.items()},
                        self.clutter_density, dict(self.clutter_bright_prob), self.frame_spacing_m,
                        default_seed if self.seed is None else self.seed, self.n_metal,
                        tuple(channels), sig)


class PrescreenerConfig(_Strict):
    channel: Literal["HH", "VV", "VH"] = "VV"
    fore_px: int = Field(40, ge=2)
    back_px: int = Field(80, ge=4)
    min_confidence: float = Field(0.004, ge=0)
    radius_m: float = Field(1.0, gt=0)

    @model_validator(mode="after")
    def _windows(self):
        if self.back_px <= self.fore_px:
            raise ValueError("back_px must exceed fore_px")
        return self


class FeatureConfig(_Strict):
    kinds: list[str] = Field(default_factory=lambda: list(FEATURE_CONFIGS))
    polarizations: list[Literal["HH", "VV", "VH"]] = Field(default_factory=lambda: list(CHANNELS))

    @field_validator("kinds")
    @classmethod
    def _kinds(cls, v):
        for k in v:
            if k not in FEATURE_CONFIGS:
                raise ValueError(f"unknown feature kind {k!r}; choose from {list(FEATURE_CONFIGS)}")
        if len(set(v)) != len(v):
            raise ValueError("duplicate feature kinds")
        return v


class EncoderConfig(_Strict):
    K: int = Field(30, ge=1)
    pooling: int = Field(2, ge=1)
    raw_window: int = Field(11, ge=2)
    raw_stride: int = Field(7, ge=1)
    sift_window: int = Field(8, ge=4)
    sift_stride: int = Field(8, ge=1)
    max_fit_descriptors: int = Field(20000, ge=2)
    zca_eps_scale: float = Field(1e-2, ge=0)
    kmeans_max_iter: int = Field(100, ge=1)
    gmm_max_iter: int = Field(200, ge=1)
    gmm_tol: float = Field(1e-6, gt=0)
    fv_normalize: bool = False


class ClassifierConfig(_Strict):
    kinds: list[str] = Field(default_factory=lambda: list(CLASSIFIERS))
    plsda_components: int = Field(5, ge=1)
    svm_C: float = Field(1.0, gt=0)
    svm_tol: float = Field(1e-3, gt=0)

    @field_validator("kinds")
    @classmethod
    def _kinds(cls, v):
        for k in v:
            if k not in CLASSIFIERS:
                raise ValueError(f"unknown classifier {k!r}; choose from {list(CLASSIFIERS)}")
        return v


class EvaluationConfig(_Strict):
    halo_m: float = Field(1.0, gt=0)
    far_max: float = Field(0.02, gt=0)
    far_step: float = Field(0.0005, gt=0)
    n_boot: int = Field(10, ge=2)


class FusionConfig(_Strict):
    classifier: str = "PLSDA"
    max_nf: int = Field(5, ge=1)
    inner_folds: int = Field(5, ge=2)
    auto_stop: bool = False
    repetitions: int = Field(10, ge=1)

    @field_validator("classifier")
    @classmethod
    def _clf(cls, v):
        if v not in CLASSIFIERS:
            raise ValueError(f"unknown classifier {v!r}")
        return v


class ConfmapConfig(_Strict):
    polarization: Literal["HH", "VV", "VH"] = "HH"
    max_alarms: int = Field(8, ge=1)


class ExperimentConfig(_Strict):
    seed: int
    out_dir: str = "out"
    lanes: list[LaneConfig] = Field(min_length=2)
    prescreener: PrescreenerConfig = Field(default_factory=PrescreenerConfig)
    features: FeatureConfig = Field(default_factory=FeatureConfig)
    encoders: EncoderConfig = Field(default_factory=EncoderConfig)
    classifiers: ClassifierConfig = Field(default_factory=ClassifierConfig)
    evaluation: EvaluationConfig = Field(default_factory=EvaluationConfig)
    fusion: FusionConfig = Field(default_factory=FusionConfig)
    confmap: ConfmapConfig = Field(default_factory=ConfmapConfig)

    @model_validator(mode="after")
    def _cross(self):
        ids = [l.lane_id for l in self.lanes]
        if len(set(ids)) != len(ids):
            raise ValueError("lane ids must be unique")
        need = set(self.features.polarizations) | {self.prescreener.channel}
        for i, l in enumerate(self.lanes):
            missing = need - set(l.target_snr_db)
            if missing:
                raise ValueError(f"lanes.{i}.target_snr_db lacks {sorted(missing)}")
        return self

    def channels(self):
        need = set(self.features.polarizations) | {self.prescreener.channel}
        return tuple(c for c in CHANNELS if c in need)

    def lane_specs(self) -> list[LaneSpec]:
        return [l.to_spec(self.seed * 1000 + i, self.channels()) for i, l in enumerate(self.lanes)]

    def section_hash(self, *sections) -> str:
        """Short digest of the seed plus the named config sections."""
        d = self.model_dump(mode="json")
        payload = {"seed": self.seed, **{s: d[s] for s in sections}}
        return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:10]


def _format_error(e: ValidationError) -> str:
    lines = []
    for err in e.errors():
        path = ".".join(str(p) for p in err["loc"]) or "<root>"
        lines.append(f"{path}: {err['msg']}")
    return "; ".join(lines)


def parse_config(data: dict) -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigError(_format_error(e)) from None


def load_config(path) -> ExperimentConfig:
    text = Path(path).read_text()
    data = yaml.safe_load(text)
    if not isinstance(data, dict):
        raise ConfigError(f"<root>: {path} does not hold a mapping")
    return parse_config(data)


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(cfg.model_dump(mode="json"), sort_keys=False)
