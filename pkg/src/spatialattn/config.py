"""Experiment configuration: INI files with one section per subsystem.

Every key has a default, unknown keys are rejected, and derived quantities
(bin count, channel count, delay in stacked frames) are resolved at load time.
"""
from __future__ import annotations

import configparser
import hashlib
import io
import json
from pathlib import Path
from typing import Literal

from pydantic import (
    BaseModel,
    ConfigDict,
    Field,
    ValidationError,
    field_validator,
    model_validator,
)

from .attention import AttentionMode
from .dsp import next_pow2
from .model import VARIANTS, ModelSpec

DEFAULT_VARIANTS = ",".join(VARIANTS)


class ConfigError(ValueError):
    pass


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class DspSection(_Section):
    sample_rate: int = Field(16000, gt=0)
    window_len_s: float = Field(0.025, gt=0)
    hop_s: float = Field(0.010, gt=0)
    fft_size: int = Field(0, ge=0, description="0 selects the next power of two >= window")
    window: Literal["hann", "rect"] = "hann"

    @property
    def win_samples(self) -> int:
        return int(round(self.window_len_s * self.sample_rate))

    @property
    def hop_samples(self) -> int:
        return int(round(self.hop_s * self.sample_rate))

    @property
    def resolved_fft_size(self) -> int:
        return self.fft_size or next_pow2(self.win_samples)


class ArraySection(_Section):
    width_m: float = Field(0.06, gt=0)
    depth_m: float = Field(0.07, gt=0)
    speed_of_sound: float = Field(343.0, gt=0)


class SimulationSection(_Section):
    train_count: int = Field(500, ge=0)
    eval_count: int = Field(100, ge=0)
    n_classes: int = Field(10, ge=1)
    duration_s: float = Field(2.0, gt=0)
    snr_min_db: float = 0.0
    snr_max_db: float = 25.0
    elevation_min_deg: float = Field(-20.0, ge=-90, le=90)
    elevation_max_deg: float = Field(20.0, ge=-90, le=90)
    distance_min_m: float = Field(1.0, gt=0)
    distance_max_m: float = Field(4.0, gt=0)
    min_separation_deg: float = Field(30.0, ge=0, lt=180)
    reflection_order: int = Field(1, ge=0, le=1)
    reflection_coeff: float = Field(0.5, ge=0, le=1)
    wav_format: Literal["float32", "pcm16"] = "float32"


class FrontendSection(_Section):
    p: int = Field(6, ge=1)
    l: int = Field(32, ge=1)  # noqa: E741
    init: Literal["steering", "random"] = "steering"
    init_noise: float = Field(0.01, ge=0)


class AttentionSection(_Section):
    mode: Literal["online", "offline", "latency"] = "online"
    window: int = Field(50, ge=1)
    latency_frames: int = Field(50, ge=0)
    latency_reduce: Literal["mean", "frame"] = "mean"
    hidden: int = Field(64, ge=1)
    layers: int = Field(2, ge=1)


class BackendSection(_Section):
    hidden: int = Field(128, ge=1)
    layers: int = Field(2, ge=1)
    stack: int = Field(8, ge=1)
    stride: int = Field(3, ge=1)
    delay_frames: int = Field(10, ge=0, description="prediction delay in input frames")


class TrainingSection(_Section):
    epochs: int = Field(20, ge=0)
    lr: float = Field(0.001, gt=0)
    batch_size: int = Field(16, ge=1)
    variant: str = "attention-online"
    seed: int = 0
    patience: int = Field(1, ge=1)
    beta1: float = Field(0.9, ge=0, lt=1)
    beta2: float = Field(0.999, ge=0, lt=1)
    eps: float = Field(1e-8, gt=0)
    clip_norm: float = Field(5.0, ge=0)
    val_fraction: float = Field(0.1, ge=0, lt=1)

    @field_validator("variant")
    @classmethod
    def _known_variant(cls, v):
        if v not in VARIANTS:
            raise ValueError(f"must be one of {', '.join(VARIANTS)}")
        return v


class ExperimentSection(_Section):
    variants: str = DEFAULT_VARIANTS
    simulate: bool = True

    @field_validator("variants")
    @classmethod
    def _known_variants(cls, v):
        names = [s.strip() for s in v.split(",") if s.strip()]
        if not names:
            raise ValueError("at least one variant is required")
        bad = [n for n in names if n not in VARIANTS]
        if bad:
            raise ValueError(f"unknown variants {bad}; expected among {', '.join(VARIANTS)}")
        return ",".join(names)

    @property
    def variant_list(self) -> list[str]:
        return self.variants.split(",")


class PathsSection(_Section):
    data: str = ""
    eval_data: str = ""
    out: str = ""


class ExperimentConfig(_Section):
    dsp: DspSection = DspSection()
    array: ArraySection = ArraySection()
    simulation: SimulationSection = SimulationSection()
    frontend: FrontendSection = FrontendSection()
    attention: AttentionSection = AttentionSection()
    backend: BackendSection = BackendSection()
    training: TrainingSection = TrainingSection()
    experiment: ExperimentSection = ExperimentSection()
    paths: PathsSection = PathsSection()

    @model_validator(mode="after")
    def _cross_check(self):
        d = self.dsp
        for key, sec in (("dsp.window_len_s", d.window_len_s), ("dsp.hop_s", d.hop_s)):
            n = sec * d.sample_rate
            if abs(n - round(n)) > 1e-9 or round(n) < 1:
                raise ValueError(f"{key}: {sec} s is not a whole number of samples at {d.sample_rate} Hz")
        if d.fft_size and d.fft_size < d.win_samples:
            raise ValueError(f"dsp.fft_size: {d.fft_size} is shorter than the {d.win_samples}-sample window")
        s = self.simulation
        if s.snr_max_db < s.snr_min_db:
            raise ValueError("simulation.snr_max_db: below simulation.snr_min_db")
        if s.elevation_max_deg < s.elevation_min_deg:
            raise ValueError("simulation.elevation_max_deg: below simulation.elevation_min_deg")
        if s.distance_max_m < s.distance_min_m:
            raise ValueError("simulation.distance_max_m: below simulation.distance_min_m")
        n_frames = 1 + (int(round(s.duration_s * d.sample_rate)) - d.win_samples) // d.hop_samples
        if n_frames < self.backend.stack:
            raise ValueError(f"simulation.duration_s: {n_frames} frames is shorter than backend.stack")
        n_stacked = 1 + (n_frames - self.backend.stack) // self.backend.stride
        if self.delay_stacked >= n_stacked:
            raise ValueError("backend.delay_frames: delay leaves no valid prediction positions")
        return self

    # derived -----------------------------------------------------------------
    @property
    def n_bins(self) -> int:
        return self.dsp.resolved_fft_size // 2 + 1

    @property
    def n_channels(self) -> int:
        return 4  # rectangle geometry

    @property
    def n_outputs(self) -> int:
        return self.simulation.n_classes + 1  # + silence

    @property
    def delay_stacked(self) -> int:
        return int(round(self.backend.delay_frames / self.backend.stride))

    def model_spec(self, variant: str | None = None) -> ModelSpec:
        a, b = self.attention, self.backend
        return ModelSpec(
            n_channels=self.n_channels, n_bins=self.n_bins,
            n_directions=self.frontend.p, n_features=self.frontend.l, n_classes=self.n_outputs,
            variant=variant or self.training.variant,
            attention_mode=AttentionMode(a.mode, a.window, a.latency_frames, a.latency_reduce),
            attention_hidden=a.hidden, attention_layers=a.layers,
            backend_hidden=b.hidden, backend_layers=b.layers,
            stack=b.stack, stride=b.stride, delay=self.delay_stacked,
        )

    def with_overrides(self, **sections) -> "ExperimentConfig":
        """``cfg.with_overrides(training={"seed": 3})`` -> new validated config."""
        data = self.model_dump()
        for sec, values in sections.items():
            data[sec].update(values)
        return ExperimentConfig.model_validate(data)

    def resolved(self) -> dict:
        data = self.model_dump()
        data["derived"] = {
            "fft_size": self.dsp.resolved_fft_size, "f": self.n_bins, "m": self.n_channels,
            "n_outputs": self.n_outputs, "delay_stacked": self.delay_stacked,
        }
        return data

    def digest(self) -> str:
        data = self.resolved()
        data.pop("paths")
        blob = json.dumps(data, sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()

    def dumps(self) -> str:
        cp = configparser.ConfigParser()
        for sec, values in self.resolved().items():
            cp[sec] = {k: _fmt(v) for k, v in values.items()}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def _format_error(exc: ValidationError) -> str:
    lines = []
    for err in exc.errors():
        loc = ".".join(str(p) for p in err["loc"])
        msg = err["msg"]
        lines.append(f"{loc}: {msg}" if loc else msg)
    return "; ".join(lines)


def load_config_text(text: str) -> ExperimentConfig:
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    cp.read_string(text)
    data = {sec: dict(cp[sec]) for sec in cp.sections()}
    data.pop("derived", None)  # echoed by dumps(); recomputed on load
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(_format_error(exc)) from None


def parse_config(path: str | Path | None) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    return load_config_text(path.read_text())
