"""Experiment configuration (YAML or JSON on disk)."""

from __future__ import annotations

import json
import math
from pathlib import Path
from typing import Literal, Optional

import numpy as np
import yaml
from pydantic import BaseModel, ConfigDict, Field, model_validator

from . import features, model, propagation
from .io import config_hash


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class EnvironmentSection(_Strict):
    water_depth: float = 30.0
    sound_speed: float = 1500.0
    surface_reflection: float = -1.0
    bottom_reflection: float = 0.7
    max_image_order: int = 2

    def build(self) -> propagation.EnvironmentModel:
        return propagation.EnvironmentModel(**self.model_dump())


class ArraySection(_Strict):
    spacing: float = 14.0
    height_above_floor: float = 1.0

    def build(self) -> propagation.SensorArray:
        return propagation.SensorArray(**self.model_dump())


class SourceSection(_Strict):
    band: tuple[float, float] = (100.0, 10000.0)
    slope_db_per_octave: float = -3.0
    source_level: float = 150.0
    tonals: list[tuple[float, float]] = Field(default_factory=list)

    def build(self) -> propagation.SourceSpec:
        return propagation.SourceSpec(band=tuple(self.band),
                                      slope_db_per_octave=self.slope_db_per_octave,
                                      source_level=self.source_level,
                                      tonals=tuple(tuple(t) for t in self.tonals))


def _default_generalization_vessel() -> SourceSection:
    return SourceSection(band=(150.0, 8000.0), slope_db_per_octave=-6.0, source_level=140.0,
                         tonals=[(180.0, 125.0), (720.0, 120.0)])


class TransitSection(_Strict):
    n_train: int = 8
    n_test: int = 2
    n_generalization: int = 2
    max_range: float = 500.0
    generalization_max_range: float = 300.0
    speed: tuple[float, float] = (6.0, 8.0)
    cpa_offset: tuple[float, float] = (5.0, 40.0)
    source_depth: float = 1.0
    snr_db: tuple[float, float] = (10.0, 20.0)
    heading_jitter_deg: float = 10.0


class FramingSection(_Strict):
    frame_duration: float = 16384 / 250_000
    overlap: float = 0.5
    window: Literal["hann", "none"] = "hann"

    def build(self, fs: float) -> features.FramingConfig:
        f = features.FramingConfig.for_rate(fs, self.frame_duration, self.overlap)
        return features.FramingConfig(f.frame_length, f.hop, fs, self.window)


class WindowSection(_Strict):
    q_min: float = features.DEFAULT_QUEFRENCY_MIN
    q_max: float = features.DEFAULT_QUEFRENCY_MAX
    gcc_factor: int = 10
    gcc_margin: float = features.GCC_MARGIN
    weighting: Literal["phat", "none"] = "phat"


class StratifySection(_Strict):
    range_bins: int = 10
    per_bin: int = 2000
    val_fraction: float = 0.05


class NetSection(_Strict):
    kernel_length: int = 10
    filters: int = 48
    dense_units: int = 256
    # desk defaults; 0.5 dropout and dense batch norm stall training on ~20k frames
    dropout: float = 0.0
    batchnorm_conv: bool = True
    batchnorm_dense: bool = False


class TrainSection(_Strict):
    batch_size: int = 32
    lr: float = 1e-2
    momentum: float = 0.9
    weight_decay: float = 1e-5
    patience: int = 3
    min_delta: float = 1e-4
    max_epochs: int = 15
    alpha: float = 0.5
    range_scale: Optional[float] = None


class EvalSection(_Strict):
    range_bins: int = 10
    bearing_bins: int = 9
    endfire_deg: float = 20.0


class ExperimentConfig(_Strict):
    seed: int = 2024
    fs: float = 25_000.0
    environment: EnvironmentSection = EnvironmentSection()
    array: ArraySection = ArraySection()
    train_vessel: SourceSection = SourceSection()
    generalization_vessel: SourceSection = Field(default_factory=_default_generalization_vessel)
    transits: TransitSection = TransitSection()
    framing: FramingSection = FramingSection()
    windows: WindowSection = WindowSection()
    stratify: StratifySection = StratifySection()
    net: NetSection = NetSection()
    train: TrainSection = TrainSection()
    eval: EvalSection = EvalSection()
    variants: list[Literal["combined", "gcc_only", "cepstral_only"]] = Field(
        default_factory=lambda: list(model.VARIANTS))

    @model_validator(mode="after")
    def _check(self):
        # building the sub-objects runs their own invariant checks
        self.environment.build()
        self.array.build()
        for vessel in (self.train_vessel, self.generalization_vessel):
            spec = vessel.build()
            if spec.band[1] >= self.fs / 2:
                raise ValueError(f"source band edge {spec.band[1]} Hz >= fs/2")
        self.framing.build(self.fs)
        if self.transits.n_train < 2:
            raise ValueError("need at least two training transits (one is held out for validation)")
        return self

    # derived objects -------------------------------------------------------

    def feature_windows(self) -> features.FeatureWindows:
        return features.FeatureWindows(
            q_min=self.windows.q_min, q_max=self.windows.q_max, spacing=self.array.spacing,
            sound_speed=self.environment.sound_speed, gcc_factor=self.windows.gcc_factor,
            gcc_margin=self.windows.gcc_margin, weighting=self.windows.weighting)

    def range_scale(self) -> float:
        return self.train.range_scale or self.transits.max_range

    def net_config(self, variant: str) -> model.NetConfig:
        cep_shape, gcc_shape = self.feature_windows().shapes(self.fs)
        return model.NetConfig(variant=variant, cep_shape=cep_shape, gcc_shape=gcc_shape,
                               seed=derive_seed(self.seed, "net"), **self.net.model_dump())

    def train_config(self) -> model.TrainConfig:
        t = self.train
        return model.TrainConfig(batch_size=t.batch_size, lr=t.lr, momentum=t.momentum,
                                 weight_decay=t.weight_decay, patience=t.patience,
                                 min_delta=t.min_delta, max_epochs=t.max_epochs,
                                 seed=derive_seed(self.seed, "train"))

    def loss_params(self) -> model.LossParams:
        return model.LossParams(alpha=self.train.alpha, range_scale=self.range_scale())

    def as_dict(self) -> dict:
        return json.loads(self.model_dump_json())

    def hash(self) -> str:
        return config_hash(self.as_dict())


_TAGS = {"plan": 1, "sim": 2, "net": 3, "train": 4, "stratify": 5}
KINDS = ("train", "test", "generalization")


def derive_seed(master: int, tag: str, *keys: int) -> int:
    ss = np.random.SeedSequence(entropy=master, spawn_key=(_TAGS[tag], *keys))
    return int(ss.generate_state(1)[0])


def load_config(path=None, seed: Optional[int] = None) -> ExperimentConfig:
    data = {}
    if path is not None:
        text = Path(path).read_text()
        data = yaml.safe_load(text) or {}
    if seed is not None:
        data["seed"] = seed
    return ExperimentConfig.model_validate(data)


def transit_plans(cfg: ExperimentConfig, kind: str) -> list[dict]:
    """Deterministic plan parameters for every transit of ``kind``.

    Headings are spread evenly over [0, pi) with small jitter so that each set
    covers both near-endfire and near-broadside passages.
    """
    t = cfg.transits
    n = {"train": t.n_train, "test": t.n_test, "generalization": t.n_generalization}[kind]
    max_range = t.generalization_max_range if kind == "generalization" else t.max_range
    k = KINDS.index(kind)
    jitter = math.radians(t.heading_jitter_deg)
    plans = []
    for i in range(n):
        rng = np.random.default_rng(derive_seed(cfg.seed, "plan", k, i))
        heading = (math.pi * i / n + rng.uniform(-jitter, jitter)) % math.pi
        offset = rng.uniform(*t.cpa_offset) * rng.choice([-1.0, 1.0])
        plans.append({
            "kind": kind, "index": i, "heading": heading, "cpa_offset": offset,
            "speed": rng.uniform(*t.speed), "snr_db": rng.uniform(*t.snr_db),
            "max_range": max_range, "depth": t.source_depth,
            "seed": derive_seed(cfg.seed, "sim", k, i),
        })
    return plans
