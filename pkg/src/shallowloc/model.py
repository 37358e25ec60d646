"""Dual-branch localization CNN, polar-distance loss, and training loop."""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .nn import (BatchNorm, Conv1d, Dense, Dropout, Flatten, ReLU, Sequential, SGDMomentum,
                 ShapeError, TrainingError)

log = logging.getLogger(__name__)

VARIANTS = ("combined", "gcc_only", "cepstral_only")


@dataclass(frozen=True)
class LossParams:
    alpha: float = 0.5
    range_scale: float = 500.0

    def __post_init__(self):
        if not 0 <= self.alpha <= 1:
            raise ValueError("alpha must lie in [0, 1]")
        if self.range_scale <= 0:
            raise ValueError("range_scale must be positive")


@dataclass(frozen=True)
class LabelPair:
    y: float
    theta: float


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    lr: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 1e-5
    patience: int = 3
    min_delta: float = 1e-4
    max_epochs: int = 30
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 for batch normalization")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")


@dataclass(frozen=True)
class NetConfig:
    variant: str = "combined"
    cep_shape: tuple[int, int] = (32, 3)
    gcc_shape: tuple[int, int] = (48, 2)
    kernel_length: int = 10
    filters: int = 48
    dense_units: int = 256
    dropout: float = 0.5
    batchnorm_conv: bool = True
    batchnorm_dense: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")


@dataclass
class FrameSet:
    """Stacked feature maps with labels; one row per frame."""

    cepstral: np.ndarray  # N x quefrency x 3
    gcc: np.ndarray  # N x lag x 2
    range: np.ndarray
    bearing: np.ndarray
    timestamp: np.ndarray
    transit: np.ndarray  # integer transit id per frame

    def __len__(self):
        return len(self.range)

    def subset(self, idx) -> "FrameSet":
        idx = np.asarray(idx)
        return FrameSet(self.cepstral[idx], self.gcc[idx], self.range[idx], self.bearing[idx],
                        self.timestamp[idx], self.transit[idx])

    @classmethod
    def concat(cls, sets: list["FrameSet"]) -> "FrameSet":
        return cls(*(np.concatenate([getattr(s, f) for s in sets]) for f in
                     ("cepstral", "gcc", "range", "bearing", "timestamp", "transit")))


def polar_loss(t, phi, y, theta, alpha: float):
    """Per-example loss and its gradients with respect to (t, phi).

    E = alpha * (y^2 + t^2 - 2 y t cos(theta - phi)) + (1 - alpha) * (theta - phi)^2
    """
    t, phi, y, theta = (np.asarray(v, dtype=float) for v in (t, phi, y, theta))
    diff = theta - phi
    cos_d = np.cos(diff)
    e_polar = y * y + t * t - 2 * y * t * cos_d
    e_bearing = diff * diff
    E = alpha * e_polar + (1 - alpha) * e_bearing
    dE_dt = alpha * (2 * t - 2 * y * cos_d)
    dE_dphi = -2 * alpha * y * t * np.sin(diff) + 2 * (1 - alpha) * (phi - theta)
    return E, dE_dt, dE_dphi


def loss(t, phi, label: LabelPair, params: LossParams):
    """Loss for one prediction; ``t`` is normalized range, ``label.y`` in meters."""
    E, gt, gp = polar_loss(t, phi, label.y / params.range_scale, label.theta, params.alpha)
    return float(E), float(gt), float(gp)


def _branch(shape, cfg: NetConfig, rng, prefix: str) -> tuple[Sequential, int]:
    length, width = shape
    layers = []
    in_ch = 1
    for i in range(3):
        layers.append(Conv1d(in_ch, cfg.filters, cfg.kernel_length, rng,
                             name=f"{prefix}.conv{i + 1}", input_grad=i > 0))
        if cfg.batchnorm_conv:
            layers.append(BatchNorm(cfg.filters, name=f"{prefix}.conv{i + 1}.bn"))
        layers.append(ReLU())
        in_ch = cfg.filters
        length -= cfg.kernel_length - 1
    if length < 1:
        raise ShapeError(f"{prefix} input too short for three length-{cfg.kernel_length} convolutions")
    layers.append(Flatten())
    n_in = length * width * cfg.filters
    layers.extend(_dense_block(n_in, cfg, rng, f"{prefix}.dense1"))
    layers.extend(_dense_block(cfg.dense_units, cfg, rng, f"{prefix}.dense2"))
    return Sequential(layers), cfg.dense_units


def _dense_block(n_in: int, cfg: NetConfig, rng, name: str):
    block = [Dense(n_in, cfg.dense_units, rng, name=name)]
    if cfg.batchnorm_dense:
        block.append(BatchNorm(cfg.dense_units, name=f"{name}.bn"))
    block.append(ReLU())
    block.append(Dropout(cfg.dropout))
    return block


class LocalizationNet:
    """GCC and cepstral convolutional branches feeding a shared regression head.

    Outputs column 0 = normalized range ``t``, column 1 = bearing ``phi`` (rad).
    The combined head sees ``[gcc_features | cepstral_features]``.
    """

    def __init__(self, config: NetConfig):
        self.config = config
        rng = np.random.default_rng(config.seed)
        self.gcc_branch: Optional[Sequential] = None
        self.cep_branch: Optional[Sequential] = None
        width = 0
        if config.variant in ("combined", "gcc_only"):
            self.gcc_branch, w = _branch(config.gcc_shape, config, rng, "gcc")
            width += w
        if config.variant in ("combined", "cepstral_only"):
            self.cep_branch, w = _branch(config.cep_shape, config, rng, "cep")
            width += w
        head = []
        if config.variant == "combined":
            head.extend(_dense_block(width, config, rng, "head.dense1"))
            head.extend(_dense_block(config.dense_units, config, rng, "head.dense2"))
            width = config.dense_units
        head.append(Dense(width, 2, rng, name="head.out"))
        self.head = Sequential(head)
        self.input_norm = {"cep": (0.0, 1.0), "gcc": (0.0, 1.0)}

    def modules(self) -> list[Sequential]:
        return [m for m in (self.gcc_branch, self.cep_branch, self.head) if m is not None]

    def params(self):
        return [p for m in self.modules() for p in m.params()]

    def batchnorms(self) -> list[BatchNorm]:
        return [bn for m in self.modules() for bn in m.batchnorms()]

    def n_params(self) -> int:
        return sum(p.value.size for p in self.params())

    def _check(self, x, shape, what):
        if x.shape[1:] != tuple(shape):
            raise ShapeError(f"{what} map shape {x.shape[1:]} != configured {tuple(shape)}")

    def forward(self, cepstral, gcc, train: bool = False, rng=None) -> np.ndarray:
        feats = []
        if self.gcc_branch is not None:
            gcc = np.asarray(gcc, dtype=float)
            self._check(gcc, self.config.gcc_shape, "gcc")
            mean, std = self.input_norm["gcc"]
            feats.append(self.gcc_branch.forward(((gcc - mean) / std)[..., None], train, rng))
        if self.cep_branch is not None:
            cepstral = np.asarray(cepstral, dtype=float)
            self._check(cepstral, self.config.cep_shape, "cepstral")
            mean, std = self.input_norm["cep"]
            feats.append(self.cep_branch.forward(((cepstral - mean) / std)[..., None], train, rng))
        self._split = [f.shape[1] for f in feats]
        z = np.concatenate(feats, axis=1) if len(feats) > 1 else feats[0]
        return self.head.forward(z, train, rng)

    def backward(self, dout: np.ndarray):
        dz = self.head.backward(dout)
        branches = [b for b in (self.gcc_branch, self.cep_branch) if b is not None]
        offset = 0
        for branch, width in zip(branches, self._split):
            branch.backward(dz[:, offset:offset + width])
            offset += width

    def predict(self, cepstral, gcc, batch_size: int = 512) -> np.ndarray:
        out = [self.forward(cepstral[i:i + batch_size], gcc[i:i + batch_size])
               for i in range(0, len(cepstral), batch_size)]
        return np.concatenate(out) if out else np.zeros((0, 2))

    def state(self) -> dict[str, np.ndarray]:
        """Flat name -> array mapping of parameters and batch-norm running stats."""
        st = {p.name: p.value for p in self.params()}
        for bn in self.batchnorms():
            base = bn.scale.name.rsplit(".", 1)[0]
            st[f"{base}.running_mean"] = bn.running_mean
            st[f"{base}.running_var"] = bn.running_var
        return st

    def load_state(self, state: dict[str, np.ndarray]):
        for p in self.params():
            p.value[...] = state[p.name]
        for bn in self.batchnorms():
            base = bn.scale.name.rsplit(".", 1)[0]
            bn.running_mean = np.array(state[f"{base}.running_mean"], dtype=float)
            bn.running_var = np.array(state[f"{base}.running_var"], dtype=float)


def build_variant(kind: str, **overrides) -> LocalizationNet:
    return LocalizationNet(NetConfig(variant=kind, **overrides))


def fit_input_norm(net: LocalizationNet, frames: FrameSet):
    net.input_norm = {
        "cep": (float(frames.cepstral.mean()), float(frames.cepstral.std()) or 1.0),
        "gcc": (float(frames.gcc.mean()), float(frames.gcc.std()) or 1.0),
    }


def batch_loss(net: LocalizationNet, frames: FrameSet, params: LossParams,
               train: bool = False, rng=None) -> tuple[float, np.ndarray]:
    """Mean loss over ``frames`` and the gradient with respect to the outputs."""
    out = net.forward(frames.cepstral, frames.gcc, train, rng)
    E, gt, gp = polar_loss(out[:, 0], out[:, 1], frames.range / params.range_scale,
                           frames.bearing, params.alpha)
    n = len(frames)
    return float(E.mean()), np.stack([gt, gp], axis=1) / n


def evaluate_loss(net: LocalizationNet, frames: FrameSet, params: LossParams,
                  batch_size: int = 512) -> float:
    out = net.predict(frames.cepstral, frames.gcc, batch_size)
    E, _, _ = polar_loss(out[:, 0], out[:, 1], frames.range / params.range_scale,
                         frames.bearing, params.alpha)
    return float(E.mean())


class EarlyStopping:
    """Stop once the monitored value fails to improve by ``min_delta`` for ``patience`` epochs."""

    def __init__(self, patience: int, min_delta: float = 0.0):
        self.patience = patience
        self.min_delta = min_delta
        self.best = math.inf
        self.best_epoch = -1
        self.wait = 0

    def update(self, epoch: int, value: float) -> bool:
        """Record ``value``; returns True when it is a new best."""
        if value < self.best - self.min_delta:
            self.best = value
            self.best_epoch = epoch
            self.wait = 0
            return True
        self.wait += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.wait >= self.patience


@dataclass
class History:
    epochs: list[dict] = field(default_factory=list)
    best_epoch: int = -1

    def append(self, **row):
        self.epochs.append(row)


class DivergenceError(TrainingError):
    def __init__(self, message: str, history: History):
        super().__init__(message)
        self.history = history


def train_step(net: LocalizationNet, opt: SGDMomentum, batch: FrameSet, params: LossParams,
               rng) -> float:
    plist = net.params()
    SGDMomentum.zero_grad(plist)
    E, dout = batch_loss(net, batch, params, train=True, rng=rng)
    if not math.isfinite(E):
        raise TrainingError(f"non-finite training loss {E}")
    net.backward(dout)
    opt.step(plist)
    return E


def train(net: LocalizationNet, train_set: FrameSet, val_set: FrameSet, config: TrainConfig,
          params: LossParams, progress=None) -> tuple[LocalizationNet, History]:
    """Mini-batch momentum SGD with early stopping on validation loss.

    Returns the network restored to its best-validation epoch.
    """
    if len(train_set) == 0 or len(val_set) == 0:
        raise ValueError("train and validation sets must be non-empty")
    overlap = set(np.unique(train_set.transit)) & set(np.unique(val_set.transit))
    if overlap:
        raise ValueError(f"train and validation share transits {sorted(overlap)}")
    rng = np.random.default_rng(config.seed)
    opt = SGDMomentum(config.lr, config.momentum, config.weight_decay)
    stopper = EarlyStopping(config.patience, config.min_delta)
    history = History()
    best_state = copy.deepcopy(net.state())
    n = len(train_set)
    n_batches = n // config.batch_size
    if n_batches == 0:
        raise ValueError("training set smaller than one batch")
    for epoch in range(config.max_epochs):
        order = rng.permutation(n)
        losses = []
        try:
            for b in range(n_batches):
                idx = order[b * config.batch_size:(b + 1) * config.batch_size]
                losses.append(train_step(net, opt, train_set.subset(idx), params, rng))
        except TrainingError as exc:
            raise DivergenceError(f"epoch {epoch}: {exc}", history) from exc
        train_E = float(np.mean(losses))
        val_E = evaluate_loss(net, val_set, params)
        if not math.isfinite(val_E):
            raise DivergenceError(f"epoch {epoch}: non-finite validation loss", history)
        history.append(epoch=epoch, train_E=train_E, val_E=val_E, lr=config.lr)
        if stopper.update(epoch, val_E):
            best_state = copy.deepcopy(net.state())
            history.best_epoch = epoch
        log.info("epoch %d train_E=%.5f val_E=%.5f", epoch, train_E, val_E)
        if progress is not None:
            progress(epoch, train_E, val_E)
        if stopper.should_stop:
            break
    net.load_state(best_state)
    return net, history


def wrap_bearing(phi) -> np.ndarray:
    """Fold any angle into [0, pi] (left-right ambiguous bearing)."""
    return np.arccos(np.clip(np.cos(phi), -1.0, 1.0))


def net_config_dict(cfg: NetConfig) -> dict:
    d = asdict(cfg)
    d["cep_shape"] = list(cfg.cep_shape)
    d["gcc_shape"] = list(cfg.gcc_shape)
    return d
