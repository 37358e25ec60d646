"""Layers with explicit forward/backward passes.

Activations are laid out as (batch, length, width, channels) for the
convolutional stack and (batch, features) for dense layers. Convolution
runs along ``length`` only; weights are shared across ``width`` (the
sensor/pair axis), which is equivalent to a (k x 1) kernel.
"""

from __future__ import annotations

import numpy as np


class ShapeError(ValueError):
    pass


class StateError(RuntimeError):
    pass


class Parameter:
    __slots__ = ("name", "value", "grad")

    def __init__(self, name: str, value: np.ndarray):
        self.name = name
        self.value = value
        self.grad = np.zeros_like(value)

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.value.shape})"


class Layer:
    def __init__(self):
        self._cache = None

    def params(self) -> list[Parameter]:
        return []

    def forward(self, x, train: bool = False, rng=None):
        raise NotImplementedError

    def backward(self, dy):
        raise NotImplementedError

    def _cached(self):
        if self._cache is None:
            raise StateError(f"{type(self).__name__}.backward called before forward")
        return self._cache


def he_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Conv1d(Layer):
    """Valid, stride-1 correlation along the length axis."""

    def __init__(self, in_channels: int, out_channels: int = 48, kernel_length: int = 10,
                 rng: np.random.Generator | None = None, name: str = "conv",
                 input_grad: bool = True):
        super().__init__()
        # the first layer of a network never needs its input gradient
        self.input_grad = input_grad
        rng = rng if rng is not None else np.random.default_rng(0)
        self.kernel_length = kernel_length
        self.in_channels = in_channels
        self.out_channels = out_channels
        fan_in = kernel_length * in_channels
        self.weight = Parameter(f"{name}.weight",
                                he_uniform(rng, (kernel_length, in_channels, out_channels), fan_in))
        self.bias = Parameter(f"{name}.bias", np.zeros(out_channels))

    def params(self):
        return [self.weight, self.bias]

    def forward(self, x, train=False, rng=None):
        if x.ndim != 4 or x.shape[3] != self.in_channels:
            raise ShapeError(f"conv expects (B, L, W, {self.in_channels}), got {x.shape}")
        k = self.kernel_length
        B, L, W, C = x.shape
        if L < k:
            raise ShapeError(f"input length {L} shorter than kernel {k}")
        L_out = L - k + 1
        # (B, L_out, W, C, k) -> (B, L_out, W, k, C)
        win = np.lib.stride_tricks.sliding_window_view(x, k, axis=1)
        cols = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 3)).reshape(-1, k * C)
        y = cols @ self.weight.value.reshape(k * C, -1) + self.bias.value
        self._cache = (cols, x.shape)
        return y.reshape(B, L_out, W, self.out_channels)

    def backward(self, dy):
        cols, shape = self._cached()
        B, L, W, C = shape
        k = self.kernel_length
        L_out = L - k + 1
        dy2 = dy.reshape(-1, self.out_channels)
        self.weight.grad += (cols.T @ dy2).reshape(self.weight.value.shape)
        self.bias.grad += dy2.sum(axis=0)
        if not self.input_grad:
            return None
        # full correlation of dy with the length-flipped, transposed kernel
        pad = np.zeros((B, L_out + 2 * (k - 1), W, self.out_channels))
        pad[:, k - 1:k - 1 + L_out] = dy
        win = np.lib.stride_tricks.sliding_window_view(pad, k, axis=1)
        dcols = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 3)).reshape(-1, k * self.out_channels)
        w_flip = self.weight.value[::-1].transpose(0, 2, 1).reshape(k * self.out_channels, C)
        return (dcols @ w_flip).reshape(shape)


class Dense(Layer):
    def __init__(self, in_features: int, out_features: int = 256,
                 rng: np.random.Generator | None = None, name: str = "dense"):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_features = in_features
        self.out_features = out_features
        self.weight = Parameter(f"{name}.weight",
                                he_uniform(rng, (in_features, out_features), in_features))
        self.bias = Parameter(f"{name}.bias", np.zeros(out_features))

    def params(self):
        return [self.weight, self.bias]

    def forward(self, x, train=False, rng=None):
        if x.ndim != 2 or x.shape[1] != self.in_features:
            raise ShapeError(f"dense expects (B, {self.in_features}), got {x.shape}")
        self._cache = x
        return x @ self.weight.value + self.bias.value

    def backward(self, dy):
        x = self._cached()
        self.weight.grad += x.T @ dy
        self.bias.grad += dy.sum(axis=0)
        return dy @ self.weight.value.T


class ReLU(Layer):
    def forward(self, x, train=False, rng=None):
        mask = x > 0
        self._cache = mask
        return x * mask

    def backward(self, dy):
        return dy * self._cached()


class Flatten(Layer):
    def forward(self, x, train=False, rng=None):
        self._cache = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, dy):
        return dy.reshape(self._cached())


class Dropout(Layer):
    """Inverted dropout; identity outside training."""

    def __init__(self, rate: float = 0.5):
        super().__init__()
        if not 0 <= rate < 1:
            raise ValueError("dropout rate must lie in [0, 1)")
        self.rate = rate

    def forward(self, x, train=False, rng=None):
        if not train or self.rate == 0:
            self._cache = None
            self._identity = True
            return x
        if rng is None:
            raise ValueError("training-mode dropout needs an rng")
        self._identity = False
        mask = (rng.random(x.shape) >= self.rate) / (1 - self.rate)
        self._cache = mask
        return x * mask

    def backward(self, dy):
        if getattr(self, "_identity", False):
            return dy
        return dy * self._cached()


class BatchNorm(Layer):
    """Normalizes over every axis except the last (features / channels)."""

    def __init__(self, n_features: int, momentum: float = 0.9, eps: float = 1e-5,
                 name: str = "bn"):
        super().__init__()
        if eps <= 0:
            raise ValueError("eps must be positive")
        self.momentum = momentum
        self.eps = eps
        self.scale = Parameter(f"{name}.scale", np.ones(n_features))
        self.shift = Parameter(f"{name}.shift", np.zeros(n_features))
        self.running_mean = np.zeros(n_features)
        self.running_var = np.ones(n_features)

    def params(self):
        return [self.scale, self.shift]

    def forward(self, x, train=False, rng=None):
        axes = tuple(range(x.ndim - 1))
        if train:
            count = int(np.prod([x.shape[a] for a in axes]))
            if x.shape[0] < 2:
                raise ValueError("batch normalization in training mode needs batch size >= 2")
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
            m = self.momentum
            self.running_mean = m * self.running_mean + (1 - m) * mean
            self.running_var = m * self.running_var + (1 - m) * var
            inv_std = 1.0 / np.sqrt(var + self.eps)
            xhat = (x - mean) * inv_std
            self._cache = (xhat, inv_std, count, axes)
        else:
            xhat = (x - self.running_mean) / np.sqrt(self.running_var + self.eps)
            self._cache = (None, 1.0 / np.sqrt(self.running_var + self.eps), None, axes)
        return self.scale.value * xhat + self.shift.value

    def backward(self, dy):
        xhat, inv_std, count, axes = self._cached()
        if xhat is None:
            raise StateError("batch-norm backward needs a training-mode forward")
        self.scale.grad += (dy * xhat).sum(axis=axes)
        self.shift.grad += dy.sum(axis=axes)
        dxhat = dy * self.scale.value
        return inv_std * (dxhat - dxhat.mean(axis=axes) - xhat * (dxhat * xhat).mean(axis=axes))


class Sequential(Layer):
    def __init__(self, layers: list[Layer]):
        super().__init__()
        self.layers = layers

    def params(self):
        return [p for layer in self.layers for p in layer.params()]

    def forward(self, x, train=False, rng=None):
        for layer in self.layers:
            x = layer.forward(x, train, rng)
        return x

    def backward(self, dy):
        for layer in reversed(self.layers):
            dy = layer.backward(dy)
        return dy

    def batchnorms(self) -> list[BatchNorm]:
        return [layer for layer in self.layers if isinstance(layer, BatchNorm)]
