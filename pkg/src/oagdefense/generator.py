"""Energy network ``F(I, theta) = c + sum V * relu(conv(I, W) + B)``.

A single strided convolution, a ReLU and a dense layer to a scalar. With
``V`` all ones and ``c = 0`` it is exactly the conv/ReLU/sum prototype whose
image gradient is the sum of the active kernels.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import records
from .tensor_core import (
    ConfigError,
    ConvSpec,
    SeededRng,
    conv2d_forward,
    conv2d_input_grad,
    conv2d_param_grad,
    gaussian_sample,
    im2col,
)


@dataclass(frozen=True)
class GeneratorArch:
    filters: int = 64
    kernel_size: int = 15
    stride: int = 3
    input_shape: tuple[int, int, int] = (3, 64, 64)

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        self.feature_shape  # validates geometry

    @property
    def conv(self) -> ConvSpec:
        return ConvSpec(self.input_shape[0], self.filters, (self.kernel_size, self.kernel_size), self.stride)

    @property
    def feature_shape(self) -> tuple[int, int, int]:
        return self.conv.output_shape(self.input_shape)


@dataclass
class GeneratorParams:
    arch: GeneratorArch
    weights: np.ndarray  # (K, C, r, r)
    bias: np.ndarray  # (K,)
    dense: np.ndarray  # (K, H', W')
    dense_bias: float = 0.0

    def __post_init__(self):
        if self.weights.shape != self.arch.conv.weight_shape:
            raise ConfigError(f"weights: shape {self.weights.shape}, arch expects {self.arch.conv.weight_shape}")
        if self.bias.shape != (self.arch.filters,):
            raise ConfigError(f"bias: shape {self.bias.shape}, arch expects ({self.arch.filters},)")
        if self.dense.shape != self.arch.feature_shape:
            raise ConfigError(f"dense: shape {self.dense.shape}, arch expects {self.arch.feature_shape}")
        self.dense_bias = float(self.dense_bias)

    def arrays(self) -> dict[str, np.ndarray]:
        return {
            "weights": self.weights,
            "bias": self.bias,
            "dense": self.dense,
            "dense_bias": np.array([self.dense_bias]),
        }

    def copy(self) -> "GeneratorParams":
        return GeneratorParams(self.arch, self.weights.copy(), self.bias.copy(), self.dense.copy(), self.dense_bias)

    def axpy(self, alpha: float, other: "GeneratorParams") -> "GeneratorParams":
        """Return ``self + alpha * other``."""
        return GeneratorParams(
            self.arch,
            self.weights + alpha * other.weights,
            self.bias + alpha * other.bias,
            self.dense + alpha * other.dense,
            self.dense_bias + alpha * other.dense_bias,
        )

    def norm(self) -> float:
        return float(np.sqrt(sum(np.sum(a * a) for a in self.arrays().values())))

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in self.arrays().values())

    def save(self, path) -> None:
        a = self.arch
        meta = {
            "kind": "generator",
            "filters": a.filters,
            "kernel_size": a.kernel_size,
            "stride": a.stride,
            "input_shape": list(a.input_shape),
        }
        records.save(path, self.arrays(), meta)

    @classmethod
    def load(cls, path) -> "GeneratorParams":
        arrays, meta = records.load(path)
        arch = GeneratorArch(meta["filters"], meta["kernel_size"], meta["stride"], tuple(meta["input_shape"]))
        return cls(arch, arrays["weights"], arrays["bias"], arrays["dense"], float(arrays["dense_bias"][0]))


def init_params(rng: SeededRng, arch: GeneratorArch, init_std: float = 0.01) -> GeneratorParams:
    """Random ``W, V ~ N(0, init_std^2)``; biases start at zero."""
    w = init_std * gaussian_sample(rng, arch.conv.weight_shape)
    v = init_std * gaussian_sample(rng, arch.feature_shape)
    return GeneratorParams(arch, w, np.zeros(arch.filters), v, 0.0)


def _check_image(image: np.ndarray, theta: GeneratorParams) -> None:
    if image.shape != theta.arch.input_shape:
        raise ConfigError(f"image: shape {image.shape}, generator expects {theta.arch.input_shape}")


def _preactivation(image, theta: GeneratorParams, cols=None):
    _check_image(image, theta)
    if cols is None:
        cols = im2col(image, theta.arch.conv)
    pre = conv2d_forward(image, theta.weights, theta.bias, theta.arch.conv, cols=cols)
    return pre, cols


def energy_forward(image: np.ndarray, theta: GeneratorParams) -> float:
    pre, _ = _preactivation(image, theta)
    return float(theta.dense_bias + np.sum(theta.dense * np.maximum(pre, 0.0)))


def grad_wrt_image(image: np.ndarray, theta: GeneratorParams) -> np.ndarray:
    """``dF/dI``; ReLU'(0) is taken as 0."""
    pre, _ = _preactivation(image, theta)
    upstream = theta.dense * (pre > 0)
    return conv2d_input_grad(upstream, theta.weights, theta.arch.conv, image.shape[1:])


def grad_wrt_params(image: np.ndarray, theta: GeneratorParams, cols=None) -> GeneratorParams:
    """``dF/dtheta`` packed as a :class:`GeneratorParams`."""
    pre, cols = _preactivation(image, theta, cols)
    active = pre > 0
    gw, gb = conv2d_param_grad(image, theta.dense * active, theta.arch.conv, cols=cols)
    return GeneratorParams(theta.arch, gw, gb, np.where(active, pre, 0.0), 1.0)
