"""Dense convolution kernels and seeded Gaussian sampling.

Every numeric routine in the package goes through this module. Arrays are
plain ``float64`` numpy arrays laid out as ``(C, H, W)`` for a single image
or ``(N, C, H, W)`` for a batch. Convolutions are unpadded cross-correlations
(the usual deep-learning "conv").
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import as_strided

DTYPE = np.float64


class ConfigError(ValueError):
    """Raised when shapes or hyper-parameters are inconsistent."""


@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel: tuple[int, int]
    stride: int = 1

    def __post_init__(self):
        if min(self.in_channels, self.out_channels, self.stride) < 1:
            raise ConfigError(f"non-positive field in {self}")
        if min(self.kernel) < 1:
            raise ConfigError(f"non-positive kernel {self.kernel}")

    @property
    def weight_shape(self) -> tuple[int, int, int, int]:
        return (self.out_channels, self.in_channels, *self.kernel)

    def output_hw(self, height: int, width: int) -> tuple[int, int]:
        rh, rw = self.kernel
        if height < rh:
            raise ConfigError(f"height {height} smaller than kernel height {rh}")
        if width < rw:
            raise ConfigError(f"width {width} smaller than kernel width {rw}")
        return (height - rh) // self.stride + 1, (width - rw) // self.stride + 1

    def output_shape(self, input_shape: tuple[int, ...]) -> tuple[int, ...]:
        *lead, c, h, w = input_shape
        if c != self.in_channels:
            raise ConfigError(f"channels: input has {c}, spec expects {self.in_channels}")
        return (*lead, self.out_channels, *self.output_hw(h, w))


def _batched(x: np.ndarray) -> tuple[np.ndarray, bool]:
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise ConfigError(f"expected (C,H,W) or (N,C,H,W) array, got ndim={x.ndim}")


def _check_weights(weights, bias, spec: ConvSpec):
    if weights.shape != spec.weight_shape:
        raise ConfigError(f"weights: shape {weights.shape}, spec expects {spec.weight_shape}")
    if bias is not None and bias.shape != (spec.out_channels,):
        raise ConfigError(f"bias: shape {bias.shape}, spec expects ({spec.out_channels},)")


def im2col(x: np.ndarray, spec: ConvSpec) -> np.ndarray:
    """Gather every receptive field into rows.

    Args:
        x: ``(C, H, W)`` or ``(N, C, H, W)`` input.
        spec: convolution geometry.

    Returns:
        Array of shape ``(N, H'*W', C*rh*rw)`` (contiguous copy).
    """
    xb, _ = _batched(np.ascontiguousarray(x, dtype=DTYPE))
    n, c, h, w = xb.shape
    spec.output_shape(xb.shape)
    ho, wo = spec.output_hw(h, w)
    rh, rw = spec.kernel
    s = spec.stride
    sn, sc, sh, sw = xb.strides
    win = as_strided(xb, (n, ho, wo, c, rh, rw), (sn, sh * s, sw * s, sc, sh, sw), writeable=False)
    return win.reshape(n, ho * wo, c * rh * rw)


def conv2d_forward(x, weights, bias, spec: ConvSpec, cols=None) -> np.ndarray:
    """Unpadded strided convolution: ``out[k] = W_k * window + b_k``.

    ``cols`` may carry a precomputed :func:`im2col` of ``x``.
    """
    _check_weights(weights, bias, spec)
    xb, single = _batched(np.asarray(x))
    out_shape = spec.output_shape(xb.shape)
    if cols is None:
        cols = im2col(xb, spec)
    out = cols @ weights.reshape(spec.out_channels, -1).T
    if bias is not None:
        out += bias
    out = out.transpose(0, 2, 1).reshape(out_shape)
    return out[0] if single else out


def conv2d_input_grad(upstream, weights, spec: ConvSpec, input_hw: tuple[int, int]) -> np.ndarray:
    """Adjoint of :func:`conv2d_forward` with respect to its input.

    Scatter-adds ``W^T upstream`` over the strided windows (a transposed
    convolution). Pixels not covered by any window get zero gradient.
    """
    _check_weights(weights, None, spec)
    ub, single = _batched(np.asarray(upstream, dtype=DTYPE))
    n, k, ho, wo = ub.shape
    h, w = input_hw
    expected = spec.output_shape((n, spec.in_channels, h, w))
    if ub.shape != expected:
        raise ConfigError(f"upstream: shape {ub.shape}, forward output is {expected}")
    c = spec.in_channels
    rh, rw = spec.kernel
    s = spec.stride
    # (N, C*rh*rw, Ho*Wo): one column per output position
    cols = weights.reshape(k, -1).T @ ub.reshape(n, k, ho * wo)
    cols = cols.reshape(n, c, rh, rw, ho, wo)
    out = np.zeros((n, c, h, w), dtype=DTYPE)
    if rh % s == 0 and rw % s == 0:
        # kernel tiles into s-by-s blocks: add whole dense blocks at once
        blocks = cols.reshape(n, c, rh // s, s, rw // s, s, ho, wo)
        for a in range(rh // s):
            for b in range(rw // s):
                tile = blocks[:, :, a, :, b].transpose(0, 1, 4, 2, 5, 3).reshape(n, c, ho * s, wo * s)
                out[:, :, s * a:s * (a + ho), s * b:s * (b + wo)] += tile
        return out[0] if single else out
    ye = s * (ho - 1) + 1
    xe = s * (wo - 1) + 1
    for ky in range(rh):
        for kx in range(rw):
            out[:, :, ky:ky + ye:s, kx:kx + xe:s] += cols[:, :, ky, kx]
    return out[0] if single else out


def conv2d_param_grad(x, upstream, spec: ConvSpec, cols=None) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of ``sum(upstream * conv2d_forward(x, W, b))`` w.r.t. ``W`` and ``b``.

    Batched inputs are summed over the batch axis.
    """
    xb, _ = _batched(np.asarray(x))
    ub, _ = _batched(np.asarray(upstream, dtype=DTYPE))
    expected = spec.output_shape(xb.shape)
    if ub.shape != expected:
        raise ConfigError(f"upstream: shape {ub.shape}, forward output is {expected}")
    if cols is None:
        cols = im2col(xb, spec)
    n, k = ub.shape[:2]
    flat = ub.reshape(n, k, -1)
    gw = np.einsum("nkp,npq->kq", flat, cols, optimize=True).reshape(spec.weight_shape)
    gb = flat.sum(axis=(0, 2))
    return gw, gb


class SeededRng:
    """Counter-based (Philox) generator with a fixed 64-bit seed.

    Streams are reproducible across platforms for a given numpy release.
    ``child`` derives an independent stream from extra integer keys so that
    per-image workers can be seeded independently of scheduling order.
    """

    def __init__(self, seed: int, *keys: int):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.keys = tuple(int(k) for k in keys)
        seq = np.random.SeedSequence([self.seed, *self.keys])
        self._gen = np.random.Generator(np.random.Philox(seq))

    def child(self, *keys: int) -> "SeededRng":
        return SeededRng(self.seed, *self.keys, *keys)

    @property
    def generator(self) -> np.random.Generator:
        return self._gen

    def __repr__(self):
        return f"SeededRng(seed={self.seed}, keys={self.keys})"


def gaussian_sample(rng: SeededRng, shape) -> np.ndarray:
    """I.i.d. standard normal draws (ziggurat transform of Philox uniforms)."""
    return rng.generator.standard_normal(shape, dtype=DTYPE)
