"""Online auto-encoder baseline.

A symmetric network is fitted to a single image from random initialisation,
using the image as both input and target, and its output replaces the image.
Layout: strided conv encoder (same geometry as the OAG generator), a dense
layer down to one scalar, tanh, a dense layer back up to the feature map,
and a transposed convolution to image space with per-channel bias.
Trained with Adam on the mean squared reconstruction error.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .generator import GeneratorArch
from .oag import PIXEL_CENTER, DefenseAborted
from .tensor_core import DTYPE, ConfigError, SeededRng, conv2d_forward, conv2d_input_grad, conv2d_param_grad

AE_SCALE = 127.5  # network works on pixels mapped to [-1, 1]


@dataclass(frozen=True)
class AutoencoderConfig:
    steps: int = 300
    filters: int = 32
    kernel_size: int = 15
    stride: int = 3
    learning_rate: float = 0.003
    init_std: float = 0.01
    decoder_init_std: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if self.steps < 0:
            raise ConfigError("steps must be non-negative")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.init_std < 0 or self.decoder_init_std < 0:
            raise ConfigError("init std must be non-negative")

    def arch(self, shape) -> GeneratorArch:
        return GeneratorArch(self.filters, self.kernel_size, self.stride, tuple(int(s) for s in shape))

    def to_dict(self) -> dict:
        return asdict(self)


PARAM_NAMES = ("enc_w", "enc_b", "w1", "b1", "w2", "b2", "dec_w", "dec_b")


def init_autoencoder(rng: SeededRng, arch: GeneratorArch, init_std=0.01, decoder_init_std=0.01) -> dict:
    g = rng.generator
    feat = arch.feature_shape
    c = arch.input_shape[0]
    return {
        "enc_w": g.normal(0.0, init_std, arch.conv.weight_shape),
        "enc_b": np.zeros(arch.filters),
        "w1": g.normal(0.0, init_std, feat),
        "b1": np.zeros(()),
        "w2": g.normal(0.0, decoder_init_std, feat),
        "b2": np.zeros(feat),
        "dec_w": g.normal(0.0, decoder_init_std, arch.conv.weight_shape),
        "dec_b": np.zeros(c),
    }


def ae_forward(x, params, arch: GeneratorArch):
    """Returns ``(output, cache)`` for a single ``(C, H, W)`` input."""
    spec = arch.conv
    f = conv2d_forward(x, params["enc_w"], params["enc_b"], spec)
    z = float(np.sum(params["w1"] * f) + params["b1"])
    a = np.tanh(z)
    h = params["w2"] * a + params["b2"]
    out = conv2d_input_grad(h, params["dec_w"], spec, x.shape[1:]) + params["dec_b"][:, None, None]
    return out, (f, a, h)


def ae_loss_and_grads(x, target, params, arch: GeneratorArch):
    """Mean squared error ``0.5 * mean((out - target)^2)`` and its parameter gradients."""
    spec = arch.conv
    out, (f, a, h) = ae_forward(x, params, arch)
    diff = out - target
    loss = 0.5 * float(np.mean(diff**2))
    dout = diff / diff.size
    grads = {"dec_b": dout.sum(axis=(1, 2))}
    # the decoder is the adjoint of a convolution, so its gradients swap roles
    grads["dec_w"] = conv2d_param_grad(dout, h, spec)[0]
    dh = conv2d_forward(dout, params["dec_w"], None, spec)
    grads["w2"] = dh * a
    grads["b2"] = dh
    dz = float(np.sum(dh * params["w2"])) * (1.0 - a * a)
    grads["w1"] = dz * f
    grads["b1"] = np.asarray(dz)
    grads["enc_w"], grads["enc_b"] = conv2d_param_grad(x, dz * params["w1"], spec)
    return loss, grads


class _Adam:
    def __init__(self, params, lr, b1=0.9, b2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        c1 = 1 - self.b1**self.t
        c2 = 1 - self.b2**self.t
        for k, g in grads.items():
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            params[k] = params[k] - self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


def online_autoencoder_defense(pixels, steps: int, arch: GeneratorArch | None = None, seed: int = 0, *,
                               config: AutoencoderConfig | None = None, rng: SeededRng | None = None) -> np.ndarray:
    """Fit the auto-encoder to ``pixels`` for ``steps`` updates and return its output in pixels."""
    cfg = config or AutoencoderConfig(steps=steps, seed=seed)
    pixels = np.asarray(pixels, dtype=DTYPE)
    arch = arch or cfg.arch(pixels.shape)
    if pixels.shape != arch.input_shape:
        raise ConfigError(f"image: shape {pixels.shape}, arch expects {arch.input_shape}")
    rng = rng or SeededRng(seed)
    params = init_autoencoder(rng, arch, cfg.init_std, cfg.decoder_init_std)
    x = (pixels - PIXEL_CENTER) / AE_SCALE
    opt = _Adam(params, cfg.learning_rate)
    for step in range(steps):
        loss, grads = ae_loss_and_grads(x, x, params, arch)
        if not np.isfinite(loss):
            raise DefenseAborted(f"auto-encoder loss became {loss}", step, float("nan"))
        opt.step(params, grads)
    out, _ = ae_forward(x, params, arch)
    return np.clip(out * AE_SCALE + PIXEL_CENTER, 0.0, 255.0)


class AutoencoderDefense:
    """Image-only defense callable, like :class:`~oagdefense.oag.OagDefense`."""

    name = "autoencoder"

    def __init__(self, config: AutoencoderConfig | None = None):
        self.config = config or AutoencoderConfig()

    def __call__(self, pixels, image_id: int = 0) -> np.ndarray:
        cfg = self.config
        return online_autoencoder_defense(pixels, cfg.steps, seed=cfg.seed, config=cfg,
                                          rng=SeededRng(cfg.seed, image_id))

    def describe(self) -> dict:
        return {"defense": self.name, **self.config.to_dict()}
