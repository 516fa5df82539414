"""Small convolutional classifier trained from scratch with analytic backprop.

conv(3->8, 5x5) -> ReLU -> avgpool 2 -> conv(8->16, 5x5) -> ReLU -> avgpool 2
-> dense -> softmax. Inputs are pixel images in [0, 255]; the model rescales
internally, and input gradients are returned in pixel units.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import records
from .tensor_core import ConfigError, ConvSpec, SeededRng, conv2d_forward, conv2d_input_grad, conv2d_param_grad, im2col

log = logging.getLogger(__name__)

INPUT_SCALE = 1.0 / 255.0
INPUT_SHIFT = 0.5


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 12
    batch_size: int = 32
    learning_rate: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 1e-4
    noise_std: float = 0.0  # Gaussian augmentation, pixel units
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be positive")
        if self.learning_rate < 0 or not 0 <= self.momentum < 1:
            raise ConfigError("learning_rate must be >= 0 and momentum in [0, 1)")


def _pool(x):
    n, c, h, w = x.shape
    h2, w2 = h // 2, w // 2
    return x[:, :, :2 * h2, :2 * w2].reshape(n, c, h2, 2, w2, 2).mean(axis=(3, 5))


def _pool_back(g, shape):
    out = np.zeros(shape)
    n, c, h2, w2 = g.shape
    out[:, :, :2 * h2, :2 * w2] = np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) / 4.0
    return out


@dataclass
class ClassifierModel:
    input_shape: tuple[int, int, int]
    num_classes: int
    params: dict[str, np.ndarray]
    history: list[dict] = field(default_factory=list)

    PARAM_NAMES = ("w1", "b1", "w2", "b2", "w3", "b3")

    def __post_init__(self):
        self.input_shape = tuple(int(v) for v in self.input_shape)
        c, h, w = self.input_shape
        self.conv1 = ConvSpec(c, 8, (5, 5))
        _, h1, w1 = self.conv1.output_shape(self.input_shape)
        self.conv2 = ConvSpec(8, 16, (5, 5))
        _, h2, w2 = self.conv2.output_shape((8, h1 // 2, w1 // 2))
        self.feature_dim = 16 * (h2 // 2) * (w2 // 2)
        expected = {
            "w1": self.conv1.weight_shape, "b1": (8,),
            "w2": self.conv2.weight_shape, "b2": (16,),
            "w3": (self.num_classes, self.feature_dim), "b3": (self.num_classes,),
        }
        for name, shape in expected.items():
            if self.params[name].shape != shape:
                raise ConfigError(f"{name}: shape {self.params[name].shape}, expected {shape}")

    @classmethod
    def initialize(cls, input_shape, num_classes: int, rng: SeededRng | None = None, scale: float = 1.0):
        """He-normal weights, zero biases; ``scale=0`` gives an all-zero model."""
        model = cls(input_shape, num_classes, _zero_params(input_shape, num_classes))
        if rng is not None and scale:
            g = rng.generator
            for name in ("w1", "w2", "w3"):
                p = model.params[name]
                fan_in = int(np.prod(p.shape[1:]))
                p[...] = scale * g.standard_normal(p.shape) * np.sqrt(2.0 / fan_in)
        return model

    # -- forward / backward ---------------------------------------------------

    def _check(self, x):
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 3
        xb = x[None] if single else x
        if xb.ndim != 4 or xb.shape[1:] != self.input_shape:
            raise ConfigError(f"input: shape {x.shape}, model expects {self.input_shape}")
        return xb, single

    def _forward(self, xb):
        p = self.params
        z0 = xb * INPUT_SCALE - INPUT_SHIFT
        c1 = im2col(z0, self.conv1)
        a1 = conv2d_forward(z0, p["w1"], p["b1"], self.conv1, cols=c1)
        h1 = _pool(np.maximum(a1, 0))
        c2 = im2col(h1, self.conv2)
        a2 = conv2d_forward(h1, p["w2"], p["b2"], self.conv2, cols=c2)
        h2 = _pool(np.maximum(a2, 0))
        flat = h2.reshape(len(xb), -1)
        logits = flat @ p["w3"].T + p["b3"]
        return logits, (z0, c1, a1, h1, c2, a2, h2, flat)

    def _backward(self, dlogits, cache, need_params=True):
        p = self.params
        z0, c1, a1, h1, c2, a2, h2, flat = cache
        grads = {}
        if need_params:
            grads["w3"] = dlogits.T @ flat
            grads["b3"] = dlogits.sum(axis=0)
        dh2 = (dlogits @ p["w3"]).reshape(h2.shape)
        da2 = _pool_back(dh2, a2.shape) * (a2 > 0)
        if need_params:
            grads["w2"], grads["b2"] = conv2d_param_grad(h1, da2, self.conv2, cols=c2)
        dh1 = conv2d_input_grad(da2, p["w2"], self.conv2, h1.shape[2:])
        da1 = _pool_back(dh1, a1.shape) * (a1 > 0)
        if need_params:
            grads["w1"], grads["b1"] = conv2d_param_grad(z0, da1, self.conv1, cols=c1)
        dz0 = conv2d_input_grad(da1, p["w1"], self.conv1, z0.shape[2:])
        return grads, dz0 * INPUT_SCALE

    def logits(self, x) -> np.ndarray:
        xb, single = self._check(x)
        out, _ = self._forward(xb)
        return out[0] if single else out

    def predict_probs(self, x) -> np.ndarray:
        return softmax(self.logits(x))

    def predict(self, x):
        lg = self.logits(x)
        return int(np.argmax(lg)) if lg.ndim == 1 else np.argmax(lg, axis=1)

    def loss(self, x, label) -> float:
        """Cross-entropy (mean over a batch)."""
        xb, _ = self._check(x)
        labels = np.atleast_1d(np.asarray(label))
        logits, _ = self._forward(xb)
        return float(np.mean(_xent(logits, labels)))

    def loss_and_grads(self, x, labels):
        """Mean cross-entropy with gradients for all parameters and the input."""
        xb, single = self._check(x)
        labels = np.atleast_1d(np.asarray(labels))
        logits, cache = self._forward(xb)
        probs = softmax(logits)
        dlogits = probs.copy()
        dlogits[np.arange(len(xb)), labels] -= 1.0
        dlogits /= len(xb)
        grads, dx = self._backward(dlogits, cache)
        return float(np.mean(_xent(logits, labels))), grads, (dx[0] if single else dx)

    def loss_grad_wrt_input(self, x, label) -> np.ndarray:
        """Gradient of the cross-entropy at ``label`` w.r.t. the pixel input.

        For a batch each row gets the gradient of its own loss term.
        """
        xb, single = self._check(x)
        labels = np.broadcast_to(np.atleast_1d(np.asarray(label)), (len(xb),))
        logits, cache = self._forward(xb)
        dlogits = softmax(logits)
        dlogits[np.arange(len(xb)), labels] -= 1.0
        _, dx = self._backward(dlogits, cache, need_params=False)
        return dx[0] if single else dx

    # -- persistence ------------------------------------------------------------

    def save(self, path) -> None:
        meta = {"kind": "classifier", "input_shape": list(self.input_shape),
                "num_classes": self.num_classes, "history": self.history}
        records.save(path, self.params, meta)

    @classmethod
    def load(cls, path) -> "ClassifierModel":
        arrays, meta = records.load(path)
        return cls(tuple(meta["input_shape"]), meta["num_classes"], arrays, meta.get("history", []))


def _zero_params(input_shape, num_classes):
    c, h, w = input_shape
    h1, w1 = (h - 4) // 2, (w - 4) // 2
    h2, w2 = (h1 - 4) // 2, (w1 - 4) // 2
    if min(h2, w2) < 1:
        raise ConfigError(f"input {input_shape} too small for the classifier")
    return {
        "w1": np.zeros((8, c, 5, 5)), "b1": np.zeros(8),
        "w2": np.zeros((16, 8, 5, 5)), "b2": np.zeros(16),
        "w3": np.zeros((num_classes, 16 * h2 * w2)), "b3": np.zeros(num_classes),
    }


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _xent(logits, labels):
    z = logits - logits.max(axis=-1, keepdims=True)
    logz = np.log(np.exp(z).sum(axis=-1))
    return logz - z[np.arange(len(labels)), labels]


def accuracy(model: ClassifierModel, images: np.ndarray, labels: np.ndarray, batch: int = 128) -> float:
    if not len(images):
        return float("nan")
    preds = np.concatenate([np.atleast_1d(model.predict(images[i:i + batch])) for i in range(0, len(images), batch)])
    return float(np.mean(preds == np.asarray(labels)))


def train(images: np.ndarray, labels: np.ndarray, cfg: TrainConfig, *, num_classes: int | None = None,
          val: tuple[np.ndarray, np.ndarray] | None = None) -> ClassifierModel:
    """Mini-batch SGD with momentum on mean cross-entropy.

    Deterministic given ``cfg.seed``. Raises :class:`TrainingDiverged` when
    the loss turns non-finite.
    """
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    num_classes = int(num_classes or labels.max() + 1)
    if num_classes < 2 or len(np.unique(labels)) < 2:
        raise ConfigError("training needs at least two classes")
    rng = SeededRng(cfg.seed)
    model = ClassifierModel.initialize(images.shape[1:], num_classes, rng.child(1))
    velocity = {k: np.zeros_like(v) for k, v in model.params.items()}
    order_rng = rng.child(2).generator
    noise_rng = rng.child(3).generator
    for epoch in range(cfg.epochs):
        order = order_rng.permutation(len(images))
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            xb = images[idx]
            if cfg.noise_std > 0:
                xb = np.clip(xb + cfg.noise_std * noise_rng.standard_normal(xb.shape), 0, 255)
            loss, grads, _ = model.loss_and_grads(xb, labels[idx])
            if not np.isfinite(loss):
                raise TrainingDiverged(f"loss became {loss} at epoch {epoch}, batch starting {start}")
            losses.append(loss)
            for k, g in grads.items():
                if cfg.weight_decay and k.startswith("w"):
                    g = g + cfg.weight_decay * model.params[k]
                velocity[k] = cfg.momentum * velocity[k] - cfg.learning_rate * g
                model.params[k] += velocity[k]
            if not all(np.all(np.isfinite(v)) for v in model.params.values()):
                raise TrainingDiverged(f"parameters became non-finite at epoch {epoch}")
        entry = {"epoch": epoch + 1, "loss": float(np.mean(losses)),
                 "train_acc": accuracy(model, images, labels)}
        if val is not None and len(val[0]):
            entry["val_acc"] = accuracy(model, *val)
        model.history.append(entry)
        log.info("epoch %d: %s", epoch + 1, entry)
    return model
