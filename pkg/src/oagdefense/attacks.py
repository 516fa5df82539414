"""Sign-gradient L-infinity attacks on pixel images in [0, 255].

Every attack only needs ``clf.loss_grad_wrt_input(images, labels)``. Inputs
may be a single ``(C, H, W)`` image or an ``(N, C, H, W)`` batch with one
label per row. No randomness is used here; target labels are chosen by the
caller (see :func:`choose_targets`).
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Protocol

import numpy as np

from .tensor_core import ConfigError, SeededRng

PIXEL_MIN = 0.0
PIXEL_MAX = 255.0

KINDS = ("fgsm_untargeted", "fgsm_targeted", "igsm_targeted", "mifgsm_untargeted")


class ClassifierHandle(Protocol):
    def logits(self, images): ...

    def loss(self, images, labels) -> float: ...

    def loss_grad_wrt_input(self, images, labels): ...


def default_iterations(epsilon: float) -> int:
    """``min(eps + 4, ceil(1.25 eps))`` iterations for a step size of 1."""
    if epsilon < 0:
        raise ConfigError("epsilon must be non-negative")
    return int(min(epsilon + 4, math.ceil(1.25 * epsilon)))


@dataclass(frozen=True)
class AttackSpec:
    kind: str
    epsilon: float
    step_size: float = 1.0
    iterations: int | None = None
    momentum_decay: float = 1.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown attack kind {self.kind!r}; choose from {KINDS}")
        if self.epsilon < 0:
            raise ConfigError("epsilon must be non-negative")
        if self.step_size <= 0:
            raise ConfigError("step_size must be positive")
        if self.iterations is not None and self.iterations < 0:
            raise ConfigError("iterations must be non-negative")
        if self.n_iter > 1 and self.step_size > self.epsilon:
            raise ConfigError(f"step_size {self.step_size} exceeds epsilon {self.epsilon} with {self.n_iter} iterations")
        if not 0.0 <= self.momentum_decay <= 1.0:
            raise ConfigError("momentum_decay must lie in [0, 1]")

    @property
    def targeted(self) -> bool:
        return self.kind in ("fgsm_targeted", "igsm_targeted")

    @property
    def n_iter(self) -> int:
        if self.kind.startswith("fgsm"):
            return 1
        return default_iterations(self.epsilon) if self.iterations is None else self.iterations

    def to_dict(self) -> dict:
        return {**asdict(self), "iterations": self.n_iter}


def _project(x, original, epsilon):
    x = np.clip(x, original - epsilon, original + epsilon)
    return np.clip(x, PIXEL_MIN, PIXEL_MAX)


def _as_float(images):
    return np.asarray(images, dtype=np.float64)


def _check_target(target, true_label):
    if true_label is not None and np.any(np.asarray(target) == np.asarray(true_label)):
        raise ConfigError("target label equals the true label")


def fgsm_untargeted(images, true_label, clf: ClassifierHandle, epsilon: float) -> np.ndarray:
    """Single step up the loss of the true label."""
    x = _as_float(images)
    if epsilon == 0:
        return x.copy()
    grad = clf.loss_grad_wrt_input(x, true_label)
    return _project(x + epsilon * np.sign(grad), x, epsilon)


def fgsm_targeted(images, target_label, clf: ClassifierHandle, epsilon: float, true_label=None) -> np.ndarray:
    """Single step down the loss of ``target_label``."""
    _check_target(target_label, true_label)
    x = _as_float(images)
    if epsilon == 0:
        return x.copy()
    grad = clf.loss_grad_wrt_input(x, target_label)
    return _project(x - epsilon * np.sign(grad), x, epsilon)


def igsm(images, target_label, clf: ClassifierHandle, epsilon: float, step_size: float = 1.0,
         iterations: int | None = None, true_label=None) -> np.ndarray:
    """Iterated targeted FGSM, clipped to the epsilon ball after every step."""
    _check_target(target_label, true_label)
    original = _as_float(images)
    n_iter = default_iterations(epsilon) if iterations is None else iterations
    x = original.copy()
    for _ in range(n_iter):
        grad = clf.loss_grad_wrt_input(x, target_label)
        x = _project(x - step_size * np.sign(grad), original, epsilon)
    return x


def _l1_per_image(g):
    axes = tuple(range(g.ndim - 3, g.ndim))
    return np.sum(np.abs(g), axis=axes, keepdims=True)


def mifgsm(images, true_label, clf: ClassifierHandle, epsilon: float, step_size: float = 1.0,
           iterations: int | None = None, decay: float = 1.0) -> np.ndarray:
    """Momentum iterative FGSM (untargeted).

    ``g <- decay * g + grad / ||grad||_1``; step ``step_size * sign(g)``.
    An all-zero gradient is accumulated without normalisation.
    """
    if not 0.0 <= decay <= 1.0:
        raise ConfigError("decay must lie in [0, 1]")
    original = _as_float(images)
    n_iter = default_iterations(epsilon) if iterations is None else iterations
    x = original.copy()
    momentum = np.zeros_like(x)
    for _ in range(n_iter):
        grad = clf.loss_grad_wrt_input(x, true_label)
        norm = _l1_per_image(grad)
        momentum = decay * momentum + np.divide(grad, norm, out=np.zeros_like(grad), where=norm > 0)
        x = _project(x + step_size * np.sign(momentum), original, epsilon)
    return x


def run_attack(spec: AttackSpec, images, true_label, clf: ClassifierHandle, target_label=None) -> np.ndarray:
    if spec.targeted and target_label is None:
        raise ConfigError(f"{spec.kind} needs a target label")
    if not spec.targeted and target_label is not None:
        raise ConfigError(f"{spec.kind} takes no target label")
    if spec.kind == "fgsm_untargeted":
        return fgsm_untargeted(images, true_label, clf, spec.epsilon)
    if spec.kind == "fgsm_targeted":
        return fgsm_targeted(images, target_label, clf, spec.epsilon, true_label)
    if spec.kind == "igsm_targeted":
        return igsm(images, target_label, clf, spec.epsilon, spec.step_size, spec.n_iter, true_label)
    return mifgsm(images, true_label, clf, spec.epsilon, spec.step_size, spec.n_iter, spec.momentum_decay)


def choose_targets(true_labels, num_classes: int, rng: SeededRng) -> np.ndarray:
    """Uniform random wrong labels, one per entry of ``true_labels``."""
    true_labels = np.atleast_1d(np.asarray(true_labels, dtype=np.int64))
    offsets = rng.generator.integers(1, num_classes, size=true_labels.shape)
    return (true_labels + offsets) % num_classes
