"""Online alternate generation.

For every input image a fresh energy network is initialised at random and a
substitute image is grown from zeros. Each outer iteration runs ``image_steps``
Langevin updates of the synthesized image followed by one contrastive update
of the network towards the reference image::

    I <- (1 - eps^2/2) I + (eps^2/2) dF/dI + eps * N(0, 1)
    theta <- theta + beta (dF(I_ref)/dtheta - dF(I)/dtheta)

The defense never sees the downstream classifier.
"""

from __future__ import annotations

import logging
import time
from collections.abc import Callable, Iterable, Sequence
from dataclasses import asdict, dataclass, field

import numpy as np

from .generator import GeneratorArch, GeneratorParams, grad_wrt_image, grad_wrt_params, init_params
from .metrics import psnr
from .tensor_core import ConfigError, SeededRng, gaussian_sample

log = logging.getLogger(__name__)

PIXEL_CENTER = 127.5


class DefenseAborted(RuntimeError):
    """A step produced non-finite values; carries where it happened."""

    def __init__(self, message: str, step: int, theta_norm: float):
        super().__init__(f"{message} (step={step}, |theta|={theta_norm:.6g})")
        self.step = step
        self.theta_norm = theta_norm


@dataclass(frozen=True)
class OagConfig:
    """Hyper-parameters of one defense run.

    ``pixel_scale`` fixes the generator coordinates:
    ``I = (pixel - 127.5) / pixel_scale``. The Langevin chain has a unit
    Gaussian stationary spread per pixel, so the scale decides how much of
    that spread survives in the emitted image.
    """

    network_steps: int = 300
    image_steps: int = 20
    noise_scale: float = 0.3
    net_learning_rate: float = 1e-5
    filters: int = 32
    kernel_size: int = 15
    stride: int = 3
    init_std: float = 0.01
    pixel_scale: float = 1.0
    seed: int = 0
    checkpoint_every: int = 0
    langevin_noise: bool = True  # False only for diagnostics

    def __post_init__(self):
        if self.network_steps < 1 or self.image_steps < 1:
            raise ConfigError("network_steps and image_steps must be >= 1")
        if not 0.0 < self.noise_scale**2 / 2 < 1.0:
            raise ConfigError(f"noise_scale={self.noise_scale}: eps^2/2 must lie in (0, 1)")
        if self.net_learning_rate < 0:
            raise ConfigError("net_learning_rate must be non-negative")
        if self.pixel_scale <= 0 or self.init_std < 0:
            raise ConfigError("pixel_scale must be positive and init_std non-negative")
        if self.checkpoint_every < 0:
            raise ConfigError("checkpoint_every must be non-negative")

    @property
    def step_size(self) -> float:
        return self.noise_scale**2 / 2

    def arch(self, input_shape) -> GeneratorArch:
        return GeneratorArch(self.filters, self.kernel_size, self.stride, tuple(input_shape))

    def replace(self, **changes) -> "OagConfig":
        return OagConfig(**{**asdict(self), **changes})

    def to_dict(self) -> dict:
        return asdict(self)


def to_generator_coords(pixels: np.ndarray, pixel_scale: float = 1.0) -> np.ndarray:
    return (np.asarray(pixels, dtype=np.float64) - PIXEL_CENTER) / pixel_scale


def to_pixels(image: np.ndarray, pixel_scale: float = 1.0) -> np.ndarray:
    return np.clip(image * pixel_scale + PIXEL_CENTER, 0.0, 255.0)


def emit(image: np.ndarray, pixel_scale: float = 1.0) -> np.ndarray:
    """Clamp a synthesized image to the valid range (final emission only)."""
    bound = PIXEL_CENTER / pixel_scale
    return np.clip(image, -bound, bound)


class SnapshotBuffer:
    """Ring of the ``capacity`` most recent synthesized images."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ConfigError("capacity must be >= 1")
        self.capacity = capacity
        self._slots: list[np.ndarray | None] = [None] * capacity
        self._cursor = 0
        self._count = 0

    def push(self, image: np.ndarray) -> None:
        self._slots[self._cursor] = image
        self._cursor = (self._cursor + 1) % self.capacity
        self._count = min(self._count + 1, self.capacity)

    def latest(self) -> np.ndarray:
        if not self._count:
            raise IndexError("empty snapshot buffer")
        return self._slots[(self._cursor - 1) % self.capacity]

    def __len__(self):
        return self._count

    def snapshots(self) -> list[np.ndarray]:
        """Oldest first."""
        start = (self._cursor - self._count) % self.capacity
        return [self._slots[(start + i) % self.capacity] for i in range(self._count)]


@dataclass
class Checkpoint:
    iteration: int
    image: np.ndarray
    psnr: float


@dataclass
class DefenseTrace:
    checkpoints: list[Checkpoint] = field(default_factory=list)
    network_updates: int = 0
    image_updates: int = 0
    wall_time: float = 0.0
    buffer: SnapshotBuffer | None = None

    def add(self, iteration: int, image: np.ndarray, score: float) -> None:
        if self.checkpoints and iteration <= self.checkpoints[-1].iteration:
            raise ValueError("checkpoint iterations must increase")
        self.checkpoints.append(Checkpoint(iteration, image, score))

    def psnr_curve(self) -> list[tuple[int, float]]:
        return [(c.iteration, c.psnr) for c in self.checkpoints]


def image_update_step(image, theta: GeneratorParams, noise_scale: float, rng: SeededRng | None, *,
                      noise: bool = True, step: int = -1) -> np.ndarray:
    """One Langevin step: a pull of weight ``eps^2/2`` towards ``dF/dI`` plus a kick."""
    alpha = noise_scale**2 / 2
    if not alpha < 1.0:
        raise ConfigError(f"noise_scale={noise_scale}: eps^2/2 must be < 1")
    grad = grad_wrt_image(image, theta)
    if not np.all(np.isfinite(grad)):
        raise DefenseAborted("non-finite image gradient", step, theta.norm())
    out = (1.0 - alpha) * image + alpha * grad
    if noise:
        out += noise_scale * gaussian_sample(rng, image.shape)
    return out


def network_update_step(theta: GeneratorParams, reference, synthesized, learning_rate: float, *,
                        step: int = -1) -> GeneratorParams:
    """Likelihood ascent with the current sample standing in for the model expectation."""
    g_ref = grad_wrt_params(reference, theta)
    g_syn = grad_wrt_params(synthesized, theta)
    new = GeneratorParams(
        theta.arch,
        theta.weights + learning_rate * (g_ref.weights - g_syn.weights),
        theta.bias + learning_rate * (g_ref.bias - g_syn.bias),
        theta.dense + learning_rate * (g_ref.dense - g_syn.dense),
        theta.dense_bias + learning_rate * (g_ref.dense_bias - g_syn.dense_bias),
    )
    if not new.is_finite():
        raise DefenseAborted("non-finite generator parameters", step, theta.norm())
    return new


def run_defense(reference: np.ndarray, config: OagConfig, *, rng: SeededRng | None = None,
                checkpoints: Iterable[int] | None = None,
                psnr_against: np.ndarray | None = None,
                on_checkpoint: Callable[[int, np.ndarray], None] | None = None,
                ) -> tuple[np.ndarray, DefenseTrace]:
    """Synthesize a substitute for ``reference`` (generator coordinates).

    Args:
        reference: ``(C, H, W)`` image in generator coordinates.
        config: run hyper-parameters.
        rng: overrides the stream seeded from ``config.seed``.
        checkpoints: outer iterations (1-based) at which to snapshot the
            image; defaults to every ``config.checkpoint_every`` iterations.
        psnr_against: image scored at checkpoints, defaults to ``reference``.
        on_checkpoint: called with ``(iteration, emitted_image)``.

    Returns:
        The emitted (clamped) final image and the run trace.
    """
    reference = np.asarray(reference, dtype=np.float64)
    if not np.all(np.isfinite(reference)):
        raise ConfigError("reference image contains non-finite values")
    rng = rng if rng is not None else SeededRng(config.seed)
    if checkpoints is None:
        every = config.checkpoint_every
        marks = set(range(every, config.network_steps + 1, every)) if every else set()
    else:
        marks = {int(c) for c in checkpoints}
    target = reference if psnr_against is None else psnr_against
    peak = 2 * PIXEL_CENTER / config.pixel_scale

    start = time.perf_counter()
    theta = init_params(rng, config.arch(reference.shape), config.init_std)
    buffer = SnapshotBuffer(config.image_steps + 1)
    trace = DefenseTrace(buffer=buffer)
    image = np.zeros_like(reference)
    buffer.push(image)
    step = 0
    for t in range(1, config.network_steps + 1):
        for _ in range(config.image_steps):
            image = image_update_step(image, theta, config.noise_scale, rng,
                                      noise=config.langevin_noise, step=step)
            buffer.push(image)
            step += 1
            trace.image_updates += 1
        image = buffer.latest()
        theta = network_update_step(theta, reference, image, config.net_learning_rate, step=step)
        trace.network_updates += 1
        if t in marks:
            out = emit(image, config.pixel_scale)
            trace.add(t, out, psnr(out, target, peak))
            if on_checkpoint is not None:
                on_checkpoint(t, out)
    trace.wall_time = time.perf_counter() - start
    log.debug("defense finished: %d network / %d image updates in %.2fs",
              trace.network_updates, trace.image_updates, trace.wall_time)
    return emit(buffer.latest(), config.pixel_scale), trace


class OagDefense:
    """Pixel-space wrapper around :func:`run_defense`.

    Takes only an image; it holds no reference to any classifier.
    """

    name = "oag"

    def __init__(self, config: OagConfig):
        self.config = config

    def __call__(self, pixels: np.ndarray, image_id: int = 0) -> np.ndarray:
        cfg = self.config
        ref = to_generator_coords(pixels, cfg.pixel_scale)
        out, _ = run_defense(ref, cfg, rng=SeededRng(cfg.seed, image_id))
        return to_pixels(out, cfg.pixel_scale)

    def describe(self) -> dict:
        return {"defense": self.name, **self.config.to_dict()}


def select_plateau(curve: Sequence[float], window: int = 2, threshold: float = 0.01) -> int:
    """Index of the first point whose gain over the next ``window`` points is below ``threshold``.

    Falls back to the last index when the curve never flattens.
    """
    if not len(curve):
        raise ConfigError("empty accuracy curve")
    for i, value in enumerate(curve):
        ahead = curve[i + 1:i + 1 + window]
        if ahead and max(ahead) - value < threshold:
            return i
    return len(curve) - 1


@dataclass
class CalibrationResult:
    chosen: int
    checkpoints: list[int]
    accuracy: list[float]

    def rows(self) -> list[tuple[int, float]]:
        return list(zip(self.checkpoints, self.accuracy))


def calibrate_network_steps(clean_images: Sequence[np.ndarray], labels: Sequence[int], classifier,
                            config: OagConfig, noise_sigma: float = 16.0,
                            checkpoints: Sequence[int] = (25, 50, 75, 100, 150, 200, 250, 300),
                            *, window: int = 2, threshold: float = 0.01,
                            perturb: Callable[[np.ndarray, int, int], np.ndarray] | None = None,
                            ) -> CalibrationResult:
    """Pick the number of network steps from an accuracy-vs-iteration curve.

    Each clean image is degraded (Gaussian noise of std ``noise_sigma`` pixel
    units unless ``perturb(image, label, index)`` is given), defended once up
    to the largest checkpoint, and the classifier scores every checkpoint
    image. This is the only place the classifier meets the defense, and only
    offline.
    """
    if not len(clean_images):
        raise ConfigError("empty calibration set")
    marks = sorted({int(c) for c in checkpoints})
    cfg = config.replace(network_steps=marks[-1], checkpoint_every=0)
    hits = np.zeros(len(marks))
    for idx, (img, label) in enumerate(zip(clean_images, labels)):
        if perturb is None:
            noise = noise_sigma * gaussian_sample(SeededRng(cfg.seed, 0xCA11B, idx), img.shape)
            degraded = np.clip(img + noise, 0.0, 255.0)
        else:
            degraded = perturb(img, label, idx)
        ref = to_generator_coords(degraded, cfg.pixel_scale)
        _, trace = run_defense(ref, cfg, rng=SeededRng(cfg.seed, idx), checkpoints=marks)
        for j, ck in enumerate(trace.checkpoints):
            pred = classifier.predict(to_pixels(ck.image, cfg.pixel_scale))
            hits[j] += int(pred == label)
    accuracy = (hits / len(clean_images)).tolist()
    chosen = marks[select_plateau(accuracy, window, threshold)]
    return CalibrationResult(chosen, marks, accuracy)
