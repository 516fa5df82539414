"""Attack, defend and classify orchestration with reproducible reports.

Every per-image job is keyed by its image id: target labels and defense
noise are drawn from streams seeded by ``(run seed, image id)``, so results
do not depend on worker count or scheduling. Rows are sorted by id before
anything is written.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from . import records
from .attacks import AttackSpec, choose_targets, run_attack
from .autoencoder import AutoencoderConfig, AutoencoderDefense
from .imageio import save_image
from .metrics import IdentityDefense, MeanFilterDefense, capped_psnr
from .oag import DefenseTrace, OagConfig, OagDefense, to_pixels
from .tensor_core import ConfigError, SeededRng

log = logging.getLogger(__name__)

DEFENSE_NAMES = ("none", "mean_filter", "oag", "autoencoder")
TARGET_STREAM = 0x7A6E7  # keeps target draws apart from defense noise streams
ABLATION_PARAMS = {
    "T_N": "network_steps",
    "network_steps": "network_steps",
    "T_I": "image_steps",
    "image_steps": "image_steps",
    "kernel_size": "kernel_size",
    "noise_scale": "noise_scale",
    "eps_g": "noise_scale",
}


def config_hash(config: dict) -> str:
    """Short SHA-256 of the canonical JSON form of ``config``."""
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def build_defense(name: str, params: dict | None = None, seed: int | None = None):
    """Instantiate a named defense. ``seed`` overrides any seed in ``params``."""
    params = dict(params or {})
    try:
        if name == "none":
            if params:
                raise ConfigError(f"defense 'none' takes no parameters, got {sorted(params)}")
            return IdentityDefense()
        if name == "mean_filter":
            return MeanFilterDefense(**params)
        if name == "oag":
            if seed is not None:
                params["seed"] = seed
            return OagDefense(OagConfig(**params))
        if name == "autoencoder":
            if seed is not None:
                params["seed"] = seed
            return AutoencoderDefense(AutoencoderConfig(**params))
    except TypeError as exc:
        raise ConfigError(f"bad parameters for defense {name!r}: {exc}") from None
    raise ConfigError(f"unknown defense {name!r}; choose from {DEFENSE_NAMES}")


@dataclass
class EvalRow:
    image_id: int
    path: str
    label: int
    target: int  # -1 for untargeted attacks
    adv_pred: int
    defended_pred: int
    correct: int
    psnr_adv: float  # attacked vs original
    psnr_defended: float  # defended vs original
    status: str = "ok"
    seconds: float = 0.0  # not written to the CSV (timing is not reproducible)

    CSV_FIELDS = ("image_id", "path", "label", "target", "adv_pred", "defended_pred", "correct",
                  "psnr_adv", "psnr_defended", "status")


def _fmt(value) -> str:
    if isinstance(value, float):
        return "nan" if math.isnan(value) else f"{value:.6f}"
    return str(value)


@dataclass
class EvalReport:
    attack: dict
    defense: dict
    seed: int
    rows: list[EvalRow]
    skipped_misclassified: int = 0
    wall_time: float = 0.0
    defended: dict[int, np.ndarray] = field(default_factory=dict, repr=False)

    @property
    def config(self) -> dict:
        return {"attack": self.attack, "defense": self.defense, "seed": self.seed}

    @property
    def config_hash(self) -> str:
        return config_hash(self.config)

    @property
    def ok_rows(self) -> list[EvalRow]:
        return [r for r in self.rows if r.status == "ok"]

    @property
    def evaluated(self) -> int:
        return len(self.ok_rows)

    @property
    def failures(self) -> int:
        return len(self.rows) - self.evaluated

    @property
    def correct(self) -> int:
        return sum(r.correct for r in self.ok_rows)

    @property
    def accuracy(self) -> float:
        return self.correct / self.evaluated if self.evaluated else float("nan")

    @property
    def attacked_accuracy(self) -> float:
        ok = self.ok_rows
        return sum(r.adv_pred == r.label for r in ok) / len(ok) if ok else float("nan")

    def psnr_stats(self) -> tuple[float, float]:
        vals = [r.psnr_defended for r in self.ok_rows]
        if not vals:
            return float("nan"), float("nan")
        return float(np.mean(vals)), float(np.median(vals))

    def summary(self) -> dict:
        mean_psnr, median_psnr = self.psnr_stats()
        seconds = [r.seconds for r in self.ok_rows]
        return {
            "config": self.config,
            "config_hash": self.config_hash,
            "accuracy": self.accuracy,
            "attacked_accuracy": self.attacked_accuracy,
            "correct": self.correct,
            "evaluated": self.evaluated,
            "failures": self.failures,
            "skipped_misclassified": self.skipped_misclassified,
            "psnr_mean": mean_psnr,
            "psnr_median": median_psnr,
            "seconds_per_image": float(np.mean(seconds)) if seconds else 0.0,
            "wall_time": self.wall_time,
        }

    def csv_text(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow((*EvalRow.CSV_FIELDS, "config_hash"))
        digest = self.config_hash
        for row in sorted(self.rows, key=lambda r: r.image_id):
            writer.writerow([_fmt(getattr(row, k)) for k in EvalRow.CSV_FIELDS] + [digest])
        return buf.getvalue()

    def write(self, out_dir, stem: str = "report", save_images: bool = True) -> dict[str, Path]:
        """Write ``<stem>.csv``, ``<stem>_summary.yaml`` and optionally the defended images."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {"csv": out / f"{stem}.csv", "summary": out / f"{stem}_summary.yaml"}
        paths["csv"].write_text(self.csv_text())
        paths["summary"].write_text(yaml.safe_dump(self.summary(), sort_keys=True))
        if save_images and self.defended:
            paths["images"] = out / f"{stem}_defended.oagr"
            arrays = {str(k): self.defended[k] for k in sorted(self.defended)}
            records.save(paths["images"], arrays, {"config_hash": self.config_hash})
        return paths


def verify_config_echo(summary_path) -> bool:
    """True when the hash stored in a summary matches its echoed config."""
    data = yaml.safe_load(Path(summary_path).read_text())
    return config_hash(data["config"]) == data["config_hash"]


@dataclass
class _Job:
    image_id: int
    path: str
    image: np.ndarray
    label: int
    target: int
    attack: AttackSpec
    defense: object
    model: object


def _run_job(job: _Job) -> tuple[EvalRow, np.ndarray | None]:
    row = EvalRow(job.image_id, job.path, job.label, job.target, -1, -1, 0, float("nan"), float("nan"))
    try:
        target = job.target if job.attack.targeted else None
        adv = run_attack(job.attack, job.image, job.label, job.model, target)
        row.adv_pred = int(job.model.predict(adv))
        row.psnr_adv = capped_psnr(adv, job.image)
        start = time.perf_counter()
        defended = job.defense(adv, job.image_id)
        row.seconds = time.perf_counter() - start
        row.defended_pred = int(job.model.predict(defended))
        row.correct = int(row.defended_pred == job.label)
        row.psnr_defended = capped_psnr(defended, job.image)
        return row, defended
    except Exception as exc:  # recorded per image; the run continues
        log.warning("image %d failed: %s", job.image_id, exc)
        row.status = f"error: {type(exc).__name__}: {exc}".replace("\n", " ")
        return row, None


def evaluate_pipeline(images, labels, attack: AttackSpec, defense, model, *, seed: int,
                      image_ids=None, paths=None, num_classes: int | None = None,
                      restrict_to_correct: bool = True, workers: int = 1,
                      keep_images: bool = True) -> EvalReport:
    """Attack, defend and classify every image.

    Args:
        images: ``(N, C, H, W)`` clean pixels.
        labels: true labels.
        attack: attack to apply before the defense.
        defense: callable ``(pixels, image_id) -> pixels`` with ``describe()``.
        model: target classifier; the defense never sees it.
        seed: run seed for target labels.
        image_ids: stable ids (default ``0..N-1``).
        restrict_to_correct: skip images the classifier gets wrong when clean.
        workers: process pool size; 1 runs inline.

    Returns:
        The report; rows are sorted by image id.
    """
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n = len(images)
    if len(labels) != n:
        raise ConfigError("images and labels differ in length")
    ids = np.arange(n) if image_ids is None else np.asarray(image_ids, dtype=np.int64)
    if len(set(ids.tolist())) != n:
        raise ConfigError("image ids must be unique")
    paths = list(paths) if paths is not None else [""] * n
    num_classes = num_classes or model.num_classes
    keep = np.ones(n, bool)
    if restrict_to_correct:
        keep = np.asarray(model.predict(images)) == labels
    jobs = []
    for i in np.flatnonzero(keep):
        target = -1
        if attack.targeted:
            target = int(choose_targets(labels[i], num_classes, SeededRng(seed, TARGET_STREAM, int(ids[i])))[0])
        jobs.append(_Job(int(ids[i]), paths[i], images[i], int(labels[i]), target, attack, defense, model))

    start = time.perf_counter()
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_job, jobs, chunksize=1))
    else:
        results = [_run_job(job) for job in jobs]
    wall = time.perf_counter() - start

    results.sort(key=lambda rd: rd[0].image_id)
    defended = {r.image_id: d for r, d in results if d is not None} if keep_images else {}
    report = EvalReport(attack.to_dict(), defense.describe(), int(seed), [r for r, _ in results],
                        int(n - keep.sum()), wall, defended)
    log.info("%s / %s: accuracy %.4f over %d images (%d failures)", attack.kind,
             report.defense.get("defense"), report.accuracy, report.evaluated, report.failures)
    return report


def attack_strength_curve(images, labels, model, kind: str, epsilons, *, seed: int) -> list[tuple[float, float]]:
    """Undefended accuracy for each epsilon."""
    out = []
    for eps in epsilons:
        rep = evaluate_pipeline(images, labels, AttackSpec(kind, eps), IdentityDefense(), model,
                                seed=seed, keep_images=False)
        out.append((eps, rep.accuracy))
    return out


@dataclass
class AblationResult:
    parameter: str
    values: list
    reports: list[EvalReport]

    def rows(self) -> list[dict]:
        out = []
        for v, rep in zip(self.values, self.reports):
            mean_psnr, median_psnr = rep.psnr_stats()
            out.append({"parameter": self.parameter, "value": v, "accuracy": rep.accuracy,
                        "evaluated": rep.evaluated, "psnr_mean": mean_psnr,
                        "psnr_median": median_psnr, "config_hash": rep.config_hash})
        return out

    def write_csv(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["parameter", "value", "accuracy", "evaluated", "psnr_mean", "psnr_median", "config_hash"])
            for r in self.rows():
                writer.writerow([_fmt(r[k]) for k in ("parameter", "value", "accuracy", "evaluated",
                                                      "psnr_mean", "psnr_median", "config_hash")])
        return path


def ablation_sweep(parameter: str, values, base: OagConfig, images, labels, attack: AttackSpec, model, *,
                   seed: int, workers: int = 1, image_ids=None) -> AblationResult:
    """One :func:`evaluate_pipeline` per value of ``parameter``."""
    if parameter not in ABLATION_PARAMS:
        raise ConfigError(f"cannot sweep {parameter!r}; choose from {sorted(ABLATION_PARAMS)}")
    values = list(values)
    if not values:
        raise ConfigError("ablation needs at least one value")
    key = ABLATION_PARAMS[parameter]
    reports = []
    for v in values:
        cfg = base.replace(**{key: type(getattr(base, key))(v)})
        reports.append(evaluate_pipeline(images, labels, attack, OagDefense(cfg), model, seed=seed,
                                         workers=workers, image_ids=image_ids, keep_images=False))
    return AblationResult(key, values, reports)


def write_table(reports: list[EvalReport], path) -> Path:
    """Accuracy table with one row per (attack, defense) report."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["attack", "epsilon", "defense", "accuracy", "attacked_accuracy", "evaluated", "psnr_mean", "config_hash"])
        for rep in reports:
            writer.writerow([rep.attack["kind"], _fmt(float(rep.attack["epsilon"])), rep.defense.get("defense"),
                             _fmt(rep.accuracy), _fmt(rep.attacked_accuracy), rep.evaluated,
                             _fmt(rep.psnr_stats()[0]), rep.config_hash])
    return path


def write_curve(rows, header, path) -> Path:
    """Plot data as a plain CSV."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for r in rows:
            writer.writerow([_fmt(v) for v in r])
    return path


def load_defended(path) -> dict[int, np.ndarray]:
    arrays, _ = records.load(path)
    return {int(k): v for k, v in arrays.items()}



def write_trace(trace: DefenseTrace, out_dir, config: OagConfig, image_id: int = 0) -> Path:
    """Checkpoint images (PNG and PPM), a YAML sidecar per checkpoint and ``trace.csv``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for ck in trace.checkpoints:
        pixels = to_pixels(ck.image, config.pixel_scale)
        stem = f"iter_{ck.iteration:05d}"
        save_image(out / f"{stem}.png", pixels)
        save_image(out / f"{stem}.ppm", pixels)
        meta = {"image_id": int(image_id), "iteration": ck.iteration, "seed": config.seed,
                "config": config.to_dict(), "psnr": float(ck.psnr)}
        (out / f"{stem}.yaml").write_text(yaml.safe_dump(meta, sort_keys=True))
    return write_curve([(c.iteration, float(c.psnr)) for c in trace.checkpoints], ["iteration", "psnr"],
                       out / "trace.csv")
