"""Procedurally rendered desk-scale benchmark and its CSV manifest."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .imageio import load_image, save_image
from .tensor_core import ConfigError, SeededRng

CLASS_NAMES = (
    "disk", "square", "triangle", "ring", "cross",
    "hstripes", "vstripes", "checker", "diagonal", "dots",
)
SPLITS = ("train", "val", "test")
SPLIT_FRACTIONS = (0.7, 0.1, 0.2)


COLOR_RANGE = (60.0, 195.0)
LUMA_GAP = (25.0, 50.0)


def _colors(g: np.random.Generator):
    """Foreground/background RGB pair with a moderate luminance gap.

    Low contrast keeps the benchmark attackable at small epsilon; the
    bounded gap keeps the shapes learnable.
    """
    while True:
        fg = g.uniform(*COLOR_RANGE, 3)
        bg = g.uniform(*COLOR_RANGE, 3)
        if LUMA_GAP[0] <= abs(fg.mean() - bg.mean()) <= LUMA_GAP[1]:
            return fg, bg


def render(label: int, size: tuple[int, int], g: np.random.Generator) -> np.ndarray:
    """One ``(3, H, W)`` image of class ``label``, quantised to integers."""
    h, w = size
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    s = min(h, w)
    cy = h / 2 + g.uniform(-0.12, 0.12) * h
    cx = w / 2 + g.uniform(-0.12, 0.12) * w
    rad = g.uniform(0.22, 0.32) * s
    dy, dx = yy - cy, xx - cx
    angle = g.uniform(0, np.pi)
    period = g.uniform(0.16, 0.22) * s
    phase = g.uniform(0, 2 * np.pi)
    name = CLASS_NAMES[label]
    if name == "disk":
        mask = dy**2 + dx**2 < rad**2
    elif name == "square":
        mask = (np.abs(dy) < rad * 0.85) & (np.abs(dx) < rad * 0.85)
    elif name == "triangle":
        top = cy - rad
        mask = (yy > top) & (yy < cy + rad * 0.8) & (np.abs(dx) < (yy - top) * 0.6)
    elif name == "ring":
        r2 = dy**2 + dx**2
        mask = (r2 < rad**2) & (r2 > (0.55 * rad) ** 2)
    elif name == "cross":
        arm = rad * 0.3
        mask = ((np.abs(dy) < arm) & (np.abs(dx) < rad)) | ((np.abs(dx) < arm) & (np.abs(dy) < rad))
    elif name == "hstripes":
        mask = np.sin(2 * np.pi * yy / period + phase) > 0
    elif name == "vstripes":
        mask = np.sin(2 * np.pi * xx / period + phase) > 0
    elif name == "checker":
        mask = (np.sin(2 * np.pi * yy / period + phase) > 0) ^ (np.sin(2 * np.pi * xx / period + phase) > 0)
    elif name == "diagonal":
        sign = 1 if g.random() < 0.5 else -1
        mask = np.sin(2 * np.pi * (yy + sign * xx) / (period * 1.4) + phase) > 0
    else:  # dots
        cell = period * 1.3
        py = (yy + phase) % cell - cell / 2
        px = (xx + phase) % cell - cell / 2
        mask = py**2 + px**2 < (cell * 0.3) ** 2
    fg, bg = _colors(g)
    img = np.where(mask[None], fg[:, None, None], bg[:, None, None])
    # low-amplitude texture so images are not piecewise constant
    img = img + g.normal(0, 4.0, img.shape)
    return np.clip(np.rint(img), 0, 255)


@dataclass
class Dataset:
    images: np.ndarray  # (N, C, H, W) pixels
    labels: np.ndarray
    splits: np.ndarray  # split name per row
    paths: list[str]
    class_names: list[str]

    def split(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        sel = self.splits == name
        return self.images[sel], self.labels[sel]

    def indices(self, name: str) -> np.ndarray:
        return np.flatnonzero(self.splits == name)


def render_dataset(classes: int = 10, per_class: int = 250, size=(64, 64), seed: int = 0) -> Dataset:
    """In-memory benchmark; splits are 70/10/20 within every class."""
    if not 2 <= classes <= len(CLASS_NAMES):
        raise ConfigError(f"classes must be between 2 and {len(CLASS_NAMES)}")
    if per_class < 1:
        raise ConfigError("per_class must be positive")
    rng = SeededRng(seed)
    n_train = int(round(per_class * SPLIT_FRACTIONS[0]))
    n_val = int(round(per_class * SPLIT_FRACTIONS[1]))
    images, labels, splits, paths = [], [], [], []
    for label in range(classes):
        g = rng.child(label).generator
        for i in range(per_class):
            split = "train" if i < n_train else "val" if i < n_train + n_val else "test"
            images.append(render(label, tuple(size), g))
            labels.append(label)
            splits.append(split)
            paths.append(f"{split}/{CLASS_NAMES[label]}_{i:04d}.png")
    return Dataset(np.stack(images), np.array(labels), np.array(splits), paths, list(CLASS_NAMES[:classes]))


def stratified_subset(labels, per_class: int) -> np.ndarray:
    """Positions of the first ``per_class`` entries of every label, in original order."""
    labels = np.asarray(labels)
    if per_class < 1:
        raise ConfigError("per_class must be positive")
    keep = np.zeros(len(labels), bool)
    for c in np.unique(labels):
        keep[np.flatnonzero(labels == c)[:per_class]] = True
    return np.flatnonzero(keep)


def write_dataset(ds: Dataset, root) -> Path:
    """Write images plus ``manifest.csv`` (``path,label,split``) and ``classes.json``."""
    root = Path(root)
    for split in SPLITS:
        (root / split).mkdir(parents=True, exist_ok=True)
    with open(root / "manifest.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["path", "label", "split"])
        for img, label, split, path in zip(ds.images, ds.labels, ds.splits, ds.paths):
            save_image(root / path, img)
            writer.writerow([path, int(label), split])
    (root / "classes.json").write_text(json.dumps(ds.class_names, indent=1) + "\n")
    return root / "manifest.csv"


def generate_synthetic_dataset(root, classes: int = 10, per_class: int = 250, size=(64, 64), seed: int = 0) -> Path:
    return write_dataset(render_dataset(classes, per_class, size, seed), root)


def load_manifest(manifest) -> Dataset:
    manifest = Path(manifest)
    root = manifest.parent
    names_file = root / "classes.json"
    rows = list(csv.DictReader(open(manifest, newline="")))
    if not rows or list(rows[0].keys()) != ["path", "label", "split"]:
        raise ConfigError(f"{manifest}: expected header path,label,split")
    labels = np.array([int(r["label"]) for r in rows])
    names = json.loads(names_file.read_text()) if names_file.exists() else [str(i) for i in range(labels.max() + 1)]
    splits = np.array([r["split"] for r in rows])
    if bad := set(splits) - set(SPLITS):
        raise ConfigError(f"unknown splits {sorted(bad)}")
    if labels.min() < 0 or labels.max() >= len(names):
        raise ConfigError("label outside the class table")
    paths = [r["path"] for r in rows]
    if len(set(paths)) != len(paths):
        raise ConfigError("duplicate paths in manifest")
    images = np.stack([load_image(root / p) for p in paths])
    return Dataset(images, labels, splits, paths, names)
