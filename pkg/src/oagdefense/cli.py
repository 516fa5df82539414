"""Command line entry point: ``oagdefense <subcommand> [--config FILE] [--set key=value ...]``.

Artifacts go under ``$OAGDEFENSE_ROOT`` (default ``./runs``) unless a path is
given explicitly. Any invariant violation exits with status 2.
"""

from __future__ import annotations

import argparse
import copy
import csv
import logging
import os
import sys
from pathlib import Path

import numpy as np
import yaml

from . import records
from .attacks import AttackSpec, choose_targets, run_attack
from .autoencoder import AutoencoderConfig
from .classifier import ClassifierModel, TrainConfig, TrainingDiverged, accuracy, train
from .data import generate_synthetic_dataset, load_manifest, stratified_subset
from .harness import (
    TARGET_STREAM,
    ablation_sweep,
    build_defense,
    evaluate_pipeline,
    write_curve,
    write_table,
    write_trace,
)
from .imageio import load_image, save_image
from .metrics import residual_map
from .oag import DefenseAborted, OagConfig, calibrate_network_steps, run_defense, to_generator_coords, to_pixels
from .tensor_core import ConfigError, SeededRng

log = logging.getLogger("oagdefense")

ROOT_ENV = "OAGDEFENSE_ROOT"

DEFAULTS = {
    "seed": 0,
    "data": {"classes": 10, "per_class": 250, "size": [64, 64]},
    "classifier": {"epochs": 12, "batch_size": 32, "learning_rate": 0.05, "momentum": 0.9,
                   "weight_decay": 1.0e-4, "noise_std": 0.0},
    "attack": {"kind": "igsm_targeted", "epsilon": 6, "step_size": 1.0, "iterations": None,
               "momentum_decay": 1.0},
    "defense": {
        "name": "oag",
        "oag": OagConfig().to_dict(),
        "mean_filter": {"window": 3},
        "autoencoder": AutoencoderConfig().to_dict(),
    },
    "calibration": {"images": 20, "noise_sigma": 16.0, "checkpoints": [25, 50, 75, 100, 150, 200, 250, 300],
                    "window": 2, "threshold": 0.01},
    "evaluate": {"split": "test", "per_class": 20, "workers": 1, "defenses": ["none", "mean_filter", "oag"]},
    "ablation": {"parameter": "image_steps", "values": [10, 20, 30, 40]},
}


def _merge(base: dict, update: dict, path="") -> dict:
    out = copy.deepcopy(base)
    for key, value in update.items():
        if key not in out:
            raise ConfigError(f"unknown config key {path + key!r}")
        if isinstance(out[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {path + key!r} must be a mapping")
            out[key] = _merge(out[key], value, f"{path}{key}.")
        else:
            out[key] = value
    return out


def _apply_override(cfg: dict, assignment: str) -> None:
    if "=" not in assignment:
        raise ConfigError(f"override {assignment!r} is not key=value")
    dotted, raw = assignment.split("=", 1)
    keys = dotted.split(".")
    node = cfg
    for k in keys[:-1]:
        if not isinstance(node.get(k), dict):
            raise ConfigError(f"unknown config section {dotted!r}")
        node = node[k]
    if keys[-1] not in node or isinstance(node[keys[-1]], dict):
        raise ConfigError(f"unknown config key {dotted!r}")
    node[keys[-1]] = yaml.safe_load(raw)


def load_config(path=None, overrides=()) -> dict:
    """Defaults, then the YAML file, then ``key.path=value`` overrides."""
    cfg = copy.deepcopy(DEFAULTS)
    if path:
        data = yaml.safe_load(Path(path).read_text()) or {}
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        cfg = _merge(cfg, data)
    for item in overrides:
        _apply_override(cfg, item)
    return cfg


def output_root(explicit=None) -> Path:
    return Path(explicit or os.environ.get(ROOT_ENV, "runs"))


def _attack_spec(cfg) -> AttackSpec:
    return AttackSpec(**cfg["attack"])


def _defense(cfg, name=None, seed=None):
    name = name or cfg["defense"]["name"]
    params = cfg["defense"].get(name, {}) if name != "none" else {}
    return build_defense(name, params, seed=seed)


def _manifest(args, root) -> Path:
    return Path(args.manifest) if args.manifest else root / "data" / "manifest.csv"


def _classifier(args, root) -> ClassifierModel:
    return ClassifierModel.load(Path(args.classifier) if args.classifier else root / "classifier.oagr")


def _eval_subset(ds, cfg):
    split = cfg["evaluate"]["split"]
    idx = ds.indices(split)
    keep = stratified_subset(ds.labels[idx], cfg["evaluate"]["per_class"])
    return idx[keep]


def cmd_gen_data(args, cfg, root):
    d = cfg["data"]
    out = Path(args.out) if args.out else root / "data"
    path = generate_synthetic_dataset(out, d["classes"], d["per_class"], tuple(d["size"]), cfg["seed"])
    print(f"wrote {path}")


def cmd_train_classifier(args, cfg, root):
    ds = load_manifest(_manifest(args, root))
    tc = TrainConfig(seed=cfg["seed"], **cfg["classifier"])
    xtr, ytr = ds.split("train")
    model = train(xtr, ytr, tc, num_classes=len(ds.class_names), val=ds.split("val"))
    out = Path(args.out) if args.out else root / "classifier.oagr"
    model.save(out)
    xte, yte = ds.split("test")
    print(f"test accuracy {accuracy(model, xte, yte):.4f}; wrote {out}")


def cmd_attack(args, cfg, root):
    ds = load_manifest(_manifest(args, root))
    model = _classifier(args, root)
    spec = _attack_spec(cfg)
    idx = _eval_subset(ds, cfg)
    out = Path(args.out) if args.out else root / "attacks" / f"{spec.kind}_eps{spec.epsilon:g}"
    out.mkdir(parents=True, exist_ok=True)
    arrays = {}
    with open(out / "manifest.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["path", "label", "target", "attack", "epsilon", "image_id"])
        for i in idx:
            label = int(ds.labels[i])
            target = -1
            if spec.targeted:
                target = int(choose_targets(label, model.num_classes, SeededRng(cfg["seed"], TARGET_STREAM, int(i)))[0])
            adv = run_attack(spec, ds.images[i], label, model, target if spec.targeted else None)
            name = Path(ds.paths[i]).with_suffix(".png").name
            save_image(out / name, adv)
            arrays[str(int(i))] = adv
            writer.writerow([name, label, target, spec.kind, f"{spec.epsilon:g}", int(i)])
    records.save(out / "adversarial.oagr", arrays, {"attack": spec.to_dict(), "seed": cfg["seed"]})
    print(f"attacked {len(idx)} images into {out}")


def cmd_defend(args, cfg, root):
    src = Path(args.input)
    defense = _defense(cfg, args.defense, seed=cfg["seed"])
    out = Path(args.out) if args.out else src.parent / f"{src.name}_{defense.name}"
    out.mkdir(parents=True, exist_ok=True)
    exact = src / "adversarial.oagr"
    arrays = records.load(exact)[0] if exact.exists() else None
    rows = list(csv.DictReader(open(src / "manifest.csv", newline="")))
    defended = {}
    for k, row in enumerate(rows):
        key = row.get("image_id") or str(k)
        pixels = arrays[key] if arrays is not None and key in arrays else load_image(src / row["path"])
        if args.trace_every and defense.name == "oag":
            cfg_t = defense.config.replace(checkpoint_every=args.trace_every)
            ref = to_generator_coords(pixels, cfg_t.pixel_scale)
            final, trace = run_defense(ref, cfg_t, rng=SeededRng(cfg_t.seed, int(key)))
            write_trace(trace, out / "traces" / key, cfg_t, int(key))
            result = to_pixels(final, cfg_t.pixel_scale)
        else:
            result = defense(pixels, int(key))
        defended[key] = result
        save_image(out / row["path"], result)
    with open(out / "manifest.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(list(rows[0].keys()) if rows else ["path"])
        for row in rows:
            writer.writerow(list(row.values()))
    records.save(out / "defended.oagr", defended, {"defense": defense.describe()})
    print(f"defended {len(rows)} images into {out}")


def cmd_calibrate(args, cfg, root):
    ds = load_manifest(_manifest(args, root))
    model = _classifier(args, root)
    cal = cfg["calibration"]
    xs, ys = ds.split("val")
    good = np.flatnonzero(model.predict(xs) == ys)
    good = good[stratified_subset(ys[good], max(1, cal["images"] // len(ds.class_names)))]
    oag = OagConfig(**{**cfg["defense"]["oag"], "seed": cfg["seed"]})
    perturb = None
    if args.perturb == "attack":
        spec = _attack_spec(cfg)

        def perturb(img, label, i):
            target = int(choose_targets(label, model.num_classes, SeededRng(cfg["seed"], 0xCA1, i))[0])
            return run_attack(spec, img, label, model, target if spec.targeted else None)

    result = calibrate_network_steps(xs[good], ys[good], model, oag, cal["noise_sigma"], cal["checkpoints"],
                                     window=cal["window"], threshold=cal["threshold"], perturb=perturb)
    out = Path(args.out) if args.out else root / f"calibration_{args.perturb}.csv"
    write_curve(result.rows(), ["network_steps", "accuracy"], out)
    print(f"chosen network_steps {result.chosen}; curve in {out}")


def cmd_evaluate(args, cfg, root):
    ds = load_manifest(_manifest(args, root))
    model = _classifier(args, root)
    spec = _attack_spec(cfg)
    idx = _eval_subset(ds, cfg)
    names = [args.defense] if args.defense else cfg["evaluate"]["defenses"]
    out = Path(args.out) if args.out else root / "eval"
    reports = []
    for name in names:
        defense = _defense(cfg, name, seed=args.seed)
        rep = evaluate_pipeline(ds.images[idx], ds.labels[idx], spec, defense, model, seed=args.seed,
                                image_ids=idx, paths=[ds.paths[i] for i in idx],
                                workers=cfg["evaluate"]["workers"])
        rep.write(out, stem=f"{spec.kind}_eps{spec.epsilon:g}_{name}")
        reports.append(rep)
        print(f"{name}: accuracy {rep.accuracy:.4f} ({rep.correct}/{rep.evaluated}), failures {rep.failures}")
    write_table(reports, out / f"table_{spec.kind}_eps{spec.epsilon:g}.csv")
    if any(r.failures for r in reports):
        return 1


def cmd_ablate(args, cfg, root):
    ds = load_manifest(_manifest(args, root))
    model = _classifier(args, root)
    idx = _eval_subset(ds, cfg)
    ab = cfg["ablation"]
    base = OagConfig(**{**cfg["defense"]["oag"], "seed": cfg["seed"]})
    result = ablation_sweep(ab["parameter"], ab["values"], base, ds.images[idx], ds.labels[idx],
                            _attack_spec(cfg), model, seed=cfg["seed"], workers=cfg["evaluate"]["workers"],
                            image_ids=idx)
    out = Path(args.out) if args.out else root / f"ablation_{result.parameter}.csv"
    result.write_csv(out)
    for row in result.rows():
        print(f"{row['parameter']}={row['value']}: accuracy {row['accuracy']:.4f}")


def cmd_residual(args, cfg, root):
    res = residual_map(load_image(args.image), load_image(args.reference))
    out = Path(args.out) if args.out else root / "residual.png"
    save_image(out, np.repeat(res[None] * 255.0, 3, axis=0))
    print(f"wrote {out}")


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-classifier": cmd_train_classifier,
    "attack": cmd_attack,
    "defend": cmd_defend,
    "calibrate": cmd_calibrate,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
    "residual": cmd_residual,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="oagdefense")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="YAML config file")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config entry, e.g. defense.oag.network_steps=150")
        p.add_argument("--root", help=f"output root (default ${ROOT_ENV} or ./runs)")
        p.add_argument("--out", help="output path")
        if name in ("train-classifier", "attack", "calibrate", "evaluate", "ablate"):
            p.add_argument("--manifest", help="dataset manifest.csv")
        if name in ("attack", "calibrate", "evaluate", "ablate"):
            p.add_argument("--classifier", help="classifier checkpoint")
        if name in ("defend", "evaluate"):
            p.add_argument("--defense", choices=("none", "mean_filter", "oag", "autoencoder"))
        if name == "evaluate":
            p.add_argument("--seed", type=int, required=True)
        elif name != "residual":
            p.add_argument("--seed", type=int)
        if name == "defend":
            p.add_argument("input", help="directory holding an attacked manifest")
            p.add_argument("--trace-every", type=int, default=0,
                           help="write OAG checkpoints every N network steps under <out>/traces/")
        if name == "calibrate":
            p.add_argument("--perturb", choices=("noise", "attack"), default="noise")
        if name == "residual":
            p.add_argument("image")
            p.add_argument("reference")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.overrides)
        if getattr(args, "seed", None) is not None:
            cfg["seed"] = args.seed
        root = output_root(args.root)
        return COMMANDS[args.command](args, cfg, root) or 0
    except (ConfigError, DefenseAborted, TrainingDiverged, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
