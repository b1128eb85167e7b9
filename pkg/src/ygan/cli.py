"""Command-line entry point: train, eval, colorize, weaklabels, demo.

Experiments are described by a JSON file with optional sections (model, train,
data, split, score, eval); unknown keys are rejected before any work starts.
Every command prints a single-line JSON summary to stdout and writes a
provenance record next to its outputs. Exit codes: 0 success, 2 configuration
error, 3 numerical failure, 4 I/O failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import os
import sys
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from . import data as data_mod
from . import evaluation, model, scoring, training, weaklabels
from .errors import (
    CheckpointError,
    ConfigurationError,
    IngestionError,
    InputError,
    NumericalError,
    ProtocolError,
)

DATA_DIR_ENV = "YGAN_DATA_DIR"

_WEIGHTS_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {f"lambda{i}": {"type": "number", "minimum": 0} for i in range(1, 7)},
}

_AUGMENT_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "sharpen": {"type": "boolean"},
        "emboss": {"type": "boolean"},
        "equalize": {"type": "boolean"},
        "brightness_contrast": {"type": "boolean"},
        "hflip": {"type": "boolean"},
        "affine": {"type": "boolean"},
        "op_probability": {"type": "number", "minimum": 0, "maximum": 1},
        "max_rotation_deg": {"type": "number", "minimum": 0},
        "max_translate_frac": {"type": "number", "minimum": 0},
        "scale_range": {"type": "array", "items": {"type": "number"}, "minItems": 2, "maxItems": 2},
    },
}

EXPERIMENT_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "model": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "image_size": {"enum": [32, 64, 128, 256]},
                "channels": {"enum": [1, 3]},
                "latent_dim": {"type": "integer", "minimum": 1},
                "num_classes": {"type": "integer", "minimum": 2},
                "hidden_units": {"type": "integer", "minimum": 1},
                "base_filters": {"type": "integer", "minimum": 1},
            },
        },
        "train": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "epochs": {"type": "integer", "minimum": 1},
                "batch_size": {"type": "integer", "minimum": 1},
                "learning_rate": {"type": "number", "exclusiveMinimum": 0},
                "beta1": {"type": "number"},
                "beta2": {"type": "number"},
                "weights": _WEIGHTS_SCHEMA,
                "lambda_R_gamma": {"type": "number"},
                "seed": {"type": "integer"},
                "ablation": {"enum": list(training.ABLATION_VARIANTS)},
            },
        },
        "data": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "source": {"enum": ["idx_pair", "image_folder", "synthetic"]},
                "path": {"type": "string"},
                "image_size": {"enum": [32, 64, 128, 256]},
                "channels": {"enum": [1, 3]},
                "class_names": {"type": "array", "items": {"type": "string"}},
                "synthetic_count": {"type": "integer", "minimum": 1},
                "synthetic_seed": {"type": "integer"},
                "colorize": {"type": "boolean"},
                "colorize_seed": {"type": "integer"},
                "augment": {"oneOf": [{"type": "boolean"}, _AUGMENT_SCHEMA]},
                "augment_multiplier": {"type": "integer", "minimum": 1},
                "weak_labels": {"type": "string"},
            },
        },
        "split": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "anomaly_class": {"oneOf": [{"type": "integer"}, {"const": "external"}]},
                "train_fraction": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                "seed": {"type": "integer"},
                "balance_test": {"type": "boolean"},
            },
        },
        "score": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"method": {"enum": list(scoring.SCORE_METHODS)}},
        },
        "eval": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"runs": {"type": "integer", "minimum": 1}},
        },
    },
}


def load_experiment_file(path: str) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise IngestionError(f"cannot read config {path}: {e}") from e
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigurationError(f"{path} is not valid JSON: {e}") from e
    import jsonschema

    try:
        jsonschema.validate(doc, EXPERIMENT_SCHEMA)
    except jsonschema.ValidationError as e:
        location = "/".join(str(p) for p in e.absolute_path) or "<root>"
        raise ConfigurationError(f"{path}: invalid config at {location}: {e.message}") from e
    return doc


def _resolve_data_path(path: Optional[str]) -> Optional[str]:
    if path is None:
        return None
    p = Path(path)
    if p.exists() or p.is_absolute():
        return str(p)
    root = os.environ.get(DATA_DIR_ENV)
    if root and (Path(root) / p).exists():
        return str(Path(root) / p)
    return str(p)


def _dataset_spec(doc: dict) -> data_mod.DatasetSpec:
    section = dict(doc.get("data", {}))
    section.pop("augment", None)
    section.pop("augment_multiplier", None)
    section.pop("weak_labels", None)
    section.pop("colorize", None)
    section.pop("colorize_seed", None)
    section.setdefault("source", "synthetic")
    section.setdefault("image_size", doc.get("model", {}).get("image_size", 32))
    section.setdefault("channels", doc.get("model", {}).get("channels", 1))
    if "class_names" in section:
        section["class_names"] = tuple(section["class_names"])
    section["path"] = _resolve_data_path(section.get("path"))
    return data_mod.DatasetSpec(**section)


def _split_spec(doc: dict) -> data_mod.SplitSpec:
    section = dict(doc.get("split", {}))
    section.setdefault("anomaly_class", 0)
    return data_mod.SplitSpec(**section)


def _train_config(doc: dict, ablation_override: Optional[str] = None) -> training.TrainConfig:
    section = dict(doc.get("train", {}))
    if "weights" in section:
        from .losses import LossWeights

        section["weights"] = LossWeights(**section["weights"])
    if ablation_override is not None:
        section["ablation"] = ablation_override
    return training.TrainConfig(**section)


def _model_config(doc: dict, num_classes: int, spec: data_mod.DatasetSpec) -> model.ModelConfig:
    section = dict(doc.get("model", {}))
    section.setdefault("image_size", spec.image_size)
    section.setdefault("channels", 3 if doc.get("data", {}).get("colorize") else spec.channels)
    section.setdefault("num_classes", num_classes)
    return model.ModelConfig(**section)


def _load_and_split(doc: dict):
    """Shared front half of the pipeline: ingest, colorize, split, relabel, augment."""
    spec = _dataset_spec(doc)
    data = data_mod.load_dataset(spec)
    data_section = doc.get("data", {})
    if data_section.get("colorize"):
        data = data_mod.make_color_mnist(data, seed=data_section.get("colorize_seed", 0))
    split = data_mod.k_classes_out_split(data, _split_spec(doc))

    weak_path = data_section.get("weak_labels")
    if weak_path:
        mapping = weaklabels.read_weak_label_manifest(_resolve_data_path(weak_path))
        try:
            labels = np.asarray([mapping[str(i)] for i in split.train.ids], dtype=np.int64)
        except KeyError as e:
            raise ConfigurationError(f"weak-label manifest is missing sample id {e}") from e
        split = dataclasses.replace(
            split,
            train=data_mod.LabeledImages(split.train.images, labels, split.train.ids,
                                         dict(split.train.extra)),
        )

    augment_cfg = data_section.get("augment", False)
    if augment_cfg:
        policy = (data_mod.AugmentPolicy(**augment_cfg) if isinstance(augment_cfg, dict)
                  else data_mod.AugmentPolicy())
        split = dataclasses.replace(
            split,
            train=data_mod.augment_dataset(split.train, policy, seed=split.spec.seed,
                                           multiplier=data_section.get("augment_multiplier", 5)),
        )
    return spec, data, split


def _config_hash(doc: dict) -> str:
    return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()


def write_provenance(out_dir: Path, command: str, doc: Optional[dict], extra: dict) -> None:
    import torch

    record = {
        "command": command,
        "argv": sys.argv[1:],
        "config_sha256": _config_hash(doc) if doc is not None else None,
        "versions": {
            "ygan": __version__,
            "torch": torch.__version__,
            "numpy": np.__version__,
            "python": sys.version.split()[0],
        },
        **extra,
    }
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "provenance.json").write_text(json.dumps(record, indent=2) + "\n")


def _summary(payload: dict) -> None:
    print(json.dumps(payload, sort_keys=True))


# ---------------------------------------------------------------------------
# commands

def cmd_train(args) -> int:
    doc = load_experiment_file(args.config)
    out = Path(args.out)
    train_config = _train_config(doc, args.ablation)
    spec, _, split = _load_and_split(doc)
    model_config = _model_config(doc, split.train.num_classes, spec)

    resume = training.load_checkpoint(args.resume) if args.resume else None
    out.mkdir(parents=True, exist_ok=True)
    data_mod.write_split_manifest(split, out / "split_manifest.json")
    ckpt = training.train(model_config, train_config, split.train, out_dir=out, resume=resume)
    write_provenance(out, "train", doc, {
        "seeds": {"train": train_config.seed, "split": split.spec.seed},
        "ablation": train_config.ablation,
        "epochs": ckpt.epoch,
    })
    _summary({
        "command": "train",
        "checkpoint": str(out / "checkpoint.bin"),
        "loss_log": str(out / "loss_log.csv"),
        "epochs": ckpt.epoch,
        "global_step": ckpt.global_step,
        "ablation": train_config.ablation,
    })
    return 0


def cmd_eval(args) -> int:
    doc = load_experiment_file(args.config)
    out = Path(args.out)
    method_kind = args.method or doc.get("score", {}).get("method", "s")
    runs = args.runs if args.runs is not None else doc.get("eval", {}).get("runs", 1)

    if args.ckpt:
        ckpt = training.load_checkpoint(args.ckpt)
        plan = training.apply_ablation(ckpt.train_config.ablation)
        if method_kind == "s" and plan.score_method != "s":
            method_kind = plan.score_method  # e.g. B3 scores by reconstruction
        _, _, split = _load_and_split(doc)
        weak = None
        if method_kind == "s_zw":
            manifest = args.weak_labels or doc.get("data", {}).get("weak_labels")
            if not manifest:
                raise ConfigurationError("--method s_zw needs a weak-label manifest (--weak-labels)")
            mapping = weaklabels.read_weak_label_manifest(_resolve_data_path(manifest))
            weak = np.asarray([mapping[str(i)] for i in split.train.ids], dtype=np.int64)
        method = evaluation.resolve_score_method(method_kind, ckpt.bundle, split.train, weak)
        result, report = evaluation.evaluate_split(ckpt.bundle, split, method,
                                                   seed=ckpt.train_config.seed)
        out.mkdir(parents=True, exist_ok=True)
        report.meta.update({
            "method": method_kind,
            "checkpoint": str(args.ckpt),
            "dataset": doc.get("data", {}).get("source", "synthetic"),
            "seed": ckpt.train_config.seed,
        })
        scoring.write_score_report(report, out / "scores.csv")
        metrics = {
            "auc": result.auc,
            "eer": result.eer,
            "eer_threshold": result.eer_threshold,
            "anomaly_class": result.anomaly_class,
            "per_class": {str(c): {"tpr": t, "tnr": n} for c, (t, n) in result.per_class.items()},
        }
        (out / "metrics.json").write_text(json.dumps(metrics, indent=2) + "\n")
        write_provenance(out, "eval", doc, {"method": method_kind, "checkpoint": str(args.ckpt)})
        _summary({"command": "eval", "auc": result.auc, "eer": result.eer,
                  "method": method_kind, "out": str(out)})
        return 0

    # protocol mode: train + evaluate once per held-out class
    spec, data, _ = _load_and_split(doc)
    train_config = _train_config(doc)
    model_config_doc = dict(doc.get("model", {}))
    base_model_config = model.ModelConfig(**{
        "image_size": model_config_doc.get("image_size", spec.image_size),
        "channels": model_config_doc.get("channels",
                                         3 if doc.get("data", {}).get("colorize") else spec.channels),
        **{k: v for k, v in model_config_doc.items() if k not in ("image_size", "channels")},
    })
    report = evaluation.run_protocol(data, base_model_config, train_config,
                                     score_kind=method_kind, runs=runs, out_dir=out)
    write_provenance(out, "eval", doc, {"method": method_kind, "runs": runs})
    _summary({
        "command": "eval",
        "runs": len(report.runs),
        "failures": len(report.failures),
        "mean_auc": report.mean_auc,
        "std_auc": report.std_auc,
        "out": str(out),
    })
    return 0


def _source_dataset_for_colorize(src: str, seed: int) -> data_mod.LabeledImages:
    if src == "synthetic" or src.startswith("synthetic:"):
        parts = src.split(":")
        count = int(parts[1]) if len(parts) > 1 else 12000
        return data_mod.load_dataset(data_mod.DatasetSpec(
            source="synthetic", synthetic_count=count, synthetic_seed=seed))
    root = Path(_resolve_data_path(src))
    if not root.exists():
        raise IngestionError(f"colorize source {src} does not exist")
    has_idx = root.is_dir() and any(
        data_mod._idx_magic(p) == data_mod.IDX_IMAGES_MAGIC for p in root.iterdir() if p.is_file()
    )
    source = "idx_pair" if has_idx or root.is_file() else "image_folder"
    return data_mod.load_dataset(data_mod.DatasetSpec(source=source, path=str(root)))


def cmd_colorize(args) -> int:
    from PIL import Image

    palette = None
    if args.palette:
        palette = {k: tuple(v) for k, v in json.loads(Path(args.palette).read_text()).items()}
    gray = _source_dataset_for_colorize(args.src, args.seed)
    colored = data_mod.make_color_mnist(gray, palette=palette, seed=args.seed)

    dst = Path(args.dst)
    dst.mkdir(parents=True, exist_ok=True)
    rows = []
    for i in range(len(colored)):
        digit = int(colored.labels[i])
        rel = f"{digit}/{i:06d}.png"
        path = dst / rel
        path.parent.mkdir(exist_ok=True)
        arr = data_mod.to_uint8(colored.images[i])
        Image.fromarray(np.moveaxis(arr, 0, 2), mode="RGB").save(path)
        rows.append((rel, digit, int(colored.extra["color"][i])))

    manifest = dst / "manifest.csv"
    with open(manifest, "w", newline="") as f:
        f.write("sample_id,digit_label,color_label\n")
        for rel, digit, color in rows:
            f.write(f"{rel},{digit},{color}\n")
    palette_used = palette or data_mod.DEFAULT_PALETTE
    (dst / "meta.json").write_text(json.dumps({
        "palette": {k: list(v) for k, v in palette_used.items()},
        "seed": args.seed,
        "count": len(rows),
        "source": args.src,
    }, indent=2) + "\n")
    write_provenance(dst, "colorize", None, {"seed": args.seed, "count": len(rows)})
    _summary({"command": "colorize", "count": len(rows), "dst": str(dst),
              "palette_size": len(palette_used)})
    return 0


def cmd_weaklabels(args) -> int:
    doc = load_experiment_file(args.config)
    out = Path(args.out)
    try:
        lo, hi = args.k_range.split("..")
        k_range = range(int(lo), int(hi) + 1)
    except ValueError as e:
        raise ConfigurationError(f"--k-range must look like 2..12, got {args.k_range!r}") from e

    _, _, split = _load_and_split(doc)
    result = weaklabels.weak_label_pipeline(
        split.train.images,
        extractor_name=args.extractor,
        k_range=k_range,
        seed=doc.get("split", {}).get("seed", 0),
        channels=split.train.images.shape[1],
    )
    out.mkdir(parents=True, exist_ok=True)
    weaklabels.write_weak_label_manifest(result, split.train.ids, out / "weak_labels.csv")
    write_provenance(out, "weaklabels", doc, {
        "k": result.k, "extractor": args.extractor, "silhouette": result.silhouette,
    })
    _summary({"command": "weaklabels", "k": result.k, "silhouette": result.silhouette,
              "rows": len(split.train.ids), "manifest": str(out / "weak_labels.csv")})
    return 0


def _load_colorized_folder(path: Path, image_size: int) -> data_mod.LabeledImages:
    data = data_mod.load_dataset(data_mod.DatasetSpec(
        source="image_folder", path=str(path), image_size=image_size, channels=3))
    manifest = path / "manifest.csv"
    if manifest.exists():
        colors = {}
        with open(manifest) as f:
            next(f)
            for line in f:
                sid, _, color = line.strip().split(",")
                colors[sid] = int(color)
        data.extra["color"] = np.asarray([colors[str(i)] for i in data.ids], dtype=np.int64)
    return data


def cmd_demo(args) -> int:
    from PIL import Image

    ckpt = training.load_checkpoint(args.ckpt)
    if not ckpt.bundle.wiring.residual:
        raise ConfigurationError("the demo needs a model with a residual code")
    size = ckpt.model_config.image_size
    data = _load_colorized_folder(Path(args.images), size)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    import torch

    n = min(args.grid, len(data))
    picks = np.random.default_rng(args.seed).choice(len(data), n, replace=False)
    sources = data.subset(np.sort(picks))
    bundle = ckpt.bundle.eval_mode()
    with torch.no_grad():
        x = torch.from_numpy(np.ascontiguousarray(sources.images))
        z_s, z_r = model.encode_pair(bundle, x)
        cells = np.empty((n, n) + sources.images.shape[1:], dtype=np.float32)
        for i in range(n):  # row i supplies the residual code
            hybrid = model.decode(bundle, z_s, z_r[i].repeat(n, 1))
            cells[i] = hybrid.numpy()

    c, h, w = sources.images.shape[1:]
    grid = np.full((c, (n + 1) * h, (n + 1) * w), 1.0, dtype=np.float32)
    for j in range(n):  # top row: semantic sources
        grid[:, 0:h, (j + 1) * w : (j + 2) * w] = sources.images[j]
    for i in range(n):  # left column: residual sources
        grid[:, (i + 1) * h : (i + 2) * h, 0:w] = sources.images[i]
        for j in range(n):
            grid[:, (i + 1) * h : (i + 2) * h, (j + 1) * w : (j + 2) * w] = cells[i, j]
    arr = data_mod.to_uint8(grid)
    img = Image.fromarray(arr[0], mode="L") if c == 1 else Image.fromarray(np.moveaxis(arr, 0, 2), mode="RGB")
    img.save(out / "hybrid_grid.png")

    accuracies = evaluation.probe_disentanglement(bundle, data, seed=args.seed)
    (out / "probe_accuracies.json").write_text(json.dumps(accuracies, indent=2) + "\n")
    write_provenance(out, "demo", None, {"checkpoint": str(args.ckpt), "grid": n})
    _summary({"command": "demo", "grid_image": str(out / "hybrid_grid.png"), **accuracies})
    return 0


# ---------------------------------------------------------------------------
# argument parsing and dispatch

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ygan", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model from an experiment config")
    p.add_argument("config")
    p.add_argument("--out", required=True)
    p.add_argument("--resume", default=None, help="checkpoint to continue from")
    p.add_argument("--ablation", default=None, choices=training.ABLATION_VARIANTS)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint or run the multi-run protocol")
    p.add_argument("config")
    p.add_argument("--ckpt", default=None, help="checkpoint for single-run evaluation")
    p.add_argument("--method", default=None, choices=scoring.SCORE_METHODS)
    p.add_argument("--runs", type=int, default=None)
    p.add_argument("--weak-labels", default=None, help="manifest for the s_zw method")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("colorize", help="write a colorized digit corpus to disk")
    p.add_argument("src", help="IDX directory, image folder, or synthetic[:count]")
    p.add_argument("dst")
    p.add_argument("--palette", default=None, help="JSON file of name -> [r, g, b]")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_colorize)

    p = sub.add_parser("weaklabels", help="cluster the training split into weak labels")
    p.add_argument("config")
    p.add_argument("--k-range", default="2..12")
    p.add_argument("--extractor", default="flatten", choices=["flatten", "random_conv"])
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_weaklabels)

    p = sub.add_parser("demo", help="hybrid-reconstruction grid plus probe accuracies")
    p.add_argument("ckpt")
    p.add_argument("images", help="colorized corpus directory (from `ygan colorize`)")
    p.add_argument("--out", required=True)
    p.add_argument("--grid", type=int, default=6)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_demo)

    return parser


def main(argv: Optional[list[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigurationError, InputError, ProtocolError) as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return 2
    except NumericalError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return 3
    except (IngestionError, CheckpointError, OSError) as e:
        print(f"I/O failure: {e}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
