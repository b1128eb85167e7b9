"""Anomaly scores: the classifier-confidence score plus six alternatives.

The primary score needs only the semantic encoder and the classifier: softmax
the class logits and report one minus the highest probability, so 0 means
ideally normal. The alternatives compare reconstructions in image space,
latent space (full or semantic-only, unit-normalized), distances to per-class
prototype vectors, or the entropy of the classifier distribution.
"""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np
import torch

from . import model as m
from .data import LabeledImages
from .errors import ConfigurationError, InputError, ProtocolError

SCORE_METHODS = ("s", "s_x", "s_z", "s_zs", "s_zp", "s_zw", "s_c")
NORM_EPS = 1e-12


@dataclass(frozen=True)
class ScoreMethod:
    """Which score to compute; prototype-based kinds carry their prototype table."""

    kind: str = "s"
    prototypes: Optional[dict[int, np.ndarray]] = None

    def __post_init__(self):
        if self.kind not in SCORE_METHODS:
            raise ConfigurationError(f"unknown score method {self.kind!r}; choose from {SCORE_METHODS}")
        needs_protos = self.kind in ("s_zp", "s_zw")
        if needs_protos and not self.prototypes:
            raise ConfigurationError(f"score method {self.kind!r} requires a prototype table")
        if not needs_protos and self.prototypes is not None:
            raise ConfigurationError(f"score method {self.kind!r} does not take prototypes")


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def score_from_logits(logits: np.ndarray) -> np.ndarray:
    """1 - max softmax probability, in [0, (N-1)/N]."""
    return 1.0 - softmax(logits).max(axis=1)


def entropy_from_logits(logits: np.ndarray) -> np.ndarray:
    """Shannon entropy of the softmax distribution, in [0, ln N]."""
    p = softmax(logits)
    return -(p * np.log(np.clip(p, 1e-30, None))).sum(axis=1)


def _logits(bundle: m.ModelBundle, x: torch.Tensor) -> np.ndarray:
    bundle.eval_mode()
    with torch.no_grad():
        return m.classify(bundle, m.encode_semantic(bundle, x)).numpy()


def anomaly_score(bundle: m.ModelBundle, x: torch.Tensor) -> np.ndarray:
    """Primary score; touches only the semantic encoder and the classifier."""
    return score_from_logits(_logits(bundle, x))


def score_entropy(bundle: m.ModelBundle, x: torch.Tensor) -> np.ndarray:
    """Classifier-uncertainty score."""
    return entropy_from_logits(_logits(bundle, x))


def _as_2d(a: np.ndarray, name: str) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise InputError(f"{name} must be 2-d (batch, dim), got shape {a.shape}")
    return a


def unit_rows(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    norms = np.linalg.norm(a, axis=-1, keepdims=True)
    return a / np.maximum(norms, NORM_EPS)


def score_image(x: np.ndarray, x_hat: np.ndarray) -> np.ndarray:
    """Squared Euclidean distance between image and reconstruction, per sample."""
    x = np.asarray(x, dtype=np.float64)
    x_hat = np.asarray(x_hat, dtype=np.float64)
    if x.shape != x_hat.shape:
        raise InputError(f"image shapes differ: {x.shape} vs {x_hat.shape}")
    diff = (x - x_hat).reshape(len(x), -1)
    return (diff**2).sum(axis=1)


def score_latent(z: np.ndarray, z_hat: np.ndarray) -> np.ndarray:
    """Squared distance between unit-normalized latent codes, per sample."""
    z, z_hat = _as_2d(z, "codes"), _as_2d(z_hat, "codes")
    if z.shape != z_hat.shape:
        raise InputError(f"latent shapes differ: {z.shape} vs {z_hat.shape}")
    diff = unit_rows(z) - unit_rows(z_hat)
    return (diff**2).sum(axis=1)


def score_semantic_latent(z_semantic: np.ndarray, z_semantic_hat: np.ndarray) -> np.ndarray:
    """score_latent restricted to the semantic halves."""
    return score_latent(z_semantic, z_semantic_hat)


def compute_prototypes(latents_by_class: dict[int, np.ndarray]) -> dict[int, np.ndarray]:
    """Per-class means of unit-normalized semantic codes."""
    prototypes = {}
    for cls, latents in latents_by_class.items():
        latents = _as_2d(np.asarray(latents), f"latents of class {cls}")
        if len(latents) == 0:
            raise ProtocolError(f"class {cls} has no samples to build a prototype from")
        proto = unit_rows(latents).mean(axis=0)
        if np.linalg.norm(proto) < NORM_EPS:
            warnings.warn(f"prototype of class {cls} is degenerate (zero vector)")
        prototypes[int(cls)] = proto
    return prototypes


def group_by_class(latents: np.ndarray, labels: np.ndarray) -> dict[int, np.ndarray]:
    return {int(c): latents[labels == c] for c in np.unique(labels)}


def score_prototype(z_semantic: np.ndarray, prototypes: dict[int, np.ndarray]) -> np.ndarray:
    """Minimum squared distance from each (normalized) code to any prototype."""
    if not prototypes:
        raise ConfigurationError("prototype table is empty")
    z = unit_rows(_as_2d(z_semantic, "codes"))
    table = np.stack([prototypes[k] for k in sorted(prototypes)])  # (K, d)
    if table.shape[1] != z.shape[1]:
        raise InputError(f"prototype width {table.shape[1]} != code width {z.shape[1]}")
    d2 = ((z[:, None, :] - table[None, :, :]) ** 2).sum(axis=2)
    return d2.min(axis=1)


@dataclass
class ScoreReport:
    """Per-sample scores with ground-truth anomaly labels."""

    sample_ids: np.ndarray
    scores: np.ndarray
    labels: np.ndarray  # 1 = anomalous
    method: str
    meta: dict = field(default_factory=dict)


def _encode_all(bundle: m.ModelBundle, images: torch.Tensor, batch_size: int):
    """Eval-mode forward over batches: semantic/residual codes and reconstructions."""
    zs_parts, zr_parts, xh_parts = [], [], []
    with torch.no_grad():
        for start in range(0, len(images), batch_size):
            x = images[start : start + batch_size]
            z_s, z_r = m.encode_pair(bundle, x)
            xh = m.decode(bundle, z_s, z_r)
            zs_parts.append(z_s)
            zr_parts.append(z_r if z_r is not None else None)
            xh_parts.append(xh)
    z_s = torch.cat(zs_parts)
    z_r = torch.cat(zr_parts) if zr_parts[0] is not None else None
    return z_s, z_r, torch.cat(xh_parts)


def score_dataset(
    bundle: m.ModelBundle,
    data: LabeledImages,
    method: ScoreMethod,
    batch_size: int = 256,
) -> ScoreReport:
    """Score every sample with the requested method, preserving input order."""
    bundle.eval_mode()
    images = torch.from_numpy(np.ascontiguousarray(data.images))
    kind = method.kind

    if kind in ("s", "s_c"):
        if bundle.classifier is None:
            raise ConfigurationError(f"score method {kind!r} needs a classifier; this wiring has none")
        parts = []
        with torch.no_grad():
            for start in range(0, len(images), batch_size):
                x = images[start : start + batch_size]
                logits = m.classify(bundle, m.encode_semantic(bundle, x)).numpy()
                parts.append(score_from_logits(logits) if kind == "s" else entropy_from_logits(logits))
        scores = np.concatenate(parts)
    elif kind == "s_x":
        _, _, xh = _encode_all(bundle, images, batch_size)
        scores = score_image(data.images, xh.numpy())
    elif kind in ("s_z", "s_zs"):
        z_s, z_r, xh = _encode_all(bundle, images, batch_size)
        zh_s, zh_r, _ = _encode_all(bundle, xh, batch_size)
        if kind == "s_zs":
            scores = score_semantic_latent(z_s.numpy(), zh_s.numpy())
        else:
            z = torch.cat([z_s, z_r], dim=1) if z_r is not None else z_s
            zh = torch.cat([zh_s, zh_r], dim=1) if zh_r is not None else zh_s
            scores = score_latent(z.numpy(), zh.numpy())
    else:  # s_zp / s_zw
        parts = []
        with torch.no_grad():
            for start in range(0, len(images), batch_size):
                z_s = m.encode_semantic(bundle, images[start : start + batch_size]).numpy()
                parts.append(score_prototype(z_s, method.prototypes))
        scores = np.concatenate(parts)

    labels = data.extra.get("anomaly", np.zeros(len(data), dtype=np.int64))
    return ScoreReport(
        sample_ids=data.ids.copy(),
        scores=np.asarray(scores, dtype=np.float64),
        labels=np.asarray(labels, dtype=np.int64),
        method=kind,
        meta={},
    )


def write_score_report(report: ScoreReport, csv_path: Union[str, Path]) -> None:
    """Write sample_id,score,label rows plus a JSON sidecar with the metadata."""
    csv_path = Path(csv_path)
    with open(csv_path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["sample_id", "score", "label"])
        for sid, score, label in zip(report.sample_ids, report.scores, report.labels):
            writer.writerow([sid, f"{score:.10g}", int(label)])
    sidecar = {"method": report.method, **report.meta}
    csv_path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2) + "\n")
