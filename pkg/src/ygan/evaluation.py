"""ROC/AUC and EER metrics, the multi-run hold-one-class-out protocol, and the
linear-probe disentanglement diagnostic.

Anomalous samples are the positive class everywhere, and higher scores mean
more anomalous.
"""

from __future__ import annotations

import dataclasses
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np
import torch

from . import data as data_mod
from . import model as m
from . import scoring, training
from .errors import ConfigurationError, ProtocolError


def _split_scores(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ProtocolError("scores and labels must be equal-length 1-d arrays")
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    if len(pos) == 0 or len(neg) == 0:
        raise ProtocolError("both classes must be present to compute ROC metrics")
    return pos, neg


def roc_curve(scores, labels) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Operating points (thresholds, fpr, tpr) with tied scores grouped.

    Thresholds are the distinct score values in decreasing order; a sample is
    called anomalous when its score >= threshold. A leading +inf threshold
    anchors the curve at (0, 0).
    """
    pos, neg = _split_scores(scores, labels)
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    order = np.argsort(-scores, kind="mergesort")
    sorted_scores = scores[order]
    sorted_pos = (labels[order] == 1).astype(np.float64)

    distinct = np.flatnonzero(np.diff(sorted_scores)) if len(sorted_scores) > 1 else np.array([], dtype=int)
    boundary = np.concatenate([distinct, [len(sorted_scores) - 1]])
    tp = np.cumsum(sorted_pos)[boundary]
    fp = (boundary + 1) - tp
    thresholds = np.concatenate([[np.inf], sorted_scores[boundary]])
    fpr = np.concatenate([[0.0], fp / len(neg)])
    tpr = np.concatenate([[0.0], tp / len(pos)])
    return thresholds, fpr, tpr


def auc(scores, labels) -> float:
    """Area under the ROC curve (trapezoidal over tie-grouped operating points).

    Equals the pairwise probability that an anomalous sample outscores a
    normal one, with ties counted half.
    """
    _, fpr, tpr = roc_curve(scores, labels)
    return float(np.trapezoid(tpr, fpr))


def eer_threshold(scores, labels) -> tuple[float, float]:
    """Threshold where false-positive and false-negative rates cross.

    On discrete data the crossing is found by linear interpolation between
    adjacent operating points; returns (threshold, eer).
    """
    thresholds, fpr, tpr = roc_curve(scores, labels)
    fnr = 1.0 - tpr
    diff = fpr - fnr  # increases from -1 toward +1 as the threshold drops

    idx = int(np.searchsorted(diff >= 0, True))
    if idx == 0:
        return float(thresholds[0]), float(max(fpr[0], fnr[0]))
    if idx == len(diff):
        return float(thresholds[-1]), float(max(fpr[-1], fnr[-1]))
    d0, d1 = diff[idx - 1], diff[idx]
    alpha = 0.0 if d1 == d0 else -d0 / (d1 - d0)
    t0 = thresholds[idx - 1] if np.isfinite(thresholds[idx - 1]) else thresholds[idx]
    t1 = thresholds[idx]
    threshold = float(t0 + alpha * (t1 - t0))
    eer = float(0.5 * (fpr[idx - 1] + alpha * (fpr[idx] - fpr[idx - 1])
                       + fnr[idx - 1] + alpha * (fnr[idx] - fnr[idx - 1])))
    return threshold, eer


def tpr_tnr_per_class(
    scores,
    anomaly_labels,
    class_ids,
    threshold: float,
) -> dict[int, tuple[Optional[float], Optional[float]]]:
    """Per-class detection rates at a global threshold.

    TPR covers a class's anomalous members, TNR its normal members; a side
    with no members is reported as None (printed as "/").
    """
    scores = np.asarray(scores, dtype=np.float64)
    anomaly_labels = np.asarray(anomaly_labels)
    class_ids = np.asarray(class_ids)
    predicted = scores >= threshold

    table: dict[int, tuple[Optional[float], Optional[float]]] = {}
    for cls in np.unique(class_ids):
        mask = class_ids == cls
        anom = mask & (anomaly_labels == 1)
        norm = mask & (anomaly_labels == 0)
        tpr = float(predicted[anom].mean()) if anom.any() else None
        tnr = float((~predicted[norm]).mean()) if norm.any() else None
        table[int(cls)] = (tpr, tnr)
    return table


# ---------------------------------------------------------------------------
# multi-run protocol

@dataclass
class RunResult:
    anomaly_class: Union[int, str]
    auc: float
    eer: float
    eer_threshold: float
    per_class: dict[int, tuple[Optional[float], Optional[float]]]
    seed: int
    score_method: str


@dataclass
class ProtocolReport:
    runs: list[RunResult]
    failures: list[tuple[Union[int, str], str]] = field(default_factory=list)

    @property
    def mean_auc(self) -> float:
        return float(np.mean([r.auc for r in self.runs]))

    @property
    def std_auc(self) -> float:
        return float(np.std([r.auc for r in self.runs]))

    def to_json_dict(self) -> dict:
        return {
            "runs": [
                {
                    "anomaly_class": r.anomaly_class,
                    "auc": r.auc,
                    "eer": r.eer,
                    "eer_threshold": r.eer_threshold,
                    "seed": r.seed,
                    "score_method": r.score_method,
                    "per_class": {
                        str(c): {"tpr": t, "tnr": n} for c, (t, n) in r.per_class.items()
                    },
                }
                for r in self.runs
            ],
            "failures": [{"anomaly_class": c, "error": e} for c, e in self.failures],
            "mean_auc": self.mean_auc,
            "std_auc": self.std_auc,
        }

    def to_markdown(self) -> str:
        header = [str(r.anomaly_class) for r in self.runs]
        values = [f"{r.auc:.3f}" for r in self.runs]
        lines = [
            "| Model | " + " | ".join(header) + " | Mean ± Std |",
            "|" + "---|" * (len(self.runs) + 2),
            "| this work | " + " | ".join(values) + f" | {self.mean_auc:.3f} ± {self.std_auc:.3f} |",
        ]
        return "\n".join(lines) + "\n"


def evaluate_split(
    bundle: m.ModelBundle,
    split: data_mod.SplitResult,
    method: scoring.ScoreMethod,
    seed: int = 0,
) -> tuple[RunResult, scoring.ScoreReport]:
    """Score a held-out test set and compute AUC, EER, and per-class rates."""
    report = scoring.score_dataset(bundle, split.test, method)
    run_auc = auc(report.scores, report.labels)
    threshold, eer = eer_threshold(report.scores, report.labels)
    per_class = tpr_tnr_per_class(
        report.scores, report.labels, split.test.extra["orig_class"], threshold
    )
    result = RunResult(
        anomaly_class=split.spec.anomaly_class,
        auc=run_auc,
        eer=eer,
        eer_threshold=threshold,
        per_class=per_class,
        seed=seed,
        score_method=method.kind,
    )
    return result, report


def resolve_score_method(
    kind: str,
    bundle: m.ModelBundle,
    train_split: Optional[data_mod.LabeledImages] = None,
    weak_labels: Optional[np.ndarray] = None,
) -> scoring.ScoreMethod:
    """Build a ScoreMethod, deriving prototype tables from the training split."""
    if kind not in ("s_zp", "s_zw"):
        return scoring.ScoreMethod(kind=kind)
    if train_split is None:
        raise ConfigurationError(f"score method {kind!r} needs the training split to build prototypes")
    labels = weak_labels if kind == "s_zw" else train_split.labels
    if labels is None:
        raise ConfigurationError("s_zw needs weak labels; run the weak-label pipeline first")
    if len(np.unique(labels)) < 2:
        raise ConfigurationError(f"score method {kind!r} needs at least two labeled classes for prototypes")
    bundle.eval_mode()
    with torch.no_grad():
        images = torch.from_numpy(np.ascontiguousarray(train_split.images))
        parts = [
            m.encode_semantic(bundle, images[i : i + 256]).numpy()
            for i in range(0, len(images), 256)
        ]
    latents = np.concatenate(parts)
    prototypes = scoring.compute_prototypes(scoring.group_by_class(latents, np.asarray(labels)))
    return scoring.ScoreMethod(kind=kind, prototypes=prototypes)


def run_protocol(
    data: data_mod.LabeledImages,
    model_config: m.ModelConfig,
    train_config: training.TrainConfig,
    score_kind: str = "s",
    runs: Optional[int] = None,
    out_dir: Optional[Union[str, Path]] = None,
) -> ProtocolReport:
    """Hold each class out in turn: split, train, score, evaluate, aggregate.

    Failed runs are recorded and skipped in the aggregate, with a warning.
    """
    classes = sorted(int(c) for c in np.unique(data.labels))
    runs = len(classes) if runs is None else runs
    if runs > len(classes):
        raise ProtocolError(f"runs={runs} exceeds the class count {len(classes)}")

    report = ProtocolReport(runs=[])
    for r in range(runs):
        anomaly_class = classes[r]
        run_seed = train_config.seed + r
        try:
            split = data_mod.k_classes_out_split(
                data, data_mod.SplitSpec(anomaly_class=anomaly_class, seed=run_seed)
            )
            run_model_config = dataclasses.replace(
                model_config, num_classes=split.train.num_classes
            )
            run_train_config = dataclasses.replace(train_config, seed=run_seed)
            ckpt = training.train(run_model_config, run_train_config, split.train)
            method = resolve_score_method(score_kind, ckpt.bundle, split.train)
            result, score_report = evaluate_split(ckpt.bundle, split, method, seed=run_seed)
            report.runs.append(result)
            if out_dir is not None:
                out = Path(out_dir)
                out.mkdir(parents=True, exist_ok=True)
                scoring.write_score_report(score_report, out / f"scores_class{anomaly_class}.csv")
        except Exception as e:  # record and continue with the remaining runs
            warnings.warn(f"run with anomaly class {anomaly_class} failed: {e}")
            report.failures.append((anomaly_class, repr(e)))

    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "protocol_report.json").write_text(
            json.dumps(report.to_json_dict(), indent=2) + "\n"
        )
        (out / "protocol_report.md").write_text(report.to_markdown())
    return report


# ---------------------------------------------------------------------------
# disentanglement probes

def probe_disentanglement(
    bundle: m.ModelBundle,
    colored: data_mod.LabeledImages,
    seed: int = 0,
    test_fraction: float = 0.25,
    max_iter: int = 2000,
) -> dict[str, float]:
    """Held-out accuracies of four linear probes on frozen latent codes.

    Successful disentanglement shows up as high digit accuracy from the
    semantic code, near-chance digit accuracy from the residual code, and high
    color accuracy from the residual code.
    """
    from sklearn.linear_model import LogisticRegression
    from sklearn.preprocessing import StandardScaler

    if "color" not in colored.extra:
        raise ProtocolError("probe needs dual labels; extra['color'] is missing")
    if not bundle.wiring.residual:
        raise ConfigurationError("probe needs a wiring with a residual code")
    digits = colored.labels
    colors = colored.extra["color"]
    if len(np.unique(digits)) < 2 or len(np.unique(colors)) < 2:
        raise ProtocolError("probe needs at least two digit classes and two color classes")

    bundle.eval_mode()
    images = torch.from_numpy(np.ascontiguousarray(colored.images))
    zs_parts, zr_parts = [], []
    with torch.no_grad():
        for i in range(0, len(images), 256):
            z_s, z_r = m.encode_pair(bundle, images[i : i + 256])
            zs_parts.append(z_s.numpy())
            zr_parts.append(z_r.numpy())
    z_s = np.concatenate(zs_parts)
    z_r = np.concatenate(zr_parts)

    rng = np.random.default_rng(seed)
    order = rng.permutation(len(colored))
    n_test = max(1, int(len(colored) * test_fraction))
    test_idx, train_idx = order[:n_test], order[n_test:]

    def probe(features: np.ndarray, targets: np.ndarray) -> float:
        scaler = StandardScaler().fit(features[train_idx])
        clf = LogisticRegression(max_iter=max_iter, random_state=seed)
        clf.fit(scaler.transform(features[train_idx]), targets[train_idx])
        return float(clf.score(scaler.transform(features[test_idx]), targets[test_idx]))

    return {
        "acc_digit_from_zs": probe(z_s, digits),
        "acc_digit_from_zr": probe(z_r, digits),
        "acc_color_from_zs": probe(z_s, colors),
        "acc_color_from_zr": probe(z_r, colors),
    }
