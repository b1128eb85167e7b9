"""Weak sub-class labels from unsupervised clustering.

Pipeline: a pluggable fixed feature extractor, PCA to 100 dimensions, k-means
with the cluster count chosen by the average-silhouette method, and purity
diagnostics. The resulting assignments substitute for ground-truth class
labels when training in the fully unsupervised regime.
"""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Optional, Union

import numpy as np
import torch

from .errors import ConfigurationError, IngestionError, InputError, ProtocolError

Extractor = Callable[[np.ndarray], np.ndarray]


# ---------------------------------------------------------------------------
# feature extraction

def flatten_extractor(images: np.ndarray) -> np.ndarray:
    """Raw-pixel embedding: flatten each image to a vector."""
    return np.asarray(images, dtype=np.float64).reshape(len(images), -1)


def make_random_conv_extractor(channels: int, seed: int = 0, width: int = 32) -> Extractor:
    """A frozen random convolutional embedding (no training involved)."""
    gen = torch.Generator().manual_seed(seed)
    net = torch.nn.Sequential(
        torch.nn.Conv2d(channels, width, 4, stride=2, padding=1),
        torch.nn.ReLU(),
        torch.nn.Conv2d(width, width * 2, 4, stride=2, padding=1),
        torch.nn.ReLU(),
        torch.nn.AdaptiveAvgPool2d(4),
        torch.nn.Flatten(),
    )
    with torch.no_grad():
        for p in net.parameters():
            p.copy_(torch.randn(p.shape, generator=gen) * 0.05)
    net.eval()

    def extract(images: np.ndarray) -> np.ndarray:
        with torch.no_grad():
            out = net(torch.from_numpy(np.asarray(images, dtype=np.float32)))
        return out.numpy().astype(np.float64)

    return extract


def get_extractor(name: str, channels: int = 1, seed: int = 0) -> Extractor:
    if name == "flatten":
        return flatten_extractor
    if name == "random_conv":
        return make_random_conv_extractor(channels, seed)
    raise ConfigurationError(f"unknown extractor {name!r}; choose 'flatten' or 'random_conv'")


def extract_features(images: np.ndarray, extractor: Extractor, chunk: int = 512) -> np.ndarray:
    """Apply a fixed extractor over the corpus, one row per sample.

    If a chunk fails, samples are retried one by one to produce a per-sample
    error report instead of a bare traceback.
    """
    rows = []
    for start in range(0, len(images), chunk):
        block = images[start : start + chunk]
        try:
            rows.append(np.asarray(extractor(block), dtype=np.float64))
        except Exception:
            failures = []
            for i, img in enumerate(block):
                try:
                    rows.append(np.asarray(extractor(img[None]), dtype=np.float64))
                except Exception as e:
                    failures.append((start + i, repr(e)))
            if failures:
                detail = "; ".join(f"sample {i}: {msg}" for i, msg in failures[:5])
                raise IngestionError(
                    f"feature extraction failed for {len(failures)} samples ({detail})"
                ) from None
    features = np.concatenate(rows)
    if not np.isfinite(features).all():
        raise InputError("extractor produced non-finite features")
    return features


# ---------------------------------------------------------------------------
# PCA

@dataclass
class PcaModel:
    mean: np.ndarray
    components: np.ndarray  # (out_dims, in_dims), rows ordered by decreasing variance
    explained_variance: np.ndarray

    def transform(self, features: np.ndarray) -> np.ndarray:
        return (np.asarray(features, dtype=np.float64) - self.mean) @ self.components.T


def pca_reduce(features: np.ndarray, out_dims: int = 100) -> tuple[np.ndarray, PcaModel]:
    """Mean-centered projection onto the top principal axes (via SVD)."""
    X = np.asarray(features, dtype=np.float64)
    if X.ndim != 2:
        raise InputError(f"features must be 2-d, got shape {X.shape}")
    n, d = X.shape
    limit = min(n - 1, d)
    if out_dims > limit:
        warnings.warn(f"out_dims={out_dims} exceeds the data limit {limit}; reducing")
        out_dims = limit
    mean = X.mean(axis=0)
    centered = X - mean
    _, s, vt = np.linalg.svd(centered, full_matrices=False)
    variances = s**2 / max(n - 1, 1)
    rank = int((s > s[0] * 1e-12).sum()) if s.size else 0
    if rank < out_dims:
        warnings.warn(f"feature matrix has rank {rank} < out_dims={out_dims}; reducing")
        out_dims = max(rank, 1)
    model = PcaModel(mean=mean, components=vt[:out_dims], explained_variance=variances[:out_dims])
    return centered @ model.components.T, model


# ---------------------------------------------------------------------------
# k-means

@dataclass
class KMeansResult:
    assignments: np.ndarray
    centroids: np.ndarray
    inertia: float
    inertia_history: list[float]
    n_iter: int


def _plus_plus_seeds(X: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(X)
    centroids = np.empty((k, X.shape[1]))
    centroids[0] = X[rng.integers(n)]
    d2 = ((X - centroids[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0:
            centroids[j] = X[rng.integers(n)]
        else:
            centroids[j] = X[rng.choice(n, p=d2 / total)]
        d2 = np.minimum(d2, ((X - centroids[j]) ** 2).sum(axis=1))
    return centroids


def _nearest(X: np.ndarray, centroids: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # ||x - c||^2 expanded to avoid a (n, k, d) intermediate
    d2 = (X**2).sum(axis=1, keepdims=True) - 2.0 * X @ centroids.T + (centroids**2).sum(axis=1)
    np.maximum(d2, 0.0, out=d2)
    labels = d2.argmin(axis=1)
    return labels, d2[np.arange(len(X)), labels]


def kmeans(
    features: np.ndarray,
    k: int,
    seed: int,
    max_iter: int = 300,
    tol: float = 1e-4,
    restarts: int = 1,
) -> KMeansResult:
    """Lloyd iterations with k-means++ seeding; best of `restarts` runs by inertia.

    Empty clusters are re-seeded at the point currently farthest from its
    centroid. Convergence is declared when the largest centroid shift drops
    below tol.
    """
    X = np.asarray(features, dtype=np.float64)
    if X.ndim != 2:
        raise InputError(f"features must be 2-d, got shape {X.shape}")
    if k < 1 or k > len(X):
        raise ProtocolError(f"k must be in [1, {len(X)}], got {k}")

    best: Optional[KMeansResult] = None
    for restart in range(restarts):
        rng = np.random.default_rng((seed, restart))
        centroids = _plus_plus_seeds(X, k, rng)
        history: list[float] = []
        for it in range(max_iter):
            labels, d2 = _nearest(X, centroids)
            for j in np.flatnonzero(np.bincount(labels, minlength=k) == 0):
                idx = int(d2.argmax())
                labels[idx] = j
                d2[idx] = 0.0
            history.append(float(d2.sum()))
            new_centroids = np.stack([X[labels == j].mean(axis=0) for j in range(k)])
            shift = np.linalg.norm(new_centroids - centroids, axis=1).max()
            centroids = new_centroids
            if shift < tol:
                break
        labels, d2 = _nearest(X, centroids)
        result = KMeansResult(labels, centroids, float(d2.sum()), history, len(history))
        if best is None or result.inertia < best.inertia:
            best = result
    return best


# ---------------------------------------------------------------------------
# silhouette and model selection

def mean_silhouette(features: np.ndarray, assignments: np.ndarray, chunk: int = 512) -> float:
    """Average silhouette coefficient, computed with chunked pairwise distances."""
    X = np.asarray(features, dtype=np.float64)
    labels = np.asarray(assignments)
    classes = np.unique(labels)
    if len(classes) < 2:
        raise ProtocolError("silhouette needs at least two clusters")
    counts = {int(c): int((labels == c).sum()) for c in classes}
    onehot = np.stack([(labels == c).astype(np.float64) for c in classes], axis=1)  # (n, k)

    scores = np.empty(len(X))
    for start in range(0, len(X), chunk):
        block = slice(start, min(start + chunk, len(X)))
        d = np.sqrt(np.maximum(
            (X[block] ** 2).sum(axis=1, keepdims=True) - 2.0 * X[block] @ X.T + (X**2).sum(axis=1),
            0.0,
        ))
        # the expanded form leaves sqrt(rounding) noise on the diagonal
        d[np.arange(block.stop - start), np.arange(start, block.stop)] = 0.0
        cluster_sums = d @ onehot  # (b, k): summed distance to each cluster
        for row, i in enumerate(range(start, block.stop)):
            own = int(np.searchsorted(classes, labels[i]))
            n_own = counts[int(labels[i])]
            if n_own == 1:
                scores[i] = 0.0
                continue
            a = cluster_sums[row, own] / (n_own - 1)  # excludes the zero self-distance
            b = min(
                cluster_sums[row, j] / counts[int(classes[j])]
                for j in range(len(classes))
                if j != own
            )
            scores[i] = (b - a) / max(a, b) if max(a, b) > 0 else 0.0
    return float(scores.mean())


def select_k_silhouette(
    features: np.ndarray,
    k_range: Iterable[int],
    seed: int,
    restarts: int = 10,
    subsample: int = 5000,
) -> tuple[int, dict[int, float]]:
    """Pick the cluster count with the best mean silhouette (ties -> smaller k)."""
    X = np.asarray(features, dtype=np.float64)
    ks = sorted(set(int(k) for k in k_range))
    if not ks or ks[0] < 2 or ks[-1] > len(X) - 1:
        raise ProtocolError(f"k_range must lie within [2, {len(X) - 1}]")

    if len(X) > subsample:
        probe_idx = np.random.default_rng((seed, 104729)).choice(len(X), subsample, replace=False)
    else:
        probe_idx = np.arange(len(X))

    scores: dict[int, float] = {}
    for k in ks:
        result = kmeans(X, k, seed=seed, restarts=restarts)
        scores[k] = mean_silhouette(X[probe_idx], result.assignments[probe_idx])
    best_k = max(ks, key=lambda k: (scores[k], -k))
    return best_k, scores


def cluster_purity(assignments: np.ndarray, ground_truth: np.ndarray) -> float:
    """Fraction of samples agreeing with their cluster's majority class."""
    assignments = np.asarray(assignments)
    ground_truth = np.asarray(ground_truth)
    if assignments.shape != ground_truth.shape:
        raise InputError("assignments and ground truth must have the same length")
    total = 0
    for c in np.unique(assignments):
        _, counts = np.unique(ground_truth[assignments == c], return_counts=True)
        total += counts.max()
    return total / len(assignments)


# ---------------------------------------------------------------------------
# end-to-end pipeline + manifest I/O

@dataclass
class WeakLabelResult:
    assignments: np.ndarray
    k: int
    silhouette: float
    silhouette_by_k: dict[int, float]
    extractor_name: str
    seed: int


def weak_label_pipeline(
    images: np.ndarray,
    extractor_name: str = "flatten",
    k_range: Iterable[int] = range(2, 13),
    seed: int = 0,
    pca_dims: int = 100,
    channels: int = 1,
) -> WeakLabelResult:
    """Features -> PCA -> silhouette-selected k-means assignments."""
    extractor = get_extractor(extractor_name, channels=channels, seed=seed)
    features = extract_features(images, extractor)
    reduced, _ = pca_reduce(features, out_dims=pca_dims)
    best_k, scores = select_k_silhouette(reduced, k_range, seed=seed)
    result = kmeans(reduced, best_k, seed=seed, restarts=10)
    return WeakLabelResult(
        assignments=result.assignments.astype(np.int64),
        k=best_k,
        silhouette=scores[best_k],
        silhouette_by_k=scores,
        extractor_name=extractor_name,
        seed=seed,
    )


def write_weak_label_manifest(
    result: WeakLabelResult, sample_ids: np.ndarray, csv_path: Union[str, Path]
) -> None:
    """CSV of sample_id,weak_label plus a JSON sidecar with selection metadata."""
    csv_path = Path(csv_path)
    with open(csv_path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["sample_id", "weak_label"])
        for sid, label in zip(sample_ids, result.assignments):
            writer.writerow([sid, int(label)])
    meta = {
        "k": result.k,
        "silhouette": result.silhouette,
        "silhouette_by_k": {str(k): v for k, v in result.silhouette_by_k.items()},
        "seed": result.seed,
        "extractor": result.extractor_name,
    }
    csv_path.with_suffix(".json").write_text(json.dumps(meta, indent=2) + "\n")


def read_weak_label_manifest(csv_path: Union[str, Path]) -> dict[str, int]:
    path = Path(csv_path)
    if not path.exists():
        raise IngestionError(f"weak-label manifest {path} does not exist")
    mapping: dict[str, int] = {}
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames != ["sample_id", "weak_label"]:
            raise IngestionError(f"{path}: expected header sample_id,weak_label")
        for row in reader:
            mapping[row["sample_id"]] = int(row["weak_label"])
    return mapping
