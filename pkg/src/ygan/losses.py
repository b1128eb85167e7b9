"""The six training loss terms and the combined generator/discriminator objectives.

Every loss reduces to a batch mean so the weighting coefficients stay
independent of batch size. The residual-confusion term reuses the plain
cross-entropy formula; the adversarial sign flip lives in the gradient-reversal
layer upstream of the classifier, not in the loss.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .errors import InputError, ProtocolError

PROB_EPS = 1e-7  # clamp for log() in the discriminator BCE
COSINE_EPS = 1e-12  # guard for zero-norm codes in the consistency term

LOSS_NAMES = ("rec", "adv", "bce", "cls_s", "cls_r", "con")


@dataclass(frozen=True)
class LossWeights:
    """Coefficients of the combined objectives."""

    lambda1: float = 50.0  # reconstruction
    lambda2: float = 1.0  # adversarial feature matching
    lambda3: float = 1.0  # semantic classification
    lambda4: float = 1.0  # residual confusion
    lambda5: float = 50.0  # consistency
    lambda6: float = 1.0  # discriminator BCE

    def __post_init__(self):
        for name in ("lambda1", "lambda2", "lambda3", "lambda4", "lambda5", "lambda6"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise InputError(f"{name} must be finite and >= 0, got {v}")


@dataclass
class LossBreakdown:
    """Scalar loss values of one training step.

    total_G and total_D recompute exactly from the components and weights;
    total_D is NaN for wirings without a discriminator.
    """

    rec: float
    adv: float
    bce: float
    cls_s: float
    cls_r: float
    con: float
    total_G: float
    total_D: float


def _check_same_shape(a: torch.Tensor, b: torch.Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise InputError(f"{what} shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")


def reconstruction_loss(x: torch.Tensor, x_hat: torch.Tensor) -> torch.Tensor:
    """Mean absolute difference between images and their reconstructions."""
    _check_same_shape(x, x_hat, "image")
    return (x - x_hat).abs().mean()


def adversarial_loss(f_real: torch.Tensor, f_fake: torch.Tensor) -> torch.Tensor:
    """Feature-matching loss: mean squared difference of discriminator features."""
    _check_same_shape(f_real, f_fake, "feature")
    return (f_real - f_fake).square().mean()


def discriminator_bce(real_prob: torch.Tensor, fake_prob: torch.Tensor) -> torch.Tensor:
    """Binary cross-entropy pushing real probabilities to 1 and fake to 0."""
    real = real_prob.clamp(PROB_EPS, 1.0 - PROB_EPS)
    fake = fake_prob.clamp(PROB_EPS, 1.0 - PROB_EPS)
    return -(torch.log(real) + torch.log(1.0 - fake)).mean()


def _check_labels(logits: torch.Tensor, labels: torch.Tensor) -> None:
    if logits.ndim != 2:
        raise InputError(f"logits must be (B, N), got {tuple(logits.shape)}")
    if labels.shape != logits.shape[:1]:
        raise InputError(f"labels must be (B,), got {tuple(labels.shape)}")
    n = logits.shape[1]
    if labels.numel() and (labels.min() < 0 or labels.max() >= n):
        raise InputError(f"labels must lie in [0, {n}), got range [{labels.min()}, {labels.max()}]")


def semantic_classification_loss(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean cross-entropy of softmax(logits) against integer class labels."""
    _check_labels(logits, labels)
    return F.cross_entropy(logits, labels.long())


def residual_confusion_loss(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Cross-entropy on the (gradient-reversed) residual branch.

    Same forward formula as the semantic term; feed it logits computed from
    grad_reverse()d residual codes so the encoder is pushed toward confusion.
    """
    return semantic_classification_loss(logits, labels)


def shuffle_residuals(batch_size: int, rng: np.random.Generator) -> np.ndarray:
    """Draw a fixed-point-free permutation of {0..batch_size-1}.

    Rejection-samples uniform permutations until none maps an index to itself,
    so every sample is guaranteed to receive a foreign residual code.
    """
    if batch_size < 2:
        raise ProtocolError(
            "residual shuffling needs a batch of at least two samples; "
            "the consistency loss has no effect otherwise"
        )
    while True:
        perm = rng.permutation(batch_size)
        if not np.any(perm == np.arange(batch_size)):
            return perm


def consistency_loss(z_semantic: torch.Tensor, z_semantic_reencoded: torch.Tensor) -> torch.Tensor:
    """Mean negative cosine similarity between original and re-encoded codes."""
    _check_same_shape(z_semantic, z_semantic_reencoded, "latent code")
    dot = (z_semantic * z_semantic_reencoded).sum(dim=1)
    denom = (z_semantic.norm(dim=1) * z_semantic_reencoded.norm(dim=1)).clamp_min(COSINE_EPS)
    return -(dot / denom).mean()


def generator_objective(terms, weights: LossWeights):
    """Weighted sum updating the encoders, decoder, and classifier.

    `terms` is anything exposing rec/adv/cls_s/cls_r/con attributes, either
    tensors during training or plain floats from a LossBreakdown.
    """
    return (
        weights.lambda1 * terms.rec
        + weights.lambda2 * terms.adv
        + weights.lambda3 * terms.cls_s
        + weights.lambda4 * terms.cls_r
        + weights.lambda5 * terms.con
    )


def discriminator_objective(terms, weights: LossWeights):
    """Weighted sum updating the discriminator.

    The reconstruction term is included as part of the reported value but does
    not depend on discriminator parameters, so only the BCE term contributes
    gradient.
    """
    return weights.lambda1 * terms.rec + weights.lambda6 * terms.bce
