"""Y-GAN: dual-latent adversarial auto-encoder for one-class anomaly detection."""

__version__ = "0.1.0"

from .data import AugmentPolicy, DatasetSpec, LabeledImages, SplitSpec
from .losses import LossBreakdown, LossWeights
from .model import ModelBundle, ModelConfig, Wiring, build_networks
from .scoring import ScoreMethod
from .training import Checkpoint, TrainConfig, apply_ablation, train

__all__ = [
    "AugmentPolicy",
    "Checkpoint",
    "DatasetSpec",
    "LabeledImages",
    "LossBreakdown",
    "LossWeights",
    "ModelBundle",
    "ModelConfig",
    "ScoreMethod",
    "SplitSpec",
    "TrainConfig",
    "Wiring",
    "apply_ablation",
    "build_networks",
    "train",
    "__version__",
]
