"""Network definitions: dual encoders, decoder, discriminator, latent classifier.

All five networks follow a DCGAN-style layout. Encoders halve the spatial
resolution with stride-2 convolutions until a 2x2 map remains and then project
to the latent width with a 2x2 convolution; the decoder mirrors this with
transposed convolutions and a tanh output; the discriminator shares the encoder
stack and adds a sigmoid realness head while exposing its last-stage feature
map for feature matching. A gradient-reversal function makes the classifier's
objective adversarial for the residual branch.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterator, Optional

import torch
from torch import nn

from .errors import ConfigurationError, InputError

SUPPORTED_IMAGE_SIZES = (32, 64, 128, 256)


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyper-parameters shared by all five networks."""

    image_size: int = 32
    channels: int = 1
    latent_dim: int = 100
    num_classes: int = 9
    hidden_units: int = 30
    base_filters: int = 64

    def __post_init__(self):
        if self.image_size not in SUPPORTED_IMAGE_SIZES:
            raise ConfigurationError(
                f"image_size must be one of {SUPPORTED_IMAGE_SIZES}, got {self.image_size}"
            )
        if self.channels not in (1, 3):
            raise ConfigurationError(f"channels must be 1 or 3, got {self.channels}")
        if self.latent_dim < 1:
            raise ConfigurationError(f"latent_dim must be >= 1, got {self.latent_dim}")
        if self.num_classes < 2:
            raise ConfigurationError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.hidden_units < 1:
            raise ConfigurationError(f"hidden_units must be >= 1, got {self.hidden_units}")
        if self.base_filters < 1:
            raise ConfigurationError(f"base_filters must be >= 1, got {self.base_filters}")

    @property
    def num_stages(self) -> int:
        """Stride-2 stages needed to reach a 2x2 map."""
        return int(math.log2(self.image_size)) - 1

    @property
    def top_filters(self) -> int:
        """Channel count of the deepest convolutional stage (doubling, capped at 8x)."""
        return _stage_widths(self.base_filters, self.num_stages)[-1]

    @property
    def feature_dim(self) -> int:
        """Width of the flattened discriminator feature vector."""
        return self.top_filters * 2 * 2


def _stage_widths(base_filters: int, stages: int) -> list[int]:
    # widths double per stage up to the usual 8x cap, so deep stacks for large
    # images stay within sane parameter budgets
    return [base_filters * min(2**i, 8) for i in range(stages)]


@dataclass(frozen=True)
class Wiring:
    """Which networks exist and how the latent space is produced.

    The defaults describe the full model: two independent encoders feeding a
    shared decoder, with both a classifier and a discriminator attached.
    Architecture ablations toggle these flags (see training.apply_ablation).
    """

    dual_encoders: bool = True
    # single-encoder mode only: split the 2d output into semantic/residual halves
    split_single_latent: bool = True
    residual: bool = True
    classifier: bool = True
    discriminator: bool = True

    def classifier_input_dim(self, latent_dim: int) -> int:
        if self.dual_encoders or self.split_single_latent:
            return latent_dim
        return 2 * latent_dim


class ConvEncoder(nn.Module):
    """Stride-2 convolution pyramid ending in a latent projection."""

    def __init__(self, image_size: int, in_channels: int, out_dim: int, base_filters: int):
        super().__init__()
        stages = int(math.log2(image_size)) - 1
        layers = []
        width = in_channels
        for out_width in _stage_widths(base_filters, stages):
            layers += [
                nn.Conv2d(width, out_width, 4, stride=2, padding=1),
                nn.LeakyReLU(0.2, inplace=True),
                nn.BatchNorm2d(out_width),
            ]
            width = out_width
        self.features = nn.Sequential(*layers)
        # 2x2 map -> 1x1 latent; no normalization on the projection
        self.project = nn.Conv2d(width, out_dim, 2, stride=1, padding=0)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.project(self.features(x)).flatten(1)


class ConvDecoder(nn.Module):
    """Transposed-convolution mirror of the encoder with a tanh output."""

    def __init__(self, image_size: int, out_channels: int, in_dim: int, base_filters: int):
        super().__init__()
        stages = int(math.log2(image_size)) - 1
        widths = _stage_widths(base_filters, stages)[::-1]  # mirror the encoder
        width = widths[0]
        layers = [
            nn.ConvTranspose2d(in_dim, width, 2, stride=1, padding=0),
            nn.ReLU(inplace=True),
            nn.BatchNorm2d(width),
        ]
        for out_width in widths[1:]:
            layers += [
                nn.ConvTranspose2d(width, out_width, 4, stride=2, padding=1),
                nn.ReLU(inplace=True),
                nn.BatchNorm2d(out_width),
            ]
            width = out_width
        layers += [
            nn.ConvTranspose2d(width, out_channels, 4, stride=2, padding=1),
            nn.Tanh(),
        ]
        self.net = nn.Sequential(*layers)
        self.in_dim = in_dim

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        return self.net(z.view(z.shape[0], self.in_dim, 1, 1))


class Discriminator(nn.Module):
    """Encoder-shaped stack with a scalar realness head.

    forward() returns (realness in [0,1], flattened last-stage features); the
    feature vector is what the feature-matching loss compares. No batch norm on
    the first layer, standard GAN stabilization.
    """

    def __init__(self, image_size: int, in_channels: int, base_filters: int):
        super().__init__()
        stages = int(math.log2(image_size)) - 1
        widths = _stage_widths(base_filters, stages)
        layers = [
            nn.Conv2d(in_channels, widths[0], 4, stride=2, padding=1),
            nn.LeakyReLU(0.2, inplace=True),
        ]
        width = widths[0]
        for out_width in widths[1:]:
            layers += [
                nn.Conv2d(width, out_width, 4, stride=2, padding=1),
                nn.LeakyReLU(0.2, inplace=True),
                nn.BatchNorm2d(out_width),
            ]
            width = out_width
        self.features = nn.Sequential(*layers)
        self.head = nn.Conv2d(width, 1, 2, stride=1, padding=0)
        self.feature_dim = width * 2 * 2

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        f = self.features(x)
        realness = torch.sigmoid(self.head(f)).flatten(1).squeeze(1)
        return realness, f.flatten(1)


class LatentClassifier(nn.Module):
    """Two-layer perceptron over a latent code, emitting raw logits."""

    def __init__(self, in_dim: int, hidden_units: int, num_classes: int):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(in_dim, hidden_units),
            nn.ReLU(inplace=True),
            nn.Linear(hidden_units, num_classes),
        )
        self.in_dim = in_dim

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        return self.net(z)


class _ReverseGradient(torch.autograd.Function):
    @staticmethod
    def forward(ctx, codes, weight):
        ctx.weight = weight
        return codes.view_as(codes)

    @staticmethod
    def backward(ctx, grad_output):
        return grad_output.neg() * ctx.weight, None


def grad_reverse(codes: torch.Tensor, lambda_r: float) -> torch.Tensor:
    """Identity in the forward pass; scales gradients by -lambda_r on the way back."""
    if lambda_r < 0:
        raise InputError(f"lambda_r must be >= 0, got {lambda_r}")
    return _ReverseGradient.apply(codes, float(lambda_r))


@dataclass
class ModelBundle:
    """The parameterized networks plus the wiring that connects them.

    semantic_encoder doubles as the single shared encoder in the single-encoder
    ablations (residual_encoder is then None).
    """

    semantic_encoder: nn.Module
    residual_encoder: Optional[nn.Module]
    decoder: nn.Module
    discriminator: Optional[Discriminator]
    classifier: Optional[LatentClassifier]
    config: ModelConfig
    wiring: Wiring = field(default_factory=Wiring)

    def networks(self) -> list[tuple[str, nn.Module]]:
        named = [("semantic_encoder", self.semantic_encoder)]
        if self.residual_encoder is not None:
            named.append(("residual_encoder", self.residual_encoder))
        named.append(("decoder", self.decoder))
        if self.discriminator is not None:
            named.append(("discriminator", self.discriminator))
        if self.classifier is not None:
            named.append(("classifier", self.classifier))
        return named

    def generator_modules(self) -> list[nn.Module]:
        mods = [self.semantic_encoder, self.decoder]
        if self.residual_encoder is not None:
            mods.insert(1, self.residual_encoder)
        if self.classifier is not None:
            mods.append(self.classifier)
        return mods

    def generator_parameters(self) -> Iterator[nn.Parameter]:
        for mod in self.generator_modules():
            yield from mod.parameters()

    def train_mode(self) -> "ModelBundle":
        for _, net in self.networks():
            net.train()
        return self

    def eval_mode(self) -> "ModelBundle":
        for _, net in self.networks():
            net.eval()
        return self

    def to_dtype(self, dtype: torch.dtype) -> "ModelBundle":
        for _, net in self.networks():
            net.to(dtype)
        return self


def _init_dcgan_weights(net: nn.Module, gen: torch.Generator) -> None:
    # draw order is fixed by module registration order, so a shared generator
    # yields reproducible yet distinct parameters per network
    for m in net.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
            with torch.no_grad():
                m.weight.copy_(torch.randn(m.weight.shape, generator=gen) * 0.02)
                if m.bias is not None:
                    m.bias.zero_()
        elif isinstance(m, nn.BatchNorm2d):
            with torch.no_grad():
                m.weight.copy_(1.0 + torch.randn(m.weight.shape, generator=gen) * 0.02)
                m.bias.zero_()


def build_networks(config: ModelConfig, seed: int, wiring: Wiring = Wiring()) -> ModelBundle:
    """Construct and reproducibly initialize all networks for the given wiring."""
    d = config.latent_dim
    gen = torch.Generator().manual_seed(int(seed))

    if wiring.dual_encoders:
        semantic = ConvEncoder(config.image_size, config.channels, d, config.base_filters)
        residual = ConvEncoder(config.image_size, config.channels, d, config.base_filters)
    else:
        semantic = ConvEncoder(config.image_size, config.channels, 2 * d, config.base_filters)
        residual = None

    decoder = ConvDecoder(config.image_size, config.channels, 2 * d, config.base_filters)
    discriminator = (
        Discriminator(config.image_size, config.channels, config.base_filters)
        if wiring.discriminator
        else None
    )
    classifier = (
        LatentClassifier(wiring.classifier_input_dim(d), config.hidden_units, config.num_classes)
        if wiring.classifier
        else None
    )

    for net in (semantic, residual, decoder, discriminator, classifier):
        if net is not None:
            _init_dcgan_weights(net, gen)

    return ModelBundle(semantic, residual, decoder, discriminator, classifier, config, wiring)


def _check_images(config: ModelConfig, x: torch.Tensor) -> None:
    expected = (config.channels, config.image_size, config.image_size)
    if x.ndim != 4 or tuple(x.shape[1:]) != expected:
        raise InputError(f"expected image batch of shape (B, {expected[0]}, {expected[1]}, {expected[2]}), got {tuple(x.shape)}")


def _check_codes(codes: torch.Tensor, width: int, name: str) -> None:
    if codes.ndim != 2 or codes.shape[1] != width:
        raise InputError(f"{name} must have shape (B, {width}), got {tuple(codes.shape)}")


def encode_semantic(bundle: ModelBundle, x: torch.Tensor) -> torch.Tensor:
    """Map images to their semantic latent codes."""
    _check_images(bundle.config, x)
    z = bundle.semantic_encoder(x)
    if not bundle.wiring.dual_encoders and bundle.wiring.split_single_latent:
        return z[:, : bundle.config.latent_dim]
    return z


def encode_residual(bundle: ModelBundle, x: torch.Tensor) -> torch.Tensor:
    """Map images to their residual latent codes."""
    if not bundle.wiring.residual:
        raise ConfigurationError("this wiring has no residual latent code")
    _check_images(bundle.config, x)
    if bundle.wiring.dual_encoders:
        return bundle.residual_encoder(x)
    return bundle.semantic_encoder(x)[:, bundle.config.latent_dim :]


def encode_pair(bundle: ModelBundle, x: torch.Tensor) -> tuple[torch.Tensor, Optional[torch.Tensor]]:
    """Single forward pass producing (semantic, residual) codes; residual is None
    when the wiring has no residual branch."""
    _check_images(bundle.config, x)
    d = bundle.config.latent_dim
    if bundle.wiring.dual_encoders:
        return bundle.semantic_encoder(x), bundle.residual_encoder(x)
    z = bundle.semantic_encoder(x)
    if bundle.wiring.split_single_latent:
        return z[:, :d], z[:, d:]
    return z, None


def decode(bundle: ModelBundle, z_semantic: torch.Tensor, z_residual: Optional[torch.Tensor]) -> torch.Tensor:
    """Reconstruct images from latent codes.

    Pass the residual code of a different sample to produce hybrid
    reconstructions. For wirings without a residual branch, z_semantic already
    carries the full latent and z_residual must be None.
    """
    d = bundle.config.latent_dim
    if bundle.wiring.residual:
        if z_residual is None:
            raise InputError("this wiring requires a residual code for decoding")
        _check_codes(z_semantic, d, "semantic codes")
        _check_codes(z_residual, d, "residual codes")
        z = torch.cat([z_semantic, z_residual], dim=1)
    else:
        if z_residual is not None:
            raise InputError("this wiring has no residual code; pass None")
        _check_codes(z_semantic, 2 * d, "latent codes")
        z = z_semantic
    return bundle.decoder(z)


def discriminate(bundle: ModelBundle, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Return (realness probabilities, flattened feature activations)."""
    if bundle.discriminator is None:
        raise ConfigurationError("this wiring has no discriminator")
    _check_images(bundle.config, x)
    return bundle.discriminator(x)


def classify(bundle: ModelBundle, codes: torch.Tensor) -> torch.Tensor:
    """Class logits for a batch of latent codes."""
    if bundle.classifier is None:
        raise ConfigurationError("this wiring has no classifier")
    _check_codes(codes, bundle.classifier.in_dim, "classifier input")
    return bundle.classifier(codes)
