"""Alternating adversarial training with the reversal-weight warm-up schedule,
ablation variants, deterministic checkpointing, and resumable runs.

Each step runs one forward pass, computes all active loss terms (including the
residual-shuffle consistency pass), updates the generator networks on the
combined objective, and then updates the discriminator on the pre-update
reconstructions through the retained graph.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np
import torch

from . import model as m
from .data import LabeledImages, batch_indices
from .errors import CheckpointError, ConfigurationError, NumericalError, ProtocolError
from .losses import (
    LOSS_NAMES,
    LossBreakdown,
    LossWeights,
    adversarial_loss,
    consistency_loss,
    discriminator_bce,
    discriminator_objective,
    generator_objective,
    reconstruction_loss,
    residual_confusion_loss,
    semantic_classification_loss,
    shuffle_residuals,
)

ABLATION_VARIANTS = ("full", "A1", "A2", "A3", "B1", "B2", "B3", "B4")

CHECKPOINT_MAGIC = b"YGANCKPT"
CHECKPOINT_VERSION = 1

LOG_COLUMNS = ("step", "epoch", "rec", "adv", "bce", "cls_s", "cls_r", "con",
               "total_G", "total_D", "lambda_R")


@dataclass(frozen=True)
class AblationPlan:
    """Effective architecture, active loss set, and score choice for a variant."""

    variant: str
    wiring: m.Wiring
    active_losses: frozenset[str]
    score_method: str


def apply_ablation(variant: str) -> AblationPlan:
    """Resolve an ablation name into wiring flags, active losses, and scoring."""
    all_losses = frozenset(LOSS_NAMES)
    full_wiring = m.Wiring()
    table = {
        "full": (full_wiring, all_losses, "s"),
        "A1": (full_wiring, all_losses - {"con"}, "s"),
        "A2": (full_wiring, all_losses - {"cls_r"}, "s"),
        "A3": (full_wiring, all_losses - {"cls_r", "con"}, "s"),
        "B1": (m.Wiring(dual_encoders=False, split_single_latent=True), all_losses, "s"),
        "B2": (
            m.Wiring(dual_encoders=False, split_single_latent=False, residual=False),
            frozenset({"rec", "adv", "bce", "cls_s"}),
            "s",
        ),
        "B3": (
            m.Wiring(dual_encoders=False, split_single_latent=False, residual=False,
                     classifier=False),
            frozenset({"rec", "adv", "bce"}),
            "s_x",
        ),
        "B4": (m.Wiring(discriminator=False), all_losses - {"adv", "bce"}, "s"),
    }
    if variant not in table:
        raise ConfigurationError(f"unknown ablation variant {variant!r}; choose from {ABLATION_VARIANTS}")
    wiring, losses, score = table[variant]
    return AblationPlan(variant=variant, wiring=wiring, active_losses=losses, score_method=score)


@dataclass(frozen=True)
class TrainConfig:
    """Optimization hyper-parameters."""

    epochs: int = 100
    batch_size: int = 64
    learning_rate: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    weights: LossWeights = field(default_factory=LossWeights)
    lambda_R_gamma: float = 10.0
    seed: int = 0
    ablation: str = "full"

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigurationError(f"epochs must be >= 1, got {self.epochs}")
        plan = apply_ablation(self.ablation)  # also validates the variant name
        if self.batch_size < 2 and "con" in plan.active_losses:
            raise ConfigurationError(
                "batch_size must be >= 2 while the consistency loss is active"
            )
        if self.batch_size < 1:
            raise ConfigurationError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.learning_rate <= 0:
            raise ConfigurationError(f"learning_rate must be > 0, got {self.learning_rate}")


def lambda_R_schedule(progress: float, gamma: float = 10.0) -> float:
    """Warm-up for the reversal weight: 0 at the start, saturating toward 1."""
    if not 0.0 <= progress <= 1.0:
        raise ConfigurationError(f"progress must be in [0, 1], got {progress}")
    return 2.0 / (1.0 + math.exp(-gamma * progress)) - 1.0


@dataclass
class TrainState:
    """Everything a training step mutates: networks, optimizers, shuffle rng."""

    bundle: m.ModelBundle
    opt_g: torch.optim.Adam
    opt_d: Optional[torch.optim.Adam]
    rng: np.random.Generator
    plan: AblationPlan
    weights: LossWeights


def init_train_state(bundle: m.ModelBundle, config: TrainConfig) -> TrainState:
    plan = apply_ablation(config.ablation)
    betas = (config.beta1, config.beta2)
    opt_g = torch.optim.Adam(list(bundle.generator_parameters()), lr=config.learning_rate, betas=betas)
    opt_d = (
        torch.optim.Adam(bundle.discriminator.parameters(), lr=config.learning_rate, betas=betas)
        if bundle.discriminator is not None
        else None
    )
    return TrainState(
        bundle=bundle,
        opt_g=opt_g,
        opt_d=opt_d,
        rng=np.random.default_rng(config.seed),
        plan=plan,
        weights=config.weights,
    )


@dataclass
class _Terms:
    """Tensor-valued loss terms; zeros stand in for inactive losses."""

    rec: torch.Tensor
    adv: torch.Tensor
    bce: torch.Tensor
    cls_s: torch.Tensor
    cls_r: torch.Tensor
    con: torch.Tensor


def compute_losses(
    bundle: m.ModelBundle,
    x: torch.Tensor,
    labels: Optional[torch.Tensor],
    lambda_r: float,
    active: frozenset[str],
    shuffle_perm: Optional[np.ndarray],
) -> _Terms:
    """One differentiable forward pass producing every active loss term.

    Pure in its inputs apart from batch-norm running-statistic updates (which
    do not influence train-mode outputs), so it is reusable for
    finite-difference checks. `shuffle_perm` fixes the residual derangement.
    """
    zero = x.new_zeros(())
    z_s, z_r = m.encode_pair(bundle, x)
    x_hat = m.decode(bundle, z_s, z_r)
    rec = reconstruction_loss(x, x_hat) if "rec" in active else zero

    adv = bce = zero
    if bundle.discriminator is not None:
        p_real, f_real = m.discriminate(bundle, x)
        _, f_fake = m.discriminate(bundle, x_hat)
        if "adv" in active:
            adv = adversarial_loss(f_real, f_fake)
        if "bce" in active:
            # detached pass over the same pre-update reconstructions: the BCE
            # graph must not reach generator parameters, which the generator
            # step mutates before the discriminator backward runs
            p_fake, _ = m.discriminate(bundle, x_hat.detach())
            bce = discriminator_bce(p_real, p_fake)

    cls_s = cls_r = zero
    if "cls_s" in active:
        cls_s = semantic_classification_loss(m.classify(bundle, z_s), labels)
    if "cls_r" in active:
        logits_r = m.classify(bundle, m.grad_reverse(z_r, lambda_r))
        cls_r = residual_confusion_loss(logits_r, labels)

    con = zero
    if "con" in active:
        if shuffle_perm is None:
            raise ProtocolError("consistency loss requires a residual shuffle permutation")
        perm = torch.as_tensor(np.asarray(shuffle_perm), dtype=torch.long)
        x_hybrid = m.decode(bundle, z_s, z_r[perm])
        z_s_re = m.encode_semantic(bundle, x_hybrid)
        # the first-pass codes are the reference of the angular penalty: the
        # cosine target is detached (otherwise a constant z_s is a degenerate
        # optimum that freezes classification), while gradient still reaches
        # the first encoding pass through the hybrid decode input
        con = consistency_loss(z_s.detach(), z_s_re)

    return _Terms(rec=rec, adv=adv, bce=bce, cls_s=cls_s, cls_r=cls_r, con=con)


def _check_finite(terms: _Terms) -> None:
    for name in LOSS_NAMES:
        value = getattr(terms, name)
        if not torch.isfinite(value).all():
            raise NumericalError(f"loss term {name!r} became non-finite; aborting")


def train_step(
    state: TrainState,
    images: torch.Tensor,
    labels: Optional[torch.Tensor],
    lambda_r: float,
) -> LossBreakdown:
    """One alternating update: generator networks first, then the discriminator."""
    bundle = state.bundle
    bundle.train_mode()
    active = state.plan.active_losses

    perm = None
    if "con" in active:
        perm = shuffle_residuals(len(images), state.rng)

    terms = compute_losses(bundle, images, labels, lambda_r, active, perm)
    _check_finite(terms)

    has_disc = state.opt_d is not None
    total_g = generator_objective(terms, state.weights)
    state.opt_g.zero_grad()
    if has_disc:
        state.opt_d.zero_grad()
    total_g.backward(retain_graph=has_disc)
    state.opt_g.step()

    if has_disc:
        # the reconstruction term carries no discriminator gradient; detaching it
        # keeps the backward pass off the just-updated generator parameters
        d_terms = dataclasses.replace(terms, rec=terms.rec.detach())
        total_d = discriminator_objective(d_terms, state.weights)
        state.opt_d.zero_grad()  # discard gradients accumulated by the generator pass
        total_d.backward()
        state.opt_d.step()

    scalars = {name: float(getattr(terms, name).detach()) for name in LOSS_NAMES}
    values = LossBreakdown(**scalars, total_G=0.0, total_D=0.0)
    values.total_G = float(generator_objective(values, state.weights))
    values.total_D = float(discriminator_objective(values, state.weights)) if has_disc else float("nan")
    return values


# ---------------------------------------------------------------------------
# checkpoint container

@dataclass
class Checkpoint:
    bundle: m.ModelBundle
    opt_g_state: dict
    opt_d_state: Optional[dict]
    epoch: int
    global_step: int
    train_config: TrainConfig
    model_config: m.ModelConfig
    rng_state: dict


def checkpoint_from_state(state: TrainState, epoch: int, global_step: int,
                          model_config: m.ModelConfig, train_config: TrainConfig) -> Checkpoint:
    # only the per-parameter moment state is kept; hyper-parameters are
    # reconstructed from train_config on load
    return Checkpoint(
        bundle=state.bundle,
        opt_g_state={"state": state.opt_g.state_dict()["state"]},
        opt_d_state={"state": state.opt_d.state_dict()["state"]} if state.opt_d is not None else None,
        epoch=epoch,
        global_step=global_step,
        train_config=train_config,
        model_config=model_config,
        rng_state=state.rng.bit_generator.state,
    )


def _config_to_dict(config) -> dict:
    out = {}
    for key, value in config.__dict__.items():
        out[key] = value.__dict__.copy() if isinstance(value, LossWeights) else value
    return out


def _model_config_from_dict(doc: dict) -> m.ModelConfig:
    return m.ModelConfig(**doc)


def _train_config_from_dict(doc: dict) -> TrainConfig:
    doc = dict(doc)
    doc["weights"] = LossWeights(**doc["weights"])
    return TrainConfig(**doc)


def _collect_arrays(ckpt: Checkpoint) -> list[tuple[str, np.ndarray]]:
    arrays: list[tuple[str, np.ndarray]] = []
    for net_name, net in ckpt.bundle.networks():
        for key, tensor in net.state_dict().items():
            arrays.append((f"net.{net_name}.{key}", tensor.detach().numpy()))
    for opt_name, opt_state in (("opt_g", ckpt.opt_g_state), ("opt_d", ckpt.opt_d_state)):
        if opt_state is None:
            continue
        for idx, entry in opt_state["state"].items():
            for key, value in entry.items():
                arr = value.detach().numpy() if torch.is_tensor(value) else np.asarray(value)
                arrays.append((f"{opt_name}.{idx}.{key}", arr))
    return arrays


def save_checkpoint(ckpt: Checkpoint, path: Union[str, Path]) -> None:
    """Write the container: magic, version, JSON header, then raw named arrays."""
    arrays = _collect_arrays(ckpt)
    header = {
        "epoch": ckpt.epoch,
        "global_step": ckpt.global_step,
        "model_config": _config_to_dict(ckpt.model_config),
        "train_config": _config_to_dict(ckpt.train_config),
        "rng_state": ckpt.rng_state,
        "has_opt_d": ckpt.opt_d_state is not None,
        "arrays": [
            {"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape)}
            for name, arr in arrays
        ],
    }
    header_bytes = json.dumps(header).encode("utf-8")
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    buf.write(struct.pack("<Q", len(header_bytes)))
    buf.write(header_bytes)
    for _, arr in arrays:
        buf.write(np.ascontiguousarray(arr).tobytes())
    Path(path).write_bytes(buf.getvalue())


def _rebuild_optimizer_state(prefix: str, arrays: dict[str, np.ndarray]) -> dict:
    state: dict[int, dict] = {}
    for name, arr in arrays.items():
        if not name.startswith(prefix + "."):
            continue
        _, idx, key = name.split(".", 2)
        state.setdefault(int(idx), {})[key] = torch.from_numpy(arr)
    return {"state": state}


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    """Read a container written by save_checkpoint; fails loudly on corruption."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    if len(raw) < len(CHECKPOINT_MAGIC) + 12:
        raise CheckpointError(f"{path}: file too short to be a checkpoint")
    if raw[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic header (not a checkpoint file)")
    offset = len(CHECKPOINT_MAGIC)
    (version,) = struct.unpack_from("<I", raw, offset)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    offset += 4
    (header_len,) = struct.unpack_from("<Q", raw, offset)
    offset += 8
    try:
        header = json.loads(raw[offset : offset + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: corrupt header: {e}") from e
    offset += header_len

    arrays: dict[str, np.ndarray] = {}
    for spec in header["arrays"]:
        dtype = np.dtype(spec["dtype"])
        count = int(np.prod(spec["shape"])) if spec["shape"] else 1
        nbytes = count * dtype.itemsize
        if offset + nbytes > len(raw):
            raise CheckpointError(f"{path}: truncated array payload for {spec['name']}")
        arrays[spec["name"]] = np.frombuffer(
            raw, dtype=dtype, count=count, offset=offset
        ).reshape(spec["shape"]).copy()
        offset += nbytes

    model_config = _model_config_from_dict(header["model_config"])
    train_config = _train_config_from_dict(header["train_config"])
    plan = apply_ablation(train_config.ablation)
    bundle = m.build_networks(model_config, seed=0, wiring=plan.wiring)
    for net_name, net in bundle.networks():
        prefix = f"net.{net_name}."
        state_dict = {
            name[len(prefix):]: torch.from_numpy(arr)
            for name, arr in arrays.items() if name.startswith(prefix)
        }
        try:
            net.load_state_dict(state_dict)
        except RuntimeError as e:
            raise CheckpointError(f"{path}: parameter mismatch for {net_name}: {e}") from e

    opt_g_state = _rebuild_optimizer_state("opt_g", arrays)
    opt_d_state = _rebuild_optimizer_state("opt_d", arrays) if header["has_opt_d"] else None
    return Checkpoint(
        bundle=bundle,
        opt_g_state=opt_g_state,
        opt_d_state=opt_d_state,
        epoch=header["epoch"],
        global_step=header["global_step"],
        train_config=train_config,
        model_config=model_config,
        rng_state=header["rng_state"],
    )


def state_from_checkpoint(ckpt: Checkpoint) -> TrainState:
    """Rebuild a live TrainState (optimizers bound, rng restored) from a checkpoint."""
    state = init_train_state(ckpt.bundle, ckpt.train_config)
    sd = state.opt_g.state_dict()
    sd["state"] = ckpt.opt_g_state["state"]
    state.opt_g.load_state_dict(sd)
    if state.opt_d is not None and ckpt.opt_d_state is not None:
        sd = state.opt_d.state_dict()
        sd["state"] = ckpt.opt_d_state["state"]
        state.opt_d.load_state_dict(sd)
    rng = np.random.default_rng()
    rng.bit_generator.state = ckpt.rng_state
    state.rng = rng
    return state


# ---------------------------------------------------------------------------
# full training loop

class _LossLogWriter:
    def __init__(self, path: Optional[Path]):
        self.path = path
        self._file = None
        if path is not None:
            self._file = open(path, "w", newline="")
            self._writer = csv.writer(self._file)
            self._writer.writerow(LOG_COLUMNS)

    def write(self, step: int, epoch: int, values: LossBreakdown, lambda_r: float) -> None:
        if self._file is None:
            return
        self._writer.writerow([
            step, epoch,
            *(f"{getattr(values, k):.10g}" for k in ("rec", "adv", "bce", "cls_s", "cls_r", "con",
                                                     "total_G", "total_D")),
            f"{lambda_r:.10g}",
        ])
        self._file.flush()

    def close(self) -> None:
        if self._file is not None:
            self._file.close()


def train(
    model_config: m.ModelConfig,
    train_config: TrainConfig,
    train_data: LabeledImages,
    out_dir: Optional[Union[str, Path]] = None,
    val_data: Optional[LabeledImages] = None,
    resume: Optional[Checkpoint] = None,
    keep_all_epochs: bool = False,
) -> Checkpoint:
    """Run the multi-step optimization for the configured number of epochs.

    Writes a rolling checkpoint and the loss-curve CSV into out_dir when given
    (per-epoch stamped copies with keep_all_epochs); with a validation split
    (anomaly-labeled), the best-AUC checkpoint is kept as checkpoint_best.bin,
    otherwise the last checkpoint stands.
    """
    if len(train_data) == 0:
        raise ProtocolError("training dataset is empty")
    plan = apply_ablation(train_config.ablation)
    n_labels = train_data.num_classes
    if plan.wiring.classifier and n_labels != model_config.num_classes:
        raise ConfigurationError(
            f"dataset has {n_labels} classes but the model is configured for {model_config.num_classes}"
        )
    if len(train_data) < train_config.batch_size:
        raise ProtocolError(
            f"dataset of {len(train_data)} samples is smaller than one batch ({train_config.batch_size})"
        )

    if resume is not None:
        if resume.model_config != model_config:
            raise CheckpointError(
                f"checkpoint was trained with {resume.model_config}, incompatible with {model_config}"
            )
        if resume.train_config != train_config:
            raise CheckpointError("checkpoint train_config differs from the requested one")
        state = state_from_checkpoint(resume)
        start_epoch = resume.epoch
        global_step = resume.global_step
    else:
        bundle = m.build_networks(model_config, train_config.seed, plan.wiring)
        state = init_train_state(bundle, train_config)
        start_epoch = 0
        global_step = 0

    images = torch.from_numpy(np.ascontiguousarray(train_data.images))
    labels = torch.from_numpy(np.ascontiguousarray(train_data.labels))
    steps_per_epoch = len(train_data) // train_config.batch_size
    total_steps = train_config.epochs * steps_per_epoch

    out_path = Path(out_dir) if out_dir is not None else None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)
    log = _LossLogWriter(out_path / "loss_log.csv" if out_path is not None else None)

    best_auc = -1.0
    ckpt = checkpoint_from_state(state, start_epoch, global_step, model_config, train_config)
    try:
        for epoch in range(start_epoch + 1, train_config.epochs + 1):
            for batch in batch_indices(len(train_data), train_config.batch_size,
                                       train_config.seed, epoch - 1, drop_last=True):
                lambda_r = lambda_R_schedule(global_step / total_steps, train_config.lambda_R_gamma)
                idx = torch.from_numpy(batch)
                values = train_step(state, images[idx], labels[idx], lambda_r)
                log.write(global_step, epoch, values, lambda_r)
                global_step += 1

            ckpt = checkpoint_from_state(state, epoch, global_step, model_config, train_config)
            if out_path is not None:
                save_checkpoint(ckpt, out_path / "checkpoint.bin")
                if keep_all_epochs:
                    save_checkpoint(ckpt, out_path / f"checkpoint_epoch{epoch:04d}.bin")
            if val_data is not None:
                from . import evaluation, scoring  # local import to avoid a cycle

                method = evaluation.resolve_score_method(plan.score_method, state.bundle, train_data)
                report = scoring.score_dataset(state.bundle, val_data, method)
                val_auc = evaluation.auc(report.scores, report.labels)
                if val_auc > best_auc:
                    best_auc = val_auc
                    if out_path is not None:
                        save_checkpoint(ckpt, out_path / "checkpoint_best.bin")
    finally:
        log.close()
    return ckpt
