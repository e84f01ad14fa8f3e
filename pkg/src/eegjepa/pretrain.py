"""Masked latent pre-training with an exponential-moving-average teacher.

One training step: tokenise every channel with the shared local encoder, add
position markers, run the contextual encoder on the *visible* tokens only,
then let the predictor reconstruct the teacher's latents at the masked
positions from a shared mask token plus each slot's position marker.  The
teacher is a momentum copy of the student's contextual encoder, sees the full
marked token sequence, and never receives gradients; the loss is the mean L1
distance over masked tokens.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .data import Example
from .errors import ConfigError, NonFiniteLossError, ShapeError, StateError
from .montage import MaskSpec, Montage, sample_mask, token_position
from .nets import (
    Backbone,
    Checkpoint,
    ContextualEncoder,
    ModelConfig,
    Predictor,
    encode_channels,
    load_module_tensors,
    module_tensors,
    save_checkpoint,
    token_count,
)
from .seeding import derive_seed


@dataclass(frozen=True)
class PretrainConfig:
    """Pre-training hyper-parameters."""

    example_length_s: float = 16.1875
    slice_interval_s: float = 16.9
    mask_diameter_fraction: float = 0.6
    ema_momentum: float = 0.996
    learning_rate: float = 1e-4
    batch_size: int = 64
    patience: int = 10
    max_epochs: int = 500
    seed: int = 0
    normalize_targets: bool = False
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if not 0.0 <= self.ema_momentum <= 1.0:
            raise ConfigError(f"EMA momentum must be in [0, 1], got {self.ema_momentum}")
        if self.learning_rate <= 0 or self.batch_size < 1:
            raise ConfigError("learning rate and batch size must be positive")
        if self.patience < 1 or self.max_epochs < 1:
            raise ConfigError("patience and max epochs must be >= 1")

    def to_dict(self) -> dict:
        return {
            "example_length_s": self.example_length_s,
            "slice_interval_s": self.slice_interval_s,
            "mask_diameter_fraction": self.mask_diameter_fraction,
            "ema_momentum": self.ema_momentum,
            "learning_rate": self.learning_rate,
            "batch_size": self.batch_size,
            "patience": self.patience,
            "max_epochs": self.max_epochs,
            "seed": self.seed,
            "normalize_targets": self.normalize_targets,
            "model": self.model.to_dict(),
        }

    @staticmethod
    def from_dict(d: dict) -> "PretrainConfig":
        d = dict(d)
        model = ModelConfig.from_dict(d.pop("model", {}))
        return PretrainConfig(model=model, **d)


class PretrainModel(nn.Module):
    """Student: backbone (local + markers + context) plus predictor."""

    def __init__(self, montage: Montage, config: ModelConfig | None = None):
        super().__init__()
        self.backbone = Backbone(montage, config)
        self.predictor = Predictor(self.backbone.model_config.predictor_config())


def build_models(
    montage: Montage, config: ModelConfig | None = None
) -> tuple[PretrainModel, ContextualEncoder]:
    """Build a student and its teacher (an exact copy of the student context)."""
    model = PretrainModel(montage, config)
    teacher = ContextualEncoder(model.backbone.model_config.context_config())
    teacher.load_state_dict(model.backbone.context.state_dict())
    for p in teacher.parameters():
        p.requires_grad_(False)
    return model, teacher


@torch.no_grad()
def ema_update(teacher: nn.Module, student: nn.Module, momentum: float) -> None:
    """teacher <- momentum * teacher + (1 - momentum) * student, in place.

    Raises:
        StateError: parameter sets or shapes differ.
    """
    t_params = dict(teacher.named_parameters())
    s_params = dict(student.named_parameters())
    if set(t_params) != set(s_params):
        raise StateError("teacher and student parameter names differ")
    for name, p_s in s_params.items():
        p_t = t_params[name]
        if p_t.shape != p_s.shape:
            raise StateError(f"shape mismatch for {name}: {p_t.shape} vs {p_s.shape}")
        p_t.mul_(momentum).add_(p_s.to(p_t.dtype), alpha=1.0 - momentum)


def masked_latent_loss(
    model: PretrainModel,
    teacher: ContextualEncoder,
    samples: torch.Tensor,
    mask: MaskSpec,
    normalize_targets: bool = False,
) -> torch.Tensor:
    """Mean L1 distance between predicted and teacher latents on masked tokens.

    Args:
        model: Student.
        teacher: Momentum encoder; consumes the full marked sequence built
            from the student's local-encoder output (treated as constant).
        samples: (C, T) waveform tensor.
        mask: Spatial block mask matching C and the tokenised length.
        normalize_targets: Layer-normalise teacher latents before the loss.

    Returns:
        Scalar loss with gradients into the student only.
    """
    if samples.ndim != 2:
        raise ShapeError(f"expected (C, T) samples, got {tuple(samples.shape)}")
    C = samples.shape[0]
    tokens = encode_channels(model.backbone.local, samples)  # (C, t, d)
    t = tokens.shape[1]
    if mask.n_channels != C or mask.windows_per_channel != t:
        raise ShapeError(
            f"mask is for {mask.n_channels} channels x {mask.windows_per_channel} "
            f"windows, data gives {C} x {t}"
        )
    marked = model.backbone.markers.mark(tokens)  # (L, d)
    token_mask = torch.from_numpy(mask.token_mask)
    L = marked.shape[0]
    n_masked = int(token_mask.sum())
    visible = marked[~token_mask][None]
    # Visible-only contract: the context encoder never sees a masked slot.
    assert visible.shape[1] == L - n_masked
    context_out = model.backbone.context(visible)

    masked_idx = np.flatnonzero(mask.token_mask)
    positions = [token_position(int(i), t) for i in masked_idx]
    markers = model.backbone.markers.markers_for(positions, t, dtype=marked.dtype)
    queries = (model.predictor.mask_token.to(marked.dtype)[None, :] + markers)[None]
    preds = model.predictor(context_out, queries)[0]  # (M, d)

    with torch.no_grad():
        target_seq = teacher(marked.detach()[None])[0]
        targets = target_seq[token_mask]
        if normalize_targets:
            targets = torch.nn.functional.layer_norm(targets, (targets.shape[-1],))
    assert not targets.requires_grad
    return (preds - targets).abs().mean()


def pretrain_step(
    model: PretrainModel,
    teacher: ContextualEncoder,
    optimizer: torch.optim.Optimizer,
    batch: list[torch.Tensor],
    masks: list[MaskSpec],
    config: PretrainConfig,
    step_index: int,
) -> float:
    """One optimiser step over a batch, followed by the EMA teacher update.

    Raises:
        NonFiniteLossError: the batch loss is NaN or infinite.
    """
    if len(batch) != len(masks) or not batch:
        raise StateError("batch and mask lists must be equal-length and non-empty")
    model.train()
    losses = [
        masked_latent_loss(model, teacher, x, m, config.normalize_targets)
        for x, m in zip(batch, masks)
    ]
    loss = torch.stack(losses).mean()
    value = float(loss.detach())
    if not math.isfinite(value):
        raise NonFiniteLossError(step_index, value)
    optimizer.zero_grad()
    loss.backward()
    optimizer.step()
    ema_update(teacher, model.backbone.context, config.ema_momentum)
    return value


def evaluate_validation_loss(
    model: PretrainModel,
    teacher: ContextualEncoder,
    examples: list[Example],
    montage: Montage,
    config: PretrainConfig,
) -> float:
    """Mean masked-latent loss over the validation set.

    Masks come from a dedicated stream seeded by (seed, "val-masks"), rebuilt
    on every call, so each epoch's validation uses identical masks and a
    reloaded checkpoint reproduces the recorded value exactly.
    """
    if not examples:
        raise ConfigError("validation set is empty")
    rng = np.random.default_rng(derive_seed(config.seed, "val-masks"))
    t = token_count(examples[0].n_samples, config.model.local)
    model.eval()
    total = 0.0
    with torch.no_grad():
        for ex in examples:
            x = torch.as_tensor(ex.samples, dtype=torch.float32)
            mask = sample_mask(montage, config.mask_diameter_fraction, t, rng)
            total += float(
                masked_latent_loss(model, teacher, x, mask, config.normalize_targets)
            )
    return total / len(examples)


@dataclass
class EarlyStopper:
    """Patience-based stopping on validation loss (strict improvement).

    Epochs up to warmup_epochs never increment the stagnation counter, but
    improvements there still update the best.
    """

    patience: int
    warmup_epochs: int = 0
    best: float = math.inf
    best_epoch: int = 0
    epochs_since_improvement: int = 0

    def update(self, epoch: int, value: float) -> bool:
        """Record one epoch's validation value; returns True on improvement."""
        if value < self.best:
            self.best = value
            self.best_epoch = epoch
            self.epochs_since_improvement = 0
            return True
        if epoch > self.warmup_epochs:
            self.epochs_since_improvement += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.epochs_since_improvement >= self.patience


@dataclass
class PretrainResult:
    """Outcome of a pre-training run."""

    best_epoch: int
    best_val_loss: float
    epochs_run: int
    total_steps: int
    history: list[tuple[int, int, str, float]]
    best_checkpoint: Checkpoint
    best_path: Path | None = None


class _LossLog:
    """Appends (step, epoch, split, loss) rows to a CSV as they happen."""

    def __init__(self, path: Path | None):
        self._handle = None
        if path is not None:
            path.parent.mkdir(parents=True, exist_ok=True)
            self._handle = open(path, "w", newline="", encoding="utf-8")
            self._writer = csv.writer(self._handle)
            self._writer.writerow(["step", "epoch", "split", "loss"])
            self._handle.flush()

    def row(self, step: int, epoch: int, split: str, loss: float) -> None:
        if self._handle is not None:
            self._writer.writerow([step, epoch, split, repr(float(loss))])
            self._handle.flush()

    def close(self) -> None:
        if self._handle is not None:
            self._handle.close()


def _snapshot(
    model: PretrainModel, teacher: ContextualEncoder
) -> dict[str, torch.Tensor]:
    tensors = module_tensors(model, prefix="student.")
    tensors.update(module_tensors(teacher, prefix="teacher."))
    return tensors


def _checkpoint(
    model: PretrainModel,
    teacher: ContextualEncoder,
    montage: Montage,
    config: PretrainConfig,
    metadata: dict,
) -> Checkpoint:
    return Checkpoint(
        config={"kind": "pretrain", "pretrain": config.to_dict()},
        montage=montage,
        tensors=_snapshot(model, teacher),
        metadata=metadata,
    )


def run_pretraining(
    montage: Montage,
    train_examples: list[Example],
    val_examples: list[Example],
    config: PretrainConfig,
    out_dir: str | Path | None = None,
) -> PretrainResult:
    """Full pre-training loop with early stopping.

    Per epoch: shuffle, step over batches (masks drawn per example from the
    training mask stream), evaluate validation loss, write an epoch
    checkpoint, and refresh the `best` alias on improvement.  Stops after
    `patience` consecutive epochs without a strictly lower validation loss.

    Returns the best checkpoint (also written to <out_dir>/best.ckpt when
    out_dir is given, next to epoch_NNNN.ckpt files and loss.csv).
    """
    if not train_examples:
        raise ConfigError("training set is empty")
    if not val_examples:
        raise ConfigError("validation set is empty")
    lengths = {ex.n_samples for ex in train_examples} | {
        ex.n_samples for ex in val_examples
    }
    if len(lengths) != 1:
        raise ConfigError(f"examples have mixed lengths {sorted(lengths)}")
    n_channels = train_examples[0].samples.shape[0]
    if n_channels != montage.n_channels:
        raise ConfigError(
            f"examples have {n_channels} channels, montage has {montage.n_channels}"
        )
    t = token_count(lengths.pop(), config.model.local)

    torch.manual_seed(derive_seed(config.seed, "model-init"))
    model, teacher = build_models(montage, config.model)
    optimizer = torch.optim.Adam(model.parameters(), lr=config.learning_rate)

    rng_shuffle = np.random.default_rng(derive_seed(config.seed, "shuffle"))
    rng_masks = np.random.default_rng(derive_seed(config.seed, "train-masks"))

    out_path = Path(out_dir) if out_dir is not None else None
    log = _LossLog(out_path / "loss.csv" if out_path else None)
    stopper = EarlyStopper(patience=config.patience)
    tensors = [
        torch.as_tensor(ex.samples, dtype=torch.float32) for ex in train_examples
    ]

    step = 0
    epochs_run = 0
    best_ckpt: Checkpoint | None = None
    best_path: Path | None = None
    try:
        for epoch in range(1, config.max_epochs + 1):
            epochs_run = epoch
            order = rng_shuffle.permutation(len(tensors))
            for lo in range(0, len(order), config.batch_size):
                chunk = order[lo : lo + config.batch_size]
                batch = [tensors[i] for i in chunk]
                masks = [
                    sample_mask(montage, config.mask_diameter_fraction, t, rng_masks)
                    for _ in chunk
                ]
                step += 1
                loss = pretrain_step(
                    model, teacher, optimizer, batch, masks, config, step
                )
                log.row(step, epoch, "train", loss)

            val_loss = evaluate_validation_loss(
                model, teacher, val_examples, montage, config
            )
            if not math.isfinite(val_loss):
                raise NonFiniteLossError(step, val_loss)
            log.row(step, epoch, "val", val_loss)

            improved = stopper.update(epoch, val_loss)
            metadata = {
                "kind": "pretrain",
                "epoch": epoch,
                "step": step,
                "val_loss": val_loss,
                "best_epoch": stopper.best_epoch,
                "best_val_loss": stopper.best,
            }
            if out_path is not None:
                ckpt = _checkpoint(model, teacher, montage, config, metadata)
                save_checkpoint(out_path / f"epoch_{epoch:04d}.ckpt", ckpt)
                if improved:
                    best_path = out_path / "best.ckpt"
                    save_checkpoint(best_path, ckpt)
                    best_ckpt = ckpt
            elif improved:
                best_ckpt = _checkpoint(model, teacher, montage, config, metadata)

            if stopper.should_stop:
                break
    finally:
        log.close()

    assert best_ckpt is not None  # at least one epoch improves over +inf
    history = _read_history(out_path / "loss.csv") if out_path else []
    return PretrainResult(
        best_epoch=stopper.best_epoch,
        best_val_loss=stopper.best,
        epochs_run=epochs_run,
        total_steps=step,
        history=history,
        best_checkpoint=best_ckpt,
        best_path=best_path,
    )


def _read_history(path: Path) -> list[tuple[int, int, str, float]]:
    out = []
    with open(path, newline="", encoding="utf-8") as handle:
        reader = csv.reader(handle)
        next(reader)  # header
        for row in reader:
            out.append((int(row[0]), int(row[1]), row[2], float(row[3])))
    return out


def models_from_checkpoint(
    ckpt: Checkpoint,
) -> tuple[Montage, PretrainModel, ContextualEncoder, PretrainConfig]:
    """Rebuild student and teacher exactly as checkpointed."""
    if ckpt.config.get("kind") != "pretrain":
        raise ConfigError(
            f"expected a pretrain checkpoint, got kind {ckpt.config.get('kind')!r}"
        )
    config = PretrainConfig.from_dict(ckpt.config["pretrain"])
    model = PretrainModel(ckpt.montage, config.model)
    teacher = ContextualEncoder(config.model.context_config())
    load_module_tensors(model, ckpt.tensors, prefix="student.")
    load_module_tensors(teacher, ckpt.tensors, prefix="teacher.")
    for p in teacher.parameters():
        p.requires_grad_(False)
    return ckpt.montage, model, teacher, config


def validation_loss_from_checkpoint(
    ckpt: Checkpoint, val_examples: list[Example]
) -> float:
    """Recompute the validation loss recorded in a checkpoint."""
    montage, model, teacher, config = models_from_checkpoint(ckpt)
    return evaluate_validation_loss(model, teacher, val_examples, montage, config)
