"""Downstream classification: architectures, fine-tuning regimes, scoring.

Three architectures share the pattern `features -> flatten -> linear head`:

* contextual: local encoder -> position markers -> contextual encoder ->
  channel aggregation on the output tokens.
* post_local: local encoder -> channel aggregation on the token grid.
* pre_local: channel aggregation on the raw waveforms -> local encoder over
  the virtual channels.

Two regimes: "new" trains only the aggregation and head with everything
pre-trained frozen; "full" trains new layers alone for a warm-up period, then
unfreezes the pre-trained stack at a lower learning rate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .data import Example
from .errors import (
    CompatibilityError,
    ConfigError,
    NonFiniteLossError,
    ScoringError,
    ShapeError,
)
from .montage import Montage
from .nets import (
    Checkpoint,
    ClassifierHead,
    ContextualEncoder,
    LocalEncoder,
    ModelConfig,
    PositionEncoding,
    SpatialAggregate,
    encode_channels,
    load_module_tensors,
    montages_compatible,
    token_count,
)
from .pretrain import EarlyStopper
from .seeding import derive_seed

ARCHITECTURES = ("contextual", "post_local", "pre_local")
STRATEGIES = ("new", "full")


@dataclass(frozen=True)
class DownstreamSpec:
    """Architecture, regime, and optimisation settings for one fine-tuning."""

    architecture: str = "contextual"
    strategy: str = "full"
    virtual_channels: int = 4
    n_classes: int = 2
    warmup_epochs: int = 10
    patience: int = 50
    max_epochs: int = 500
    batch_size: int = 64
    lr_new: float = 1e-3
    lr_pretrained: float = 1e-4
    seed: int = 0
    metric: str = "accuracy"
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if self.architecture not in ARCHITECTURES:
            raise ConfigError(f"unknown architecture {self.architecture!r}")
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown strategy {self.strategy!r}")
        if self.virtual_channels < 1:
            raise ConfigError("need at least one virtual channel")
        if self.n_classes < 2:
            raise ConfigError("need at least two classes")
        if self.metric not in ("accuracy", "auc"):
            raise ConfigError(f"unknown metric {self.metric!r}")
        if self.warmup_epochs < 0 or self.patience < 1 or self.max_epochs < 1:
            raise ConfigError("bad epoch budget")
        if self.lr_new <= 0 or self.lr_pretrained <= 0 or self.batch_size < 1:
            raise ConfigError("bad optimisation settings")


class DownstreamModel(nn.Module):
    """One downstream classifier; construct via build_downstream."""

    def __init__(
        self,
        architecture: str,
        montage: Montage,
        model_config: ModelConfig,
        virtual_channels: int,
        n_classes: int,
        epoch_samples: int,
    ):
        super().__init__()
        if architecture not in ARCHITECTURES:
            raise ConfigError(f"unknown architecture {architecture!r}")
        self.architecture = architecture
        self.epoch_samples = epoch_samples
        self.n_channels = montage.n_channels
        t = token_count(epoch_samples, model_config.local)
        d = model_config.token_dim
        self.local = LocalEncoder(model_config.local)
        if architecture == "contextual":
            self.markers = PositionEncoding(montage, d, model_config.temporal_dims)
            self.context = ContextualEncoder(model_config.context_config())
        self.aggregate = SpatialAggregate(montage.n_channels, virtual_channels)
        self.head = ClassifierHead(virtual_channels * t * d, n_classes)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim != 3 or x.shape[1] != self.n_channels:
            raise ShapeError(
                f"expected (B, {self.n_channels}, T), got {tuple(x.shape)}"
            )
        if x.shape[2] != self.epoch_samples:
            raise ShapeError(
                f"expected {self.epoch_samples} samples, got {x.shape[2]}"
            )
        B = x.shape[0]
        if self.architecture == "pre_local":
            virtual = self.aggregate.forward_batched(x)  # (B, V, T)
            tokens = encode_channels(self.local, virtual)  # (B, V, t, d)
        else:
            tokens = encode_channels(self.local, x)  # (B, C, t, d)
            if self.architecture == "contextual":
                marked = self.markers.mark(tokens)  # (B, L, d)
                out = self.context(marked)
                tokens = out.reshape(tokens.shape)
            tokens = self.aggregate.forward_batched(tokens)  # (B, V, t, d)
        return self.head(tokens.reshape(B, -1))

    def pretrained_modules(self) -> list[nn.Module]:
        if self.architecture == "contextual":
            return [self.local, self.markers, self.context]
        return [self.local]

    def pretrained_parameters(self):
        for module in self.pretrained_modules():
            yield from module.parameters()

    def new_parameters(self):
        yield from self.aggregate.parameters()
        yield from self.head.parameters()


def build_downstream(
    checkpoint: Checkpoint | None,
    spec: DownstreamSpec,
    montage: Montage,
    epoch_samples: int,
) -> DownstreamModel:
    """Assemble a downstream model, loading pre-trained tensors if given.

    Raises:
        ConfigError: "new" strategy without a checkpoint (nothing to freeze).
        CompatibilityError: checkpoint montage or shapes do not match.
    """
    if checkpoint is None:
        if spec.strategy == "new":
            raise ConfigError(
                "the new-layers-only strategy requires a pre-trained checkpoint"
            )
        model_config = spec.model
    else:
        if checkpoint.config.get("kind") != "pretrain":
            raise ConfigError("checkpoint is not a pre-training checkpoint")
        model_config = ModelConfig.from_dict(checkpoint.config["pretrain"]["model"])
        if not montages_compatible(checkpoint.montage, montage):
            raise CompatibilityError(
                "checkpoint montage does not match the dataset montage"
            )
    model = DownstreamModel(
        spec.architecture,
        montage,
        model_config,
        spec.virtual_channels,
        spec.n_classes,
        epoch_samples,
    )
    if checkpoint is not None:
        load_module_tensors(
            model.local, checkpoint.tensors, prefix="student.backbone.local."
        )
        if spec.architecture == "contextual":
            load_module_tensors(
                model.markers, checkpoint.tensors, prefix="student.backbone.markers."
            )
            load_module_tensors(
                model.context, checkpoint.tensors, prefix="student.backbone.context."
            )
    return model


def _as_batch(examples: list[Example]) -> tuple[torch.Tensor, torch.Tensor]:
    x = torch.as_tensor(
        np.stack([ex.samples for ex in examples]), dtype=torch.float32
    )
    y = torch.as_tensor([ex.label for ex in examples], dtype=torch.long)
    return x, y


def _validate_examples(name: str, examples: list[Example], n_classes: int) -> None:
    if not examples:
        raise ConfigError(f"{name} set is empty")
    for ex in examples:
        if ex.label is None:
            raise ConfigError(f"{name} set contains unlabelled examples")
        if ex.label >= n_classes:
            raise ConfigError(
                f"{name} label {ex.label} out of range for {n_classes} classes"
            )


@dataclass
class FinetuneResult:
    """Outcome of fine-tuning on one fold."""

    score: float
    metric: str
    epochs_run: int
    best_epoch: int
    best_val_loss: float
    test_probabilities: np.ndarray
    test_labels: np.ndarray


def finetune(
    model: DownstreamModel,
    spec: DownstreamSpec,
    train: list[Example],
    val: list[Example],
    test: list[Example],
) -> FinetuneResult:
    """Train with early stopping, restore the best epoch, score on test.

    "new": pre-trained tensors stay frozen for the whole run.
    "full": new layers train alone for warmup_epochs (stagnation there does
    not consume patience), then the pre-trained stack joins at lr_pretrained.
    """
    _validate_examples("train", train, spec.n_classes)
    _validate_examples("val", val, spec.n_classes)
    _validate_examples("test", test, spec.n_classes)

    warmup = spec.warmup_epochs if spec.strategy == "full" else 0
    for p in model.pretrained_parameters():
        p.requires_grad_(False)
    opt_new = torch.optim.Adam(model.new_parameters(), lr=spec.lr_new)
    opt_pre: torch.optim.Optimizer | None = None

    rng = np.random.default_rng(derive_seed(spec.seed, "finetune-shuffle"))
    x_train, y_train = _as_batch(train)
    x_val, y_val = _as_batch(val)

    stopper = EarlyStopper(patience=spec.patience, warmup_epochs=warmup)
    best_state: dict[str, torch.Tensor] | None = None
    step = 0
    epochs_run = 0
    for epoch in range(1, spec.max_epochs + 1):
        epochs_run = epoch
        if spec.strategy == "full" and epoch == warmup + 1:
            pretrained = list(model.pretrained_parameters())
            for p in pretrained:
                p.requires_grad_(True)
            if pretrained:
                opt_pre = torch.optim.Adam(pretrained, lr=spec.lr_pretrained)

        model.train()
        order = rng.permutation(len(train))
        for lo in range(0, len(order), spec.batch_size):
            idx = torch.as_tensor(order[lo : lo + spec.batch_size])
            logits = model(x_train[idx])
            loss = torch.nn.functional.cross_entropy(logits, y_train[idx])
            value = float(loss.detach())
            step += 1
            if not math.isfinite(value):
                raise NonFiniteLossError(step, value)
            opt_new.zero_grad()
            if opt_pre is not None:
                opt_pre.zero_grad()
            loss.backward()
            opt_new.step()
            if opt_pre is not None:
                opt_pre.step()

        model.eval()
        with torch.no_grad():
            val_loss = float(
                torch.nn.functional.cross_entropy(model(x_val), y_val)
            )
        if not math.isfinite(val_loss):
            raise NonFiniteLossError(step, val_loss)
        if stopper.update(epoch, val_loss):
            best_state = {
                k: v.detach().clone() for k, v in model.state_dict().items()
            }
        if stopper.should_stop:
            break

    assert best_state is not None
    model.load_state_dict(best_state)
    model.eval()
    x_test, y_test = _as_batch(test)
    with torch.no_grad():
        probs = torch.softmax(model(x_test), dim=1).numpy()
    return FinetuneResult(
        score=score(probs, y_test.numpy(), spec.metric),
        metric=spec.metric,
        epochs_run=epochs_run,
        best_epoch=stopper.best_epoch,
        best_val_loss=stopper.best,
        test_probabilities=probs,
        test_labels=y_test.numpy(),
    )


def score(predictions: np.ndarray, labels: np.ndarray, metric: str) -> float:
    """Compute a downstream metric.

    accuracy: fraction of argmax matches (predictions (n, c)).
    auc: area under the ROC curve for binary labels; ties between a positive
    and a negative score count one half.  Scores come from predictions[:, 1]
    when 2-D, or the raw vector when 1-D.

    Raises:
        ScoringError: length mismatch, empty input, or (for AUC) labels that
            are not binary with both classes present.
        ConfigError: unknown metric name.
    """
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if labels.ndim != 1 or predictions.shape[0] != labels.shape[0]:
        raise ScoringError(
            f"predictions ({predictions.shape}) do not match labels ({labels.shape})"
        )
    if labels.shape[0] == 0:
        raise ScoringError("cannot score an empty set")
    if metric == "accuracy":
        if predictions.ndim != 2:
            raise ScoringError("accuracy needs per-class prediction columns")
        return float(np.mean(np.argmax(predictions, axis=1) == labels))
    if metric == "auc":
        from sklearn.metrics import roc_auc_score

        if not set(np.unique(labels)) <= {0, 1}:
            raise ScoringError("AUC needs binary 0/1 labels")
        if len(np.unique(labels)) < 2:
            raise ScoringError("AUC needs both classes present")
        scores = predictions[:, 1] if predictions.ndim == 2 else predictions
        return float(roc_auc_score(labels, scores))
    raise ConfigError(f"unknown metric {metric!r}")


def metric_for_paradigm(paradigm: str) -> str:
    """ERP-style paradigms are scored with AUC, everything else with accuracy."""
    return "auc" if paradigm.strip().lower() == "erp" else "accuracy"
