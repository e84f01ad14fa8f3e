"""Network components and checkpoint archives.

All components operate on 64-dimensional tokens by default.  The local
encoder turns one channel's waveform into a token per 1.1875 s window (1 s
hop); the contextual encoder and predictor are pre-LN transformers over
flattened token sequences; spatial aggregation maps real channels to a small
set of virtual channels; the classifier head is a single linear readout.
"""

from __future__ import annotations

import io
import json
import os
import zipfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .errors import CompatibilityError, ConfigError, DataError, ShapeError
from .montage import (
    Montage,
    apply_position_markers,
    init_spatial_table,
    load_montage,
    marker_matrix,
    save_montage,
)


@dataclass(frozen=True)
class LocalEncoderConfig:
    """Geometry of the per-channel convolutional tokeniser.

    Defaults give a 152-sample (1.1875 s at 128 Hz) receptive field advancing
    128 samples (1 s) per token: one wide layer then four halving layers.
    """

    token_dim: int = 64
    hidden_width: int = 64
    kernels: tuple[int, ...] = (32, 2, 2, 2, 2)
    strides: tuple[int, ...] = (8, 2, 2, 2, 2)

    def __post_init__(self):
        if len(self.kernels) != len(self.strides) or not self.kernels:
            raise ConfigError("kernels and strides must be equal-length, non-empty")
        if any(k < 1 for k in self.kernels) or any(s < 1 for s in self.strides):
            raise ConfigError("kernels and strides must be positive")
        if self.token_dim < 1 or self.hidden_width < 1:
            raise ConfigError("widths must be positive")

    @property
    def receptive_field(self) -> int:
        rf, jump = 1, 1
        for k, s in zip(self.kernels, self.strides):
            rf += (k - 1) * jump
            jump *= s
        return rf

    @property
    def hop(self) -> int:
        out = 1
        for s in self.strides:
            out *= s
        return out


def token_count(n_samples: int, config: LocalEncoderConfig | None = None) -> int:
    """Tokens per channel for an example of n_samples: floor((T - rf)/hop) + 1.

    Raises:
        ShapeError: example shorter than the receptive field.
    """
    config = config or LocalEncoderConfig()
    if n_samples < config.receptive_field:
        raise ShapeError(
            f"{n_samples} samples is below the {config.receptive_field}-sample "
            "receptive field"
        )
    return (n_samples - config.receptive_field) // config.hop + 1


class LocalEncoder(nn.Module):
    """Shared per-channel conv stack: (B, T) waveform -> (B, t, d) tokens."""

    def __init__(self, config: LocalEncoderConfig | None = None):
        super().__init__()
        self.config = config or LocalEncoderConfig()
        widths = [self.config.hidden_width] * (len(self.config.kernels) - 1)
        widths.append(self.config.token_dim)
        convs = []
        in_ch = 1
        for width, kernel, stride in zip(widths, self.config.kernels, self.config.strides):
            convs.append(nn.Conv1d(in_ch, width, kernel_size=kernel, stride=stride))
            in_ch = width
        self.convs = nn.ModuleList(convs)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim != 2:
            raise ShapeError(f"local encoder expects (B, T), got {tuple(x.shape)}")
        token_count(x.shape[1], self.config)  # validates the length
        h = x[:, None, :]
        for conv in self.convs:
            h = torch.nn.functional.gelu(conv(h))
        return h.transpose(1, 2)


def encode_channels(encoder: LocalEncoder, x: torch.Tensor) -> torch.Tensor:
    """Apply the shared stack to every channel: (..., C, T) -> (..., C, t, d)."""
    if x.ndim < 2:
        raise ShapeError(f"expected (..., C, T), got {tuple(x.shape)}")
    *lead, C, T = x.shape
    tokens = encoder(x.reshape(-1, T))
    return tokens.reshape(*lead, C, tokens.shape[1], tokens.shape[2])


def _init_transformer_weights(module: nn.Module) -> None:
    # Truncated-normal linear maps, unit LayerNorm, zero biases.
    for m in module.modules():
        if isinstance(m, nn.Linear):
            nn.init.trunc_normal_(m.weight, std=0.02)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.LayerNorm):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)
        elif isinstance(m, nn.MultiheadAttention):
            nn.init.trunc_normal_(m.in_proj_weight, std=0.02)
            nn.init.zeros_(m.in_proj_bias)
            nn.init.trunc_normal_(m.out_proj.weight, std=0.02)
            nn.init.zeros_(m.out_proj.bias)


@dataclass(frozen=True)
class TransformerConfig:
    """Shape of a token-sequence transformer."""

    depth: int = 8
    token_dim: int = 64
    heads: int = 4
    ff_dim: int = 256

    def __post_init__(self):
        if self.depth < 0:
            raise ConfigError("depth must be >= 0")
        if self.token_dim < 1 or self.heads < 1 or self.ff_dim < 1:
            raise ConfigError("transformer dims must be positive")
        if self.token_dim % self.heads != 0:
            raise ConfigError(
                f"token dim {self.token_dim} not divisible by {self.heads} heads"
            )


class ContextualEncoder(nn.Module):
    """Pre-LN transformer encoder over a token sequence; permutation
    equivariant because nothing here depends on sequence order."""

    def __init__(self, config: TransformerConfig | None = None):
        super().__init__()
        self.config = config or TransformerConfig()
        self.layers = nn.ModuleList(
            nn.TransformerEncoderLayer(
                d_model=self.config.token_dim,
                nhead=self.config.heads,
                dim_feedforward=self.config.ff_dim,
                dropout=0.0,
                activation="gelu",
                batch_first=True,
                norm_first=True,
            )
            for _ in range(self.config.depth)
        )
        # Pre-LN stacks end with a final norm; depth 0 stays a pure identity.
        self.final_norm = (
            nn.LayerNorm(self.config.token_dim) if self.config.depth > 0 else None
        )
        _init_transformer_weights(self)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim != 3 or x.shape[-1] != self.config.token_dim:
            raise ShapeError(
                f"expected (B, L, {self.config.token_dim}), got {tuple(x.shape)}"
            )
        for layer in self.layers:
            x = layer(x)
        if self.final_norm is not None:
            x = self.final_norm(x)
        return x


class Predictor(nn.Module):
    """Transformer decoder that predicts masked-token latents.

    Queries are a shared learned mask token plus the position marker of each
    masked slot; they cross-attend to the contextual encoder's output.
    """

    def __init__(self, config: TransformerConfig | None = None):
        super().__init__()
        self.config = config or TransformerConfig(depth=4)
        self.mask_token = nn.Parameter(torch.empty(self.config.token_dim))
        self.layers = nn.ModuleList(
            nn.TransformerDecoderLayer(
                d_model=self.config.token_dim,
                nhead=self.config.heads,
                dim_feedforward=self.config.ff_dim,
                dropout=0.0,
                activation="gelu",
                batch_first=True,
                norm_first=True,
            )
            for _ in range(self.config.depth)
        )
        self.final_norm = (
            nn.LayerNorm(self.config.token_dim) if self.config.depth > 0 else None
        )
        _init_transformer_weights(self)
        nn.init.trunc_normal_(self.mask_token, std=0.02)

    def forward(self, memory: torch.Tensor, queries: torch.Tensor) -> torch.Tensor:
        if memory.ndim != 3 or queries.ndim != 3:
            raise ShapeError("predictor expects batched (B, S, d) memory and queries")
        if memory.shape[-1] != self.config.token_dim:
            raise ShapeError(
                f"memory dim {memory.shape[-1]} != {self.config.token_dim}"
            )
        h = queries
        for layer in self.layers:
            h = layer(h, memory)
        if self.final_norm is not None:
            h = self.final_norm(h)
        return h


class PositionEncoding(nn.Module):
    """Trainable per-channel spatial table + fixed temporal encoding.

    The table is initialised from the sinusoidal encoding of each electrode's
    3-D coordinates, so geometry is present from step zero but free to adapt.
    """

    def __init__(self, montage: Montage, token_dim: int = 64, temporal_dims: int = 34):
        super().__init__()
        spatial_dims = token_dim - temporal_dims
        table = init_spatial_table(montage, spatial_dims)
        self.token_dim = token_dim
        self.temporal_dims = temporal_dims
        self.spatial_table = nn.Parameter(torch.as_tensor(table, dtype=torch.float32))

    def mark(self, tokens: torch.Tensor) -> torch.Tensor:
        """(..., C, t, d) token grid -> (..., C*t, d) marked sequence."""
        table = self.spatial_table.to(tokens.dtype)
        return apply_position_markers(tokens, table)

    def markers_for(
        self, positions: list[tuple[int, int]], windows_per_channel: int,
        dtype: torch.dtype = torch.float32,
    ) -> torch.Tensor:
        """(M, d) markers for explicit (channel, window) slots."""
        table = self.spatial_table.to(dtype)
        full = marker_matrix(table, windows_per_channel, self.token_dim)
        rows = [full[c, w] for c, w in positions]
        return torch.stack(rows, dim=0)


class SpatialAggregate(nn.Module):
    """Bias-free linear map from C input channels to V virtual channels.

    Works on any per-channel payload: raw waveforms (C, T) or token grids
    (C, t, d); the channel axis is contracted, everything else is preserved.
    """

    def __init__(self, n_channels: int, virtual_channels: int):
        super().__init__()
        if n_channels < 1 or virtual_channels < 1:
            raise ConfigError("channel counts must be positive")
        self.n_channels = n_channels
        self.virtual_channels = virtual_channels
        weight = torch.empty(virtual_channels, n_channels)
        bound = 1.0 / float(n_channels) ** 0.5
        nn.init.uniform_(weight, -bound, bound)
        self.weight = nn.Parameter(weight)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """(C, ...) -> (V, ...), unbatched."""
        if x.shape[0] != self.n_channels:
            raise ShapeError(f"expected {self.n_channels} channels, got {x.shape[0]}")
        return torch.einsum("vc,c...->v...", self.weight.to(x.dtype), x)

    def forward_batched(self, x: torch.Tensor) -> torch.Tensor:
        """(B, C, ...) -> (B, V, ...)."""
        if x.shape[1] != self.n_channels:
            raise ShapeError(f"expected {self.n_channels} channels, got {x.shape[1]}")
        return torch.einsum("vc,bc...->bv...", self.weight.to(x.dtype), x)


class ClassifierHead(nn.Module):
    """Single linear layer over flattened features."""

    def __init__(self, in_features: int, n_classes: int):
        super().__init__()
        if n_classes < 2:
            raise ConfigError("classifier needs at least 2 classes")
        self.linear = nn.Linear(in_features, n_classes)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim != 2 or x.shape[1] != self.linear.in_features:
            raise ShapeError(
                f"expected (B, {self.linear.in_features}), got {tuple(x.shape)}"
            )
        return self.linear(x)


@dataclass(frozen=True)
class ModelConfig:
    """Full backbone + predictor shape."""

    token_dim: int = 64
    temporal_dims: int = 34
    context_depth: int = 8
    predictor_depth: int = 4
    heads: int = 4
    ff_dim: int = 256
    local: LocalEncoderConfig = field(default_factory=LocalEncoderConfig)

    def __post_init__(self):
        if self.local.token_dim != self.token_dim:
            raise ConfigError(
                f"local encoder emits {self.local.token_dim}-dim tokens, "
                f"model expects {self.token_dim}"
            )
        spatial = self.token_dim - self.temporal_dims
        if self.temporal_dims <= 0 or self.temporal_dims % 2 != 0:
            raise ConfigError("temporal dims must be positive and even")
        if spatial <= 0 or spatial % 6 != 0:
            raise ConfigError(
                f"spatial dims {spatial} must be a positive multiple of 6"
            )

    def context_config(self) -> TransformerConfig:
        return TransformerConfig(
            depth=self.context_depth, token_dim=self.token_dim,
            heads=self.heads, ff_dim=self.ff_dim,
        )

    def predictor_config(self) -> TransformerConfig:
        return TransformerConfig(
            depth=self.predictor_depth, token_dim=self.token_dim,
            heads=self.heads, ff_dim=self.ff_dim,
        )

    def to_dict(self) -> dict:
        return {
            "token_dim": self.token_dim,
            "temporal_dims": self.temporal_dims,
            "context_depth": self.context_depth,
            "predictor_depth": self.predictor_depth,
            "heads": self.heads,
            "ff_dim": self.ff_dim,
            "local": {
                "token_dim": self.local.token_dim,
                "hidden_width": self.local.hidden_width,
                "kernels": list(self.local.kernels),
                "strides": list(self.local.strides),
            },
        }

    @staticmethod
    def from_dict(d: dict) -> "ModelConfig":
        local = d.get("local", {})
        return ModelConfig(
            token_dim=d.get("token_dim", 64),
            temporal_dims=d.get("temporal_dims", 34),
            context_depth=d.get("context_depth", 8),
            predictor_depth=d.get("predictor_depth", 4),
            heads=d.get("heads", 4),
            ff_dim=d.get("ff_dim", 256),
            local=LocalEncoderConfig(
                token_dim=local.get("token_dim", 64),
                hidden_width=local.get("hidden_width", 64),
                kernels=tuple(local.get("kernels", (32, 2, 2, 2, 2))),
                strides=tuple(local.get("strides", (8, 2, 2, 2, 2))),
            ),
        )


class Backbone(nn.Module):
    """Local encoder + position markers + contextual encoder."""

    def __init__(self, montage: Montage, config: ModelConfig | None = None):
        super().__init__()
        self.model_config = config or ModelConfig()
        self.local = LocalEncoder(self.model_config.local)
        self.markers = PositionEncoding(
            montage, self.model_config.token_dim, self.model_config.temporal_dims
        )
        self.context = ContextualEncoder(self.model_config.context_config())


# ---------------------------------------------------------------------------
# Checkpoint archive: a single zip with config, montage, metadata and raw
# little-endian float32 tensors.  Writing is atomic and byte-deterministic.
# ---------------------------------------------------------------------------

_CHECKPOINT_VERSION = 1
_ZIP_EPOCH = (1980, 1, 1, 0, 0, 0)


@dataclass
class Checkpoint:
    """Everything needed to rebuild a model and resume or fine-tune it."""

    config: dict
    montage: Montage
    tensors: dict[str, torch.Tensor]
    metadata: dict


def _write_entry(zf: zipfile.ZipFile, name: str, payload: bytes) -> None:
    info = zipfile.ZipInfo(name, date_time=_ZIP_EPOCH)
    info.compress_type = zipfile.ZIP_STORED
    info.external_attr = 0o644 << 16
    zf.writestr(info, payload)


def save_checkpoint(path: str | Path, checkpoint: Checkpoint) -> None:
    """Atomically write a checkpoint archive (temp file + rename)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    manifest = []
    blobs = []
    for i, (name, tensor) in enumerate(sorted(checkpoint.tensors.items())):
        arr = np.ascontiguousarray(
            tensor.detach().cpu().to(torch.float32).numpy(), dtype="<f4"
        )
        entry = f"tensors/{i:04d}.bin"
        manifest.append({"name": name, "shape": list(arr.shape), "file": entry})
        blobs.append((entry, arr.tobytes()))

    montage_buf = io.StringIO()
    lines = ["# electrode montage: name x y z (meters)"]
    for nm, (x, y, z) in zip(checkpoint.montage.names, checkpoint.montage.positions):
        lines.append(f"{nm} {x:.6f} {y:.6f} {z:.6f}")
    montage_buf.write("\n".join(lines) + "\n")

    tmp = path.with_name(path.name + ".tmp")
    with zipfile.ZipFile(tmp, "w") as zf:
        _write_entry(
            zf, "format.json",
            json.dumps({"checkpoint_version": _CHECKPOINT_VERSION}).encode(),
        )
        _write_entry(
            zf, "config.json",
            json.dumps(checkpoint.config, indent=2, sort_keys=True).encode(),
        )
        _write_entry(
            zf, "metadata.json",
            json.dumps(checkpoint.metadata, indent=2, sort_keys=True).encode(),
        )
        _write_entry(zf, "montage.txt", montage_buf.getvalue().encode())
        _write_entry(
            zf, "tensors.json", json.dumps(manifest, indent=2).encode()
        )
        for entry, payload in blobs:
            _write_entry(zf, entry, payload)
    os.replace(tmp, path)


def load_checkpoint(path: str | Path) -> Checkpoint:
    """Read a checkpoint archive.

    Raises:
        DataError: missing file or malformed archive.
        CompatibilityError: unknown checkpoint format version.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"checkpoint not found: {path}")
    try:
        with zipfile.ZipFile(path) as zf:
            fmt = json.loads(zf.read("format.json"))
            if fmt.get("checkpoint_version") != _CHECKPOINT_VERSION:
                raise CompatibilityError(
                    f"unsupported checkpoint version {fmt.get('checkpoint_version')}"
                )
            config = json.loads(zf.read("config.json"))
            metadata = json.loads(zf.read("metadata.json"))
            manifest = json.loads(zf.read("tensors.json"))
            montage_text = zf.read("montage.txt").decode()
            tensors = {}
            for item in manifest:
                raw = zf.read(item["file"])
                arr = np.frombuffer(raw, dtype="<f4").reshape(item["shape"]).copy()
                tensors[item["name"]] = torch.from_numpy(arr)
    except (zipfile.BadZipFile, KeyError, json.JSONDecodeError) as exc:
        raise DataError(f"malformed checkpoint {path}: {exc}") from exc

    import tempfile

    with tempfile.NamedTemporaryFile("w", suffix=".txt", delete=False) as tmp:
        tmp.write(montage_text)
        tmp_path = tmp.name
    try:
        montage = load_montage(tmp_path)
    finally:
        os.unlink(tmp_path)
    return Checkpoint(config=config, montage=montage, tensors=tensors, metadata=metadata)


def module_tensors(module: nn.Module, prefix: str = "") -> dict[str, torch.Tensor]:
    """Named parameters (and buffers) of a module, optionally prefixed."""
    out = {}
    for name, p in module.named_parameters():
        out[prefix + name] = p.detach().clone()
    for name, b in module.named_buffers():
        out[prefix + name] = b.detach().clone()
    return out


def load_module_tensors(
    module: nn.Module, tensors: dict[str, torch.Tensor], prefix: str = ""
) -> None:
    """Load a prefixed tensor set into a module, strictly.

    Raises:
        CompatibilityError: missing, extra, or mis-shaped tensors.
    """
    selected = {
        k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)
    }
    try:
        module.load_state_dict(selected, strict=True)
    except RuntimeError as exc:
        raise CompatibilityError(f"checkpoint does not fit module: {exc}") from exc


def montages_compatible(a: Montage, b: Montage, tol: float = 1e-5) -> bool:
    """Same names in the same order, positions equal within tolerance."""
    return a.names == b.names and bool(
        np.allclose(a.positions, b.positions, atol=tol)
    )
