"""Electrode montage geometry, spatial block masking, and position markers.

A montage is an ordered list of named electrode sites with 3-D positions in
meters.  Channel order is significant everywhere: tokens, masks and mixing
matrices all index channels by montage position.

Token layout convention (used package-wide): a recording of C channels whose
per-channel tokenisation yields t windows produces L = C * t tokens, flattened
channel-major, i.e. token i covers channel i // t, window i % t.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
import torch

from .errors import ConfigError, DataError, GeometryError, MaskingError, ShapeError

MAX_MASK_RETRIES = 100


@dataclass(frozen=True)
class Montage:
    """Ordered electrode layout.

    Attributes:
        names: Unique, non-empty site names, length C.
        positions: (C, 3) float64 coordinates in meters.
    """

    names: tuple[str, ...]
    positions: np.ndarray

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=np.float64)
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "names", tuple(self.names))
        if len(self.names) < 1:
            raise GeometryError("montage needs at least one electrode")
        if pos.shape != (len(self.names), 3):
            raise GeometryError(
                f"positions shape {pos.shape} does not match {len(self.names)} names"
            )
        if not np.all(np.isfinite(pos)):
            raise GeometryError("electrode positions must be finite")
        if any(not n for n in self.names):
            raise GeometryError("electrode names must be non-empty")
        if len(set(self.names)) != len(self.names):
            raise GeometryError("electrode names must be unique")

    @property
    def n_channels(self) -> int:
        return len(self.names)


def distance_matrix(montage: Montage) -> np.ndarray:
    """(C, C) matrix of pairwise Euclidean distances."""
    diff = montage.positions[:, None, :] - montage.positions[None, :, :]
    return np.linalg.norm(diff, axis=-1)


def head_size(montage: Montage) -> float:
    """Largest pairwise electrode distance, used as the head-size scale.

    Raises:
        GeometryError: fewer than two electrodes, or all sites coincident.
    """
    if montage.n_channels < 2:
        raise GeometryError("head size needs at least two electrodes")
    size = float(distance_matrix(montage).max())
    if size <= 0.0:
        raise GeometryError("all electrodes coincide; head size undefined")
    return size


@dataclass(frozen=True)
class MaskSpec:
    """One spatial block mask over a tokenised recording.

    Attributes:
        center_channel: Index of the block's seed electrode.
        diameter_fraction: Block diameter as a fraction of head size.
        masked_channels: Sorted indices of all masked electrodes.
        token_mask: Boolean vector of length C * t, True on masked tokens,
            channel-major layout.
        n_channels: C.
        windows_per_channel: t.
    """

    center_channel: int
    diameter_fraction: float
    masked_channels: tuple[int, ...]
    token_mask: np.ndarray = field(repr=False)
    n_channels: int
    windows_per_channel: int

    def __post_init__(self):
        mask = np.asarray(self.token_mask, dtype=bool)
        object.__setattr__(self, "token_mask", mask)
        C, t = self.n_channels, self.windows_per_channel
        if mask.shape != (C * t,):
            raise ShapeError(f"token mask length {mask.shape} != C*t = {C * t}")
        chans = set(self.masked_channels)
        if self.center_channel not in chans:
            raise MaskingError("mask center must be masked itself")
        if not chans or len(chans) >= C:
            raise MaskingError("mask must be a non-empty strict subset of channels")
        per_channel = mask.reshape(C, t)
        want = np.zeros(C, dtype=bool)
        want[list(chans)] = True
        if not np.array_equal(per_channel.all(axis=1), want) or not np.array_equal(
            per_channel.any(axis=1), want
        ):
            raise MaskingError("token mask must cover exactly the masked channels")


def _masked_set(distances: np.ndarray, center: int, radius: float) -> np.ndarray:
    # Inclusive boundary: a site exactly at the radius is masked.
    return np.flatnonzero(distances[center] <= radius)


def sample_mask(
    montage: Montage,
    diameter_fraction: float,
    windows_per_channel: int,
    rng: np.random.Generator,
    center_channel: int | None = None,
) -> MaskSpec:
    """Sample a spatial block mask.

    A center electrode is drawn uniformly and every electrode within
    ``diameter_fraction * head_size / 2`` of it (inclusive) is masked, each
    masked channel contributing all of its t tokens.  Draws that would mask
    every channel are rejected and resampled up to MAX_MASK_RETRIES times;
    afterwards the remaining valid centers are scanned directly.

    Args:
        montage: Electrode layout.
        diameter_fraction: Block diameter relative to head size, > 0.
        windows_per_channel: Tokens per channel (t >= 1).
        rng: Seeded generator; consumed only for center draws.
        center_channel: Force this center instead of sampling (used by
            diagnostics and tests).

    Raises:
        ConfigError: non-positive fraction or t, or center out of range.
        MaskingError: no center yields a strict-subset mask at this fraction.
    """
    if diameter_fraction <= 0.0:
        raise ConfigError(f"mask diameter fraction must be > 0, got {diameter_fraction}")
    if windows_per_channel < 1:
        raise ConfigError(f"windows per channel must be >= 1, got {windows_per_channel}")
    C = montage.n_channels
    radius = diameter_fraction * head_size(montage) / 2.0
    distances = distance_matrix(montage)

    def build(center: int) -> MaskSpec:
        masked = _masked_set(distances, center, radius)
        token_mask = np.zeros(C * windows_per_channel, dtype=bool)
        for c in masked:
            token_mask[c * windows_per_channel : (c + 1) * windows_per_channel] = True
        return MaskSpec(
            center_channel=int(center),
            diameter_fraction=float(diameter_fraction),
            masked_channels=tuple(int(c) for c in masked),
            token_mask=token_mask,
            n_channels=C,
            windows_per_channel=windows_per_channel,
        )

    if center_channel is not None:
        if not 0 <= center_channel < C:
            raise ConfigError(f"center channel {center_channel} out of range [0, {C})")
        if len(_masked_set(distances, center_channel, radius)) >= C:
            raise MaskingError(
                f"center {center_channel} masks every channel at fraction {diameter_fraction}"
            )
        return build(center_channel)

    for _ in range(MAX_MASK_RETRIES):
        center = int(rng.integers(C))
        if len(_masked_set(distances, center, radius)) < C:
            return build(center)
    valid = [c for c in range(C) if len(_masked_set(distances, c, radius)) < C]
    if not valid:
        raise MaskingError(
            f"every center masks all {C} channels at diameter fraction {diameter_fraction}"
        )
    return build(int(rng.choice(valid)))


def token_index(channel: int, window: int, windows_per_channel: int) -> int:
    """Flattened index of (channel, window) under the channel-major layout."""
    return channel * windows_per_channel + window


def token_position(index: int, windows_per_channel: int) -> tuple[int, int]:
    """Inverse of token_index: (channel, window) of a flattened token."""
    return index // windows_per_channel, index % windows_per_channel


def temporal_encoding(positions: np.ndarray, dims: int) -> np.ndarray:
    """Sinusoidal encoding of scalar positions.

    Element 2i is sin(pos / 10000**(2i/dims)) and element 2i+1 is the matching
    cos, so each adjacent pair shares a wavelength.

    Args:
        positions: 1-D array of positions (window indices or coordinates).
        dims: Even number of output dimensions.

    Returns:
        (len(positions), dims) float64 array.
    """
    if dims <= 0 or dims % 2 != 0:
        raise ConfigError(f"encoding dims must be a positive even number, got {dims}")
    pos = np.asarray(positions, dtype=np.float64).reshape(-1)
    i = np.arange(dims // 2, dtype=np.float64)
    wavelengths = np.power(10000.0, 2.0 * i / dims)  # (dims/2,)
    angles = pos[:, None] / wavelengths[None, :]
    out = np.empty((pos.shape[0], dims), dtype=np.float64)
    out[:, 0::2] = np.sin(angles)
    out[:, 1::2] = np.cos(angles)
    return out


def init_spatial_table(montage: Montage, spatial_dims: int) -> np.ndarray:
    """Initial per-channel spatial encodings from 3-D coordinates.

    Each coordinate axis gets spatial_dims // 3 dimensions of sinusoidal
    encoding; the three blocks are concatenated (x, then y, then z).  The
    result seeds a trainable table, so this only needs to inject geometry,
    not preserve it exactly.

    Args:
        montage: Electrode layout.
        spatial_dims: Total dimensions; divisible by 6 so each axis block is
            even-sized.

    Returns:
        (C, spatial_dims) float64 array.
    """
    if spatial_dims <= 0 or spatial_dims % 6 != 0:
        raise ConfigError(
            f"spatial dims must be a positive multiple of 6, got {spatial_dims}"
        )
    per_axis = spatial_dims // 3
    blocks = [
        temporal_encoding(montage.positions[:, axis], per_axis) for axis in range(3)
    ]
    return np.concatenate(blocks, axis=1)


def marker_matrix(
    spatial_table: torch.Tensor, windows_per_channel: int, total_dims: int
) -> torch.Tensor:
    """(C, t, d) additive position markers.

    Dims [0, d - spatial) carry the temporal encoding of the window index;
    the remaining dims carry the per-channel spatial encoding.
    """
    C, spatial_dims = spatial_table.shape
    temporal_dims = total_dims - spatial_dims
    if temporal_dims <= 0 or temporal_dims % 2 != 0:
        raise ShapeError(
            f"marker split invalid: {total_dims} total vs {spatial_dims} spatial dims"
        )
    temporal = temporal_encoding(np.arange(windows_per_channel), temporal_dims)
    temporal_t = torch.as_tensor(
        temporal, dtype=spatial_table.dtype, device=spatial_table.device
    )
    t = windows_per_channel
    left = temporal_t[None, :, :].expand(C, t, temporal_dims)
    right = spatial_table[:, None, :].expand(C, t, spatial_dims)
    return torch.cat([left, right], dim=-1)


def apply_position_markers(
    tokens: torch.Tensor, spatial_table: torch.Tensor
) -> torch.Tensor:
    """Add position markers to a token grid and flatten channel-major.

    Args:
        tokens: (..., C, t, d) token values.
        spatial_table: (C, spatial_dims) trainable spatial encodings with
            spatial_dims < d; temporal encodings fill the leading dims.

    Returns:
        (..., C * t, d) marked token sequence; token i covers channel i // t,
        window i % t.  Gradients flow through both tokens and the table.
    """
    if tokens.ndim < 3:
        raise ShapeError(f"tokens must be (..., C, t, d), got shape {tuple(tokens.shape)}")
    *lead, C, t, d = tokens.shape
    if spatial_table.shape[0] != C:
        raise ShapeError(
            f"spatial table has {spatial_table.shape[0]} channels, tokens have {C}"
        )
    markers = marker_matrix(spatial_table, t, d)
    marked = tokens + markers
    return marked.reshape(*lead, C * t, d)


def save_montage(montage: Montage, path: str | Path) -> None:
    """Write a montage as whitespace-separated `name x y z` lines."""
    lines = ["# electrode montage: name x y z (meters)"]
    for name, (x, y, z) in zip(montage.names, montage.positions):
        lines.append(f"{name} {x:.6f} {y:.6f} {z:.6f}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_montage(path: str | Path) -> Montage:
    """Parse a montage text file written by save_montage.

    Raises:
        DataError: unreadable file or malformed line.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"montage file not found: {path}")
    names: list[str] = []
    rows: list[list[float]] = []
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 4:
            raise DataError(f"{path}:{lineno}: expected `name x y z`, got {raw!r}")
        try:
            rows.append([float(v) for v in parts[1:]])
        except ValueError as exc:
            raise DataError(f"{path}:{lineno}: bad coordinate in {raw!r}") from exc
        names.append(parts[0])
    if not names:
        raise DataError(f"{path}: no electrodes found")
    try:
        return Montage(names=tuple(names), positions=np.array(rows))
    except GeometryError as exc:
        raise DataError(f"{path}: {exc}") from exc


def bundled_montage() -> Montage:
    """The packaged 62-channel 10-20-style montage."""
    ref = resources.files("eegjepa").joinpath("assets/montage_62.txt")
    with resources.as_file(ref) as path:
        return load_montage(path)


def spherical_cap_montage(n_channels: int, radius: float = 0.095) -> Montage:
    """Deterministic synthetic cap: n sites spread over the upper hemisphere.

    Uses a Fibonacci lattice restricted to z >= 0; handy for small test and
    synthesis montages where a named standard layout is overkill.
    """
    if n_channels < 1:
        raise ConfigError("cap needs at least one channel")
    golden = (1.0 + 5.0**0.5) / 2.0
    idx = np.arange(n_channels, dtype=np.float64)
    # z from ~1 down to ~0 keeps all sites on the upper hemisphere.
    z = 1.0 - idx / max(1, 2 * n_channels)
    r = np.sqrt(np.clip(1.0 - z * z, 0.0, None))
    phi = 2.0 * np.pi * idx / golden
    pos = radius * np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)
    names = tuple(f"ch{i:02d}" for i in range(n_channels))
    return Montage(names=names, positions=pos)
