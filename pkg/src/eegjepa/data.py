"""Recordings, preprocessing, slicing, splits, synthesis, and containers.

In-memory arrays are numpy; conversion to torch happens at the training
boundary.  On-disk containers are directories holding a montage, a small
key/value meta file, and raw little-endian float32 sample blocks, so corpora
are portable and byte-stable.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np
from scipy import signal

from .errors import ConfigError, DataError, ResamplingError, SplitError
from .montage import Montage, distance_matrix, head_size, load_montage, save_montage
from .seeding import derive_seed

# The tokeniser's receptive field; shorter examples yield zero tokens.
MIN_EXAMPLE_SAMPLES = 152

DEFAULT_BAND = (0.5, 40.0)
DEFAULT_RATE = 128.0
DEFAULT_SLICE_INTERVAL_S = 16.9


@dataclass(frozen=True)
class Recording:
    """A continuous multi-channel recording.

    Attributes:
        samples: (C, T) float array, channel order matching the montage.
        sampling_rate: Hz, > 0.
        subject: Subject identifier.
    """

    samples: np.ndarray
    sampling_rate: float
    subject: str = ""

    def __post_init__(self):
        arr = np.asarray(self.samples)
        object.__setattr__(self, "samples", arr)
        if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
            raise DataError(f"recording samples must be (C, T), got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise DataError("recording contains non-finite samples")
        if self.sampling_rate <= 0:
            raise DataError(f"sampling rate must be positive, got {self.sampling_rate}")

    @property
    def n_channels(self) -> int:
        return int(self.samples.shape[0])

    @property
    def n_samples(self) -> int:
        return int(self.samples.shape[1])


@dataclass(frozen=True)
class Example:
    """One fixed-length training example, optionally labelled.

    Attributes:
        samples: (C, T_e) float array with T_e >= MIN_EXAMPLE_SAMPLES.
        label: Class index >= 0, or None for unlabelled pre-training data.
    """

    samples: np.ndarray
    label: int | None = None

    def __post_init__(self):
        arr = np.asarray(self.samples)
        object.__setattr__(self, "samples", arr)
        if arr.ndim != 2:
            raise DataError(f"example samples must be (C, T), got {arr.shape}")
        if arr.shape[1] < MIN_EXAMPLE_SAMPLES:
            raise DataError(
                f"example length {arr.shape[1]} below minimum {MIN_EXAMPLE_SAMPLES}"
            )
        if not np.all(np.isfinite(arr)):
            raise DataError("example contains non-finite samples")
        if self.label is not None and self.label < 0:
            raise DataError(f"label must be >= 0, got {self.label}")

    @property
    def n_samples(self) -> int:
        return int(self.samples.shape[1])


def preprocess(
    recording: Recording,
    band: tuple[float, float] = DEFAULT_BAND,
    target_rate: float = DEFAULT_RATE,
) -> Recording:
    """Zero-phase band-pass filter then resample to the target rate.

    Filtering is a 4th-order Butterworth applied forward and backward
    (sosfiltfilt), so the pass band is phase-neutral; resampling is
    polyphase at the exact rational rate ratio.

    Raises:
        ConfigError: band not 0 < low < high < Nyquist of the raw rate.
        ResamplingError: target rate above the raw rate.
    """
    low, high = band
    if not (0.0 < low < high):
        raise ConfigError(f"band must satisfy 0 < low < high, got {band}")
    if high >= recording.sampling_rate / 2.0:
        raise ConfigError(
            f"band high {high} Hz needs raw rate > {2 * high} Hz, "
            f"got {recording.sampling_rate} Hz"
        )
    if target_rate > recording.sampling_rate:
        raise ResamplingError(
            f"cannot upsample: target {target_rate} Hz exceeds raw "
            f"{recording.sampling_rate} Hz"
        )
    if target_rate <= 0:
        raise ConfigError(f"target rate must be positive, got {target_rate}")
    sos = signal.butter(
        4, [low, high], btype="bandpass", fs=recording.sampling_rate, output="sos"
    )
    filtered = signal.sosfiltfilt(sos, recording.samples.astype(np.float64), axis=1)
    if target_rate != recording.sampling_rate:
        ratio = Fraction(target_rate).limit_denominator(10**6) / Fraction(
            recording.sampling_rate
        ).limit_denominator(10**6)
        filtered = signal.resample_poly(
            filtered, ratio.numerator, ratio.denominator, axis=1
        )
    return Recording(
        samples=filtered, sampling_rate=target_rate, subject=recording.subject
    )


def slice_continuous(
    recording: Recording,
    example_length_s: float,
    interval_s: float = DEFAULT_SLICE_INTERVAL_S,
) -> list[Example]:
    """Cut fixed-length examples at a fixed stride of interval_s seconds.

    Example k starts at sample round(k * interval_s * rate) and spans
    round(example_length_s * rate) samples; examples are emitted while they
    fit entirely inside the recording, so a short recording yields [].

    Raises:
        ConfigError: non-positive lengths, example longer than the interval,
            or an example too short for the tokeniser.
    """
    if example_length_s <= 0 or interval_s <= 0:
        raise ConfigError("example length and interval must be positive")
    if example_length_s > interval_s:
        raise ConfigError(
            f"example length {example_length_s}s exceeds slice interval {interval_s}s"
        )
    n = round(example_length_s * recording.sampling_rate)
    if n < MIN_EXAMPLE_SAMPLES:
        raise ConfigError(
            f"example length {example_length_s}s is {n} samples; "
            f"minimum is {MIN_EXAMPLE_SAMPLES}"
        )
    out: list[Example] = []
    k = 0
    while True:
        start = round(k * interval_s * recording.sampling_rate)
        if start + n > recording.n_samples:
            break
        out.append(Example(samples=recording.samples[:, start : start + n].copy()))
        k += 1
    return out


@dataclass(frozen=True)
class SubjectSplit:
    """Disjoint subject-level assignment to the three corpus roles."""

    pretrain: tuple[str, ...]
    validation: tuple[str, ...]
    downstream: tuple[str, ...]

    def __post_init__(self):
        groups = (set(self.pretrain), set(self.validation), set(self.downstream))
        total = sum(len(g) for g in groups)
        if len(groups[0] | groups[1] | groups[2]) != total:
            raise SplitError("subject groups must be pairwise disjoint")


def split_subjects(
    subjects: list[str],
    n_pretrain: int,
    n_validation: int,
    n_downstream: int,
    rng: np.random.Generator,
) -> SubjectSplit:
    """Randomly assign subjects to pretrain / validation / downstream roles."""
    if n_pretrain + n_validation + n_downstream > len(subjects):
        raise SplitError(
            f"need {n_pretrain + n_validation + n_downstream} subjects, "
            f"have {len(subjects)}"
        )
    order = [subjects[i] for i in rng.permutation(len(subjects))]
    a = n_pretrain
    b = a + n_validation
    c = b + n_downstream
    return SubjectSplit(
        pretrain=tuple(order[:a]),
        validation=tuple(order[a:b]),
        downstream=tuple(order[b:c]),
    )


@dataclass(frozen=True)
class Fold:
    """Index triple (into one subject's epoch list) for one CV fold."""

    train_indices: tuple[int, ...]
    val_indices: tuple[int, ...]
    test_indices: tuple[int, ...]

    def __post_init__(self):
        groups = (set(self.train_indices), set(self.val_indices), set(self.test_indices))
        if any(not g for g in groups):
            raise SplitError("every fold partition must be non-empty")
        total = sum(len(g) for g in groups)
        if len(groups[0] | groups[1] | groups[2]) != total:
            raise SplitError("fold partitions must be disjoint")


def stratified_folds(
    labels: list[int],
    n_folds: int,
    rng: np.random.Generator,
    val_fraction: float = 0.2,
) -> list[Fold]:
    """Within-subject stratified cross-validation folds.

    Test partitions come from stratified K-fold over the labels; the
    validation partition is a stratified slice of the remaining examples
    (at least one example per class).  Every index lands in exactly one
    partition per fold, and each partition's class proportions match the
    overall proportions to within one example per class.

    Raises:
        SplitError: a class has fewer examples than n_folds, or the split
            would leave an empty partition.
    """
    from sklearn.model_selection import StratifiedKFold

    if n_folds < 2:
        raise SplitError(f"need at least 2 folds, got {n_folds}")
    if not 0.0 < val_fraction < 1.0:
        raise SplitError(f"val fraction must be in (0, 1), got {val_fraction}")
    y = np.asarray(labels, dtype=np.int64)
    classes, counts = np.unique(y, return_counts=True)
    for cls, count in zip(classes, counts):
        if count < n_folds:
            raise SplitError(
                f"class {cls} has {count} examples, fewer than {n_folds} folds"
            )
    splitter = StratifiedKFold(
        n_splits=n_folds, shuffle=True, random_state=int(rng.integers(2**31 - 1))
    )
    folds: list[Fold] = []
    for rest, test in splitter.split(np.zeros_like(y), y):
        val: list[int] = []
        train: list[int] = []
        for cls in classes:
            pool = [int(i) for i in rest if y[i] == cls]
            pool = [pool[j] for j in rng.permutation(len(pool))]
            k = max(1, round(val_fraction * len(pool)))
            if k >= len(pool):
                raise SplitError(
                    f"class {cls}: validation slice would exhaust training examples"
                )
            val.extend(pool[:k])
            train.extend(pool[k:])
        folds.append(
            Fold(
                train_indices=tuple(sorted(train)),
                val_indices=tuple(sorted(val)),
                test_indices=tuple(sorted(int(i) for i in test)),
            )
        )
    return folds


@dataclass(frozen=True)
class TaskSpec:
    """Synthetic classification task layered onto background activity.

    kind "oscillation": each class adds a sinusoid at its own frequency
    (class_frequencies[label]) at a random focal electrode.
    kind "transient": each class adds a Gaussian-windowed deflection whose
    amplitude scales with (1 + label); frequency content is shared.
    """

    kind: str = "oscillation"
    n_classes: int = 2
    epochs_per_class: int = 40
    epoch_length_s: float = 4.1875
    class_frequencies: tuple[float, ...] = (10.0, 20.0)
    transient_center_s: float = 0.3
    transient_width_s: float = 0.05
    signal_scale: float = 2.0
    paradigm: str = "synthetic"

    def __post_init__(self):
        if self.kind not in ("oscillation", "transient"):
            raise ConfigError(f"unknown task kind {self.kind!r}")
        if self.n_classes < 2:
            raise ConfigError("task needs at least 2 classes")
        if self.kind == "oscillation" and len(self.class_frequencies) < self.n_classes:
            raise ConfigError("need one frequency per class")
        if self.epochs_per_class < 1:
            raise ConfigError("need at least one epoch per class")


@dataclass(frozen=True)
class SynthesisSpec:
    """Corpus-level synthesis parameters.

    Background activity per subject: band-limited sources scattered near the
    electrodes, mixed into channels with exponential distance decay
    (length = mixing_scale * head size), unit-variance normalised, plus white
    channel noise at noise_scale relative standard deviation.
    """

    montage: Montage
    n_subjects: int = 2
    duration_s: float = 120.0
    sampling_rate: float = DEFAULT_RATE
    n_sources: int = 12
    mixing_scale: float = 0.25
    noise_scale: float = 0.3
    source_band: tuple[float, float] = (2.0, 30.0)
    task: TaskSpec | None = None

    def __post_init__(self):
        if self.n_subjects < 1:
            raise ConfigError("need at least one subject")
        if self.duration_s <= 0 or self.sampling_rate <= 0:
            raise ConfigError("duration and sampling rate must be positive")
        if self.n_sources < 1:
            raise ConfigError("need at least one source")
        low, high = self.source_band
        if not 0 < low < high < self.sampling_rate / 2:
            raise ConfigError(f"source band {self.source_band} invalid at "
                              f"{self.sampling_rate} Hz")


@dataclass
class SubjectData:
    """Everything synthesised for one subject."""

    subject: str
    continuous: Recording
    epochs: list[Example] = field(default_factory=list)


def _band_limited_sources(n_sources, n_samples, band, rate, rng):
    sos = signal.butter(4, list(band), btype="bandpass", fs=rate, output="sos")
    raw = rng.standard_normal((n_sources, n_samples))
    out = signal.sosfiltfilt(sos, raw, axis=1)
    return out / (out.std(axis=1, keepdims=True) + 1e-12)


def _mixing_weights(montage, source_positions, mixing_scale):
    hs = head_size(montage)
    diff = montage.positions[:, None, :] - source_positions[None, :, :]
    dist = np.linalg.norm(diff, axis=-1)
    return np.exp(-dist / (mixing_scale * hs))


def _source_positions(montage, n_sources, rng):
    hs = head_size(montage)
    anchors = rng.integers(montage.n_channels, size=n_sources)
    jitter = rng.normal(scale=0.05 * hs, size=(n_sources, 3))
    return montage.positions[anchors] + jitter


def _background(montage, n_samples, spec, rng):
    sources = _band_limited_sources(
        spec.n_sources, n_samples, spec.source_band, spec.sampling_rate, rng
    )
    weights = _mixing_weights(
        montage, _source_positions(montage, spec.n_sources, rng), spec.mixing_scale
    )
    x = weights @ sources
    x = x / (x.std(axis=1, keepdims=True) + 1e-12)
    return x + spec.noise_scale * rng.standard_normal(x.shape)


def _task_epoch(montage, spec, task, label, rng):
    n = round(task.epoch_length_s * spec.sampling_rate)
    x = _background(montage, n, spec, rng)
    anchor = int(rng.integers(montage.n_channels))
    dist = np.linalg.norm(montage.positions - montage.positions[anchor], axis=1)
    profile = np.exp(-dist / (spec.mixing_scale * head_size(montage)))
    time = np.arange(n) / spec.sampling_rate
    if task.kind == "oscillation":
        freq = task.class_frequencies[label]
        wave = np.sin(2 * np.pi * freq * time + rng.uniform(0, 2 * np.pi))
        x = x + task.signal_scale * profile[:, None] * wave[None, :]
    else:
        bump = np.exp(
            -0.5 * ((time - task.transient_center_s) / task.transient_width_s) ** 2
        )
        amp = task.signal_scale * (1.0 + label)
        x = x + amp * profile[:, None] * bump[None, :]
    return Example(samples=x, label=label)


def synthesize(spec: SynthesisSpec, seed: int) -> list[SubjectData]:
    """Generate a deterministic synthetic corpus.

    Each subject draws from an independent seed stream derived from
    (seed, "subject", index), so per-subject output is stable regardless of
    how many subjects are requested or in which order they are built.
    """
    out: list[SubjectData] = []
    n_cont = round(spec.duration_s * spec.sampling_rate)
    for s in range(spec.n_subjects):
        subject = f"s{s:02d}"
        rng_cont = np.random.default_rng(derive_seed(seed, "subject", s, "continuous"))
        continuous = Recording(
            samples=_background(spec.montage, n_cont, spec, rng_cont),
            sampling_rate=spec.sampling_rate,
            subject=subject,
        )
        epochs: list[Example] = []
        if spec.task is not None:
            rng_task = np.random.default_rng(derive_seed(seed, "subject", s, "task"))
            labels = np.repeat(np.arange(spec.task.n_classes), spec.task.epochs_per_class)
            labels = labels[rng_task.permutation(labels.size)]
            epochs = [
                _task_epoch(spec.montage, spec, spec.task, int(lbl), rng_task)
                for lbl in labels
            ]
        out.append(SubjectData(subject=subject, continuous=continuous, epochs=epochs))
    return out


# ---------------------------------------------------------------------------
# Containers: directory with montage.txt, meta.txt, samples.bin [, labels.txt]
# ---------------------------------------------------------------------------

_SAMPLE_DTYPE = np.dtype("<f4")


def _write_meta(path: Path, meta: dict) -> None:
    lines = [f"{k}: {v}" for k, v in meta.items()]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _read_meta(path: Path) -> dict:
    if not path.exists():
        raise DataError(f"container meta not found: {path}")
    meta = {}
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = raw.strip()
        if not line:
            continue
        if ":" not in line:
            raise DataError(f"{path}:{lineno}: expected `key: value`, got {raw!r}")
        key, _, value = line.partition(":")
        meta[key.strip()] = value.strip()
    return meta


def save_continuous(dir_path: str | Path, recording: Recording, montage: Montage) -> None:
    """Write a continuous recording container."""
    if recording.n_channels != montage.n_channels:
        raise DataError(
            f"recording has {recording.n_channels} channels, montage has "
            f"{montage.n_channels}"
        )
    path = Path(dir_path)
    path.mkdir(parents=True, exist_ok=True)
    save_montage(montage, path / "montage.txt")
    _write_meta(
        path / "meta.txt",
        {
            "kind": "continuous",
            "subject": recording.subject,
            "sampling_rate": repr(float(recording.sampling_rate)),
            "n_channels": recording.n_channels,
            "n_samples": recording.n_samples,
            "dtype": "float32-le",
        },
    )
    blob = np.ascontiguousarray(recording.samples, dtype=_SAMPLE_DTYPE)
    (path / "samples.bin").write_bytes(blob.tobytes())


def load_continuous(dir_path: str | Path) -> tuple[Recording, Montage]:
    """Load a continuous recording container."""
    path = Path(dir_path)
    meta = _read_meta(path / "meta.txt")
    if meta.get("kind") != "continuous":
        raise DataError(f"{path}: expected a continuous container, got {meta.get('kind')!r}")
    montage = load_montage(path / "montage.txt")
    C, T = int(meta["n_channels"]), int(meta["n_samples"])
    blob = (path / "samples.bin").read_bytes()
    expected = C * T * _SAMPLE_DTYPE.itemsize
    if len(blob) != expected:
        raise DataError(f"{path}: samples.bin is {len(blob)} bytes, expected {expected}")
    samples = np.frombuffer(blob, dtype=_SAMPLE_DTYPE).reshape(C, T).astype(np.float32)
    if C != montage.n_channels:
        raise DataError(f"{path}: channel count {C} does not match montage")
    rec = Recording(
        samples=samples, sampling_rate=float(meta["sampling_rate"]),
        subject=meta.get("subject", ""),
    )
    return rec, montage


def save_epochs(
    dir_path: str | Path,
    examples: list[Example],
    montage: Montage,
    subject: str,
    paradigm: str,
) -> None:
    """Write a labelled epoch container."""
    if not examples:
        raise DataError("cannot save an empty epoch set")
    lengths = {ex.n_samples for ex in examples}
    if len(lengths) != 1:
        raise DataError(f"epochs have mixed lengths {sorted(lengths)}")
    if any(ex.label is None for ex in examples):
        raise DataError("epoch containers need a label on every example")
    if any(ex.samples.shape[0] != montage.n_channels for ex in examples):
        raise DataError("epoch channel count does not match montage")
    path = Path(dir_path)
    path.mkdir(parents=True, exist_ok=True)
    save_montage(montage, path / "montage.txt")
    _write_meta(
        path / "meta.txt",
        {
            "kind": "epochs",
            "subject": subject,
            "paradigm": paradigm,
            "sampling_rate": repr(float(DEFAULT_RATE)),
            "n_channels": montage.n_channels,
            "n_epochs": len(examples),
            "epoch_samples": lengths.pop(),
            "dtype": "float32-le",
        },
    )
    stack = np.stack([ex.samples for ex in examples]).astype(_SAMPLE_DTYPE)
    (path / "samples.bin").write_bytes(np.ascontiguousarray(stack).tobytes())
    (path / "labels.txt").write_text(
        "\n".join(str(int(ex.label)) for ex in examples) + "\n", encoding="utf-8"
    )


@dataclass
class EpochSet:
    """A labelled epoch container in memory."""

    subject: str
    paradigm: str
    examples: list[Example]


def load_epochs(dir_path: str | Path) -> tuple[EpochSet, Montage]:
    """Load a labelled epoch container."""
    path = Path(dir_path)
    meta = _read_meta(path / "meta.txt")
    if meta.get("kind") != "epochs":
        raise DataError(f"{path}: expected an epochs container, got {meta.get('kind')!r}")
    montage = load_montage(path / "montage.txt")
    N = int(meta["n_epochs"])
    C = int(meta["n_channels"])
    T = int(meta["epoch_samples"])
    blob = (path / "samples.bin").read_bytes()
    expected = N * C * T * _SAMPLE_DTYPE.itemsize
    if len(blob) != expected:
        raise DataError(f"{path}: samples.bin is {len(blob)} bytes, expected {expected}")
    stack = np.frombuffer(blob, dtype=_SAMPLE_DTYPE).reshape(N, C, T).astype(np.float32)
    labels_path = path / "labels.txt"
    if not labels_path.exists():
        raise DataError(f"{path}: labels.txt missing")
    labels = [int(v) for v in labels_path.read_text().split()]
    if len(labels) != N:
        raise DataError(f"{path}: {len(labels)} labels for {N} epochs")
    examples = [Example(samples=stack[i], label=labels[i]) for i in range(N)]
    return (
        EpochSet(
            subject=meta.get("subject", ""),
            paradigm=meta.get("paradigm", ""),
            examples=examples,
        ),
        montage,
    )


def save_corpus(
    root: str | Path,
    montage: Montage,
    subjects: list[SubjectData],
    paradigm: str = "synthetic",
) -> None:
    """Write one container tree: <root>/<subject>/{continuous,epochs}."""
    root = Path(root)
    for sub in subjects:
        save_continuous(root / sub.subject / "continuous", sub.continuous, montage)
        if sub.epochs:
            save_epochs(
                root / sub.subject / "epochs", sub.epochs, montage, sub.subject,
                paradigm=paradigm,
            )


def list_subjects(root: str | Path) -> list[str]:
    """Sorted subject ids found under a corpus root."""
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"corpus root not found: {root}")
    return sorted(p.name for p in root.iterdir() if p.is_dir())
