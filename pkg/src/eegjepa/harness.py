"""Pipeline grid evaluation: enumeration, resumable execution, ranking.

A pipeline is (pre-training id, architecture, fine-tuning strategy), where
the pre-training id encodes example length and mask fraction (e.g.
"16s-40%") or "none" for the from-scratch baseline (which only exists with
full fine-tuning).  The harness runs every pipeline over every dataset,
subject, and fold, appends one CSV row per fold in a fixed order (so an
interrupted run resumes to a byte-identical file), and ranks pipelines
within each fold.
"""

from __future__ import annotations

import csv
import io
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .data import DEFAULT_RATE, Example
from .errors import AggregationError, ConfigError, DataError, StateError
from .finetune import (
    ARCHITECTURES,
    STRATEGIES,
    DownstreamSpec,
    build_downstream,
    finetune,
    metric_for_paradigm,
)
from .montage import Montage
from .nets import ModelConfig, load_checkpoint, token_count
from .seeding import derive_seed

PRETRAIN_NONE = "none"


def pretrain_id(example_length_s: float, mask_fraction: float) -> str:
    """Human-readable pre-training id, e.g. (16.1875 s, 0.4) -> "16s-40%".

    The nominal seconds equal the token count of the example length, which
    matches the whole-second naming convention for the supported lengths.
    """
    windows = token_count(round(example_length_s * DEFAULT_RATE))
    return f"{windows}s-{round(mask_fraction * 100)}%"


def slug(name: str) -> str:
    """Filesystem-safe form of a pipeline or pre-training id."""
    return name.replace("%", "pct").replace("/", "-")


@dataclass(frozen=True)
class PipelineSpec:
    """One evaluated pipeline."""

    pretrain: str  # pre-training id or "none"
    architecture: str
    strategy: str

    def __post_init__(self):
        if self.architecture not in ARCHITECTURES:
            raise ConfigError(f"unknown architecture {self.architecture!r}")
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown strategy {self.strategy!r}")
        if self.pretrain == PRETRAIN_NONE and self.strategy != "full":
            raise ConfigError(
                "the from-scratch baseline exists only with full fine-tuning"
            )

    @property
    def name(self) -> str:
        return f"{self.pretrain}-{self.strategy}-{self.architecture.replace('_', '-')}"


@dataclass(frozen=True)
class GridConfig:
    """Cross-product definition of the evaluated grid."""

    pretrain_lengths_s: tuple[float, ...] = (1.1875, 4.1875, 16.1875)
    mask_fractions: tuple[float, ...] = (0.4, 0.6, 0.8)
    architectures: tuple[str, ...] = ARCHITECTURES
    strategies: tuple[str, ...] = STRATEGIES
    include_baseline: bool = True

    def __post_init__(self):
        if not self.architectures or not self.strategies:
            raise ConfigError("grid needs at least one architecture and strategy")
        if bool(self.pretrain_lengths_s) != bool(self.mask_fractions):
            raise ConfigError("lengths and fractions must both be given or both empty")


def enumerate_pipelines(grid: GridConfig) -> list[PipelineSpec]:
    """All pipelines of the grid, in deterministic order, names unique.

    The default grid yields 3 lengths x 3 fractions x 3 architectures x
    2 strategies + 3 baselines = 57 pipelines.
    """
    out: list[PipelineSpec] = []
    for length in grid.pretrain_lengths_s:
        for fraction in grid.mask_fractions:
            pid = pretrain_id(length, fraction)
            for arch in grid.architectures:
                for strategy in grid.strategies:
                    out.append(PipelineSpec(pid, arch, strategy))
    if grid.include_baseline:
        for arch in grid.architectures:
            if "full" in grid.strategies:
                out.append(PipelineSpec(PRETRAIN_NONE, arch, "full"))
    names = [p.name for p in out]
    if len(set(names)) != len(names):
        raise ConfigError("grid produces duplicate pipeline names")
    return out


@dataclass
class DatasetHandle:
    """One labelled dataset: epochs per subject plus its montage."""

    name: str
    paradigm: str
    montage: Montage
    epochs_by_subject: dict[str, list[Example]]
    n_folds: int = 5

    def subjects(self) -> list[str]:
        return sorted(self.epochs_by_subject)


@dataclass(frozen=True)
class GridCell:
    """One unit of work: a pipeline on one subject's fold of one dataset."""

    pipeline: PipelineSpec
    dataset: str
    subject: str
    fold: int


def enumerate_cells(
    pipelines: list[PipelineSpec], datasets: list[DatasetHandle]
) -> list[GridCell]:
    """All grid cells in canonical execution order."""
    cells = []
    for pipeline in pipelines:
        for ds in datasets:
            for subject in ds.subjects():
                for fold in range(ds.n_folds):
                    cells.append(GridCell(pipeline, ds.name, subject, fold))
    return cells


@dataclass(frozen=True)
class ResultRow:
    """One scored fold."""

    pipeline: str
    dataset: str
    subject: str
    fold: int
    metric: str
    score: float
    epochs: int

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise DataError(f"score {self.score} outside [0, 1]")
        if self.fold < 0 or self.epochs < 0:
            raise DataError("fold and epochs must be non-negative")

    def cell_key(self) -> tuple[str, str, str, int]:
        return (self.pipeline, self.dataset, self.subject, self.fold)


_SCHEMA_LINE = "# results-schema=1"
_HEADER = ["pipeline", "dataset", "subject", "fold", "metric", "score", "epochs"]


def _format_row(row: ResultRow) -> str:
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerow(
        [
            row.pipeline,
            row.dataset,
            row.subject,
            str(row.fold),
            row.metric,
            f"{row.score:.6f}",
            str(row.epochs),
        ]
    )
    return buf.getvalue()


def _parse_row(line: str) -> ResultRow:
    fields = next(csv.reader([line]))
    if len(fields) != len(_HEADER):
        raise DataError(f"expected {len(_HEADER)} fields, got {len(fields)}")
    return ResultRow(
        pipeline=fields[0],
        dataset=fields[1],
        subject=fields[2],
        fold=int(fields[3]),
        metric=fields[4],
        score=float(fields[5]),
        epochs=int(fields[6]),
    )


def read_results(path: str | Path) -> tuple[list[ResultRow], int]:
    """Parse a results file.

    Returns (rows, clean_byte_length).  A malformed *final* line (from an
    interrupted write) is dropped and excluded from the clean length so a
    resume can truncate it away; malformed interior lines are corruption.
    """
    path = Path(path)
    raw = path.read_bytes().decode("utf-8")
    lines = raw.split("\n")
    if not lines or lines[0] != _SCHEMA_LINE:
        raise DataError(f"{path}: missing results schema header")
    if len(lines) < 2 or lines[1] != ",".join(_HEADER):
        raise DataError(f"{path}: missing column header")
    rows: list[ResultRow] = []
    clean = len(_SCHEMA_LINE) + 1 + len(lines[1]) + 1
    for i, line in enumerate(lines[2:], start=2):
        is_last = i == len(lines) - 1
        if line == "":
            if is_last:
                continue  # artifact of the trailing newline
            raise DataError(f"{path}:{i + 1}: blank row")
        try:
            rows.append(_parse_row(line))
        except (DataError, ValueError, StopIteration) as exc:
            if is_last:
                break  # interrupted write; truncate on resume
            raise DataError(f"{path}:{i + 1}: corrupt row: {exc}") from exc
        clean += len(line) + 1
    return rows, clean


def ensure_checkpoints(
    pipelines: list[PipelineSpec], checkpoints: dict[str, Path]
) -> None:
    """Verify a checkpoint path exists for every referenced pre-training id.

    Raises:
        ConfigError: an id is missing from the mapping or its file is absent.
    """
    for pipeline in pipelines:
        if pipeline.pretrain == PRETRAIN_NONE:
            continue
        path = checkpoints.get(pipeline.pretrain)
        if path is None:
            raise ConfigError(
                f"no checkpoint configured for pre-training id {pipeline.pretrain!r}"
            )
        if not Path(path).exists():
            raise ConfigError(
                f"checkpoint for {pipeline.pretrain!r} not found: {path}"
            )


def run_grid(
    cells: list[GridCell],
    runner,
    results_path: str | Path,
    jobs: int = 1,
) -> list[ResultRow]:
    """Execute missing cells and append rows in canonical order.

    Completed work is detected from the results file, which must be a prefix
    of `cells` (the canonical order); rows are committed in that same order
    even when jobs > 1, so a resumed run ends byte-identical to an
    uninterrupted one.

    Args:
        cells: Canonical cell list from enumerate_cells.
        runner: Callable GridCell -> ResultRow (picklable if jobs > 1).
        results_path: CSV to create or extend.
        jobs: Worker processes; 1 runs in-process.

    Raises:
        StateError: existing rows do not form a prefix of the cell list.
    """
    results_path = Path(results_path)
    done: list[ResultRow] = []
    if results_path.exists():
        done, clean = read_results(results_path)
        if len(done) > len(cells):
            raise StateError(
                f"results file has {len(done)} rows for {len(cells)} cells"
            )
        for row, cell in zip(done, cells):
            if row.cell_key() != (
                cell.pipeline.name, cell.dataset, cell.subject, cell.fold,
            ):
                raise StateError(
                    f"results row {row.cell_key()} does not match canonical "
                    f"order; refusing to resume"
                )
        with open(results_path, "r+", encoding="utf-8") as handle:
            handle.truncate(clean)
        handle = open(results_path, "a", encoding="utf-8")
    else:
        results_path.parent.mkdir(parents=True, exist_ok=True)
        handle = open(results_path, "w", encoding="utf-8")
        handle.write(_SCHEMA_LINE + "\n")
        handle.write(",".join(_HEADER) + "\n")
        handle.flush()

    pending = cells[len(done):]
    rows = list(done)
    try:
        if jobs <= 1:
            for cell in pending:
                row = runner(cell)
                _check_row_matches(row, cell)
                handle.write(_format_row(row))
                handle.flush()
                rows.append(row)
        else:
            with ProcessPoolExecutor(max_workers=jobs) as pool:
                futures = [pool.submit(runner, cell) for cell in pending]
                for cell, future in zip(pending, futures):
                    row = future.result()
                    _check_row_matches(row, cell)
                    handle.write(_format_row(row))
                    handle.flush()
                    rows.append(row)
    finally:
        handle.close()
    return rows


def _check_row_matches(row: ResultRow, cell: GridCell) -> None:
    if row.cell_key() != (cell.pipeline.name, cell.dataset, cell.subject, cell.fold):
        raise StateError(
            f"runner returned row {row.cell_key()} for cell "
            f"({cell.pipeline.name}, {cell.dataset}, {cell.subject}, {cell.fold})"
        )


# ---------------------------------------------------------------------------
# Production fold runner
# ---------------------------------------------------------------------------

_CHECKPOINT_CACHE: dict[str, object] = {}  # keyed by path, unique per run


@dataclass
class FoldRunner:
    """Executes one grid cell: build the model, fine-tune, score.

    Picklable so it can cross process boundaries; loaded checkpoints are
    cached per process, fold plans per instance.
    """

    datasets: dict[str, DatasetHandle]
    checkpoints: dict[str, str]  # pretrain id -> checkpoint path
    root_seed: int
    virtual_channels: int = 4
    warmup_epochs: int = 10
    patience: int = 50
    max_epochs: int = 500
    batch_size: int = 64
    lr_new: float = 1e-3
    lr_pretrained: float = 1e-4
    val_fraction: float = 0.2
    scratch_model: dict = field(default_factory=dict)
    _fold_cache: dict = field(default_factory=dict, repr=False)

    def _folds(self, handle: DatasetHandle, subject: str):
        from .data import stratified_folds

        key = (handle.name, subject)
        if key not in self._fold_cache:
            labels = [ex.label for ex in handle.epochs_by_subject[subject]]
            rng = np.random.default_rng(
                derive_seed(self.root_seed, "folds", handle.name, subject)
            )
            self._fold_cache[key] = stratified_folds(
                labels, handle.n_folds, rng, self.val_fraction
            )
        return self._fold_cache[key]

    def _checkpoint(self, pid: str):
        path = str(self.checkpoints[pid])
        if path not in _CHECKPOINT_CACHE:
            _CHECKPOINT_CACHE[path] = load_checkpoint(path)
        return _CHECKPOINT_CACHE[path]

    def __call__(self, cell: GridCell) -> ResultRow:
        handle = self.datasets[cell.dataset]
        epochs = handle.epochs_by_subject[cell.subject]
        fold = self._folds(handle, cell.subject)[cell.fold]
        checkpoint = (
            None
            if cell.pipeline.pretrain == PRETRAIN_NONE
            else self._checkpoint(cell.pipeline.pretrain)
        )
        n_classes = len({ex.label for ex in epochs})
        seed = derive_seed(
            self.root_seed, "cell", cell.pipeline.name, cell.dataset,
            cell.subject, cell.fold,
        )
        spec = DownstreamSpec(
            architecture=cell.pipeline.architecture,
            strategy=cell.pipeline.strategy,
            virtual_channels=self.virtual_channels,
            n_classes=n_classes,
            warmup_epochs=self.warmup_epochs,
            patience=self.patience,
            max_epochs=self.max_epochs,
            batch_size=self.batch_size,
            lr_new=self.lr_new,
            lr_pretrained=self.lr_pretrained,
            seed=seed,
            metric=metric_for_paradigm(handle.paradigm),
            model=ModelConfig.from_dict(self.scratch_model),
        )
        torch.manual_seed(seed)
        model = build_downstream(
            checkpoint, spec, handle.montage, epochs[0].n_samples
        )
        result = finetune(
            model,
            spec,
            [epochs[i] for i in fold.train_indices],
            [epochs[i] for i in fold.val_indices],
            [epochs[i] for i in fold.test_indices],
        )
        return ResultRow(
            pipeline=cell.pipeline.name,
            dataset=cell.dataset,
            subject=cell.subject,
            fold=cell.fold,
            metric=result.metric,
            score=result.score,
            epochs=result.epochs_run,
        )


# ---------------------------------------------------------------------------
# Ranking
# ---------------------------------------------------------------------------


@dataclass
class RankingTable:
    """Within-fold rankings aggregated across the grid."""

    pipelines: tuple[str, ...]
    fold_keys: tuple[tuple[str, str, int], ...]
    ranks: np.ndarray  # (n_folds, n_pipelines), 1 = best
    average_rank: dict[str, float]
    rank_histogram: dict[str, dict[int, int]]
    dataset_mean: dict[tuple[str, str], float]  # (dataset, pipeline) -> mean
    dataset_std: dict[tuple[str, str], float]


def rank_pipelines(rows: list[ResultRow]) -> RankingTable:
    """Rank pipelines within every (dataset, subject, fold).

    Rank 1 is the highest score; score ties break lexicographically by
    pipeline name, so ranks within a fold are always a permutation of
    1..n and sum to n(n+1)/2.

    Raises:
        AggregationError: empty input, duplicate rows, or any fold missing
            any pipeline (the gaps are listed).
    """
    if not rows:
        raise AggregationError("no rows to rank")
    pipelines = tuple(sorted({r.pipeline for r in rows}))
    by_fold: dict[tuple[str, str, int], dict[str, ResultRow]] = {}
    for row in rows:
        key = (row.dataset, row.subject, row.fold)
        bucket = by_fold.setdefault(key, {})
        if row.pipeline in bucket:
            raise AggregationError(
                f"duplicate result for pipeline {row.pipeline} in fold {key}"
            )
        bucket[row.pipeline] = row

    missing = []
    for key in sorted(by_fold):
        for pipeline in pipelines:
            if pipeline not in by_fold[key]:
                missing.append((pipeline, key))
    if missing:
        listing = "; ".join(f"{p} @ {k}" for p, k in missing[:10])
        raise AggregationError(
            f"{len(missing)} (pipeline, fold) results missing: {listing}"
        )

    fold_keys = tuple(sorted(by_fold))
    n = len(pipelines)
    ranks = np.zeros((len(fold_keys), n), dtype=np.int64)
    col = {p: i for i, p in enumerate(pipelines)}
    for fi, key in enumerate(fold_keys):
        bucket = by_fold[key]
        ordered = sorted(pipelines, key=lambda p: (-bucket[p].score, p))
        for position, pipeline in enumerate(ordered, start=1):
            ranks[fi, col[pipeline]] = position

    average_rank = {p: float(ranks[:, col[p]].mean()) for p in pipelines}
    rank_histogram = {
        p: {
            int(r): int((ranks[:, col[p]] == r).sum())
            for r in range(1, n + 1)
            if (ranks[:, col[p]] == r).any()
        }
        for p in pipelines
    }
    dataset_mean: dict[tuple[str, str], float] = {}
    dataset_std: dict[tuple[str, str], float] = {}
    datasets = sorted({r.dataset for r in rows})
    for ds in datasets:
        for p in pipelines:
            scores = np.array(
                [r.score for r in rows if r.dataset == ds and r.pipeline == p]
            )
            dataset_mean[(ds, p)] = float(scores.mean())
            dataset_std[(ds, p)] = float(scores.std())
    return RankingTable(
        pipelines=pipelines,
        fold_keys=fold_keys,
        ranks=ranks,
        average_rank=average_rank,
        rank_histogram=rank_histogram,
        dataset_mean=dataset_mean,
        dataset_std=dataset_std,
    )


def write_ranking_report(table: RankingTable, out_dir: str | Path) -> None:
    """Write ranking.csv, rank_histogram.csv, and dataset_scores.csv."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "ranking.csv", "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["pipeline", "average_rank", "n_folds"])
        for p in sorted(table.pipelines, key=lambda p: table.average_rank[p]):
            w.writerow([p, f"{table.average_rank[p]:.4f}", len(table.fold_keys)])
    with open(out / "rank_histogram.csv", "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["pipeline", "rank", "count"])
        for p in table.pipelines:
            for r, c in sorted(table.rank_histogram[p].items()):
                w.writerow([p, r, c])
    with open(out / "dataset_scores.csv", "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["dataset", "pipeline", "mean_score", "std_score"])
        for (ds, p), mean in sorted(table.dataset_mean.items()):
            w.writerow([ds, p, f"{mean:.6f}", f"{table.dataset_std[(ds, p)]:.6f}"])
