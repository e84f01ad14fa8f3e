"""Command-line surface for the toolkit.

Subcommands: synth (write a synthetic corpus), pretrain (self-supervised
pre-training), finetune (one pipeline on one dataset's folds), grid
(resumable pipeline-grid execution), report (ranking tables from results).

Configs are flat key/value files with section headers, parsed without
interpolation so literal "%" survives.  Every run writes a manifest before
computation starts; exit codes are 0 success, 2 input/config error,
3 numerical failure.
"""

from __future__ import annotations

import argparse
import configparser
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .data import (
    SynthesisSpec,
    TaskSpec,
    list_subjects,
    load_continuous,
    load_epochs,
    save_corpus,
    slice_continuous,
    split_subjects,
    synthesize,
)
from .errors import ConfigError, DataError, NonFiniteLossError, ToolkitError
from .finetune import ARCHITECTURES, STRATEGIES
from .harness import (
    DatasetHandle,
    FoldRunner,
    GridConfig,
    PipelineSpec,
    ensure_checkpoints,
    enumerate_cells,
    enumerate_pipelines,
    rank_pipelines,
    read_results,
    run_grid,
    write_ranking_report,
)
from .montage import load_montage, spherical_cap_montage
from .nets import ModelConfig
from .pretrain import PretrainConfig, run_pretraining
from .seeding import derive_seed

_REQUIRED = object()
_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


@dataclass
class Section:
    """One config section with typed getters and unknown-key detection."""

    name: str
    values: dict[str, str]

    def __post_init__(self):
        self._seen: set[str] = set()

    def _raw(self, key: str, default):
        self._seen.add(key)
        if key in self.values:
            return self.values[key]
        if default is _REQUIRED:
            raise ConfigError(f"[{self.name}] is missing required key {key!r}")
        return None

    def get(self, key: str, default=_REQUIRED) -> str:
        raw = self._raw(key, default)
        return default if raw is None else raw.strip()

    def get_int(self, key: str, default=_REQUIRED) -> int:
        raw = self._raw(key, default)
        if raw is None:
            return default
        try:
            return int(raw)
        except ValueError as exc:
            raise ConfigError(f"[{self.name}] {key} = {raw!r} is not an integer") from exc

    def get_float(self, key: str, default=_REQUIRED) -> float:
        raw = self._raw(key, default)
        if raw is None:
            return default
        try:
            return float(raw)
        except ValueError as exc:
            raise ConfigError(f"[{self.name}] {key} = {raw!r} is not a number") from exc

    def get_bool(self, key: str, default=_REQUIRED) -> bool:
        raw = self._raw(key, default)
        if raw is None:
            return default
        low = raw.strip().lower()
        if low in _TRUE:
            return True
        if low in _FALSE:
            return False
        raise ConfigError(f"[{self.name}] {key} = {raw!r} is not a boolean")

    def get_floats(self, key: str, default=_REQUIRED) -> tuple[float, ...]:
        raw = self._raw(key, default)
        if raw is None:
            return default
        try:
            return tuple(float(v) for v in raw.replace(",", " ").split())
        except ValueError as exc:
            raise ConfigError(f"[{self.name}] {key} = {raw!r} is not a number list") from exc

    def get_names(self, key: str, default=_REQUIRED) -> tuple[str, ...]:
        raw = self._raw(key, default)
        if raw is None:
            return default
        return tuple(v for v in raw.replace(",", " ").split())

    def reject_unknown_keys(self) -> None:
        unknown = sorted(set(self.values) - self._seen)
        if unknown:
            raise ConfigError(
                f"[{self.name}] has unknown key(s): {', '.join(unknown)}"
            )


class ConfigFile:
    """A parsed config file; sections are fetched by name."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        if not self.path.is_file():
            raise ConfigError(f"config file not found: {self.path}")
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str  # keep key case and "%" exactly
        try:
            parser.read(self.path, encoding="utf-8")
        except configparser.Error as exc:
            raise ConfigError(f"{self.path}: {exc}") from exc
        self._sections = {name: dict(parser[name]) for name in parser.sections()}

    def section(self, name: str) -> Section:
        if name not in self._sections:
            raise ConfigError(f"{self.path} has no [{name}] section")
        return Section(name, self._sections[name])

    def optional_section(self, name: str) -> Section:
        return Section(name, self._sections.get(name, {}))

    def has_section(self, name: str) -> bool:
        return name in self._sections


# ---------------------------------------------------------------------------
# Run manifests
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RunManifest:
    """Everything needed to reproduce one CLI run."""

    command: str
    config_path: str
    snapshot: dict[str, dict[str, str]]  # resolved section -> key -> value
    seed: int
    out_dir: str
    version: str


def write_manifest(manifest: RunManifest, out_dir: Path) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    parser["manifest"] = {
        "command": manifest.command,
        "config_path": manifest.config_path,
        "seed": str(manifest.seed),
        "out_dir": manifest.out_dir,
        "version": manifest.version,
    }
    for section, values in manifest.snapshot.items():
        parser[f"config:{section}"] = {k: str(v) for k, v in values.items()}
    path = out_dir / "manifest.txt"
    with open(path, "w", encoding="utf-8") as handle:
        parser.write(handle)
    return path


def read_manifest(path: str | Path) -> RunManifest:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    if not parser.read(path, encoding="utf-8") or "manifest" not in parser:
        raise DataError(f"not a run manifest: {path}")
    head = parser["manifest"]
    snapshot = {
        name[len("config:"):]: dict(parser[name])
        for name in parser.sections()
        if name.startswith("config:")
    }
    return RunManifest(
        command=head["command"],
        config_path=head["config_path"],
        snapshot=snapshot,
        seed=int(head["seed"]),
        out_dir=head["out_dir"],
        version=head["version"],
    )


def _flatten(d: dict, prefix: str = "") -> dict[str, str]:
    out: dict[str, str] = {}
    for key, value in d.items():
        name = f"{prefix}{key}"
        if isinstance(value, dict):
            out.update(_flatten(value, f"{name}."))
        else:
            out[name] = str(value)
    return out


# ---------------------------------------------------------------------------
# Shared config builders
# ---------------------------------------------------------------------------


def _resolve_seed(args, section: Section, default: int = 0) -> int:
    config_seed = section.get_int("seed", default)
    return args.seed if args.seed is not None else config_seed


def _model_config(section: Section) -> ModelConfig:
    keys = {
        "model.token_dim": "token_dim",
        "model.temporal_dims": "temporal_dims",
        "model.context_depth": "context_depth",
        "model.predictor_depth": "predictor_depth",
        "model.heads": "heads",
        "model.ff_dim": "ff_dim",
    }
    overrides = {}
    for config_key, field_name in keys.items():
        value = section.get_int(config_key, None)
        if value is not None:
            overrides[field_name] = value
    return ModelConfig.from_dict(overrides)


def _load_dataset(name: str, root: str | Path, n_folds: int) -> DatasetHandle:
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"dataset {name!r} not found: {root}")
    epochs_by_subject = {}
    montage = None
    paradigms = set()
    for subject in list_subjects(root):
        epochs_dir = root / subject / "epochs"
        if not epochs_dir.is_dir():
            continue
        epoch_set, subject_montage = load_epochs(epochs_dir)
        epochs_by_subject[subject] = epoch_set.examples
        paradigms.add(epoch_set.paradigm)
        montage = subject_montage
    if not epochs_by_subject:
        raise DataError(f"dataset {name!r} has no labelled epochs under {root}")
    if len(paradigms) != 1:
        raise DataError(f"dataset {name!r} mixes paradigms {sorted(paradigms)}")
    return DatasetHandle(
        name=name,
        paradigm=paradigms.pop(),
        montage=montage,
        epochs_by_subject=epochs_by_subject,
        n_folds=n_folds,
    )


def _runner_settings(section: Section) -> dict:
    return {
        "virtual_channels": section.get_int("virtual_channels", 4),
        "warmup_epochs": section.get_int("warmup_epochs", 10),
        "patience": section.get_int("patience", 50),
        "max_epochs": section.get_int("max_epochs", 500),
        "batch_size": section.get_int("batch_size", 64),
        "lr_new": section.get_float("lr_new", 1e-3),
        "lr_pretrained": section.get_float("lr_pretrained", 1e-4),
        "val_fraction": section.get_float("val_fraction", 0.2),
    }


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    config = ConfigFile(args.config)
    section = config.section("corpus")
    seed = _resolve_seed(args, section)
    montage_path = section.get("montage", None)
    n_channels = section.get_int("channels", None)
    if (montage_path is None) == (n_channels is None):
        raise ConfigError("[corpus] needs exactly one of 'montage' or 'channels'")
    montage = (
        load_montage(montage_path)
        if montage_path is not None
        else spherical_cap_montage(n_channels)
    )
    task = None
    kind = section.get("task", "none")
    if kind != "none":
        task = TaskSpec(
            kind=kind,
            n_classes=section.get_int("n_classes", 2),
            epochs_per_class=section.get_int("epochs_per_class", 40),
            epoch_length_s=section.get_float("epoch_length_s", 4.1875),
            class_frequencies=section.get_floats("class_frequencies", (10.0, 20.0)),
            signal_scale=section.get_float("signal_scale", 2.0),
            paradigm=section.get("paradigm", "synthetic"),
        )
    spec = SynthesisSpec(
        montage=montage,
        n_subjects=section.get_int("subjects"),
        duration_s=section.get_float("duration_s", 120.0),
        n_sources=section.get_int("n_sources", 12),
        mixing_scale=section.get_float("mixing_scale", 0.25),
        noise_scale=section.get_float("noise_scale", 0.3),
        task=task,
    )
    section.reject_unknown_keys()
    if args.dry_run:
        print(f"dry run ok: synth ({spec.n_subjects} subjects)")
        return 0

    out = Path(args.out)
    snapshot = {
        "corpus": {
            "montage": montage_path or f"spherical:{n_channels}",
            "subjects": spec.n_subjects,
            "duration_s": spec.duration_s,
            "n_sources": spec.n_sources,
            "mixing_scale": spec.mixing_scale,
            "noise_scale": spec.noise_scale,
            "task": kind,
            "seed": seed,
            **({} if task is None else _flatten({
                "n_classes": task.n_classes,
                "epochs_per_class": task.epochs_per_class,
                "epoch_length_s": task.epoch_length_s,
                "class_frequencies": ",".join(str(f) for f in task.class_frequencies),
                "signal_scale": task.signal_scale,
                "paradigm": task.paradigm,
            }, "task.")),
        }
    }
    write_manifest(
        RunManifest("synth", str(args.config), snapshot, seed, str(out), __version__),
        out,
    )
    subjects = synthesize(spec, seed)
    corpus_dir = out / "corpus"
    save_corpus(
        corpus_dir, montage, subjects,
        paradigm=task.paradigm if task is not None else "synthetic",
    )
    n_epochs = sum(len(s.epochs) for s in subjects)
    n_classes = task.n_classes if task is not None else 0
    print(
        f"wrote corpus to {corpus_dir}: {len(subjects)} subjects, "
        f"{n_epochs} labelled epochs, {n_classes} classes"
    )
    return 0


def cmd_pretrain(args) -> int:
    config = ConfigFile(args.config)
    section = config.section("pretrain")
    seed = _resolve_seed(args, section)
    corpus = Path(section.get("corpus"))
    n_val_subjects = section.get_int("val_subjects", 1)
    pretrain_config = PretrainConfig(
        example_length_s=section.get_float("example_length_s", 16.1875),
        slice_interval_s=section.get_float("slice_interval_s", 16.9),
        mask_diameter_fraction=section.get_float("mask_diameter_fraction", 0.6),
        ema_momentum=section.get_float("ema_momentum", 0.996),
        learning_rate=section.get_float("learning_rate", 1e-4),
        batch_size=section.get_int("batch_size", 64),
        patience=section.get_int("patience", 10),
        max_epochs=section.get_int("max_epochs", 500),
        seed=seed,
        normalize_targets=section.get_bool("normalize_targets", False),
        model=_model_config(section),
    )
    section.reject_unknown_keys()

    subjects = list_subjects(corpus)
    if not subjects:
        raise DataError(f"no subjects found in corpus {corpus}")
    if n_val_subjects < 1 or n_val_subjects >= len(subjects):
        raise ConfigError(
            f"val_subjects must be in [1, {len(subjects) - 1}] for "
            f"{len(subjects)} subjects"
        )
    if args.dry_run:
        print(f"dry run ok: pretrain ({len(subjects)} subjects in {corpus})")
        return 0

    out = Path(args.out)
    write_manifest(
        RunManifest(
            "pretrain",
            str(args.config),
            {"pretrain": {
                "corpus": str(corpus),
                "val_subjects": n_val_subjects,
                **_flatten(pretrain_config.to_dict()),
            }},
            seed,
            str(out),
            __version__,
        ),
        out,
    )
    split = split_subjects(
        subjects,
        n_pretrain=len(subjects) - n_val_subjects,
        n_validation=n_val_subjects,
        n_downstream=0,
        rng=np.random.default_rng(derive_seed(seed, "subject-split")),
    )
    montage = None
    train_examples, val_examples = [], []
    for subject in subjects:
        recording, montage = load_continuous(corpus / subject / "continuous")
        examples = slice_continuous(
            recording,
            pretrain_config.example_length_s,
            pretrain_config.slice_interval_s,
        )
        if subject in split.validation:
            val_examples.extend(examples)
        else:
            train_examples.extend(examples)
    result = run_pretraining(
        montage, train_examples, val_examples, pretrain_config, out_dir=out
    )
    print(
        f"pre-training done: {result.epochs_run} epochs, best epoch "
        f"{result.best_epoch} (val loss {result.best_val_loss:.6f}), "
        f"checkpoint {result.best_path}"
    )
    return 0


def cmd_finetune(args) -> int:
    config = ConfigFile(args.config)
    section = config.section("finetune")
    seed = _resolve_seed(args, section)
    checkpoint = section.get("checkpoint", "none")
    architecture = section.get("architecture")
    strategy = section.get("strategy")
    if architecture not in ARCHITECTURES:
        raise ConfigError(f"unknown architecture {architecture!r}")
    if strategy not in STRATEGIES:
        raise ConfigError(f"unknown strategy {strategy!r}")
    pretrain_label = "none" if checkpoint == "none" else section.get(
        "pretrain_id", "pretrained"
    )
    pipeline = PipelineSpec(pretrain_label, architecture, strategy)
    dataset_root = section.get("dataset")
    n_folds = section.get_int("folds", 5)
    settings = _runner_settings(section)
    model_config = _model_config(section)
    section.reject_unknown_keys()

    checkpoints = {}
    if checkpoint != "none":
        if not Path(checkpoint).is_file():
            raise ConfigError(f"checkpoint not found: {checkpoint}")
        checkpoints[pretrain_label] = checkpoint
    handle = _load_dataset("dataset", dataset_root, n_folds)
    if args.dry_run:
        print(
            f"dry run ok: finetune ({pipeline.name} on "
            f"{len(handle.epochs_by_subject)} subjects)"
        )
        return 0

    out = Path(args.out)
    write_manifest(
        RunManifest(
            "finetune",
            str(args.config),
            {"finetune": {
                "checkpoint": checkpoint,
                "pipeline": pipeline.name,
                "dataset": str(dataset_root),
                "folds": n_folds,
                "seed": seed,
                **{k: str(v) for k, v in settings.items()},
                **_flatten(model_config.to_dict(), "model."),
            }},
            seed,
            str(out),
            __version__,
        ),
        out,
    )
    runner = FoldRunner(
        datasets={handle.name: handle},
        checkpoints=checkpoints,
        root_seed=seed,
        scratch_model=model_config.to_dict(),
        **settings,
    )
    cells = enumerate_cells([pipeline], [handle])
    rows = run_grid(cells, runner, out / "results.csv", jobs=args.jobs)
    mean_score = float(np.mean([r.score for r in rows]))
    print(
        f"fine-tuning done: {len(rows)} folds, mean {rows[0].metric} "
        f"{mean_score:.4f}, results in {out / 'results.csv'}"
    )
    return 0


def cmd_grid(args) -> int:
    config = ConfigFile(args.config)
    section = config.section("grid")
    seed = _resolve_seed(args, section)
    grid = GridConfig(
        pretrain_lengths_s=section.get_floats(
            "lengths_s", (1.1875, 4.1875, 16.1875)
        ),
        mask_fractions=section.get_floats("fractions", (0.4, 0.6, 0.8)),
        architectures=section.get_names("architectures", ARCHITECTURES),
        strategies=section.get_names("strategies", STRATEGIES),
        include_baseline=section.get_bool("baseline", True),
    )
    n_folds = section.get_int("folds", 5)
    settings = _runner_settings(section)
    model_config = _model_config(section)
    section.reject_unknown_keys()

    pipelines = enumerate_pipelines(grid)
    datasets_section = config.section("datasets")
    checkpoints_section = config.optional_section("checkpoints")
    checkpoints = {
        pid: checkpoints_section.get(pid) for pid in checkpoints_section.values
    }
    ensure_checkpoints(pipelines, {k: Path(v) for k, v in checkpoints.items()})
    handles = [
        _load_dataset(name, datasets_section.get(name), n_folds)
        for name in sorted(datasets_section.values)
    ]
    if args.dry_run:
        cells = enumerate_cells(pipelines, handles)
        print(
            f"dry run ok: grid ({len(pipelines)} pipelines x "
            f"{len(cells) // len(pipelines)} folds = {len(cells)} cells)"
        )
        return 0

    out = Path(args.out)
    write_manifest(
        RunManifest(
            "grid",
            str(args.config),
            {
                "grid": {
                    "lengths_s": ",".join(str(v) for v in grid.pretrain_lengths_s),
                    "fractions": ",".join(str(v) for v in grid.mask_fractions),
                    "architectures": ",".join(grid.architectures),
                    "strategies": ",".join(grid.strategies),
                    "baseline": str(grid.include_baseline),
                    "folds": n_folds,
                    "seed": seed,
                    **{k: str(v) for k, v in settings.items()},
                    **_flatten(model_config.to_dict(), "model."),
                },
                "datasets": {
                    name: datasets_section.values[name]
                    for name in sorted(datasets_section.values)
                },
                "checkpoints": dict(checkpoints),
            },
            seed,
            str(out),
            __version__,
        ),
        out,
    )
    runner = FoldRunner(
        datasets={h.name: h for h in handles},
        checkpoints=checkpoints,
        root_seed=seed,
        scratch_model=model_config.to_dict(),
        **settings,
    )
    cells = enumerate_cells(pipelines, handles)
    rows = run_grid(cells, runner, out / "results.csv", jobs=args.jobs)
    print(
        f"grid done: {len(rows)} fold results over {len(pipelines)} pipelines, "
        f"results in {out / 'results.csv'}"
    )
    return 0


def cmd_report(args) -> int:
    results_path = Path(args.results)
    if not results_path.is_file():
        raise ConfigError(f"results file not found: {results_path}")
    rows, _ = read_results(results_path)
    table = rank_pipelines(rows)
    if args.dry_run:
        print(f"dry run ok: report ({len(table.pipelines)} pipelines)")
        return 0
    out = Path(args.out) if args.out else results_path.parent / "report"
    write_manifest(
        RunManifest(
            "report",
            str(results_path),
            {"report": {"results": str(results_path), "rows": str(len(rows))}},
            args.seed if args.seed is not None else 0,
            str(out),
            __version__,
        ),
        out,
    )
    write_ranking_report(table, out)
    best = min(table.pipelines, key=lambda p: table.average_rank[p])
    print(
        f"report written to {out}: {len(table.pipelines)} pipelines over "
        f"{len(table.fold_keys)} folds; best average rank "
        f"{table.average_rank[best]:.3f} ({best})"
    )
    return 0


# ---------------------------------------------------------------------------
# Parser and entry point
# ---------------------------------------------------------------------------


def _add_common(sub, *, config_required=True, out_required=True):
    if config_required:
        sub.add_argument("--config", required=True, help="config file path")
    sub.add_argument(
        "--out", required=out_required, help="output directory for all artifacts"
    )
    sub.add_argument("--seed", type=int, default=None, help="override config seed")
    sub.add_argument("--jobs", type=int, default=1, help="parallel fold workers")
    sub.add_argument(
        "--dry-run", action="store_true",
        help="validate inputs and exit without writing anything",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="eegjepa",
        description="Self-supervised EEG representation learning toolkit.",
    )
    parser.add_argument(
        "--version", action="version", version=f"%(prog)s {__version__}"
    )
    commands = parser.add_subparsers(dest="command", required=True)

    synth = commands.add_parser("synth", help="write a synthetic corpus")
    _add_common(synth)
    synth.set_defaults(func=cmd_synth)

    pretrain = commands.add_parser("pretrain", help="run self-supervised pre-training")
    _add_common(pretrain)
    pretrain.set_defaults(func=cmd_pretrain)

    finetune = commands.add_parser(
        "finetune", help="run one pipeline on one dataset's folds"
    )
    _add_common(finetune)
    finetune.set_defaults(func=cmd_finetune)

    grid = commands.add_parser("grid", help="execute the pipeline grid (resumable)")
    _add_common(grid)
    grid.set_defaults(func=cmd_grid)

    report = commands.add_parser("report", help="rank pipelines from a results file")
    report.add_argument("results", help="results CSV produced by grid or finetune")
    _add_common(report, config_required=False, out_required=False)
    report.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    torch.set_num_threads(max(1, args.jobs))
    try:
        return args.func(args)
    except NonFiniteLossError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except ToolkitError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: missing input: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
