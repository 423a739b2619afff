"""Command-line entry point: filter, gen-testsets, augment, train, eval, report.

Every subcommand except ``filter`` reads a YAML experiment config, writes its
artifacts under the output directory and saves the resolved config next to
them. Exit codes: 0 success, 1 runtime failure, 2 invalid config or arguments.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

import numpy as np
import yaml

from . import bench
from .dataio import (
    AugmentPolicy,
    GridSpec,
    LabeledDataset,
    Manifest,
    augment_provenance,
    channel_stats,
    generate_test_grid,
    load_cifar10,
    stochastic_augment,
    write_provenance,
    write_records,
)
from .imgfreq import FilterKind, FilterSpec, apply_filter, load_image, save_image
from .nnet.train import Checkpoint, TrainConfig, TrainingDiverged, train, write_metrics

log = logging.getLogger("freqrobust")

TESTSETS_DIR = "testsets"
AUGMENT_DIR = "augmented"
REPORT_DIR = "report"
CHECKPOINT_FILE = "checkpoint.frq"


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending field."""


# ---------------------------------------------------------------------------
# configuration


@dataclass
class DatasetSection:
    path: str | None = None
    num_classes: int = 10
    train_limit: int | None = None
    test_limit: int | None = None


@dataclass
class GridSection:
    sigmas: list = field(default_factory=lambda: [0.5, 1.0, 1.5])
    widths: list = field(default_factory=lambda: [2, 3, 4, 5, 6, 7])
    kinds: list = field(default_factory=lambda: ["HighPass", "LowPass"])


@dataclass
class AugmentSection:
    sigma_min: float = 0.25
    sigma_max: float = 1.75
    width_choices: list = field(default_factory=lambda: [2, 3, 4, 5, 6, 7])


@dataclass
class TrainSection:
    model: str = "desk"
    batch_size: int = 128
    initial_lr: float = 0.1
    lr_milestones: list = field(default_factory=lambda: [100, 150])
    lr_gamma: float = 0.1
    epochs: int = 200
    momentum: float = 0.9
    weight_decay: float = 5e-4
    stochastic_augment: bool = False
    standard_augment: bool = True
    run: str | None = None


@dataclass
class NormalizationSection:
    mean: list | None = None
    std: list | None = None


@dataclass
class OutputSection:
    dir: str = "runs"


@dataclass
class EvalSection:
    batch_size: int = 500


@dataclass
class ReportSection:
    baseline: str = "baseline"
    treated: str = "stochastic"
    format: str = "markdown"
    slack: float = 2.0


SECTIONS = {
    "dataset": DatasetSection,
    "grid": GridSection,
    "augment": AugmentSection,
    "train": TrainSection,
    "normalization": NormalizationSection,
    "output": OutputSection,
    "eval": EvalSection,
    "report": ReportSection,
}

# field name -> accepted python types (None allowed when the default is None)
_TYPES = {int: (int,), float: (int, float), bool: (bool,), str: (str,), list: (list,)}


def _field_type(f) -> type:
    ann = f.type if isinstance(f.type, str) else f.type.__name__
    for name, t in (("bool", bool), ("int", int), ("float", float), ("str", str), ("list", list)):
        if ann.startswith(name):
            return t
    raise TypeError(f"unsupported config annotation {ann}")


def _build_section(name: str, cls, raw: Any):
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{name}: expected a mapping, got {type(raw).__name__}")
    known = {f.name: f for f in fields(cls)}
    for key in raw:
        if key not in known:
            raise ConfigError(f"{name}.{key}: unknown field (allowed: {', '.join(known)})")
    values = {}
    for key, value in raw.items():
        f = known[key]
        t = _field_type(f)
        optional = "None" in str(f.type)
        if value is None and optional:
            values[key] = None
            continue
        ok = isinstance(value, _TYPES[t]) and not (t in (int, float) and isinstance(value, bool))
        if not ok:
            raise ConfigError(f"{name}.{key}: expected {t.__name__}, got {value!r}")
        values[key] = float(value) if t is float else value
    return cls(**values)


@dataclass
class ExperimentConfig:
    seed: int = 0
    threads: int | None = None
    dataset: DatasetSection = field(default_factory=DatasetSection)
    grid: GridSection = field(default_factory=GridSection)
    augment: AugmentSection = field(default_factory=AugmentSection)
    train: TrainSection = field(default_factory=TrainSection)
    normalization: NormalizationSection = field(default_factory=NormalizationSection)
    output: OutputSection = field(default_factory=OutputSection)
    eval: EvalSection = field(default_factory=EvalSection)
    report: ReportSection = field(default_factory=ReportSection)

    @classmethod
    def from_dict(cls, raw: dict | None) -> ExperimentConfig:
        if raw is not None and not isinstance(raw, dict):
            raise ConfigError("config: top level must be a mapping")
        raw = dict(raw or {})
        allowed = {"seed", "threads", *SECTIONS}
        for key in raw:
            if key not in allowed:
                raise ConfigError(f"{key}: unknown field (allowed: {', '.join(sorted(allowed))})")
        seed = raw.pop("seed", 0)
        if not isinstance(seed, int) or isinstance(seed, bool) or not 0 <= seed < 2**63:
            raise ConfigError(f"seed: expected a non-negative integer, got {seed!r}")
        threads = raw.pop("threads", None)
        if threads is not None and (not isinstance(threads, int) or isinstance(threads, bool) or threads < 1):
            raise ConfigError(f"threads: expected a positive integer, got {threads!r}")
        sections = {name: _build_section(name, cls_, raw.get(name)) for name, cls_ in SECTIONS.items()}
        cfg = cls(seed=seed, threads=threads, **sections)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path: str | Path) -> ExperimentConfig:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"--config: cannot read {path}: {exc.strerror or exc}") from exc
        try:
            raw = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            raise ConfigError(f"--config: {path} is not valid YAML: {exc}") from exc
        return cls.from_dict(raw)

    def to_dict(self) -> dict:
        return asdict(self)

    def dump(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True, default_flow_style=None)

    def validate(self) -> None:
        d = self.dataset
        if d.num_classes < 2:
            raise ConfigError("dataset.num_classes: must be >= 2")
        for name in ("train_limit", "test_limit"):
            v = getattr(d, name)
            if v is not None and v < 1:
                raise ConfigError(f"dataset.{name}: must be a positive integer or null")
        self.grid_spec()
        self.augment_policy()
        self.train_config()
        n = self.normalization
        if (n.mean is None) != (n.std is None):
            raise ConfigError("normalization: give both mean and std, or neither")
        for name in ("mean", "std"):
            v = getattr(n, name)
            if v is not None and (len(v) != 3 or not all(isinstance(x, (int, float)) for x in v)):
                raise ConfigError(f"normalization.{name}: expected 3 numbers, got {v!r}")
        if n.std is not None and min(n.std) <= 0:
            raise ConfigError("normalization.std: entries must be positive")
        if self.eval.batch_size < 1:
            raise ConfigError("eval.batch_size: must be >= 1")
        if self.report.format not in ("csv", "markdown"):
            raise ConfigError(f"report.format: expected csv or markdown, got {self.report.format!r}")
        if self.report.slack < 0:
            raise ConfigError("report.slack: must be >= 0")

    def grid_spec(self) -> GridSpec:
        try:
            spec = GridSpec(self.grid.sigmas, self.grid.widths, self.grid.kinds)
            spec.cells()  # validates every (kind, sigma, width)
            return spec
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"grid: {exc}") from exc

    def augment_policy(self) -> AugmentPolicy:
        a = self.augment
        try:
            return AugmentPolicy(a.sigma_min, a.sigma_max, a.width_choices, self.seed)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"augment: {exc}") from exc

    def train_config(self) -> TrainConfig:
        t = asdict(self.train)
        t.pop("run")
        try:
            return TrainConfig(seed=self.seed, **t)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"train: {exc}") from exc

    def run_name(self) -> str:
        if self.train.run:
            return self.train.run
        return "stochastic" if self.train.stochastic_augment else "baseline"

    def out_dir(self) -> Path:
        return Path(self.output.dir)

    def dataset_root(self) -> Path:
        if self.dataset.path is None:
            raise ConfigError("dataset.path: required by this command")
        root = Path(self.dataset.path)
        if not root.is_dir():
            raise ConfigError(f"dataset.path: directory {root} does not exist")
        return root


# ---------------------------------------------------------------------------
# commands


def _threads(cfg: ExperimentConfig) -> int:
    return cfg.threads or os.cpu_count() or 1


def _mkdir(path: Path) -> Path:
    path.mkdir(parents=True, exist_ok=True)
    return path


def _write_config(cfg: ExperimentConfig, directory: Path, command: str) -> None:
    (directory / f"config-{command}.yaml").write_text(cfg.dump())


def _load_split(cfg: ExperimentConfig, split: str) -> LabeledDataset:
    ds = load_cifar10(cfg.dataset_root(), split, cfg.dataset.num_classes)
    return ds.head(cfg.dataset.train_limit if split == "train" else cfg.dataset.test_limit)


def cmd_filter(args) -> int:
    try:
        spec = FilterSpec(args.kind, args.sigma, args.width)
    except ValueError as exc:
        raise ConfigError(f"filter: {exc}") from exc
    img = load_image(args.input)
    out = apply_filter(img, spec)
    save_image(args.output, out, signed=spec.kind is FilterKind.HIGH)
    log.info("wrote %s (%s)", args.output, spec.label)
    return 0


def cmd_gen_testsets(cfg: ExperimentConfig, args) -> int:
    test = _load_split(cfg, "test")
    out = _mkdir(cfg.out_dir() / TESTSETS_DIR)
    manifest = generate_test_grid(test, cfg.grid_spec(), out, threads=_threads(cfg))
    _write_config(cfg, out, "gen-testsets")
    log.info("wrote %d filtered test sets of %d images to %s", len(manifest.cells), len(test), out)
    return 0


def cmd_augment(cfg: ExperimentConfig, args) -> int:
    train_set = _load_split(cfg, "train")
    policy = cfg.augment_policy()
    augmented = stochastic_augment(train_set, policy, threads=_threads(cfg))
    records = augment_provenance(len(train_set), policy)
    n = len(train_set)
    signed = np.zeros(len(augmented), dtype=bool)
    signed[n:] = [spec.kind is FilterKind.HIGH for _, spec in records]
    out = _mkdir(cfg.out_dir() / AUGMENT_DIR)
    write_records(out / "train_augmented.bin", augmented, signed=signed)
    write_provenance(out / "provenance.csv", records, offset=n)
    _write_config(cfg, out, "augment")
    log.info("wrote %d images (%d originals + %d filtered) to %s", len(augmented), n, n, out)
    return 0


def cmd_train(cfg: ExperimentConfig, args) -> int:
    tc = cfg.train_config()
    train_set = _load_split(cfg, "train")
    test_set = _load_split(cfg, "test")
    mean, std = cfg.normalization.mean, cfg.normalization.std
    if mean is None:
        mean, std = channel_stats(train_set)
    out = _mkdir(cfg.out_dir() / cfg.run_name())
    resolved = ExperimentConfig.from_dict(cfg.to_dict())
    resolved.normalization = NormalizationSection(list(mean), list(std))
    _write_config(resolved, out, "train")
    ck = train(tc, train_set, test_set, mean, std, augment_policy=cfg.augment_policy())
    ck.save(out / CHECKPOINT_FILE)
    write_metrics(out / "metrics.csv", ck.metrics)
    final = ck.metrics[-1].val_acc if ck.metrics else float("nan")
    log.info("trained %s for %d epochs, final val acc %.4f -> %s", tc.model, tc.epochs, final, out)
    return 0


def cmd_eval(cfg: ExperimentConfig, args) -> int:
    run_dir = cfg.out_dir() / cfg.run_name()
    ck_path = run_dir / CHECKPOINT_FILE
    if not ck_path.is_file():
        raise FileNotFoundError(f"no checkpoint at {ck_path}; run 'train' first")
    manifest = Manifest.read(cfg.out_dir() / TESTSETS_DIR / "manifest.ini")
    grid = bench.run_grid(Checkpoint.load(ck_path), manifest, cfg.eval.batch_size, threads=_threads(cfg))
    grid.model_id, grid.dataset_id = cfg.run_name(), TESTSETS_DIR
    (run_dir / "grid.csv").write_text(bench.emit_report(grid, "csv"))
    (run_dir / "grid.md").write_text(bench.emit_report(grid, "markdown"))
    lines = [f"{c.name},{'pass' if c.passed else 'fail'},{c.details}" for c in _trend(grid, cfg)]
    if lines:
        (run_dir / "trend_checks.csv").write_text("check,result,details\n" + "\n".join(lines) + "\n")
    _write_config(cfg, run_dir, "eval")
    log.info("clean accuracy %.4f, mean cell accuracy %.4f", grid.clean_accuracy, grid.mean_accuracy())
    return 0


def _trend(grid, cfg):
    return bench.trend_checks(grid, cfg.report.slack) if grid.is_default() else []


def cmd_report(cfg: ExperimentConfig, args) -> int:
    r = cfg.report
    grids = {}
    for role, run in (("baseline", r.baseline), ("treated", r.treated)):
        path = cfg.out_dir() / run / "grid.csv"
        if not path.is_file():
            raise FileNotFoundError(f"no grid for report.{role} run {run!r} at {path}; run 'eval' first")
        grids[role] = bench.read_grid_csv(path)
    comparison = bench.compare(grids["baseline"], grids["treated"])
    out = _mkdir(cfg.out_dir() / REPORT_DIR)
    (out / "comparison.csv").write_text(bench.emit_report(comparison, "csv"))
    text = bench.emit_report(comparison, r.format)
    if r.format == "markdown":
        (out / "comparison.md").write_text(text)
    _write_config(cfg, out, "report")
    sys.stdout.write(text if text.endswith("\n") else text + "\n")
    return 0


COMMANDS = {
    "gen-testsets": cmd_gen_testsets,
    "augment": cmd_augment,
    "train": cmd_train,
    "eval": cmd_eval,
    "report": cmd_report,
}


# ---------------------------------------------------------------------------
# argument parsing


def _common(p: argparse.ArgumentParser, config_required: bool) -> None:
    p.add_argument("--config", required=config_required, help="YAML experiment config")
    p.add_argument("--out", help="output directory (overrides output.dir)")
    p.add_argument("--seed", type=int, help="overrides the config seed")
    p.add_argument("--threads", type=int, help="worker threads for filtering and evaluation (default: all cores)")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="freqrobust", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    f = sub.add_parser("filter", help="high- or low-pass filter a single image")
    f.add_argument("input")
    f.add_argument("output", help=".png or .ppm")
    f.add_argument("--kind", required=True, help="high|low (or HighPass|LowPass)")
    f.add_argument("--sigma", type=float, required=True)
    f.add_argument("--width", type=int, required=True)
    _common(f, config_required=False)

    helps = {
        "gen-testsets": "write the clean test set and every filtered grid cell",
        "augment": "export the stochastically filtered training set with provenance",
        "train": "train a model (baseline or stochastic_augment) and save a checkpoint",
        "eval": "evaluate a checkpoint over the filtered test sets",
        "report": "compare two evaluated runs",
    }
    for name, text in helps.items():
        _common(sub.add_parser(name, help=text), config_required=True)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s", stream=sys.stderr
    )
    try:
        if args.threads is not None and args.threads < 1:
            raise ConfigError("--threads: must be >= 1")
        if args.command == "filter":
            return cmd_filter(args)
        cfg = ExperimentConfig.load(args.config)
        if args.seed is not None:
            cfg.seed = args.seed
        if args.out is not None:
            cfg.output.dir = args.out
        if args.threads is not None:
            cfg.threads = args.threads
        cfg = ExperimentConfig.from_dict(cfg.to_dict())
        return COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"freqrobust: invalid configuration: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError, TrainingDiverged) as exc:
        print(f"freqrobust: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
