"""Config-driven experiment runner and reference-relative comparison tables.

Config files are line-oriented ``section.key = value`` pairs; ``#`` starts a
comment.  List values are comma separated.  See :data:`SCHEMA` for every key.
"""
from __future__ import annotations

import concurrent.futures
import hashlib
import itertools
import logging
import os
import re
import statistics
import traceback
from collections.abc import Callable, Iterable, Sequence
from dataclasses import dataclass, field
from pathlib import Path

from .data import LabeledDataset, gen_spiral, load_cifar_binary, load_idx
from .errors import ConfigError, ValidationError
from .models import ModelArch, save_checkpoint
from .optim import LrSchedule
from .policies import POLICY_KINDS, PolicyConfig, RunReport, TrainSettings, train

logger = logging.getLogger(__name__)

OUT_ENV = "LSTSD_OUT"


def _bool(text: str) -> bool:
    low = text.lower()
    if low in ("true", "yes", "1", "on"):
        return True
    if low in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _list(parse: Callable[[str], object]) -> Callable[[str], list]:
    def inner(text: str) -> list:
        items = [t.strip() for t in text.split(",") if t.strip()]
        if not items:
            raise ValueError("empty list")
        return [parse(t) for t in items]

    return inner


def _choice(*options: str) -> Callable[[str], str]:
    def inner(text: str) -> str:
        if text not in options:
            raise ValueError(f"expected one of {', '.join(options)}; got {text!r}")
        return text

    return inner


def _kinds(text: str) -> list[str]:
    return _list(_choice(*POLICY_KINDS))(text)


_REQUIRED = object()

# key -> (parser, default, help)
SCHEMA: dict[str, tuple[Callable[[str], object], object, str]] = {
    "dataset.kind": (_choice("spiral", "cifar10", "cifar100", "idx"), _REQUIRED, "data source"),
    "dataset.n_per_class": (int, 1000, "spiral training samples per class"),
    "dataset.test_n_per_class": (int, 334, "spiral test samples per class"),
    "dataset.classes": (int, 3, "spiral class count"),
    "dataset.noise": (float, 0.05, "spiral Gaussian noise std"),
    "dataset.seed": (int, 0, "spiral generator seed (test set uses seed + 1)"),
    "dataset.train_path": (_list(str), None, "comma-separated files (idx: images,labels)"),
    "dataset.test_path": (_list(str), None, "comma-separated files (idx: images,labels)"),
    "dataset.num_classes": (int, None, "class count for idx data (default: max label + 1)"),
    "dataset.mean": (_list(float), None, "per-channel mean after scaling to [0,1]"),
    "dataset.std": (_list(float), None, "per-channel std after scaling to [0,1]"),
    "dataset.augment": (_bool, False, "pad-crop-flip augmentation of images"),
    "dataset.pad": (int, 4, "augmentation padding"),
    "dataset.flip_prob": (float, 0.5, "augmentation horizontal flip probability"),
    "model.arch": (_choice("mlp", "small_cnn"), _REQUIRED, "architecture preset"),
    "model.hidden": (_list(int), [64, 64], "mlp hidden widths"),
    "policy.kind": (_kinds, _REQUIRED, f"comma-separated policies from {', '.join(POLICY_KINDS)}"),
    "policy.lambda_long": (float, 2.4, "long-term teacher weight"),
    "policy.lambda_short": (float, 4.0, "short-term teacher weight"),
    "policy.temperature": (float, 2.0, "distillation temperature"),
    "policy.mini_gen_epochs": (int, 6, "epochs per mini-generation"),
    "policy.mini_generations": (int, 5, "number of mini-generations"),
    "policy.alpha_mean_teacher": (float, 0.999, "Mean Teacher EMA constant"),
    "policy.alpha_temporal": (float, 0.6, "Temporal Ensembles EMA constant"),
    "policy.lambda_baseline": (float, 1.0, "teacher weight for the baselines"),
    "policy.teacher_timing": (_choice("pre_update", "post_update"), "pre_update", "when teacher logits are recorded"),
    "policy.reverse_kl": (_bool, False, "use KL(teacher||student) instead of KL(student||teacher)"),
    "optim.lr": (float, 0.1, "base learning rate"),
    "optim.momentum": (float, 0.9, "Nesterov momentum"),
    "optim.weight_decay": (float, 1e-4, "L2 weight decay"),
    "optim.batch_size": (int, 128, "mini-batch size"),
    "optim.schedule": (
        _choice("auto", "constant", "step_decay", "cyclic_cosine"),
        "auto",
        "auto = cyclic_cosine for snapshot baselines, step_decay otherwise",
    ),
    "optim.floor_lr": (float, 0.0, "cyclic schedule minimum"),
    "run.seeds": (_list(int), _REQUIRED, "comma-separated run seeds"),
    "run.out": (str, None, f"output root (default: ${OUT_ENV} or ./runs)"),
    "run.reference": (str, None, "reference row of the comparison table (default: first policy)"),
    "run.parallel": (_bool, False, "run (policy, seed) cells on a thread pool"),
    "run.checkpoints": (_bool, True, "write final parameters per run"),
    "sweep.mini_gen_epochs": (_list(int), None, "mini-generation lengths; requires sweep.total_epochs"),
    "sweep.total_epochs": (int, None, "fixed total epochs for the mini-generation sweep"),
    "sweep.lambda_long": (_list(float), None, "lambda_long grid"),
    "sweep.lambda_short": (_list(float), None, "lambda_short grid"),
    "sweep.lambda_baseline": (_list(float), None, "lambda_baseline grid"),
}


def schema_help() -> str:
    lines = ["config keys (default in brackets):"]
    for key, (_, default, doc) in SCHEMA.items():
        if default is _REQUIRED:
            shown = "required"
        elif isinstance(default, list):
            shown = ",".join(str(v) for v in default)
        else:
            shown = default
        lines.append(f"  {key:<26} [{shown}] {doc}")
    return "\n".join(lines)


@dataclass
class ExperimentConfig:
    text: str
    values: dict[str, object]
    explicit: set[str] = field(default_factory=set)

    def __getitem__(self, key: str):
        return self.values[key]

    @property
    def seeds(self) -> list[int]:
        return self.values["run.seeds"]

    def digest(self) -> str:
        return hashlib.sha256(self.text.encode("utf-8")).hexdigest()[:16]

    def with_seeds(self, seeds: Sequence[int]) -> "ExperimentConfig":
        """Copy with the seed list replaced, in the values and in the config text."""
        values = dict(self.values, **{"run.seeds": list(seeds)})
        line = f"run.seeds = {','.join(str(s) for s in seeds)}"
        text, n = re.subn(r"(?m)^\s*run\.seeds\s*=.*$", line, self.text)
        if not n:
            text = text.rstrip("\n") + "\n" + line + "\n"
        return ExperimentConfig(text, values, self.explicit | {"run.seeds"})


_LINE = re.compile(r"^\s*([A-Za-z_][\w]*\.[A-Za-z_][\w]*)\s*=\s*(.*?)\s*$")


def parse_config(text: str) -> ExperimentConfig:
    seen: dict[str, int] = {}
    values: dict[str, object] = {}
    lines = text.splitlines()
    for lineno, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        m = _LINE.match(line)
        if not m:
            raise ConfigError(f"expected 'section.key = value', got {raw.strip()!r}", lineno)
        key, value = m.group(1), m.group(2)
        if key not in SCHEMA:
            raise ConfigError(f"unknown key {key!r}", lineno)
        if key in seen:
            raise ConfigError(f"duplicate key {key!r} (first set on line {seen[key]})", lineno)
        seen[key] = lineno
        try:
            values[key] = SCHEMA[key][0](value)
        except ValueError as err:
            raise ConfigError(f"bad value for {key}: {err}", lineno) from None
    eof = len(lines) + 1
    for key, (_, default, _) in SCHEMA.items():
        if key not in values:
            if default is _REQUIRED:
                raise ConfigError(f"missing required key {key!r}", eof)
            values[key] = list(default) if isinstance(default, list) else default
    cfg = ExperimentConfig(text, values, set(seen))
    _check_config(cfg, seen)
    return cfg


def _check_config(cfg: ExperimentConfig, lines: dict[str, int]) -> None:
    kinds = cfg["policy.kind"]
    for kind, weight in (("lstsd_no_long", "policy.lambda_long"), ("lstsd_no_short", "policy.lambda_short")):
        if kind in kinds and weight in cfg.explicit and cfg[weight] != 0:
            raise ConfigError(f"{kind} requires {weight} = 0, got {cfg[weight]}", lines[weight])
    if not cfg.seeds:
        raise ConfigError("run.seeds must not be empty", lines.get("run.seeds"))
    if cfg["sweep.mini_gen_epochs"] is not None:
        total = cfg["sweep.total_epochs"]
        if total is None:
            raise ConfigError("sweep.mini_gen_epochs requires sweep.total_epochs", lines["sweep.mini_gen_epochs"])
        for e in cfg["sweep.mini_gen_epochs"]:
            if e < 1 or total % e:
                raise ConfigError(
                    f"mini-generation length {e} does not divide total epochs {total}", lines["sweep.mini_gen_epochs"]
                )
    if cfg["dataset.kind"] != "spiral":
        for key in ("dataset.train_path", "dataset.test_path"):
            if cfg[key] is None:
                raise ConfigError(f"{key} is required for dataset.kind = {cfg['dataset.kind']}", len(cfg.text.splitlines()) + 1)
    ref = cfg["run.reference"]
    if ref is not None and ref not in POLICY_KINDS:
        raise ConfigError(f"run.reference {ref!r} is not a policy kind", lines["run.reference"])


# ---------------------------------------------------------------------------
# expansion into runs


@dataclass(frozen=True)
class RunSpec:
    label: str
    policy: PolicyConfig
    settings: TrainSettings
    seed: int

    @property
    def stem(self) -> str:
        return run_stem(self.label, self.seed)


def run_stem(label: str, seed: int) -> str:
    return re.sub(r"[^A-Za-z0-9_.=-]+", "_", f"{label}__seed{seed}")


def load_datasets(cfg: ExperimentConfig) -> tuple[LabeledDataset, LabeledDataset]:
    kind = cfg["dataset.kind"]
    if kind == "spiral":
        train_set = gen_spiral(cfg["dataset.n_per_class"], cfg["dataset.classes"], cfg["dataset.noise"], cfg["dataset.seed"])
        test_set = gen_spiral(
            cfg["dataset.test_n_per_class"], cfg["dataset.classes"], cfg["dataset.noise"], cfg["dataset.seed"] + 1
        )
        return train_set, test_set
    mean, std = cfg["dataset.mean"], cfg["dataset.std"]
    if kind in ("cifar10", "cifar100"):
        return (
            load_cifar_binary(cfg["dataset.train_path"], kind, mean, std),
            load_cifar_binary(cfg["dataset.test_path"], kind, mean, std),
        )
    pairs = []
    for key in ("dataset.train_path", "dataset.test_path"):
        paths = cfg[key]
        if len(paths) != 2:
            raise ValidationError(f"{key} for idx data must be 'images,labels'")
        pairs.append(load_idx(paths[0], paths[1], cfg["dataset.num_classes"], mean, std))
    if cfg["dataset.num_classes"] is None:
        classes = max(p.num_classes for p in pairs)
        pairs = [LabeledDataset(p.features, p.labels, classes) for p in pairs]
    return pairs[0], pairs[1]


def build_arch(cfg: ExperimentConfig, train_set: LabeledDataset) -> ModelArch:
    hidden = tuple(cfg["model.hidden"]) if cfg["model.arch"] == "mlp" else ()
    shape = train_set.input_shape
    if cfg["model.arch"] == "mlp" and len(shape) > 1:
        raise ValidationError(f"mlp preset needs flat features, dataset has shape {shape}")
    return ModelArch(cfg["model.arch"], shape, train_set.num_classes, hidden)


def _schedule(cfg: ExperimentConfig, kind: str, mini_gen_epochs: int) -> LrSchedule:
    variant = cfg["optim.schedule"]
    if variant == "auto":
        variant = "cyclic_cosine" if kind.startswith("snapshot_") else "step_decay"
    return LrSchedule(variant, cfg["optim.lr"], cycle_epochs=mini_gen_epochs, floor_lr=cfg["optim.floor_lr"])


def expand_runs(cfg: ExperimentConfig) -> list[RunSpec]:
    """Every (policy x sweep point x seed) cell, in a fixed order."""
    axes: list[tuple[str, list]] = []
    if cfg["sweep.mini_gen_epochs"] is not None:
        axes.append(("E", cfg["sweep.mini_gen_epochs"]))
    for name in ("lambda_long", "lambda_short", "lambda_baseline"):
        if cfg[f"sweep.{name}"] is not None:
            axes.append((name, cfg[f"sweep.{name}"]))
    base = {
        name: cfg[f"policy.{name}"]
        for name in (
            "lambda_long",
            "lambda_short",
            "temperature",
            "mini_gen_epochs",
            "mini_generations",
            "alpha_mean_teacher",
            "alpha_temporal",
            "lambda_baseline",
            "teacher_timing",
            "reverse_kl",
        )
    }
    runs = []
    for kind in cfg["policy.kind"]:
        for point in itertools.product(*(values for _, values in axes)):
            overrides = dict(base)
            tags = []
            for (name, _), value in zip(axes, point):
                tags.append(f"{name}={value}")
                if name == "E":
                    overrides["mini_gen_epochs"] = value
                    overrides["mini_generations"] = cfg["sweep.total_epochs"] // value
                else:
                    overrides[name] = value
            # ablated weights stay at zero
            if kind == "lstsd_no_long":
                overrides["lambda_long"] = 0.0
            if kind == "lstsd_no_short":
                overrides["lambda_short"] = 0.0
            policy = PolicyConfig(kind=kind, **overrides)
            settings = TrainSettings(
                schedule=_schedule(cfg, kind, policy.mini_gen_epochs),
                batch_size=cfg["optim.batch_size"],
                momentum=cfg["optim.momentum"],
                weight_decay=cfg["optim.weight_decay"],
                augment=cfg["dataset.augment"],
                pad=cfg["dataset.pad"],
                flip_prob=cfg["dataset.flip_prob"],
            )
            label = kind + (f"@{','.join(tags)}" if tags else "")
            runs.extend(RunSpec(label, policy, settings, seed) for seed in cfg.seeds)
    return runs


def _echo(cfg: ExperimentConfig, spec: RunSpec) -> dict[str, str]:
    echo = {}
    for key, value in cfg.values.items():
        if key.startswith(("dataset.", "model.", "optim.")):
            echo[key] = ",".join(str(v) for v in value) if isinstance(value, list) else str(value)
    for name in PolicyConfig.__dataclass_fields__:
        echo[f"policy.{name}"] = str(getattr(spec.policy, name))
    echo["run.label"] = spec.label
    echo["run.schedule"] = spec.settings.schedule.variant
    return echo


# ---------------------------------------------------------------------------
# comparison tables


COMPARED_PREFIXES = ("dataset.", "model.", "optim.")


@dataclass(frozen=True)
class ComparisonRow:
    label: str
    n: int
    final_mean: float
    final_std: float
    best_mean: float
    best_std: float
    delta: float


@dataclass(frozen=True)
class ComparisonTable:
    reference: str
    rows: tuple[ComparisonRow, ...]

    def format(self) -> str:
        width = max(len("policy"), *(len(r.label) for r in self.rows))
        lines = [f"{'policy':<{width}}  {'seeds':>5}  {'final acc (%)':<22} {'best acc (%)':<14} delta vs {self.reference}"]
        for r in self.rows:
            final = f"{100 * r.final_mean:.2f} ± {100 * r.final_std:.2f}"
            best = f"{100 * r.best_mean:.2f} ± {100 * r.best_std:.2f}"
            lines.append(f"{r.label:<{width}}  {r.n:>5}  {final:<22} {best:<14} {format_delta(r.final_mean, r.delta)}")
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        out = ["label,n,final_mean,final_std,best_mean,best_std,delta"]
        out += [
            f"{r.label},{r.n},{r.final_mean!r},{r.final_std!r},{r.best_mean!r},{r.best_std!r},{r.delta!r}"
            for r in self.rows
        ]
        return "\n".join(out) + "\n"


def format_delta(mean: float, delta: float) -> str:
    """``69.42 (-0.00)``: percent with two decimals; zero and negative deltas carry a minus sign."""
    shown = f"{abs(100 * delta):.2f}"
    sign = "+" if delta > 0 and shown != "0.00" else "-"
    return f"{100 * mean:.2f} ({sign}{shown})"


def compare_runs(reports: Iterable[RunReport], reference: str) -> ComparisonTable:
    """Group reports by run label and tabulate mean/std accuracies against ``reference``."""
    reports = list(reports)
    if not reports:
        raise ValidationError("no reports to compare")
    base = {k: v for k, v in reports[0].config.items() if k.startswith(COMPARED_PREFIXES)}
    mismatched = set()
    for rep in reports[1:]:
        other = {k: v for k, v in rep.config.items() if k.startswith(COMPARED_PREFIXES)}
        mismatched |= {k for k in base.keys() | other.keys() if base.get(k) != other.get(k)}
    if mismatched:
        raise ValidationError(f"reports disagree on: {', '.join(sorted(mismatched))}")

    groups: dict[str, list[RunReport]] = {}
    kinds: dict[str, str] = {}
    for rep in reports:
        label = rep.config.get("run.label") or rep.config.get("policy.kind", "run")
        groups.setdefault(label, []).append(rep)
        kinds[label] = rep.config.get("policy.kind", label)
    ref_label = next((lab for lab in groups if lab == reference), None) or next(
        (lab for lab in groups if kinds[lab] == reference), None
    )
    if ref_label is None:
        raise ValidationError(f"reference {reference!r} matches no run label or policy kind")

    def stats(values: list[float]) -> tuple[float, float]:
        return statistics.fmean(values), statistics.stdev(values) if len(values) > 1 else 0.0

    ref_mean = stats([r.final_test_acc for r in groups[ref_label]])[0]
    rows = []
    for label, reps in groups.items():
        fm, fs = stats([r.final_test_acc for r in reps])
        bm, bs = stats([r.best_test_acc for r in reps])
        rows.append(ComparisonRow(label, len(reps), fm, fs, bm, bs, fm - ref_mean))
    return ComparisonTable(ref_label, tuple(rows))


def load_reports(paths: Iterable[str | os.PathLike]) -> list[RunReport]:
    """Read every ``*.csv`` + ``*.summary.txt`` pair under the given directories."""
    reports = []
    for root in paths:
        root = Path(root)
        for csv_path in sorted(root.rglob("*.csv")):
            summary = csv_path.with_suffix(".summary.txt")
            if summary.exists():
                reports.append(RunReport.from_files(csv_path, summary))
    return reports


# ---------------------------------------------------------------------------
# orchestration


@dataclass
class ExperimentResult:
    out_dir: Path
    reports: list[RunReport]
    table: ComparisonTable | None
    failures: list[tuple[str, str]]

    @property
    def ok(self) -> bool:
        return not self.failures


def _write(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def output_dir(cfg: ExperimentConfig, out_root: str | os.PathLike | None = None) -> Path:
    root = Path(out_root or cfg["run.out"] or os.environ.get(OUT_ENV) or "runs")
    out = root / cfg.digest()
    saved = out / "config.txt"
    if saved.exists() and saved.read_text() != cfg.text:
        raise ValidationError(f"{out} already holds results for a different config")
    return out


def run_experiment(cfg: ExperimentConfig, out_root: str | os.PathLike | None = None) -> ExperimentResult:
    """Run every cell of ``cfg``, write per-run files, and build the comparison table."""
    out = output_dir(cfg, out_root)
    runs_dir = out / "runs"
    runs_dir.mkdir(parents=True, exist_ok=True)
    _write(out / "config.txt", cfg.text)
    train_set, test_set = load_datasets(cfg)
    arch = build_arch(cfg, train_set)
    specs = expand_runs(cfg)

    def run_one(spec: RunSpec) -> RunReport:
        params, report = train(spec.policy, arch, train_set, test_set, spec.settings, spec.seed, config_echo=_echo(cfg, spec))
        _write(runs_dir / f"{spec.stem}.csv", report.to_csv())
        _write(runs_dir / f"{spec.stem}.summary.txt", report.summary())
        if cfg["run.checkpoints"]:
            save_checkpoint(params, runs_dir / f"{spec.stem}.ckpt")
        return report

    outcomes: list[RunReport | BaseException] = []
    if cfg["run.parallel"]:
        with concurrent.futures.ThreadPoolExecutor() as pool:
            futures = [pool.submit(run_one, s) for s in specs]
            for fut in futures:
                try:
                    outcomes.append(fut.result())
                except Exception as err:  # noqa: BLE001 - recorded in the manifest
                    outcomes.append(err)
    else:
        for spec in specs:
            try:
                outcomes.append(run_one(spec))
            except Exception as err:  # noqa: BLE001 - recorded in the manifest
                logger.error("run %s failed:\n%s", spec.stem, traceback.format_exc())
                outcomes.append(err)
                break

    failures = [(s.stem, f"{type(o).__name__}: {o}") for s, o in zip(specs, outcomes) if isinstance(o, BaseException)]
    done = [s.stem for s, o in zip(specs, outcomes) if isinstance(o, RunReport)]
    pending = [s.stem for s in specs[len(outcomes) :]]
    manifest = [f"completed {stem}" for stem in done]
    manifest += [f"failed {stem} {msg}" for stem, msg in failures]
    manifest += [f"skipped {stem}" for stem in pending]
    _write(out / "manifest.txt", "\n".join(manifest) + "\n")
    if failures or pending:
        failures += [(stem, "skipped after earlier failure") for stem in pending]
        return ExperimentResult(out, [o for o in outcomes if isinstance(o, RunReport)], None, failures)

    # tabulate from the files on disk so the table always matches the CSVs
    reports = load_reports([runs_dir])
    order = {s.stem: i for i, s in enumerate(specs)}
    reports.sort(key=lambda r: order.get(run_stem(r.config["run.label"], r.seed), 0))
    reference = cfg["run.reference"] or cfg["policy.kind"][0]
    table = compare_runs(reports, reference)
    _write(out / "comparison.txt", table.format())
    _write(out / "comparison.csv", table.to_csv())
    return ExperimentResult(out, reports, table, [])
