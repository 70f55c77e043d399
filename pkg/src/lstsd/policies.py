"""Training loops: LSTSD, its ablations, and the one-generation baselines.

All policies share one loop (:func:`train`) that owns shuffling, batching,
the SGD step and metrics.  A policy object only decides the per-step loss
and what to remember between steps, epochs and mini-generations.
"""
from __future__ import annotations

import csv
import io
import logging
import time
from collections.abc import Callable, Mapping, Sequence
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .data import LabeledDataset, augment_epoch, batches, shuffle_epoch
from .distill import LossBreakdown, TeacherStore, assemble_loss, distill_total
from .errors import DimensionError, FormatError, ValidationError
from .models import ModelArch, ModelParams, forward, init_params, predict_logits
from .optim import LrSchedule, SgdState, lr_at, sgd_nesterov_step

logger = logging.getLogger(__name__)

POLICY_KINDS = (
    "vanilla",
    "lstsd",
    "lstsd_no_long",
    "lstsd_no_short",
    "lstsd_single",
    "mean_teacher",
    "temporal_ensembles",
    "snapshot_ensembles",
    "snapshot_distillation",
)
LSTSD_KINDS = ("lstsd", "lstsd_no_long", "lstsd_no_short", "lstsd_single")
SNAPSHOT_KINDS = ("snapshot_ensembles", "snapshot_distillation")
TEACHER_TIMINGS = ("pre_update", "post_update")


@dataclass(frozen=True)
class PolicyConfig:
    kind: str = "lstsd"
    lambda_long: float = 2.4
    lambda_short: float = 4.0
    temperature: float = 2.0
    mini_gen_epochs: int = 6
    mini_generations: int = 5
    alpha_mean_teacher: float = 0.999
    alpha_temporal: float = 0.6
    lambda_baseline: float = 1.0
    teacher_timing: str = "pre_update"
    reverse_kl: bool = False

    def __post_init__(self):
        if self.kind not in POLICY_KINDS:
            raise ValidationError(f"unknown policy kind {self.kind!r}")
        if self.lambda_long < 0 or self.lambda_short < 0 or self.lambda_baseline < 0:
            raise ValidationError("loss weights must be >= 0")
        if self.kind == "lstsd_no_long" and self.lambda_long != 0:
            raise ValidationError(f"lstsd_no_long requires lambda_long == 0, got {self.lambda_long}")
        if self.kind == "lstsd_no_short" and self.lambda_short != 0:
            raise ValidationError(f"lstsd_no_short requires lambda_short == 0, got {self.lambda_short}")
        if not self.temperature > 0:
            raise ValidationError(f"temperature must be positive, got {self.temperature}")
        if self.mini_gen_epochs < 1 or self.mini_generations < 1:
            raise ValidationError("mini_gen_epochs and mini_generations must be >= 1")
        if not 0 < self.alpha_mean_teacher < 1 or not 0 < self.alpha_temporal < 1:
            raise ValidationError("EMA constants must lie in (0, 1)")
        if self.teacher_timing not in TEACHER_TIMINGS:
            raise ValidationError(f"teacher_timing must be one of {TEACHER_TIMINGS}")

    @classmethod
    def for_kind(cls, kind: str, **overrides) -> "PolicyConfig":
        """Config for ``kind`` with the ablated weight zeroed unless given explicitly."""
        if kind == "lstsd_no_long":
            overrides.setdefault("lambda_long", 0.0)
        elif kind == "lstsd_no_short":
            overrides.setdefault("lambda_short", 0.0)
        return cls(kind=kind, **overrides)

    @property
    def total_epochs(self) -> int:
        return self.mini_gen_epochs * self.mini_generations


@dataclass(frozen=True)
class TrainSettings:
    schedule: LrSchedule = field(default_factory=LrSchedule)
    batch_size: int = 128
    momentum: float = 0.9
    weight_decay: float = 1e-4
    augment: bool = False
    pad: int = 4
    flip_prob: float = 0.5


CSV_COLUMNS = (
    "epoch",
    "mini_gen",
    "lr",
    "loss_total",
    "loss_ce",
    "loss_kl_long",
    "loss_kl_short",
    "train_acc",
    "test_acc",
)


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    mini_gen: int
    lr: float
    loss_total: float
    loss_ce: float
    loss_kl_long: float
    loss_kl_short: float
    train_acc: float
    test_acc: float


@dataclass
class RunReport:
    epochs: list[EpochRecord]
    best_test_acc: float
    final_test_acc: float
    wall_clock: float
    seed: int
    config: dict[str, str] = field(default_factory=dict)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for r in self.epochs:
            writer.writerow(
                [
                    r.epoch,
                    r.mini_gen,
                    repr(r.lr),
                    repr(r.loss_total),
                    repr(r.loss_ce),
                    repr(r.loss_kl_long),
                    repr(r.loss_kl_short),
                    f"{r.train_acc:.4f}",
                    f"{r.test_acc:.4f}",
                ]
            )
        return buf.getvalue()

    def summary(self) -> str:
        lines = [
            f"seed = {self.seed}",
            f"epochs = {len(self.epochs)}",
            f"best_test_acc = {self.best_test_acc:.4f}",
            f"final_test_acc = {self.final_test_acc:.4f}",
            f"wall_clock_seconds = {self.wall_clock:.3f}",
        ]
        lines += [f"config.{k} = {v}" for k, v in self.config.items()]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_files(cls, csv_path: str | Path, summary_path: str | Path) -> "RunReport":
        """Rebuild a report from its CSV and summary; accuracies come from the CSV."""
        rows = list(csv.DictReader(io.StringIO(Path(csv_path).read_text())))
        if not rows or tuple(rows[0].keys()) != CSV_COLUMNS:
            raise FormatError(f"{csv_path}: not a metrics CSV")
        epochs = [
            EpochRecord(
                int(r["epoch"]),
                int(r["mini_gen"]),
                *(float(r[c]) for c in CSV_COLUMNS[2:]),
            )
            for r in rows
        ]
        meta = {}
        for line in Path(summary_path).read_text().splitlines():
            key, _, value = line.partition(" = ")
            meta[key] = value
        config = {k[len("config.") :]: v for k, v in meta.items() if k.startswith("config.")}
        accs = [e.test_acc for e in epochs]
        return cls(
            epochs=epochs,
            best_test_acc=max(accs),
            final_test_acc=accs[-1],
            wall_clock=float(meta.get("wall_clock_seconds", "nan")),
            seed=int(meta["seed"]),
            config=config,
        )


@dataclass
class StepEvent:
    """What an observer sees after each optimisation step."""

    epoch: int
    mini_gen: int
    epoch_in_gen: int
    step: int
    ids: np.ndarray
    params_before: ModelParams
    logits: np.ndarray
    breakdown: LossBreakdown
    lr: float
    teacher_long: np.ndarray | None = None
    teacher_short: np.ndarray | None = None
    store: TeacherStore | None = None


# ---------------------------------------------------------------------------
# baseline update rules


def mean_teacher_update(ema: ModelParams, current: ModelParams, alpha: float) -> ModelParams:
    """theta' <- alpha * theta' + (1 - alpha) * theta, per tensor."""
    if list(ema) != list(current):
        raise DimensionError(f"parameter names differ: {list(ema)} vs {list(current)}")
    out = {}
    for name in ema:
        a, b = ema[name].data, current[name].data
        if a.shape != b.shape:
            raise DimensionError(f"{name}: ema shape {a.shape} vs current {b.shape}")
        out[name] = alpha * a + (1.0 - alpha) * b
    return ModelParams(out)


def temporal_ensemble_update(ensemble: np.ndarray, z_epoch: np.ndarray, alpha: float) -> np.ndarray:
    """Z <- alpha * Z + (1 - alpha) * z."""
    if ensemble.shape != z_epoch.shape:
        raise DimensionError(f"ensemble shape {ensemble.shape} vs epoch predictions {z_epoch.shape}")
    return alpha * ensemble + (1.0 - alpha) * z_epoch


def snapshot_ensembles_predict(snapshots: Sequence[ModelParams], arch: ModelArch, batch) -> ad.Tensor:
    """Mean of the snapshots' temperature-1 softmax outputs."""
    if not snapshots:
        raise ValidationError("snapshot ensemble needs at least one snapshot")
    probs = [ad.softmax_t(predict_logits(s, arch, np.asarray(batch)), 1.0).data for s in snapshots]
    return ad.Tensor(np.mean(probs, axis=0))


def evaluate(params: ModelParams, arch: ModelArch, dataset: LabeledDataset) -> float:
    """Fraction of samples whose argmax logit (lowest index on ties) equals the label."""
    pred = predict_logits(params, arch, dataset.features).argmax(axis=1)
    return int((pred == dataset.labels).sum()) / len(dataset)


# ---------------------------------------------------------------------------
# policies


@dataclass
class StepContext:
    mini_gen: int
    epoch_in_gen: int
    ids: np.ndarray
    x: np.ndarray
    params: ModelParams


class Policy:
    """CE-only training; subclasses add teacher terms."""

    def __init__(self, cfg: PolicyConfig, arch: ModelArch, n: int):
        self.cfg = cfg
        self.arch = arch
        self.n = n

    def teacher_inputs(self, ctx: StepContext):
        return None

    def loss(self, logits: ad.Tensor, labels: np.ndarray, ctx: StepContext, teacher) -> tuple[ad.Tensor, LossBreakdown]:
        return distill_total(ad.cross_entropy(logits, labels), None, None, 0.0, 0.0)

    def teacher_rows(self, ctx: StepContext):
        return None, None

    def after_step(self, ctx: StepContext, logits: np.ndarray, new_params: ModelParams) -> None:
        pass

    def end_epoch(self, params: ModelParams, mini_gen: int, epoch_in_gen: int) -> None:
        pass

    def end_mini_gen(self, params: ModelParams) -> None:
        pass

    def test_accuracy(self, params: ModelParams, test_set: LabeledDataset) -> float:
        return evaluate(params, self.arch, test_set)

    @property
    def store(self) -> TeacherStore | None:
        return None

    def _recorded(self, ctx: StepContext, logits: np.ndarray, new_params: ModelParams) -> np.ndarray:
        if self.cfg.teacher_timing == "pre_update":
            return logits
        return forward(new_params, self.arch, ctx.x).data


class LstsdPolicy(Policy):
    """Per-sample short/long-term teachers recorded as samples are consumed."""

    def __init__(self, cfg, arch, n):
        super().__init__(cfg, arch, n)
        self._store = TeacherStore(n, arch.num_classes)

    @property
    def store(self):
        return self._store

    def loss(self, logits, labels, ctx, teacher):
        return assemble_loss(
            logits,
            labels,
            self._store,
            ctx.ids,
            self.cfg.lambda_long,
            self.cfg.lambda_short,
            self.cfg.temperature,
            ctx.mini_gen,
            reverse_kl=self.cfg.reverse_kl,
        )

    def teacher_rows(self, ctx):
        if ctx.mini_gen <= 1:
            return None, None
        return self._store.read(ctx.ids, "long"), self._store.read(ctx.ids, "short")

    def after_step(self, ctx, logits, new_params):
        values = self._recorded(ctx, logits, new_params)
        self._store.record_short(ctx.ids, values)
        if ctx.epoch_in_gen == self.cfg.mini_gen_epochs:
            self._store.record_long(ctx.ids, values, final_epoch=True)


class LstsdSinglePolicy(LstsdPolicy):
    """All samples share one teacher: the last snapshot of the previous epoch / mini-generation.

    The snapshot is the model that consumed the epoch's final batch (before its
    update, or after it with ``teacher_timing="post_update"``).  Its logits are
    materialised for every sample at epoch end by replaying the epoch's batches.
    """

    def __init__(self, cfg, arch, n):
        super().__init__(cfg, arch, n)
        self._epoch_batches: list[tuple[np.ndarray, np.ndarray]] = []
        self._last_snapshot: ModelParams | None = None

    def after_step(self, ctx, logits, new_params):
        self._epoch_batches.append((ctx.ids, ctx.x))
        self._last_snapshot = ctx.params if self.cfg.teacher_timing == "pre_update" else new_params

    def end_epoch(self, params, mini_gen, epoch_in_gen):
        final = epoch_in_gen == self.cfg.mini_gen_epochs
        for ids, x in self._epoch_batches:
            values = forward(self._last_snapshot, self.arch, x).data
            self._store.record_short(ids, values)
            if final:
                self._store.record_long(ids, values, final_epoch=True)
        self._epoch_batches = []


class MeanTeacherPolicy(Policy):
    """Teacher is an every-iteration EMA of the parameters."""

    def __init__(self, cfg, arch, n, init: ModelParams):
        super().__init__(cfg, arch, n)
        self.ema = init.copy()

    def teacher_inputs(self, ctx):
        return ad.softmax_t(forward(self.ema, self.arch, ctx.x), self.cfg.temperature).data

    def loss(self, logits, labels, ctx, teacher):
        ce = ad.cross_entropy(logits, labels)
        kl = ad.kl_divergence(logits, teacher, self.cfg.temperature, reverse=self.cfg.reverse_kl)
        return distill_total(ce, None, kl, 0.0, self.cfg.lambda_baseline)

    def after_step(self, ctx, logits, new_params):
        self.ema = mean_teacher_update(self.ema, new_params, self.cfg.alpha_mean_teacher)


class TemporalEnsemblePolicy(Policy):
    """Teacher is a per-sample EMA of softened predictions, updated every epoch."""

    def __init__(self, cfg, arch, n):
        super().__init__(cfg, arch, n)
        self.ensemble: np.ndarray | None = None
        self.z_epoch = np.zeros((n, arch.num_classes))

    def teacher_inputs(self, ctx):
        if self.ensemble is None:
            return None
        rows = self.ensemble[ctx.ids]
        return rows / rows.sum(axis=1, keepdims=True)

    def loss(self, logits, labels, ctx, teacher):
        ce = ad.cross_entropy(logits, labels)
        if teacher is None:
            return distill_total(ce, None, None, 0.0, self.cfg.lambda_baseline)
        kl = ad.kl_divergence(logits, teacher, self.cfg.temperature, reverse=self.cfg.reverse_kl)
        return distill_total(ce, None, kl, 0.0, self.cfg.lambda_baseline)

    def after_step(self, ctx, logits, new_params):
        values = self._recorded(ctx, logits, new_params)
        self.z_epoch[ctx.ids] = ad.softmax_t(values, self.cfg.temperature).data

    def end_epoch(self, params, mini_gen, epoch_in_gen):
        if self.ensemble is None:
            self.ensemble = self.z_epoch.copy()
        else:
            self.ensemble = temporal_ensemble_update(self.ensemble, self.z_epoch, self.cfg.alpha_temporal)


class SnapshotEnsemblePolicy(Policy):
    """CE training under a cyclic schedule; test accuracy is that of the snapshot ensemble."""

    def __init__(self, cfg, arch, n):
        super().__init__(cfg, arch, n)
        self.snapshots: list[ModelParams] = []
        self._gen_closed = False

    def end_epoch(self, params, mini_gen, epoch_in_gen):
        self._gen_closed = False

    def end_mini_gen(self, params):
        self.snapshots.append(params.copy())
        self._gen_closed = True

    def test_accuracy(self, params, test_set):
        members = self.snapshots if self._gen_closed else [*self.snapshots, params]
        probs = snapshot_ensembles_predict(members, self.arch, test_set.features).data
        return int((probs.argmax(axis=1) == test_set.labels).sum()) / len(test_set)


class SnapshotDistillationPolicy(Policy):
    """Teacher is a frozen copy of the parameters from the end of the previous mini-generation."""

    def __init__(self, cfg, arch, n):
        super().__init__(cfg, arch, n)
        self.teacher: ModelParams | None = None

    def teacher_inputs(self, ctx):
        if self.teacher is None:
            return None
        return ad.softmax_t(forward(self.teacher, self.arch, ctx.x), self.cfg.temperature).data

    def loss(self, logits, labels, ctx, teacher):
        ce = ad.cross_entropy(logits, labels)
        if teacher is None:
            return distill_total(ce, None, None, self.cfg.lambda_baseline, 0.0)
        kl = ad.kl_divergence(logits, teacher, self.cfg.temperature, reverse=self.cfg.reverse_kl)
        return distill_total(ce, kl, None, self.cfg.lambda_baseline, 0.0)

    def end_mini_gen(self, params):
        self.teacher = params.copy()


def make_policy(cfg: PolicyConfig, arch: ModelArch, n: int, init: ModelParams) -> Policy:
    if cfg.kind == "vanilla":
        return Policy(cfg, arch, n)
    if cfg.kind == "lstsd_single":
        return LstsdSinglePolicy(cfg, arch, n)
    if cfg.kind in LSTSD_KINDS:
        return LstsdPolicy(cfg, arch, n)
    if cfg.kind == "mean_teacher":
        return MeanTeacherPolicy(cfg, arch, n, init)
    if cfg.kind == "temporal_ensembles":
        return TemporalEnsemblePolicy(cfg, arch, n)
    if cfg.kind == "snapshot_ensembles":
        return SnapshotEnsemblePolicy(cfg, arch, n)
    return SnapshotDistillationPolicy(cfg, arch, n)


# ---------------------------------------------------------------------------
# the shared loop


def _validate(policy: PolicyConfig, arch: ModelArch, train_set, test_set, settings: TrainSettings) -> None:
    for name, ds in (("train", train_set), ("test", test_set)):
        if ds.num_classes != arch.num_classes:
            raise ValidationError(f"{name} set has {ds.num_classes} classes, architecture expects {arch.num_classes}")
        if tuple(ds.input_shape) != arch.input_shape:
            raise ValidationError(f"{name} set input shape {ds.input_shape} does not match {arch.input_shape}")
    if settings.batch_size < 1:
        raise ValidationError(f"batch_size must be >= 1, got {settings.batch_size}")
    if policy.kind in SNAPSHOT_KINDS:
        sched = settings.schedule
        if sched.variant != "cyclic_cosine" or sched.cycle_epochs != policy.mini_gen_epochs:
            raise ValidationError(
                f"{policy.kind} needs a cyclic_cosine schedule with cycle_epochs={policy.mini_gen_epochs}"
            )
    if settings.augment and train_set.features.ndim != 4:
        raise ValidationError("augmentation needs image features (N x c x h x w)")


def _mean_breakdown(items: list[LossBreakdown]) -> dict[str, float]:
    n = len(items)
    return {
        "loss_total": sum(b.total for b in items) / n,
        "loss_ce": sum(b.ce for b in items) / n,
        "loss_kl_long": sum(b.kl_long for b in items) / n,
        "loss_kl_short": sum(b.kl_short for b in items) / n,
    }


def train(
    policy: PolicyConfig,
    arch: ModelArch,
    train_set: LabeledDataset,
    test_set: LabeledDataset,
    settings: TrainSettings,
    seed: int,
    observer: Callable[[StepEvent], None] | None = None,
    config_echo: Mapping[str, str] | None = None,
) -> tuple[ModelParams, RunReport]:
    """Run ``policy`` for ``mini_generations * mini_gen_epochs`` epochs."""
    _validate(policy, arch, train_set, test_set, settings)
    started = time.perf_counter()
    params = init_params(arch, seed)
    state = SgdState.zeros_like(params, settings.momentum, settings.weight_decay)
    runner = make_policy(policy, arch, len(train_set), params)
    total_epochs = policy.total_epochs
    records: list[EpochRecord] = []
    step = 0

    for g in range(total_epochs):
        mini_gen = g // policy.mini_gen_epochs + 1
        epoch_in_gen = g % policy.mini_gen_epochs + 1
        lr = lr_at(settings.schedule, g, total_epochs)
        features = (
            augment_epoch(train_set.features, settings.pad, settings.flip_prob, seed, g)
            if settings.augment
            else train_set.features
        )
        order = shuffle_epoch(len(train_set), seed, g)
        losses: list[LossBreakdown] = []
        correct = 0
        for ids in batches(order, settings.batch_size):
            x, y = features[ids], train_set.labels[ids]
            ctx = StepContext(mini_gen, epoch_in_gen, ids, x, params)
            teacher = runner.teacher_inputs(ctx)
            with ad.Tape():
                logits = forward(params, arch, x)
                loss, breakdown = runner.loss(logits, y, ctx, teacher)
            ad.backward(loss)
            teacher_long, teacher_short = runner.teacher_rows(ctx) if observer else (None, None)
            new_params, state = sgd_nesterov_step(params, params.gradients(), state, lr)
            runner.after_step(ctx, logits.data, new_params)
            if observer is not None:
                observer(
                    StepEvent(
                        g + 1, mini_gen, epoch_in_gen, step, ids, params, logits.data.copy(), breakdown, lr,
                        teacher_long, teacher_short, runner.store,
                    )
                )
            losses.append(breakdown)
            correct += int((logits.data.argmax(axis=1) == y).sum())
            params = new_params
            step += 1
        runner.end_epoch(params, mini_gen, epoch_in_gen)
        if epoch_in_gen == policy.mini_gen_epochs:
            runner.end_mini_gen(params)
        test_acc = runner.test_accuracy(params, test_set)
        records.append(
            EpochRecord(g + 1, mini_gen, lr, **_mean_breakdown(losses), train_acc=correct / len(train_set), test_acc=test_acc)
        )
        logger.info(
            "%s seed=%d epoch %d/%d lr=%.4g loss=%.4f test_acc=%.4f",
            policy.kind, seed, g + 1, total_epochs, lr, records[-1].loss_total, test_acc,
        )

    accs = [float(f"{r.test_acc:.4f}") for r in records]
    report = RunReport(
        epochs=records,
        best_test_acc=max(accs),
        final_test_acc=accs[-1],
        wall_clock=time.perf_counter() - started,
        seed=seed,
        config=dict(config_echo or {}),
    )
    return params, report


def policy_echo(policy: PolicyConfig) -> dict[str, str]:
    return {f"policy.{f.name}": str(getattr(policy, f.name)) for f in fields(policy)}
