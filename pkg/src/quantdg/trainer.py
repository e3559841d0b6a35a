"""ERM and quantization-aware training with periodic in-domain validation."""

from __future__ import annotations

import csv
import io
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import nn, quant
from .data import DomainDataset, SourceView, SplitPlan, TargetEvaluator, make_views
from .tensor import ContractError, NumericDomainError

DIVERGENCE_LOSS = 1e6
METRICS_HEADER = ("step", "train_loss", "val_acc", "target_acc")


@dataclass(frozen=True)
class TrainConfig:
    total_steps: int = 3000
    quantize_at: int | None = 1000
    validate_every: int = 100
    batch_per_domain: int = 16
    hidden_dims: tuple[int, ...] = (32,)
    optimizer: nn.OptimizerConfig = field(default_factory=nn.OptimizerConfig)
    quant: quant.QuantSpec = field(default_factory=quant.QuantSpec)
    quant_mode: str = "lsq"
    stage_fractions: tuple[float, ...] = (0.5, 0.75, 0.875, 1.0)
    seed: int = 0
    retain_all: bool = False

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(self.hidden_dims))
        object.__setattr__(self, "stage_fractions", tuple(self.stage_fractions))
        if self.total_steps < 1:
            raise ContractError("total_steps must be >= 1")
        if self.validate_every < 1:
            raise ContractError("validate_every must be >= 1")
        if self.batch_per_domain < 1:
            raise ContractError("batch_per_domain must be >= 1")
        if self.quantize_at is not None and not 0 < self.quantize_at < self.total_steps:
            raise ContractError("quantize_at must satisfy 0 < quantize_at < total_steps")
        if self.quant_mode not in ("lsq", "incremental"):
            raise ContractError("trainer quant_mode must be 'lsq' or 'incremental'")
        if self.quant_mode == "incremental":
            quant.validate_schedule(self.stage_fractions)

    @property
    def is_erm(self) -> bool:
        return self.quantize_at is None

    def stage_steps(self) -> list[int]:
        """Steps at which incremental stages fire, evenly spaced from ``quantize_at``."""
        n = len(self.stage_fractions)
        span = self.total_steps - self.quantize_at
        return [self.quantize_at + (k * span) // n for k in range(n)]


@dataclass(frozen=True)
class Checkpoint:
    step: int
    model: nn.Model
    val_acc: float
    target_acc: float
    train_loss: float


@dataclass
class RunRecord:
    config: TrainConfig
    steps: list[int] = field(default_factory=list)
    train_loss: list[float] = field(default_factory=list)
    val_acc: list[float] = field(default_factory=list)
    target_acc: list[float] = field(default_factory=list)
    best: Checkpoint | None = None
    last: Checkpoint | None = None
    checkpoints: list[Checkpoint] = field(default_factory=list)
    diverged: bool = False
    diagnostic: str = ""
    wall_clock: float = 0.0

    def metrics_rows(self) -> list[tuple]:
        return list(zip(self.steps, self.train_loss, self.val_acc, self.target_acc))

    def metrics_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(METRICS_HEADER)
        for step, loss, va, ta in self.metrics_rows():
            w.writerow([step, repr(loss), repr(va), repr(ta)])
        return buf.getvalue()


def _sample_batch(rng: np.random.Generator, view: SourceView, per_domain: int):
    xs, ys = [], []
    for x, y in zip(view.train_x, view.train_y):
        idx = rng.integers(0, len(y), per_domain)
        xs.append(x[idx])
        ys.append(y[idx])
    return np.vstack(xs), np.concatenate(ys)


def _target_acc(model: nn.Model, target: TargetEvaluator | None) -> float:
    if target is None:
        return float("nan")
    return target.score(lambda x, y: nn.accuracy(model, x, y))


def train_views(view: SourceView, config: TrainConfig, target: TargetEvaluator | None = None) -> RunRecord:
    """Training loop over source data only; ``target`` is scored, never trained on.

    Before ``quantize_at`` this is plain ERM. At ``quantize_at`` per-channel
    steps are initialized from the current weights and every layer but the last
    is fake-quantized from then on.
    """
    t0 = time.perf_counter()
    rng = np.random.default_rng(config.seed)
    spec = nn.MlpSpec(
        input_dim=view.input_dim,
        hidden_dims=config.hidden_dims,
        num_classes=view.num_classes,
        seed=int(rng.integers(0, 2**32)),
    )
    model = nn.init_model(spec)
    record = RunRecord(config=config)
    train_x, train_y = view.all_train
    stage_at = config.stage_steps() if config.quant_mode == "incremental" and not config.is_erm else []

    for step in range(config.total_steps):
        if step == config.quantize_at:
            quant.attach(model, config.quant, mode=config.quant_mode)
        if step in stage_at:
            quant.incremental_step(model, config.stage_fractions)
        xb, yb = _sample_batch(rng, view, config.batch_per_domain)
        try:
            loss, grads = nn.loss_and_grads(model, xb, yb)
            if not math.isfinite(loss) or loss > DIVERGENCE_LOSS:
                raise NumericDomainError(f"loss {loss!r} beyond divergence threshold")
            nn.optimizer_step(model, grads, config.optimizer)
        except NumericDomainError as exc:
            record.diverged = True
            record.diagnostic = f"step {step}: {exc}"
            break
        done = step + 1
        if done % config.validate_every == 0 or done == config.total_steps:
            _validate(record, model, done, view, train_x, train_y, target, config)

    record.wall_clock = time.perf_counter() - t0
    return record


def _validate(record, model, done, view, train_x, train_y, target, config) -> None:
    train_loss = nn.loss_value(model, train_x, train_y)
    val_acc = nn.accuracy(model, view.val_x, view.val_y)
    target_acc = _target_acc(model, target)
    record.steps.append(done)
    record.train_loss.append(train_loss)
    record.val_acc.append(val_acc)
    record.target_acc.append(target_acc)
    ck = Checkpoint(step=done, model=model.copy(), val_acc=val_acc, target_acc=target_acc, train_loss=train_loss)
    record.last = ck
    if record.best is None or val_acc > record.best.val_acc:
        record.best = ck
    if config.retain_all:
        record.checkpoints.append(ck)


def train(ds: DomainDataset, split: SplitPlan, config: TrainConfig) -> RunRecord:
    view, target = make_views(ds, split)
    return train_views(view, config, target)


def select_best(record: RunRecord) -> Checkpoint:
    """Checkpoint with the highest in-domain validation accuracy, earliest on ties."""
    if not record.val_acc:
        raise ContractError("select_best: no validation points recorded")
    i = int(np.argmax(record.val_acc))
    step = record.steps[i]
    for ck in (record.best, record.last, *record.checkpoints):
        if ck is not None and ck.step == step:
            return ck
    # metrics-only record (model weights not retained at this step)
    return Checkpoint(
        step=step, model=None, val_acc=record.val_acc[i], target_acc=record.target_acc[i], train_loss=record.train_loss[i]
    )


@dataclass(frozen=True)
class StabilityStats:
    mean: float
    std: float
    n: int
    degenerate: bool


def stability_stats(record: RunRecord, window_start: int) -> StabilityStats:
    """Mean and sample std of target accuracy over validation points at or after ``window_start``."""
    if not record.steps:
        raise ContractError("stability_stats: empty record")
    if window_start > record.steps[-1]:
        raise ContractError(f"window_start {window_start} is past the last recorded step {record.steps[-1]}")
    acc = np.array([a for s, a in zip(record.steps, record.target_acc) if s >= window_start])
    if acc.size == 0:
        raise ContractError("stability_stats: empty window")
    if acc.size == 1:
        return StabilityStats(mean=float(acc[0]), std=0.0, n=1, degenerate=True)
    return StabilityStats(mean=float(acc.mean()), std=float(acc.std(ddof=1)), n=int(acc.size), degenerate=False)
