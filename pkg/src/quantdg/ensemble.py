"""Ensembles of independently trained quantized models.

Members are combined by averaging logits and taking the softmax argmax.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import nn, quant
from .data import DomainDataset, make_views, split_leave_one_out
from .tensor import ContractError
from .trainer import TrainConfig, select_best, train_views


@dataclass(frozen=True)
class EnsembleSpec:
    train: TrainConfig
    members: tuple[tuple[int, int], ...] = tuple((k, 1000 + k) for k in range(5))

    def __post_init__(self):
        object.__setattr__(self, "members", tuple(tuple(int(v) for v in m) for m in self.members))
        if not self.members:
            raise ContractError("an ensemble needs at least one member")
        if len(set(self.members)) != len(self.members):
            raise ContractError(f"member seeds must be pairwise distinct: {self.members}")
        if self.train.is_erm:
            raise ContractError("ensemble members must be quantized (set quantize_at)")

    @classmethod
    def of_size(cls, train: TrainConfig, size: int = 5, base_seed: int = 0) -> EnsembleSpec:
        return cls(train=train, members=tuple((base_seed + k, base_seed + 1000 + k) for k in range(size)))

    @property
    def size(self) -> int:
        return len(self.members)


def predict_eoq(members, x) -> tuple[np.ndarray, np.ndarray]:
    """Class indices and probabilities from the softmax of the mean member logits.

    ``np.argmax`` returns the first maximum, so ties go to the lowest class index.
    """
    models = [m.model if hasattr(m, "model") else m for m in members]
    if not models:
        raise ContractError("predict_eoq: empty member list")
    dims = {(m.spec.input_dim, m.spec.num_classes) for m in models}
    if len(dims) != 1:
        raise ContractError(f"members disagree on input/output dims: {sorted(dims)}")
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    logits = sum(nn.forward(m, x).data for m in models) / len(models)
    probs = np.exp(nn.log_softmax(logits))
    return probs.argmax(axis=1), probs


@dataclass
class MemberResult:
    split_seed: int
    train_seed: int
    status: str
    best_step: int | None = None
    val_acc: float | None = None
    target_acc: float | None = None
    bytes: float = 0.0
    diagnostic: str = ""

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class EnsembleReport:
    target_domain: str
    bits: int
    members: list[MemberResult]
    ensemble_acc: float | None
    mean_member_acc: float | None
    total_bytes: float
    full_precision_bytes: float
    relative_size: float
    flagged: bool = False
    models: list = field(default_factory=list, repr=False)

    def to_dict(self) -> dict:
        return {
            "target_domain": self.target_domain,
            "bits": self.bits,
            "ensemble_size": len(self.members),
            "survivors": sum(m.status == "ok" for m in self.members),
            "flagged": self.flagged,
            "ensemble_target_acc": self.ensemble_acc,
            "mean_member_target_acc": self.mean_member_acc,
            "members": [m.to_dict() for m in self.members],
            "bytes": {
                "total_quantized": self.total_bytes,
                "one_full_precision": self.full_precision_bytes,
                "relative_size": self.relative_size,
                "relative_size_measured": self.total_bytes / self.full_precision_bytes,
            },
        }


def relative_size(n_members: int, bits: int) -> float:
    """Nominal ensemble size in units of one float32 model."""
    return n_members * bits / 32


def run_eoq(ds: DomainDataset, target_domain: str, spec: EnsembleSpec) -> EnsembleReport:
    """Train every member on its own split, keep each best checkpoint, score the ensemble."""
    results, models = [], []
    target = None
    for split_seed, train_seed in spec.members:
        plan = split_leave_one_out(ds, target_domain, seed=split_seed)
        view, target = make_views(ds, plan)
        rec = train_views(view, replace(spec.train, seed=train_seed), target)
        if rec.diverged or not rec.val_acc:
            results.append(MemberResult(split_seed, train_seed, "failed", diagnostic=rec.diagnostic))
            continue
        best = select_best(rec)
        models.append(best.model)
        results.append(
            MemberResult(
                split_seed,
                train_seed,
                "ok",
                best_step=best.step,
                val_acc=best.val_acc,
                target_acc=best.target_acc,
                bytes=quant.storage_bytes(best.model),
            )
        )
    bits = spec.train.quant.bits
    dims = [ds.input_dim, *spec.train.hidden_dims, ds.num_classes]
    fp_bytes = 4.0 * sum(o * i + o for i, o in zip(dims[:-1], dims[1:]))
    survivors = [r for r in results if r.status == "ok"]
    if survivors:
        ens_acc = target.score(lambda x, y: float((predict_eoq(models, x)[0] == y).mean()))
        mean_acc = float(np.mean([r.target_acc for r in survivors]))
    else:
        ens_acc = mean_acc = None
    return EnsembleReport(
        target_domain=target_domain,
        bits=bits,
        members=results,
        ensemble_acc=ens_acc,
        mean_member_acc=mean_acc,
        total_bytes=float(sum(r.bytes for r in results)),
        full_precision_bytes=fp_bytes,
        relative_size=relative_size(len(spec.members), bits),
        flagged=len(survivors) < len(results),
        models=models,
    )

