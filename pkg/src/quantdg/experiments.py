"""Multi-seed directional studies on the default benchmark.

One ``run_study`` call trains an ERM baseline and a QAT run per bit-width for
every seed; the ``compare_*`` helpers then reduce those runs into the paired
statistics the experiment scripts and the acceptance suite report.
"""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import analysis, data, nn, quant
from .ensemble import EnsembleSpec, run_eoq
from .quant import QuantSpec
from .trainer import RunRecord, TrainConfig, select_best, train_views


@dataclass(frozen=True)
class StudyConfig:
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    bits: tuple[int, ...] = (2, 3, 4, 5, 6, 7, 8)
    total_steps: int = 3000
    quantize_at: int = 1000
    validate_every: int = 100
    n_per_domain: int = 500
    signal_sep: float = data.DEFAULT_SIGNAL_SEP
    jobs: int = 1

    def train_config(self, seed: int, bits: int | None) -> TrainConfig:
        base = TrainConfig(
            total_steps=self.total_steps,
            quantize_at=None,
            validate_every=self.validate_every,
            seed=seed,
            retain_all=True,
        )
        if bits is None:
            return base
        return replace(base, quantize_at=self.quantize_at, quant=QuantSpec(bits=bits))


@dataclass
class SeedRuns:
    seed: int
    view: data.SourceView
    target: data.TargetEvaluator
    erm: RunRecord
    qat: dict[int, RunRecord] = field(default_factory=dict)


def _dataset(cfg: StudyConfig, seed: int):
    ds = data.default_benchmark(seed=seed, n_per_domain=cfg.n_per_domain, signal_sep=cfg.signal_sep)
    plan = data.split_leave_one_out(ds, ds.names[-1], seed=seed)
    return data.make_views(ds, plan)


def _job(args):
    cfg, seed, bits = args
    view, target = _dataset(cfg, seed)
    return train_views(view, cfg.train_config(seed, bits), target)


def run_study(cfg: StudyConfig) -> list[SeedRuns]:
    """Dataset, split and training seeds all equal the study seed."""
    keys = [(seed, b) for seed in cfg.seeds for b in (None, *cfg.bits)]
    args = [(cfg, seed, b) for seed, b in keys]
    if cfg.jobs > 1:
        with ProcessPoolExecutor(max_workers=cfg.jobs) as pool:
            recs = list(pool.map(_job, args))
    else:
        recs = [_job(a) for a in args]
    by_key = dict(zip(keys, recs))
    out = []
    for seed in cfg.seeds:
        view, target = _dataset(cfg, seed)
        runs = SeedRuns(seed=seed, view=view, target=target, erm=by_key[(seed, None)])
        runs.qat = {b: by_key[(seed, b)] for b in cfg.bits}
        out.append(runs)
    return out


def _best_target(rec: RunRecord) -> float:
    return float("nan") if rec.diverged or not rec.val_acc else select_best(rec).target_acc


def select_bits(study: list[SeedRuns], candidates) -> int:
    """Bit-width with the highest mean selected-checkpoint source-validation accuracy.

    Selection never looks at target accuracy; ties go to the larger bit-width.
    """
    scores = {}
    for b in candidates:
        vals = [select_best(r.qat[b]).val_acc for r in study if not r.qat[b].diverged]
        scores[b] = float(np.mean(vals)) if vals else -1.0
    return max(sorted(candidates), key=lambda b: (scores[b], b))


def bit_table(study: list[SeedRuns]) -> dict:
    """Per-bit mean selected val and target accuracy (key 32 is ERM)."""
    rows = {32: [(select_best(r.erm).val_acc, _best_target(r.erm)) for r in study]}
    for b in study[0].qat:
        rows[b] = [(select_best(r.qat[b]).val_acc, _best_target(r.qat[b])) for r in study]
    return {b: {"val": float(np.mean([v for v, _ in rs])), "target": float(np.nanmean([t for _, t in rs]))} for b, rs in rows.items()}


def compare_accuracy(study: list[SeedRuns], bits: int) -> dict:
    erm = np.array([_best_target(r.erm) for r in study])
    qat = np.array([_best_target(r.qat[bits]) for r in study])
    diff = qat - erm
    return {
        "bits": bits,
        "erm": erm.tolist(),
        "qat": qat.tolist(),
        "erm_mean": float(erm.mean()),
        "qat_mean": float(qat.mean()),
        "paired_nonneg": int(np.sum(diff >= 0)),
    }


def _window_std(rec: RunRecord, start: int) -> float:
    acc = [a for s, a in zip(rec.steps, rec.target_acc) if s > start]
    return float(np.std(acc, ddof=1))


def compare_stability(study: list[SeedRuns], bits: int, window_start: int) -> dict:
    """Sample std of target accuracy over checkpoints after ``window_start`` for both runs."""
    erm = [_window_std(r.erm, window_start) for r in study]
    qat = [_window_std(r.qat[bits], window_start) for r in study]
    return {"erm_std": erm, "qat_std": qat, "qat_le_erm": int(sum(q <= e for q, e in zip(qat, erm)))}


def matched_erm_checkpoint(erm: RunRecord, train_loss: float):
    """ERM checkpoint whose full source-train loss is closest to ``train_loss``."""
    return min(erm.checkpoints, key=lambda c: abs(c.train_loss - train_loss))


def compare_flatness(study: list[SeedRuns], bits: int, samples: int = 100, tolerance: float = 0.10) -> dict:
    """Paired flatness of the selected QAT checkpoint and the loss-matched ERM checkpoint.

    Both profiles share one radius grid (scaled by the ERM checkpoint's RMS
    weight) and one set of directions.
    """
    per_seed = []
    for r in study:
        q = select_best(r.qat[bits])
        e = matched_erm_checkpoint(r.erm, q.train_loss)
        matched = abs(e.train_loss - q.train_loss) <= tolerance * q.train_loss
        gammas = analysis.scaled_gammas(e.model)
        tx, ty = r.target.unseal()
        entry = {"seed": r.seed, "qat_step": q.step, "erm_step": e.step, "qat_loss": q.train_loss, "erm_loss": e.train_loss, "matched": matched}
        for tag, (x, y) in (("source", (r.view.val_x, r.view.val_y)), ("target", (tx, ty))):
            fq = analysis.flatness(q.model, x, y, gammas, samples=samples, seed=r.seed, eval_set=tag)
            fe = analysis.flatness(e.model, x, y, gammas, samples=samples, seed=r.seed, eval_set=tag)
            wins = sum(a <= b for a, b in zip(fq.mean, fe.mean))
            entry[tag] = {"qat": fq.mean, "erm": fe.mean, "wins": wins, "majority": wins > len(gammas) / 2}
        entry["pass"] = matched and entry["source"]["majority"] and entry["target"]["majority"]
        per_seed.append(entry)
    return {"per_seed": per_seed, "passing_seeds": sum(e["pass"] for e in per_seed)}


def compare_ptq(study: list[SeedRuns], bits: int) -> dict:
    """Round-to-nearest PTQ of the selected ERM checkpoint vs the QAT run at ``bits``."""
    ptq, qat = [], []
    for r in study:
        fp = select_best(r.erm).model
        q = quant.ptq_round_to_nearest(fp, QuantSpec(bits=bits))
        ptq.append(r.target.score(lambda x, y, q=q: nn.accuracy(q, x, y)))
        qat.append(_best_target(r.qat[bits]))
    return {"ptq": ptq, "qat": qat, "ptq_mean": float(np.mean(ptq)), "qat_mean": float(np.mean(qat))}


def eoq_trials(cfg: StudyConfig, bits: int, trials=(0, 1, 2, 3, 4), size: int = 5) -> list[dict]:
    """Independent ensembles: trial ``t`` uses dataset seed ``t`` and its own member seeds."""
    out = []
    for t in trials:
        ds = data.default_benchmark(seed=t, n_per_domain=cfg.n_per_domain, signal_sep=cfg.signal_sep)
        train = replace(cfg.train_config(0, bits), retain_all=False)
        members = tuple((100 * t + k, 100 * t + 50 + k) for k in range(size))
        rep = run_eoq(ds, ds.names[-1], EnsembleSpec(train=train, members=members))
        d = rep.to_dict()
        d["trial"] = t
        out.append(d)
    return out
