"""Command-line entry point.

    quantdg run --config exp.toml --out runs/erm
    quantdg sweep-bits --config exp.toml --bits 2,3,4,5,6,7,8
    quantdg analyze --config exp.toml runs/erm/target3/best.npz runs/qat/target3/best.npz
    quantdg ensemble --config exp.toml
    quantdg ptq --config exp.toml

Exit codes: 0 success, 2 config error, 3 a run diverged, 4 I/O error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import os
import shutil
import sys
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import analysis, nn, quant
from .config import ConfigError, ExperimentConfig, load
from .data import IngestionError, make_views, split_leave_one_out
from .ensemble import EnsembleSpec, run_eoq
from .tensor import ContractError
from .trainer import RunRecord, TrainConfig, select_best, stability_stats, train_views

log = logging.getLogger("quantdg")

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_IO = 0, 2, 3, 4
SWEEP_HEADER = ("bits", "seed", "target_acc", "val_acc", "compression")


# output handling -----------------------------------------------------------


class Outputs:
    """Collects files in a staging directory and publishes them atomically."""

    def __init__(self, out_dir: Path, force: bool):
        self.out_dir = Path(out_dir)
        if self.out_dir.exists() and any(self.out_dir.iterdir()) and not force:
            raise FileExistsError(f"{self.out_dir} exists and is not empty (use --force to overwrite)")
        self.out_dir.parent.mkdir(parents=True, exist_ok=True)
        self.stage = Path(tempfile.mkdtemp(prefix=f".{self.out_dir.name}.", dir=self.out_dir.parent))

    def path(self, rel: str) -> Path:
        p = self.stage / rel
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def text(self, rel: str, content: str) -> None:
        with open(self.path(rel), "w", encoding="utf-8", newline="") as fh:
            fh.write(content)

    def json(self, rel: str, obj) -> None:
        self.text(rel, json.dumps(obj, indent=2, sort_keys=True) + "\n")

    def publish(self) -> None:
        files = sorted(p for p in self.stage.rglob("*") if p.is_file())
        manifest = {str(p.relative_to(self.stage)): hashlib.sha256(p.read_bytes()).hexdigest() for p in files}
        self.json("manifest.json", manifest)
        old = None
        if self.out_dir.exists():
            old = self.out_dir.with_name(self.out_dir.name + ".old")
            shutil.rmtree(old, ignore_errors=True)
            os.replace(self.out_dir, old)
        os.replace(self.stage, self.out_dir)
        if old is not None:
            shutil.rmtree(old, ignore_errors=True)

    def discard(self) -> None:
        shutil.rmtree(self.stage, ignore_errors=True)


def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _fmt(v):
    return repr(float(v)) if isinstance(v, (float, np.floating)) else v


# jobs ----------------------------------------------------------------------


def _run_job(args):
    ds, target, split_seed, val_fraction, train_cfg = args
    plan = split_leave_one_out(ds, target, val_fraction=val_fraction, seed=split_seed)
    view, evaluator = make_views(ds, plan)
    return train_views(view, train_cfg, evaluator)


def _map(jobs: dict, n_jobs: int) -> dict:
    """Run jobs keyed by sortable keys; results come back in sorted-key order."""
    keys = sorted(jobs)
    if n_jobs <= 1 or len(keys) <= 1:
        return {k: _run_job(jobs[k]) for k in keys}
    with ProcessPoolExecutor(max_workers=n_jobs) as pool:
        results = list(pool.map(_run_job, [jobs[k] for k in keys]))
    return dict(zip(keys, results))


def _domain_summary(rec: RunRecord, cfg: TrainConfig) -> dict:
    if rec.diverged or not rec.val_acc:
        return {"status": "diverged", "diagnostic": rec.diagnostic}
    best = select_best(rec)
    window = cfg.quantize_at if cfg.quantize_at is not None else 0
    st = stability_stats(rec, window) if rec.steps[-1] >= window else None
    return {
        "status": "ok",
        "best_step": best.step,
        "val_acc": best.val_acc,
        "target_acc": best.target_acc,
        "train_loss": best.train_loss,
        "stability": None
        if st is None
        else {"window_start": window, "mean": st.mean, "std": st.std, "n": st.n, "degenerate": st.degenerate},
    }


def _mode_name(cfg: ExperimentConfig) -> str:
    return "erm" if cfg.train.is_erm else cfg.quant_mode


# commands ------------------------------------------------------------------


def cmd_run(cfg: ExperimentConfig, out: Outputs, jobs: int = 1) -> int:
    ds = cfg.dataset.build(Path(cfg.base_dir))
    targets = cfg.protocol.targets(ds)
    work = {t: (ds, t, cfg.protocol.split_seed, cfg.protocol.val_fraction, cfg.train) for t in targets}
    records = _map(work, jobs)
    per_domain, diverged = {}, False
    for t in targets:
        rec = records[t]
        out.text(f"{t}/metrics.csv", rec.metrics_csv())
        summ = _domain_summary(rec, cfg.train)
        per_domain[t] = summ
        if summ["status"] != "ok":
            diverged = True
            continue
        extra = {"target_domain": t, "split_seed": cfg.protocol.split_seed, "val_fraction": cfg.protocol.val_fraction}
        nn.save_checkpoint(out.path(f"{t}/best.npz"), select_best(rec).model, extra=extra)
        nn.save_checkpoint(out.path(f"{t}/last.npz"), rec.last.model, extra=extra)
    accs = [s["target_acc"] for s in per_domain.values() if s["status"] == "ok"]
    summary = {
        "method": _mode_name(cfg),
        "bits": None if cfg.train.is_erm else cfg.train.quant.bits,
        "quantize_step": cfg.train.quantize_at,
        "seed": cfg.train.seed,
        "split_seed": cfg.protocol.split_seed,
        "dataset": ds.metadata,
        "per_domain": per_domain,
        "average_target_acc": float(np.mean(accs)) if accs else None,
    }
    out.json("summary.json", summary)
    return EXIT_DIVERGED if diverged else EXIT_OK


def cmd_sweep_bits(cfg: ExperimentConfig, out: Outputs, bits=None, jobs: int = 1) -> int:
    bits = list(bits or cfg.sweep.bits)
    for b in bits:
        if not 2 <= b <= 16:
            raise ConfigError(f"sweep bits must lie in [2, 16], got {b}")
    ds = cfg.dataset.build(Path(cfg.base_dir))
    targets = cfg.protocol.targets(ds)
    qa = cfg.train.quantize_at if cfg.train.quantize_at is not None else cfg.train.total_steps // 3
    variants = {32: replace(cfg.train, quantize_at=None)}
    for b in bits:
        variants[b] = replace(cfg.train, quantize_at=qa, quant=replace(cfg.train.quant, bits=b))
    work = {}
    for b, tc in variants.items():
        for seed in cfg.sweep.seeds:
            for t in targets:
                work[(b, seed, t)] = (ds, t, cfg.protocol.split_seed + seed, cfg.protocol.val_fraction, replace(tc, seed=seed))
    records = _map(work, jobs)
    rows, diverged = [], False
    for b in [*bits, 32]:
        for seed in cfg.sweep.seeds:
            summ = [_domain_summary(records[(b, seed, t)], variants[b]) for t in targets]
            ok = [s for s in summ if s["status"] == "ok"]
            if len(ok) < len(summ):
                diverged = True
                rows.append((b, seed, "nan", "nan", _fmt(1.0 if b == 32 else quant.compression_ratio(b))))
                continue
            rows.append(
                (
                    b,
                    seed,
                    _fmt(np.mean([s["target_acc"] for s in ok])),
                    _fmt(np.mean([s["val_acc"] for s in ok])),
                    _fmt(1.0 if b == 32 else quant.compression_ratio(b)),
                )
            )
            for t in targets:
                out.text(f"metrics/{t}/bits{b}_seed{seed}.csv", records[(b, seed, t)].metrics_csv())
    out.text("sweep.csv", _csv(SWEEP_HEADER, rows))
    return EXIT_DIVERGED if diverged else EXIT_OK


def cmd_analyze(cfg: ExperimentConfig, out: Outputs, checkpoints) -> int:
    ds = cfg.dataset.build(Path(cfg.base_dir))
    a = cfg.analysis
    report = {}
    for ck_path in checkpoints:
        model, header = nn.load_checkpoint(ck_path)
        if model.spec.input_dim != ds.input_dim or model.spec.num_classes != ds.num_classes:
            raise ContractError(f"{ck_path}: checkpoint dims do not match the dataset")
        target = header.get("target_domain") or cfg.protocol.targets(ds)[0]
        plan = split_leave_one_out(
            ds, target, val_fraction=header.get("val_fraction", cfg.protocol.val_fraction), seed=header.get("split_seed", cfg.protocol.split_seed)
        )
        view, evaluator = make_views(ds, plan)
        tx, ty = evaluator.unseal()
        gammas = analysis.scaled_gammas(model, a.gammas) if a.scale_by_rms else list(a.gammas)
        gammas = [0.0, *gammas]
        name = _checkpoint_name(ck_path)
        for tag, (x, y) in (("source", (view.val_x, view.val_y)), ("target", (tx, ty))):
            prof = analysis.flatness(model, x, y, gammas, samples=a.samples, seed=a.seed, eval_set=tag)
            out.text(f"{name}/flatness_{tag}.csv", prof.to_csv())
            report.setdefault(name, {})[f"flatness_{tag}"] = prof.to_dict()
        curv = analysis.curvature_report(model, view.val_x, view.val_y, probes=a.probes, iters=a.power_iters, seed=a.seed)
        out.json(f"{name}/curvature.json", curv.to_dict())
        report[name]["curvature"] = curv.to_dict()
        report[name]["checkpoint"] = str(ck_path)
    out.json("analysis.json", report)
    return EXIT_OK


def _checkpoint_name(path) -> str:
    p = Path(path)
    parts = [x for x in p.with_suffix("").parts[-3:] if x not in ("/", "")]
    return "__".join(parts)


def cmd_ensemble(cfg: ExperimentConfig, out: Outputs) -> int:
    ds = cfg.dataset.build(Path(cfg.base_dir))
    if cfg.train.is_erm:
        raise ConfigError("ensemble needs a quantized train block (set train.quantize_at)")
    spec = EnsembleSpec(train=cfg.train, members=cfg.ensemble_members())
    reports, flagged = {}, False
    for t in cfg.protocol.targets(ds):
        rep = run_eoq(ds, t, spec)
        reports[t] = rep.to_dict()
        flagged |= rep.flagged
        if rep.ensemble_acc is None:
            out.json("ensemble.json", {"per_domain": reports})
            return EXIT_DIVERGED
    accs = [r["ensemble_target_acc"] for r in reports.values()]
    out.json(
        "ensemble.json",
        {
            "bits": cfg.train.quant.bits,
            "quantize_step": cfg.train.quantize_at,
            "per_domain": reports,
            "average_ensemble_target_acc": float(np.mean(accs)),
            "flagged": flagged,
        },
    )
    return EXIT_OK


def cmd_ptq(cfg: ExperimentConfig, out: Outputs, jobs: int = 1) -> int:
    """Train full precision, then round-to-nearest quantize the selected checkpoint."""
    ds = cfg.dataset.build(Path(cfg.base_dir))
    targets = cfg.protocol.targets(ds)
    erm = replace(cfg.train, quantize_at=None)
    records = _map({t: (ds, t, cfg.protocol.split_seed, cfg.protocol.val_fraction, erm) for t in targets}, jobs)
    per_domain = {}
    for t in targets:
        rec = records[t]
        if rec.diverged:
            per_domain[t] = {"status": "diverged", "diagnostic": rec.diagnostic}
            continue
        best = select_best(rec)
        q = quant.ptq_round_to_nearest(best.model, cfg.train.quant)
        plan = split_leave_one_out(ds, t, val_fraction=cfg.protocol.val_fraction, seed=cfg.protocol.split_seed)
        view, evaluator = make_views(ds, plan)
        per_domain[t] = {
            "status": "ok",
            "best_step": best.step,
            "fp_target_acc": best.target_acc,
            "ptq_target_acc": evaluator.score(lambda x, y: nn.accuracy(q, x, y)),
            "ptq_val_acc": nn.accuracy(q, view.val_x, view.val_y),
        }
        nn.save_checkpoint(out.path(f"{t}/ptq.npz"), q, extra={"target_domain": t, "split_seed": cfg.protocol.split_seed})
    out.json("ptq.json", {"bits": cfg.train.quant.bits, "method": "ptq-rtn", "per_domain": per_domain})
    return EXIT_OK if all(v["status"] == "ok" for v in per_domain.values()) else EXIT_DIVERGED


# argument parsing ----------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="quantdg", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("run", "sweep-bits", "analyze", "ensemble", "ptq"):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="TOML experiment config")
        p.add_argument("--seed", type=int, help="override train.seed")
        p.add_argument("--jobs", type=int, default=1, help="parallel training runs")
        p.add_argument("--out", help="output directory (overrides out_dir)")
        p.add_argument("--force", action="store_true", help="overwrite an existing output directory")
        p.add_argument("-v", "--verbose", action="store_true")
        if name == "sweep-bits":
            p.add_argument("--bits", help="comma-separated bit-widths, e.g. 2,3,4,8")
        if name == "analyze":
            p.add_argument("checkpoints", nargs="+", help="checkpoint .npz files")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = load(args.config)
        if args.seed is not None:
            cfg = replace(cfg, train=replace(cfg.train, seed=args.seed))
        bits = [int(b) for b in args.bits.split(",")] if getattr(args, "bits", None) else None
    except (ConfigError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"cannot read config: {exc}", file=sys.stderr)
        return EXIT_IO
    out_dir = Path(args.out or cfg.out_dir)
    try:
        out = Outputs(out_dir, args.force)
    except (FileExistsError, OSError) as exc:
        print(f"output error: {exc}", file=sys.stderr)
        return EXIT_IO
    try:
        if args.command == "run":
            code = cmd_run(cfg, out, args.jobs)
        elif args.command == "sweep-bits":
            code = cmd_sweep_bits(cfg, out, bits, args.jobs)
        elif args.command == "analyze":
            code = cmd_analyze(cfg, out, args.checkpoints)
        elif args.command == "ensemble":
            code = cmd_ensemble(cfg, out)
        else:
            code = cmd_ptq(cfg, out, args.jobs)
    except (ConfigError, ContractError, IngestionError) as exc:
        out.discard()
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        out.discard()
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except BaseException:
        out.discard()
        raise
    out.publish()
    log.info("wrote %s", out_dir)
    return code


if __name__ == "__main__":
    sys.exit(main())
