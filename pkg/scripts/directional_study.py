"""Multi-seed ERM vs QAT study on the default spurious-blobs benchmark.

Writes per-bit accuracy, stability, PTQ and ensemble comparisons to a JSON file
and prints a short table.

    python3 scripts/directional_study.py --seeds 0 1 2 3 4 --out runs/study.json
"""

import argparse
import json
import time
from pathlib import Path

from quantdg import experiments as ex


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    ap.add_argument("--bits", type=int, nargs="+", default=[2, 3, 4, 5, 6, 7, 8])
    ap.add_argument("--steps", type=int, default=3000)
    ap.add_argument("--quantize-at", type=int, default=1000)
    ap.add_argument("--signal-sep", type=float, default=2.0)
    ap.add_argument("--jobs", type=int, default=1)
    ap.add_argument("--skip-ensemble", action="store_true")
    ap.add_argument("--out", type=Path, default=Path("runs/study.json"))
    args = ap.parse_args()

    cfg = ex.StudyConfig(
        seeds=tuple(args.seeds),
        bits=tuple(args.bits),
        total_steps=args.steps,
        quantize_at=args.quantize_at,
        signal_sep=args.signal_sep,
        jobs=args.jobs,
    )
    t0 = time.perf_counter()
    study = ex.run_study(cfg)
    candidates = [b for b in cfg.bits if b >= 3] or list(cfg.bits)
    chosen = ex.select_bits(study, candidates)
    table = ex.bit_table(study)
    result = {
        "config": {k: getattr(cfg, k) for k in cfg.__dataclass_fields__},
        "selected_bits": chosen,
        "bit_table": {str(k): v for k, v in table.items()},
        "accuracy": {str(b): ex.compare_accuracy(study, b) for b in cfg.bits},
        "stability": {str(b): ex.compare_stability(study, b, cfg.quantize_at) for b in cfg.bits},
        "ptq": {str(b): ex.compare_ptq(study, b) for b in cfg.bits},
    }
    if not args.skip_ensemble:
        result["ensemble"] = ex.eoq_trials(cfg, chosen, trials=cfg.seeds)
    result["seconds"] = time.perf_counter() - t0

    args.out.parent.mkdir(parents=True, exist_ok=True)
    args.out.write_text(json.dumps(result, indent=2, default=list) + "\n")

    print(f"{'bits':>4}  {'val':>6}  {'target':>6}  {'paired>=0':>9}  {'std<=erm':>8}  {'ptq':>6}")
    for b in sorted(table):
        t = table[b]
        if b == 32:
            print(f"{'erm':>4}  {t['val']:.4f}  {t['target']:.4f}")
            continue
        acc, st, pt = result["accuracy"][str(b)], result["stability"][str(b)], result["ptq"][str(b)]
        print(
            f"{b:>4}  {t['val']:.4f}  {t['target']:.4f}  {acc['paired_nonneg']:>7}/{len(cfg.seeds)}"
            f"  {st['qat_le_erm']:>6}/{len(cfg.seeds)}  {pt['ptq_mean']:.4f}"
        )
    print(f"selected by source validation: {chosen} bits; wrote {args.out} in {result['seconds']:.0f} s")


if __name__ == "__main__":
    main()
