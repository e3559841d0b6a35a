"""Local flatness of a QAT checkpoint against the ERM checkpoint at matched train loss.

Emits one CSV per (model, evaluation set) with the ``gamma,mean,stderr,samples,set``
header, ready for overlay plotting.

    python3 scripts/flatness_compare.py --seed 0 --bits 7 --out runs/flatness
"""

import argparse
from pathlib import Path

from quantdg import analysis
from quantdg import experiments as ex
from quantdg.trainer import select_best


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--bits", type=int, default=7)
    ap.add_argument("--samples", type=int, default=100)
    ap.add_argument("--out", type=Path, default=Path("runs/flatness"))
    args = ap.parse_args()

    cfg = ex.StudyConfig(seeds=(args.seed,), bits=(args.bits,))
    study = ex.run_study(cfg)
    res = ex.compare_flatness(study, args.bits, samples=args.samples)["per_seed"][0]
    args.out.mkdir(parents=True, exist_ok=True)
    runs = study[0]
    q = select_best(runs.qat[args.bits])
    e = ex.matched_erm_checkpoint(runs.erm, q.train_loss)
    gammas = [0.0, *analysis.scaled_gammas(e.model)]
    tx, ty = runs.target.unseal()
    for tag, (x, y) in (("source", (runs.view.val_x, runs.view.val_y)), ("target", (tx, ty))):
        for name, ck in (("erm", e), (f"qat{args.bits}", q)):
            prof = analysis.flatness(ck.model, x, y, gammas, samples=args.samples, seed=args.seed, eval_set=tag)
            (args.out / f"{name}_{tag}.csv").write_text(prof.to_csv())
    print(
        f"QAT step {q.step} loss {q.train_loss:.4f} | ERM step {e.step} loss {e.train_loss:.4f} "
        f"(matched within 10%: {res['matched']})"
    )
    print(f"gammas where QAT <= ERM: source {res['source']['wins']}/6, target {res['target']['wins']}/6")
    print(f"wrote CSVs to {args.out}")


if __name__ == "__main__":
    main()
