"""Module (baseline / ce / cecs) and patch-size (q = 1, 2, 3) ablations on the default synthetic set.

Runs that appear in both studies (cecs at the base q) are trained once.
Set CECS_THREADS to cap the number of worker processes.

    python scripts/run_ablation.py --seeds 5 --out results/
"""

import argparse
import time
from pathlib import Path

from cecs.config import parse_config
from cecs.trainer import AblationResult, datasets_for, run_ablation, worker_count


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", help="key = value file applied over the desk defaults")
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--epochs", type=int, default=None)
    ap.add_argument("--out", default="results")
    args = ap.parse_args()

    base = parse_config(args.config, {"epochs": args.epochs})
    train, test = datasets_for(base)
    memo = {}
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.time()
    for study in ("module", "patch"):
        res: AblationResult = run_ablation(base, train, test, seeds=range(args.seeds), study=study, memo=memo)
        res.write_csv(out / f"ablation_{study}.csv")
        print(f"{study} study ({worker_count()} workers, {time.time() - t0:.0f} s so far)")
        for label in res.labels():
            accs = " ".join(f"{a:.3f}" for a in res.per_seed(label))
            print(f"  {label:<9} median {res.median(label):.4f}   seeds {accs}")


if __name__ == "__main__":
    main()
