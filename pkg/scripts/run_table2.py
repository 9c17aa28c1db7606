"""Recovery rates and average exploitability for every market and oligopoly family.

    python scripts/run_table2.py --n 100 --out out/table2
    python scripts/run_table2.py --full --workers 4
"""

import argparse
import time
from pathlib import Path

from igt.harness import BenchSpec, run_benchmark

ROWS = [
    ("fisher_linear", "budgets"),
    ("fisher_cobb_douglas", "budgets"),
    ("fisher_leontief", "budgets"),
    ("fisher_linear", "types_budgets"),
    ("fisher_cobb_douglas", "types_budgets"),
    ("fisher_leontief", "types_budgets"),
    ("cournot", None),
    ("bertrand", None),
]


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--n", type=int, default=100)
    ap.add_argument("--full", action="store_true", help="500 instances per row")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--workers", type=int, default=1)
    ap.add_argument("--only", help="comma-separated family names")
    ap.add_argument("--out", default="out/table2")
    args = ap.parse_args()
    n = 500 if args.full else args.n
    keep = set(args.only.split(",")) if args.only else None

    print(f"{'family':22s} {'mode':14s} {'recovered':>9s} {'raw':>7s} {'avg expl.':>10s} {'failed':>6s} {'time':>7s}")
    for family, mode in ROWS:
        if keep and family not in keep:
            continue
        spec = BenchSpec(family, mode=mode, n_instances=n, seed=args.seed, workers=args.workers)
        t0 = time.perf_counter()
        rep = run_benchmark(spec)
        rep.write(Path(args.out) / f"{family}_{spec.mode}")
        print(f"{family:22s} {spec.mode:14s} {rep.pct_recovered:8.1f}% {rep.pct_recovered_raw:6.1f}% "
              f"{rep.avg_exploitability:10.4g} {rep.n_failed:6d} {time.perf_counter() - t0:6.0f}s", flush=True)


if __name__ == "__main__":
    main()
