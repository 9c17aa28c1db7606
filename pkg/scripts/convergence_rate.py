"""Averaged duality gap of GDA on the quadratic toy game as a function of T (CSV to stdout or --out)."""

import argparse
import csv
import sys

import numpy as np

from igt.games import quadratic_toy
from igt.planner import GdaConfig, InverseGame, duality_gap, exploitability, gda_solve


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--iters", type=int, default=10_000)
    ap.add_argument("--players", type=int, default=2)
    ap.add_argument("--observed", type=float, default=0.5)
    ap.add_argument("--lr", type=float, default=0.01)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out")
    args = ap.parse_args()

    g = quadratic_toy(args.players)
    xh = np.full(args.players, args.observed)
    tr = gda_solve(InverseGame(g, xh), GdaConfig(eta_theta=args.lr, eta_y=args.lr, iters=args.iters, seed=args.seed))
    theta_run = np.cumsum(tr.thetas, axis=0) / np.arange(1, len(tr.thetas) + 1)[:, None]
    y_run = np.cumsum(tr.ys, axis=0) / np.arange(1, len(tr.ys) + 1)[:, None]
    Ts = np.unique(np.geomspace(1, args.iters, 40).astype(int))

    fh = open(args.out, "w", newline="") if args.out else sys.stdout
    w = csv.writer(fh)
    w.writerow(["T", "duality_gap", "exploitability", "theta_bar"])
    for T in Ts:
        w.writerow([T, repr(duality_gap(g, xh, theta_run[T], y_run[T])),
                    repr(exploitability(g, theta_run[T], xh).value), repr(float(theta_run[T][0]))])
    if args.out:
        fh.close()


if __name__ == "__main__":
    main()
