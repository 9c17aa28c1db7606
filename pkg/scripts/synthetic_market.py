"""Write an hourly CSV of prices and aggregate demand from a stochastic Fisher market rollout."""

import argparse
import csv
from datetime import datetime, timedelta

from igt.harness import fisher_observation_map, stochastic_fisher_game
from igt.markov import LinearPolicy, simulate
from igt.spaces import make_rng


def market_rollout(rows: int, buyers: int = 2, supplies=(1.0, 1.0), seed: int = 0):
    game = stochastic_fisher_game(buyers, len(supplies), list(supplies))
    policy = LinearPolicy(game.state_dim, game.action_dims, action_spaces=game.action_spaces)
    rng = make_rng(seed)
    z = policy.param_space.project(rng.uniform(0.0, 0.5, size=policy.param_space.dim))
    h = simulate(game, policy, z, rows, rng, 1)
    om = fisher_observation_map(game, rows)
    return game, policy, z, h, om(h)[0].reshape(rows, -1)


def write_csv(path, values, n_goods: int, start=datetime(2020, 1, 1)):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["timestamp"] + [f"price_{j}" for j in range(n_goods)] + [f"demand_{j}" for j in range(n_goods)])
        for t, row in enumerate(values):
            w.writerow([(start + timedelta(hours=t)).isoformat()] + [repr(float(v)) for v in row])


if __name__ == "__main__":
    ap = argparse.ArgumentParser()
    ap.add_argument("--rows", type=int, default=1000)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="synthetic_market.csv")
    a = ap.parse_args()
    game, _, _, _, vals = market_rollout(a.rows, seed=a.seed)
    write_csv(a.out, vals, game.m)
    print(f"wrote {a.rows} rows to {a.out}")
