"""Command line entry point ``igt``.

Exit codes: 0 on success, 2 when any benchmark instance failed, 1 on a
configuration or input error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import harness
from .games import FAMILIES, GameInstance
from .planner import GdaConfig, InverseGame, gda_solve
from .spaces import make_rng

log = logging.getLogger("igt")

FULL_INSTANCES = 500
DESK_INSTANCES = 100


class ConfigError(Exception):
    pass


def _load_config(path) -> dict:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file {p} not found")
    text = p.read_text()
    try:
        return tomllib.loads(text) if p.suffix == ".toml" else json.loads(text)
    except (tomllib.TOMLDecodeError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot parse {p}: {exc}")


def _write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, default=lambda v: np.asarray(v).tolist()))


def _write_report(out: Path, rep: dict) -> None:
    """report.json plus a flat two-column report.csv of the same fields."""
    _write_json(out / "report.json", rep)
    with open(out / "report.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["field", "value"])
        for k, v in rep.items():
            w.writerow([k, json.dumps(v, default=lambda u: np.asarray(u).tolist())])


def _outdir(args) -> Path:
    out = Path(args.out)
    (out / "traces").mkdir(parents=True, exist_ok=True)
    return out


def _gda_from(d: dict, base: GdaConfig) -> GdaConfig:
    known = {f.name for f in fields(GdaConfig)}
    bad = set(d) - known
    if bad:
        raise ConfigError(f"unknown solver settings {sorted(bad)}")
    kw = {f.name: getattr(base, f.name) for f in fields(GdaConfig)}
    kw.update(d)
    return GdaConfig(**kw)


# --------------------------------------------------------------------------- subcommands


def cmd_solve(args) -> int:
    try:
        inst = GameInstance.from_json(Path(args.game).read_text())
    except (OSError, KeyError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read game instance {args.game}: {exc}")
    mode = args.mode if inst.family.startswith("fisher_") else None
    game = inst.game(mode)
    cfg = harness.preset_config(inst.family, mode, seed=args.seed)
    over = {k: v for k, v in dict(iters=args.iters, eta_theta=args.lr, eta_y=args.eta_y,
                                  ascent=args.ascent).items() if v is not None}
    cfg = _gda_from(over, cfg)
    trace = gda_solve(InverseGame(game, inst.x_star), cfg)
    out = _outdir(args)
    truth = inst.true_params(mode)
    rep = dict(trace.summary(), family=inst.family, mode=mode, theta_star=truth.tolist(),
               rel_error=harness.relative_error(trace.theta_hat, truth),
               recovered=harness.recovery_check(trace.theta_hat, truth), schema="igt.solve/1")
    _write_report(out, rep)
    trace.to_csv(out / "traces" / "solve.csv", every=max(1, trace.iters // 500))
    print(f"theta_hat={np.round(trace.theta_hat, 6).tolist()} exploitability={trace.certificate:.3g} "
          f"rel_error={rep['rel_error']:.3g}")
    return 0


def cmd_bench(args) -> int:
    d = _load_config(args.config) if args.config else {}
    family = args.family or d.get("family")
    if family is None:
        raise ConfigError("no family given (use --family or a config file)")
    if family not in FAMILIES:
        raise ConfigError(f"unknown family {family!r}; choose from {sorted(FAMILIES)}")
    n = FULL_INSTANCES if args.full else (args.n or d.get("n_instances", DESK_INSTANCES))
    mode = args.mode or d.get("mode")
    gda = _gda_from(d.get("gda", {}), harness.preset_config(family, mode))
    over = {k: v for k, v in dict(iters=args.iters, eta_theta=args.lr).items() if v is not None}
    gda = _gda_from(over, gda)
    spec = harness.BenchSpec(family, mode=mode, n_instances=n, gda=gda,
                             seed=args.seed if args.seed is not None else d.get("seed", 0),
                             workers=args.workers or d.get("workers", 1),
                             early_stop=d.get("early_stop", False))
    out = _outdir(args)
    report = harness.run_benchmark(spec, trace_dir=out / "traces")
    report.write(out)
    print(f"{family}/{spec.mode}: recovered {report.pct_recovered:.1f}% "
          f"(raw {report.pct_recovered_raw:.1f}%), avg exploitability {report.avg_exploitability:.4g}, "
          f"failed {report.n_failed}/{n}")
    return 2 if report.n_failed else 0


def cmd_marl(args) -> int:
    from .markov import (
        FiniteMarkovGame, InverseMarkovGame, SgdaConfig, TabularPolicy, finite_exploitability,
        planted_equilibrium_game, sgda_solve,
    )

    if args.game:
        try:
            d = json.loads(Path(args.game).read_text())
            game = FiniteMarkovGame.from_json(json.dumps(d["game"]))
            policy = TabularPolicy(game.n_states, d["action_counts"])
            z = np.asarray(d["observed"], dtype=float)
        except (OSError, KeyError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read Markov game {args.game}: {exc}")
        theta_star = d.get("theta_star")
    else:
        game, policy, z, theta_star = planted_equilibrium_game(make_rng(args.planted))
    out = _outdir(args)
    if args.save_game:
        _write_json(args.save_game, {"game": json.loads(game.to_json()), "action_counts": policy.action_dims,
                                     "observed": z.tolist(),
                                     "theta_star": None if theta_star is None else np.asarray(theta_star).tolist()})
    cfg = SgdaConfig(iters=args.iters, eta_theta=args.lr, eta_x=args.eta_x, batch=args.batch, seed=args.seed)
    trace = sgda_solve(InverseMarkovGame(game, policy, z), cfg)
    exact = finite_exploitability(game, policy, z, trace.theta_hat)
    rep = dict(trace.summary(), exact_exploitability=exact, horizon=trace.extra["horizon"], schema="igt.marl/1")
    _write_report(out, rep)
    with open(out / "traces" / "theta.csv", "w") as fh:
        fh.write("iter," + ",".join(f"theta_{k}" for k in range(trace.thetas.shape[1])) + "\n")
        for t, th in enumerate(trace.thetas):
            fh.write(f"{t}," + ",".join(repr(float(v)) for v in th) + "\n")
    print(f"theta_bar={np.round(trace.theta_bar, 6).tolist()} exact exploitability={exact:.4g}")
    return 0


def _simulation_setup(args, samples_dim=None):
    from .markov import LinearPolicy, TrackingGame
    from .simulacra import ObservationMap

    if args.game == "tracking":
        game = TrackingGame(n_players=args.players, sigma=args.sigma, s0_scale=0.0, s0_center=1.0)
        om = ObservationMap.for_game(args.map, game, args.horizon)
    else:
        supplies = [float(v) for v in args.supplies.split(",")]
        game = harness.stochastic_fisher_game(args.buyers, len(supplies), supplies)
        if args.map not in ("prices", "demand", "prices_demand"):
            raise ConfigError("Fisher simulations observe prices, demand or prices_demand")
        om = harness.fisher_observation_map(game, args.horizon, prices="prices" in args.map,
                                            demand="demand" in args.map)
    policy = LinearPolicy(game.state_dim, game.action_dims, action_spaces=game.action_spaces)
    return game, om, policy


def cmd_simulacra(args) -> int:
    from .simulacra import InverseSimulation, SimulacraConfig, simulacral_solve, write_loss_curve

    game, om, policy = _simulation_setup(args)
    try:
        sim = InverseSimulation.from_csv(game, om, args.observations)
    except OSError as exc:
        raise ConfigError(f"cannot read observations: {exc}")
    cfg = SimulacraConfig(alpha=args.alpha, beta=args.beta, iters=args.iters, eta_theta=args.lr,
                          eta_x=args.eta_x, eta_y=args.eta_y, batch=args.batch, horizon=args.regret_horizon,
                          checkpoints=args.checkpoints, seed=args.seed)
    trace = simulacral_solve(sim, policy, cfg)
    out = _outdir(args)
    e = trace.extra
    rep = dict(trace.summary(), x_hat=e["x_hat"].tolist(), best_iter=e["best_iter"], moreau=e["moreau"],
               final_observation=e["final_observation"], final_regret=e["final_regret"],
               irreducible_observation=e["irreducible_observation"], n_samples=sim.n_samples,
               schema="igt.simulacra/1")
    _write_report(out, rep)
    write_loss_curve(trace, out / "traces" / "loss.csv")
    print(f"theta_hat={np.round(trace.theta_hat, 6).tolist()} observation={e['final_observation']:.4g} "
          f"regret={e['final_regret']:.4g} moreau={min(e['moreau']):.4g}")
    return 0


def cmd_ingest(args) -> int:
    splits = None
    if args.splits:
        splits = {}
        for part in args.splits.split(","):
            name, _, rng_text = part.partition("=")
            lo, sep, hi = rng_text.partition("..")
            if not (name and lo and sep and hi):
                raise ConfigError(f"bad split {part!r}; use name=START..END")
            splits[name] = (lo, hi)
    schema = harness.IngestSchema(timestamp=args.timestamp, columns=args.columns.split(","),
                                  horizon=args.horizon, splits=splits)
    obs = harness.ingest_timeseries(args.input, schema)
    out = _outdir(args)
    obs.to_csv(out / "observations.csv")
    for name, idx in obs.splits.items():
        part = harness.ObservationSet(obs.samples[idx], [obs.starts[k] for k in idx], obs.columns, obs.horizon)
        part.to_csv(out / f"observations_{name}.csv")
    _write_report(out, {"n_observations": len(obs.samples), "dim": int(obs.samples.shape[1]),
                        "splits": {k: len(v) for k, v in obs.splits.items()}, "schema": "igt.ingest/1"})
    print(f"{len(obs.samples)} observation vectors of dimension {obs.samples.shape[1]}")
    return 0


# --------------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="igt", description="Inverse game theory solvers.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("solve", help="solve one inverse game from a JSON instance")
    s.add_argument("--game", required=True)
    s.add_argument("--mode", default="budgets", choices=["budgets", "types_budgets"])
    s.add_argument("--iters", type=int)
    s.add_argument("--lr", type=float)
    s.add_argument("--eta-y", type=float)
    s.add_argument("--ascent", choices=["gradient", "best_response"])
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", default="out/solve")
    s.set_defaults(func=cmd_solve)

    b = sub.add_parser("bench", help="benchmark recovery over sampled instances")
    b.add_argument("--config")
    b.add_argument("--family")
    b.add_argument("--mode", choices=list(harness.MODES))
    b.add_argument("--n", type=int)
    b.add_argument("--full", action="store_true", help=f"use {FULL_INSTANCES} instances")
    b.add_argument("--iters", type=int)
    b.add_argument("--lr", type=float)
    b.add_argument("--seed", type=int)
    b.add_argument("--workers", type=int)
    b.add_argument("--out", default="out/bench")
    b.set_defaults(func=cmd_bench)

    m = sub.add_parser("marl", help="inverse MARL on a finite Markov game")
    g = m.add_mutually_exclusive_group(required=True)
    g.add_argument("--game")
    g.add_argument("--planted", type=int, help="generate a game with a planted equilibrium from this seed")
    m.add_argument("--save-game")
    m.add_argument("--iters", type=int, default=1000)
    m.add_argument("--lr", type=float, default=1e-3)
    m.add_argument("--eta-x", type=float, default=1e-2)
    m.add_argument("--batch", type=int, default=4)
    m.add_argument("--seed", type=int, default=0)
    m.add_argument("--out", default="out/marl")
    m.set_defaults(func=cmd_marl)

    c = sub.add_parser("simulacra", help="simulacral learning from an observation CSV")
    c.add_argument("--observations", required=True)
    c.add_argument("--game", choices=["tracking", "fisher"], default="tracking")
    c.add_argument("--players", type=int, default=2)
    c.add_argument("--sigma", type=float, default=0.01)
    c.add_argument("--buyers", type=int, default=2)
    c.add_argument("--supplies", default="1,1")
    c.add_argument("--map", default="identity")
    c.add_argument("--horizon", type=int, default=10)
    c.add_argument("--regret-horizon", type=int)
    c.add_argument("--alpha", type=float, default=1.0)
    c.add_argument("--beta", type=float, default=1.0)
    c.add_argument("--iters", type=int, default=400)
    c.add_argument("--lr", type=float, default=1e-2)
    c.add_argument("--eta-x", type=float, default=1e-2)
    c.add_argument("--eta-y", type=float, default=1e-2)
    c.add_argument("--batch", type=int, default=8)
    c.add_argument("--checkpoints", type=int, default=5)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--out", default="out/simulacra")
    c.set_defaults(func=cmd_simulacra)

    i = sub.add_parser("ingest", help="window a time series CSV into observation vectors")
    i.add_argument("--input", required=True)
    i.add_argument("--timestamp", default="timestamp")
    i.add_argument("--columns", default="price")
    i.add_argument("--horizon", type=int, default=24)
    i.add_argument("--splits", help="name=START..END[,name=START..END...] with ISO dates, END exclusive")
    i.add_argument("--out", default="out/ingest")
    i.set_defaults(func=cmd_ingest)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, ValueError) as exc:
        print(f"igt: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
