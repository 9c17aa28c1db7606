"""Benchmark orchestration, recovery metrics, report I/O and time-series ingestion."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from datetime import datetime
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .games import LOG_FLOOR, sample_instance
from .markov import MarkovGame
from .planner import GdaConfig, InverseGame, gda_solve, relative_error
from .spaces import Box, derive_seed, make_rng

log = logging.getLogger(__name__)

REPORT_SCHEMA = "igt.bench/1"
MODES = ("budgets", "types_budgets", "marginal_cost", "default")
RECOVERY_TOL = 0.1

# Per-family solver settings used by the benchmark (see README for the rationale).
PRESETS = {
    "fisher_linear": dict(eta_theta=0.01, eta_y=5e-4, iters=5000, ascent="best_response"),
    "fisher_cobb_douglas": dict(eta_theta=0.01, eta_y=5e-4, iters=5000, ascent="best_response"),
    "fisher_leontief": dict(eta_theta=0.01, eta_y=5e-4, iters=5000, ascent="best_response"),
    "cournot": dict(eta_theta=0.01, eta_y=0.01, iters=10000),
    "bertrand": dict(eta_theta=0.3, eta_y=0.3, iters=250, ascent="best_response", schedule="inverse_t"),
    "quadratic_toy": dict(eta_theta=0.01, eta_y=0.01, iters=2000),
    "random_matrix": dict(eta_theta=0.01, eta_y=0.01, iters=2000),
}
# Types move slowly at 0.01: many Cobb-Douglas instances are still outside the tolerance after 5000 steps.
TYPES_BUDGETS_OVERRIDES = dict(eta_theta=0.3)
DEFAULT_MODE = {
    "fisher_linear": "budgets", "fisher_cobb_douglas": "budgets", "fisher_leontief": "budgets",
    "cournot": "marginal_cost", "bertrand": "marginal_cost",
    "quadratic_toy": "default", "random_matrix": "default",
}


def preset_config(family: str, mode: Optional[str] = None, **overrides) -> GdaConfig:
    kw = dict(PRESETS[family], average=False)
    if mode == "types_budgets":
        kw.update(TYPES_BUDGETS_OVERRIDES)
    kw.update(overrides)
    return GdaConfig(**kw)


def recovery_check(theta_hat, theta_star, tol: float = RECOVERY_TOL) -> bool:
    """Relative-L2 test ||(theta_hat - theta*) / theta*||_2 <= tol (componentwise division)."""
    return relative_error(theta_hat, theta_star) <= tol


def normalize_types(theta, n_buyers: int, n_goods: int) -> np.ndarray:
    """Rescale each buyer's type row to sum to one; budgets are left alone."""
    theta = np.asarray(theta, dtype=float)
    k = n_buyers * n_goods
    T = theta[:k].reshape(n_buyers, n_goods)
    return np.concatenate([(T / T.sum(axis=1, keepdims=True)).ravel(), theta[k:]])


@dataclass
class BenchSpec:
    family: str
    mode: Optional[str] = None
    n_instances: int = 500
    gda: Optional[GdaConfig] = None
    seed: int = 0
    workers: int = 1
    early_stop: bool = False
    n_buyers: int = 3
    n_goods: int = 2

    def __post_init__(self):
        if self.family not in PRESETS:
            raise ValueError(f"unknown family {self.family!r}")
        self.mode = self.mode or DEFAULT_MODE[self.family]
        if self.mode not in MODES:
            raise ValueError(f"unknown parameter mode {self.mode!r}")
        if self.mode in ("budgets", "types_budgets") and not self.family.startswith("fisher_"):
            raise ValueError(f"mode {self.mode!r} only applies to Fisher markets")
        if self.n_instances < 1:
            raise ValueError("n_instances must be at least 1")
        if self.workers < 1:
            raise ValueError("workers must be at least 1")
        if self.gda is None:
            self.gda = preset_config(self.family, self.mode)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["gda"] = {k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in d["gda"].items()}
        return d


@dataclass
class BenchRow:
    index: int
    seed: int
    recovered: bool
    recovered_raw: bool
    rel_error: float
    rel_error_raw: float
    certificate: float
    certificate_method: str
    iters: int
    resamples: int
    wall_ms: float
    error: Optional[str] = None


@dataclass
class BenchReport:
    spec: dict
    rows: list
    pct_recovered: float
    pct_recovered_raw: float
    avg_exploitability: float
    n_failed: int
    wall_ms: float = 0.0
    schema: str = REPORT_SCHEMA

    @classmethod
    def from_rows(cls, spec: BenchSpec, rows: Sequence[BenchRow], wall_ms: float = 0.0) -> "BenchReport":
        rows = sorted(rows, key=lambda r: r.index)
        n = len(rows)
        certs = [r.certificate for r in rows if r.error is None]
        return cls(
            spec=spec.to_dict(),
            rows=rows,
            pct_recovered=100.0 * sum(r.recovered for r in rows) / n,
            pct_recovered_raw=100.0 * sum(r.recovered_raw for r in rows) / n,
            avg_exploitability=float(np.mean(certs)) if certs else math.nan,
            n_failed=sum(r.error is not None for r in rows),
            wall_ms=wall_ms,
        )

    def to_dict(self, timing: bool = True) -> dict:
        rows = [dataclasses.asdict(r) for r in self.rows]
        if not timing:
            for r in rows:
                r.pop("wall_ms")
        d = {
            "schema": self.schema,
            "spec": self.spec,
            "pct_recovered": self.pct_recovered,
            "pct_recovered_raw": self.pct_recovered_raw,
            "avg_exploitability": self.avg_exploitability,
            "n_failed": self.n_failed,
            "rows": rows,
        }
        if timing:
            d["wall_ms"] = self.wall_ms
        else:
            d["spec"] = {k: v for k, v in self.spec.items() if k != "workers"}
        return d

    def fingerprint(self) -> str:
        """Hash of everything except wall-clock timings and the worker count."""
        return hashlib.sha256(json.dumps(self.to_dict(timing=False), sort_keys=True).encode()).hexdigest()

    def write(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(json.dumps(self.to_dict(), indent=2))
        with open(out / "report.csv", "w", newline="") as fh:
            names = [f.name for f in dataclasses.fields(BenchRow)]
            w = csv.DictWriter(fh, fieldnames=names)
            w.writeheader()
            for r in self.rows:
                w.writerow(dataclasses.asdict(r))

    @classmethod
    def read(cls, path) -> "BenchReport":
        d = json.loads(Path(path).read_text())
        rows = [BenchRow(**r) for r in d["rows"]]
        return cls(d["spec"], rows, d["pct_recovered"], d["pct_recovered_raw"], d["avg_exploitability"],
                   d["n_failed"], d.get("wall_ms", 0.0), d["schema"])


def _mode_for_game(spec: BenchSpec) -> Optional[str]:
    return spec.mode if spec.family.startswith("fisher_") else None


def _run_one(spec: BenchSpec, index: int, trace_dir: Optional[str] = None) -> BenchRow:
    seed = derive_seed(spec.seed, index)
    t0 = time.perf_counter()
    try:
        inst = sample_instance(spec.family, make_rng(seed), n_buyers=spec.n_buyers, n_goods=spec.n_goods)
        mode = _mode_for_game(spec)
        game = inst.game(mode)
        truth = inst.true_params(mode)
        if spec.mode == "types_budgets":
            tmap = lambda th: normalize_types(th, spec.n_buyers, spec.n_goods)  # noqa: E731
        else:
            tmap = None
        target = tmap(truth) if tmap else truth
        cfg = replace(spec.gda, seed=seed)
        trace = gda_solve(InverseGame(game, inst.x_star), cfg,
                          theta_star=target if spec.early_stop else None, theta_map=tmap)
        est = tmap(trace.theta_hat) if tmap else trace.theta_hat
        err, err_raw = relative_error(est, target), relative_error(trace.theta_hat, truth)
        if trace_dir is not None:
            trace.to_csv(Path(trace_dir) / f"instance_{index:05d}.csv", every=max(1, trace.iters // 200))
        return BenchRow(index, seed, err <= RECOVERY_TOL, err_raw <= RECOVERY_TOL, err, err_raw,
                        float(trace.certificate), trace.certificate_method, trace.iters, inst.resamples,
                        (time.perf_counter() - t0) * 1e3)
    except Exception as exc:  # per-instance failures are recorded, never fatal
        log.warning("instance %d failed: %s", index, exc)
        return BenchRow(index, seed, False, False, math.nan, math.nan, math.nan, "", 0, 0,
                        (time.perf_counter() - t0) * 1e3, error=f"{type(exc).__name__}: {exc}")


def _run_chunk(args):
    spec, indices, trace_dir = args
    return [_run_one(spec, i, trace_dir) for i in indices]


def run_benchmark(spec: BenchSpec, trace_dir=None) -> BenchReport:
    """Solve n_instances sampled inverse games; rows are independent of the worker count."""
    t0 = time.perf_counter()
    tdir = None
    if trace_dir is not None:
        Path(trace_dir).mkdir(parents=True, exist_ok=True)
        tdir = str(trace_dir)
    indices = list(range(spec.n_instances))
    if spec.workers == 1:
        rows = [_run_one(spec, i, tdir) for i in indices]
    else:
        chunks = [indices[k::spec.workers] for k in range(spec.workers)]
        with ProcessPoolExecutor(max_workers=spec.workers) as pool:
            rows = [r for part in pool.map(_run_chunk, [(spec, c, tdir) for c in chunks]) for r in part]
    return BenchReport.from_rows(spec, rows, (time.perf_counter() - t0) * 1e3)


# --------------------------------------------------------------------------- time series


@dataclass
class IngestSchema:
    timestamp: str = "timestamp"
    columns: Sequence[str] = ("price",)
    horizon: int = 24
    splits: Optional[dict] = None  # name -> (start, end) ISO dates, end exclusive


@dataclass
class ObservationSet:
    samples: np.ndarray
    starts: list
    columns: list
    horizon: int
    splits: dict = field(default_factory=dict)

    def split(self, name: str) -> np.ndarray:
        return self.samples[self.splits[name]]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["start"] + [f"{c}_{t}" for t in range(self.horizon) for c in self.columns])
            for s, row in zip(self.starts, self.samples):
                w.writerow([s] + [repr(float(v)) for v in row])


def ingest_timeseries(path, schema: IngestSchema = IngestSchema()) -> ObservationSet:
    """Window a timestamped CSV into consecutive non-overlapping observation vectors.

    Each vector stacks the selected columns step by step: (c_1 t_0, c_2 t_0, c_1 t_1, ...).
    """
    if schema.horizon < 1:
        raise ValueError("horizon must be at least 1")
    times, values = [], []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{path}: empty file")
        header = [h.strip() for h in header]
        missing = [c for c in (schema.timestamp, *schema.columns) if c not in header]
        if missing:
            raise ValueError(f"{path}: missing columns {missing}")
        ti = header.index(schema.timestamp)
        ci = [header.index(c) for c in schema.columns]
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise ValueError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            try:
                ts = datetime.fromisoformat(row[ti].strip())
            except ValueError:
                raise ValueError(f"{path}:{lineno}: bad timestamp {row[ti]!r}")
            vals = []
            for c, k in zip(schema.columns, ci):
                cell = row[k].strip()
                if cell == "":
                    raise ValueError(f"{path}:{lineno}: missing value in column {c!r}")
                try:
                    v = float(cell)
                except ValueError:
                    raise ValueError(f"{path}:{lineno}: non-numeric value {cell!r} in column {c!r}")
                if not math.isfinite(v):
                    raise ValueError(f"{path}:{lineno}: non-finite value in column {c!r}")
                vals.append(v)
            if times and ts <= times[-1]:
                raise ValueError(f"{path}:{lineno}: timestamps must be strictly increasing")
            times.append(ts)
            values.append(vals)
    H = schema.horizon
    n = len(values) // H
    arr = np.asarray(values[:n * H], dtype=float).reshape(n, H * len(schema.columns))
    starts = [times[k * H] for k in range(n)]
    splits = {}
    for name, (lo, hi) in (schema.splits or {}).items():
        lo, hi = datetime.fromisoformat(str(lo)), datetime.fromisoformat(str(hi))
        splits[name] = np.array([k for k, s in enumerate(starts) if lo <= s < hi], dtype=int)
    return ObservationSet(arr, [s.isoformat() for s in starts], list(schema.columns), H, splits)


# --------------------------------------------------------------------------- stochastic Fisher market


class StochasticFisherGame(MarkovGame):
    """Repeated Fisher market with savings; the seller sets prices, the buyers choose bundles and savings.

    State (q, b): supplies and budgets. Actions: prices p (seller), then allocations
    X (buyers x goods, row-major) and savings s (buyers). The buyers receive

        r = p.(q - sum_i X_i) + sum_i (b_i + s_i) log(u_i(X_i) / (b_i + s_i))

    with linear utilities u_i = theta_i . X_i, and the seller receives -r. Next
    budgets are savings plus an income draw; supplies are redrawn around their
    nominal level.
    """

    def __init__(self, n_buyers: int, n_goods: int, supplies, discount: float = 0.9,
                 income=(1.0, 2.0), supply_noise: float = 0.0, price_cap: float = 10.0,
                 alloc_cap: float = 5.0, savings_cap: float = 1.0, init_budget=(1.0, 2.0),
                 type_bounds=(0.1, 10.0)):
        self.nb, self.m = n_buyers, n_goods
        self.supplies = np.asarray(supplies, dtype=float)
        if self.supplies.shape != (n_goods,) or np.any(self.supplies <= 0):
            raise ValueError("supplies must be a positive vector with one entry per good")
        if not (income[0] > 0 or savings_cap > 0):
            raise ValueError("budgets must stay positive")
        self.gamma = float(discount)
        self.income = income
        self.supply_noise = supply_noise
        self.init_budget = init_budget
        self.n_players = 2
        self.state_dim = n_goods + n_buyers
        self.noise_dim = n_buyers + n_goods
        self.action_spaces = [
            Box.uniform(n_goods, 0.0, price_cap),
            Box(np.zeros(n_buyers * n_goods + n_buyers),
                np.concatenate([np.full(n_buyers * n_goods, alloc_cap), np.full(n_buyers, savings_cap)])),
        ]
        self.param_space = Box.uniform(n_buyers * n_goods, *type_bounds)
        bmax = init_budget[1] + income[1] + savings_cap
        self.r_max = float(price_cap * (self.supplies.sum() * (1 + supply_noise) + n_buyers * n_goods * alloc_cap)
                           + n_buyers * bmax * abs(math.log(LOG_FLOOR / bmax)))

    def split_state(self, s):
        return s[:, :self.m], s[:, self.m:]

    def split_action(self, a):
        p = a[:, :self.m]
        X = a[:, self.m:self.m + self.nb * self.m].reshape(-1, self.nb, self.m)
        sv = a[:, self.m + self.nb * self.m:]
        return p, X, sv

    def sample_init(self, rng, B):
        b = rng.uniform(*self.init_budget, size=(B, self.nb))
        q = np.broadcast_to(self.supplies, (B, self.m)).copy()
        return np.concatenate([q, b], axis=1)

    def transition(self, s, a, xi):
        _, _, sv = self.split_action(a)
        lo, hi = self.income
        inc = lo + (hi - lo) * xi[:, :self.nb]
        q = self.supplies * (1 + self.supply_noise * (2 * xi[:, self.nb:] - 1))
        return np.concatenate([q, sv + inc], axis=1)

    def transition_jac_a(self, s, a, xi):
        J = np.zeros((s.shape[0], self.state_dim, a.shape[1]))
        off = self.m + self.nb * self.m
        for i in range(self.nb):
            J[:, self.m + i, off + i] = 1.0
        return J

    def _parts(self, s, a, theta):
        q, b = self.split_state(s)
        p, X, sv = self.split_action(a)
        T = np.asarray(theta, dtype=float).reshape(self.nb, self.m)
        u = np.einsum("bij,ij->bi", X, T)
        live = u > LOG_FLOOR
        lu = np.log(np.maximum(u, LOG_FLOOR))
        w = b + sv
        return q, b, p, X, sv, T, u, live, lu, w

    def buyer_reward(self, s, a, theta):
        q, b, p, X, sv, T, u, live, lu, w = self._parts(s, a, theta)
        return np.einsum("bj,bj->b", p, q - X.sum(axis=1)) + np.sum(w * (lu - np.log(w)), axis=1)

    def reward(self, s, a, theta):
        r = self.buyer_reward(s, a, theta)
        return np.stack([-r, r], axis=1)

    def _buyer_grad_a(self, s, a, theta):
        q, b, p, X, sv, T, u, live, lu, w = self._parts(s, a, theta)
        gp = q - X.sum(axis=1)
        safe = np.where(live, u, 1.0)
        gX = np.where(live[:, :, None], (w / safe)[:, :, None] * T[None], 0.0) - p[:, None, :]
        gs = lu - np.log(w) - 1.0
        return np.concatenate([gp, gX.reshape(len(gp), -1), gs], axis=1)

    def grad_reward_a(self, s, a, theta):
        g = self._buyer_grad_a(s, a, theta)
        return np.stack([-g, g], axis=1)

    def grad_reward_s(self, s, a, theta):
        q, b, p, X, sv, T, u, live, lu, w = self._parts(s, a, theta)
        g = np.concatenate([p, lu - np.log(w) - 1.0], axis=1)
        return np.stack([-g, g], axis=1)

    def grad_reward_theta(self, s, a, theta):
        q, b, p, X, sv, T, u, live, lu, w = self._parts(s, a, theta)
        safe = np.where(live, u, 1.0)
        g = np.where(live[:, :, None], (w / safe)[:, :, None] * X, 0.0).reshape(len(u), -1)
        return np.stack([-g, g], axis=1)


def stochastic_fisher_game(n_buyers: int, n_goods: int, supplies, discount: float = 0.9,
                           rng: Optional[np.random.Generator] = None, **kw) -> StochasticFisherGame:
    """Build the game; ``rng`` (if given) draws the income range so families of markets can be sampled."""
    if rng is not None and "income" not in kw:
        lo = float(rng.uniform(0.5, 1.5))
        kw["income"] = (lo, lo + float(rng.uniform(0.5, 1.5)))
    return StochasticFisherGame(n_buyers, n_goods, supplies, discount, **kw)


def fisher_observation_map(game: StochasticFisherGame, horizon: int, prices: bool = True, demand: bool = True):
    """Per-step prices and/or aggregate demand (sum over buyers of allocations) of a stochastic Fisher market."""
    from .simulacra import ObservationMap

    if not (prices or demand):
        raise ValueError("observe prices, demand or both")
    m, nb = game.m, game.nb
    rows = []
    da = sum(game.action_dims)
    if prices:
        rows.append(np.eye(da)[:m])
    if demand:
        D = np.zeros((m, da))
        for i in range(nb):
            D[:, m + i * m:m + (i + 1) * m] = np.eye(m)
        rows.append(D)
    M = np.concatenate(rows)
    k = M.shape[0]

    def fn(s, a):
        return a @ M.T

    def jac(s, a):
        B = s.shape[0]
        return np.zeros((B, k, game.state_dim)), np.broadcast_to(M, (B, k, da)).copy()

    return ObservationMap("custom", game.state_dim, game.action_dims, horizon, fn=fn, jac=jac, step_dim=k)
