"""Inverse equilibrium solving with exact payoff oracles.

The stabilizer (parameters theta) descends and the destabilizer (a deviation
profile y) ascends the cumulative regret of the observed profile x_hat:

    f(theta, y) = sum_i u_i(y_i, x_hat_-i; theta) - u_i(x_hat; theta).

Both players take simultaneous projected gradient steps; the returned estimate
is the running average of all parameter iterates (or the last iterate).
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Optional

import numpy as np

from .games import ParametricGame, cumulative_regret
from .spaces import make_rng

__all__ = [
    "InverseGame", "GdaConfig", "SolveTrace", "Exploitability",
    "cumulative_regret", "exploitability", "gda_solve", "average_iterates", "relative_error", "duality_gap",
]


class Exploitability(NamedTuple):
    value: float
    deviation: np.ndarray
    method: str

    @property
    def lower_bound(self) -> bool:
        return self.method == "pga"


def _pga_player(game, theta, x, i, rng, restarts, steps, lr):
    space = game.strategy_spaces[i]
    sl = slice(game.offsets[i], game.offsets[i + 1])
    starts = [x[sl].copy()]
    for _ in range(restarts - 1):
        if space.bounded:
            starts.append(space.sample(rng))
        else:
            starts.append(space.project(x[sl] + rng.normal(scale=1.0, size=x[sl].shape)))
    best_val, best = game.payoff(x, theta)[i], x[sl].copy()
    for y in starts:
        z = x.copy()
        for _ in range(steps):
            z[sl] = y
            y = space.project(y + lr * game.grad_payoff_x(z, theta)[sl])
        z[sl] = y
        val = game.payoff(z, theta)[i]
        if val > best_val:
            best_val, best = val, y
    return best


def exploitability(game: ParametricGame, theta, x, method: Optional[str] = None, rng=None,
                   restarts: int = 8, steps: int = 2000, lr: float = 0.01) -> Exploitability:
    """Maximum cumulative regret of profile x at parameters theta.

    The inner max separates across players. ``method`` is "closed_form" or
    "grid" when the game supplies best responses, otherwise "pga": projected
    gradient ascent from the observed strategy plus random restarts, whose
    value is only a lower bound on the true maximum.
    """
    theta = np.asarray(theta, dtype=float)
    x = np.asarray(x, dtype=float)
    method = method or game.best_response_method or "pga"
    if method == "pga":
        rng = rng if rng is not None else make_rng(0)
        y = np.concatenate([_pga_player(game, theta, x, i, rng, restarts, steps, lr)
                            for i in range(game.n_players)])
    else:
        y = game.best_response(x, theta)
        if y is None:
            raise ValueError(f"game has no {method} best response")
    value = cumulative_regret(game, theta, x, y)
    if value < 0:  # x itself is a feasible deviation with regret exactly zero
        return Exploitability(0.0, x.copy(), method)
    return Exploitability(value, y, method)


@dataclass
class InverseGame:
    game: ParametricGame
    observed: np.ndarray

    def __post_init__(self):
        self.observed = np.asarray(self.observed, dtype=float)
        if not self.game.profile_space.contains(self.observed, tol=1e-8):
            raise ValueError("observed profile lies outside the strategy space")


@dataclass
class GdaConfig:
    eta_theta: float = 0.01
    eta_y: float = 0.01
    iters: int = 5000
    theta0: Optional[np.ndarray] = None
    y0: Optional[np.ndarray] = None
    stop_rel_tol: float = 0.1
    average: bool = True
    seed: int = 0
    certify: bool = True
    ascent: str = "gradient"
    schedule: str = "constant"

    def __post_init__(self):
        if self.eta_theta <= 0 or self.eta_y <= 0:
            raise ValueError("step sizes must be positive")
        if self.iters < 0:
            raise ValueError("iteration count must be nonnegative")
        if self.ascent not in ("gradient", "best_response"):
            raise ValueError(f"unknown ascent rule {self.ascent!r}")
        if self.schedule not in ("constant", "inverse_t"):
            raise ValueError(f"unknown step schedule {self.schedule!r}")

    def step_scale(self, t: int) -> float:
        return 1.0 if self.schedule == "constant" else 1.0 / (1.0 + t)


@dataclass
class SolveTrace:
    thetas: np.ndarray
    ys: np.ndarray
    f_values: np.ndarray
    theta_bar: np.ndarray
    theta_hat: np.ndarray
    iters: int
    wall_ms: float
    certificate: Optional[float] = None
    certificate_method: Optional[str] = None
    deviation: Optional[np.ndarray] = None
    stopped_early: bool = False
    extra: dict = field(default_factory=dict)

    def summary(self) -> dict:
        return {
            "theta_bar": self.theta_bar.tolist(),
            "theta_hat": self.theta_hat.tolist(),
            "certificate": self.certificate,
            "certificate_method": self.certificate_method,
            "iters": self.iters,
            "wall_ms": self.wall_ms,
        }

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.summary(), indent=2))

    def to_csv(self, path, game: Optional[ParametricGame] = None, observed=None, every: int = 1) -> None:
        """Iterate log; the running-average certificate column needs the game and observed profile."""
        running = np.cumsum(self.thetas, axis=0) / np.arange(1, len(self.thetas) + 1)[:, None]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iter", "f_value"] + [f"theta_{k}" for k in range(self.thetas.shape[1])]
                       + ["exploitability_running"])
            for t in range(0, len(self.f_values), every):
                ex = ""
                if game is not None and observed is not None:
                    ex = repr(exploitability(game, running[t], observed).value)
                w.writerow([t, repr(float(self.f_values[t]))] + [repr(float(v)) for v in self.thetas[t]] + [ex])


def average_iterates(trace) -> np.ndarray:
    thetas = trace.thetas if isinstance(trace, SolveTrace) else np.asarray(trace, dtype=float)
    if len(thetas) == 0:
        raise ValueError("empty trace")
    return np.mean(thetas, axis=0)


def relative_error(theta_hat, theta_star) -> float:
    theta_star = np.asarray(theta_star, dtype=float)
    if np.any(theta_star == 0):
        raise ValueError("relative error undefined for zero true parameters")
    return float(np.linalg.norm((np.asarray(theta_hat, dtype=float) - theta_star) / theta_star))


def duality_gap(game: ParametricGame, x_hat, theta, y) -> float:
    """max_y' f(theta, y') - min_theta' f(theta', y) for regrets affine in theta over a box.

    The inner min then sits at the vertex picked by the sign of the theta
    gradient, so the gap is exact for the quadratic toy, Cournot and
    budgets-only Fisher games.
    """
    Theta = game.param_space
    _, g, _ = game.regret_terms(x_hat, y, theta)
    vertex = np.where(g > 0, Theta.lower, Theta.upper)
    return exploitability(game, theta, x_hat).value - game.regret_terms(x_hat, y, vertex)[0]


def gda_solve(inv: InverseGame, cfg: GdaConfig, theta_star=None, theta_map=None) -> SolveTrace:
    """Simultaneous projected gradient descent ascent on the cumulative regret.

    With ``ascent="best_response"`` the deviation profile is replaced each
    iteration by the game's exact best response to the current parameters, so
    the parameter step follows the gradient of the exploitability itself.
    ``theta_star`` (benchmark use only) enables early stopping once the running
    estimate is within ``cfg.stop_rel_tol`` relative L2 error; ``theta_map``
    transforms an estimate before that comparison.
    """
    game, x_hat = inv.game, inv.observed
    Theta, X = game.param_space, game.profile_space
    rng = make_rng(cfg.seed)
    theta = Theta.sample(rng) if cfg.theta0 is None else np.asarray(cfg.theta0, dtype=float)
    y = x_hat.copy() if cfg.y0 is None else np.asarray(cfg.y0, dtype=float)
    if not Theta.contains(theta) or not X.contains(y):
        raise ValueError("initial iterates must lie in the parameter and strategy spaces")

    t0 = time.perf_counter()
    thetas = [theta.copy()]
    ys = [y.copy()]
    fs = []
    total = theta.copy()
    stopped = False
    if cfg.ascent == "best_response" and game.best_response(x_hat, theta) is None:
        raise ValueError("best-response ascent needs a game with a best-response oracle")
    for t in range(cfg.iters):
        if cfg.ascent == "best_response":
            y = game.best_response(x_hat, theta)
            ys[-1] = y.copy()
        f, g_theta, g_y = game.regret_terms(x_hat, y, theta)
        if not (np.isfinite(f) and np.all(np.isfinite(g_theta)) and np.all(np.isfinite(g_y))):
            raise FloatingPointError(f"non-finite gradient at iteration {t}: theta={theta.tolist()} y={y.tolist()}")
        fs.append(f)
        k = cfg.step_scale(t)
        theta_next = Theta.project(theta - k * cfg.eta_theta * g_theta)
        if cfg.ascent == "gradient":
            y = X.project(y + k * cfg.eta_y * g_y)
        theta = theta_next
        total += theta
        thetas.append(theta.copy())
        ys.append(y.copy())
        if theta_star is not None:
            est = total / len(thetas) if cfg.average else theta
            if theta_map is not None:
                est = theta_map(est)
            if relative_error(est, theta_star) <= cfg.stop_rel_tol:
                stopped = True
                break
    fs.append(game.regret_terms(x_hat, y, theta)[0])
    thetas = np.array(thetas)
    theta_bar = total / len(thetas)
    trace = SolveTrace(thetas, np.array(ys), np.array(fs), theta_bar,
                       theta_bar if cfg.average else theta.copy(), len(thetas) - 1,
                       0.0, stopped_early=stopped)
    if cfg.certify:
        ex = exploitability(game, trace.theta_hat, x_hat)
        trace.certificate, trace.certificate_method, trace.deviation = ex.value, ex.method, ex.deviation
    trace.wall_ms = (time.perf_counter() - t0) * 1e3
    return trace
