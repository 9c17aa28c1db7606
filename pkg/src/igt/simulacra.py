"""Simulacral learning: fit parameters and a policy profile to observations of play.

The learner minimises over (theta, x) and the discriminator maximises over y

    L(theta, x, y) = alpha * E_{o ~ rho(pi^x)} [(1/K) sum_k ||o - o_k||^2]
                     + beta * sum_i [u_i(y_i, x_-i; theta) - u_i(x; theta)].

Observations are per-step maps of (s_t, a_t) stacked over a fixed horizon, so
the observation term is a sum of stage costs and its policy gradient reuses the
adjoint recursion from the Markov module. Since (1/K) sum_k ||o - o_k||^2 equals
||o - mean||^2 plus the sample spread, only the sample mean enters gradients.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass
from typing import Callable, NamedTuple, Optional, Sequence

import numpy as np

from .markov import (
    History, MarkovGame, Policy, _player_slice, deviation_rollouts, discounted_return, grad_estimator_theta,
    grad_estimator_x, reverse_pathwise, reward_pathwise, simulate, truncation_horizon,
)
from .planner import SolveTrace
from .spaces import make_rng

KINDS = ("identity", "state_only", "aggregate_actions", "coordinates", "custom")


class ObservationMap:
    """History -> observation vector, built from a per-step map phi(s_t, a_t) over ``horizon`` steps."""

    def __init__(self, kind: str, state_dim: int, action_dims: Sequence[int], horizon: int,
                 indices: Optional[Sequence[int]] = None, fn: Optional[Callable] = None,
                 jac: Optional[Callable] = None, step_dim: Optional[int] = None):
        if kind not in KINDS:
            raise ValueError(f"unknown observation map kind {kind!r}")
        if horizon < 1:
            raise ValueError("horizon must be at least 1")
        self.kind, self.horizon = kind, horizon
        self.ds, self.action_dims = state_dim, list(action_dims)
        self.da = sum(self.action_dims)
        if kind == "identity":
            self.step_dim = self.ds + self.da
        elif kind == "state_only":
            self.step_dim = self.ds
        elif kind == "aggregate_actions":
            if len(set(self.action_dims)) != 1:
                raise ValueError("aggregating actions needs equal action dimensions across players")
            self.step_dim = self.action_dims[0]
        elif kind == "coordinates":
            if indices is None or len(indices) == 0:
                raise ValueError("coordinate map needs a nonempty index list")
            self.indices = np.asarray(indices, dtype=int)
            if self.indices.min() < 0 or self.indices.max() >= self.ds + self.da:
                raise ValueError("coordinate index out of range of (state, action)")
            self.step_dim = len(self.indices)
        else:
            if fn is None or step_dim is None:
                raise ValueError("custom map needs fn and step_dim")
            self.fn, self.jac, self.step_dim = fn, jac, step_dim

    @classmethod
    def for_game(cls, kind: str, game: MarkovGame, horizon: int, **kw) -> "ObservationMap":
        return cls(kind, game.state_dim, game.action_dims, horizon, **kw)

    @property
    def dim(self) -> int:
        return self.horizon * self.step_dim

    def step(self, s, a) -> np.ndarray:
        if self.kind == "identity":
            return np.concatenate([s, a], axis=1)
        if self.kind == "state_only":
            return s.copy()
        if self.kind == "aggregate_actions":
            return a.reshape(a.shape[0], len(self.action_dims), -1).sum(axis=1)
        if self.kind == "coordinates":
            return np.concatenate([s, a], axis=1)[:, self.indices]
        return np.asarray(self.fn(s, a), dtype=float)

    def step_jac(self, s, a) -> tuple[np.ndarray, np.ndarray]:
        """Jacobians (B, k, ds) and (B, k, da) of the per-step map."""
        B = s.shape[0]
        if self.kind == "custom":
            if self.jac is not None:
                return self.jac(s, a)
            return self._fd_jac(s, a)
        if self.kind == "aggregate_actions":
            m = self.step_dim
            Ja = np.tile(np.eye(m), (1, len(self.action_dims)))
            return np.zeros((B, m, self.ds)), np.broadcast_to(Ja, (B, m, self.da)).copy()
        if self.kind == "identity":
            idx = np.arange(self.ds + self.da)
        elif self.kind == "state_only":
            idx = np.arange(self.ds)
        else:
            idx = self.indices
        E = np.eye(self.ds + self.da)[idx]
        E = np.broadcast_to(E, (B,) + E.shape)
        return E[:, :, :self.ds].copy(), E[:, :, self.ds:].copy()

    def _fd_jac(self, s, a, h: float = 1e-6):
        def fd(f, v):
            cols = []
            for k in range(v.shape[1]):
                e = np.zeros_like(v)
                e[:, k] = h
                cols.append((f(v + e) - f(v - e)) / (2 * h))
            return np.stack(cols, axis=-1) if cols else np.zeros((v.shape[0], self.step_dim, 0))
        return fd(lambda v: self.step(v, a), s), fd(lambda v: self.step(s, v), a)

    def __call__(self, h: History) -> np.ndarray:
        if h.horizon < self.horizon:
            raise ValueError(f"history of length {h.horizon} is shorter than the map horizon {self.horizon}")
        out = [self.step(h.states[:, t], h.actions[:, t]) for t in range(self.horizon)]
        return np.concatenate(out, axis=1)


@dataclass
class InverseSimulation:
    game: MarkovGame
    obs_map: ObservationMap
    samples: np.ndarray

    def __post_init__(self):
        self.samples = np.atleast_2d(np.asarray(self.samples, dtype=float))
        if self.samples.shape[1] != self.obs_map.dim:
            raise ValueError(f"samples have dimension {self.samples.shape[1]}, map produces {self.obs_map.dim}")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("observation samples must be finite")
        self.mean = self.samples.mean(axis=0)
        # (1/K) sum_k ||o_k - mean||^2, the part of the observation term no policy can remove
        self.spread = float(np.mean(np.sum((self.samples - self.mean) ** 2, axis=1)))

    @property
    def n_samples(self) -> int:
        return len(self.samples)

    @classmethod
    def from_csv(cls, game, obs_map, path) -> "InverseSimulation":
        rows = []
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            skip = 1 if header and header[0] == "start" else 0
            for lineno, row in enumerate(reader, start=2):
                try:
                    rows.append([float(v) for v in row[skip:]])
                except ValueError:
                    raise ValueError(f"{path}:{lineno}: non-numeric observation entry")
        return cls(game, obs_map, np.array(rows))


@dataclass
class SimulacraConfig:
    alpha: float = 1.0
    beta: float = 1.0
    eta_theta: float = 1e-3
    eta_x: float = 1e-2
    eta_y: float = 1e-2
    iters: int = 1000
    batch: int = 8
    horizon: Optional[int] = None
    eps_tail: float = 1e-6
    prox_lambda: Optional[float] = None
    moreau_iters: int = 20
    inner_iters: int = 20
    checkpoints: int = 10
    eval_batch: int = 64
    theta0: Optional[np.ndarray] = None
    x0: Optional[np.ndarray] = None
    y0: Optional[np.ndarray] = None
    seed: int = 0

    def __post_init__(self):
        if self.alpha <= 0 or self.beta <= 0:
            raise ValueError("alpha and beta must be positive")
        if min(self.eta_theta, self.eta_x, self.eta_y) <= 0:
            raise ValueError("step sizes must be positive")
        if self.batch < 1 or self.iters < 0 or self.checkpoints < 1:
            raise ValueError("batch and checkpoints must be positive, iters nonnegative")


class Rollouts(NamedTuple):
    h: History            # under pi^x; its first steps also feed the observation map
    dev: list             # player i: (pi_i^y, pi_-i^x)


class LossParts(NamedTuple):
    observation: float
    regret: float
    total: float


def _head(h: History, H: int) -> History:
    return History(h.states[:, :H], h.actions[:, :H], h.noise[:, :H], h.next_states[:, :H])


def _horizons(sim: InverseSimulation, cfg_horizon: Optional[int], eps_tail: float) -> tuple[int, int]:
    Hr = cfg_horizon or truncation_horizon(sim.game.gamma, sim.game.r_max, eps_tail)
    return Hr, max(Hr, sim.obs_map.horizon)


def draw_rollouts(sim: InverseSimulation, policy: Policy, x, y, H: int, rng, B: int) -> Rollouts:
    H = max(H, sim.obs_map.horizon)
    return Rollouts(simulate(sim.game, policy, x, H, rng, B), deviation_rollouts(sim.game, policy, y, x, H, rng, B))


def observation_term(sim: InverseSimulation, h: History) -> float:
    o = sim.obs_map(h)
    return float(np.mean(np.sum((o - sim.mean) ** 2, axis=1)) + sim.spread)


def regret_term(game: MarkovGame, ro: Rollouts, theta) -> float:
    eq = discounted_return(game, ro.h, theta).mean(axis=0)
    dev = [discounted_return(game, h, theta).mean(axis=0)[i] for i, h in enumerate(ro.dev)]
    return float(np.sum(dev) - eq.sum())


def loss_components(sim: InverseSimulation, policy: Policy, theta, x, y, rollouts: Optional[Rollouts] = None,
                    rng=None, B: int = 64, alpha: float = 1.0, beta: float = 1.0,
                    horizon: Optional[int] = None) -> LossParts:
    if rollouts is None:
        Hr, _ = _horizons(sim, horizon, 1e-6)
        rollouts = draw_rollouts(sim, policy, x, y, Hr, rng if rng is not None else make_rng(0), B)
    obs = observation_term(sim, rollouts.h)
    reg = regret_term(sim.game, rollouts, theta) if beta != 0 else 0.0
    return LossParts(obs, reg, alpha * obs + beta * reg)


def empirical_loss(sim: InverseSimulation, theta, x, y, rollouts: Optional[Rollouts] = None, policy=None,
                   rng=None, B: int = 64, alpha: float = 1.0, beta: float = 1.0) -> float:
    """Monte Carlo estimate of alpha * observation mismatch + beta * cumulative regret."""
    if rollouts is None and policy is None:
        raise ValueError("need either rollouts or a policy to simulate")
    return loss_components(sim, policy, theta, x, y, rollouts, rng, B, alpha, beta).total


def _obs_costs(sim: InverseSimulation, h: History):
    om, H = sim.obs_map, sim.obs_map.horizon
    B = h.batch
    costs = np.empty((B, H))
    dcs = np.empty((B, H, h.states.shape[2]))
    dca = np.empty((B, H, h.actions.shape[2]))
    for t in range(H):
        s, a = h.states[:, t], h.actions[:, t]
        r = om.step(s, a) - sim.mean[t * om.step_dim:(t + 1) * om.step_dim]
        Js, Ja = om.step_jac(s, a)
        costs[:, t] = np.sum(r ** 2, axis=1)
        dcs[:, t] = 2 * np.einsum("bk,bks->bs", r, Js)
        dca[:, t] = 2 * np.einsum("bk,bka->ba", r, Ja)
    return costs, dcs, dca


def loss_gradients(sim: InverseSimulation, policy: Policy, theta, x, y, ro: Rollouts,
                   alpha: float, beta: float, with_y: bool = True):
    """Stochastic gradients (g_theta, g_x, g_y) of the empirical loss from one set of rollouts."""
    game = sim.game
    x, y = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
    H_obs = sim.obs_map.horizon
    ho = _head(ro.h, H_obs)
    costs, dcs, dca = _obs_costs(sim, ho)
    g_x = alpha * reverse_pathwise(game, policy, x, ho, costs, dcs, dca, np.ones(H_obs)).mean(axis=0)
    g_theta = beta * grad_estimator_theta(game, ro.dev, ro.h, theta)
    for i in range(game.n_players):
        # -d/dx u_i(x) along pi^x, plus d/dx_-i u_i(y_i, x_-i) along player i's deviation rollout
        g_x -= beta * reward_pathwise(game, policy, x, ro.h, theta, i).mean(axis=0)
        zi = policy.splice(x, y, i)
        gd = reward_pathwise(game, policy, zi, ro.dev[i], theta, i).mean(axis=0)
        gd[_player_slice(policy, i)] = 0.0
        g_x += beta * gd
    g_y = beta * grad_estimator_x(game, policy, y, x, ro.h.horizon, None, theta, histories=ro.dev) if with_y else None
    return g_theta, g_x, g_y


# --------------------------------------------------------------------------- Moreau diagnostic


def moreau_stationarity(phi: Callable, z, lam: float, inner_iters: int = 50, grad: Optional[Callable] = None,
                        project: Optional[Callable] = None, lr: Optional[float] = None,
                        fd_step: float = 1e-6) -> float:
    """2 lam ||z - prox(z)|| with prox(z) = argmin_w phi(w) + lam ||z - w||^2 approximated by gradient steps.

    ``grad`` defaults to central differences of ``phi``. The step 1/(3 lam) is
    stable whenever lam is at least twice the smoothness of phi.
    """
    if lam <= 0:
        raise ValueError("prox weight must be positive")
    z = np.atleast_1d(np.asarray(z, dtype=float))
    if grad is None:
        def grad(w):
            g = np.empty_like(w)
            for k in range(len(w)):
                e = np.zeros_like(w)
                e[k] = fd_step
                g[k] = (phi(w + e) - phi(w - e)) / (2 * fd_step)
            return g
    step = lr if lr is not None else 1.0 / (3.0 * lam)
    w = z.copy()
    for _ in range(inner_iters):
        g = np.asarray(grad(w), dtype=float) + 2 * lam * (w - z)
        if not np.all(np.isfinite(g)):
            raise FloatingPointError("non-finite gradient inside the proximal solve")
        w = w - step * g
        if project is not None:
            w = project(w)
    return float(2 * lam * np.linalg.norm(z - w))


def smoothness_probe(grad: Callable, z, rng, n: int = 3, scale: float = 1e-3) -> float:
    """Largest ||grad(z + d) - grad(z)|| / ||d|| over n random directions."""
    z = np.asarray(z, dtype=float)
    g0 = np.asarray(grad(z))
    best = 0.0
    for _ in range(n):
        d = rng.normal(size=z.shape)
        d *= scale / np.linalg.norm(d)
        best = max(best, float(np.linalg.norm(np.asarray(grad(z + d)) - g0) / scale))
    return best


class _Envelope:
    """phi(theta, x) = max_y L(theta, x, y) with the inner max by warm-started ascent under common random numbers."""

    def __init__(self, sim, policy, cfg: SimulacraConfig, H: int, seed: int, y0):
        self.sim, self.policy, self.cfg, self.H, self.seed = sim, policy, cfg, H, seed
        self.dt = sim.game.param_space.dim
        self.y = np.array(y0, dtype=float)

    def split(self, z):
        return z[:self.dt], z[self.dt:]

    def project(self, z):
        th, x = self.split(z)
        return np.concatenate([self.sim.game.param_space.project(th), self.policy.param_space.project(x)])

    def _rollouts(self, x, y):
        return draw_rollouts(self.sim, self.policy, x, y, self.H, make_rng(self.seed), self.cfg.eval_batch)

    def solve_inner(self, z):
        th, x = self.split(z)
        y = self.y
        for _ in range(self.cfg.inner_iters):
            ro = self._rollouts(x, y)
            g = grad_estimator_x(self.sim.game, self.policy, y, x, ro.h.horizon, None, th, histories=ro.dev)
            y = self.policy.param_space.project(y + self.cfg.eta_y * g)
        self.y = y
        return y

    def value(self, z) -> LossParts:
        th, x = self.split(z)
        y = self.solve_inner(z)
        return loss_components(self.sim, self.policy, th, x, y, self._rollouts(x, y),
                               alpha=self.cfg.alpha, beta=self.cfg.beta)

    def grad(self, z):
        th, x = self.split(z)
        y = self.solve_inner(z)
        g_th, g_x, _ = loss_gradients(self.sim, self.policy, th, x, y, self._rollouts(x, y),
                                      self.cfg.alpha, self.cfg.beta, with_y=False)
        return np.concatenate([g_th, g_x])


def simulacral_solve(sim: InverseSimulation, policy: Policy, cfg: SimulacraConfig) -> SolveTrace:
    """Three-block stochastic projected GDA; theta and x descend, y ascends.

    At evenly spaced checkpoints the Moreau stationarity surrogate of
    phi(theta, x) = max_y L is evaluated; the returned estimate is the
    checkpoint where it is smallest. ``extra`` carries the x and y streams,
    per-iteration loss components and the checkpoint diagnostics.
    """
    game = sim.game
    Theta, X = game.param_space, policy.param_space
    Hr, _ = _horizons(sim, cfg.horizon, cfg.eps_tail)
    rng = make_rng(cfg.seed)
    theta = Theta.sample(rng) if cfg.theta0 is None else np.asarray(cfg.theta0, dtype=float)
    x = X.sample(rng) if cfg.x0 is None else np.asarray(cfg.x0, dtype=float)
    y = x.copy() if cfg.y0 is None else np.asarray(cfg.y0, dtype=float)
    if not (Theta.contains(theta) and X.contains(x) and X.contains(y)):
        raise ValueError("initial iterates must lie in the parameter and policy spaces")

    t0 = time.perf_counter()
    thetas, xs, ys, obs_terms, regrets = [theta.copy()], [x.copy()], [y.copy()], [], []
    marks = sorted({int(round(k * cfg.iters / cfg.checkpoints)) for k in range(1, cfg.checkpoints + 1)} | {0})
    env = _Envelope(sim, policy, cfg, Hr, seed=cfg.seed + 1, y0=y)
    lam = cfg.prox_lambda
    ck_iters, ck_vals, ck_loss = [], [], []

    def checkpoint(t, theta, x):
        nonlocal lam
        z = np.concatenate([theta, x])
        if lam is None:
            lam = max(2.0 * smoothness_probe(env.grad, z, make_rng(cfg.seed + 2)), 1e-3)
        ck_iters.append(t)
        ck_vals.append(moreau_stationarity(None, z, lam, cfg.moreau_iters, grad=env.grad, project=env.project))
        ck_loss.append(env.value(z))

    for t in range(cfg.iters):
        if t in marks:
            checkpoint(t, theta, x)
        ro = draw_rollouts(sim, policy, x, y, Hr, rng, cfg.batch)
        parts = loss_components(sim, policy, theta, x, y, ro, alpha=cfg.alpha, beta=cfg.beta)
        g_th, g_x, g_y = loss_gradients(sim, policy, theta, x, y, ro, cfg.alpha, cfg.beta)
        if not all(np.all(np.isfinite(g)) for g in (g_th, g_x, g_y)):
            raise FloatingPointError(f"non-finite gradient estimate at iteration {t}: theta={theta.tolist()}")
        obs_terms.append(parts.observation)
        regrets.append(parts.regret)
        theta = Theta.project(theta - cfg.eta_theta * g_th)
        x = X.project(x - cfg.eta_x * g_x)
        y = X.project(y + cfg.eta_y * g_y)
        thetas.append(theta.copy())
        xs.append(x.copy())
        ys.append(y.copy())
    checkpoint(cfg.iters, theta, x)

    best = int(np.argmin(ck_vals))
    bt = ck_iters[best]
    thetas = np.array(thetas)
    final = ck_loss[-1]
    trace = SolveTrace(
        thetas, np.array(ys), np.array(obs_terms) * cfg.alpha + np.array(regrets) * cfg.beta,
        thetas.mean(axis=0), thetas[bt].copy(), cfg.iters, 0.0,
        certificate=ck_loss[best].regret, certificate_method="ascent_monte_carlo",
        deviation=env.y.copy(),
        extra={
            "xs": np.array(xs), "x_hat": np.array(xs[bt]), "best_iter": bt, "prox_lambda": lam,
            "observation_terms": np.array(obs_terms), "regret_terms": np.array(regrets),
            "checkpoint_iters": ck_iters, "moreau": ck_vals,
            "moreau_best_so_far": list(np.minimum.accumulate(ck_vals)),
            "checkpoint_observation": [c.observation for c in ck_loss],
            "checkpoint_regret": [c.regret for c in ck_loss],
            "final_observation": final.observation, "final_regret": final.regret, "final_loss": final.total,
            "irreducible_observation": sim.spread, "horizon": Hr,
        },
    )
    trace.wall_ms = (time.perf_counter() - t0) * 1e3
    return trace


def write_loss_curve(trace: SolveTrace, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iter", "observation", "regret", "loss"])
        for t, (o, r, f) in enumerate(zip(trace.extra["observation_terms"], trace.extra["regret_terms"],
                                          trace.f_values)):
            w.writerow([t, repr(float(o)), repr(float(r)), repr(float(f))])


# --------------------------------------------------------------------------- synthetic problems


def sample_observations(game: MarkovGame, policy: Policy, z, obs_map: ObservationMap, K: int, rng) -> np.ndarray:
    return obs_map(simulate(game, policy, z, obs_map.horizon, rng, K))


def tracking_simulation(theta_star, K: int = 10_000, horizon: int = 10, seed: int = 0, sigma: float = 0.01,
                        kind: str = "identity", **game_kw):
    """Self-consistent inverse simulation: observations of the equilibrium of a tracking game.

    The initial state is fixed and transition noise is small, so observations
    are nearly deterministic and the irreducible part of the observation term is
    small. Returns (sim, policy, x_star).
    """
    from .markov import LinearPolicy, TrackingGame

    kw = dict(sigma=sigma, s0_scale=0.0, s0_center=1.0)
    kw.update(game_kw)
    game = TrackingGame(n_players=len(theta_star), **kw)
    policy = LinearPolicy(1, [1] * game.n_players, action_spaces=game.action_spaces)
    x_star = game.equilibrium_params(np.asarray(theta_star, dtype=float))
    om = ObservationMap.for_game(kind, game, horizon)
    samples = sample_observations(game, policy, x_star, om, K, make_rng(seed, 0))
    return InverseSimulation(game, om, samples), policy, x_star


def generalization_gaps(game: MarkovGame, policy: Policy, z, obs_map: ObservationMap, Ks: Sequence[int],
                        reference: int = 1_000_000, reps: int = 30, eval_batch: int = 1000, seed: int = 0):
    """Mean |observation term from K samples - term from a large reference sample| for each K.

    The candidate policy z is fixed and also generates the samples. Its
    rollouts are shared across all K so only the sample set varies.
    """
    o = sample_observations(game, policy, z, obs_map, eval_batch, make_rng(seed, 1))

    def term(samples):
        mu = samples.mean(axis=0)
        spread = np.mean(np.sum((samples - mu) ** 2, axis=1))
        return float(np.mean(np.sum((o - mu) ** 2, axis=1)) + spread)

    ref_rng = make_rng(seed, 2)
    ref_parts = [sample_observations(game, policy, z, obs_map, min(reference, 100_000), ref_rng)
                 for _ in range(max(1, reference // 100_000))]
    ref = term(np.concatenate(ref_parts))
    gaps = []
    for j, K in enumerate(Ks):
        rng = make_rng(seed, 3, j)
        gaps.append(float(np.mean([abs(term(sample_observations(game, policy, z, obs_map, K, rng)) - ref)
                                   for _ in range(reps)])))
    return np.array(gaps)


def loglog_slope(Ks, gaps) -> float:
    return float(np.polyfit(np.log(np.asarray(Ks, dtype=float)), np.log(gaps), 1)[0])
