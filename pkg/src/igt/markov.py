"""Markov games, parametric policies, differentiable rollouts and stochastic GDA.

Histories are batched: ``states`` has shape (B, H, ds) and ``actions`` has shape
(B, H, da) where da is the total action dimension of the profile. Finite games
are always run through the simplex embedding: an action is a vector of mixed
strategies, rewards are the multilinear expectation and transitions are affine
in each player's mixed action, so every quantity is differentiable in actions.

Policy parameters are one vector z holding a block per player. The estimator of
the deviation-payoff gradient accumulates adjoints backwards along each rollout:

    G_a     = w_t dc/da + lam_{t+1} dg/da  (+ score term for discrete transitions)
    grad_z += G_a dpi/dz
    lam_t   = w_t dc/ds + lam_{t+1} dg/ds + G_a dpi/ds

where g is the reparameterised transition s' = g(s, a, xi).
"""

from __future__ import annotations

import csv
import json
import math
import time
from functools import cached_property
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .games import ParametricGame
from .planner import SolveTrace
from .spaces import Box, Product, Simplex, Space, make_rng


class UnsupportedGameError(TypeError):
    pass


def truncation_horizon(gamma: float, r_max: float, eps_tail: float = 1e-6) -> int:
    """Smallest H with r_max * gamma^H / (1 - gamma) <= eps_tail."""
    if not 0 < gamma < 1:
        raise ValueError("discount must lie in (0, 1)")
    if r_max <= 0:
        return 1
    return max(1, math.ceil(math.log(eps_tail * (1 - gamma) / r_max) / math.log(gamma)))


# --------------------------------------------------------------------------- games


class MarkovGame:
    """Interface for differentiable Markov games (batched over the leading axis)."""

    n_players: int
    gamma: float
    state_dim: int
    action_spaces: list
    param_space: Space
    r_max: float = 1.0
    noise_dim: int = 1
    finite: bool = False
    differentiable: bool = True

    @cached_property
    def action_dims(self) -> list[int]:
        return [sp.dim for sp in self.action_spaces]

    @cached_property
    def action_offsets(self) -> np.ndarray:
        return np.concatenate([[0], np.cumsum(self.action_dims)]).astype(int)

    def sample_init(self, rng, B: int) -> np.ndarray:
        raise NotImplementedError

    def sample_noise(self, rng, B: int) -> np.ndarray:
        return rng.uniform(size=(B, self.noise_dim))

    def transition(self, s, a, xi) -> np.ndarray:
        raise NotImplementedError

    def reward(self, s, a, theta) -> np.ndarray:
        raise NotImplementedError

    def grad_reward_a(self, s, a, theta) -> np.ndarray:
        raise NotImplementedError

    def grad_reward_s(self, s, a, theta) -> np.ndarray:
        return np.zeros((s.shape[0], self.n_players, self.state_dim))

    def grad_reward_theta(self, s, a, theta) -> np.ndarray:
        raise NotImplementedError

    def transition_jac_s(self, s, a, xi) -> np.ndarray:
        return np.zeros((s.shape[0], self.state_dim, self.state_dim))

    def transition_jac_a(self, s, a, xi) -> np.ndarray:
        return np.zeros((s.shape[0], self.state_dim, a.shape[1]))

    def transition_score_a(self, s, a, s_next) -> Optional[np.ndarray]:
        """d log P(s'|s, a)/da for discrete transitions, None for reparameterised ones."""
        return None


def _contract(X: np.ndarray, acts: Sequence[np.ndarray], skip: Optional[int] = None) -> np.ndarray:
    # X has shape (B, m_1, ..., m_n, rest...); contract every player axis except `skip`
    for k, a in enumerate(acts):
        if k == skip:
            X = np.moveaxis(X, 1, -1)
            continue
        X = np.einsum("bj...,bj->b...", X, a)
    return X


class FiniteMarkovGame(MarkovGame):
    """Tabular game with rewards R0 + Phi . theta and transition tensor P.

    Shapes: R0 (S, m_1..m_n, n), Phi (S, m_1..m_n, n, d), P (S, m_1..m_n, S), mu (S,).
    """

    finite = True

    def __init__(self, R0, Phi, P, gamma: float, mu, param_space: Optional[Space] = None):
        self.R0 = np.asarray(R0, dtype=float)
        self.Phi = np.asarray(Phi, dtype=float)
        self.P = np.asarray(P, dtype=float)
        self.mu = np.asarray(mu, dtype=float)
        self.gamma = float(gamma)
        self.n_states = self.P.shape[0]
        self.action_counts = list(self.P.shape[1:-1])
        self.n_players = len(self.action_counts)
        if self.R0.shape != (self.n_states, *self.action_counts, self.n_players):
            raise ValueError("reward tensor shape does not match the transition tensor")
        if not np.allclose(self.P.sum(axis=-1), 1.0, atol=1e-12) or np.any(self.P < 0):
            raise ValueError("transition rows must be probability distributions")
        if abs(self.mu.sum() - 1) > 1e-12:
            raise ValueError("initial distribution must sum to one")
        d = self.Phi.shape[-1]
        self.param_space = param_space or Box.uniform(d, -1.0, 1.0)
        self.action_spaces = [Simplex(m) for m in self.action_counts]
        self.state_dim = 1
        self.noise_dim = 1
        th = self.param_space
        bound = np.abs(self.R0) + np.abs(self.Phi) @ np.maximum(np.abs(th.lower), np.abs(th.upper)) \
            if isinstance(th, Box) else np.abs(self.R0)
        self.r_max = float(np.max(bound))

    def rewards_at(self, theta) -> np.ndarray:
        return self.R0 + self.Phi @ np.asarray(theta, dtype=float)

    def _split(self, a):
        off = self.action_offsets
        return [a[:, off[k]:off[k + 1]] for k in range(self.n_players)]

    def _idx(self, s):
        return s[:, 0].astype(int)

    def sample_init(self, rng, B):
        u = rng.uniform(size=B)
        return np.searchsorted(np.cumsum(self.mu), u, side="right").clip(max=self.n_states - 1)[:, None].astype(float)

    def next_state_probs(self, s, a):
        return _contract(self.P[self._idx(s)], self._split(a))

    def transition(self, s, a, xi):
        cdf = np.cumsum(self.next_state_probs(s, a), axis=1)
        nxt = (xi[:, :1] >= cdf).sum(axis=1).clip(max=self.n_states - 1)
        return nxt[:, None].astype(float)

    def reward(self, s, a, theta):
        return _contract(self.rewards_at(theta)[self._idx(s)], self._split(a))

    def grad_reward_a(self, s, a, theta):
        R = self.rewards_at(theta)[self._idx(s)]
        acts = self._split(a)
        return np.concatenate([_contract(R, acts, skip=k) for k in range(self.n_players)], axis=-1)

    def grad_reward_theta(self, s, a, theta):
        return _contract(self.Phi[self._idx(s)], self._split(a))

    def transition_score_a(self, s, a, s_next):
        P = self.P[self._idx(s)]
        acts = self._split(a)
        nxt = s_next[:, 0].astype(int)
        rows = np.arange(len(nxt))
        prob = _contract(P, acts)[rows, nxt]
        parts = [_contract(P, acts, skip=k)[rows, nxt] for k in range(self.n_players)]
        return np.concatenate(parts, axis=-1) / prob[:, None]

    def to_json(self) -> str:
        th = self.param_space
        return json.dumps({
            "R0": self.R0.tolist(), "Phi": self.Phi.tolist(), "P": self.P.tolist(),
            "gamma": self.gamma, "mu": self.mu.tolist(),
            "theta_lower": th.lower.tolist(), "theta_upper": th.upper.tolist(),
        })

    @classmethod
    def from_json(cls, text: str) -> "FiniteMarkovGame":
        d = json.loads(text)
        return cls(d["R0"], d["Phi"], d["P"], d["gamma"], d["mu"],
                   Box(np.asarray(d["theta_lower"]), np.asarray(d["theta_upper"])))


class StaticMarkovGame(MarkovGame):
    """A one-shot parametric game repeated in a single absorbing state.

    Only each player's own-action block of the reward gradient is filled in;
    cross terms never enter the estimators because the state never moves.
    """

    def __init__(self, game: ParametricGame, gamma: float = 0.9, r_max: float = 1.0):
        self.game = game
        self.gamma = float(gamma)
        self.n_players = game.n_players
        self.action_spaces = list(game.strategy_spaces)
        self.param_space = game.param_space
        self.state_dim = 1
        self.r_max = float(r_max)

    def sample_init(self, rng, B):
        return np.zeros((B, 1))

    def transition(self, s, a, xi):
        return np.zeros_like(s)

    def reward(self, s, a, theta):
        return np.stack([self.game.payoff(row, theta) for row in a])

    def grad_reward_a(self, s, a, theta):
        off = self.action_offsets
        out = np.zeros((a.shape[0], self.n_players, a.shape[1]))
        for b, row in enumerate(a):
            g = self.game.grad_payoff_x(row, theta)
            for i in range(self.n_players):
                out[b, i, off[i]:off[i + 1]] = g[off[i]:off[i + 1]]
        return out

    def grad_reward_theta(self, s, a, theta):
        return np.stack([self.game.grad_payoff_theta(row, theta) for row in a])


class TrackingGame(MarkovGame):
    """Scalar AR(1) state s' = rho s + sigma xi with rewards -(a_i - theta_i - kappa s)^2.

    Transitions ignore actions, so the unique Nash equilibrium is the linear
    policy a_i = theta_i + kappa s for every player.
    """

    def __init__(self, n_players: int = 2, rho: float = 0.5, sigma: float = 0.1, kappa: float = 0.5,
                 gamma: float = 0.9, s0_scale: float = 1.0, theta_bound: float = 2.0, action_bound: float = 5.0,
                 s0_center: float = 0.0):
        self.n_players = n_players
        self.rho, self.sigma, self.kappa = rho, sigma, kappa
        self.gamma = gamma
        self.s0_scale, self.s0_center = s0_scale, s0_center
        self.state_dim = 1
        self.action_spaces = [Box.uniform(1, -action_bound, action_bound) for _ in range(n_players)]
        self.param_space = Box.uniform(n_players, -theta_bound, theta_bound)
        self.r_max = (2 * action_bound) ** 2

    def sample_init(self, rng, B):
        return self.s0_center + rng.uniform(-self.s0_scale, self.s0_scale, size=(B, 1))

    def sample_noise(self, rng, B):
        return rng.normal(size=(B, 1))

    def transition(self, s, a, xi):
        return self.rho * s + self.sigma * xi

    def transition_jac_s(self, s, a, xi):
        return np.full((s.shape[0], 1, 1), self.rho)

    def _gap(self, s, a, theta):
        return a - theta[None, :] - self.kappa * s

    def reward(self, s, a, theta):
        return -self._gap(s, a, theta) ** 2

    def grad_reward_a(self, s, a, theta):
        g = -2 * self._gap(s, a, theta)
        out = np.zeros((s.shape[0], self.n_players, self.n_players))
        idx = np.arange(self.n_players)
        out[:, idx, idx] = g
        return out

    def grad_reward_s(self, s, a, theta):
        return (2 * self.kappa * self._gap(s, a, theta))[:, :, None]

    def grad_reward_theta(self, s, a, theta):
        g = 2 * self._gap(s, a, theta)
        out = np.zeros((s.shape[0], self.n_players, self.n_players))
        idx = np.arange(self.n_players)
        out[:, idx, idx] = g
        return out

    def equilibrium_params(self, theta) -> np.ndarray:
        """LinearPolicy parameters (weight, bias) per player of the equilibrium."""
        return np.concatenate([[self.kappa, t] for t in theta])


# --------------------------------------------------------------------------- policies


class Policy:
    """Parametric policy profile; z holds one parameter block per player."""

    n_players: int
    param_space: Product
    action_dims: list

    @property
    def offsets(self) -> np.ndarray:
        return self.param_space.offsets

    @cached_property
    def action_offsets(self) -> np.ndarray:
        return np.concatenate([[0], np.cumsum(self.action_dims)]).astype(int)

    def act(self, z, s) -> np.ndarray:
        raise NotImplementedError

    def jac_z(self, z, s) -> np.ndarray:
        raise NotImplementedError

    def jac_s(self, z, s) -> np.ndarray:
        return np.zeros((s.shape[0], sum(self.action_dims), s.shape[1]))

    def splice(self, base, z, i: int) -> np.ndarray:
        """Parameters where player i plays its block of z and others play base."""
        out = np.array(base, dtype=float, copy=True)
        sl = slice(self.offsets[i], self.offsets[i + 1])
        out[sl] = np.asarray(z)[sl]
        return out


class TabularPolicy(Policy):
    """Mixed action per player per state; player i's block is an (S, m_i) row-stochastic table."""

    def __init__(self, n_states: int, action_counts: Sequence[int]):
        self.n_states = n_states
        self.action_dims = list(action_counts)
        self.n_players = len(self.action_dims)
        self.param_space = Product(tuple(Simplex(m) for m in self.action_dims for _ in range(n_states)))

    def table(self, z, i: int) -> np.ndarray:
        return np.asarray(z)[self.offsets[i * self.n_states]:self.offsets[(i + 1) * self.n_states]].reshape(
            self.n_states, self.action_dims[i])

    @cached_property
    def player_offsets(self) -> np.ndarray:
        return self.offsets[::self.n_states]

    def splice(self, base, z, i):
        out = np.array(base, dtype=float, copy=True)
        po = self.player_offsets
        out[po[i]:po[i + 1]] = np.asarray(z)[po[i]:po[i + 1]]
        return out

    def player_block(self, z, i):
        po = self.player_offsets
        return np.asarray(z)[po[i]:po[i + 1]]

    def act(self, z, s):
        idx = s[:, 0].astype(int)
        return np.concatenate([self.table(z, i)[idx] for i in range(self.n_players)], axis=1)

    def jac_z(self, z, s):
        idx = s[:, 0].astype(int)
        B = len(idx)
        J = np.zeros((B, sum(self.action_dims), self.param_space.dim))
        ao = self.action_offsets
        po = self.player_offsets
        for i, m in enumerate(self.action_dims):
            for j in range(m):
                J[np.arange(B), ao[i] + j, po[i] + idx * m + j] = 1.0
        return J

    @classmethod
    def from_actions(cls, choices: np.ndarray, action_counts: Sequence[int]) -> tuple["TabularPolicy", np.ndarray]:
        """Pure policy from an (n_players, S) array of action indices."""
        choices = np.asarray(choices, dtype=int)
        pol = cls(choices.shape[1], action_counts)
        z = np.concatenate([np.eye(m)[choices[i]].ravel() for i, m in enumerate(action_counts)])
        return pol, z


class ConstantPolicy(Policy):
    """State-independent actions: the parameters are the action profile itself."""

    def __init__(self, action_spaces: Sequence[Space]):
        self.param_space = Product(tuple(action_spaces))
        self.action_dims = [sp.dim for sp in action_spaces]
        self.n_players = len(self.action_dims)

    def player_block(self, z, i):
        return np.asarray(z)[self.offsets[i]:self.offsets[i + 1]]

    def act(self, z, s):
        return np.broadcast_to(np.asarray(z, dtype=float), (s.shape[0], self.param_space.dim)).copy()

    def jac_z(self, z, s):
        return np.broadcast_to(np.eye(self.param_space.dim), (s.shape[0],) + (self.param_space.dim,) * 2).copy()


class LinearPolicy(Policy):
    """a_i = clip(W_i s + c_i) with parameter block (W_i, c_i) row-major per action coordinate."""

    def __init__(self, state_dim: int, action_dims: Sequence[int], weight_bound: float = 5.0,
                 action_spaces: Optional[Sequence[Box]] = None):
        self.state_dim = state_dim
        self.action_dims = list(action_dims)
        self.n_players = len(self.action_dims)
        self.action_boxes = list(action_spaces) if action_spaces is not None else None
        blocks = tuple(Box.uniform(m * (state_dim + 1), -weight_bound, weight_bound) for m in self.action_dims)
        self.param_space = Product(blocks)

    def player_block(self, z, i):
        return np.asarray(z)[self.offsets[i]:self.offsets[i + 1]]

    def _raw(self, z, s):
        feats = np.concatenate([s, np.ones((s.shape[0], 1))], axis=1)
        outs = []
        for i, m in enumerate(self.action_dims):
            W = self.player_block(z, i).reshape(m, self.state_dim + 1)
            outs.append(feats @ W.T)
        return np.concatenate(outs, axis=1), feats

    def _live(self, raw):
        if self.action_boxes is None:
            return np.ones_like(raw, dtype=bool)
        lo = np.concatenate([b.lower for b in self.action_boxes])
        hi = np.concatenate([b.upper for b in self.action_boxes])
        return (raw > lo) & (raw < hi)

    def act(self, z, s):
        raw, _ = self._raw(z, s)
        if self.action_boxes is None:
            return raw
        lo = np.concatenate([b.lower for b in self.action_boxes])
        hi = np.concatenate([b.upper for b in self.action_boxes])
        return np.clip(raw, lo, hi)

    def jac_z(self, z, s):
        raw, feats = self._raw(z, s)
        live = self._live(raw)
        B, k = s.shape[0], self.state_dim + 1
        J = np.zeros((B, raw.shape[1], self.param_space.dim))
        row = 0
        for i, m in enumerate(self.action_dims):
            for j in range(m):
                start = self.offsets[i] + j * k
                J[:, row, start:start + k] = feats * live[:, row:row + 1]
                row += 1
        return J

    def jac_s(self, z, s):
        raw, _ = self._raw(z, s)
        live = self._live(raw)
        rows = []
        for i, m in enumerate(self.action_dims):
            W = self.player_block(z, i).reshape(m, self.state_dim + 1)
            rows.append(W[:, :self.state_dim])
        Ws = np.concatenate(rows, axis=0)
        return Ws[None, :, :] * live[:, :, None]


# --------------------------------------------------------------------------- histories


@dataclass
class History:
    states: np.ndarray
    actions: np.ndarray
    noise: np.ndarray
    next_states: np.ndarray

    @property
    def horizon(self) -> int:
        return self.states.shape[1]

    @property
    def batch(self) -> int:
        return self.states.shape[0]

    def to_csv(self, path, game: MarkovGame, theta) -> None:
        ds, da = self.states.shape[2], self.actions.shape[2]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["episode", "t"] + [f"s{k}" for k in range(ds)] + [f"a{k}" for k in range(da)]
                       + [f"r{k}" for k in range(game.n_players)])
            for t in range(self.horizon):
                r = game.reward(self.states[:, t], self.actions[:, t], theta)
                for b in range(self.batch):
                    w.writerow([b, t] + [repr(float(v)) for v in self.states[b, t]]
                               + [repr(float(v)) for v in self.actions[b, t]] + [repr(float(v)) for v in r[b]])


def simulate(game: MarkovGame, policy: Policy, z, H: int, rng, B: int = 1) -> History:
    """Roll the policy profile forward H steps from s_0 ~ mu, B independent episodes."""
    if H < 1:
        raise ValueError("horizon must be at least 1")
    z = np.asarray(z, dtype=float)
    s = game.sample_init(rng, B)
    states = np.empty((B, H, game.state_dim))
    actions = np.empty((B, H, sum(game.action_dims)))
    noise = np.empty((B, H, game.noise_dim))
    nxt = np.empty((B, H, game.state_dim))
    for t in range(H):
        a = policy.act(z, s)
        xi = game.sample_noise(rng, B)
        s_next = game.transition(s, a, xi)
        states[:, t], actions[:, t], noise[:, t], nxt[:, t] = s, a, xi, s_next
        s = s_next
    return History(states, actions, noise, nxt)


def discounted_return(game: MarkovGame, h: History, theta) -> np.ndarray:
    """Per-episode, per-player truncated discounted reward sums, shape (B, n)."""
    theta = np.asarray(theta, dtype=float)
    total = np.zeros((h.batch, game.n_players))
    disc = 1.0
    for t in range(h.horizon):
        total += disc * game.reward(h.states[:, t], h.actions[:, t], theta)
        disc *= game.gamma
    return total


def _discounted_theta_grad(game, h, theta) -> np.ndarray:
    # mean over episodes of sum_t gamma^t d r_i / d theta, shape (n, d)
    total = 0.0
    disc = 1.0
    for t in range(h.horizon):
        total = total + disc * game.grad_reward_theta(h.states[:, t], h.actions[:, t], theta)
        disc *= game.gamma
    return np.mean(total, axis=0)


def grad_estimator_theta(game: MarkovGame, dev_histories: Sequence[History], h_dag: History, theta) -> np.ndarray:
    """sum_i [sum_t gamma^t grad_theta r_i(deviation rollout i) - same on the equilibrium rollout]."""
    theta = np.asarray(theta, dtype=float)
    eq = _discounted_theta_grad(game, h_dag, theta)
    g = np.zeros(game.param_space.dim)
    for i, h in enumerate(dev_histories):
        g += _discounted_theta_grad(game, h, theta)[i] - eq[i]
    return g


def reverse_pathwise(game: MarkovGame, policy: Policy, z, h: History, costs: np.ndarray,
                     dc_ds: np.ndarray, dc_da: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Per-episode gradient of sum_t w_t c_t(s_t, a_t) w.r.t. policy parameters z.

    costs (B, H), dc_ds (B, H, ds), dc_da (B, H, da), weights (H,). Returns (B, dz).
    """
    if not game.differentiable:
        raise UnsupportedGameError("game transitions are not differentiable in actions")
    B, H = costs.shape
    lam = np.zeros((B, game.state_dim))
    grad = np.zeros((B, policy.param_space.dim))
    future = np.zeros(B)  # sum_{k > t} w_k c_k
    for t in range(H - 1, -1, -1):
        s, a, xi = h.states[:, t], h.actions[:, t], h.noise[:, t]
        G = weights[t] * dc_da[:, t]
        if t < H - 1:
            G = G + np.einsum("bs,bsa->ba", lam, game.transition_jac_a(s, a, xi))
            score = game.transition_score_a(s, a, h.next_states[:, t])
            if score is not None:
                G = G + score * future[:, None]
        grad += np.einsum("ba,baz->bz", G, policy.jac_z(z, s))
        lam_next = lam
        lam = weights[t] * dc_ds[:, t] + np.einsum("ba,bas->bs", G, policy.jac_s(z, s))
        if t < H - 1:
            lam = lam + np.einsum("bs,bsk->bk", lam_next, game.transition_jac_s(s, a, xi))
        future = future + weights[t] * costs[:, t]
    return grad


def reward_pathwise(game, policy, z, h, theta, player: int) -> np.ndarray:
    """Per-episode pathwise gradient of player's truncated discounted return, (B, dz)."""
    B, H = h.batch, h.horizon
    costs = np.empty((B, H))
    dcs = np.empty((B, H, game.state_dim))
    dca = np.empty((B, H, h.actions.shape[2]))
    for t in range(H):
        s, a = h.states[:, t], h.actions[:, t]
        costs[:, t] = game.reward(s, a, theta)[:, player]
        dcs[:, t] = game.grad_reward_s(s, a, theta)[:, player]
        dca[:, t] = game.grad_reward_a(s, a, theta)[:, player]
    return reverse_pathwise(game, policy, z, h, costs, dcs, dca, game.gamma ** np.arange(H))


def _player_slice(policy, i):
    po = policy.player_offsets if isinstance(policy, TabularPolicy) else policy.offsets
    return slice(po[i], po[i + 1])


def deviation_rollouts(game, policy, x, z_dag, H, rng, B) -> list[History]:
    """Per player i, B rollouts of (pi_i^x, pi_dagger_-i)."""
    return [simulate(game, policy, policy.splice(z_dag, x, i), H, rng, B) for i in range(game.n_players)]


def grad_estimator_x(game: MarkovGame, policy: Policy, x, z_dag, H: int, rng, theta, B: int = 1,
                     histories: Optional[Sequence[History]] = None) -> np.ndarray:
    """Pathwise estimate of d/dx sum_i u_i(pi_i^x, pi_dagger_-i; theta).

    Player i's block comes from its own deviation rollouts with the others fixed
    at the observed profile.
    """
    if not game.differentiable:
        raise UnsupportedGameError("game transitions are not differentiable in actions")
    x = np.asarray(x, dtype=float)
    hs = histories if histories is not None else deviation_rollouts(game, policy, x, z_dag, H, rng, B)
    g = np.zeros_like(x)
    for i, h in enumerate(hs):
        zi = policy.splice(z_dag, x, i)
        sl = _player_slice(policy, i)
        g[sl] = reward_pathwise(game, policy, zi, h, theta, i).mean(axis=0)[sl]
    return g


# --------------------------------------------------------------------------- solver


@dataclass
class InverseMarkovGame:
    game: MarkovGame
    policy: Policy
    observed: np.ndarray

    def __post_init__(self):
        self.observed = np.asarray(self.observed, dtype=float)
        if not self.policy.param_space.contains(self.observed, tol=1e-8):
            raise ValueError("observed policy parameters lie outside the policy class")


@dataclass
class SgdaConfig:
    eta_theta: float = 1e-3
    eta_x: float = 1e-2
    iters: int = 1000
    batch: int = 4
    horizon: Optional[int] = None
    eps_tail: float = 1e-6
    theta0: Optional[np.ndarray] = None
    x0: Optional[np.ndarray] = None
    average: bool = True
    seed: int = 0
    certify_batch: int = 256

    def __post_init__(self):
        if self.eta_theta <= 0 or self.eta_x <= 0:
            raise ValueError("step sizes must be positive")
        if self.batch < 1 or (self.horizon is not None and self.horizon < 1):
            raise ValueError("batch and horizon must be at least 1")

    @classmethod
    def theory(cls, eps: float, **kw) -> "SgdaConfig":
        """Step sizes with the eps^4 / eps^8 scalings (constants set to one)."""
        return cls(eta_x=eps ** 4, eta_theta=eps ** 8, **kw)


def mc_exploitability(game, policy, x, z_dag, theta, H, rng, B) -> float:
    """Monte Carlo estimate of sum_i J_i(pi_i^x, pi_dagger_-i) - J_i(pi_dagger)."""
    eq = discounted_return(game, simulate(game, policy, z_dag, H, rng, B), theta).mean(axis=0)
    dev = [discounted_return(game, h, theta).mean(axis=0)[i]
           for i, h in enumerate(deviation_rollouts(game, policy, x, z_dag, H, rng, B))]
    return float(np.sum(dev) - eq.sum())


def sgda_solve(inv: InverseMarkovGame, cfg: SgdaConfig) -> SolveTrace:
    """Stochastic projected GDA: theta descends, the deviation policy x ascends."""
    game, policy, z_dag = inv.game, inv.policy, inv.observed
    H = cfg.horizon or truncation_horizon(game.gamma, game.r_max, cfg.eps_tail)
    rng = make_rng(cfg.seed)
    Theta, X = game.param_space, policy.param_space
    theta = Theta.sample(rng) if cfg.theta0 is None else np.asarray(cfg.theta0, dtype=float)
    x = z_dag.copy() if cfg.x0 is None else np.asarray(cfg.x0, dtype=float)
    if not Theta.contains(theta) or not X.contains(x):
        raise ValueError("initial iterates must lie in the parameter and policy spaces")
    t0 = time.perf_counter()
    thetas, xs = [theta.copy()], [x.copy()]
    total = theta.copy()
    for t in range(cfg.iters):
        hs = deviation_rollouts(game, policy, x, z_dag, H, rng, cfg.batch)
        h_dag = simulate(game, policy, z_dag, H, rng, cfg.batch)
        g_theta = grad_estimator_theta(game, hs, h_dag, theta)
        g_x = grad_estimator_x(game, policy, x, z_dag, H, rng, theta, histories=hs)
        if not (np.all(np.isfinite(g_theta)) and np.all(np.isfinite(g_x))):
            raise FloatingPointError(f"non-finite gradient estimate at iteration {t}: theta={theta.tolist()}")
        theta, x = Theta.project(theta - cfg.eta_theta * g_theta), X.project(x + cfg.eta_x * g_x)
        total += theta
        thetas.append(theta.copy())
        xs.append(x.copy())
    thetas = np.array(thetas)
    theta_bar = total / len(thetas)
    hat = theta_bar if cfg.average else theta
    cert = mc_exploitability(game, policy, x, z_dag, hat, H, rng, cfg.certify_batch)
    return SolveTrace(thetas, np.array(xs), np.full(len(thetas), np.nan), theta_bar, hat.copy(), cfg.iters,
                      (time.perf_counter() - t0) * 1e3, certificate=cert, certificate_method="monte_carlo",
                      deviation=x.copy(), extra={"horizon": H})


# --------------------------------------------------------------------------- exact finite analysis


def _policy_kernel(game: FiniteMarkovGame, tables: Sequence[np.ndarray], theta):
    """State-to-state kernel and per-player expected rewards under tabular mixed policies."""
    S = game.n_states
    states = np.arange(S, dtype=float)[:, None]
    acts = np.concatenate([tbl for tbl in tables], axis=1)
    P = game.next_state_probs(states, acts)
    r = game.reward(states, acts, theta)
    return P, r


def policy_values(game: FiniteMarkovGame, tables, theta) -> np.ndarray:
    """Exact infinite-horizon values V_i(s), shape (S, n)."""
    P, r = _policy_kernel(game, tables, theta)
    return np.linalg.solve(np.eye(game.n_states) - game.gamma * P, r)


def best_response_value(game: FiniteMarkovGame, tables, i: int, theta, tol: float = 1e-12,
                        max_iter: int = 100_000) -> np.ndarray:
    """Value iteration for player i against fixed tabular policies of the others, V(s) shape (S,)."""
    S, m = game.n_states, game.action_counts[i]
    Rt = game.rewards_at(theta)
    V = np.zeros(S)
    Q = np.zeros((S, m))
    for _ in range(max_iter):
        for s in range(S):
            for j in range(m):
                acts = [np.asarray(tbl)[s:s + 1] if k != i else np.eye(m)[j:j + 1] for k, tbl in enumerate(tables)]
                r = _contract(Rt[s:s + 1], acts)[0, i]
                p = _contract(game.P[s:s + 1], acts)[0]
                Q[s, j] = r + game.gamma * p @ V
        V_new = Q.max(axis=1)
        if np.max(np.abs(V_new - V)) < tol:
            return V_new
        V = V_new
    return V


def finite_exploitability(game: FiniteMarkovGame, policy: TabularPolicy, z, theta) -> float:
    """Exact sum_i [max_pi_i V_i(pi_i, pi_-i) - V_i(pi)] under the initial distribution."""
    tables = [policy.table(z, i) for i in range(policy.n_players)]
    V = policy_values(game, tables, theta)
    total = 0.0
    for i in range(game.n_players):
        # the player's own policy is a feasible deviation, so each gap is >= 0 up to round-off
        total += max(0.0, float(game.mu @ (best_response_value(game, tables, i, theta) - V[:, i])))
    return total


def _q_values(game: FiniteMarkovGame, tables, i: int, theta) -> np.ndarray:
    V = policy_values(game, tables, theta)[:, i]
    Rt = game.rewards_at(theta)
    m = game.action_counts[i]
    Q = np.zeros((game.n_states, m))
    for s in range(game.n_states):
        for j in range(m):
            acts = [np.asarray(tbl)[s:s + 1] if k != i else np.eye(m)[j:j + 1] for k, tbl in enumerate(tables)]
            Q[s, j] = _contract(Rt[s:s + 1], acts)[0, i] + game.gamma * _contract(game.P[s:s + 1], acts)[0] @ V
    return Q


def planted_equilibrium_game(rng, n_states: int = 2, n_actions: int = 2, n_params: int = 2,
                             gamma: float = 0.8, margin: float = 0.1, theta_bound: float = 1.0,
                             max_tries: int = 1000):
    """Random two-player finite game with a strict pure stationary equilibrium at a known theta*.

    Every pure stationary profile is enumerated; one is accepted when each
    player's equilibrium action beats every alternative by at least ``margin``
    in Q-value at every state. Returns (game, policy, z_dagger, theta_star).
    """
    from itertools import product

    counts = [n_actions, n_actions]
    for _ in range(max_tries):
        R0 = rng.normal(size=(n_states, n_actions, n_actions, 2))
        Phi = rng.normal(size=(n_states, n_actions, n_actions, 2, n_params))
        P = rng.dirichlet(np.ones(n_states), size=(n_states, n_actions, n_actions))
        mu = rng.dirichlet(np.ones(n_states))
        game = FiniteMarkovGame(R0, Phi, P, gamma, mu, Box.uniform(n_params, -theta_bound, theta_bound))
        theta = rng.uniform(-0.5 * theta_bound, 0.5 * theta_bound, size=n_params)
        for flat in product(range(n_actions), repeat=2 * n_states):
            choices = np.array(flat).reshape(2, n_states)
            policy, z = TabularPolicy.from_actions(choices, counts)
            tables = [policy.table(z, i) for i in range(2)]
            ok = True
            for i in range(2):
                Q = _q_values(game, tables, i, theta)
                for s in range(n_states):
                    eq = Q[s, choices[i, s]]
                    others = np.delete(Q[s], choices[i, s])
                    if eq - others.max() < margin:
                        ok = False
            if ok:
                return game, policy, z, theta
    raise RuntimeError("no game with a strict pure equilibrium found")
