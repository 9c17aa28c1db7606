"""Parametric games with analytic payoff gradients.

A game exposes per-player payoffs u_i(x; theta) over a product strategy space
together with two derivative oracles: the own-strategy gradient du_i/dx_i for
every player (stacked into one vector aligned with the profile) and the
parameter gradient du_i/dtheta (one row per player). Families with a closed
form or grid best response expose it through ``best_response``.
"""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field
from itertools import combinations
from typing import Callable, Optional

import numpy as np

from .spaces import Box, NonnegativeOrthant, Product, Simplex, Space

log = logging.getLogger(__name__)

LOG_FLOOR = 1e-9
CERT_TOL = 1e-6

LINEAR, COBB_DOUGLAS, LEONTIEF = "linear", "cobb_douglas", "leontief"
UTILITY_CLASSES = (LINEAR, COBB_DOUGLAS, LEONTIEF)

FAMILIES = {
    "fisher_linear": LINEAR,
    "fisher_cobb_douglas": COBB_DOUGLAS,
    "fisher_leontief": LEONTIEF,
    "cournot": None,
    "bertrand": None,
    "quadratic_toy": None,
    "random_matrix": None,
}


class UnboundedDemandError(ValueError):
    pass


class CertificationError(RuntimeError):
    pass


class ParametricGame:
    """Base class. Subclasses implement ``payoff`` and the two gradient oracles."""

    def __init__(self, strategy_spaces: list[Space], param_space: Space):
        self.strategy_spaces = list(strategy_spaces)
        self.param_space = param_space
        self.profile_space = Product(tuple(self.strategy_spaces))
        self.offsets = self.profile_space.offsets

    @property
    def n_players(self) -> int:
        return len(self.strategy_spaces)

    @property
    def dim(self) -> int:
        return self.profile_space.dim

    def block(self, x: np.ndarray, i: int) -> np.ndarray:
        return x[self.offsets[i]:self.offsets[i + 1]]

    def splice(self, x: np.ndarray, y: np.ndarray, i: int) -> np.ndarray:
        """Profile (y_i, x_{-i})."""
        z = np.array(x, dtype=float, copy=True)
        sl = slice(self.offsets[i], self.offsets[i + 1])
        z[sl] = y[sl]
        return z

    def payoff(self, x: np.ndarray, theta: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def grad_payoff_x(self, x: np.ndarray, theta: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def grad_payoff_theta(self, x: np.ndarray, theta: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def best_response(self, x: np.ndarray, theta: np.ndarray) -> Optional[np.ndarray]:
        """Profile of per-player best responses to x_{-i}, or None if no oracle."""
        return None

    best_response_method: Optional[str] = None

    def regret_terms(self, x: np.ndarray, y: np.ndarray, theta: np.ndarray):
        """Cumulative regret f(theta, y) = sum_i u_i(y_i, x_-i) - u_i(x) and its gradients.

        Returns (value, d/dtheta, d/dy) where the y-gradient only carries each
        deviating player's own block.
        """
        base = self.payoff(x, theta)
        g_base = self.grad_payoff_theta(x, theta).sum(axis=0)
        value = -base.sum()
        g_theta = -g_base
        g_y = np.zeros(self.dim)
        for i in range(self.n_players):
            z = self.splice(x, y, i)
            value += self.payoff(z, theta)[i]
            g_theta = g_theta + self.grad_payoff_theta(z, theta)[i]
            sl = slice(self.offsets[i], self.offsets[i + 1])
            g_y[sl] = self.grad_payoff_x(z, theta)[sl]
        return float(value), g_theta, g_y


def cumulative_regret(game: ParametricGame, theta, x, y) -> float:
    theta, x, y = (np.asarray(v, dtype=float) for v in (theta, x, y))
    u_x = game.payoff(x, theta)
    return float(sum(game.payoff(game.splice(x, y, i), theta)[i] - u_x[i] for i in range(game.n_players)))


# --------------------------------------------------------------------------- toy games


class ConstantGame(ParametricGame):
    def __init__(self, n_players: int = 2, value: float = 1.0, dim: int = 1, param_dim: int = 1):
        super().__init__([Box.uniform(dim, -1, 1) for _ in range(n_players)], Box.uniform(param_dim, -1, 1))
        self.value = value

    def payoff(self, x, theta):
        return np.full(self.n_players, self.value)

    def grad_payoff_x(self, x, theta):
        return np.zeros(self.dim)

    def grad_payoff_theta(self, x, theta):
        return np.zeros((self.n_players, self.param_space.dim))

    def best_response(self, x, theta):
        return np.array(x, dtype=float)

    best_response_method = "closed_form"


class QuadraticToy(ParametricGame):
    """u_i(x; theta) = -(x_i - theta)^2 on [-2, 2]^n with theta in [-1, 1]."""

    def __init__(self, n_players: int = 2):
        if n_players < 1:
            raise ValueError("need at least one player")
        super().__init__([Box.uniform(1, -2, 2) for _ in range(n_players)], Box.uniform(1, -1, 1))

    def payoff(self, x, theta):
        return -(np.asarray(x) - theta[0]) ** 2

    def grad_payoff_x(self, x, theta):
        return -2.0 * (np.asarray(x) - theta[0])

    def grad_payoff_theta(self, x, theta):
        return (2.0 * (np.asarray(x) - theta[0]))[:, None]

    def best_response(self, x, theta):
        return np.full(self.n_players, float(theta[0]))

    best_response_method = "closed_form"

    def regret_terms(self, x, y, theta):
        t = theta[0]
        value = np.sum((x - t) ** 2 - (y - t) ** 2)
        g_theta = np.array([np.sum(2 * (y - t) - 2 * (x - t))])
        return float(value), g_theta, -2.0 * (y - t)


def quadratic_toy(n: int = 2) -> QuadraticToy:
    return QuadraticToy(n)


class RandomMatrixGame(ParametricGame):
    """Two-player matrix game with payoff matrices linear in theta on the simplex.

    u_1 = x_1' A(theta) x_2, u_2 = x_1' B(theta) x_2 with A(theta) = sum_k theta_k A_k.
    """

    def __init__(self, A: np.ndarray, B: np.ndarray):
        self.A = np.asarray(A, dtype=float)
        self.B = np.asarray(B, dtype=float)
        k, m1, m2 = self.A.shape
        super().__init__([Simplex(m1), Simplex(m2)], Simplex(k))

    def _mats(self, theta):
        return np.tensordot(theta, self.A, 1), np.tensordot(theta, self.B, 1)

    def payoff(self, x, theta):
        A, B = self._mats(theta)
        x1, x2 = self.block(x, 0), self.block(x, 1)
        return np.array([x1 @ A @ x2, x1 @ B @ x2])

    def grad_payoff_x(self, x, theta):
        A, B = self._mats(theta)
        x1, x2 = self.block(x, 0), self.block(x, 1)
        return np.concatenate([A @ x2, B.T @ x1])

    def grad_payoff_theta(self, x, theta):
        x1, x2 = self.block(x, 0), self.block(x, 1)
        return np.stack([np.einsum("kij,i,j->k", self.A, x1, x2), np.einsum("kij,i,j->k", self.B, x1, x2)])

    def best_response(self, x, theta):
        A, B = self._mats(theta)
        x1, x2 = self.block(x, 0), self.block(x, 1)
        y1 = np.zeros_like(x1)
        y1[int(np.argmax(A @ x2))] = 1.0
        y2 = np.zeros_like(x2)
        y2[int(np.argmax(B.T @ x1))] = 1.0
        return np.concatenate([y1, y2])

    best_response_method = "closed_form"


def bimatrix_equilibria(A: np.ndarray, B: np.ndarray, tol: float = 1e-12) -> list[tuple[np.ndarray, np.ndarray]]:
    """All nondegenerate Nash equilibria of (A, B) by support enumeration."""
    m1, m2 = A.shape
    found = []
    for k in range(1, min(m1, m2) + 1):
        for s1 in combinations(range(m1), k):
            for s2 in combinations(range(m2), k):
                y = _indifference(B[np.ix_(s1, s2)].T, k)
                x = _indifference(A[np.ix_(s1, s2)], k)
                if x is None or y is None:
                    continue
                x1 = np.zeros(m1)
                x1[list(s1)] = y
                x2 = np.zeros(m2)
                x2[list(s2)] = x
                if np.any(x1 < -tol) or np.any(x2 < -tol):
                    continue
                x1, x2 = np.maximum(x1, 0), np.maximum(x2, 0)
                v1, v2 = A @ x2, B.T @ x1
                if v1.max() <= x1 @ v1 + 1e-10 and v2.max() <= v2 @ x2 + 1e-10:
                    found.append((x1, x2))
    return found


def _indifference(M: np.ndarray, k: int) -> Optional[np.ndarray]:
    # mix over columns of M that makes every row of M equally good
    lhs = np.vstack([M[:-1] - M[1:], np.ones(k)]) if k > 1 else np.ones((1, 1))
    rhs = np.zeros(k)
    rhs[-1] = 1.0
    try:
        sol = np.linalg.solve(lhs, rhs)
    except np.linalg.LinAlgError:
        return None
    return sol


# --------------------------------------------------------------------------- Fisher markets


def log_utility(cls: str, x: np.ndarray, t: np.ndarray) -> np.ndarray:
    """Floored log-utility log(max(u, 1e-9)) for each row of x (buyers x goods)."""
    x = np.atleast_2d(x)
    t = np.atleast_2d(t)
    if cls == LINEAR:
        u = np.sum(t * x, axis=-1)
        return np.log(np.maximum(u, LOG_FLOOR))
    if cls == COBB_DOUGLAS:
        w = t / t.sum(axis=-1, keepdims=True)
        with np.errstate(divide="ignore", invalid="ignore"):
            lu = np.sum(np.where(w > 0, w * np.log(x), 0.0), axis=-1)
        return np.maximum(np.nan_to_num(lu, nan=-np.inf), np.log(LOG_FLOOR))
    if cls == LEONTIEF:
        u = np.min(x / t, axis=-1)
        return np.log(np.maximum(u, LOG_FLOOR))
    raise ValueError(f"unknown utility class {cls!r}")


def log_utility_grads(cls: str, x: np.ndarray, t: np.ndarray):
    """Gradients of the floored log-utility w.r.t. allocation and type rows."""
    x = np.atleast_2d(x)
    t = np.atleast_2d(t)
    gx = np.zeros_like(x, dtype=float)
    gt = np.zeros_like(t, dtype=float)
    if cls == LINEAR:
        u = np.sum(t * x, axis=-1, keepdims=True)
        live = u > LOG_FLOOR
        safe = np.where(live, u, 1.0)
        gx = np.where(live, t / safe, 0.0)
        gt = np.where(live, x / safe, 0.0)
    elif cls == COBB_DOUGLAS:
        s = t.sum(axis=-1, keepdims=True)
        w = t / s
        live = np.all(x > 0, axis=-1, keepdims=True)
        lx = np.log(np.where(x > 0, x, 1.0))
        lu = np.sum(w * lx, axis=-1, keepdims=True)
        live = live & (lu > np.log(LOG_FLOOR))
        gx = np.where(live, w / np.where(x > 0, x, 1.0), 0.0)
        gt = np.where(live, (lx - lu) / s, 0.0)
    elif cls == LEONTIEF:
        r = x / t
        k = np.argmin(r, axis=-1)  # first minimiser on ties
        rows = np.arange(x.shape[0])
        u = r[rows, k]
        live = u > LOG_FLOOR
        gx[rows, k] = np.where(live, 1.0 / (t[rows, k] * np.where(live, u, 1.0)), 0.0)
        gt[rows, k] = np.where(live, -1.0 / t[rows, k], 0.0)
    else:
        raise ValueError(f"unknown utility class {cls!r}")
    return gx, gt


def eg_objective(p, X, types, budgets, cls: str = LINEAR) -> float:
    """Eisenberg-Gale saddle objective sum_i b_i log u_i(X_i) + sum_j p_j (1 - sum_i X_ij)."""
    p = np.asarray(p, dtype=float)
    X = np.atleast_2d(np.asarray(X, dtype=float))
    b = np.atleast_1d(np.asarray(budgets, dtype=float))
    return float(b @ log_utility(cls, X, types) + p @ (1.0 - X.sum(axis=0)))


def buyer_best_response(cls: str, t, b: float, p) -> np.ndarray:
    """Utility-maximising bundle for one buyer with budget b at prices p; spends exactly b."""
    t = np.asarray(t, dtype=float)
    p = np.asarray(p, dtype=float)
    x = np.zeros_like(t)
    if cls == LINEAR:
        if np.any((p <= 0) & (t > 0)):
            raise UnboundedDemandError("a desired good has zero price: demand is unbounded")
        bpb = np.where(t > 0, t / np.where(p > 0, p, 1.0), 0.0)
        best = bpb >= bpb.max() * (1 - 1e-12)
        x[best] = (b / best.sum()) / p[best]
        return x
    if cls == COBB_DOUGLAS:
        if np.any(p <= 0):
            raise UnboundedDemandError("Cobb-Douglas demand is unbounded at a zero price")
        return (t / t.sum()) * b / p
    if cls == LEONTIEF:
        cost = p @ t
        if cost <= 0:
            raise UnboundedDemandError("Leontief bundle has zero cost: demand is unbounded")
        return t * b / cost
    raise ValueError(f"unknown utility class {cls!r}")


class FisherGame(ParametricGame):
    """Eisenberg-Gale min-max game as an (n_buyers + 1)-player game.

    Player 0 is the seller choosing prices and receiving -f; buyer i chooses its
    bundle X_i and receives b_i log u_i(X_i) - p.X_i + sum(p)/n_buyers, so the
    buyers' payoffs sum to f. Parameters are either the budgets alone (types
    fixed) or the flattened types followed by the budgets.
    """

    def __init__(self, cls: str, n_buyers: int, n_goods: int, types: Optional[np.ndarray] = None,
                 param_space: Optional[Space] = None, price_cap: float = 100.0):
        if cls not in UTILITY_CLASSES:
            raise ValueError(f"unknown utility class {cls!r}")
        self.cls = cls
        self.nb, self.m = n_buyers, n_goods
        self.fixed_types = None if types is None else np.asarray(types, dtype=float).reshape(n_buyers, n_goods)
        n_theta = n_buyers if self.fixed_types is not None else n_buyers * (n_goods + 1)
        if param_space is None:
            param_space = Box.uniform(n_theta, 0.1, 10.0)
        if param_space.dim != n_theta:
            raise ValueError("parameter space dimension does not match the parameter mode")
        spaces = [Box.uniform(n_goods, 0.0, price_cap)] + [NonnegativeOrthant(n_goods) for _ in range(n_buyers)]
        super().__init__(spaces, param_space)

    def unpack_params(self, theta):
        theta = np.asarray(theta, dtype=float)
        if self.fixed_types is not None:
            return self.fixed_types, theta
        k = self.nb * self.m
        return theta[:k].reshape(self.nb, self.m), theta[k:]

    def pack_params(self, types, budgets):
        if self.fixed_types is not None:
            return np.asarray(budgets, dtype=float).copy()
        return np.concatenate([np.ravel(types), budgets]).astype(float)

    def unpack_profile(self, x):
        x = np.asarray(x, dtype=float)
        return x[:self.m], x[self.m:].reshape(self.nb, self.m)

    def pack_profile(self, p, X):
        return np.concatenate([p, np.ravel(X)]).astype(float)

    def payoff(self, x, theta):
        p, X = self.unpack_profile(x)
        T, b = self.unpack_params(theta)
        buyers = b * log_utility(self.cls, X, T) - X @ p + p.sum() / self.nb
        f = buyers.sum()
        return np.concatenate([[-f], buyers])

    def grad_payoff_x(self, x, theta):
        p, X = self.unpack_profile(x)
        T, b = self.unpack_params(theta)
        gx, _ = log_utility_grads(self.cls, X, T)
        g_seller = X.sum(axis=0) - 1.0
        g_buyers = b[:, None] * gx - p[None, :]
        return np.concatenate([g_seller, g_buyers.ravel()])

    def _buyer_theta_grads(self, X, T, b):
        lu = log_utility(self.cls, X, T)
        _, gt = log_utility_grads(self.cls, X, T)
        rows = np.zeros((self.nb, self.param_space.dim))
        idx = np.arange(self.nb)
        if self.fixed_types is None:
            k = self.nb * self.m
            for i in range(self.nb):
                rows[i, i * self.m:(i + 1) * self.m] = b[i] * gt[i]
            rows[idx, k + idx] = lu
        else:
            rows[idx, idx] = lu
        return rows

    def grad_payoff_theta(self, x, theta):
        p, X = self.unpack_profile(x)
        T, b = self.unpack_params(theta)
        rows = self._buyer_theta_grads(X, T, b)
        return np.vstack([-rows.sum(axis=0), rows])

    def regret_terms(self, x, y, theta):
        p, X = self.unpack_profile(x)
        q, Y = self.unpack_profile(y)
        T, b = self.unpack_params(theta)
        excess = X.sum(axis=0) - 1.0
        lu_x = log_utility(self.cls, X, T)
        lu_y = log_utility(self.cls, Y, T)
        value = (q - p) @ excess + np.sum(b * (lu_y - lu_x) - (Y - X) @ p)
        g_theta = (self._buyer_theta_grads(Y, T, b) - self._buyer_theta_grads(X, T, b)).sum(axis=0)
        gx, _ = log_utility_grads(self.cls, Y, T)
        g_y = np.concatenate([excess, (b[:, None] * gx - p[None, :]).ravel()])
        return float(value), g_theta, g_y

    def best_response(self, x, theta):
        p, X = self.unpack_profile(x)
        T, b = self.unpack_params(theta)
        excess = X.sum(axis=0) - 1.0
        cap = self.strategy_spaces[0].upper
        q = np.where(excess > 0, cap, np.where(excess < 0, 0.0, p))
        Y = np.stack([buyer_best_response(self.cls, T[i], b[i], p) for i in range(self.nb)])
        return self.pack_profile(q, Y)

    best_response_method = "closed_form"


def _fisher_cd_equilibrium(T, b):
    w = T / T.sum(axis=1, keepdims=True)
    p = b @ w
    X = b[:, None] * w / p[None, :]
    return p, X


def tatonnement(demand: Callable[[np.ndarray], np.ndarray], p0: np.ndarray, step: float = 0.1,
                tol: float = 1e-8, max_iter: int = 100_000, dual: Optional[Callable] = None):
    """Damped tatonnement p <- max(p + step * excess_demand(p), 0) with unit supplies.

    When ``dual`` (a convex potential whose negative gradient is the excess
    demand) is given, the step is halved until the potential decreases, which
    makes the iteration a monotone projected-gradient method.
    Returns (prices, iterations, residual).
    """
    p = np.asarray(p0, dtype=float).copy()
    for it in range(1, max_iter + 1):
        z = demand(p) - 1.0
        resid = np.max(np.where(p > 0, np.abs(z), np.maximum(z, 0.0)))
        if resid <= tol:
            return p, it, resid
        eta = step
        cand = np.maximum(p + eta * z, 0.0)
        if dual is not None:
            d0 = dual(p)
            while dual(cand) > d0 and eta > 1e-14:
                eta *= 0.5
                cand = np.maximum(p + eta * z, 0.0)
            step = min(eta * 2.0, 1e3)
        p = cand
    z = demand(p) - 1.0
    return p, max_iter, float(np.max(np.where(p > 0, np.abs(z), np.maximum(z, 0.0))))


def _fisher_leontief_equilibrium(T, b):
    def demand(p):
        return (b / (T @ p)) @ T

    def dual(p):
        c = T @ p
        return np.inf if np.any(c <= 0) else p.sum() - b @ np.log(c)

    p0 = np.full(T.shape[1], b.sum() / T.shape[1])
    p, _, _ = tatonnement(demand, p0, step=1.0, tol=1e-8, dual=dual)
    # Newton polish of the clearing conditions on the positive prices
    act = p > 0
    for _ in range(50):
        c = T @ p
        z = demand(p)[act] - 1.0
        if np.max(np.abs(z)) < 1e-14:
            break
        J = -np.einsum("i,ij,ik->jk", b / c**2, T, T)[np.ix_(act, act)]
        cand = p.copy()
        cand[act] = p[act] - np.linalg.solve(J, z)
        if np.any(cand[act] <= 0):
            break
        p = cand
    X = T * (b / (T @ p))[:, None]
    return p, X


def _fisher_linear_equilibrium(T, b):
    import cvxpy as cp

    n, m = T.shape
    X = cp.Variable((n, m), nonneg=True)
    cons = [cp.sum(X, axis=0) <= 1]
    prob = cp.Problem(cp.Maximize(b @ cp.log(cp.sum(cp.multiply(T, X), axis=1))), cons)
    with warnings.catch_warnings():
        # tight tolerances often end as "inaccurate"; the polish and certification below decide
        warnings.simplefilter("ignore", UserWarning)
        prob.solve(solver=cp.CLARABEL, tol_gap_abs=1e-12, tol_gap_rel=1e-12, tol_feas=1e-12)
    p = np.asarray(cons[0].dual_value, dtype=float).ravel()
    return _polish_linear(T, b, p, np.maximum(np.asarray(X.value), 0.0))


def _polish_linear(T, b, p, X, tol=1e-6):
    """Exact equilibrium on the solver's spending graph.

    Buyers only spend on maximum bang-per-buck goods, so within each connected
    component of the spending graph prices are pinned by ratios and the
    component's total budget; the spending flow is then the unique solution of
    the flow balance on a forest (least squares in general).
    """
    n, m = T.shape
    spend = X * p[None, :]
    edges = spend > tol * max(1.0, b.max())
    # connected components on the bipartite graph
    comp_b = -np.ones(n, dtype=int)
    comp_g = -np.ones(m, dtype=int)
    c = 0
    for start in range(n):
        if comp_b[start] >= 0:
            continue
        stack = [("b", start)]
        comp_b[start] = c
        while stack:
            kind, k = stack.pop()
            nbrs = np.nonzero(edges[k])[0] if kind == "b" else np.nonzero(edges[:, k])[0]
            for v in nbrs:
                if kind == "b" and comp_g[v] < 0:
                    comp_g[v] = c
                    stack.append(("g", v))
                elif kind == "g" and comp_b[v] < 0:
                    comp_b[v] = c
                    stack.append(("b", v))
        c += 1
    p_new = p.copy()
    for k in range(c):
        goods = np.nonzero(comp_g == k)[0]
        buyers = np.nonzero(comp_b == k)[0]
        if goods.size == 0:
            continue
        # log p_j - log p_l = log t_ij - log t_il on every buyer's edges, sum p = sum b
        rows, rhs = [], []
        for i in buyers:
            gs = np.nonzero(edges[i])[0]
            for j, l in zip(gs[:-1], gs[1:]):
                r = np.zeros(m)
                r[j], r[l] = 1.0, -1.0
                rows.append(r)
                rhs.append(np.log(T[i, j]) - np.log(T[i, l]))
        if rows:
            A = np.array(rows)[:, goods]
            lp, *_ = np.linalg.lstsq(A, np.array(rhs), rcond=None)
            lp = lp - lp[0]
        else:
            lp = np.zeros(goods.size)
        rel = np.exp(lp)
        p_new[goods] = rel * b[buyers].sum() / rel.sum()
    # spending flow: sum_j s_ij = b_i, sum_i s_ij = p_j on the edge set
    idx = np.argwhere(edges)
    A = np.zeros((n + m, len(idx)))
    for e, (i, j) in enumerate(idx):
        A[i, e] = 1.0
        A[n + j, e] = 1.0
    rhs = np.concatenate([b, p_new])
    s0 = spend[edges]
    s = s0 + np.linalg.lstsq(A, rhs - A @ s0, rcond=None)[0]
    S = np.zeros((n, m))
    S[edges] = np.maximum(s, 0.0)
    return p_new, S / p_new[None, :]


def fisher_equilibrium(cls: str, types, budgets):
    """Competitive equilibrium (prices, allocation) of a unit-supply Fisher market."""
    T = np.asarray(types, dtype=float)
    b = np.asarray(budgets, dtype=float)
    if cls == COBB_DOUGLAS:
        return _fisher_cd_equilibrium(T, b)
    if cls == LEONTIEF:
        return _fisher_leontief_equilibrium(T, b)
    if cls == LINEAR:
        return _fisher_linear_equilibrium(T, b)
    raise ValueError(f"unknown utility class {cls!r}")


# --------------------------------------------------------------------------- oligopolies


def cournot_payoffs(q, c: float, a: float, b: float) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    return q * (a + b * q.sum() - c)


def bertrand_demand(pmin: float, cd: float, d: float) -> float:
    return max(0.0, cd + d * pmin)


def bertrand_shares(p: np.ndarray, cd: float, d: float) -> np.ndarray:
    pmin = p.min()
    lowest = p == pmin
    return np.where(lowest, bertrand_demand(pmin, cd, d) / lowest.sum(), 0.0)


def bertrand_payoffs(p, c: float, cd: float, d: float) -> np.ndarray:
    p = np.asarray(p, dtype=float)
    return bertrand_shares(p, cd, d) * (p - c)


class CournotGame(ParametricGame):
    """Quantity competition with inverse demand P(Q) = a + b Q (b < 0); theta = marginal cost."""

    def __init__(self, a: float, b: float, n_firms: int = 2, param_space: Optional[Space] = None):
        if not b < 0:
            raise ValueError("Cournot slope b must be negative")
        self.a, self.b = float(a), float(b)
        qmax = self.a / -self.b
        super().__init__([Box.uniform(1, 0.0, qmax) for _ in range(n_firms)],
                         param_space or Box.uniform(1, 2.0, 20.0))

    def payoff(self, x, theta):
        return cournot_payoffs(x, theta[0], self.a, self.b)

    def grad_payoff_x(self, x, theta):
        x = np.asarray(x, dtype=float)
        return self.a + self.b * x.sum() - theta[0] + self.b * x

    def grad_payoff_theta(self, x, theta):
        return -np.asarray(x, dtype=float)[:, None]

    def regret_terms(self, x, y, theta):
        c = theta[0]
        others = x.sum() - x
        dev = y * (self.a + self.b * (y + others) - c)
        value = dev.sum() - self.payoff(x, theta).sum()
        g_theta = np.array([np.sum(x - y)])
        g_y = self.a + self.b * (2 * y + others) - c
        return float(value), g_theta, g_y

    def best_response(self, x, theta):
        x = np.asarray(x, dtype=float)
        others = x.sum() - x
        br = (self.a - theta[0] + self.b * others) / (-2.0 * self.b)
        return np.clip(br, 0.0, self.a / -self.b)

    best_response_method = "closed_form"

    def equilibrium(self, c: float) -> np.ndarray:
        n = self.n_players
        return np.full(n, max(0.0, (self.a - c) / ((n + 1) * -self.b)))


class BertrandGame(ParametricGame):
    """Price competition with demand max(0, cd + d p_min); lowest price takes the market."""

    GRID = 2048

    def __init__(self, cd: float, d: float, n_firms: int = 2, param_space: Optional[Space] = None):
        if not d < 0:
            raise ValueError("Bertrand demand slope d must be negative")
        self.cd, self.d = float(cd), float(d)
        param_space = param_space or Box.uniform(1, 2.0, 20.0)
        self.choke = self.cd / -self.d
        pmax = max(self.choke, float(np.max(param_space.upper)) if isinstance(param_space, Box) else self.choke)
        super().__init__([Box.uniform(1, 0.0, pmax) for _ in range(n_firms)], param_space)
        self.grid = np.linspace(0.0, self.choke, self.GRID)

    def payoff(self, x, theta):
        return bertrand_payoffs(x, theta[0], self.cd, self.d)

    def grad_payoff_x(self, x, theta):
        # almost-everywhere derivative of each firm's profit in its own price
        x = np.asarray(x, dtype=float)
        shares = bertrand_shares(x, self.cd, self.d)
        pmin = x.min()
        live = bertrand_demand(pmin, self.cd, self.d) > 0
        k = np.sum(x == pmin)
        slope = np.where((x == pmin) & live, self.d / k, 0.0)
        return slope * (x - theta[0]) + shares

    def grad_payoff_theta(self, x, theta):
        return -bertrand_shares(np.asarray(x, dtype=float), self.cd, self.d)[:, None]

    def best_response(self, x, theta):
        x = np.asarray(x, dtype=float)
        out = np.empty_like(x)
        for i in range(self.n_players):
            others = np.delete(x, i).min() if self.n_players > 1 else np.inf
            cand = np.concatenate([[x[i]], self.grid])
            dem = np.maximum(0.0, self.cd + self.d * cand)
            share = np.where(cand < others, dem, np.where(cand == others, dem / (1 + np.sum(np.delete(x, i) == others)), 0.0))
            out[i] = cand[int(np.argmax(share * (cand - theta[0])))]
        return out

    best_response_method = "grid"


# --------------------------------------------------------------------------- instances


@dataclass
class GameInstance:
    family: str
    theta_star: np.ndarray
    constants: dict
    x_star: np.ndarray
    seed: Optional[int] = None
    resamples: int = 0
    extra: dict = field(default_factory=dict)

    def game(self, mode: Optional[str] = None) -> ParametricGame:
        fam, k = self.family, self.constants
        if fam.startswith("fisher_"):
            cls = FAMILIES[fam]
            nb, m = k["n_buyers"], k["n_goods"]
            mode = mode or "budgets"
            if mode == "budgets":
                return FisherGame(cls, nb, m, types=np.asarray(k["types"]))
            if mode == "types_budgets":
                return FisherGame(cls, nb, m)
            raise ValueError(f"unknown Fisher parameter mode {mode!r}")
        if fam == "cournot":
            return CournotGame(k["a"], k["b"], k.get("n_firms", 2))
        if fam == "bertrand":
            return BertrandGame(k["cd"], k["d"], k.get("n_firms", 2))
        if fam == "quadratic_toy":
            return QuadraticToy(k["n_players"])
        if fam == "random_matrix":
            return RandomMatrixGame(np.asarray(k["A"]), np.asarray(k["B"]))
        raise ValueError(f"unknown family {fam!r}")

    def true_params(self, mode: Optional[str] = None) -> np.ndarray:
        if self.family.startswith("fisher_") and (mode or "budgets") == "types_budgets":
            return np.concatenate([np.ravel(self.constants["types"]), self.theta_star])
        return np.asarray(self.theta_star, dtype=float)

    def to_json(self) -> str:
        return json.dumps({
            "family": self.family,
            "theta_star": np.asarray(self.theta_star).tolist(),
            "constants": _jsonable(self.constants),
            "x_star": np.asarray(self.x_star).tolist(),
            "seed": self.seed,
        })

    @classmethod
    def from_json(cls, text: str) -> "GameInstance":
        d = json.loads(text)
        return cls(d["family"], np.asarray(d["theta_star"], dtype=float), d["constants"],
                   np.asarray(d["x_star"], dtype=float), d.get("seed"))


def _jsonable(v):
    if isinstance(v, dict):
        return {k: _jsonable(w) for k, w in v.items()}
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    return v


def fisher_instance(cls: str, types, budgets, seed=None) -> GameInstance:
    T = np.asarray(types, dtype=float)
    b = np.asarray(budgets, dtype=float)
    p, X = fisher_equilibrium(cls, T, b)
    fam = {v: k for k, v in FAMILIES.items() if v}[cls]
    game = FisherGame(cls, *T.shape, types=T)
    return GameInstance(fam, b, {"n_buyers": T.shape[0], "n_goods": T.shape[1], "types": T.tolist()},
                        game.pack_profile(p, X), seed)


def certify(inst: GameInstance) -> float:
    from .planner import exploitability

    game = inst.game()
    return exploitability(game, inst.theta_star, inst.x_star)[0]


FLOOR = 0.1


def sample_instance(family: str, rng: np.random.Generator, max_resamples: int = 100,
                    n_buyers: int = 3, n_goods: int = 2) -> GameInstance:
    """Draw a game instance at the appendix distributions and certify its equilibrium."""
    if family not in FAMILIES:
        raise ValueError(f"unknown family {family!r}")
    for attempt in range(max_resamples + 1):
        inst = _draw(family, rng, n_buyers, n_goods)
        inst.resamples = attempt
        try:
            gap = certify(inst)
        except (UnboundedDemandError, np.linalg.LinAlgError) as exc:
            log.info("instance %s rejected: %s", family, exc)
            continue
        inst.extra["certificate"] = gap
        if gap <= CERT_TOL:
            if attempt:
                log.info("%s instance certified after %d resamples", family, attempt)
            return inst
        log.info("%s instance failed certification (exploitability %.3g), resampling", family, gap)
    raise CertificationError(f"could not certify a {family} instance in {max_resamples} attempts")


def _draw(family, rng, n_buyers, n_goods) -> GameInstance:
    if family.startswith("fisher_"):
        b = np.maximum(rng.uniform(0, 10, n_buyers), FLOOR)
        T = np.maximum(rng.uniform(0, 10, (n_buyers, n_goods)), FLOOR)
        return fisher_instance(FAMILIES[family], T, b)
    if family == "cournot":
        c = rng.uniform(2, 20)
        a = rng.uniform(10, 100)
        b = rng.uniform(-10, -0.01)
        game = CournotGame(a, b)
        return GameInstance(family, np.array([c]), {"a": a, "b": b, "n_firms": 2}, game.equilibrium(c))
    if family == "bertrand":
        c = rng.uniform(2, 20)
        cd = rng.uniform(10, 100)
        d = rng.uniform(-10, -0.01)
        return GameInstance(family, np.array([c]), {"cd": cd, "d": d, "n_firms": 2}, np.array([c, c]))
    if family == "quadratic_toy":
        t = rng.uniform(-1, 1)
        return GameInstance(family, np.array([t]), {"n_players": 2}, np.array([t, t]))
    if family == "random_matrix":
        k, m = 3, 3
        A = rng.normal(size=(k, m, m))
        B = rng.normal(size=(k, m, m))
        theta = rng.exponential(size=k)
        theta /= theta.sum()
        eqs = bimatrix_equilibria(np.tensordot(theta, A, 1), np.tensordot(theta, B, 1))
        x = np.concatenate(eqs[0]) if eqs else np.full(2 * m, np.nan)
        return GameInstance(family, theta, {"A": A.tolist(), "B": B.tolist()}, x)
    raise ValueError(family)
