import json
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import central_diff, rel_err
from igt.games import (
    COBB_DOUGLAS, CERT_TOL, FLOOR, LEONTIEF, LINEAR, BertrandGame, ConstantGame, CournotGame, FisherGame,
    GameInstance, ParametricGame, RandomMatrixGame, UnboundedDemandError, bertrand_payoffs, bimatrix_equilibria,
    buyer_best_response, certify, cournot_payoffs, cumulative_regret, eg_objective, fisher_equilibrium,
    fisher_instance, log_utility, quadratic_toy, sample_instance,
)
from igt.planner import exploitability
from igt.spaces import make_rng

CLASSES = [LINEAR, COBB_DOUGLAS, LEONTIEF]


# --------------------------------------------------------------------------- gradient soundness


def own_block_fd(game, x, theta, h=1e-5):
    g = np.empty(game.dim)
    for i in range(game.n_players):
        sl = slice(game.offsets[i], game.offsets[i + 1])

        def f(v, i=i, sl=sl):
            z = x.copy()
            z[sl] = v
            return game.payoff(z, theta)[i]
        g[sl] = central_diff(lambda v: np.array([f(v)]), x[sl], h)[0]
    return g


def check_gradients(game, x, theta, tol=1e-4):
    gx = game.grad_payoff_x(x, theta)
    gt = game.grad_payoff_theta(x, theta)
    fx = own_block_fd(game, x, theta)
    ft = central_diff(lambda t: game.payoff(x, t), theta)
    assert rel_err(gx, fx) <= tol, (x, theta)
    assert rel_err(gt, ft) <= tol, (x, theta)


def fisher_point(game, rng):
    p = rng.uniform(0.5, 5, game.m)
    X = rng.uniform(0.2, 2, (game.nb, game.m))
    return game.pack_profile(p, X), game.param_space.sample(rng)


def interior_points(family, rng, n=100):
    """(game, x, theta) triples away from kinks and floors."""
    out = []
    for _ in range(n):
        if family == "quadratic_toy":
            g = quadratic_toy(3)
            out.append((g, rng.uniform(-1.9, 1.9, 3), g.param_space.sample(rng)))
        elif family == "random_matrix":
            g = RandomMatrixGame(rng.normal(size=(3, 3, 3)), rng.normal(size=(3, 3, 3)))
            out.append((g, g.profile_space.sample(rng), g.param_space.sample(rng)))
        elif family == "cournot":
            g = CournotGame(rng.uniform(10, 100), rng.uniform(-10, -0.01))
            out.append((g, rng.uniform(0.05, 0.95, 2) * g.strategy_spaces[0].upper, g.param_space.sample(rng)))
        elif family == "bertrand":
            g = BertrandGame(rng.uniform(10, 100), rng.uniform(-10, -0.01))
            p = np.sort(rng.uniform(0.05, 0.95, 2) * g.choke)
            if p[1] - p[0] < 1e-3:
                p[1] += 1e-3
            out.append((g, rng.permutation(p), g.param_space.sample(rng)))
        else:
            cls = {"fisher_linear": LINEAR, "fisher_cobb_douglas": COBB_DOUGLAS, "fisher_leontief": LEONTIEF}[family[:-2]]
            if family.endswith("_b"):
                g = FisherGame(cls, 3, 2, types=rng.uniform(0.1, 10, (3, 2)))
            else:
                g = FisherGame(cls, 3, 2)
            x, t = fisher_point(g, rng)
            if cls == LEONTIEF:
                T, _ = g.unpack_params(t)
                _, X = g.unpack_profile(x)
                r = np.sort(X / T, axis=1)
                if np.any(r[:, 1] - r[:, 0] < 1e-3):
                    continue
            out.append((g, x, t))
    return out


GRAD_FAMILIES = ["quadratic_toy", "random_matrix", "cournot", "bertrand",
                 "fisher_linear_b", "fisher_cobb_douglas_b", "fisher_leontief_b",
                 "fisher_linear_t", "fisher_cobb_douglas_t", "fisher_leontief_t"]


@pytest.mark.parametrize("family", GRAD_FAMILIES)
def test_analytic_gradients_match_finite_differences(family):
    pts = interior_points(family, make_rng(2024, GRAD_FAMILIES.index(family)), n=110)
    assert len(pts) >= 100
    for g, x, t in pts[:100]:
        check_gradients(g, x, t)


@pytest.mark.parametrize("family", ["quadratic_toy", "cournot", "fisher_linear_t", "fisher_cobb_douglas_t",
                                    "fisher_leontief_t", "fisher_linear_b"])
def test_specialised_regret_terms_agree_with_generic_route(family):
    rng = make_rng(77)
    for g, x, t in interior_points(family, rng, n=30):
        y = g.profile_space.project(x + rng.normal(scale=0.3, size=x.shape))
        if family.startswith("fisher_"):
            y = np.abs(y) + 0.1
        fast = g.regret_terms(x, y, t)
        slow = ParametricGame.regret_terms(g, x, y, t)
        assert math.isclose(fast[0], slow[0], rel_tol=1e-10, abs_tol=1e-10)
        assert np.allclose(fast[1], slow[1], rtol=1e-10, atol=1e-10)
        assert np.allclose(fast[2], slow[2], rtol=1e-10, atol=1e-10)
        assert math.isclose(fast[0], cumulative_regret(g, t, x, y), rel_tol=1e-10, abs_tol=1e-10)


# --------------------------------------------------------------------------- Fisher markets


class TestEgObjective:
    def test_cleared_unit_market(self):
        assert eg_objective([1.0], [[1.0]], [[1.0]], [1.0]) == pytest.approx(0.0, abs=1e-15)

    def test_half_allocation(self):
        assert eg_objective([2.0], [[0.5]], [[1.0]], [1.0]) == pytest.approx(math.log(0.5) + 1, abs=1e-12)
        assert eg_objective([2.0], [[0.5]], [[1.0]], [1.0]) == pytest.approx(0.30685, abs=1e-5)

    def test_type_and_budget(self):
        assert eg_objective([1.0], [[1.0]], [[3.0]], [2.0]) == pytest.approx(2 * math.log(3), abs=1e-12)

    def test_floor_keeps_objective_finite(self):
        v = eg_objective([1.0, 1.0], [[0.0, 0.0]], [[1.0, 1.0]], [1.0])
        assert v == pytest.approx(math.log(1e-9) + 2)


class TestBuyerBestResponse:
    def test_linear_bang_per_buck(self):
        assert np.allclose(buyer_best_response(LINEAR, [2, 1], 1, [1, 1]), [1, 0])

    def test_linear_ties_split(self):
        assert np.allclose(buyer_best_response(LINEAR, [1, 2], 2, [1, 2]), [1, 0.5])

    def test_cobb_douglas(self):
        assert np.allclose(buyer_best_response(COBB_DOUGLAS, [0.5, 0.5], 4, [1, 2]), [2, 1])

    def test_leontief(self):
        assert np.allclose(buyer_best_response(LEONTIEF, [1, 1], 8, [1, 3]), [2, 2])

    def test_zero_price_unbounded(self):
        with pytest.raises(UnboundedDemandError):
            buyer_best_response(LINEAR, [1, 1], 1, [0, 1])

    @pytest.mark.parametrize("cls", CLASSES)
    def test_spends_budget_and_beats_random_bundles(self, cls):
        rng = make_rng(5, CLASSES.index(cls))
        for _ in range(10):
            t = rng.uniform(0.1, 10, 3)
            b = rng.uniform(0.1, 10)
            p = rng.uniform(0.1, 10, 3)
            x = buyer_best_response(cls, t, b, p)
            assert abs(p @ x - b) <= 1e-10 * max(1, b)
            best = log_utility(cls, x, t)[0]
            shares = rng.dirichlet(np.ones(3), size=1000)
            rand = shares * b / p
            assert np.all(log_utility(cls, rand, np.tile(t, (1000, 1))) <= best + 1e-12)

    @given(st.lists(st.floats(0.1, 10), min_size=3, max_size=3), st.floats(0.01, 100))
    def test_linear_argmax_set_scale_invariant(self, t, c):
        p = np.array([1.0, 2.0, 3.0])
        t = np.array(t)
        a = buyer_best_response(LINEAR, t, 1.0, p) > 0
        b = buyer_best_response(LINEAR, c * t, 1.0, p) > 0
        assert np.array_equal(a, b)


class TestFisherEquilibrium:
    @pytest.mark.parametrize("cls", CLASSES)
    def test_clears_and_is_demanded(self, cls):
        rng = make_rng(31, CLASSES.index(cls))
        for _ in range(3):
            T = rng.uniform(0.1, 10, (3, 2))
            b = rng.uniform(0.1, 10, 3)
            p, X = fisher_equilibrium(cls, T, b)
            assert np.all(p >= 0)
            demand = X.sum(axis=0)
            # priced goods clear; a free good may only be in excess supply
            assert np.allclose(demand[p > 1e-9], 1.0, atol=1e-7)
            assert np.all(demand <= 1.0 + 1e-7)
            assert np.allclose(X @ p, b, rtol=1e-7)
            for i in range(3):
                br = buyer_best_response(cls, T[i], b[i], p)
                assert log_utility(cls, X[i], T[i])[0] >= log_utility(cls, br, T[i])[0] - 1e-7

    def test_cobb_douglas_prices_are_budget_weighted_types(self):
        T = np.array([[1.0, 3.0], [2.0, 2.0]])
        b = np.array([4.0, 2.0])
        p, _ = fisher_equilibrium(COBB_DOUGLAS, T, b)
        assert np.allclose(p, [4 * 0.25 + 2 * 0.5, 4 * 0.75 + 2 * 0.5])

    def test_symmetric_linear_market(self):
        inst = fisher_instance(LINEAR, np.full((3, 2), 2.0), np.full(3, 5.0))
        game = inst.game()
        p, X = game.unpack_profile(inst.x_star)
        assert np.allclose(p, 7.5, atol=1e-7)
        assert np.allclose(X.sum(axis=1), 2 / 3, atol=1e-7)

    def test_seller_best_response_prices_excess_demand(self):
        g = FisherGame(LINEAR, 1, 2, types=[[1.0, 1.0]])
        x = g.pack_profile([1.0, 1.0], [[2.0, 0.0]])
        q = g.best_response(x, np.array([1.0]))[:2]
        assert np.allclose(q, [100.0, 0.0])


# --------------------------------------------------------------------------- oligopolies


class TestCournot:
    def test_symmetric_equilibrium(self):
        g = CournotGame(10, -1)
        q = g.equilibrium(1.0)
        assert np.allclose(q, [3, 3])
        assert np.allclose(cournot_payoffs(q, 1.0, 10, -1), [9, 9])
        assert exploitability(g, np.array([1.0]), q).value <= 1e-12

    def test_unprofitable_market(self):
        g = CournotGame(10, -1, param_space=None)
        assert np.allclose(g.equilibrium(10.0), 0)
        assert np.allclose(cournot_payoffs([0, 0], 10, 10, -1), 0)

    def test_best_response_to_idle_rival(self):
        g = CournotGame(10, -1)
        assert g.best_response(np.array([0.0, 0.0]), np.array([2.0]))[0] == pytest.approx(4.0)


class TestBertrand:
    def test_undercut_firm_sells_nothing(self):
        assert bertrand_payoffs([5.0, 4.0], 2.0, 10.0, -1.0)[0] == 0.0

    def test_tie_splits_demand(self):
        assert np.allclose(bertrand_payoffs([4.0, 4.0], 2.0, 10.0, -1.0), [6, 6])

    def test_marginal_cost_pricing_is_equilibrium(self):
        rng = make_rng(8)
        for _ in range(20):
            g = BertrandGame(rng.uniform(10, 100), rng.uniform(-10, -0.01))
            c = rng.uniform(2, 20)
            x = np.array([c, c])
            assert np.allclose(g.payoff(x, np.array([c])), 0)
            assert exploitability(g, np.array([c]), x).value <= 1e-12

    def test_grid_best_response_undercuts_high_rival(self):
        g = BertrandGame(10.0, -1.0)
        y = g.best_response(np.array([6.0, 6.0]), np.array([2.0]))
        assert np.all(y < 6.0) and np.all(y >= 5.99)


class TestToyGames:
    def test_quadratic_examples(self):
        g = quadratic_toy(2)
        assert exploitability(g, np.array([0.5]), np.array([0.5, 0.5])).value == 0.0
        assert cumulative_regret(g, np.array([1.0]), np.zeros(2), np.ones(2)) == pytest.approx(2.0)
        assert g.grad_payoff_theta(np.zeros(2), np.array([1.0]))[0, 0] == pytest.approx(-2.0)

    def test_constant_game(self):
        g = ConstantGame(3)
        x = g.profile_space.sample(make_rng(0))
        assert cumulative_regret(g, np.zeros(1), x, -x) == 0.0

    def test_bimatrix_equilibria_matching_pennies(self):
        A = np.array([[1.0, -1.0], [-1.0, 1.0]])
        eqs = bimatrix_equilibria(A, -A)
        assert len(eqs) == 1
        assert np.allclose(eqs[0][0], 0.5) and np.allclose(eqs[0][1], 0.5)

    def test_bimatrix_equilibria_prisoners_dilemma(self):
        A = np.array([[3.0, 0.0], [5.0, 1.0]])
        eqs = bimatrix_equilibria(A, A.T)
        assert len(eqs) == 1
        assert np.allclose(eqs[0][0], [0, 1]) and np.allclose(eqs[0][1], [0, 1])

    def test_quadratic_toy_rejects_empty(self):
        with pytest.raises(ValueError):
            quadratic_toy(0)


# --------------------------------------------------------------------------- instances


@pytest.mark.parametrize("family", ["fisher_linear", "fisher_cobb_douglas", "fisher_leontief",
                                    "cournot", "bertrand", "quadratic_toy", "random_matrix"])
def test_sampled_instances_certified(family):
    rng = make_rng(404)
    for _ in range(5):
        inst = sample_instance(family, rng)
        assert certify(inst) <= CERT_TOL
        assert inst.extra["certificate"] <= CERT_TOL


def test_cournot_instances_in_range_and_first_order_conditions():
    rng = make_rng(3)
    for _ in range(50):
        inst = sample_instance("cournot", rng)
        k = inst.constants
        c = inst.theta_star[0]
        assert 10 <= k["a"] <= 100 and -10 <= k["b"] <= -0.01 and 2 <= c <= 20
        q = inst.x_star
        assert np.allclose(q, max(0.0, (k["a"] - c) / (3 * -k["b"])))
        if q[0] > 0:
            foc = k["a"] + k["b"] * q.sum() - c + k["b"] * q
            assert np.all(np.abs(foc) <= 1e-8)


def test_fisher_draws_respect_floor():
    rng = make_rng(55)
    for _ in range(200):
        inst = sample_instance("fisher_cobb_douglas", rng)
        T = np.asarray(inst.constants["types"])
        assert np.all((inst.theta_star >= FLOOR) & (inst.theta_star <= 10))
        assert np.all((T >= FLOOR) & (T <= 10))


def test_instance_json_round_trip_is_bit_exact():
    for family in ["fisher_linear", "cournot", "random_matrix"]:
        inst = sample_instance(family, make_rng(1))
        back = GameInstance.from_json(inst.to_json())
        assert back.family == inst.family
        assert np.array_equal(back.theta_star, inst.theta_star)
        assert np.array_equal(back.x_star, inst.x_star)
        assert json.loads(back.to_json()) == json.loads(inst.to_json())
        assert certify(back) <= CERT_TOL


def test_types_budgets_parameters_pack_order():
    inst = sample_instance("fisher_linear", make_rng(2))
    g = inst.game("types_budgets")
    theta = inst.true_params("types_budgets")
    T, b = g.unpack_params(theta)
    assert np.array_equal(T, np.asarray(inst.constants["types"]))
    assert np.array_equal(b, inst.theta_star)
    assert exploitability(g, theta, inst.x_star).value <= CERT_TOL
