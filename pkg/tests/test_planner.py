import csv
import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from igt.games import ConstantGame, CournotGame, QuadraticToy, quadratic_toy, sample_instance
from igt.planner import (
    GdaConfig, InverseGame, average_iterates, cumulative_regret, duality_gap, exploitability, gda_solve,
    relative_error,
)
from igt.spaces import make_rng


class NoOracleToy(QuadraticToy):
    def best_response(self, x, theta):
        return None

    best_response_method = None


class NanGame(QuadraticToy):
    def regret_terms(self, x, y, theta):
        return float("nan"), np.zeros(1), np.zeros(self.dim)


class TestExploitability:
    def test_quadratic_closed_form(self):
        ex = exploitability(quadratic_toy(2), np.array([1.0]), np.zeros(2))
        assert ex.value == pytest.approx(2.0)
        assert np.allclose(ex.deviation, [1, 1])
        assert ex.method == "closed_form" and not ex.lower_bound

    def test_constant_game(self):
        g = ConstantGame()
        assert exploitability(g, np.zeros(1), np.zeros(2)).value == 0.0

    def test_gradient_ascent_fallback_is_flagged_lower_bound(self):
        ex = exploitability(NoOracleToy(2), np.array([1.0]), np.zeros(2), rng=make_rng(0))
        assert ex.method == "pga" and ex.lower_bound
        assert ex.value == pytest.approx(2.0, abs=1e-6)

    def test_regret_identity(self):
        g = quadratic_toy(3)
        x = np.array([0.1, -0.4, 1.2])
        assert cumulative_regret(g, np.array([0.3]), x, x) == 0.0

    @given(st.floats(-1, 1), st.lists(st.floats(-2, 2), min_size=2, max_size=2))
    def test_nonnegative(self, t, x):
        assert exploitability(quadratic_toy(2), np.array([t]), np.array(x)).value >= 0.0

    def test_certified_instances(self):
        rng = make_rng(0)
        for family in ["cournot", "fisher_cobb_douglas", "bertrand"]:
            inst = sample_instance(family, rng)
            assert exploitability(inst.game(), inst.theta_star, inst.x_star).value <= 1e-6


class TestGdaSolve:
    def test_constant_game_keeps_initial_parameters(self):
        g = ConstantGame()
        tr = gda_solve(InverseGame(g, np.zeros(2)), GdaConfig(theta0=np.array([0.3]), iters=50))
        assert np.allclose(tr.thetas, 0.3, rtol=0, atol=0)
        assert np.allclose(tr.theta_bar, [0.3], rtol=0, atol=1e-15)
        assert tr.certificate == 0.0

    def test_quadratic_inverse_equilibrium(self):
        tr = gda_solve(InverseGame(quadratic_toy(2), np.array([0.5, 0.5])), GdaConfig(iters=5000, seed=1))
        assert abs(tr.theta_bar[0] - 0.5) <= 1e-2

    def test_iterates_feasible(self):
        inst = sample_instance("fisher_linear", make_rng(5))
        g = inst.game()
        tr = gda_solve(InverseGame(g, inst.x_star), GdaConfig(iters=300, eta_y=5e-4, seed=2))
        assert all(g.param_space.contains(t) for t in tr.thetas)
        assert all(g.profile_space.contains(y) for y in tr.ys)

    def test_seeded_determinism(self):
        inst = sample_instance("cournot", make_rng(6))
        inv = InverseGame(inst.game(), inst.x_star)
        a = gda_solve(inv, GdaConfig(iters=500, seed=9))
        b = gda_solve(inv, GdaConfig(iters=500, seed=9))
        assert np.array_equal(a.thetas, b.thetas) and np.array_equal(a.ys, b.ys)
        assert a.certificate == b.certificate

    def test_non_finite_gradient_aborts_with_diagnostic(self):
        with pytest.raises(FloatingPointError, match="iteration 0"):
            gda_solve(InverseGame(NanGame(2), np.zeros(2)), GdaConfig(iters=5))

    def test_early_stop(self):
        tr = gda_solve(InverseGame(quadratic_toy(2), np.array([0.5, 0.5])),
                       GdaConfig(iters=5000, theta0=np.array([-1.0]), average=False), theta_star=np.array([0.5]))
        assert tr.stopped_early and tr.iters < 5000
        assert relative_error(tr.theta_hat, [0.5]) <= 0.1

    def test_best_response_ascent(self):
        inst = sample_instance("cournot", make_rng(7))
        cfg = GdaConfig(iters=10000, ascent="best_response", average=False, seed=3)
        tr = gda_solve(InverseGame(inst.game(), inst.x_star), cfg)
        assert tr.certificate <= 1e-6
        assert relative_error(tr.theta_hat, inst.theta_star) <= 0.1

    def test_best_response_ascent_needs_oracle(self):
        with pytest.raises(ValueError):
            gda_solve(InverseGame(NoOracleToy(2), np.zeros(2)), GdaConfig(ascent="best_response", iters=2))

    def test_infeasible_inputs_rejected(self):
        with pytest.raises(ValueError):
            InverseGame(quadratic_toy(2), np.array([3.0, 0.0]))
        with pytest.raises(ValueError):
            gda_solve(InverseGame(quadratic_toy(2), np.zeros(2)), GdaConfig(theta0=np.array([5.0])))
        with pytest.raises(ValueError):
            GdaConfig(eta_theta=0.0)
        with pytest.raises(ValueError):
            GdaConfig(schedule="cosine")

    def test_inverse_t_schedule(self):
        cfg = GdaConfig(schedule="inverse_t")
        assert cfg.step_scale(0) == 1.0 and cfg.step_scale(9) == pytest.approx(0.1)

    def test_certificate_improves_on_initial_parameters(self):
        rng = make_rng(11)
        better = 0
        for k in range(20):
            inst = sample_instance("cournot", rng)
            g = inst.game()
            tr = gda_solve(InverseGame(g, inst.x_star), GdaConfig(iters=1000, seed=k))
            better += tr.certificate <= exploitability(g, tr.thetas[0], inst.x_star).value
        assert better >= 18


class TestAveraging:
    def test_single_iterate(self):
        assert np.array_equal(average_iterates(np.array([[0.7]])), [0.7])

    def test_two_iterates(self):
        assert np.array_equal(average_iterates(np.array([[0.0], [1.0]])), [0.5])

    def test_matches_running_mean(self):
        tr = gda_solve(InverseGame(quadratic_toy(2), np.array([0.2, 0.2])), GdaConfig(iters=5000))
        running = np.zeros(1)
        for t, th in enumerate(tr.thetas):
            running += (th - running) / (t + 1)
        assert np.allclose(average_iterates(tr), running, atol=1e-12, rtol=0)
        assert np.allclose(tr.theta_bar, running, atol=1e-12, rtol=0)

    def test_empty_trace(self):
        with pytest.raises(ValueError):
            average_iterates(np.zeros((0, 1)))


class TestRelativeError:
    def test_hand_values(self):
        assert relative_error([10.5, 10.5], [10, 10]) == pytest.approx(0.0707, abs=1e-4)
        assert relative_error([1.2, 1.0], [1, 1]) == pytest.approx(0.2)

    def test_zero_component(self):
        with pytest.raises(ValueError):
            relative_error([1.0], [0.0])


def test_duality_gap_shrinks_on_quadratic_toy():
    g = quadratic_toy(2)
    xh = np.array([0.5, 0.5])
    tr = gda_solve(InverseGame(g, xh), GdaConfig(iters=2000, seed=4))
    gaps = [duality_gap(g, xh, tr.thetas[:T + 1].mean(0), tr.ys[:T + 1].mean(0)) for T in (100, 2000)]
    assert all(v >= -1e-12 for v in gaps)
    assert gaps[1] < gaps[0]


def test_trace_exports(tmp_path):
    g = quadratic_toy(2)
    xh = np.array([0.5, 0.5])
    tr = gda_solve(InverseGame(g, xh), GdaConfig(iters=20))
    tr.to_csv(tmp_path / "t.csv", game=g, observed=xh)
    rows = list(csv.reader(open(tmp_path / "t.csv")))
    assert rows[0] == ["iter", "f_value", "theta_0", "exploitability_running"]
    assert len(rows) == 22
    assert float(rows[-1][3]) == pytest.approx(exploitability(g, tr.theta_bar, xh).value)
    tr.to_json(tmp_path / "t.json")
    d = json.loads((tmp_path / "t.json").read_text())
    assert {"theta_bar", "certificate", "iters", "wall_ms"} <= set(d)


def test_cournot_gradient_run_recovers_cost():
    rng = make_rng(21)
    inst = sample_instance("cournot", rng)
    while inst.x_star[0] <= 0:
        inst = sample_instance("cournot", rng)
    tr = gda_solve(InverseGame(CournotGame(inst.constants["a"], inst.constants["b"]), inst.x_star),
                   GdaConfig(iters=10000, average=False))
    assert relative_error(tr.theta_hat, inst.theta_star) <= 0.1
