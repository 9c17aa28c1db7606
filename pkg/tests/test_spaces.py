import itertools

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from igt.spaces import (
    FEAS_TOL, Box, NonnegativeOrthant, Product, Simplex, derive_seed, make_rng, project, project_simplex,
    sample_uniform,
)

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


def vectors(n):
    return arrays(np.float64, n, elements=finite)


def grid_simplex_qp(z, step=0.005):
    """Nearest point of the 3-simplex by exhaustive search over a grid."""
    best, arg = np.inf, None
    ticks = np.arange(0, 1 + step / 2, step)
    for a in ticks:
        b = ticks[ticks <= 1 - a + 1e-12]
        c = 1 - a - b
        pts = np.stack([np.full_like(b, a), b, c], axis=1)
        d = np.sum((pts - z) ** 2, axis=1)
        k = int(np.argmin(d))
        if d[k] < best:
            best, arg = d[k], pts[k]
    return arg


class TestProjectExamples:
    def test_feasible_point_unchanged(self):
        assert np.allclose(project(Simplex(2), np.array([0.5, 0.5])), [0.5, 0.5])

    def test_vertex(self):
        assert np.allclose(project(Simplex(2), np.array([2.0, 0.0])), [1.0, 0.0])

    def test_against_grid_oracle(self):
        z = np.array([0.4, 0.2, 0.1])
        got = project(Simplex(3), z)
        assert np.allclose(got, [0.5, 0.3, 0.2], atol=1e-12)
        assert np.allclose(got, grid_simplex_qp(z), atol=5e-3)

    @pytest.mark.parametrize("seed", range(5))
    def test_random_points_against_grid_oracle(self, seed):
        z = make_rng(seed).normal(scale=0.7, size=3)
        assert np.allclose(project(Simplex(3), z), grid_simplex_qp(z), atol=5e-3)

    def test_box_and_orthant_clamp(self):
        assert np.array_equal(project(Box.uniform(3, -1, 1), np.array([-3.0, 0.2, 7.0])), [-1, 0.2, 1])
        assert np.array_equal(project(NonnegativeOrthant(2), np.array([-1.0, 2.0])), [0, 2])

    def test_scaled_simplex(self):
        w = project_simplex(np.array([5.0, 5.0, -1.0]), scale=4.0)
        assert np.allclose(w, [2, 2, 0])

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            project(Simplex(3), np.zeros(2))
        with pytest.raises(ValueError):
            Box.uniform(2, 0, 1).project(np.zeros(3))


class TestSpaceTypes:
    def test_box_requires_ordered_bounds(self):
        with pytest.raises(ValueError):
            Box(np.array([1.0]), np.array([0.0]))

    def test_product_dimension(self):
        P = Product((Box.uniform(2, 0, 1), Simplex(3), NonnegativeOrthant(4)))
        assert P.dim == 9
        assert list(P.offsets) == [0, 2, 5, 9]
        parts = P.split(np.arange(9.0))
        assert [len(p) for p in parts] == [2, 3, 4]

    def test_product_projects_factorwise(self):
        P = Product((Box.uniform(1, 0, 1), Simplex(2)))
        assert np.allclose(P.project(np.array([3.0, 2.0, 0.0])), [1, 1, 0])


class TestSampling:
    def test_degenerate_box(self):
        assert np.array_equal(sample_uniform(Box(np.zeros(1), np.zeros(1)), make_rng(0)), [0.0])

    def test_simplex_sample_feasible(self):
        rng = make_rng(1)
        for _ in range(100):
            w = sample_uniform(Simplex(3), rng)
            assert abs(w.sum() - 1) <= 1e-12 and np.all(w >= 0)

    def test_box_sample_reproducible(self):
        B = Box.uniform(2, 0, 10)
        a, b = sample_uniform(B, make_rng(7)), sample_uniform(B, make_rng(7))
        assert np.array_equal(a, b)
        assert B.contains(a)

    def test_unbounded_sampling_rejected(self):
        with pytest.raises(ValueError):
            sample_uniform(NonnegativeOrthant(2), make_rng(0))
        with pytest.raises(ValueError):
            sample_uniform(Product((Box.uniform(1, 0, 1), NonnegativeOrthant(1))), make_rng(0))


class TestRng:
    def test_same_seed_same_stream(self):
        assert np.array_equal(make_rng(3, 1).normal(size=5), make_rng(3, 1).normal(size=5))

    def test_keys_give_distinct_streams(self):
        assert not np.array_equal(make_rng(3, 1).normal(size=5), make_rng(3, 2).normal(size=5))

    def test_stream_independent_of_creation_order(self):
        first = [make_rng(9, k).uniform() for k in range(4)]
        second = [make_rng(9, k).uniform() for k in reversed(range(4))][::-1]
        assert first == second

    def test_derived_seeds_distinct(self):
        seeds = {derive_seed(0, i) for i in range(1000)}
        assert len(seeds) == 1000


SPACES = [Simplex(1), Simplex(4), Simplex(3, scale=2.5), Box.uniform(3, -1, 2), NonnegativeOrthant(3),
          Product((Simplex(2), Box.uniform(2, 0, 1)))]


@pytest.mark.parametrize("space", SPACES, ids=lambda s: type(s).__name__ + str(s.dim))
class TestProjectionProperties:
    @given(data=st.data())
    def test_idempotent(self, space, data):
        z = data.draw(vectors(space.dim))
        p = space.project(z)
        assert np.allclose(space.project(p), p, atol=1e-12)

    @given(data=st.data())
    def test_membership(self, space, data):
        z = data.draw(vectors(space.dim))
        assert space.contains(space.project(z), tol=FEAS_TOL)

    @given(data=st.data())
    def test_nonexpansive(self, space, data):
        a, b = data.draw(vectors(space.dim)), data.draw(vectors(space.dim))
        d = np.linalg.norm(space.project(a) - space.project(b))
        assert d <= np.linalg.norm(a - b) + 1e-9

    @given(data=st.data())
    def test_nearest_among_feasible_points(self, space, data):
        z = data.draw(vectors(space.dim))
        p = space.project(z)
        rng = make_rng(data.draw(st.integers(0, 2 ** 32)))
        for _ in range(20):
            q = space.project(z + rng.normal(scale=3.0, size=space.dim))
            assert np.linalg.norm(z - p) <= np.linalg.norm(z - q) + 1e-9


def test_simplex_projection_matches_kkt():
    # w = max(z - tau, 0) with a single tau, a direct characterisation of the projection
    for z in itertools.product([-1.0, 0.3, 2.0], repeat=3):
        z = np.array(z)
        w = project_simplex(z)
        pos = w > 0
        taus = z[pos] - w[pos]
        assert np.ptp(taus) < 1e-12
        assert np.all(z[~pos] <= taus[0] + 1e-12)
