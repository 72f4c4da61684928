import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sparselqr.coordinate import (
    CacheBuildError,
    apply_coordinate,
    build_spectral_cache,
    coordinate_quad,
    coordinate_step,
    inner_solve,
)
from sparselqr.kernels import LyapunovFallbackWarning
from sparselqr.model import CostSpec, Plant, mass_spring
from sparselqr.newton_cd import SolverOptions, active_set, initialize
from sparselqr.objective import evaluate, hessian_inner, penalty, quadratic_model

from conftest import random_problem


def unit(shape, i, j):
    E = np.zeros(shape)
    E[i, j] = 1.0
    return E


def naive_ab(plant, cost, ev, D, i, j):
    """Exact coordinate coefficients from direct Hessian products."""
    E = unit(D.shape, i, j)
    a = hessian_inner(plant, cost, ev, E)
    # H(D, E) by polarization
    cross = (hessian_inner(plant, cost, ev, D + E) - hessian_inner(plant, cost, ev, D - E)) / 4
    return a, ev.grad[i, j] + cross


def setup(seed, n=6, m=3):
    rng = np.random.default_rng(seed)
    plant, cost = random_problem(rng, n, m, lam=0.05)
    K = 0.1 * rng.standard_normal((m, n))
    ev = evaluate(plant, cost, K)
    return rng, plant, cost, K, ev


class TestCoordinateStep:
    def test_closed_form_branches(self):
        # minimizes a/2 mu^2 + b mu + lam |c + mu|
        assert coordinate_step(2.0, -4.0, 0.0, 1.0) == pytest.approx(1.5)
        assert coordinate_step(2.0, 4.0, 0.0, 1.0) == pytest.approx(-1.5)
        assert coordinate_step(2.0, 0.5, 1.0, 10.0) == pytest.approx(-1.0)

    def test_infinite_weight_zeroes_entry(self):
        assert coordinate_step(1.0, 3.0, 0.7, math.inf) == -0.7

    def test_non_positive_curvature(self):
        with pytest.raises(ValueError):
            coordinate_step(0.0, 1.0, 0.0, 1.0)

    @settings(max_examples=200)
    @given(a=st.floats(1e-3, 1e3), b=st.floats(-1e3, 1e3), c=st.floats(-1e3, 1e3),
           lam=st.floats(0, 1e3))
    def test_is_minimizer(self, a, b, c, lam):
        mu = coordinate_step(a, b, c, lam)
        f = lambda v: 0.5 * a * v * v + b * v + lam * abs(c + v)  # noqa: E731
        scale = 1 + abs(b) + abs(c) + lam + a
        for dv in (1e-4, -1e-4, 1e-1, -1e-1):
            assert f(mu) <= f(mu + dv) + 1e-9 * scale * scale


class TestFastPath:
    @pytest.mark.parametrize("seed", range(3))
    def test_matches_naive_at_zero_direction(self, seed):
        _, plant, cost, K, ev = setup(seed)
        cache = build_spectral_cache(plant, cost, ev)
        D = np.zeros_like(K)
        for i, j in np.ndindex(*K.shape):
            a, b, c = coordinate_quad(cache, ev, cost, K, i, j)
            a_ref, b_ref = naive_ab(plant, cost, ev, D, i, j)
            assert abs(a - a_ref) <= 1e-6 * abs(a_ref)
            assert abs(b - b_ref) <= 1e-6 * max(abs(b_ref), 1e-12)
            assert c == K[i, j]

    @pytest.mark.parametrize("seed", range(3))
    def test_matches_naive_after_updates(self, seed):
        rng, plant, cost, K, ev = setup(10 + seed)
        cache = build_spectral_cache(plant, cost, ev)
        for _ in range(8):
            i, j = rng.integers(K.shape[0]), rng.integers(K.shape[1])
            apply_coordinate(cache, i, j, float(rng.standard_normal()))
        D = cache.D.copy()
        assert np.count_nonzero(D) > 0
        for i, j in np.ndindex(*K.shape):
            a, b, c = coordinate_quad(cache, ev, cost, K, i, j)
            a_ref, b_ref = naive_ab(plant, cost, ev, D, i, j)
            assert abs(a - a_ref) <= 1e-6 * abs(a_ref)
            assert abs(b - b_ref) <= 1e-6 * max(abs(b_ref), 1.0)
            assert c == K[i, j] + D[i, j]

    def test_running_products_match_fresh(self, rng):
        _, plant, cost, K, ev = setup(7)
        cache = build_spectral_cache(plant, cost, ev)
        for _ in range(10):
            apply_coordinate(cache, rng.integers(3), rng.integers(6), float(rng.standard_normal()))
        fresh = cache.fresh_psi()
        for name, value in fresh.items():
            np.testing.assert_allclose(getattr(cache, name), value, atol=1e-12)

    def test_curvature_matrix_matches_per_coordinate(self):
        _, plant, cost, K, ev = setup(3)
        cache = build_spectral_cache(plant, cost, ev)
        A = cache.curvatures()
        for i, j in [(0, 0), (2, 5), (1, 3)]:
            assert A[i, j] == pytest.approx(coordinate_quad(cache, ev, cost, K, i, j)[0], rel=1e-12)

    def test_mass_spring_with_complex_spectrum(self):
        plant, cost = mass_spring(4)
        cost = cost.with_lambda(0.1)
        K = initialize(plant, cost).K
        ev = evaluate(plant, cost, K)
        cache = build_spectral_cache(plant, cost, ev)
        apply_coordinate(cache, 1, 2, 0.3)
        apply_coordinate(cache, 3, 7, -0.2)
        for i, j in [(0, 0), (1, 2), (3, 5)]:
            a, b, _ = coordinate_quad(cache, ev, cost, K, i, j)
            a_ref, b_ref = naive_ab(plant, cost, ev, cache.D, i, j)
            assert a == pytest.approx(a_ref, rel=1e-6)
            assert b == pytest.approx(b_ref, rel=1e-6, abs=1e-9)

    def test_theta_rank_reported(self):
        _, plant, cost, K, ev = setup(1)
        cache = build_spectral_cache(plant, cost, ev)
        assert 1 <= cache.r == cache.theta.r <= plant.n

    def test_defective_closed_loop_refused(self):
        plant = Plant(np.array([[-1.0, 1.0], [0.0, -1.0]]), np.eye(2), np.eye(2))
        cost = CostSpec(np.eye(2), np.eye(2), np.zeros((2, 2)))
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", LyapunovFallbackWarning)
            ev = evaluate(plant, cost, np.zeros((2, 2)))
        with pytest.raises(CacheBuildError):
            build_spectral_cache(plant, cost, ev)

    def test_unstable_refused(self):
        plant, cost = mass_spring(2)
        ev = evaluate(plant, cost, np.zeros((2, 4)))
        with pytest.raises(ValueError):
            build_spectral_cache(plant, cost, ev)


class TestInnerSolve:
    def _prepare(self, N=4, lam=0.1):
        plant, cost = mass_spring(N)
        cost = cost.with_lambda(lam)
        K = initialize(plant, cost).K
        ev = evaluate(plant, cost, K)
        return plant, cost, K, ev, build_spectral_cache(plant, cost, ev), active_set(ev, cost, K)

    def test_model_decreases_every_sweep(self):
        plant, cost, K, ev, cache, act = self._prepare()
        opts = SolverOptions(max_sweeps=6, inner_rel_tol=1e-12)
        res = inner_solve(cache, ev, cost, K, act, opts, t=1)
        assert res.sweeps == 6
        assert all(d <= 1e-12 for d in res.model_changes)
        # the recorded changes add up to the regularized model value of D
        total = (quadratic_model(plant, cost, ev, res.D) + penalty(cost, K + res.D)
                 - penalty(cost, K))
        assert sum(res.model_changes) == pytest.approx(total, rel=1e-8, abs=1e-10)

    def test_support_within_active_set(self):
        _, cost, K, ev, cache, act = self._prepare(lam=1.0)
        res = inner_solve(cache, ev, cost, K, act, SolverOptions(), t=9)
        assert not np.any(res.D[~act.mask(K.shape)])

    @pytest.mark.parametrize("t,budget", [(1, 1), (3, 1), (4, 2), (10, 4)])
    def test_sweep_budget(self, t, budget):
        _, cost, K, ev, cache, act = self._prepare()
        res = inner_solve(cache, ev, cost, K, act, SolverOptions(inner_rel_tol=1e-300), t=t)
        assert res.sweeps == budget

    def test_empty_active_set_fails(self):
        plant, cost = mass_spring(2)
        cost = cost.with_lambda(1e6)
        K = np.zeros((2, 4))
        plant = plant.shifted(1.0)
        ev = evaluate(plant, cost, K)
        act = active_set(ev, cost, K)
        assert len(act) == 0
        res = inner_solve(build_spectral_cache(plant, cost, ev), ev, cost, K, act,
                          SolverOptions(), t=1)
        assert res.failed
