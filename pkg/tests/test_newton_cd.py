import warnings

import numpy as np
import pytest

from sparselqr.kernels import LyapunovFallbackWarning, lqr_synthesize, max_real_eig
from sparselqr.model import CostSpec, Plant, mass_spring
from sparselqr.newton_cd import (
    ActiveSet,
    InitializationError,
    LineSearchError,
    SolverOptions,
    TraceRow,
    active_set,
    count_nonzero,
    deflate_and_stabilize,
    fallback_direction,
    initialize,
    line_search,
    polish,
    solve,
)
from sparselqr.objective import evaluate, optimality, penalty, soft_threshold

from conftest import random_problem, scalar_problem


def assert_monotone_and_stable(plant, report):
    F = [row.objective_F for row in report.trace]
    assert all(b <= a + 1e-12 * abs(a) for a, b in zip(F, F[1:]))
    assert max_real_eig(plant.A + plant.B @ report.K) < 0


class TestOptions:
    @pytest.mark.parametrize("kw", [dict(tol=0), dict(beta=1.0), dict(armijo=-1),
                                    dict(clamp_lo=10, clamp_hi=1), dict(max_iter=-1)])
    def test_rejects_bad_values(self, kw):
        with pytest.raises(ValueError):
            SolverOptions(**kw)

    def test_defaults(self):
        o = SolverOptions()
        assert (o.tol, o.max_iter, o.armijo, o.beta, o.theta_tol) == (1e-6, 100, 1e-4, 0.5, 1e-8)
        assert (o.clamp_lo, o.clamp_hi, o.inner_rel_tol) == (1e-2, 1e4, 1e-2)


class TestHelpers:
    def test_count_nonzero_relative_threshold(self):
        K = np.array([[1.0, 1e-10, 0.0, -2e-9]])
        assert count_nonzero(K) == 2
        assert count_nonzero(np.zeros((2, 2))) == 0

    def test_active_set_rule(self):
        plant, cost = mass_spring(3)
        cost = cost.with_lambda(0.2)
        K = initialize(plant, cost).K
        ev = evaluate(plant, cost, K)
        act = active_set(ev, cost, K)
        mask = act.mask(K.shape)
        expected = (np.abs(ev.grad) > 0.2) | (K != 0)
        np.testing.assert_array_equal(mask, expected)
        assert len(act) == expected.sum()
        assert act.pairs()[0] == (int(act.rows[0]), int(act.cols[0]))

    def test_fallback_is_clamped_diagonal_step(self):
        plant, cost = mass_spring(3)
        cost = cost.with_lambda(0.05)
        K = initialize(plant, cost).K
        ev = evaluate(plant, cost, K)
        act = active_set(ev, cost, K)
        curv = np.full(K.shape, 1e-6)  # below the lower clamp
        D = fallback_direction(ev, cost, K, act, curv)
        a = 1e-2
        ref = -K + soft_threshold(K - ev.grad / a, 0.05 / a)
        mask = act.mask(K.shape)
        np.testing.assert_allclose(D[mask], ref[mask], rtol=1e-12, atol=1e-14)
        assert not np.any(D[~mask])

    def test_fallback_respects_infinite_weights(self):
        plant, cost = mass_spring(2)
        K = lqr_synthesize(plant, cost)[0].K
        Lam = np.full((2, 4), np.inf)
        Lam[0, 0] = 0.0
        cost = cost.with_lambda(Lam)
        ev = evaluate(plant, cost, K)
        act = ActiveSet(np.array([0, 1]), np.array([0, 1]))
        D = fallback_direction(ev, cost, K, act)
        # pinned coordinate is driven exactly to zero
        assert K[1, 1] + D[1, 1] == 0.0


class TestLineSearch:
    def test_accepts_full_newton_step_near_optimum(self):
        plant, cost = scalar_problem()
        # J(k) = (1 + k^2)/(2(1 - k)) has its minimum at k = 1 - sqrt(2)
        K = np.array([[-0.3]])
        ev = evaluate(plant, cost, K)
        D = -ev.grad  # descent
        res = line_search(plant, cost, K, 0.1 * D, ev=ev)
        assert res.alpha == 1.0
        assert res.F < ev.J

    def test_backtracks_out_of_instability(self):
        plant, cost = scalar_problem()
        K = np.array([[0.0]])
        ev = evaluate(plant, cost, K)
        # a huge step along -grad overshoots; a huge step along +grad destabilizes
        res = line_search(plant, cost, K, np.array([[-100.0]]), ev=ev)
        assert res.alpha < 1.0
        assert res.ev.stable
        assert res.F <= ev.J + 1e-4 * res.alpha * (-100.0 * ev.grad[0, 0])

    def test_rejects_ascent_direction(self):
        plant, cost = scalar_problem()
        with pytest.raises(LineSearchError):
            line_search(plant, cost, np.array([[0.0]]), np.array([[1.0]]))

    def test_rejects_zero_direction(self):
        plant, cost = scalar_problem()
        with pytest.raises(ValueError):
            line_search(plant, cost, np.zeros((1, 1)), np.zeros((1, 1)))


class TestSolve:
    def test_scalar_lqr(self):
        plant, cost = scalar_problem()
        rep = solve(plant, cost, np.zeros((1, 1)))
        assert rep.converged
        np.testing.assert_allclose(rep.K, [[1 - np.sqrt(2)]], rtol=1e-5)

    def test_trace_schema_and_invariants(self):
        plant, cost = mass_spring(5)
        cost = cost.with_lambda(0.1)
        rep = solve(plant, cost)
        assert rep.converged
        assert TraceRow.FIELDS == ("iter", "time_s", "objective_F", "objective_J", "penalty_g",
                                   "nnz", "active_set_size", "step_alpha", "direction")
        assert [r.iter for r in rep.trace] == list(range(len(rep.trace)))
        assert {r.direction for r in rep.trace} <= {"newton", "fallback"}
        for r in rep.trace:
            assert r.objective_F == pytest.approx(r.objective_J + r.penalty_g)
        assert_monotone_and_stable(plant, rep)
        assert rep.theta_ranks and rep.lyapunov_solves > 0
        ev = evaluate(plant, cost, rep.K)
        assert optimality(ev.grad, rep.K, cost.Lambda) <= 1e-6 * (1 + abs(rep.F))

    @pytest.mark.parametrize("seed", range(3))
    def test_zero_penalty_recovers_lqr(self, seed):
        rng = np.random.default_rng(seed)
        plant, cost = random_problem(rng, 6, 2)
        K_lqr = lqr_synthesize(plant, cost)[0].K
        rep = solve(plant, cost, np.zeros((2, 6)))
        assert np.linalg.norm(rep.K - K_lqr) <= 1e-4 * np.linalg.norm(K_lqr)

    def test_huge_penalty_keeps_zero(self):
        rng = np.random.default_rng(5)
        plant, cost = random_problem(rng, 5, 2, lam=1e6)
        ev = evaluate(plant, cost, np.zeros((2, 5)))
        assert np.abs(ev.grad).max() <= 1e6
        rep = solve(plant, cost, np.zeros((2, 5)))
        assert rep.converged and rep.iterations <= 1
        assert not np.any(rep.K)

    def test_infinite_weights_stay_zero(self):
        plant, cost = mass_spring(4)
        pattern = np.zeros((4, 8), dtype=bool)
        for i in range(4):
            pattern[i, i] = pattern[i, 4 + i] = True
        cost = cost.with_lambda(np.where(pattern, 0.05, np.inf))
        rep = solve(plant, cost)
        assert rep.converged
        assert not np.any(rep.K[~pattern])
        assert_monotone_and_stable(plant, rep)

    def test_time_budget(self):
        plant, cost = mass_spring(10)
        rep = solve(plant, cost.with_lambda(0.1), options=SolverOptions(time_budget=0.0))
        assert rep.status == "time_budget"
        assert rep.iterations == 0

    def test_max_iter(self):
        plant, cost = mass_spring(10)
        rep = solve(plant, cost.with_lambda(0.1), options=SolverOptions(max_iter=1, tol=1e-14))
        assert rep.status == "max_iter" and rep.iterations == 1

    def test_unstable_start_without_deflation(self):
        plant, cost = mass_spring(3)
        with pytest.raises(InitializationError):
            solve(plant, cost, np.zeros((3, 6)), SolverOptions(deflate=False))

    def test_unstable_start_is_deflated(self):
        plant, cost = mass_spring(3)
        rep = solve(plant, cost.with_lambda(0.1), np.zeros((3, 6)))
        assert rep.converged
        assert_monotone_and_stable(plant, rep)

    def test_start_violating_pattern(self):
        plant, cost = mass_spring(2)
        with pytest.raises(ValueError):
            solve(plant, cost.with_lambda(np.inf), -np.ones((2, 4)))

    def test_defective_closed_loop_uses_fallback(self):
        plant = Plant(np.array([[-1.0, 1.0], [0.0, -1.0]]), np.eye(2), np.eye(2))
        cost = CostSpec(np.eye(2), np.eye(2), np.full((2, 2), 0.01))
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", LyapunovFallbackWarning)
            rep = solve(plant, cost, np.zeros((2, 2)))
        assert rep.trace[1].direction == "fallback"
        assert rep.converged


class TestInitialize:
    def test_zero_penalty_gives_lqr(self):
        plant, cost = mass_spring(3)
        np.testing.assert_array_equal(initialize(plant, cost).K, lqr_synthesize(plant, cost)[0].K)

    def test_soft_thresholded_and_no_worse(self):
        plant, cost = mass_spring(6)
        cost = cost.with_lambda(0.5)
        K_lqr = lqr_synthesize(plant, cost)[0].K
        K0 = initialize(plant, cost)
        assert K0.stable
        F = lambda K: evaluate(plant, cost, K).J + penalty(cost, K)  # noqa: E731
        assert F(K0.K) <= F(K_lqr)
        # entries of K_LQR below the threshold become exact zeros
        small = np.abs(K_lqr) <= 0.5 * 0.5 ** 10
        assert not np.any(K0.K[small])
        assert count_nonzero(K0.K) < K0.K.size


class TestDeflation:
    def test_stable_start_unchanged(self):
        plant, cost = mass_spring(3)
        K = lqr_synthesize(plant, cost)[0].K
        np.testing.assert_array_equal(deflate_and_stabilize(plant, cost, K).K, K)

    def test_scalar_unstable(self):
        plant, cost = scalar_problem(a=1.0)
        g = deflate_and_stabilize(plant, cost, np.zeros((1, 1)))
        assert g.K[0, 0] < -1.0
        assert g.stable

    def test_mass_spring_from_zero(self):
        plant, cost = mass_spring(5)
        g = deflate_and_stabilize(plant, cost.with_lambda(0.1), np.zeros((5, 10)))
        assert g.stable
        assert max_real_eig(plant.A + plant.B @ g.K) < 0


class TestPolish:
    def test_polish_improves_and_keeps_support(self):
        plant, cost = mass_spring(5)
        rep = solve(plant, cost.with_lambda(1.0))
        mask = rep.K != 0
        pol = polish(plant, cost, mask, rep.K)
        assert pol.J <= rep.J + 1e-10
        assert not np.any(pol.K[~mask])
        assert pol.g == 0.0

    def test_pairs_pattern(self):
        plant, cost = mass_spring(2)
        pairs = [(0, 0), (0, 2), (1, 1), (1, 3)]
        K = lqr_synthesize(plant, cost)[0].K
        pol = polish(plant, cost, pairs, K)
        mask = np.zeros((2, 4), dtype=bool)
        for p in pairs:
            mask[p] = True
        assert not np.any(pol.K[~mask])
        assert pol.converged


def test_callback_sees_every_accepted_iterate():
    plant, cost = mass_spring(4)
    cost = cost.with_lambda(0.1)
    seen = []
    rep = solve(plant, cost, callback=lambda t, K, ev: seen.append((t, K.copy(), ev.J)))
    assert [t for t, _, _ in seen] == [r.iter for r in rep.trace]
    assert [J for _, _, J in seen] == [r.objective_J for r in rep.trace]
    np.testing.assert_array_equal(seen[-1][1], rep.K)
