"""Newton coordinate descent for ``min_K J(K) + sum Lambda_ij |K_ij|``.

Each outer iteration restricts attention to the active set, minimizes the
l1-regularized second-order model by cached coordinate descent, and also
forms a cheap diagonal-Hessian step. Both directions go through a
stability-guarded Armijo line search and the better iterate is kept.
"""
from __future__ import annotations

import dataclasses
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .coordinate import CacheBuildError, build_spectral_cache, inner_solve
from .kernels import lqr_synthesize, max_real_eig
from .model import Gain
from .objective import Evaluation, evaluate, optimality, penalty, soft_threshold

__all__ = [
    "ActiveSet",
    "SolverOptions",
    "TraceRow",
    "SolveReport",
    "LineSearchResult",
    "LineSearchError",
    "InitializationError",
    "StabilizationError",
    "active_set",
    "fallback_direction",
    "line_search",
    "solve",
    "initialize",
    "deflate_and_stabilize",
    "polish",
    "count_nonzero",
]

log = logging.getLogger(__name__)


class LineSearchError(RuntimeError):
    """No step along the direction was stable with sufficient decrease."""


class InitializationError(RuntimeError):
    """No stabilizing starting gain could be produced."""


class StabilizationError(InitializationError):
    """Deflation stopped making progress toward a stabilizing gain."""


@dataclass
class SolverOptions:
    tol: float = 1e-6
    max_iter: int = 100
    inner_rel_tol: float = 1e-2
    max_sweeps: Optional[int] = None
    armijo: float = 1e-4
    beta: float = 0.5
    max_backtracks: int = 60
    theta_tol: float = 1e-8
    clamp_lo: float = 1e-2
    clamp_hi: float = 1e4
    time_budget: Optional[float] = None
    use_fallback: bool = True
    deflate: bool = True
    backend: Optional[str] = None

    def __post_init__(self):
        for name in ("tol", "inner_rel_tol", "armijo", "beta", "theta_tol", "clamp_lo", "clamp_hi"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not self.beta < 1:
            raise ValueError("beta must lie in (0, 1)")
        if not self.clamp_lo <= self.clamp_hi:
            raise ValueError("clamp_lo must not exceed clamp_hi")
        if self.max_iter < 0 or self.max_backtracks < 0:
            raise ValueError("iteration limits must be non-negative")


@dataclass(frozen=True)
class ActiveSet:
    """Coordinates optimized in the inner loop, in row-major order."""

    rows: np.ndarray
    cols: np.ndarray

    def __len__(self):
        return int(self.rows.size)

    def pairs(self) -> list[tuple[int, int]]:
        return list(zip(self.rows.tolist(), self.cols.tolist()))

    def mask(self, shape) -> np.ndarray:
        out = np.zeros(shape, dtype=bool)
        out[self.rows, self.cols] = True
        return out


@dataclass
class TraceRow:
    iter: int
    time_s: float
    objective_F: float
    objective_J: float
    penalty_g: float
    nnz: int
    active_set_size: int
    step_alpha: float
    direction: str

    FIELDS = ("iter", "time_s", "objective_F", "objective_J", "penalty_g", "nnz",
              "active_set_size", "step_alpha", "direction")


@dataclass
class SolveReport:
    gain: Gain
    trace: list
    status: str
    optimality: float
    lyapunov_solves: int = 0
    theta_ranks: list = field(default_factory=list)
    solver: str = "newton-cd"

    @property
    def K(self) -> np.ndarray:
        return self.gain.K

    @property
    def iterations(self) -> int:
        return len(self.trace) - 1

    @property
    def F(self) -> float:
        return self.trace[-1].objective_F

    @property
    def J(self) -> float:
        return self.trace[-1].objective_J

    @property
    def g(self) -> float:
        return self.trace[-1].penalty_g

    @property
    def converged(self) -> bool:
        return self.status == "converged"


@dataclass
class LineSearchResult:
    alpha: float
    ev: Evaluation
    F: float
    evaluations: int


def count_nonzero(K, rel: float = 1e-9) -> int:
    """Entries with ``|K_ij| > rel * max|K|``."""
    K = np.abs(np.asarray(K))
    top = K.max(initial=0.0)
    return int(np.count_nonzero(K > rel * top)) if top > 0 else 0


def active_set(ev: Evaluation, cost, K) -> ActiveSet:
    """``|grad_ij| > Lambda_ij`` or ``K_ij != 0``."""
    K = np.asarray(K)
    mask = (np.abs(ev.grad) > cost.Lambda) | (K != 0)
    rows, cols = np.nonzero(mask)
    return ActiveSet(rows.astype(np.intp), cols.astype(np.intp))


def _cheap_curvatures(ev: Evaluation, cost) -> np.ndarray:
    # the 2 R_ii L_jj term is the only piece of the Hessian diagonal that is
    # available without the eigenbasis, and it is always non-negative
    return 2.0 * np.outer(np.diag(cost.R), np.diag(ev.L))


def fallback_direction(ev: Evaluation, cost, K, active: ActiveSet, curvatures=None,
                       options: Optional[SolverOptions] = None) -> np.ndarray:
    """One coordinate pass on the model with a clamped diagonal Hessian.

    ``curvatures`` holds the Hessian diagonal (from the spectral cache);
    without it the ``2 R_ii L_jj`` part is used.
    """
    options = options or SolverOptions()
    K = np.asarray(K, dtype=float)
    if curvatures is None:
        curvatures = _cheap_curvatures(ev, cost)
    rows, cols = active.rows, active.cols
    a = np.clip(curvatures[rows, cols], options.clamp_lo, options.clamp_hi)
    b = ev.grad[rows, cols]
    c = K[rows, cols]
    lam = cost.Lambda[rows, cols]
    D = np.zeros_like(K)
    D[rows, cols] = -c + soft_threshold(c - b / a, lam / a)
    return D


def line_search(plant, cost, K, D, options: Optional[SolverOptions] = None,
                ev: Optional[Evaluation] = None) -> LineSearchResult:
    """Backtracking Armijo search on ``F = J + g`` over ``alpha = beta^k``.

    The decrement is ``tr(grad^T D) + g(K + D) - g(K)``; unstable trial
    points are rejected outright.
    """
    options = options or SolverOptions()
    K = np.asarray(K, dtype=float)
    D = np.asarray(D, dtype=float)
    if not np.any(D):
        raise ValueError("line search needs a nonzero direction")
    evals = 0
    if ev is None:
        ev = evaluate(plant, cost, K)
        evals += 1
    g0 = penalty(cost, K)
    F0 = ev.J + g0
    decrement = float(np.sum(ev.grad * D)) + penalty(cost, K + D) - g0
    if not decrement < 0:
        raise LineSearchError(f"not a descent direction (decrement {decrement:.3g})")
    alpha = 1.0
    for _ in range(options.max_backtracks + 1):
        Kt = K + alpha * D
        evt = evaluate(plant, cost, Kt)
        evals += 1
        if evt.stable:
            Ft = evt.J + penalty(cost, Kt)
            if Ft <= F0 + options.armijo * alpha * decrement:
                return LineSearchResult(alpha, evt, Ft, evals)
        alpha *= options.beta
    raise LineSearchError("no acceptable step size")


def _trace_row(t, start, ev, cost, K, n_active, alpha, kind) -> TraceRow:
    g = penalty(cost, K)
    return TraceRow(t, time.perf_counter() - start, ev.J + g, ev.J, g,
                    count_nonzero(K), n_active, alpha, kind)


def _as_matrix(K) -> np.ndarray:
    return np.array(K.K if isinstance(K, Gain) else K, dtype=float)


def solve(plant, cost, K0=None, options: Optional[SolverOptions] = None,
          callback: Optional[Callable] = None) -> SolveReport:
    """Run Newton-CD from ``K0`` (soft-thresholded LQR gain when omitted).

    An unstable ``K0`` is first repaired by :func:`deflate_and_stabilize`
    unless ``options.deflate`` is off. Terminates with status
    ``converged``, ``max_iter``, ``stalled`` or ``time_budget``.
    ``callback(t, K, ev)`` is called with the starting gain (``t = 0``) and
    with every accepted iterate.
    """
    options = options or SolverOptions()
    start = time.perf_counter()
    K = initialize(plant, cost).K.copy() if K0 is None else _as_matrix(K0)
    if not np.isfinite(penalty(cost, K)):
        raise ValueError("K0 is nonzero where Lambda is infinite")
    ev = evaluate(plant, cost, K)
    lyap = 2
    if not ev.stable:
        if not options.deflate:
            raise InitializationError("K0 does not stabilize the plant")
        K = deflate_and_stabilize(plant, cost, K, options=options).K.copy()
        ev = evaluate(plant, cost, K)
        lyap += 2

    trace = [_trace_row(0, start, ev, cost, K, 0, 0.0, "newton")]
    if callback is not None:
        callback(0, K, ev)
    ranks = []
    status = "max_iter"
    t = 0
    while True:
        F = ev.J + penalty(cost, K)
        opt = optimality(ev.grad, K, cost.Lambda)
        if opt <= options.tol * (1.0 + abs(F)):
            status = "converged"
            break
        if t >= options.max_iter:
            break
        if options.time_budget is not None and time.perf_counter() - start > options.time_budget:
            status = "time_budget"
            break
        t += 1
        active = active_set(ev, cost, K)

        candidates = []
        try:
            cache = build_spectral_cache(plant, cost, ev, options.theta_tol)
        except CacheBuildError as exc:
            log.info("iteration %d: spectral cache unavailable (%s)", t, exc)
            cache, curv = None, None
        else:
            ranks.append(cache.theta.r)
            curv = cache.curvatures()
            inner = inner_solve(cache, ev, cost, K, active, options, t,
                                curvatures=curv, backend=options.backend)
            if not inner.failed:
                candidates.append(("newton", inner.D))
            del cache
        if options.use_fallback or not candidates:
            candidates.append(("fallback", fallback_direction(ev, cost, K, active, curv, options)))

        best = None
        for kind, D in candidates:
            if not np.any(D):
                continue
            try:
                ls = line_search(plant, cost, K, D, options, ev=ev)
            except LineSearchError as exc:
                log.debug("iteration %d: %s direction rejected (%s)", t, kind, exc)
                continue
            lyap += 2 * ls.evaluations
            if best is None or ls.F < best[2].F:
                best = (kind, D, ls)
        if best is None:
            status = "stalled"
            break
        kind, D, ls = best
        K = K + ls.alpha * D
        ev = ls.ev
        trace.append(_trace_row(t, start, ev, cost, K, len(active), ls.alpha, kind))
        if callback is not None:
            callback(t, K, ev)

    return SolveReport(
        gain=Gain(K, -ev.max_real),
        trace=trace,
        status=status,
        optimality=optimality(ev.grad, K, cost.Lambda),
        lyapunov_solves=lyap,
        theta_ranks=ranks,
    )


def initialize(plant, cost, max_halvings: int = 60) -> Gain:
    """Soft-threshold the LQR gain by ``alpha * Lambda``, halving ``alpha``
    from 1 until the result is stable and ``F`` does not exceed ``F(K_LQR)``.
    """
    lqr, _ = lqr_synthesize(plant, cost)
    K_lqr = lqr.K
    if not np.any(cost.Lambda):
        return lqr
    ev = evaluate(plant, cost, K_lqr)
    F_lqr = ev.J + penalty(cost, K_lqr)
    alpha = 1.0
    for _ in range(max_halvings):
        K = soft_threshold(K_lqr, alpha * cost.Lambda)
        evk = evaluate(plant, cost, K)
        if evk.stable and evk.J + penalty(cost, K) <= F_lqr:
            return Gain(K, -evk.max_real)
        alpha *= 0.5
    # only reachable with infinite weights: the LQR gain itself is infeasible
    K = np.where(np.isinf(cost.Lambda), 0.0, K_lqr)
    return Gain.for_plant(plant, K)


def deflate_and_stabilize(plant, cost, K0, margin: Optional[float] = None,
                          options: Optional[SolverOptions] = None, *,
                          iters_per_round: int = 5, max_rounds: int = 50,
                          patience: int = 10) -> Gain:
    """Turn a destabilizing gain into a stabilizing one by deflation.

    Each round shifts the plant to ``A - nu I`` with ``nu`` equal to the
    current spectral abscissa plus a margin (default ``0.1 (1 + |abscissa|)``),
    runs a few Newton-CD iterations there, and re-measures on the true plant.
    """
    options = options or SolverOptions()
    K = np.where(np.isinf(cost.Lambda), 0.0, _as_matrix(K0))
    mr = max_real_eig(plant.A + plant.B @ K)
    best = mr
    stale = 0
    inner_opts = dataclasses.replace(options, max_iter=iters_per_round, deflate=False,
                                     time_budget=None)
    for rnd in range(max_rounds):
        if mr < 0:
            log.info("deflation stabilized after %d rounds", rnd)
            return Gain(K, -mr)
        gap = 0.1 * (1.0 + abs(mr)) if margin is None else margin
        shifted = plant.shifted(mr + gap)
        report = solve(shifted, cost, K, inner_opts)
        K = report.K.copy()
        mr = max_real_eig(plant.A + plant.B @ K)
        if mr < best:
            best, stale = mr, 0
        else:
            stale += 1
            if stale >= patience:
                break
    if mr < 0:
        return Gain(K, -mr)
    raise StabilizationError(f"deflation failed to stabilize (spectral abscissa {mr:.3g})")


def polish(plant, cost, pattern, K_start, options: Optional[SolverOptions] = None,
           callback: Optional[Callable] = None) -> SolveReport:
    """Re-optimize the LQR cost with the support of ``K`` fixed to ``pattern``.

    ``pattern`` is a boolean (m, n) mask or an iterable of ``(i, j)`` pairs.
    """
    shape = (plant.m, plant.n)
    if isinstance(pattern, np.ndarray) and pattern.shape == shape:
        mask = pattern.astype(bool)
    else:
        mask = np.zeros(shape, dtype=bool)
        for i, j in pattern:
            mask[i, j] = True
    K = np.where(mask, _as_matrix(K_start), 0.0)
    return solve(plant, cost.with_pattern(mask), K, options, callback)
