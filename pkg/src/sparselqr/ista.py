"""Proximal-gradient (ISTA) baseline with a stability-guarded step search."""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .model import Gain
from .newton_cd import SolveReport, TraceRow, count_nonzero
from .objective import evaluate, optimality, penalty, soft_threshold

__all__ = ["IstaOptions", "ista_step", "ista_solve"]


@dataclass
class IstaOptions:
    initial_step: float = 1.0
    beta: float = 0.5
    sufficient_decrease: float = 1e-4
    max_iter: int = 50000
    tol: float = 1e-6
    max_backtracks: int = 60
    time_budget: Optional[float] = None
    accelerate: bool = False  # FISTA slot; not implemented

    def __post_init__(self):
        for name in ("initial_step", "beta", "sufficient_decrease", "tol"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not self.beta < 1:
            raise ValueError("beta must lie in (0, 1)")
        if self.accelerate:
            raise NotImplementedError("FISTA acceleration is not implemented")


def _prox_grad(K, grad, step, Lambda):
    return soft_threshold(K - step * grad, step * Lambda)


def ista_step(plant, cost, K, step, ev=None) -> Gain:
    """``S_{step*Lambda}(K - step * grad J(K))``."""
    K = np.asarray(K, dtype=float)
    if ev is None:
        ev = evaluate(plant, cost, K)
    if not ev.stable:
        raise ValueError("ISTA step needs a stabilizing gain")
    return Gain.for_plant(plant, _prox_grad(K, ev.grad, step, cost.Lambda))


def ista_solve(plant, cost, K0, options: Optional[IstaOptions] = None,
               callback: Optional[Callable] = None) -> SolveReport:
    """Proximal gradient from a stabilizing ``K0``.

    Each iteration starts its step search at twice the previously accepted
    step (``initial_step`` on the first iteration) and halves until the
    candidate is stable and ``F(K+) <= F(K) - c ||K+ - K||^2 / step``.
    ``callback(t, K, ev)`` sees the start and every accepted iterate.
    """
    options = options or IstaOptions()
    start = time.perf_counter()
    K = np.array(K0.K if isinstance(K0, Gain) else K0, dtype=float)
    ev = evaluate(plant, cost, K)
    if not ev.stable:
        raise ValueError("ISTA needs a stabilizing initial gain")
    lyap = 2
    g = penalty(cost, K)
    trace = [TraceRow(0, time.perf_counter() - start, ev.J + g, ev.J, g,
                      count_nonzero(K), 0, 0.0, "ista")]
    if callback is not None:
        callback(0, K, ev)
    step = options.initial_step
    status = "max_iter"
    t = 0
    while True:
        F = ev.J + g
        if optimality(ev.grad, K, cost.Lambda) <= options.tol * (1.0 + abs(F)):
            status = "converged"
            break
        if t >= options.max_iter:
            break
        if options.time_budget is not None and time.perf_counter() - start > options.time_budget:
            status = "time_budget"
            break
        t += 1
        if t > 1:
            step = step / options.beta
        accepted = None
        for _ in range(options.max_backtracks + 1):
            Kt = _prox_grad(K, ev.grad, step, cost.Lambda)
            diff = float(np.sum((Kt - K) ** 2))
            if diff == 0.0:
                break
            evt = evaluate(plant, cost, Kt)
            lyap += 2
            if evt.stable:
                gt = penalty(cost, Kt)
                if evt.J + gt <= F - options.sufficient_decrease * diff / step:
                    accepted = (Kt, evt, gt)
                    break
            step *= options.beta
        if accepted is None:
            status = "stalled"
            break
        K, ev, g = accepted
        trace.append(TraceRow(t, time.perf_counter() - start, ev.J + g, ev.J, g,
                              count_nonzero(K), int(np.count_nonzero(K)), step, "ista"))
        if callback is not None:
            callback(t, K, ev)
    return SolveReport(
        gain=Gain(K, -ev.max_real),
        trace=trace,
        status=status,
        optimality=optimality(ev.grad, K, cost.Lambda),
        lyapunov_solves=lyap,
        solver="ista",
    )
