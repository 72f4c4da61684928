"""LQR cost, gradient, and Hessian products evaluated the direct way.

These are O(n^3) per call. The solver uses :func:`evaluate` for function
and gradient values, and the Hessian routines here serve as the reference
against which the cached coordinate path is checked.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .kernels import Eigendecomposition, eigendecompose, solve_lyapunov

__all__ = [
    "Evaluation",
    "evaluate",
    "penalty",
    "hessian_inner",
    "quadratic_model",
    "tilde_solutions",
    "soft_threshold",
    "optimality",
]


@dataclass(frozen=True, eq=False)
class Evaluation:
    """Cost and first-order data at a gain ``K``.

    ``L`` and ``P`` solve the closed-loop Lyapunov equations driven by ``W``
    and ``Q + K^T R K``; ``E = P B + K^T R`` and ``grad = 2 E^T L``. When the
    closed loop is not Hurwitz only ``K``, ``stable`` and ``J = inf`` are set.
    """

    K: np.ndarray
    stable: bool
    J: float
    max_real: float
    L: Optional[np.ndarray] = None
    P: Optional[np.ndarray] = None
    E: Optional[np.ndarray] = None
    grad: Optional[np.ndarray] = None
    eig: Optional[Eigendecomposition] = None


def evaluate(plant, cost, K) -> Evaluation:
    K = np.asarray(K, dtype=float)
    if K.shape != (plant.m, plant.n):
        raise ValueError(f"K must be {plant.m}x{plant.n}, got {K.shape}")
    M = plant.A + plant.B @ K
    eig = eigendecompose(M)
    mr = eig.max_real
    if not mr < 0:
        return Evaluation(K, False, np.inf, mr)
    L = solve_lyapunov(M, plant.W, eig=eig)
    KRK = K.T @ cost.R @ K
    P = solve_lyapunov(M.T, cost.Q + KRK, eig=eig.transpose() if eig.Uinv is not None else None)
    E = P @ plant.B + K.T @ cost.R
    grad = 2.0 * E.T @ L
    J = float(np.sum(P * plant.W))
    if not np.isfinite(J) or J < 0:
        return Evaluation(K, False, np.inf, mr)
    return Evaluation(K, True, J, mr, L, P, E, grad, eig)


def penalty(cost, K) -> float:
    """Weighted l1 norm ``sum Lambda_ij |K_ij|`` with ``inf * 0 = 0``."""
    absK = np.abs(np.asarray(K, dtype=float))
    Lam = cost.Lambda
    nz = absK != 0
    return float(np.sum(Lam[nz] * absK[nz]))


def soft_threshold(x, t):
    """Entrywise ``sign(x) * max(|x| - t, 0)``; ``t = inf`` maps to zero."""
    x = np.asarray(x, dtype=float)
    t = np.broadcast_to(np.asarray(t, dtype=float), x.shape)
    out = np.zeros_like(x)
    fin = np.isfinite(t)
    out[fin] = np.sign(x[fin]) * np.maximum(np.abs(x[fin]) - t[fin], 0.0)
    return out


def optimality(grad, K, Lambda) -> float:
    """Infinity norm of the minimal-norm subgradient of ``J + g`` at ``K``.

    Coordinates pinned by an infinite weight are ignored.
    """
    K = np.asarray(K)
    free = np.isfinite(Lambda)
    nz = K != 0
    res = np.where(
        nz,
        np.abs(grad + np.where(free, Lambda, 0.0) * np.sign(K)),
        np.maximum(np.abs(grad) - np.where(free, Lambda, 0.0), 0.0),
    )
    res = np.where(free, res, 0.0)
    return float(res.max(initial=0.0))


def tilde_solutions(plant, ev: Evaluation, D):
    """Directional derivatives ``(L~, P~)`` of ``L`` and ``P`` along ``D``."""
    if not ev.stable:
        raise ValueError("Hessian products need a stabilizing gain")
    D = np.asarray(D, dtype=float)
    B, L, E = plant.B, ev.L, ev.E
    M = plant.A + B @ ev.K
    BDL = B @ D @ L
    Lt = solve_lyapunov(M, BDL + BDL.T, eig=ev.eig)
    ED = E @ D
    eigT = ev.eig.transpose() if ev.eig is not None and ev.eig.Uinv is not None else None
    Pt = solve_lyapunov(M.T, ED + ED.T, eig=eigT)
    return Lt, Pt


def hessian_inner(plant, cost, ev: Evaluation, D) -> float:
    """``vec(D)^T H vec(D)`` at ``ev.K`` from two extra Lyapunov solves."""
    D = np.asarray(D, dtype=float)
    Lt, Pt = tilde_solutions(plant, ev, D)
    first = np.trace(Lt @ ev.E @ D)
    second = np.trace(ev.L @ (Pt @ plant.B + D.T @ cost.R) @ D)
    return float(2.0 * (first + second))


def quadratic_model(plant, cost, ev: Evaluation, D, form: str = "taylor") -> float:
    """Second-order model ``J(K + D) - J(K)`` of the LQR cost.

    ``form="taylor"`` uses gradient plus half the Hessian product;
    ``form="four-term"`` expands it as
    ``2 tr LED + tr L~ED + tr L P~ B D + tr L D^T R D``.
    """
    D = np.asarray(D, dtype=float)
    if form == "taylor":
        return float(np.sum(ev.grad * D) + 0.5 * hessian_inner(plant, cost, ev, D))
    if form == "four-term":
        Lt, Pt = tilde_solutions(plant, ev, D)
        L, E = ev.L, ev.E
        return float(
            2.0 * np.trace(L @ E @ D)
            + np.trace(Lt @ E @ D)
            + np.trace(L @ Pt @ plant.B @ D)
            + np.trace(L @ D.T @ cost.R @ D)
        )
    raise ValueError(f"unknown form {form!r}")
