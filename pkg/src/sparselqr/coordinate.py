"""Cached O(r n) coordinate updates for the regularized Newton subproblem.

With ``A + B K = U diag(S) U^{-1}`` and the Cauchy matrix factored as
``Theta = sum_k x_k x_k^T``, write ``X_k = U diag(x_k) U^{-1}``. The
D-dependent Lyapunov solutions become ``L~ = sum X_k (BDL + LD^TB^T) X_k^T``
and ``P~ = sum X_k^T (ED + D^TE^T) X_k``, and the model reduces to

    J~(D) = 2 tr LED + tr LD^TRD + 2 sum_k tr X_k^T (ED + D^TE^T) X_k B D L.

Fixed products (Phi) are built once per outer iteration; D-dependent ones
(Psi) are updated by a rank-one row/column change per coordinate step.
Column-accessed Phi factors are stored transposed and the rank index ``k``
is kept innermost, so each coordinate reads one contiguous block per array
and each update writes contiguous length-r runs:

    Phi0  = L E                  (n, m)     real
    Phi1T = (X_k L)^T            (n, n, r)
    Phi2T = (X_k B)^T            (m, n, r)
    Phi3T = (L X_k^T E)^T        (m, n, r)
    Phi4T = (B^T X_k^T E)^T      (m, m, r)
    Psi0  = R D                  (m, n)     real
    Psi1  = Phi1 D^T             (n, m, r)
    Psi2  = Phi4 D               (m, n, r)
    Psi3  = Phi2 D               (n, n, r)
    Psi4  = Phi3 D               (n, n, r)
"""
from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import _sweep
from .kernels import COND_LIMIT, NearSingularThetaError, ThetaFactors, takagi_factor
from .objective import Evaluation

try:
    from ._sweep_ext import cd_sweep as _cd_sweep_compiled
except ImportError:  # pragma: no cover - depends on the build
    _cd_sweep_compiled = None

__all__ = [
    "BACKEND",
    "CacheBuildError",
    "CoordinateCache",
    "InnerResult",
    "available_backends",
    "build_spectral_cache",
    "coordinate_quad",
    "coordinate_step",
    "apply_coordinate",
    "inner_solve",
]

coordinate_step = _sweep.coordinate_step

if os.environ.get("SPARSELQR_PURE_PYTHON") or _cd_sweep_compiled is None:
    BACKEND = "python"
else:
    BACKEND = "compiled"


def available_backends() -> list[str]:
    return ["python"] + (["compiled"] if _cd_sweep_compiled is not None else [])


class CacheBuildError(RuntimeError):
    """The eigenbasis is unusable; the caller should take the fallback step."""


@dataclass(eq=False)
class CoordinateCache:
    L: np.ndarray
    R: np.ndarray
    Phi0: np.ndarray
    Phi1T: np.ndarray
    Phi2T: np.ndarray
    Phi3T: np.ndarray
    Phi4T: np.ndarray
    theta: ThetaFactors
    D: np.ndarray = field(init=False)
    Psi0: np.ndarray = field(init=False)
    Psi1: np.ndarray = field(init=False)
    Psi2: np.ndarray = field(init=False)
    Psi3: np.ndarray = field(init=False)
    Psi4: np.ndarray = field(init=False)

    def __post_init__(self):
        self.reset()

    @property
    def r(self) -> int:
        return self.Phi1T.shape[2]

    def reset(self):
        """Zero ``D`` and all running products."""
        r, n, m = self.r, self.L.shape[0], self.R.shape[0]
        self.D = np.zeros((m, n))
        self.Psi0 = np.zeros((m, n))
        self.Psi1 = np.zeros((n, m, r), dtype=complex)
        self.Psi2 = np.zeros((m, n, r), dtype=complex)
        self.Psi3 = np.zeros((n, n, r), dtype=complex)
        self.Psi4 = np.zeros((n, n, r), dtype=complex)

    def fresh_psi(self, D=None) -> dict:
        """Running products recomputed from their definitions."""
        D = self.D if D is None else np.asarray(D, dtype=float)
        return {
            "Psi0": self.R @ D,
            "Psi1": np.einsum("jlk,ij->lik", self.Phi1T, D),
            "Psi2": np.einsum("ilk,ij->ljk", self.Phi4T, D),
            "Psi3": np.einsum("ilk,ij->ljk", self.Phi2T, D),
            "Psi4": np.einsum("ilk,ij->ljk", self.Phi3T, D),
        }

    def curvatures(self) -> np.ndarray:
        """Diagonal Hessian entries ``a_ij`` for every coordinate, shape (m, n).

        ``a = 2 R_ii L_jj + 4 Re sum_k [Phi4_ii Phi1_jj + Phi3_ji Phi2_ji]``.
        """
        d4 = np.diagonal(self.Phi4T, axis1=0, axis2=1)   # (r, m)
        d1 = np.diagonal(self.Phi1T, axis1=0, axis2=1)   # (r, n)
        cross = np.einsum("ijk,ijk->ij", self.Phi3T, self.Phi2T)
        coupled = d4.T @ d1 + cross
        return 2.0 * np.outer(np.diag(self.R), np.diag(self.L)) + 4.0 * coupled.real

    def gradient(self, i: int, j: int) -> complex:
        """Complex-valued model derivative along ``e_i e_j^T`` at the current ``D``."""
        b = 2.0 * self.Phi0[j, i] + 2.0 * (self.Psi0[i] @ self.L[:, j])
        z = (
            np.sum(self.Psi1[j] * self.Phi4T[i])
            + np.sum(self.Psi2[i] * self.Phi1T[j])
            + np.sum(self.Psi3[j] * self.Phi3T[i])
            + np.sum(self.Psi4[j] * self.Phi2T[i])
        )
        return b + 2.0 * z

    def apply(self, i: int, j: int, mu: float):
        if mu == 0.0:
            return
        _sweep.apply_update(i, j, mu, self.D, self.R, self.Phi1T, self.Phi2T, self.Phi3T,
                            self.Phi4T, self.Psi0, self.Psi1, self.Psi2, self.Psi3, self.Psi4)

    def sweep(self, rows, cols, a, lam, kvals, backend: Optional[str] = None):
        """One coordinate pass; returns ``(sum mu^2, model change, skipped)``."""
        backend = backend or BACKEND
        rows = np.ascontiguousarray(rows, dtype=np.intp)
        cols = np.ascontiguousarray(cols, dtype=np.intp)
        a = np.ascontiguousarray(a, dtype=float)
        lam = np.ascontiguousarray(lam, dtype=float)
        kvals = np.ascontiguousarray(kvals, dtype=float)
        if backend == "compiled":
            if _cd_sweep_compiled is None:
                raise RuntimeError("compiled sweep extension is not built")
            f = lambda x: x.view(np.float64)  # noqa: E731
            return _cd_sweep_compiled(
                rows, cols, a, lam, kvals, self.D, self.L, self.R, self.Phi0,
                f(self.Phi1T), f(self.Phi2T), f(self.Phi3T), f(self.Phi4T),
                self.Psi0, f(self.Psi1), f(self.Psi2), f(self.Psi3), f(self.Psi4),
            )
        if backend != "python":
            raise ValueError(f"unknown backend {backend!r}")
        return _sweep.cd_sweep(
            rows, cols, a, lam, kvals, self.D, self.L, self.R, self.Phi0,
            self.Phi1T, self.Phi2T, self.Phi3T, self.Phi4T,
            self.Psi0, self.Psi1, self.Psi2, self.Psi3, self.Psi4,
        )


def _rank_last(T):
    return np.ascontiguousarray(np.moveaxis(T, 0, 2))


def build_spectral_cache(plant, cost, ev: Evaluation, theta_tol: float = 1e-8) -> CoordinateCache:
    """Factor the Cauchy matrix at ``ev.K`` and precompute the Phi products.

    Raises :class:`CacheBuildError` when the eigenvector matrix is singular
    or too ill-conditioned, or the Cauchy matrix is near singular.
    """
    if not ev.stable:
        raise ValueError("spectral cache needs a stabilizing gain")
    eig = ev.eig
    if eig is None or eig.Uinv is None or eig.condition_estimate > COND_LIMIT:
        cond = np.inf if eig is None else eig.condition_estimate
        raise CacheBuildError(f"eigenvector condition {cond:.2e} exceeds {COND_LIMIT:.0e}")
    try:
        theta = takagi_factor(eig.S, theta_tol)
    except NearSingularThetaError as exc:
        raise CacheBuildError(str(exc)) from exc

    U, Uinv = eig.U, eig.Uinv
    L, E, B = ev.L, ev.E, plant.B
    x = theta.X.T                      # (r, n); row k is x_k
    H = L @ Uinv.T                     # L U^{-T}
    GB = Uinv @ B                      # U^{-1} B
    UE = U.T @ E                       # U^T E
    Ut = np.ascontiguousarray(U.T)

    # (X_k L)^T = L U^{-T} diag(x_k) U^T
    Phi1T = (H[None, :, :] * x[:, None, :]) @ Ut
    # (X_k B)^T = B^T U^{-T} diag(x_k) U^T
    Phi2T = (GB.T[None, :, :] * x[:, None, :]) @ Ut
    # (L X_k^T E)^T = E^T U diag(x_k) U^{-1} L
    Phi3T = (UE.T[None, :, :] * x[:, None, :]) @ H.T
    # (B^T X_k^T E)^T = E^T U diag(x_k) U^{-1} B
    Phi4T = (UE.T[None, :, :] * x[:, None, :]) @ GB

    return CoordinateCache(
        L=np.ascontiguousarray(L),
        R=np.ascontiguousarray(cost.R),
        Phi0=np.ascontiguousarray(L @ E),
        Phi1T=_rank_last(Phi1T),
        Phi2T=_rank_last(Phi2T),
        Phi3T=_rank_last(Phi3T),
        Phi4T=_rank_last(Phi4T),
        theta=theta,
    )


def coordinate_quad(cache: CoordinateCache, ev: Evaluation, cost, K, i: int, j: int):
    """Model coefficients ``(a, b, c)`` for the coordinate ``(i, j)``.

    ``a`` is the Hessian diagonal entry, ``b`` the model derivative at the
    cached ``D`` and ``c = K_ij + D_ij``.
    """
    d4 = cache.Phi4T[i, i]
    d1 = cache.Phi1T[j, j]
    cross = cache.Phi3T[i, j] * cache.Phi2T[i, j]
    a = 2.0 * cost.R[i, i] * cache.L[j, j] + 4.0 * np.sum(d4 * d1 + cross)
    b = cache.gradient(i, j)
    for name, val in (("a", a), ("b", b)):
        if abs(val.imag) > 1e-8 * max(abs(val.real), 1.0):
            raise ArithmeticError(f"coordinate {name} has imaginary residue {val.imag:.3g}")
    c = float(np.asarray(K)[i, j] + cache.D[i, j])
    return float(a.real), float(b.real), c


def apply_coordinate(cache: CoordinateCache, i: int, j: int, mu: float):
    """``D_ij += mu`` with the matching Psi row/column updates."""
    cache.apply(i, j, mu)


@dataclass
class InnerResult:
    D: np.ndarray
    sweeps: int
    model_changes: list
    skipped: int
    failed: bool


def inner_solve(cache: CoordinateCache, ev: Evaluation, cost, K, active, options, t: int,
                *, curvatures=None, backend: Optional[str] = None) -> InnerResult:
    """Coordinate descent on the l1-regularized model over the active set.

    At outer iteration ``t`` this runs at most ``ceil(t/3)`` sweeps (or
    ``options.max_sweeps`` when set) and stops early once a sweep moves
    ``D`` by less than ``options.inner_rel_tol`` relative to ``1 + ||D||``.
    """
    cache.reset()
    rows = np.asarray(active.rows, dtype=np.intp)
    cols = np.asarray(active.cols, dtype=np.intp)
    if curvatures is None:
        curvatures = cache.curvatures()
    a = curvatures[rows, cols]
    if rows.size == 0 or not (a > 0).any():
        return InnerResult(cache.D.copy(), 0, [], int(rows.size), True)
    lam = cost.Lambda[rows, cols]
    kvals = np.asarray(K)[rows, cols]
    budget = options.max_sweeps if options.max_sweeps else max(1, math.ceil(t / 3))
    changes = []
    skipped = 0
    sweeps = 0
    for _ in range(budget):
        sum_mu2, delta, skipped = cache.sweep(rows, cols, a, lam, kvals, backend=backend)
        sweeps += 1
        changes.append(delta)
        if math.sqrt(sum_mu2) < options.inner_rel_tol * (1.0 + np.linalg.norm(cache.D)):
            break
    return InnerResult(cache.D.copy(), sweeps, changes, int(skipped), False)
