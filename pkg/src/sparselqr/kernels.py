"""Dense linear-algebra kernels: Lyapunov and Riccati solvers, Takagi factors.

Every Lyapunov equation that appears in the solver shares the closed-loop
matrix ``M = A + B K``, so the fast path diagonalizes ``M`` once and solves
entrywise in the eigenbasis.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.linalg

__all__ = [
    "Eigendecomposition",
    "ThetaFactors",
    "UnstableError",
    "SynthesisError",
    "NearSingularThetaError",
    "LyapunovFallbackWarning",
    "eigendecompose",
    "theta_matrix",
    "solve_lyapunov",
    "solve_lyapunov_oracle",
    "lqr_synthesize",
    "takagi_factor",
    "max_real_eig",
]

# eigenvector condition number beyond which the spectral path is abandoned
COND_LIMIT = 1e12
KRON_MAX_N = 64


class UnstableError(ValueError):
    """A matrix that must be Hurwitz has an eigenvalue with Re >= 0."""


class SynthesisError(RuntimeError):
    """No stabilizing Riccati solution could be extracted."""


class NearSingularThetaError(ArithmeticError):
    """Two eigenvalues sum to (nearly) zero, so the Cauchy matrix blows up."""


class LyapunovFallbackWarning(RuntimeWarning):
    pass


@dataclass(frozen=True, eq=False)
class Eigendecomposition:
    """``M = U diag(S) Uinv``. ``Uinv`` is None when ``U`` is singular."""

    U: np.ndarray
    S: np.ndarray
    Uinv: Optional[np.ndarray]
    condition_estimate: float

    @property
    def n(self) -> int:
        return self.S.shape[0]

    @property
    def max_real(self) -> float:
        return float(self.S.real.max()) if self.n else -np.inf

    def transpose(self) -> "Eigendecomposition":
        """Decomposition of ``M^T`` (same eigenvalues, ``U -> Uinv^T``)."""
        if self.Uinv is None:
            raise np.linalg.LinAlgError("eigenvector matrix is singular")
        return Eigendecomposition(self.Uinv.T, self.S, self.U.T, self.condition_estimate)


@dataclass(frozen=True, eq=False)
class ThetaFactors:
    """Low-rank symmetric factor ``Theta ~= X X^T`` (plain transpose)."""

    X: np.ndarray
    r: int
    tolerance_used: float
    singular_values: np.ndarray


def eigendecompose(M: np.ndarray) -> Eigendecomposition:
    M = np.asarray(M, dtype=float)
    S, U = np.linalg.eig(M)
    S = S.astype(complex)
    U = U.astype(complex)
    try:
        Uinv = np.linalg.inv(U)
    except np.linalg.LinAlgError:
        return Eigendecomposition(U, S, None, np.inf)
    cond = np.linalg.norm(U, 1) * np.linalg.norm(Uinv, 1)
    if not np.isfinite(cond):
        cond = np.inf
    return Eigendecomposition(U, S, Uinv, float(cond))


def max_real_eig(M: np.ndarray) -> float:
    """Spectral abscissa: largest real part over the eigenvalues of ``M``."""
    M = np.asarray(M, dtype=float)
    if M.size == 0:
        return -np.inf
    return float(np.linalg.eigvals(M).real.max())


def theta_matrix(S: np.ndarray) -> np.ndarray:
    """Cauchy matrix ``Theta_ij = -1 / (S_i + S_j)``."""
    S = np.asarray(S, dtype=complex)
    return -1.0 / (S[:, None] + S[None, :])


def _spectral_solve(eig: Eigendecomposition, C: np.ndarray, theta: np.ndarray) -> np.ndarray:
    Ct = eig.Uinv @ C @ eig.Uinv.T
    Z = eig.U @ (Ct * theta) @ eig.U.T
    Z = Z.real
    return (Z + Z.T) / 2


def _residual(M, Z, C):
    return M @ Z + Z @ M.T + C


def solve_lyapunov(M, C, *, eig: Optional[Eigendecomposition] = None, full_output: bool = False):
    """Solve ``M Z + Z M^T + C = 0`` for symmetric ``Z``.

    Parameters
    ----------
    M : (n, n) array, Hurwitz
    C : (n, n) symmetric array
    eig : Eigendecomposition of ``M``, optional
        Reused when given; otherwise computed here.
    full_output : bool
        Also return an info dict with the ``method`` used and the relative
        residual.

    When the eigenvectors are too ill-conditioned for the spectral path the
    solve falls back to the Kronecker system (``n <= 64``) or to a Schur
    based Bartels-Stewart solve, and emits :class:`LyapunovFallbackWarning`.
    """
    M = np.asarray(M, dtype=float)
    C = np.asarray(C, dtype=float)
    n = M.shape[0]
    if eig is None:
        eig = eigendecompose(M)
    if n and eig.max_real >= 0:
        raise UnstableError(f"matrix is not Hurwitz (max real eigenvalue {eig.max_real:.3g})")
    if n == 0:
        Z = np.zeros((0, 0))
        return (Z, {"method": "spectral", "residual": 0.0}) if full_output else Z

    scale_C = np.linalg.norm(C)
    if eig.Uinv is not None and eig.condition_estimate <= COND_LIMIT:
        method = "spectral"
        theta = theta_matrix(eig.S)
        Z = _spectral_solve(eig, C, theta)
        for _ in range(2):
            res = _residual(M, Z, C)
            scale = np.linalg.norm(M) * np.linalg.norm(Z) + scale_C
            if np.linalg.norm(res) <= 1e-13 * scale:
                break
            Z = Z + _spectral_solve(eig, res, theta)
    else:
        if n <= KRON_MAX_N:
            method = "kronecker"
            Z = solve_lyapunov_oracle(M, C)
        else:
            method = "bartels-stewart"
            Z = scipy.linalg.solve_continuous_lyapunov(M, -C)
            Z = (Z + Z.T) / 2
        warnings.warn(
            f"eigenvector condition {eig.condition_estimate:.2e} too large; used {method}",
            LyapunovFallbackWarning,
            stacklevel=2,
        )
    if not full_output:
        return Z
    res = np.linalg.norm(_residual(M, Z, C))
    denom = np.linalg.norm(M) * np.linalg.norm(Z) + scale_C
    return Z, {"method": method, "residual": res / denom if denom else res}


def solve_lyapunov_oracle(M, C) -> np.ndarray:
    """Reference solve through the ``n^2 x n^2`` Kronecker system."""
    M = np.asarray(M, dtype=float)
    C = np.asarray(C, dtype=float)
    n = M.shape[0]
    if n > KRON_MAX_N:
        raise ValueError(f"Kronecker oracle refuses n={n} > {KRON_MAX_N}")
    if n and max_real_eig(M) >= 0:
        raise UnstableError("matrix is not Hurwitz")
    I = np.eye(n)
    big = np.kron(I, M) + np.kron(M, I)
    z = np.linalg.solve(big, -C.reshape(-1, order="F"))
    Z = z.reshape((n, n), order="F")
    return (Z + Z.T) / 2


def lqr_synthesize(plant, cost):
    """Stabilizing CARE solution via the ordered Hamiltonian Schur form.

    Returns ``(Gain, P)`` with ``K = -R^{-1} B^T P``.
    """
    from .model import Gain

    A, B = plant.A, plant.B
    Q, R = cost.Q, cost.R
    n = A.shape[0]
    G = B @ np.linalg.solve(R, B.T)
    H = np.block([[A, -G], [-Q, -A.T]])
    T, Z, sdim = scipy.linalg.schur(H, output="real", sort="lhp")
    if sdim != n:
        raise SynthesisError(
            f"Hamiltonian has {sdim} stable eigenvalues, expected {n} "
            "(eigenvalues on the imaginary axis: not stabilizable/detectable?)"
        )
    X1, X2 = Z[:n, :n], Z[n:, :n]
    if np.linalg.cond(X1) > 1e14:
        raise SynthesisError("stable invariant subspace is not a graph (X1 singular)")
    P = np.linalg.solve(X1.T, X2.T).T
    P = (P + P.T) / 2
    K = -np.linalg.solve(R, B.T @ P)
    # one Newton-Kleinman polish from the stabilizing gain tightens the residual
    Acl = A + B @ K
    if max_real_eig(Acl) < 0:
        P_nk = solve_lyapunov(Acl.T, Q + K.T @ R @ K)
        K_nk = -np.linalg.solve(R, B.T @ P_nk)
        if max_real_eig(A + B @ K_nk) < 0 and (
            _care_residual(A, B, Q, R, P_nk) <= _care_residual(A, B, Q, R, P)
        ):
            P, K = P_nk, K_nk
    gain = Gain.for_plant(plant, K)
    if not gain.stable:
        raise SynthesisError("Riccati solution does not stabilize the closed loop")
    return gain, P


def _care_residual(A, B, Q, R, P):
    return np.linalg.norm(A.T @ P + P @ A - P @ B @ np.linalg.solve(R, B.T @ P) + Q)


def takagi_factor(S, tolerance: float = 1e-8) -> ThetaFactors:
    """Symmetric low-rank factorization ``Theta = X X^T`` of the Cauchy matrix.

    ``Theta_ij = -1/(S_i + S_j)`` is complex symmetric. Its Takagi vectors
    (``Theta conj(u) = sigma u``) are read off the eigenvectors of the real
    symmetric embedding ``[[Re, Im], [Im, -Re]]``, whose spectrum is
    ``+-sigma``; this stays well defined for repeated singular values.
    The rank is the smallest ``r`` whose discarded tail satisfies
    ``||Theta - X X^T||_F <= tolerance * ||Theta||_F``.
    """
    S = np.asarray(S, dtype=complex).ravel()
    n = S.shape[0]
    if n and S.real.max() >= 0:
        raise UnstableError("Cauchy factorization needs all eigenvalues in the open left half plane")
    denom = S[:, None] + S[None, :]
    if n and np.abs(denom).min() < 1e-14 * np.abs(S).max():
        raise NearSingularThetaError("eigenvalues too close to the imaginary axis")
    theta = -1.0 / denom
    re, im = theta.real, theta.imag
    emb = np.block([[re, im], [im, -re]])
    w, V = np.linalg.eigh(emb)
    order = np.argsort(w)[::-1][:n]
    sig = np.clip(w[order], 0.0, None)
    V = V[:, order]
    # eigenvector [x; -y] gives Theta u = sigma conj(u) for u = x + iy; the
    # Takagi column is conj(u) = x - iy
    U = V[:n, :] + 1j * V[n:, :]

    total = np.sqrt(np.sum(sig ** 2))
    # tail[k] = ||sig[k:]||
    tail = np.sqrt(np.cumsum((sig ** 2)[::-1])[::-1])
    tail = np.append(tail, 0.0)
    r = int(np.argmax(tail <= tolerance * total)) if total > 0 else 0
    r = min(r, int(np.count_nonzero(sig > 0)))
    X = U[:, :r] * np.sqrt(sig[:r])
    return ThetaFactors(X, r, float(tolerance), sig)
