"""Pure-Python coordinate sweep. Mirrors ``_sweep_ext.pyx`` operation for
operation; used when the compiled extension is unavailable or disabled.
"""
import math

import numpy as np


def coordinate_step(a, b, c, lam):
    """Minimizer ``mu`` of ``a/2 mu^2 + b mu + lam |c + mu|``."""
    if not a > 0:
        raise ValueError(f"coordinate curvature must be positive, got {a}")
    if math.isinf(lam):
        return -c
    z = c - b / a
    thr = lam / a
    if z > thr:
        return -c + z - thr
    if z < -thr:
        return -c + z + thr
    return -c


def coordinate_gradient(i, j, L, Phi0, Phi1T, Phi2T, Phi3T, Phi4T, Psi0, Psi1, Psi2, Psi3, Psi4):
    """Derivative of the quadratic model along ``e_i e_j^T`` at the cached ``D``."""
    b = 2.0 * Phi0[j, i] + 2.0 * float(Psi0[i] @ L[:, j])
    z = (
        np.sum(Psi1[j] * Phi4T[i])
        + np.sum(Psi2[i] * Phi1T[j])
        + np.sum(Psi3[j] * Phi3T[i])
        + np.sum(Psi4[j] * Phi2T[i])
    )
    return b + 2.0 * z.real


def apply_update(i, j, mu, D, R, Phi1T, Phi2T, Phi3T, Phi4T, Psi0, Psi1, Psi2, Psi3, Psi4):
    D[i, j] += mu
    Psi0[:, j] += mu * R[:, i]
    Psi1[:, i] += mu * Phi1T[j]
    Psi2[:, j] += mu * Phi4T[i]
    Psi3[:, j] += mu * Phi2T[i]
    Psi4[:, j] += mu * Phi3T[i]


def cd_sweep(rows, cols, a, lam, kvals, D, L, R, Phi0,
             Phi1T, Phi2T, Phi3T, Phi4T, Psi0, Psi1, Psi2, Psi3, Psi4):
    """One pass over the listed coordinates, updating ``D`` and ``Psi*`` in place.

    Returns ``(sum of squared steps, change in model objective, skipped)``.
    """
    sum_mu2 = 0.0
    delta = 0.0
    skipped = 0
    for t in range(len(rows)):
        i, j = int(rows[t]), int(cols[t])
        at = a[t]
        if at <= 0:
            skipped += 1
            continue
        b = coordinate_gradient(i, j, L, Phi0, Phi1T, Phi2T, Phi3T, Phi4T,
                                Psi0, Psi1, Psi2, Psi3, Psi4)
        c = kvals[t] + D[i, j]
        lt = lam[t]
        mu = coordinate_step(at, b, c, lt)
        if mu == 0.0:
            continue
        delta += 0.5 * at * mu * mu + b * mu
        if not math.isinf(lt):
            delta += lt * (abs(c + mu) - abs(c))
        sum_mu2 += mu * mu
        apply_update(i, j, mu, D, R, Phi1T, Phi2T, Phi3T, Phi4T,
                     Psi0, Psi1, Psi2, Psi3, Psi4)
    return sum_mu2, delta, skipped
