# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled coordinate sweep.

Complex cache arrays arrive as float64 views with an interleaved trailing
axis (``re, im`` pairs). Steps ``mu`` are real, so every update scales both
halves and every model term needs only ``Re(sum psi * phi)``.
"""
from libc.math cimport fabs, isinf


cdef inline double _step(double a, double b, double c, double lam) noexcept nogil:
    cdef double z, thr
    if isinf(lam):
        return -c
    z = c - b / a
    thr = lam / a
    if z > thr:
        return -c + z - thr
    if z < -thr:
        return -c + z + thr
    return -c


cdef inline double _dot_re(const double* x, const double* y, Py_ssize_t length) noexcept nogil:
    cdef Py_ssize_t l
    cdef double acc = 0.0
    for l in range(length):
        acc += x[2 * l] * y[2 * l] - x[2 * l + 1] * y[2 * l + 1]
    return acc


cdef inline void _axpy(double mu, const double* x, double* y, Py_ssize_t length) noexcept nogil:
    cdef Py_ssize_t l
    for l in range(2 * length):
        y[l] += mu * x[l]


def cd_sweep(const Py_ssize_t[::1] rows, const Py_ssize_t[::1] cols,
             const double[::1] a, const double[::1] lam, const double[::1] kvals,
             double[:, ::1] D, const double[:, ::1] L, const double[:, ::1] R,
             const double[:, ::1] Phi0,
             const double[:, :, ::1] Phi1T, const double[:, :, ::1] Phi2T,
             const double[:, :, ::1] Phi3T, const double[:, :, ::1] Phi4T,
             double[:, ::1] Psi0, double[:, :, ::1] Psi1, double[:, :, ::1] Psi2,
             double[:, :, ::1] Psi3, double[:, :, ::1] Psi4):
    cdef Py_ssize_t n = L.shape[0]
    cdef Py_ssize_t m = R.shape[0]
    cdef Py_ssize_t r = Phi1T.shape[2] // 2
    cdef Py_ssize_t ncoord = rows.shape[0]
    cdef Py_ssize_t t, i, j, l
    cdef double at, b, c, z, mu, lt
    cdef double sum_mu2 = 0.0, delta = 0.0
    cdef long skipped = 0

    with nogil:
        for t in range(ncoord):
            i = rows[t]
            j = cols[t]
            at = a[t]
            if at <= 0:
                skipped += 1
                continue
            b = 2.0 * Phi0[j, i]
            for l in range(n):
                b += 2.0 * Psi0[i, l] * L[j, l]
            z = _dot_re(&Psi1[j, 0, 0], &Phi4T[i, 0, 0], m * r)
            z += _dot_re(&Psi2[i, 0, 0], &Phi1T[j, 0, 0], n * r)
            z += _dot_re(&Psi3[j, 0, 0], &Phi3T[i, 0, 0], n * r)
            z += _dot_re(&Psi4[j, 0, 0], &Phi2T[i, 0, 0], n * r)
            b += 2.0 * z

            c = kvals[t] + D[i, j]
            lt = lam[t]
            mu = _step(at, b, c, lt)
            if mu == 0.0:
                continue
            delta += 0.5 * at * mu * mu + b * mu
            if not isinf(lt):
                delta += lt * (fabs(c + mu) - fabs(c))
            sum_mu2 += mu * mu

            D[i, j] += mu
            for l in range(m):
                Psi0[l, j] += mu * R[l, i]
            for l in range(n):
                _axpy(mu, &Phi1T[j, l, 0], &Psi1[l, i, 0], r)
                _axpy(mu, &Phi2T[i, l, 0], &Psi3[l, j, 0], r)
                _axpy(mu, &Phi3T[i, l, 0], &Psi4[l, j, 0], r)
            for l in range(m):
                _axpy(mu, &Phi4T[i, l, 0], &Psi2[l, j, 0], r)
    return sum_mu2, delta, skipped
