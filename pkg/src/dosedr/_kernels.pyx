# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled inner loops for kernel-window sums.

Every routine here has a numpy twin in ``_kernels_py`` with identical
semantics; ``dosedr._backend`` picks one at import time.
"""
import numpy as np

from libc.math cimport exp, fabs, sqrt

cdef double INV_SQRT_2PI = 0.3989422804014327


cdef inline double _kernel(double u, int kind) noexcept nogil:
    if kind == 0:
        if fabs(u) <= 1.0:
            return 0.75 * (1.0 - u * u)
        return 0.0
    elif kind == 1:
        if fabs(u) <= 1.0:
            return 0.5
        return 0.0
    return INV_SQRT_2PI * exp(-0.5 * u * u)


cdef inline Py_ssize_t _lower(const double[::1] x, double v) noexcept nogil:
    # first index with x[i] >= v
    cdef Py_ssize_t lo = 0, hi = x.shape[0], mid
    while lo < hi:
        mid = (lo + hi) >> 1
        if x[mid] < v:
            lo = mid + 1
        else:
            hi = mid
    return lo


cdef inline Py_ssize_t _upper(const double[::1] x, double v) noexcept nogil:
    # first index with x[i] > v
    cdef Py_ssize_t lo = 0, hi = x.shape[0], mid
    while lo < hi:
        mid = (lo + hi) >> 1
        if x[mid] <= v:
            lo = mid + 1
        else:
            hi = mid
    return lo


def window_moments(const double[::1] x, const double[::1] y,
                   const double[::1] centers, double h, int kind, double radius):
    """Kernel-weighted sums around each center.

    ``x`` must be sorted ascending. Returns an ``(m, 6)`` array with columns
    S0, S1, S2, T0, T1, count where ``k = K(u)/h``, ``u = (x - c)/h`` and
    ``S_r = sum k u^r``, ``T_r = sum k u^r y``.
    """
    cdef Py_ssize_t m = centers.shape[0]
    out = np.zeros((m, 6), dtype=np.float64)
    cdef double[:, ::1] o = out
    cdef Py_ssize_t i, j, lo, hi
    cdef double c, u, k, s0, s1, s2, t0, t1, cnt
    cdef double inv_h = 1.0 / h
    with nogil:
        for i in range(m):
            c = centers[i]
            lo = _lower(x, c - radius * h)
            hi = _upper(x, c + radius * h)
            s0 = 0.0; s1 = 0.0; s2 = 0.0; t0 = 0.0; t1 = 0.0; cnt = 0.0
            for j in range(lo, hi):
                u = (x[j] - c) * inv_h
                k = _kernel(u, kind) * inv_h
                if k > 0.0:
                    s0 += k
                    s1 += k * u
                    s2 += k * u * u
                    t0 += k * y[j]
                    t1 += k * u * y[j]
                    cnt += 1.0
            o[i, 0] = s0; o[i, 1] = s1; o[i, 2] = s2
            o[i, 3] = t0; o[i, 4] = t1; o[i, 5] = cnt
    return out


def self_moments(const double[::1] x, const double[::1] y, double h, int kind, double radius):
    """``window_moments(x, y, x, ...)`` using each symmetric pair once."""
    cdef Py_ssize_t n = x.shape[0]
    cdef double[::1] s0 = np.zeros(n), s1 = np.zeros(n), s2 = np.zeros(n)
    cdef double[::1] t0 = np.zeros(n), t1 = np.zeros(n), cnt = np.zeros(n)
    cdef Py_ssize_t i, j, hi
    cdef double u, k, ku, kuu, xi, yi, yj, reach
    cdef double a0, a1, a2, b0, b1, c
    cdef double inv_h = 1.0 / h
    cdef double k0 = _kernel(0.0, kind) * inv_h
    with nogil:
        hi = 0
        for i in range(n):
            xi = x[i]
            yi = y[i]
            reach = xi + radius * h
            if hi < i + 1:
                hi = i + 1
            while hi < n and x[hi] <= reach:
                hi += 1
            # row i accumulates in registers, partners j > i in memory
            a0 = k0; a1 = 0.0; a2 = 0.0; b0 = k0 * yi; b1 = 0.0; c = 1.0
            for j in range(i + 1, hi):
                u = (x[j] - xi) * inv_h
                k = _kernel(u, kind) * inv_h
                if k > 0.0:
                    ku = k * u
                    kuu = ku * u
                    yj = y[j]
                    a0 += k; a1 += ku; a2 += kuu
                    b0 += k * yj; b1 += ku * yj; c += 1.0
                    s0[j] += k; s1[j] -= ku; s2[j] += kuu
                    t0[j] += k * yi; t1[j] -= ku * yi; cnt[j] += 1.0
            s0[i] += a0; s1[i] += a1; s2[i] += a2
            t0[i] += b0; t1[i] += b1; cnt[i] += c
    return np.column_stack([s0, s1, s2, t0, t1, cnt])


def gauss_average_density(const double[::1] a, const double[::1] means, double sd):
    """Mean over ``means`` of the N(mean, sd^2) density at each ``a``."""
    cdef Py_ssize_t m = a.shape[0], r = means.shape[0]
    out = np.empty(m, dtype=np.float64)
    cdef double[::1] o = out
    cdef Py_ssize_t i, j
    cdef double acc, z
    cdef double inv_sd = 1.0 / sd
    cdef double norm = INV_SQRT_2PI * inv_sd / r
    with nogil:
        for i in range(m):
            acc = 0.0
            for j in range(r):
                z = (a[i] - means[j]) * inv_sd
                acc += exp(-0.5 * z * z)
            o[i] = acc * norm
    return out
