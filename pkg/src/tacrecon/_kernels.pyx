# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernels: fixed-order matvec, dual coordinate ascent, cyclic Jacobi.

Semantics mirror ``_fallback.py`` exactly; see that module for documentation.
"""
import numpy as np

from libc.math cimport fabs, sqrt, copysign, INFINITY


def matvec(const double[:, :] A, const double[:] x):
    cdef Py_ssize_t rows = A.shape[0], cols = A.shape[1], i, j
    out = np.zeros(rows)
    cdef double[:] y = out
    cdef double acc
    for i in range(rows):
        acc = 0.0
        for j in range(cols):
            acc = acc + A[i, j] * x[j]
        y[i] = acc
    return out


cdef double _resid(const double[:, :] V, const double[:] m, const double[:] sqnorm,
                   double[:] lam, double[:] u, double zero_tol) nogil:
    cdef Py_ssize_t n_con = V.shape[0], d = V.shape[1], j, c
    cdef double r = 0.0, dot, g
    for j in range(n_con):
        if sqnorm[j] < zero_tol:
            continue
        dot = 0.0
        for c in range(d):
            dot = dot + V[j, c] * u[c]
        g = dot - m[j]
        if lam[j] < g:
            g = lam[j]
        g = fabs(g)
        if g > r:
            r = g
    return r


def cd_sweeps(const double[:, :] V, const double[:] m, const double[:] sqnorm,
              double[:] lam, double[:] u, int n_sweeps, double tol, double zero_tol):
    cdef Py_ssize_t n_con = V.shape[0], d = V.shape[1], j, c
    cdef int done = 0, sweep
    cdef double dot, new, step, acc
    cdef double resid = INFINITY
    with nogil:
        for sweep in range(n_sweeps):
            for j in range(n_con):
                if sqnorm[j] < zero_tol:
                    continue
                dot = 0.0
                for c in range(d):
                    dot = dot + V[j, c] * u[c]
                new = lam[j] + (m[j] - dot) / sqnorm[j]
                if new < 0.0:
                    new = 0.0
                step = new - lam[j]
                if step != 0.0:
                    for c in range(d):
                        u[c] = u[c] + step * V[j, c]
                    lam[j] = new
            for c in range(d):
                acc = 0.0
                for j in range(n_con):
                    acc = acc + V[j, c] * lam[j]
                u[c] = acc
            done += 1
            resid = _resid(V, m, sqnorm, lam, u, zero_tol)
            if resid < tol:
                break
    return done, resid


def complementarity_residual(const double[:, :] V, const double[:] m, const double[:] sqnorm,
                             double[:] lam, double[:] u, double zero_tol):
    return _resid(V, m, sqnorm, lam, u, zero_tol)


def jacobi_sweeps(double[:, :] S, double[:, :] Q, int max_sweeps, double tol):
    cdef Py_ssize_t n = S.shape[0], p, q, k
    cdef int sweep, done = max_sweeps
    cdef double total = 0.0, off, apq, theta, t, c, s, a, b
    for p in range(n):
        for q in range(n):
            total = total + S[p, q] * S[p, q]
    total = sqrt(total)
    if total == 0.0 or n < 2:
        return 0
    with nogil:
        for sweep in range(max_sweeps):
            off = 0.0
            for p in range(n):
                for q in range(n):
                    if p != q:
                        off = off + S[p, q] * S[p, q]
            if sqrt(off) <= tol * total:
                done = sweep
                break
            for p in range(n - 1):
                for q in range(p + 1, n):
                    apq = S[p, q]
                    if fabs(apq) <= 1e-30 * (fabs(S[p, p]) + fabs(S[q, q])):
                        S[p, q] = 0.0
                        S[q, p] = 0.0
                        continue
                    theta = (S[q, q] - S[p, p]) / (2.0 * apq)
                    t = copysign(1.0, theta) / (fabs(theta) + sqrt(theta * theta + 1.0))
                    c = 1.0 / sqrt(t * t + 1.0)
                    s = t * c
                    for k in range(n):
                        a = S[k, p]
                        b = S[k, q]
                        S[k, p] = c * a - s * b
                        S[k, q] = s * a + c * b
                    for k in range(n):
                        a = S[p, k]
                        b = S[q, k]
                        S[p, k] = c * a - s * b
                        S[q, k] = s * a + c * b
                    S[p, q] = 0.0
                    S[q, p] = 0.0
                    for k in range(n):
                        a = Q[k, p]
                        b = Q[k, q]
                        Q[k, p] = c * a - s * b
                        Q[k, q] = s * a + c * b
    return done
