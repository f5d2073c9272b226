"""Pure-Python/numpy versions of the compiled kernels in ``_kernels.pyx``.

Both modules expose the same functions with the same in-place semantics, so
``tacrecon._backend`` can pick either one at import time.
"""
import math

import numpy as np


def matvec(A, x):
    # row i accumulates A[i, 0] * x[0] + A[i, 1] * x[1] + ... left to right,
    # the same order as the compiled loop
    rows, cols = A.shape
    y = np.zeros(rows)
    for j in range(cols):
        y += A[:, j] * x[j]
    return y


def cd_sweeps(V, m, sqnorm, lam, u, n_sweeps, tol, zero_tol):
    """Run up to ``n_sweeps`` cyclic projected coordinate-ascent sweeps.

    ``lam`` and ``u`` (= V.T @ lam) are updated in place. Returns
    ``(sweeps_done, residual)`` where residual is the complementarity measure
    after the last sweep.
    """
    n_con = V.shape[0]
    resid = math.inf
    done = 0
    for _ in range(n_sweeps):
        for j in range(n_con):
            if sqnorm[j] < zero_tol:
                continue
            vj = V[j]
            new = lam[j] + (m[j] - float(vj @ u)) / sqnorm[j]
            if new < 0.0:
                new = 0.0
            step = new - lam[j]
            if step != 0.0:
                u += step * vj
                lam[j] = new
        # refresh u from scratch so incremental drift never accumulates
        u[:] = matvec(V.T, lam)
        done += 1
        resid = complementarity_residual(V, m, sqnorm, lam, u, zero_tol)
        if resid < tol:
            break
    return done, resid


def complementarity_residual(V, m, sqnorm, lam, u, zero_tol):
    resid = 0.0
    for j in range(V.shape[0]):
        if sqnorm[j] < zero_tol:
            continue
        r = abs(min(lam[j], float(V[j] @ u) - m[j]))
        if r > resid:
            resid = r
    return resid


NEGLIGIBLE = 1e-30


def jacobi_sweeps(S, Q, max_sweeps, tol):
    """Cyclic Jacobi rotations on symmetric ``S`` (in place), accumulating into ``Q``.

    Stops when the off-diagonal Frobenius norm drops below ``tol`` times the
    full Frobenius norm. Returns the number of sweeps performed.
    """
    n = S.shape[0]
    total = math.sqrt(float(np.sum(S * S)))
    if total == 0.0 or n < 2:
        return 0
    for sweep in range(max_sweeps):
        off = math.sqrt(max(float(np.sum(S * S) - np.sum(np.diag(S) ** 2)), 0.0))
        if off <= tol * total:
            return sweep
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = S[p, q]
                if abs(apq) <= NEGLIGIBLE * (abs(S[p, p]) + abs(S[q, q])):
                    # below round-off of the diagonal; rotating would only overflow theta
                    S[p, q] = 0.0
                    S[q, p] = 0.0
                    continue
                theta = (S[q, q] - S[p, p]) / (2.0 * apq)
                t = math.copysign(1.0, theta) / (abs(theta) + math.sqrt(theta * theta + 1.0))
                c = 1.0 / math.sqrt(t * t + 1.0)
                s = t * c
                sp = S[:, p].copy()
                sq = S[:, q].copy()
                S[:, p] = c * sp - s * sq
                S[:, q] = s * sp + c * sq
                rp = S[p, :].copy()
                rq = S[q, :].copy()
                S[p, :] = c * rp - s * rq
                S[q, :] = s * rp + c * rq
                S[p, q] = 0.0
                S[q, p] = 0.0
                qp_ = Q[:, p].copy()
                qq = Q[:, q].copy()
                Q[:, p] = c * qp_ - s * qq
                Q[:, q] = s * qp_ + c * qq
    return max_sweeps
