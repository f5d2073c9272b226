"""Dense linear algebra, randomness and small numerical helpers.

Matrices and vectors are plain ``float64`` numpy arrays (row-major). The
routines here that must be reproducible across runs (``matvec``, the Jacobi
eigensolver) run in the compiled kernel when available and use a fixed
left-to-right accumulation order in both backends.
"""
from __future__ import annotations

import zlib
from typing import NamedTuple

import numpy as np

from tacrecon import _backend

LIPSCHITZ_SAFETY = 1.01
RANK_TOL = 1e-10


class ContractError(ValueError):
    """Raised when an operation is called with inputs violating its preconditions."""


class SpectralEstimate(NamedTuple):
    value: float
    converged: bool
    iterations: int


def as_matrix(A) -> np.ndarray:
    A = np.ascontiguousarray(A, dtype=np.float64)
    if A.ndim != 2:
        raise ContractError(f"expected a 2-d matrix, got shape {A.shape}")
    return A


def as_vector(x) -> np.ndarray:
    x = np.ascontiguousarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ContractError(f"expected a 1-d vector, got shape {x.shape}")
    return x


def matvec(A, x) -> np.ndarray:
    """Matrix-vector product, each row summed left to right over the columns."""
    A = as_matrix(A)
    x = as_vector(x)
    if A.shape[1] != x.shape[0]:
        raise ContractError(f"dimension mismatch: A is {A.shape}, x has length {x.shape[0]}")
    return _backend.matvec(A, x)


def make_rng(seed: int, stream: str | None = None) -> np.random.Generator:
    """Counter-based (Philox) generator for ``seed``, optionally on a named sub-stream.

    Named streams let independent consumers (initialisation, shuffling,
    sampling) draw from the same seed without disturbing one another.
    """
    if stream is None:
        ss = np.random.SeedSequence(int(seed))
    else:
        ss = np.random.SeedSequence(int(seed), spawn_key=(zlib.crc32(stream.encode()),))
    return np.random.Generator(np.random.Philox(ss))


def jacobi_eigh(S, tol: float = 1e-13, max_sweeps: int = 100) -> tuple[np.ndarray, np.ndarray]:
    """Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.

    Returns ``(eigenvalues, eigenvectors)`` with eigenvalues sorted in
    descending order and eigenvectors as columns.
    """
    S = as_matrix(S)
    if S.shape[0] != S.shape[1]:
        raise ContractError(f"jacobi_eigh needs a square matrix, got {S.shape}")
    work = np.array(0.5 * (S + S.T), order="C")
    Q = np.eye(S.shape[0])
    _backend.jacobi_sweeps(work, Q, max_sweeps, tol)
    vals = np.diag(work).copy()
    order = np.argsort(-vals, kind="stable")
    return vals[order], np.ascontiguousarray(Q[:, order])


def spectral_norm_sq(A, iters: int = 10_000, tol: float = 1e-14) -> SpectralEstimate:
    """Estimate ``||A||_2**2`` by power iteration on the smaller Gram matrix.

    Stops once the Rayleigh quotient changes by less than ``tol`` relative.
    Multiply by ``LIPSCHITZ_SAFETY`` before using the value as a Lipschitz
    constant; on exit the estimate is at least ``(1 - 10 * tol)`` times the
    true value whenever ``converged`` is set (best effort otherwise).
    """
    A = as_matrix(A)
    if A.size == 0:
        raise ContractError("spectral_norm_sq needs a nonempty matrix")
    G = A @ A.T if A.shape[0] <= A.shape[1] else A.T @ A
    n = G.shape[0]
    if not np.any(G):
        return SpectralEstimate(0.0, True, 0)
    x = make_rng(0, "power-iteration").standard_normal(n)
    x /= np.linalg.norm(x)
    est = 0.0
    for it in range(1, iters + 1):
        y = matvec(G, x)
        ny = np.linalg.norm(y)
        if ny == 0.0:
            # start vector landed in the null space; any other direction works
            x = np.roll(x, 1) + 1.0 / np.sqrt(n)
            x /= np.linalg.norm(x)
            continue
        new = float(x @ y)
        x = y / ny
        if abs(new - est) <= tol * abs(new):
            return SpectralEstimate(new, True, it)
        est = new
    return SpectralEstimate(est, False, iters)


def lipschitz_constant(A) -> float:
    return LIPSCHITZ_SAFETY * spectral_norm_sq(A).value


def singular_values(A) -> np.ndarray:
    """Singular values of ``A`` (descending) from the Jacobi eigenvalues of ``A A^T``."""
    A = as_matrix(A)
    vals, _ = jacobi_eigh(A @ A.T)
    return np.sqrt(np.clip(vals, 0.0, None))


def row_rank(A, tol: float = RANK_TOL) -> int:
    """Number of singular values above ``tol`` times the largest one.

    Going through the Gram matrix squares the conditioning, so eigenvalues
    of ``A A^T`` below its own round-off floor (``rows * eps * largest``)
    are treated as zero as well.
    """
    A = as_matrix(A)
    if A.size == 0:
        raise ContractError("row_rank needs a nonempty matrix")
    vals, _ = jacobi_eigh(A @ A.T)
    top = vals[0]
    if top <= 0.0:
        return 0
    floor = A.shape[0] * np.finfo(float).eps * top
    sv = np.sqrt(np.clip(vals, 0.0, None))
    return int(np.sum((sv > tol * sv[0]) & (vals > floor)))
