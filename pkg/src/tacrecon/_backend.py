"""Kernel selection: compiled extension when importable, numpy fallback otherwise.

Set ``TACRECON_PURE_PYTHON=1`` to force the fallback (useful for benchmarks
and for cross-checking the two implementations).
"""
import os

from tacrecon import _fallback

if os.environ.get("TACRECON_PURE_PYTHON", "") not in ("", "0"):
    _impl = _fallback
    BACKEND = "python"
else:
    try:
        from tacrecon import _kernels as _impl
        BACKEND = "cython"
    except ImportError:
        _impl = _fallback
        BACKEND = "python"

matvec = _impl.matvec
cd_sweeps = _impl.cd_sweeps
complementarity_residual = _impl.complementarity_residual
jacobi_sweeps = _impl.jacobi_sweeps
