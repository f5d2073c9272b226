"""Compare the compiled kernels with the pure-Python fallback.

    python3 benchmarks/bench_kernels.py [--repeat N]

Kernel rows time each implementation directly. The end-to-end row runs the
ten-class perturbation solve in a subprocess per backend, switching with
TACRECON_PURE_PYTHON.
"""
import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from tacrecon import _fallback
from tacrecon.core import make_rng

try:
    from tacrecon import _kernels
except ImportError:
    _kernels = None

SOLVE_SNIPPET = """
import time
import numpy as np
from tacrecon import _backend
from tacrecon.core import make_rng
from tacrecon.qp import FinalLayer, perturbations_for_all_classes
rng = make_rng(0, "bench")
layer = FinalLayer(rng.standard_normal((32, 10)), np.zeros(10))
X = rng.standard_normal((200, 32))
t = time.perf_counter()
for _ in range({repeat}):
    perturbations_for_all_classes(X, layer)
print(_backend.BACKEND, (time.perf_counter() - t) / {repeat})
"""


def cases(rng):
    A = rng.standard_normal((64, 64))
    x = rng.standard_normal(64)
    V = rng.standard_normal((9, 32))
    m = rng.standard_normal(9) + 1.0
    sq = np.einsum("ij,ij->i", V, V)
    M = rng.standard_normal((24, 24))
    S = M + M.T

    def cd(mod):
        lam, u = np.zeros(9), np.zeros(32)
        mod.cd_sweeps(V, m, sq, lam, u, 200, 1e-12, 1e-14)

    def jac(mod):
        mod.jacobi_sweeps(S.copy(), np.eye(24), 100, 1e-13)

    return [
        ("matvec 64x64", lambda mod: mod.matvec(A, x)),
        ("dual sweeps 9x32", cd),
        ("jacobi 24x24", jac),
    ]


def time_call(fn, repeat):
    n, _ = timeit.Timer(fn).autorange()
    return min(timeit.Timer(fn).repeat(repeat, n)) / n


def end_to_end(repeat):
    out = {}
    for flag in ("0", "1"):
        env = dict(os.environ, TACRECON_PURE_PYTHON=flag)
        res = subprocess.run([sys.executable, "-c", SOLVE_SNIPPET.format(repeat=repeat)],
                             env=env, capture_output=True, text=True, check=True)
        name, secs = res.stdout.split()
        out[name] = float(secs)
    return out


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    rng = make_rng(0, "bench")
    print(f"{'kernel':<22}{'cython':>14}{'python':>14}{'speedup':>10}")
    for name, fn in cases(rng):
        t_py = time_call(lambda: fn(_fallback), args.repeat)
        if _kernels is None:
            print(f"{name:<22}{'n/a':>14}{t_py * 1e6:>12.1f}us{'':>10}")
            continue
        t_cy = time_call(lambda: fn(_kernels), args.repeat)
        print(f"{name:<22}{t_cy * 1e6:>12.1f}us{t_py * 1e6:>12.1f}us{t_py / t_cy:>9.1f}x")
    e2e = end_to_end(args.repeat)
    cy, py = e2e.get("cython"), e2e["python"]
    if cy:
        print(f"{'10-class solve':<22}{cy * 1e3:>12.1f}ms{py * 1e3:>12.1f}ms{py / cy:>9.1f}x")
    else:
        print(f"{'10-class solve':<22}{'n/a':>14}{py * 1e3:>12.1f}ms")


if __name__ == "__main__":
    main()
