"""Compare the numba kernels against the pure-numpy fallback.

Both code paths are always importable, so this script passes ``backend=``
explicitly instead of relying on FASTSUM_DISABLE_NUMBA.  Each kernel is run
once untimed to trigger compilation, then timed as the best of ``--repeat``.

    python3 benchmarks/bench_backends.py [--repeat 3] [--quick]
"""

import argparse
import time

import numpy as np

from fastsum import fgt, fmm
from fastsum._backend import HAVE_NUMBA
from fastsum.cli import synthetic_expansions
from fastsum.core import DatasetSpec, generate_dataset


def best_of(fn, repeat):
    fn()  # warm-up / JIT
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return min(times), out


def cases(quick):
    n = 2048 if quick else 8192
    ps = generate_dataset(DatasetSpec(n, 2, 1))
    level = 3 if quick else 4
    mes = synthetic_expansions(level, 16, seed=1)
    plan = fmm.idealized_plan(level)
    fcfg = fmm.FmmConfig(p=12, level=level + 1)
    gcfg = fgt.FgtConfig(sigma=0.1, p=9)
    return [
        (f"m2l_batch p=16 x{len(plan)}",
         lambda b: fmm.m2l_batch(plan, mes, p=16, backend=b)[0].coeffs),
        (f"fmm_evaluate N={n}", lambda b: fmm.fmm_evaluate(ps.z, ps.q, fcfg, backend=b)[0]),
        (f"direct_sum N={n}", lambda b: fmm.direct_sum(ps.z, ps.q, backend=b)),
        (f"fgt_evaluate N={n}", lambda b: fgt.fgt_evaluate(ps.x, ps.q, ps.x, gcfg, backend=b)[0]),
        (f"direct_gauss N={n}", lambda b: fgt.direct_gauss(ps.x, ps.q, ps.x, 0.1, backend=b)),
    ]


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--quick", action="store_true", help="smaller problem sizes")
    args = ap.parse_args(argv)
    if not HAVE_NUMBA:
        raise SystemExit("numba is not installed; nothing to compare")

    print(f"{'kernel':34s} {'numpy s':>10s} {'numba s':>10s} {'speedup':>8s} {'max diff':>10s}")
    for name, fn in cases(args.quick):
        t_np, a = best_of(lambda: fn("numpy"), args.repeat)
        t_nb, b = best_of(lambda: fn("numba"), args.repeat)
        diff = float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-300))
        print(f"{name:34s} {t_np:10.4f} {t_nb:10.4f} {t_np / t_nb:8.1f} {diff:10.1e}")


if __name__ == "__main__":
    main()
