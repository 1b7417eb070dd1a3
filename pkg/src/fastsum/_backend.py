"""Kernel backend selection.

Hot loops are written twice: a numba ``@njit`` kernel and a vectorised numpy
path.  The numba kernels are used when numba imports and the environment
variable ``FASTSUM_DISABLE_NUMBA`` is unset (or ``0``).  Both variants stay
importable so benchmarks and tests can compare them side by side.
"""

import os
from concurrent.futures import ThreadPoolExecutor

try:
    import numba
except ImportError:  # pragma: no cover - numba is a hard dependency in CI
    numba = None

HAVE_NUMBA = numba is not None
USE_NUMBA = HAVE_NUMBA and os.environ.get("FASTSUM_DISABLE_NUMBA", "0").lower() in (
    "",
    "0",
    "false",
    "no",
)


def njit(func):
    """Compile ``func`` with numba (nopython, GIL released, cached) if available."""
    if not HAVE_NUMBA:
        return func
    return numba.njit(cache=True, nogil=True)(func)


def backend_name():
    return "numba" if USE_NUMBA else "numpy"


def pick(numba_impl, numpy_impl, backend=None):
    backend = backend or backend_name()
    if backend == "numba":
        return numba_impl
    if backend == "numpy":
        return numpy_impl
    raise ValueError(f"unknown backend {backend!r}")


def split_range(n, parts):
    """Contiguous, near-equal ``[start, stop)`` slices covering ``range(n)``."""
    parts = max(1, min(parts, n)) if n else 1
    edges = [n * i // parts for i in range(parts + 1)]
    return [(edges[i], edges[i + 1]) for i in range(parts)]


def run_ranges(fn, n, threads):
    """Call ``fn(start, stop)`` over a partition of ``range(n)``.

    Each slice is handled by exactly one worker, so as long as ``fn`` only
    writes outputs owned by its slice the result does not depend on
    ``threads``.
    """
    ranges = split_range(n, threads)
    if threads <= 1 or len(ranges) == 1:
        for a, b in ranges:
            fn(a, b)
        return
    with ThreadPoolExecutor(max_workers=threads) as pool:
        list(pool.map(lambda ab: fn(*ab), ranges))
