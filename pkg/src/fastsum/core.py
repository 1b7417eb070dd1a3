"""Shared numeric primitives.

Multi-indices use tensor-product truncation: for a truncation ``p`` in ``d``
dimensions the index set is every ``alpha`` with ``0 <= alpha_i < p``, listed
lexicographically with the last component varying fastest.  All coefficient
tensors in :mod:`fastsum.fgt` are flattened in this order.
"""

import math
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from ._backend import njit
from .errors import InvalidArgumentError, RangeError

MAX_FACTORIAL_COMPONENT = 20
MAX_BINOMIAL_N = 62

# ---------------------------------------------------------------- multi-indices


def enumerate_multi_indices(p: int, d: int) -> np.ndarray:
    """All multi-indices with components in ``[0, p)``, shape ``(p**d, d)``."""
    if p < 1 or d < 1:
        raise InvalidArgumentError(f"need p >= 1 and d >= 1, got p={p}, d={d}")
    grids = np.indices((p,) * d).reshape(d, -1)
    return np.ascontiguousarray(grids.T, dtype=np.int64)


def _check_alpha(alpha):
    alpha = tuple(int(a) for a in alpha)
    if not alpha or any(a < 0 for a in alpha):
        raise InvalidArgumentError(f"invalid multi-index {alpha!r}")
    return alpha


def multi_index_factorial(alpha: Sequence[int]) -> int:
    alpha = _check_alpha(alpha)
    if max(alpha) > MAX_FACTORIAL_COMPONENT:
        raise RangeError(
            f"factorial component {max(alpha)} exceeds {MAX_FACTORIAL_COMPONENT}"
        )
    return math.prod(math.factorial(a) for a in alpha)


def multi_index_degree(alpha: Sequence[int]) -> int:
    return sum(_check_alpha(alpha))


def multi_index_power(t: Sequence[float], alpha: Sequence[int]) -> float:
    """``prod(t_i ** alpha_i)`` with ``0 ** 0 == 1``."""
    alpha = _check_alpha(alpha)
    if len(t) != len(alpha):
        raise InvalidArgumentError(
            f"length mismatch: t has {len(t)} entries, alpha has {len(alpha)}"
        )
    out = 1.0
    for ti, ai in zip(t, alpha):
        # float ** 0 is 1.0 in Python, including 0.0 ** 0
        out *= float(ti) ** ai
    return out


def binomial(n: int, k: int) -> int:
    if n < 0 or k < 0 or k > n:
        raise InvalidArgumentError(f"binomial({n}, {k}) needs 0 <= k <= n")
    if n > MAX_BINOMIAL_N:
        raise RangeError(f"binomial n={n} exceeds guard {MAX_BINOMIAL_N}")
    return math.comb(n, k)


# ---------------------------------------------------------------- Horner


@njit
def _horner(coeffs, x):
    y = coeffs[0] * 1.0
    for i in range(1, coeffs.shape[0]):
        y = coeffs[i] + x * y
    return y


def horner_eval(coeffs, x):
    """Evaluate a polynomial given highest-degree coefficient first.

    ``x`` may be a scalar or an array; arrays are evaluated elementwise with the
    same ``y <- c_i + x*y`` recurrence.
    """
    c = np.asarray(coeffs, dtype=np.float64)
    if c.ndim != 1 or c.size == 0:
        raise InvalidArgumentError("coefficient list must be a non-empty 1-D sequence")
    if np.ndim(x) == 0:
        return float(_horner(c, float(x)))
    x = np.asarray(x, dtype=np.float64)
    y = np.full_like(x, c[0])
    for ci in c[1:]:
        y = ci + x * y
    return y


# Error-free transformations (Knuth TwoSum, Dekker TwoProduct with Veltkamp
# splitting) for compensated Horner.  The result is as accurate as Horner run
# in twice the working precision and then rounded.


@njit
def _two_sum(a, b):
    s = a + b
    bb = s - a
    return s, (a - (s - bb)) + (b - bb)


@njit
def _split(a):
    c = 134217729.0 * a  # 2**27 + 1
    hi = c - (c - a)
    return hi, a - hi


@njit
def _two_prod(a, b):
    p = a * b
    ah, al = _split(a)
    bh, bl = _split(b)
    return p, al * bl - (((p - ah * bh) - al * bh) - ah * bl)


@njit
def horner_comp_kernel(hi, lo, start, x):
    """Compensated Horner over ``hi[start:] + lo[start:]`` (double-double coefficients)."""
    s = hi[start]
    c = lo[start]
    for i in range(start + 1, hi.shape[0]):
        p, pe = _two_prod(s, x)
        s, se = _two_sum(p, hi[i])
        c = c * x + (pe + se + lo[i])
    return s + c


def split_coeffs(coeffs):
    """Exact integers (or floats) to ``(hi, lo)`` float arrays with ``hi + lo`` ~ value."""
    hi = np.array([float(c) for c in coeffs])
    lo = np.array([float(c - int(h)) if isinstance(c, int) else 0.0 for c, h in zip(coeffs, hi)])
    return hi, lo


def horner_eval_compensated(coeffs, x, lo=None):
    """Like :func:`horner_eval` but compensated; ``coeffs`` may be exact Python ints.

    If ``lo`` is given, ``coeffs + lo`` are the double-double coefficients.
    """
    if lo is None:
        hi, lo = split_coeffs(list(coeffs))
    else:
        hi = np.asarray(coeffs, dtype=np.float64)
        lo = np.asarray(lo, dtype=np.float64)
    if hi.ndim != 1 or hi.size == 0 or lo.shape != hi.shape:
        raise InvalidArgumentError("coefficient list must be a non-empty 1-D sequence")
    if np.ndim(x) == 0:
        return float(horner_comp_kernel(hi, lo, 0, float(x)))
    x = np.asarray(x, dtype=np.float64)
    xh, xl = _split_np(x)
    s = np.full_like(x, hi[0])
    c = np.full_like(x, lo[0])
    for h, l in zip(hi[1:], lo[1:]):
        p = s * x
        sh, sl = _split_np(s)
        pe = sl * xl - (((p - sh * xh) - sl * xh) - sh * xl)
        s_new = p + h
        bb = s_new - p
        se = (p - (s_new - bb)) + (h - bb)
        c = c * x + (pe + se + l)
        s = s_new
    return s + c


def _split_np(a):
    c = 134217729.0 * a
    hi = c - (c - a)
    return hi, a - hi


def horner_unrolled(coeffs):
    """Build a straight-line evaluator for a fixed coefficient list.

    The generated function has no loop: one ``y = c_i + x*y`` statement per
    coefficient, with the coefficients baked in as literals.
    """
    c = [float(v) for v in np.asarray(coeffs, dtype=np.float64).ravel()]
    if not c:
        raise InvalidArgumentError("coefficient list must be non-empty")
    lines = ["def poly(x):", f"    y = {c[0]!r}"]
    lines += [f"    y = {ci!r} + x * y" for ci in c[1:]]
    lines.append("    return y")
    ns = {}
    exec("\n".join(lines), ns)
    return ns["poly"]


# ---------------------------------------------------------------- datasets

WEIGHT_MODES = ("unit", "uniform01", "signed")


@dataclass(frozen=True)
class DatasetSpec:
    count: int
    dimension: int = 2
    seed: int = 0
    weight_mode: str = "unit"

    def __post_init__(self):
        if self.count < 0:
            raise InvalidArgumentError("count must be non-negative")
        if not 1 <= self.dimension <= 3:
            raise InvalidArgumentError("dimension must be 1, 2 or 3")
        if not 0 <= self.seed < 2**64:
            raise InvalidArgumentError("seed must fit an unsigned 64-bit integer")
        if self.weight_mode not in WEIGHT_MODES:
            raise InvalidArgumentError(f"weight_mode must be one of {WEIGHT_MODES}")


class PointSet(NamedTuple):
    """Struct-of-arrays point cloud: ``x`` is ``(n, d)``, ``q`` is ``(n,)``."""

    x: np.ndarray
    q: np.ndarray

    @property
    def z(self) -> np.ndarray:
        """Positions as complex coordinates (2-D point sets only)."""
        if self.x.shape[1] != 2:
            raise InvalidArgumentError("complex coordinates need a 2-D point set")
        return self.x[:, 0] + 1j * self.x[:, 1]

    def __len__(self):
        return self.q.shape[0]


def unit_box(d):
    return tuple((0.0, 1.0) for _ in range(d))


def rng_for(seed):
    """Philox-4x64 counter-based generator: identical streams on every platform."""
    return np.random.Generator(np.random.Philox(seed))


def generate_dataset(spec: DatasetSpec, domain=None) -> PointSet:
    """Uniform random points in an axis-aligned box.

    ``domain`` is a sequence of ``(lo, hi)`` pairs, one per axis (default: the
    unit box).  Positions are drawn first, then weights, both from a Philox
    stream keyed by ``spec.seed``, so the output depends on nothing but
    ``spec`` and ``domain``.
    """
    domain = unit_box(spec.dimension) if domain is None else tuple(domain)
    if len(domain) != spec.dimension:
        raise InvalidArgumentError("domain rank does not match spec.dimension")
    lo = np.array([float(a) for a, _ in domain])
    hi = np.array([float(b) for _, b in domain])
    if not np.all(np.isfinite(lo) & np.isfinite(hi)) or np.any(hi <= lo):
        raise InvalidArgumentError(f"degenerate domain {domain!r}")

    rng = rng_for(spec.seed)
    u = rng.random((spec.count, spec.dimension))
    x = lo + u * (hi - lo)
    # lo + u*(hi-lo) can round up to hi for u just below 1; keep the box closed
    np.clip(x, lo, hi, out=x)
    if spec.weight_mode == "unit":
        q = np.ones(spec.count)
    elif spec.weight_mode == "uniform01":
        q = rng.random(spec.count)
    else:
        q = np.where(rng.integers(0, 2, spec.count) == 1, 1.0, -1.0)
    return PointSet(x, q)


# ---------------------------------------------------------------- counters


@dataclass
class KernelCounters:
    """Modelled work of one kernel run plus its wall time.

    ``phases`` optionally splits ``elapsed_seconds`` into named stages
    (``setup``, ``kernel``, ``reduction``).
    """

    arithmetic_ops: int = 0
    bytes_read: int = 0
    bytes_written: int = 0
    elapsed_seconds: float = 0.0
    phases: dict = None

    def __post_init__(self):
        if self.phases is None:
            self.phases = {}
        if min(self.arithmetic_ops, self.bytes_read, self.bytes_written) < 0:
            raise InvalidArgumentError("counters must be non-negative")
        if self.elapsed_seconds < 0:
            raise InvalidArgumentError("elapsed time must be non-negative")

    def __add__(self, other):
        phases = dict(self.phases)
        for k, v in other.phases.items():
            phases[k] = phases.get(k, 0.0) + v
        return KernelCounters(
            self.arithmetic_ops + other.arithmetic_ops,
            self.bytes_read + other.bytes_read,
            self.bytes_written + other.bytes_written,
            self.elapsed_seconds + other.elapsed_seconds,
            phases,
        )


PRECISIONS = {"f64": (np.float64, np.complex128), "f32": (np.float32, np.complex64)}


def dtypes_for(precision):
    try:
        return PRECISIONS[precision]
    except KeyError:
        raise InvalidArgumentError(f"precision must be 'f32' or 'f64', got {precision!r}")
