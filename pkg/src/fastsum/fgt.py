"""Fast Gauss transform on uniform boxes, d = 1, 2 or 3.

All series work in scaled coordinates ``u = x / (sqrt(2) * sigma)`` where the
kernel is ``exp(-|u_y - u_x|**2)``.  With ``h_n(t) = exp(-t**2) H_n(t)``:

hermite  (about source centre s):  ``G(y) = sum_a A_a h_a(u_y - u_s)``,
         ``A_a = sum_j q_j (u_j - u_s)**a / a!``
taylor   (about target centre c):  ``G(y) = sum_b B_b (u_y - u_c)**b``,
         ``B_b = (-1)**|b| / b! * sum_j q_j h_b(u_c - u_j)``
h2t:     ``B_b = (-1)**|b| / b! * C_b``, ``C_b = sum_a A_a h_{a+b}(u_c - u_s)``

Coefficient tensors are flat ``p**d`` arrays in :func:`fastsum.core.enumerate_multi_indices`
order.  The Hermite-to-Taylor sum is applied one axis at a time, since
``h_{a+b}`` factorises over dimensions.

Strategy selection
------------------
For each interacting (source box, target box) pair the cheapest of four
strategies is used, measured in series multiply-add units with ``P = p**d``::

    direct             w * n_src * n_tgt
    hermite            n_src * P / fanout + n_tgt * P
    taylor             n_src * P + n_tgt * P / fanin
    hermite_to_taylor  n_src * P / fanout + P**2 + n_tgt * P / fanin

``fanout`` is the number of target boxes a source box serves (its Hermite
series is formed once and reused); ``fanin`` the number of source boxes
feeding a target box (its Taylor series is evaluated once).  ``w`` weights a
direct Gaussian term, whose exponential costs far more than a multiply-add.
Ties go to the earlier strategy in the list.
"""

import enum
import math
import time
from dataclasses import dataclass

import numpy as np

from ._backend import njit, pick, run_ranges
from .core import (
    KernelCounters, dtypes_for, enumerate_multi_indices, horner_comp_kernel,
    horner_eval_compensated, split_coeffs,
)
from .errors import InvalidArgumentError, RangeError

MAX_HERMITE_ORDER = 63
DIRECT_TERM_COST = 16.0
HERMITE_BACKENDS = ("recurrence", "horner_table")
SQRT2 = math.sqrt(2.0)


class Strategy(enum.IntEnum):
    DIRECT = 0
    HERMITE = 1
    TAYLOR = 2
    HERMITE_TO_TAYLOR = 3

    @property
    def label(self):
        return self.name.lower()

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        try:
            return cls[str(value).upper()]
        except KeyError:
            raise InvalidArgumentError(f"unknown strategy {value!r}") from None


@dataclass(frozen=True)
class FgtConfig:
    sigma: float = 0.1
    p: int = 12
    dimension: int = 2
    r: float = 0.5
    eps_cut: float = 1e-12
    hermite_backend: str = "recurrence"
    strategy: str = "auto"
    direct_cost: float = DIRECT_TERM_COST
    chunk_bytes: int = 16384
    precision: str = "f64"

    def __post_init__(self):
        if not self.sigma > 0:
            raise InvalidArgumentError("sigma must be positive")
        if self.p < 1:
            raise InvalidArgumentError("p must be >= 1")
        if 2 * (self.p - 1) > MAX_HERMITE_ORDER:
            raise RangeError(f"p={self.p} needs Hermite order above {MAX_HERMITE_ORDER}")
        if not 1 <= self.dimension <= 3:
            raise InvalidArgumentError("dimension must be 1, 2 or 3")
        if not 0 < self.r <= 1:
            raise InvalidArgumentError("r must lie in (0, 1]")
        if not 0 < self.eps_cut < 1:
            raise InvalidArgumentError("eps_cut must lie in (0, 1)")
        if self.hermite_backend not in HERMITE_BACKENDS:
            raise InvalidArgumentError(f"hermite_backend must be one of {HERMITE_BACKENDS}")
        if self.strategy != "auto":
            Strategy.parse(self.strategy)
        if self.chunk_bytes < 1:
            raise InvalidArgumentError("chunk_bytes must be positive")
        dtypes_for(self.precision)

    @property
    def side(self):
        return self.r * SQRT2 * self.sigma

    @property
    def n_terms(self):
        return self.p**self.dimension


# ---------------------------------------------------------------- Hermite functions


def hermite_poly_coeffs(nmax):
    """Exact integer coefficients of ``H_0 .. H_nmax``, highest degree first.

    Built from ``H_{n+1} = 2t H_n - 2n H_{n-1}``.
    """
    if not 0 <= nmax <= MAX_HERMITE_ORDER:
        raise RangeError(f"Hermite order {nmax} outside [0, {MAX_HERMITE_ORDER}]")
    rows = [[1]]  # lowest degree first while building
    if nmax >= 1:
        rows.append([0, 2])
    for n in range(1, nmax):
        a, b = rows[n], rows[n - 1]
        nxt = [0] + [2 * c for c in a]
        for i, c in enumerate(b):
            nxt[i] -= 2 * n * c
        rows.append(nxt)
    return [row[::-1] for row in rows]


def hermite_poly_table(nmax):
    """Coefficient table for the ``horner_table`` backend, shape ``(2, nmax+1, nmax+1)``.

    Row ``n`` holds ``H_n`` right-aligned, highest degree first.  Plane 0 is the
    nearest double of each coefficient and plane 1 the rounding remainder:
    beyond ``H_22`` the integers no longer fit a double's mantissa.
    """
    table = np.zeros((2, nmax + 1, nmax + 1))
    for n, row in enumerate(hermite_poly_coeffs(nmax)):
        table[0, n, nmax - n :], table[1, n, nmax - n :] = split_coeffs(row)
    return table


@njit
def _hermite_rec(nmax, t, out):
    h0 = math.exp(-t * t)
    out[0] = h0
    if nmax == 0:
        return
    h1 = 2.0 * t * h0
    out[1] = h1
    for n in range(1, nmax):
        h2 = 2.0 * t * h1 - 2.0 * n * h0
        out[n + 1] = h2
        h0 = h1
        h1 = h2


@njit
def _hermite_tab(table, nmax, t, out):
    # compensated Horner: plain Horner on the monomial form loses up to 1e-8
    # relative accuracy near the roots of H_n for n around 24
    w = math.exp(-t * t)
    last = table.shape[2] - 1
    for n in range(nmax + 1):
        out[n] = horner_comp_kernel(table[0, n], table[1, n], last - n, t) * w


@njit
def _hvals(nmax, t, use_table, table, out):
    if use_table:
        _hermite_tab(table, nmax, t, out)
    else:
        _hermite_rec(nmax, t, out)


def hermite_function(n, t, backend="recurrence"):
    """``h_n(t) = exp(-t**2) H_n(t)``."""
    if not 0 <= n <= MAX_HERMITE_ORDER:
        raise RangeError(f"Hermite order {n} outside [0, {MAX_HERMITE_ORDER}]")
    if backend not in HERMITE_BACKENDS:
        raise InvalidArgumentError(f"backend must be one of {HERMITE_BACKENDS}")
    out = np.empty(n + 1)
    if backend == "recurrence":
        _hermite_rec(n, float(t), out)
    else:
        _hermite_tab(hermite_poly_table(n), n, float(t), out)
    return float(out[n])


def hermite_functions(nmax, t, backend="recurrence"):
    """``h_0(t) .. h_nmax(t)`` for every entry of ``t``; shape ``t.shape + (nmax + 1,)``."""
    t = np.asarray(t, dtype=np.float64)
    out = np.empty(t.shape + (nmax + 1,))
    flat = out.reshape(-1, nmax + 1)
    if backend == "recurrence":
        flat[:, 0] = np.exp(-t.ravel() ** 2)
        if nmax >= 1:
            flat[:, 1] = 2.0 * t.ravel() * flat[:, 0]
        for n in range(1, nmax):
            flat[:, n + 1] = 2.0 * t.ravel() * flat[:, n] - 2.0 * n * flat[:, n - 1]
    else:
        table = hermite_poly_table(nmax)
        tt = t.ravel()
        w = np.exp(-tt * tt)
        for n in range(nmax + 1):
            hi, lo = table[0, n, nmax - n :], table[1, n, nmax - n :]
            flat[:, n] = horner_eval_compensated(hi, tt, lo) * w
    return out


# ---------------------------------------------------------------- expansions


@dataclass
class HermiteExpansion:
    center: np.ndarray
    coeffs: np.ndarray


@dataclass
class TaylorExpansion:
    center: np.ndarray
    coeffs: np.ndarray


def _as_points(x, d=None):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None] if d == 1 or d is None else x.reshape(-1, d)
    if d is not None and x.shape[1] != d:
        raise InvalidArgumentError(f"expected {d}-dimensional points, got {x.shape[1]}")
    return x


def _center(c, d):
    c = np.atleast_1d(np.asarray(c, dtype=np.float64))
    if c.shape != (d,):
        raise InvalidArgumentError(f"centre must have {d} coordinates")
    return c


def _fact_table(p):
    return np.array([math.factorial(n) for n in range(p)], dtype=np.float64)


def _signed_inv_fact(p):
    return np.array([(-1.0) ** n / math.factorial(n) for n in range(p)])


def _outer_flat(rows):
    """Flattened tensor product of per-axis vectors: ``rows`` is ``(..., d, p)``."""
    d = rows.shape[-2]
    out = rows[..., 0, :]
    for i in range(1, d):
        out = (out[..., :, None] * rows[..., i, None, :]).reshape(*rows.shape[:-2], -1)
    return out


def hermite_coeffs(x, q, center, p, sigma) -> HermiteExpansion:
    center = np.atleast_1d(np.asarray(center, dtype=np.float64))
    d = center.shape[0]
    x = _as_points(x, d)
    q = np.asarray(q, dtype=np.float64).ravel()
    if p < 1:
        raise InvalidArgumentError("p must be >= 1")
    t = (x - center) / (SQRT2 * sigma)
    pw = t[..., None] ** np.arange(p) / _fact_table(p)  # (n, d, p); 0**0 == 1
    coeffs = q @ _outer_flat(pw) if q.size else np.zeros(p**d)
    return HermiteExpansion(center, coeffs)


def taylor_coeffs(x, q, center, p, sigma, backend="recurrence") -> TaylorExpansion:
    center = np.atleast_1d(np.asarray(center, dtype=np.float64))
    d = center.shape[0]
    x = _as_points(x, d)
    q = np.asarray(q, dtype=np.float64).ravel()
    if p < 1:
        raise InvalidArgumentError("p must be >= 1")
    t = (center - x) / (SQRT2 * sigma)
    hf = hermite_functions(p - 1, t, backend) * _signed_inv_fact(p)
    coeffs = q @ _outer_flat(hf) if q.size else np.zeros(p**d)
    return TaylorExpansion(center, coeffs)


def _mode_products(coeffs, mats):
    """Contract axis ``i`` of the ``(p,)*d`` tensor with ``mats[i]`` for every ``i``."""
    d = mats.shape[0]
    p = mats.shape[1]
    cur = coeffs.reshape((p,) * d)
    for i in range(d):
        # tensordot over the leading axis appends the new axis last, so after d
        # rounds the axes are back in their original order
        cur = np.tensordot(cur, mats[i], axes=([0], [0]))
    return cur.reshape(-1)


def h2t_translate(h: HermiteExpansion, target_center, p, sigma, backend="recurrence"):
    """Translate a Hermite series to a Taylor series about ``target_center``.

    The returned coefficients already carry the ``(-1)**|b| / b!`` factor, so
    they are evaluated with :func:`taylor_eval` exactly like directly formed
    Taylor coefficients.
    """
    d = h.center.shape[0]
    tc = _center(target_center, d)
    t = (tc - h.center) / (SQRT2 * sigma)
    hf = hermite_functions(2 * p - 2, t, backend)  # (d, 2p-1)
    idx = np.arange(p)
    mats = hf[:, idx[:, None] + idx[None, :]]  # (d, p, p): h_{a+b}(t_i)
    c = _mode_products(np.asarray(h.coeffs, dtype=np.float64), mats)
    scale = _outer_flat(np.broadcast_to(_signed_inv_fact(p), (d, p)))
    return TaylorExpansion(tc, c * scale)


def hermite_eval(h: HermiteExpansion, y, sigma, backend="recurrence"):
    d = h.center.shape[0]
    p = round(len(h.coeffs) ** (1.0 / d))
    y = _as_points(y, d)
    t = (y - h.center) / (SQRT2 * sigma)
    hf = hermite_functions(p - 1, t, backend)
    return _outer_flat(hf) @ h.coeffs


def taylor_eval(tx: TaylorExpansion, y, sigma):
    d = tx.center.shape[0]
    p = round(len(tx.coeffs) ** (1.0 / d))
    y = _as_points(y, d)
    t = (y - tx.center) / (SQRT2 * sigma)
    return _outer_flat(t[..., None] ** np.arange(p)) @ tx.coeffs


def direct_gauss(x, q, y, sigma, threads=1, backend=None):
    """Reference Gauss transform, every source against every target, no cutoff."""
    y = np.asarray(y, dtype=np.float64)
    d = y.shape[1] if y.ndim == 2 else 1
    y = _as_points(y, d)
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0:
        return np.zeros(y.shape[0])
    x = _as_points(x, None if x.ndim == 2 else d)
    if x.shape[1] != d:
        raise InvalidArgumentError(
            f"sources are {x.shape[1]}-dimensional, targets {d}-dimensional"
        )
    q = np.asarray(q, dtype=np.float64).ravel()
    if q.shape[0] != x.shape[0]:
        raise InvalidArgumentError("source positions and weights differ in length")
    out = np.zeros(y.shape[0])
    kern = pick(_direct_numba, _direct_numpy, backend)
    inv = 1.0 / (2.0 * sigma * sigma)
    run_ranges(lambda a, b: kern(x, q, y, inv, a, b, out), y.shape[0], threads)
    return out


@njit
def _direct_numba(x, q, y, inv, a, b, out):
    d = x.shape[1]
    for j in range(a, b):
        acc = 0.0
        for i in range(x.shape[0]):
            r2 = 0.0
            for k in range(d):
                dx = x[i, k] - y[j, k]
                r2 += dx * dx
            acc += q[i] * math.exp(-r2 * inv)
        out[j] = acc


def _direct_numpy(x, q, y, inv, a, b, out):
    step = 256
    for lo in range(a, b, step):
        hi = min(lo + step, b)
        r2 = ((y[lo:hi, None, :] - x[None, :, :]) ** 2).sum(axis=2)
        out[lo:hi] = np.exp(-r2 * inv) @ q


# ---------------------------------------------------------------- grid and planning


@dataclass
class FgtGrid:
    """Uniform boxes of side ``r*sqrt(2)*sigma`` tiling the bounding box of all points.

    Box ids are row-major with the last axis fastest.  Binning is half-open with
    the upper face of the last box closed, as in :func:`fastsum.fmm.build_grid`.
    """

    side: float
    lo: np.ndarray
    shape: tuple
    src_box: np.ndarray
    src_order: np.ndarray
    src_starts: np.ndarray
    tgt_box: np.ndarray
    tgt_order: np.ndarray
    tgt_starts: np.ndarray

    @property
    def n_boxes(self):
        return int(np.prod(self.shape))

    def box_coords(self, ids):
        return np.stack(np.unravel_index(np.asarray(ids), self.shape), axis=-1)

    def centers(self, ids=None):
        ids = np.arange(self.n_boxes) if ids is None else np.asarray(ids)
        return self.lo + (self.box_coords(ids) + 0.5) * self.side

    def sources_in(self, box):
        return self.src_order[self.src_starts[box] : self.src_starts[box + 1]]

    def targets_in(self, box):
        return self.tgt_order[self.tgt_starts[box] : self.tgt_starts[box + 1]]


def _bin(points, lo, side, shape):
    idx = np.floor((points - lo) / side).astype(np.int64)
    idx = np.clip(idx, 0, np.array(shape) - 1)
    ids = np.ravel_multi_index(tuple(idx.T), shape) if points.shape[0] else idx[:, 0]
    order = np.argsort(ids, kind="stable")
    starts = np.zeros(int(np.prod(shape)) + 1, dtype=np.int64)
    np.cumsum(np.bincount(ids, minlength=int(np.prod(shape))), out=starts[1:])
    return ids.astype(np.int64), order, starts


def build_fgt_grid(x, y, config: FgtConfig) -> FgtGrid:
    d = config.dimension
    x = _as_points(x, d)
    y = _as_points(y, d)
    allpts = np.concatenate([x, y])
    if not np.all(np.isfinite(allpts)):
        raise InvalidArgumentError("points must be finite")
    side = config.side
    if allpts.shape[0]:
        lo, hi = allpts.min(axis=0), allpts.max(axis=0)
    else:
        lo = hi = np.zeros(d)
    shape = tuple(int(max(1, math.ceil(e / side))) for e in (hi - lo))
    sb, so, ss = _bin(x, lo, side, shape)
    tb, to, ts = _bin(y, lo, side, shape)
    return FgtGrid(side, lo, shape, sb, so, ss, tb, to, ts)


def neighbor_cutoff(config: FgtConfig) -> int:
    """Smallest ``n`` with ``exp(-(n*side)**2 / (2 sigma**2)) <= eps_cut``.

    Box pairs further apart than ``n`` boxes (Chebyshev, in index space) are
    separated by at least ``n*side`` and are skipped.
    """
    side, two_s2 = config.side, 2.0 * config.sigma**2
    n = max(0, int(math.sqrt(-math.log(config.eps_cut)) / config.r) - 2)
    while math.exp(-((n * side) ** 2) / two_s2) > config.eps_cut:
        n += 1
    return n


def default_fanout(d):
    """Neighbourhood size ``(2*n_cut + 1)**d`` under the default box and cutoff settings."""
    return (2 * neighbor_cutoff(FgtConfig(dimension=d)) + 1) ** d


def strategy_costs(n_src, n_tgt, p, d, src_fanout=None, tgt_fanin=None, direct_cost=DIRECT_TERM_COST):
    """Cost of each strategy, columns in :class:`Strategy` order."""
    n_src = np.asarray(n_src, dtype=np.float64)
    n_tgt = np.asarray(n_tgt, dtype=np.float64)
    fan = default_fanout(d) if src_fanout is None or tgt_fanin is None else None
    fout = np.maximum(np.asarray(fan if src_fanout is None else src_fanout, float), 1.0)
    fin = np.maximum(np.asarray(fan if tgt_fanin is None else tgt_fanin, float), 1.0)
    P = float(p) ** d
    form = n_src * P / fout
    ev = n_tgt * P / fin
    return np.stack(
        np.broadcast_arrays(
            direct_cost * n_src * n_tgt,
            form + n_tgt * P,
            n_src * P + ev,
            form + P * P + ev,
        ),
        axis=-1,
    )


def select_strategy(n_src, n_tgt, p, d, src_fanout=None, tgt_fanin=None, direct_cost=DIRECT_TERM_COST):
    if n_src < 0 or n_tgt < 0:
        raise InvalidArgumentError("counts must be non-negative")
    costs = strategy_costs(n_src, n_tgt, p, d, src_fanout, tgt_fanin, direct_cost)
    return Strategy(int(np.argmin(costs)))


@dataclass
class FgtPlan:
    """Interacting box pairs sorted by target box, then source box."""

    src: np.ndarray
    tgt: np.ndarray
    strategy: np.ndarray
    tgt_boxes: np.ndarray
    pair_starts: np.ndarray
    n_cut: int

    def counts(self):
        return np.bincount(self.strategy, minlength=4)


def plan_interactions(grid: FgtGrid, config: FgtConfig) -> FgtPlan:
    n_cut = neighbor_cutoff(config)
    s_cnt = np.diff(grid.src_starts)
    t_cnt = np.diff(grid.tgt_starts)
    sboxes = np.flatnonzero(s_cnt)
    tboxes = np.flatnonzero(t_cnt)
    sc = grid.box_coords(sboxes).reshape(-1, config.dimension)
    tc = grid.box_coords(tboxes).reshape(-1, config.dimension)
    srcs, tgts = [], []
    step = max(1, 2_000_000 // max(1, sboxes.size))
    for a in range(0, tboxes.size, step):
        cheb = np.abs(tc[a : a + step, None, :] - sc[None, :, :]).max(axis=2)
        ti, si = np.nonzero(cheb <= n_cut)
        tgts.append(tboxes[a : a + step][ti])
        srcs.append(sboxes[si])
    src = np.concatenate(srcs) if srcs else np.zeros(0, np.int64)
    tgt = np.concatenate(tgts) if tgts else np.zeros(0, np.int64)
    # np.nonzero walks row-major, so pairs are already sorted by (tgt, src)

    if config.strategy == "auto":
        fanout = np.bincount(src, minlength=grid.n_boxes)
        fanin = np.bincount(tgt, minlength=grid.n_boxes)
        costs = strategy_costs(
            s_cnt[src], t_cnt[tgt], config.p, config.dimension,
            fanout[src], fanin[tgt], config.direct_cost,
        )
        strategy = np.argmin(costs, axis=1).astype(np.int64) if src.size else src.copy()
    else:
        strategy = np.full(src.shape, int(Strategy.parse(config.strategy)), dtype=np.int64)

    pair_starts = np.searchsorted(tgt, tboxes, side="left")
    pair_starts = np.append(pair_starts, tgt.size).astype(np.int64)
    return FgtPlan(src, tgt, strategy, tboxes, pair_starts, n_cut)


# ---------------------------------------------------------------- evaluation kernels


@njit
def _form_hermite_numba(xs, qs, starts, centers, boxes, p, alpha, inv_fact, scale, out):
    d = xs.shape[1]
    P = alpha.shape[0]
    pw = np.empty((d, p))
    for bi in range(boxes.shape[0]):
        box = boxes[bi]
        for j in range(starts[box], starts[box + 1]):
            for i in range(d):
                t = (xs[j, i] - centers[box, i]) * scale
                v = 1.0
                for n in range(p):
                    pw[i, n] = v * inv_fact[n]
                    v *= t
            for m in range(P):
                v = qs[j]
                for i in range(d):
                    v *= pw[i, alpha[m, i]]
                out[bi, m] += v


@njit
def _evaluate_numba(
    xs, qs, s_starts, ys, t_starts, centers, plan_src, plan_strat, tboxes,
    pair_starts, herm, herm_row, alpha, p, scale, inv2s2, use_table, table,
    signed_inv_fact, a, b, out,
):
    d = xs.shape[1]
    P = alpha.shape[0]
    hf = np.empty((d, 2 * p - 1))
    T = np.empty(P)
    cur = np.empty(P)
    nxt = np.empty(P)
    for ti in range(a, b):
        tbox = tboxes[ti]
        t0 = t_starts[tbox]
        t1 = t_starts[tbox + 1]
        has_taylor = False
        for m in range(P):
            T[m] = 0.0
        for k in range(pair_starts[ti], pair_starts[ti + 1]):
            sbox = plan_src[k]
            strat = plan_strat[k]
            s0 = s_starts[sbox]
            s1 = s_starts[sbox + 1]
            if strat == 0:
                for j in range(t0, t1):
                    acc = 0.0
                    for i in range(s0, s1):
                        r2 = 0.0
                        for c in range(d):
                            dx = xs[i, c] - ys[j, c]
                            r2 += dx * dx
                        acc += qs[i] * math.exp(-r2 * inv2s2)
                    out[j] += acc
            elif strat == 1:
                A = herm[herm_row[sbox]]
                for j in range(t0, t1):
                    for c in range(d):
                        _hvals(p - 1, (ys[j, c] - centers[sbox, c]) * scale, use_table, table, hf[c])
                    acc = 0.0
                    for m in range(P):
                        v = A[m]
                        for c in range(d):
                            v *= hf[c, alpha[m, c]]
                        acc += v
                    out[j] += acc
            elif strat == 2:
                has_taylor = True
                for i in range(s0, s1):
                    for c in range(d):
                        _hvals(p - 1, (centers[tbox, c] - xs[i, c]) * scale, use_table, table, hf[c])
                        for n in range(p):
                            hf[c, n] *= signed_inv_fact[n]
                    for m in range(P):
                        v = qs[i]
                        for c in range(d):
                            v *= hf[c, alpha[m, c]]
                        T[m] += v
            else:
                has_taylor = True
                A = herm[herm_row[sbox]]
                for c in range(d):
                    _hvals(2 * p - 2, (centers[tbox, c] - centers[sbox, c]) * scale, use_table, table, hf[c])
                for m in range(P):
                    cur[m] = A[m]
                # contract one axis at a time: cur[pre, a, post] -> nxt[pre, b, post]
                post = P
                for c in range(d):
                    post //= p
                    pre = P // (post * p)
                    for m in range(P):
                        nxt[m] = 0.0
                    for x0 in range(pre):
                        for aa in range(p):
                            base_a = (x0 * p + aa) * post
                            for bb in range(p):
                                w = hf[c, aa + bb]
                                base_b = (x0 * p + bb) * post
                                for y0 in range(post):
                                    nxt[base_b + y0] += w * cur[base_a + y0]
                    for m in range(P):
                        cur[m] = nxt[m]
                for m in range(P):
                    v = cur[m]
                    for c in range(d):
                        v *= signed_inv_fact[alpha[m, c]]
                    T[m] += v
        if has_taylor:
            for j in range(t0, t1):
                for c in range(d):
                    t = (ys[j, c] - centers[tbox, c]) * scale
                    v = 1.0
                    for n in range(p):
                        hf[c, n] = v
                        v *= t
                acc = 0.0
                for m in range(P):
                    v = T[m]
                    for c in range(d):
                        v *= hf[c, alpha[m, c]]
                    acc += v
                out[j] += acc


def _form_hermite_numpy(xs, qs, starts, centers, boxes, p, alpha, inv_fact, scale, out):
    for bi, box in enumerate(boxes):
        sl = slice(starts[box], starts[box + 1])
        t = (xs[sl] - centers[box]) * scale
        pw = t[..., None] ** np.arange(p) * inv_fact
        out[bi] += qs[sl] @ _outer_flat(pw)


def _evaluate_numpy(
    xs, qs, s_starts, ys, t_starts, centers, plan_src, plan_strat, tboxes,
    pair_starts, herm, herm_row, alpha, p, scale, inv2s2, use_table, table,
    signed_inv_fact, a, b, out,
):
    backend = "horner_table" if use_table else "recurrence"
    d = xs.shape[1]
    idx = np.arange(p)
    for ti in range(a, b):
        tbox = tboxes[ti]
        tj = slice(t_starts[tbox], t_starts[tbox + 1])
        y = ys[tj]
        T = None
        for k in range(pair_starts[ti], pair_starts[ti + 1]):
            sbox = plan_src[k]
            si = slice(s_starts[sbox], s_starts[sbox + 1])
            strat = plan_strat[k]
            if strat == 0:
                r2 = ((y[:, None, :] - xs[None, si, :]) ** 2).sum(axis=2)
                out[tj] += np.exp(-r2 * inv2s2) @ qs[si]
            elif strat == 1:
                hf = hermite_functions(p - 1, (y - centers[sbox]) * scale, backend)
                out[tj] += _outer_flat(hf) @ herm[herm_row[sbox]]
            elif strat == 2:
                hf = hermite_functions(p - 1, (centers[tbox] - xs[si]) * scale, backend)
                contrib = qs[si] @ _outer_flat(hf * signed_inv_fact)
                T = contrib if T is None else T + contrib
            else:
                hf = hermite_functions(2 * p - 2, (centers[tbox] - centers[sbox]) * scale, backend)
                mats = hf[:, idx[:, None] + idx[None, :]]
                c = _mode_products(herm[herm_row[sbox]], mats)
                c = c * _outer_flat(np.broadcast_to(signed_inv_fact, (d, p)))
                T = c if T is None else T + c
        if T is not None:
            t = (y - centers[tbox]) * scale
            out[tj] += _outer_flat(t[..., None] ** idx) @ T


# ---------------------------------------------------------------- op model


def fgt_op_model(d, p):
    """Modelled arithmetic ops per unit of work (exp counted as one op)."""
    P = p**d
    return {
        "direct": 3 * d + 3,  # per source-target interaction
        "hermite_eval": 3 * p * d + (d + 1) * P,  # per target per pair
        "hermite_form": 2 * p * d + (d + 1) * P,  # per source
        "taylor_form": 4 * p * d + (d + 1) * P,  # per source per pair
        "h2t": 3 * (2 * p - 1) * d + 2 * d * p ** (d + 1) + d * P,  # per pair
        "taylor_eval": 2 * p * d + (d + 1) * P,  # per target per target box
    }


def _fgt_counters(grid, plan, config, herm_boxes, wsize):
    d, p = config.dimension, config.p
    P = p**d
    ops = fgt_op_model(d, p)
    s_cnt = np.diff(grid.src_starts)
    t_cnt = np.diff(grid.tgt_starts)
    ns = s_cnt[plan.src].astype(np.int64)
    nt = t_cnt[plan.tgt].astype(np.int64)
    st = plan.strategy
    taylor_boxes = np.unique(plan.tgt[(st == 2) | (st == 3)])
    n_ops = (
        ops["direct"] * int(np.dot(ns[st == 0], nt[st == 0]))
        + ops["hermite_eval"] * int(nt[st == 1].sum())
        + ops["hermite_form"] * int(s_cnt[herm_boxes].sum())
        + ops["taylor_form"] * int(ns[st == 2].sum())
        + ops["h2t"] * int((st == 3).sum())
        + ops["taylor_eval"] * int(t_cnt[taylor_boxes].sum())
    )
    src_bytes = (d + 1) * wsize
    read = (
        src_bytes * int(ns[(st == 0) | (st == 2)].sum())
        + (P + d) * wsize * int(((st == 1) | (st == 3)).sum())
        + d * wsize * int(t_cnt.sum())
        + src_bytes * int(s_cnt[herm_boxes].sum())
    )
    written = wsize * int(t_cnt.sum()) + P * wsize * int(herm_boxes.size)
    return n_ops, read, written


def fgt_evaluate(x, q, y, config: FgtConfig, threads=1, backend=None):
    """Gauss transform of sources ``(x, q)`` at targets ``y``.

    Hermite series are formed once per source box in a read-only phase; target
    boxes are then split across workers, each owning its targets and
    accumulating source boxes in ascending id order (Taylor contributions are
    summed into one series per target box and evaluated last).  Returns
    ``(values, KernelCounters)`` with values in input target order.
    """
    rdtype, _ = dtypes_for(config.precision)
    d, p = config.dimension, config.p
    t_start = time.perf_counter()
    x = _as_points(x, d)
    y = _as_points(y, d)
    q = np.asarray(q, dtype=np.float64).ravel()
    if q.shape[0] != x.shape[0]:
        raise InvalidArgumentError("source positions and weights differ in length")
    grid = build_fgt_grid(x, y, config)
    plan = plan_interactions(grid, config)
    alpha = enumerate_multi_indices(p, d)
    centers = grid.centers().reshape(-1, d).astype(rdtype)
    xs = np.ascontiguousarray(x[grid.src_order], dtype=rdtype)
    qs = q[grid.src_order].astype(rdtype)
    ys = np.ascontiguousarray(y[grid.tgt_order], dtype=rdtype)
    scale = 1.0 / (SQRT2 * config.sigma)
    use_table = config.hermite_backend == "horner_table"
    table = hermite_poly_table(max(2 * p - 2, 1))
    inv_fact = 1.0 / _fact_table(p)
    signed = _signed_inv_fact(p)

    herm_boxes = np.unique(plan.src[(plan.strategy == 1) | (plan.strategy == 3)])
    herm_row = np.full(grid.n_boxes, -1, dtype=np.int64)
    herm_row[herm_boxes] = np.arange(herm_boxes.size)
    herm = np.zeros((max(herm_boxes.size, 1), p**d), dtype=rdtype)
    t_setup = time.perf_counter() - t_start

    t0 = time.perf_counter()
    pick(_form_hermite_numba, _form_hermite_numpy, backend)(
        xs, qs, grid.src_starts, centers, herm_boxes, p, alpha, inv_fact, scale, herm
    )
    out = np.zeros(y.shape[0], dtype=rdtype)
    kern = pick(_evaluate_numba, _evaluate_numpy, backend)
    run_ranges(
        lambda a, b: kern(
            xs, qs, grid.src_starts, ys, grid.tgt_starts, centers, plan.src,
            plan.strategy, plan.tgt_boxes, plan.pair_starts, herm, herm_row, alpha,
            p, scale, 1.0 / (2.0 * config.sigma**2), use_table, table, signed, a, b, out,
        ),
        plan.tgt_boxes.size,
        threads,
    )
    result = np.empty_like(out)
    result[grid.tgt_order] = out
    t_kernel = time.perf_counter() - t0

    n_ops, read, written = _fgt_counters(grid, plan, config, herm_boxes, np.dtype(rdtype).itemsize)
    counters = KernelCounters(
        n_ops, read, written, t_setup + t_kernel, {"setup": t_setup, "kernel": t_kernel}
    )
    return result, counters


def evaluate_box_pair(x, q, y, source_center, target_center, config: FgtConfig, strategy):
    """Contribution of one source cluster at a set of targets by a forced strategy."""
    d, p, sigma = config.dimension, config.p, config.sigma
    be = config.hermite_backend
    strategy = Strategy.parse(strategy)
    sc = _center(source_center, d)
    tc = _center(target_center, d)
    if strategy is Strategy.DIRECT:
        return direct_gauss(x, q, y, sigma)
    if strategy is Strategy.HERMITE:
        return hermite_eval(hermite_coeffs(x, q, sc, p, sigma), y, sigma, be)
    if strategy is Strategy.TAYLOR:
        return taylor_eval(taylor_coeffs(x, q, tc, p, sigma, be), y, sigma)
    h = hermite_coeffs(x, q, sc, p, sigma)
    return taylor_eval(h2t_translate(h, tc, p, sigma, be), y, sigma)


# ---------------------------------------------------------------- batched Hermite evaluation


@njit
def _hermite_batch_numba(coeffs, centers, y, alpha, p, scale, use_table, table, k0, k1, a, b, out):
    d = y.shape[1]
    P = alpha.shape[0]
    hf = np.empty((d, p))
    for j in range(a, b):
        acc = out[j]
        for k in range(k0, k1):
            for c in range(d):
                _hvals(p - 1, (y[j, c] - centers[k, c]) * scale, use_table, table, hf[c])
            s = 0.0
            for m in range(P):
                v = coeffs[k, m]
                for c in range(d):
                    v *= hf[c, alpha[m, c]]
                s += v
            acc += s
        out[j] = acc


def _hermite_batch_numpy(coeffs, centers, y, alpha, p, scale, use_table, table, k0, k1, a, b, out):
    backend = "horner_table" if use_table else "recurrence"
    for k in range(k0, k1):
        hf = hermite_functions(p - 1, (y[a:b] - centers[k]) * scale, backend)
        out[a:b] += _outer_flat(hf) @ coeffs[k]


def clusters_per_chunk(p, d, chunk_bytes=16384, itemsize=8):
    """How many clusters' coefficients and centre fit the working-set budget."""
    return max(1, chunk_bytes // ((p**d + d) * itemsize))


def hermite_eval_batch(coeffs, centers, y, p, sigma, chunk_bytes=16384, threads=1,
                       hermite_backend="recurrence", backend=None):
    """Sum many clusters' Hermite series at many targets.

    Coefficient arrays of all clusters are concatenated and processed in chunks
    that fit ``chunk_bytes``; every target adds clusters in index order, so the
    chunk size changes scheduling only, never the result.
    """
    coeffs = np.ascontiguousarray(coeffs, dtype=np.float64)
    centers = _as_points(centers, None if np.ndim(centers) == 2 else 1)
    d = centers.shape[1]
    y = _as_points(y, d)
    alpha = enumerate_multi_indices(p, d)
    if coeffs.shape != (centers.shape[0], alpha.shape[0]):
        raise InvalidArgumentError("coefficient array does not match clusters and p")
    out = np.zeros(y.shape[0])
    kern = pick(_hermite_batch_numba, _hermite_batch_numpy, backend)
    use_table = hermite_backend == "horner_table"
    table = hermite_poly_table(max(p - 1, 1))
    scale = 1.0 / (SQRT2 * sigma)
    step = clusters_per_chunk(p, d, chunk_bytes)
    for k0 in range(0, centers.shape[0], step):
        k1 = min(k0 + step, centers.shape[0])
        run_ranges(
            lambda a, b: kern(coeffs, centers, y, alpha, p, scale, use_table, table, k0, k1, a, b, out),
            y.shape[0],
            threads,
        )
    return out
