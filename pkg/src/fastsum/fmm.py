"""Single-level 2-D fast multipole method for the Cauchy kernel ``1/(y - x)``.

Expansion families
------------------
multipole (about ``c``):  ``f(z) = sum_k m_k (z - c)**(-k-1)``, ``m_k = sum_i q_i (z_i - c)**k``
local     (about ``c``):  ``f(z) = sum_n l_n (z - c)**n``

The multipole-to-local operator for this pair of families is the dense
``p x p`` matrix

    a[n, k] = (-1)**n * C(n + k, k) * t**(-n-k-1),    t = c_local - c_multipole

which is applied matrix-free.  Two traversal orders are provided: ``row``
carries ``t**-(n+1)`` from row to row and then multiplies in one common factor
per column; ``diagonal`` walks anti-diagonals ``n + k = s`` where the power is
shared and the binomial is updated incrementally.  For a fixed row both visit
``k`` in increasing order, so only the rounding of the matrix elements differs.

Op-count model (reported in :class:`~fastsum.core.KernelCounters`): complex
multiply = 6, complex add = 2, real multiply/add/divide = 1.  Per translation::

    8            centre difference (2) + complex reciprocal (6)
    + 10 p       per row: carry t**-(n+1) (6), sign (2), add into target LE (2)
    + 18 p**2    per element: binomial*power (2), multiply-add with m_k (8),
                 advance power (6), advance binomial (2)

See :func:`m2l_ops_per_translation`.
"""

import time
from dataclasses import dataclass, field

import numpy as np

from ._backend import njit, pick, run_ranges
from .core import KernelCounters, binomial, dtypes_for
from .errors import (
    InvalidArgumentError,
    OutOfDomainError,
    PlanConsistencyError,
    SingularTranslationError,
)

TRAVERSALS = ("row", "diagonal")

P2P_OPS = 10  # complex sub (2) + q/d as reciprocal-scale (6) + accumulate (2)


@dataclass(frozen=True)
class FmmConfig:
    p: int = 16
    level: int = 3
    traversal: str = "row"
    origin: tuple = (0.0, 0.0)
    size: float = 1.0
    precision: str = "f64"
    chunk_pairs: int = 8192

    def __post_init__(self):
        if self.p < 1:
            raise InvalidArgumentError("p must be >= 1")
        if self.level < 2:
            raise InvalidArgumentError("level must be >= 2 so that far boxes exist")
        if self.traversal not in TRAVERSALS:
            raise InvalidArgumentError(f"traversal must be one of {TRAVERSALS}")
        if not self.size > 0:
            raise InvalidArgumentError("domain size must be positive")
        if self.chunk_pairs < 1:
            raise InvalidArgumentError("chunk_pairs must be positive")
        dtypes_for(self.precision)


def m2l_ops_per_translation(p):
    return 8 + 10 * p + 18 * p * p


# ---------------------------------------------------------------- grid


@dataclass
class GridDecomposition:
    """Uniform ``2**level x 2**level`` box grid over a square domain.

    Box ids are row-major, ``id = iy * n_side + ix``.  Boxes are half-open
    ``[lo, hi)`` along each axis except the last row/column, which is closed,
    so a point on an interior edge belongs to the box with the larger index.
    """

    level: int
    origin: complex
    size: float
    box_of: np.ndarray
    order: np.ndarray
    starts: np.ndarray

    @property
    def n_side(self):
        return 1 << self.level

    @property
    def n_boxes(self):
        return self.n_side * self.n_side

    @property
    def width(self):
        return self.size / self.n_side

    @property
    def counts(self):
        return np.diff(self.starts)

    @property
    def centers(self):
        ids = np.arange(self.n_boxes)
        ix, iy = ids % self.n_side, ids // self.n_side
        return self.origin + self.width * ((ix + 0.5) + 1j * (iy + 0.5))

    def members(self, box):
        return self.order[self.starts[box] : self.starts[box + 1]]

    def nonempty(self):
        return np.flatnonzero(self.counts)


def build_grid(z, config: FmmConfig) -> GridDecomposition:
    z = np.asarray(z).astype(np.complex128, copy=False).ravel()
    n = 1 << config.level
    ox, oy = (float(v) for v in config.origin)
    size = float(config.size)
    x, y = z.real, z.imag
    ok = (
        np.isfinite(x)
        & np.isfinite(y)
        & (x >= ox)
        & (x <= ox + size)
        & (y >= oy)
        & (y <= oy + size)
    )
    if not ok.all():
        i = int(np.flatnonzero(~ok)[0])
        raise OutOfDomainError(i, complex(z[i]))
    ix = np.minimum(np.floor((x - ox) * (n / size)).astype(np.int64), n - 1)
    iy = np.minimum(np.floor((y - oy) * (n / size)).astype(np.int64), n - 1)
    box_of = iy * n + ix
    order = np.argsort(box_of, kind="stable")
    starts = np.zeros(n * n + 1, dtype=np.int64)
    np.cumsum(np.bincount(box_of, minlength=n * n), out=starts[1:])
    return GridDecomposition(config.level, complex(ox, oy), size, box_of, order, starts)


# ---------------------------------------------------------------- interaction lists


def _hierarchical_offsets():
    """Per child-parity ``(cx, cy)``: the 27 same-level offsets of the interaction list."""
    table = {}
    for cx in (0, 1):
        for cy in (0, 1):
            offs = []
            for dpy in (-1, 0, 1):
                for dpx in (-1, 0, 1):
                    for sy in (0, 1):
                        for sx in (0, 1):
                            ox = 2 * dpx + sx - cx
                            oy = 2 * dpy + sy - cy
                            if max(abs(ox), abs(oy)) > 1:
                                offs.append((ox, oy))
            table[cx, cy] = np.array(offs, dtype=np.int64)
    return table


_HIER_OFFSETS = _hierarchical_offsets()


def interaction_list_hierarchical(grid, box, periodic=False):
    """Interaction list of ``box``: children of the parent's neighbours, minus own neighbours.

    ``grid`` is a :class:`GridDecomposition` or a bare level.  With
    ``periodic=True`` indices wrap around the domain and every box gets exactly
    27 entries; below level 3 the wrapped entries can repeat or alias the box's
    own neighbourhood because the grid is narrower than the stencil.
    """
    level = grid.level if isinstance(grid, GridDecomposition) else int(grid)
    n = 1 << level
    box = int(box)
    if not 0 <= box < n * n:
        raise InvalidArgumentError(f"box {box} not in grid of {n * n} boxes")
    ix, iy = box % n, box // n
    offs = _HIER_OFFSETS[ix % 2, iy % 2]
    jx, jy = ix + offs[:, 0], iy + offs[:, 1]
    if periodic:
        jx, jy = jx % n, jy % n
    else:
        keep = (jx >= 0) & (jx < n) & (jy >= 0) & (jy < n)
        jx, jy = jx[keep], jy[keep]
    return np.sort(jy * n + jx)


@dataclass
class TranslationPlan:
    """(source box, target box) pairs sorted by target, then source."""

    src: np.ndarray
    tgt: np.ndarray

    @classmethod
    def from_pairs(cls, src, tgt):
        src = np.asarray(src, dtype=np.int64).ravel()
        tgt = np.asarray(tgt, dtype=np.int64).ravel()
        if src.shape != tgt.shape:
            raise InvalidArgumentError("source and target arrays differ in length")
        order = np.lexsort((src, tgt))
        return cls(src[order], tgt[order])

    def __len__(self):
        return self.src.shape[0]

    @property
    def targets(self):
        return np.unique(self.tgt)

    def sources_of(self, target):
        lo, hi = np.searchsorted(self.tgt, [target, target + 1])
        return self.src[lo:hi]


def idealized_plan(level, count=None):
    """Periodic hierarchical workload: every box translates its 27 interaction-list MEs.

    Pairs are generated target box by target box in id order; ``count``
    truncates the plan (default ``27 * 4**level``).
    """
    n = 1 << level
    nbox = n * n
    total = 27 * nbox if count is None else int(count)
    if total < 0 or total > 27 * nbox:
        raise InvalidArgumentError(f"count {total} does not fit level {level}")
    ntgt = -(-total // 27)
    tgt = np.arange(ntgt, dtype=np.int64)
    ix, iy = tgt % n, tgt // n
    src = np.empty((ntgt, 27), dtype=np.int64)
    for (cx, cy), offs in _HIER_OFFSETS.items():
        sel = (ix % 2 == cx) & (iy % 2 == cy)
        jx = (ix[sel, None] + offs[None, :, 0]) % n
        jy = (iy[sel, None] + offs[None, :, 1]) % n
        src[sel] = jy * n + jx
    src.sort(axis=1)
    src = src.ravel()[:total]
    tgt = np.repeat(tgt, 27)[:total]
    return TranslationPlan(src, tgt)


def level_for_translations(count):
    """Smallest level >= 3 whose periodic workload holds ``count`` translations."""
    level = 3
    while 27 * 4**level < count:
        level += 1
    return level


def far_pairs_single_level(grid: GridDecomposition) -> TranslationPlan:
    """All ordered pairs of distinct, non-empty, non-adjacent boxes."""
    ne = grid.nonempty()
    n = grid.n_side
    ix, iy = ne % n, ne // n
    srcs, tgts = [], []
    step = 1024
    for a in range(0, ne.size, step):
        t = slice(a, a + step)
        cheb = np.maximum(
            np.abs(ix[t, None] - ix[None, :]), np.abs(iy[t, None] - iy[None, :])
        )
        ti, si = np.nonzero(cheb > 1)
        tgts.append(ne[t][ti])
        srcs.append(ne[si])
    if not srcs:
        return TranslationPlan(np.zeros(0, np.int64), np.zeros(0, np.int64))
    return TranslationPlan.from_pairs(np.concatenate(srcs), np.concatenate(tgts))


def near_neighbors(grid: GridDecomposition):
    """``(n_boxes, 9)`` ascending Moore-neighbourhood ids (self included), ``-1`` padded."""
    n = grid.n_side
    ids = np.arange(grid.n_boxes)
    ix, iy = ids % n, ids // n
    out = np.full((grid.n_boxes, 9), -1, dtype=np.int64)
    col = 0
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            jx, jy = ix + dx, iy + dy
            ok = (jx >= 0) & (jx < n) & (jy >= 0) & (jy < n)
            out[ok, col] = (jy * n + jx)[ok]
            col += 1
    # row-major neighbour walk is already ascending; -1 slots are pushed last
    key = np.where(out < 0, np.iinfo(np.int64).max, out)
    return np.take_along_axis(out, np.argsort(key, axis=1, kind="stable"), axis=1)


# ---------------------------------------------------------------- expansions


@dataclass
class MultipoleExpansion:
    center: complex
    coeffs: np.ndarray


@dataclass
class LocalExpansion:
    center: complex
    coeffs: np.ndarray


@dataclass
class ExpansionSet:
    """Expansions for a whole grid, indexed by box id; ``mask`` marks boxes that have one."""

    centers: np.ndarray
    coeffs: np.ndarray
    mask: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.mask is None:
            self.mask = np.ones(self.centers.shape[0], dtype=bool)

    @property
    def p(self):
        return self.coeffs.shape[1]

    @classmethod
    def from_mapping(cls, mapping, n_boxes=None, p=None):
        """Build from ``{box id: MultipoleExpansion | LocalExpansion}``."""
        if n_boxes is None:
            n_boxes = max(mapping) + 1 if mapping else 0
        if p is None:
            p = len(next(iter(mapping.values())).coeffs) if mapping else 1
        centers = np.zeros(n_boxes, dtype=np.complex128)
        coeffs = np.zeros((n_boxes, p), dtype=np.complex128)
        mask = np.zeros(n_boxes, dtype=bool)
        for box, e in mapping.items():
            centers[box] = e.center
            coeffs[box] = e.coeffs
            mask[box] = True
        return cls(centers, coeffs, mask)

    def to_mapping(self, kind=LocalExpansion):
        return {
            int(b): kind(complex(self.centers[b]), self.coeffs[b].copy())
            for b in np.flatnonzero(self.mask)
        }


def p2m(z, q, center, p) -> MultipoleExpansion:
    z = np.asarray(z, dtype=np.complex128).ravel()
    q = np.asarray(q, dtype=np.float64).ravel()
    if p < 1:
        raise InvalidArgumentError("p must be >= 1")
    dz = z - center
    m = np.zeros(p, dtype=np.complex128)
    cur = q.astype(np.complex128)
    for k in range(p):
        m[k] = cur.sum()
        cur = cur * dz
    return MultipoleExpansion(complex(center), m)


@njit
def _p2m_boxes_numba(z, q, box_of, centers, out):
    p = out.shape[1]
    for i in range(z.shape[0]):
        b = box_of[i]
        dz = z[i] - centers[b]
        cur = q[i] + 0j
        for k in range(p):
            out[b, k] += cur
            cur = cur * dz


def _p2m_boxes_numpy(z, q, box_of, centers, out):
    dz = z - centers[box_of]
    cur = q.astype(out.dtype)
    for k in range(out.shape[1]):
        np.add.at(out[:, k], box_of, cur)
        cur = cur * dz


def m2l_element(n, k, t):
    t = complex(t)
    if t == 0:
        raise SingularTranslationError("translation vector is zero")
    return (-1) ** n * binomial(n + k, k) * t ** (-(k + n + 1))


@njit
def _m2l_row(m, t, out):
    p = m.shape[0]
    u = 1.0 / t
    row = u
    sign = 1.0
    for n in range(p):
        cur = row
        b = 1.0
        acc = 0.0 * u
        for k in range(p):
            acc += (b * cur) * m[k]
            cur = cur * u
            b = b * (n + k + 1) / (k + 1)
        out[n] = sign * acc
        row = row * u
        sign = -sign


@njit
def _m2l_diag(m, t, out):
    p = m.shape[0]
    u = 1.0 / t
    for n in range(p):
        out[n] = 0.0
    pw = u
    corner = 1.0  # C(s, p-1), the binomial where a long diagonal enters the matrix
    for s in range(2 * p - 1):
        if s < p:
            n0 = 0
            b = 1.0
        else:
            n0 = s - p + 1
            corner = corner * s / n0
            b = corner
        n1 = min(s, p - 1)
        sign = 1.0 if n0 % 2 == 0 else -1.0
        for n in range(n0, n1 + 1):
            out[n] += (sign * b * pw) * m[s - n]
            b = b * (s - n) / (n + 1)
            sign = -sign
        pw = pw * u


@njit
def _m2l_pairs_numba(mcoef, src, t, a, b, out, diagonal):
    for i in range(a, b):
        if diagonal:
            _m2l_diag(mcoef[src[i]], t[i], out[i])
        else:
            _m2l_row(mcoef[src[i]], t[i], out[i])


def _m2l_pairs_numpy(mcoef, src, t, a, b, out, diagonal):
    p = mcoef.shape[1]
    m = mcoef[src[a:b]]
    u = 1.0 / t[a:b]
    pw = np.cumprod(np.repeat(u[:, None], 2 * p - 1, axis=1), axis=1)  # u**(s+1)
    res = out[a:b]
    if diagonal:
        res[:] = 0
        for s in range(2 * p - 1):
            ns = np.arange(max(0, s - p + 1), min(s, p - 1) + 1)
            coef = np.array([(-1) ** n * binomial(s, n) for n in ns], dtype=np.float64)
            res[:, ns] += (coef * pw[:, s : s + 1]) * m[:, s - ns]
    else:
        k = np.arange(p)
        for n in range(p):
            coef = np.array([binomial(n + kk, kk) for kk in k], dtype=np.float64)
            res[:, n] = (-1) ** n * np.sum(coef * pw[:, n : n + p] * m, axis=1)


def m2l_translate(me: MultipoleExpansion, local_center, p=None, traversal="row", backend=None):
    if traversal not in TRAVERSALS:
        raise InvalidArgumentError(f"traversal must be one of {TRAVERSALS}")
    m = np.asarray(me.coeffs)
    p = m.shape[0] if p is None else p
    if p != m.shape[0]:
        raise InvalidArgumentError(f"expansion has {m.shape[0]} terms, expected {p}")
    t = complex(local_center) - complex(me.center)
    if t == 0:
        raise SingularTranslationError("multipole and local centres coincide")
    out = np.zeros((1, p), dtype=m.dtype if np.iscomplexobj(m) else np.complex128)
    kern = pick(_m2l_pairs_numba, _m2l_pairs_numpy, backend)
    kern(
        m.astype(out.dtype)[None, :],
        np.zeros(1, np.int64),
        np.array([t], dtype=out.dtype),
        0,
        1,
        out,
        traversal == "diagonal",
    )
    return LocalExpansion(complex(local_center), out[0])


@njit
def _reduce_numba(scratch, tgt, out):
    for i in range(tgt.shape[0]):
        row = out[tgt[i]]
        for k in range(scratch.shape[1]):
            row[k] += scratch[i, k]


def _reduce_numpy(scratch, tgt, out):
    # add.at is unbuffered and applies updates in index order
    np.add.at(out, tgt, scratch)


def m2l_batch(
    plan: TranslationPlan,
    expansions,
    p=None,
    traversal="row",
    threads=1,
    target_centers=None,
    chunk_pairs=8192,
    backend=None,
):
    """Translate every planned ME and reduce the results per target box.

    ``expansions`` is an :class:`ExpansionSet` (or a ``{box: MultipoleExpansion}``
    mapping).  Translations run chunk by chunk; within a chunk they are split
    across ``threads`` workers, then the chunk is reduced sequentially in plan
    order, so each target accumulates its sources in ascending id order and the
    output is bit-identical for any thread count or chunk size.

    Returns ``(ExpansionSet of local expansions, KernelCounters)``; the counters'
    ``phases`` hold separate ``kernel`` and ``reduction`` wall times.
    """
    if traversal not in TRAVERSALS:
        raise InvalidArgumentError(f"traversal must be one of {TRAVERSALS}")
    if not isinstance(expansions, ExpansionSet):
        n_boxes = None
        if len(plan):
            n_boxes = int(max(plan.src.max(), plan.tgt.max())) + 1
            if expansions:
                n_boxes = max(n_boxes, max(expansions) + 1)
        expansions = ExpansionSet.from_mapping(expansions, n_boxes=n_boxes, p=p)
    p = expansions.p if p is None else p
    if p != expansions.p:
        raise InvalidArgumentError(f"expansions have {expansions.p} terms, expected {p}")
    missing = ~expansions.mask[plan.src]
    if missing.any():
        raise PlanConsistencyError(
            f"source box {int(plan.src[np.argmax(missing)])} has no multipole expansion"
        )
    mcoef = np.ascontiguousarray(expansions.coeffs)
    cdtype = mcoef.dtype
    tcent = expansions.centers if target_centers is None else np.asarray(target_centers)
    t_all = (tcent[plan.tgt] - expansions.centers[plan.src]).astype(cdtype)
    if np.any(t_all == 0):
        raise SingularTranslationError("a planned translation has coincident centres")

    kern = pick(_m2l_pairs_numba, _m2l_pairs_numpy, backend)
    reduce = pick(_reduce_numba, _reduce_numpy, backend)
    diagonal = traversal == "diagonal"
    out = np.zeros((tcent.shape[0], p), dtype=cdtype)
    scratch = np.empty((min(chunk_pairs, max(len(plan), 1)), p), dtype=cdtype)
    t_kernel = t_reduce = 0.0
    for a in range(0, len(plan), chunk_pairs):
        b = min(a + chunk_pairs, len(plan))
        src, t = plan.src[a:b], t_all[a:b]
        buf = scratch[: b - a]
        t0 = time.perf_counter()
        run_ranges(lambda i, j: kern(mcoef, src, t, i, j, buf, diagonal), b - a, threads)
        t1 = time.perf_counter()
        reduce(buf, plan.tgt[a:b], out)
        t_kernel += t1 - t0
        t_reduce += time.perf_counter() - t1

    mask = np.zeros(tcent.shape[0], dtype=bool)
    mask[plan.tgt] = True
    npairs = len(plan)
    csize = np.dtype(cdtype).itemsize
    counters = KernelCounters(
        arithmetic_ops=npairs * m2l_ops_per_translation(p),
        bytes_read=npairs * p * csize,
        bytes_written=npairs * p * csize,
        elapsed_seconds=t_kernel + t_reduce,
        phases={"kernel": t_kernel, "reduction": t_reduce},
    )
    return ExpansionSet(np.asarray(tcent), out, mask), counters


# ---------------------------------------------------------------- evaluation


@njit
def _horner_complex(coeffs, dz):
    p = coeffs.shape[0]
    y = coeffs[p - 1]
    for n in range(p - 2, -1, -1):
        y = coeffs[n] + dz * y
    return y


def l2p(le: LocalExpansion, z):
    """Evaluate a local expansion at one point or an array of points."""
    c = np.asarray(le.coeffs)
    dz = np.asarray(z) - le.center
    y = np.full(np.shape(dz), c[-1], dtype=np.result_type(c, dz))
    for cn in c[-2::-1]:
        y = cn + dz * y
    return complex(y) if np.ndim(y) == 0 else y


@njit
def _l2p_particles_numba(lcoef, lcent, box_of, z, a, b, out):
    for i in range(a, b):
        bx = box_of[i]
        out[i] = _horner_complex(lcoef[bx], z[i] - lcent[bx])


def _l2p_particles_numpy(lcoef, lcent, box_of, z, a, b, out):
    c = lcoef[box_of[a:b]]
    dz = z[a:b] - lcent[box_of[a:b]]
    y = c[:, -1].copy()
    for n in range(c.shape[1] - 2, -1, -1):
        y = c[:, n] + dz * y
    out[a:b] = y


@njit
def _p2p_numba(zs, qs, targets, a, b, out):
    for j in range(a, b):
        y = targets[j]
        acc = 0.0 * y
        for i in range(zs.shape[0]):
            d = y - zs[i]
            if d != 0:
                acc += qs[i] / d
        out[j] = acc


def _p2p_numpy(zs, qs, targets, a, b, out):
    step = 512
    for lo in range(a, b, step):
        hi = min(lo + step, b)
        d = targets[lo:hi, None] - zs[None, :]
        zero = d == 0
        with np.errstate(divide="ignore", invalid="ignore"):
            terms = np.where(zero, 0, qs[None, :] / np.where(zero, 1, d))
        out[lo:hi] = terms.sum(axis=1)


def p2p(zs, qs, targets, threads=1, backend=None):
    """Direct sum ``f(y) = sum_i q_i / (y - z_i)``, skipping exact coincidences."""
    zs = np.asarray(zs, dtype=np.complex128).ravel()
    qs = np.asarray(qs, dtype=np.float64).ravel()
    targets = np.asarray(targets, dtype=np.complex128).ravel()
    out = np.zeros(targets.shape[0], dtype=np.complex128)
    kern = pick(_p2p_numba, _p2p_numpy, backend)
    run_ranges(lambda a, b: kern(zs, qs, targets, a, b, out), targets.shape[0], threads)
    return out


@njit
def _near_numba(z, q, starts, neigh, boxes, a, b, out):
    for bi in range(a, b):
        box = boxes[bi]
        for j in range(starts[box], starts[box + 1]):
            y = z[j]
            acc = 0.0 * y
            for c in range(neigh.shape[1]):
                nb = neigh[box, c]
                if nb < 0:
                    break
                for i in range(starts[nb], starts[nb + 1]):
                    d = y - z[i]
                    if d != 0:
                        acc += q[i] / d
            out[j] = acc


def _near_numpy(z, q, starts, neigh, boxes, a, b, out):
    for box in boxes[a:b]:
        tj = slice(starts[box], starts[box + 1])
        nbs = neigh[box][neigh[box] >= 0]
        idx = np.concatenate([np.arange(starts[nb], starts[nb + 1]) for nb in nbs])
        d = z[tj, None] - z[None, idx]
        zero = d == 0
        terms = np.where(zero, 0, q[None, idx] / np.where(zero, 1, d))
        out[tj] = terms.sum(axis=1)


def fmm_evaluate(z, q, config: FmmConfig, threads=1, backend=None):
    """Field ``f(z_j) = sum_{i != j} q_i / (z_j - z_i)`` at every particle.

    Near field (own box plus Moore neighbours) is summed directly; everything
    else arrives through P2M -> M2L (reduced per box) -> L2P.  Returns
    ``(values, KernelCounters)`` with values in the input particle order.
    """
    rdtype, cdtype = dtypes_for(config.precision)
    t_start = time.perf_counter()
    z = np.asarray(z).astype(np.complex128, copy=False).ravel()
    q = np.asarray(q, dtype=np.float64).ravel()
    if z.shape != q.shape:
        raise InvalidArgumentError("positions and weights differ in length")
    grid = build_grid(z, config)
    p = config.p
    order = grid.order
    zs = z[order].astype(cdtype)
    qs = q[order].astype(rdtype)
    box_sorted = grid.box_of[order]
    centers = grid.centers.astype(cdtype)

    mcoef = np.zeros((grid.n_boxes, p), dtype=cdtype)
    pick(_p2m_boxes_numba, _p2m_boxes_numpy, backend)(zs, qs, box_sorted, centers, mcoef)
    mask = grid.counts > 0
    mes = ExpansionSet(centers, mcoef, mask)
    plan = far_pairs_single_level(grid)
    neigh = near_neighbors(grid)
    boxes = grid.nonempty()
    t_setup = time.perf_counter() - t_start

    les, m2l_counters = m2l_batch(
        plan, mes, p, config.traversal, threads, chunk_pairs=config.chunk_pairs,
        backend=backend,
    )

    t0 = time.perf_counter()
    n = z.shape[0]
    far = np.zeros(n, dtype=cdtype)
    l2p_kern = pick(_l2p_particles_numba, _l2p_particles_numpy, backend)
    lcoef = les.coeffs
    run_ranges(lambda a, b: l2p_kern(lcoef, centers, box_sorted, zs, a, b, far), n, threads)
    near = np.zeros(n, dtype=cdtype)
    near_kern = pick(_near_numba, _near_numpy, backend)
    starts = grid.starts
    run_ranges(
        lambda a, b: near_kern(zs, qs, starts, neigh, boxes, a, b, near), boxes.size, threads
    )
    out = np.empty(n, dtype=cdtype)
    out[order] = near + far
    t_eval = time.perf_counter() - t0

    counts = grid.counts
    nb_counts = np.where(neigh >= 0, counts[np.maximum(neigh, 0)], 0).sum(axis=1)
    interactions = int(np.dot(counts, nb_counts))
    csize, rsize = np.dtype(cdtype).itemsize, np.dtype(rdtype).itemsize
    local = KernelCounters(
        arithmetic_ops=8 * n * p + (8 * p + 2) * n + P2P_OPS * interactions,
        bytes_read=(csize + rsize) * (n + interactions) + csize * p * n,
        bytes_written=csize * (n + p * int(mask.sum())),
        elapsed_seconds=t_setup + t_eval,
        phases={"setup": t_setup, "evaluation": t_eval},
    )
    return out, m2l_counters + local


def direct_sum(z, q, threads=1, backend=None):
    """O(N^2) reference for :func:`fmm_evaluate` (all pairs, self excluded)."""
    return p2p(z, q, z, threads=threads, backend=backend)
