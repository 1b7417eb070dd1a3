import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fastsum import fgt
from fastsum.core import DatasetSpec, enumerate_multi_indices, generate_dataset
from fastsum.errors import InvalidArgumentError, RangeError

mpmath = pytest.importorskip("mpmath")

SQ2 = math.sqrt(2.0)


def _h_exact(n, t):
    t = mpmath.mpf(t)
    return float(mpmath.exp(-t * t) * mpmath.hermite(n, t))


def _cluster(rng, n, center, radius, d=2):
    return np.asarray(center) + radius * rng.uniform(-1, 1, (n, d)), rng.random(n)


# ---------------------------------------------------------------- direct


def test_direct_examples(backend):
    assert fgt.direct_gauss([[0.2, 0.3]], [2.0], [[0.2, 0.3]], 0.1, backend=backend)[0] == 2.0
    v = fgt.direct_gauss([[0.0]], [1.0], [[SQ2 * 0.1]], 0.1, backend=backend)[0]
    assert v == pytest.approx(math.exp(-1), rel=1e-15)
    assert fgt.direct_gauss(np.zeros((0, 2)), [], [[0.0, 0.0]], 0.1, backend=backend)[0] == 0.0
    with pytest.raises(InvalidArgumentError):
        fgt.direct_gauss(np.zeros((3, 3)), np.ones(3), np.zeros((2, 2)), 0.1)


# ---------------------------------------------------------------- Hermite functions


@pytest.mark.parametrize("be", fgt.HERMITE_BACKENDS)
def test_hermite_function_examples(be):
    assert fgt.hermite_function(0, 0.0, be) == 1.0
    assert fgt.hermite_function(1, 0.0, be) == 0.0
    assert fgt.hermite_function(2, 0.0, be) == -2.0
    with pytest.raises(RangeError):
        fgt.hermite_function(64, 0.1, be)


def test_hermite_poly_coeffs_exact():
    c = fgt.hermite_poly_coeffs(4)
    assert c[2] == [4, 0, -2]
    assert c[4] == [16, 0, -48, 0, 12]
    table = fgt.hermite_poly_table(24)
    assert table.shape == (2, 25, 25)
    # hi + lo reproduces every 64-bit integer coefficient exactly
    for n, row in enumerate(fgt.hermite_poly_coeffs(24)):
        hi, lo = table[0, n, 24 - n:], table[1, n, 24 - n:]
        assert [int(h) + int(l) for h, l in zip(hi, lo)] == row


@pytest.mark.parametrize("be", fgt.HERMITE_BACKENDS)
def test_hermite_against_high_precision(be, rng):
    ts = rng.uniform(-4, 4, 40)
    for n in (0, 1, 5, 13, 24, 30):
        got = np.array([fgt.hermite_function(n, t, be) for t in ts])
        ref = np.array([_h_exact(n, t) for t in ts])
        assert np.max(np.abs(got - ref) / np.abs(ref)) < 1e-10


@pytest.mark.parametrize("be", fgt.HERMITE_BACKENDS)
def test_vectorised_hermite_matches_scalar(be, rng):
    ts = rng.uniform(-4, 4, 25)
    vec = fgt.hermite_functions(22, ts, be)
    for i, t in enumerate(ts):
        for n in (0, 7, 22):
            assert vec[i, n] == pytest.approx(fgt.hermite_function(n, t, be), rel=1e-12, abs=1e-300)


@given(st.floats(-6, 6), st.integers(0, 30))
def test_hermite_parity(t, n):
    assert fgt.hermite_function(n, -t) == pytest.approx((-1) ** n * fgt.hermite_function(n, t), rel=1e-12, abs=1e-280)


# ---------------------------------------------------------------- coefficients


def test_hermite_coeffs_examples():
    h = fgt.hermite_coeffs([[0.3, 0.4]], [2.5], [0.3, 0.4], 4, 0.1)
    assert h.coeffs[0] == 2.5 and np.all(h.coeffs[1:] == 0)
    h1 = fgt.hermite_coeffs([[0.5 + SQ2 * 0.2]], [1.0], [0.5], 3, 0.2)
    np.testing.assert_allclose(h1.coeffs, [1, 1, 0.5], rtol=1e-14)
    assert np.all(fgt.hermite_coeffs(np.zeros((0, 2)), [], [0, 0], 3, 0.1).coeffs == 0)


def test_taylor_coeffs_examples():
    t = fgt.taylor_coeffs([[0.7]], [1.0], [0.7], 3, 0.1)
    assert t.coeffs[0] == 1.0 and t.coeffs[1] == 0.0
    assert np.all(fgt.taylor_coeffs(np.zeros((0, 2)), [], [0, 0], 3, 0.1).coeffs == 0)


def test_taylor_coeff_orientation():
    # B_b must equal h_b(u_x - u_c) / b!; the (x - t_C) argument paired with
    # (-1)^|b| flips odd terms
    sigma, x, c = 0.1, 0.43, 0.40
    u = (x - c) / (SQ2 * sigma)
    B = fgt.taylor_coeffs([[x]], [1.0], [c], 6, sigma).coeffs
    expect = [fgt.hermite_function(n, u) / math.factorial(n) for n in range(6)]
    np.testing.assert_allclose(B, expect, rtol=1e-13)
    flipped = [(-1) ** n * e for n, e in enumerate(expect)]
    assert not np.allclose(B, flipped)


@pytest.mark.parametrize("d", [1, 2, 3])
def test_coefficients_linear_in_weights(d, rng):
    x = rng.random((30, d))
    q1, q2 = rng.random(30), rng.random(30)
    c = np.full(d, 0.5)
    for make in (lambda q: fgt.hermite_coeffs(x, q, c, 5, 0.3).coeffs,
                 lambda q: fgt.taylor_coeffs(x, q, c, 5, 0.3).coeffs):
        lhs = make(3 * q1 - 2 * q2)
        rhs = 3 * make(q1) - 2 * make(q2)
        assert np.max(np.abs(lhs - rhs)) <= 1e-12 * np.max(np.abs(rhs))


# ---------------------------------------------------------------- translation and evaluation


def test_h2t_centred_unit():
    p, d = 5, 2
    A = np.zeros(p**d)
    A[0] = 1.0
    t = fgt.h2t_translate(fgt.HermiteExpansion(np.array([0.2, 0.2]), A), [0.2, 0.2], p, 0.1)
    for (b1, b2), v in zip(enumerate_multi_indices(p, d), t.coeffs):
        if b1 % 2 or b2 % 2:
            assert v == 0.0
        else:
            scale = (-1) ** (b1 + b2) / (math.factorial(b1) * math.factorial(b2))
            assert v == pytest.approx(scale * fgt.hermite_function(b1, 0) * fgt.hermite_function(b2, 0))
    zero = fgt.h2t_translate(fgt.HermiteExpansion(np.zeros(2), np.zeros(p**d)), [1, 1], p, 0.1)
    assert np.all(zero.coeffs == 0)


def test_h2t_then_taylor_matches_hermite(rng):
    sigma, p = 0.1, 12
    sc, tc = np.array([0.3, 0.3]), np.array([0.3 + 4 * sigma / SQ2, 0.3 + 4 * sigma / SQ2])
    x, q = _cluster(rng, 40, sc, 0.5 * sigma)
    y, _ = _cluster(rng, 30, tc, 0.5 * sigma)
    h = fgt.hermite_coeffs(x, q, sc, p, sigma)
    via_t = fgt.taylor_eval(fgt.h2t_translate(h, tc, p, sigma), y, sigma)
    direct = fgt.hermite_eval(h, y, sigma)
    assert np.max(np.abs(via_t - direct)) <= 1e-8 * q.sum()


def test_hermite_eval_examples(rng):
    sigma = 0.2
    A = np.zeros(6)
    A[0] = 1.0
    h = fgt.HermiteExpansion(np.array([0.4]), A)
    y = np.array([[0.1], [0.4], [0.9]])
    np.testing.assert_allclose(fgt.hermite_eval(h, y, sigma), fgt.direct_gauss([[0.4]], [1.0], y, sigma), rtol=1e-14)
    assert np.all(fgt.hermite_eval(fgt.HermiteExpansion(np.zeros(1), np.zeros(6)), y, sigma) == 0)
    # 64-source box, p=12, targets at least 2 sigma outside
    x, q = _cluster(rng, 64, [0.5, 0.5], sigma / SQ2 * 0.5)
    ang = rng.uniform(0, 2 * np.pi, 50)
    r = rng.uniform(2 * sigma, 4 * sigma, 50) + sigma
    yt = np.c_[0.5 + r * np.cos(ang), 0.5 + r * np.sin(ang)]
    got = fgt.hermite_eval(fgt.hermite_coeffs(x, q, [0.5, 0.5], 12, sigma), yt, sigma)
    assert np.max(np.abs(got - fgt.direct_gauss(x, q, yt, sigma))) <= 1e-9 * q.sum()


def test_taylor_eval_examples():
    B = np.zeros(4)
    B[0] = 3.0
    assert fgt.taylor_eval(fgt.TaylorExpansion(np.array([0.2]), B), [[0.2]], 0.1)[0] == 3.0
    B = np.zeros(4)
    B[1] = 1.0
    assert fgt.taylor_eval(fgt.TaylorExpansion(np.array([0.2]), B), [[0.2 + SQ2 * 0.1]], 0.1)[0] == pytest.approx(1.0)


@pytest.mark.parametrize("strategy", ["hermite", "taylor", "hermite_to_taylor"])
def test_forced_strategy_pair(strategy, rng):
    sigma = 0.1
    cfg = fgt.FgtConfig(sigma=sigma, p=12)
    side = cfg.side
    for _ in range(5):
        dist = rng.uniform(3 * sigma, 6 * sigma)
        ang = rng.uniform(0, 2 * np.pi)
        sc = np.array([0.5, 0.5])
        tc = sc + dist * np.array([np.cos(ang), np.sin(ang)])
        x, q = _cluster(rng, 64, sc, side / 2)
        y, _ = _cluster(rng, 64, tc, side / 2)
        ref = fgt.evaluate_box_pair(x, q, y, sc, tc, cfg, "direct")
        got = fgt.evaluate_box_pair(x, q, y, sc, tc, cfg, strategy)
        assert np.max(np.abs(got - ref)) <= 1e-7 * q.sum()


# ---------------------------------------------------------------- planning


def test_grid_boxes_per_axis():
    cfg = fgt.FgtConfig(sigma=0.1, r=0.5)
    g = fgt.build_fgt_grid([[0, 0], [1, 1]], [[0.5, 0.5]], cfg)
    assert g.shape == (15, 15)
    assert g.side == pytest.approx(0.5 * SQ2 * 0.1)


@given(st.integers(0, 2**31), st.sampled_from([1, 2, 3]), st.floats(0.05, 0.5))
def test_grid_conserves_points(seed, d, sigma):
    ps = generate_dataset(DatasetSpec(120, d, seed))
    ys = generate_dataset(DatasetSpec(70, d, seed + 1))
    g = fgt.build_fgt_grid(ps.x, ys.x, fgt.FgtConfig(sigma=sigma, dimension=d))
    assert g.src_starts[-1] == 120 and g.tgt_starts[-1] == 70
    assert np.bincount(g.src_box, minlength=g.n_boxes).tolist() == np.diff(g.src_starts).tolist()
    # each point lies in its box
    lo = g.lo + g.box_coords(g.src_box).reshape(-1, d) * g.side
    assert np.all(ps.x >= lo - 1e-12) and np.all(ps.x <= lo + g.side + 1e-12)


def test_grid_single_sigma_ball():
    rng = np.random.default_rng(0)
    x = 0.5 + 0.1 * rng.uniform(-1, 1, (50, 2))
    g = fgt.build_fgt_grid(x, x, fgt.FgtConfig(sigma=0.1, r=1.0))
    assert np.count_nonzero(np.diff(g.src_starts)) <= 4


def test_neighbor_cutoff_examples():
    assert fgt.neighbor_cutoff(fgt.FgtConfig(r=0.5, eps_cut=1e-12)) == 11
    assert fgt.neighbor_cutoff(fgt.FgtConfig(r=1.0, eps_cut=math.exp(-9))) == 3
    assert fgt.neighbor_cutoff(fgt.FgtConfig(eps_cut=0.9999)) in (0, 1)


@given(st.floats(1e-15, 0.5), st.floats(1e-15, 0.5), st.floats(0.1, 1.0))
def test_neighbor_cutoff_monotone(e1, e2, r):
    lo, hi = sorted((e1, e2))
    assert fgt.neighbor_cutoff(fgt.FgtConfig(r=r, eps_cut=lo)) >= fgt.neighbor_cutoff(fgt.FgtConfig(r=r, eps_cut=hi))
    n = fgt.neighbor_cutoff(fgt.FgtConfig(r=r, eps_cut=lo))
    assert math.exp(-(n * r) ** 2) <= lo
    assert n == 0 or math.exp(-((n - 1) * r) ** 2) > lo


def test_select_strategy_examples():
    S = fgt.Strategy
    assert fgt.select_strategy(2, 2, 9, 2) is S.DIRECT
    assert fgt.select_strategy(10**4, 3, 9, 2) is S.HERMITE
    assert fgt.select_strategy(10**4, 10**4, 9, 2) is S.HERMITE_TO_TAYLOR
    assert fgt.select_strategy(0, 0, 9, 2) is S.DIRECT  # all zero: tie goes to direct
    assert fgt.select_strategy(3, 10**4, 9, 2) is S.TAYLOR
    with pytest.raises(InvalidArgumentError):
        fgt.select_strategy(-1, 2, 9, 2)


def test_config_validation():
    for bad in ({"sigma": 0}, {"p": 0}, {"r": 1.5}, {"eps_cut": 1.0}, {"dimension": 4},
                {"hermite_backend": "magic"}, {"strategy": "psychic"}):
        with pytest.raises(InvalidArgumentError):
            fgt.FgtConfig(**bad)
    with pytest.raises(RangeError):
        fgt.FgtConfig(p=33)


# ---------------------------------------------------------------- end to end


def _rel(a, b):
    return np.max(np.abs(a - b)) / np.max(np.abs(b))


def test_single_coincident_source():
    v, _ = fgt.fgt_evaluate([[0.2, 0.7]], [3.0], [[0.2, 0.7]], fgt.FgtConfig())
    assert v[0] == 3.0


@pytest.mark.parametrize("d,n,sigma", [(1, 3000, 0.02), (2, 1500, 0.1), (3, 800, 0.25)])
def test_fgt_accuracy_dims(d, n, sigma, backend):
    ps = generate_dataset(DatasetSpec(n, d, 11, "uniform01"))
    ys = generate_dataset(DatasetSpec(n // 2, d, 12)).x
    cfg = fgt.FgtConfig(sigma=sigma, p=10, dimension=d)
    v, c = fgt.fgt_evaluate(ps.x, ps.q, ys, cfg, backend=backend)
    assert _rel(v, fgt.direct_gauss(ps.x, ps.q, ys, sigma)) < 1e-7
    assert c.arithmetic_ops > 0 and c.bytes_read > 0 and c.bytes_written > 0


@pytest.mark.parametrize("strategy", [s.label for s in fgt.Strategy])
def test_fgt_forced_strategies(strategy, backend):
    ps = generate_dataset(DatasetSpec(600, 2, 5))
    cfg = fgt.FgtConfig(sigma=0.15, p=12, strategy=strategy)
    v, _ = fgt.fgt_evaluate(ps.x, ps.q, ps.x, cfg, backend=backend)
    assert _rel(v, fgt.direct_gauss(ps.x, ps.q, ps.x, 0.15)) < 1e-7


def test_fgt_backends_agree(rng):
    ps = generate_dataset(DatasetSpec(1200, 2, 9))
    for be in fgt.HERMITE_BACKENDS:
        cfg = fgt.FgtConfig(sigma=0.08, p=9, hermite_backend=be)
        a, _ = fgt.fgt_evaluate(ps.x, ps.q, ps.x, cfg, backend="numba")
        b, _ = fgt.fgt_evaluate(ps.x, ps.q, ps.x, cfg, backend="numpy")
        assert _rel(a, b) < 1e-13


def test_fgt_invariances():
    ps = generate_dataset(DatasetSpec(800, 2, 21, "uniform01"))
    ys = generate_dataset(DatasetSpec(300, 2, 22)).x
    cfg = fgt.FgtConfig(sigma=0.1, p=16)
    base, _ = fgt.fgt_evaluate(ps.x, ps.q, ys, cfg)
    shift = np.array([0.375, -1.25])
    moved, _ = fgt.fgt_evaluate(ps.x + shift, ps.q, ys + shift, cfg)
    mirrored, _ = fgt.fgt_evaluate(-ps.x, ps.q, -ys, cfg)
    assert _rel(moved, base) <= 1e-12
    assert _rel(mirrored, base) <= 1e-12
    # linearity in the weights
    q2 = np.cos(np.arange(800))
    v2, _ = fgt.fgt_evaluate(ps.x, q2, ys, cfg)
    v12, _ = fgt.fgt_evaluate(ps.x, 2 * ps.q - q2, ys, cfg)
    assert np.max(np.abs(v12 - (2 * base - v2))) <= 1e-12 * np.max(np.abs(2 * base - v2))


def test_fgt_positivity():
    ps = generate_dataset(DatasetSpec(1000, 2, 4, "uniform01"))
    v, _ = fgt.fgt_evaluate(ps.x, ps.q, ps.x, fgt.FgtConfig(sigma=0.05, p=8))
    assert v.min() >= -1e-8
    direct_only, _ = fgt.fgt_evaluate(ps.x, ps.q, ps.x, fgt.FgtConfig(sigma=0.05, strategy="direct"))
    assert direct_only.min() >= 0


def test_fgt_dimension_mismatch():
    with pytest.raises(InvalidArgumentError):
        fgt.fgt_evaluate(np.zeros((3, 2)), np.ones(3), np.zeros((2, 3)), fgt.FgtConfig())
    with pytest.raises(InvalidArgumentError):
        fgt.fgt_evaluate(np.zeros((3, 2)), np.ones(2), np.zeros((2, 2)), fgt.FgtConfig())


def test_plan_shape():
    ps = generate_dataset(DatasetSpec(4096, 2, 7))
    cfg = fgt.FgtConfig(sigma=0.1, p=12)
    plan = fgt.plan_interactions(fgt.build_fgt_grid(ps.x, ps.x, cfg), cfg)
    assert plan.n_cut == 11
    # pairs sorted by target, then source
    key = plan.tgt * 10**6 + plan.src
    assert np.all(np.diff(key) > 0)
    # the auto plan uses more than one strategy on this workload
    assert np.count_nonzero(plan.counts()) >= 2


# ---------------------------------------------------------------- batched Hermite evaluation


def test_hermite_batch_chunking(backend):
    rng = np.random.default_rng(3)
    p, d, sigma = 6, 2, 0.2
    centers = rng.random((40, d))
    coeffs = rng.standard_normal((40, p**d))
    y = rng.random((100, d))
    a = fgt.hermite_eval_batch(coeffs, centers, y, p, sigma, chunk_bytes=16384, backend=backend)
    b = fgt.hermite_eval_batch(coeffs, centers, y, p, sigma, chunk_bytes=1, backend=backend)
    np.testing.assert_array_equal(a, b)
    ref = sum(fgt.hermite_eval(fgt.HermiteExpansion(centers[k], coeffs[k]), y, sigma) for k in range(40))
    np.testing.assert_allclose(a, ref, rtol=1e-12, atol=1e-12 * np.abs(ref).max())
    assert fgt.clusters_per_chunk(p, d, 16384) == 16384 // ((36 + 2) * 8)
