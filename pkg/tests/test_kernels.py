import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import tilefact.kernels as K
from oracles import (cholesky_loop, forward_unit_lower, geqrt_qt, gepp_loop, matmul_loop,
                     tsqrt_qt)

EPS = 2.0 ** -52
CASES = [(b, s) for b in (4, 8, 32) for s in (b, b // 2, b // 4)]


def rel(x, ref):
    return np.abs(x - ref).max() / max(np.abs(ref).max(), 1e-300)


def rnd(seed, *shape):
    return np.random.default_rng(seed).standard_normal(shape)


# --------------------------------------------------------------------------
# Cholesky

def test_potf2_examples():
    a = np.array([[4.0]])
    K.potf2(a)
    assert a.tolist() == [[2.0]]
    a = np.eye(3)
    K.potf2(a)
    assert np.array_equal(a, np.eye(3))
    a = np.array([[4.0, 2.0], [2.0, 5.0]])
    K.potf2(a)
    assert np.allclose(a, [[2.0, 0.0], [1.0, 2.0]], atol=0, rtol=1e-15)


def test_potf2_matches_loop_and_raises():
    g = rnd(1, 8, 8)
    a = g @ g.T + 8 * np.eye(8)
    ref = cholesky_loop(a)
    K.potf2(a)
    assert rel(a, ref) < 1e-14
    bad = np.diag([1.0, -1.0, 2.0])
    with pytest.raises(K.NotPositiveDefiniteError) as info:
        K.potf2(bad)
    assert info.value.index == 1


def test_trsm_examples():
    a = rnd(2, 4, 4)
    a0 = a.copy()
    K.trsm(np.eye(4), a)
    assert np.array_equal(a, a0)
    a = np.array([[2.0, 4.0], [6.0, 8.0]])
    K.trsm(2 * np.eye(2), a)
    assert a.tolist() == [[1.0, 2.0], [3.0, 4.0]]
    l = np.tril(rnd(3, 4, 4)) + 4 * np.eye(4)
    a = rnd(4, 4, 4)
    a0 = a.copy()
    K.trsm(l, a)
    assert rel(matmul_loop(a, l.T), a0) < 1e-13
    with pytest.raises(K.SingularTriangleError):
        K.trsm(np.diag([1.0, 0.0]), np.ones((2, 2)))


def test_gsmm_examples():
    a = rnd(5, 4, 4)
    a0 = a.copy()
    K.gsmm(np.zeros((4, 4)), rnd(6, 4, 4), a)
    assert np.array_equal(a, a0)
    K.gsmm(np.eye(4), np.eye(4), a)
    assert np.array_equal(a, a0 - np.eye(4))
    x, y = rnd(7, 4, 4), rnd(8, 4, 4)
    a = a0.copy()
    K.gsmm(x, y, a)
    assert rel(a, a0 - matmul_loop(x, y.T)) < 1e-14


def test_gsmm_diagonal_updates_lower_only():
    x = rnd(9, 4, 4)
    a = rnd(10, 4, 4)
    a0 = a.copy()
    K.gsmm(x, x, a, diagonal=True)
    full = a0 - x @ x.T
    assert np.allclose(np.tril(a), np.tril(full), rtol=1e-14, atol=1e-14)
    assert np.array_equal(np.triu(a, 1), np.triu(a0, 1))


# --------------------------------------------------------------------------
# QR

def test_geqrt_identity():
    a = np.eye(4)
    t = K.geqrt(a, 2)
    assert np.array_equal(a, np.eye(4))
    assert not t.any()
    c = rnd(11, 4, 3)
    c0 = c.copy()
    K.larfb(c, a, t)
    assert np.array_equal(c, c0)


@pytest.mark.parametrize("b,s", CASES)
def test_geqrt_oracle(b, s):
    a0 = rnd(b + s, b, b)
    a = a0.copy()
    t = K.geqrt(a, s)
    assert t.shape == (s, b)
    for c in range(0, b, s):
        assert not np.tril(t[:, c:c + s], -1).any()
    qt = geqrt_qt(a, t)
    R = np.triu(a)
    tol = 50 * b * EPS
    assert np.abs(qt @ qt.T - np.eye(b)).max() <= tol
    assert np.abs(qt @ a0 - R).max() / np.abs(a0).max() <= tol
    # sign convention: R diagonal is -sign(x1) * |x| for the first column
    assert np.sign(R[0, 0]) == -np.sign(a0[0, 0])
    assert abs(abs(R[0, 0]) - np.linalg.norm(a0[:, 0])) <= tol * np.abs(a0).max()


@pytest.mark.parametrize("b,s", CASES)
def test_larfb_oracle_and_consistency(b, s):
    a0 = rnd(2 * b + s, b, b)
    v = a0.copy()
    t = K.geqrt(v, s)
    qt = geqrt_qt(v, t)
    c = rnd(3 * b, b, 5)
    ref = qt @ c
    K.larfb(c, v, t)
    assert rel(c, ref) < 1e-13
    # applying the transformation to the original tile reproduces R
    col = a0.copy()
    K.larfb(col, v, t)
    assert np.abs(col - np.triu(v)).max() <= 50 * b * EPS * np.abs(a0).max()


def test_tsqrt_zero_bottom():
    r = np.triu(rnd(12, 4, 4))
    r0 = r.copy()
    a = np.zeros((4, 4))
    t = K.tsqrt(r, a, 2)
    assert np.array_equal(r, r0)
    assert not a.any() and not t.any()


def test_tsqrt_identity_couple():
    r, a = np.eye(2), np.eye(2)
    K.tsqrt(r, a, 2)
    assert np.allclose(np.abs(np.diag(r)), np.sqrt(2), rtol=1e-15)
    _, rr = np.linalg.qr(np.vstack([np.eye(2), np.eye(2)]))
    assert np.allclose(np.abs(np.diag(r)), np.abs(np.diag(rr)))


@pytest.mark.parametrize("b,s", CASES)
def test_tsqrt_ssrfb_oracle(b, s):
    r0 = np.triu(rnd(4 * b + s, b, b))
    a0 = rnd(5 * b + s, b, b)
    r, a = r0.copy(), a0.copy()
    t = K.tsqrt(r, a, s)
    qt = tsqrt_qt(a, t)
    couple = np.vstack([r0, a0])
    tol = 50 * b * EPS
    assert np.abs(qt @ qt.T - np.eye(2 * b)).max() <= tol
    out = qt @ couple
    scale = np.abs(couple).max()
    assert np.abs(out[:b] - np.triu(r)).max() <= tol * scale
    assert np.abs(out[b:]).max() <= tol * scale
    # ssrfb against the dense product
    top, bot = rnd(6 * b, b, b), rnd(7 * b, b, b)
    ref = qt @ np.vstack([top, bot])
    K.ssrfb(top, bot, a, t)
    assert rel(np.vstack([top, bot]), ref) < 1e-13
    # consistency: the update kernel reproduces the factor column
    top, bot = r0.copy(), a0.copy()
    K.ssrfb(top, bot, a, t)
    assert np.abs(top - np.triu(r)).max() <= tol * scale
    assert np.abs(bot).max() <= tol * scale


def test_ssrfb_zero_reflectors():
    top, bot = rnd(13, 4, 4), rnd(14, 4, 4)
    t0, b0 = top.copy(), bot.copy()
    K.ssrfb(top, bot, np.zeros((4, 4)), np.zeros((2, 4)))
    assert np.array_equal(top, t0) and np.array_equal(bot, b0)


# --------------------------------------------------------------------------
# LU

def test_getrf_examples():
    a = np.eye(3)
    piv = K.getrf(a, 3)
    assert np.array_equal(a, np.eye(3)) and piv.tolist() == [0, 1, 2]
    a = np.array([[0.0, 1.0], [1.0, 0.0]])
    piv = K.getrf(a, 2)
    assert piv.tolist() == [1, 1]
    assert np.array_equal(a, np.eye(2))
    with pytest.raises(K.SingularError) as info:
        K.getrf(np.array([[1.0, 2.0], [2.0, 4.0]]), 1)
    assert info.value.index == 1


@pytest.mark.parametrize("b,s", CASES)
def test_getrf_oracle(b, s):
    a0 = rnd(8 * b + s, b, b)
    a = a0.copy()
    piv = K.getrf(a, s)
    perm, L, U = gepp_loop(a0)
    order = np.arange(b)
    K.apply_row_swaps(order[:, None], piv)
    assert np.array_equal(order, perm)
    assert np.all(piv >= np.arange(b))
    Lk = np.tril(a, -1) + np.eye(b)
    assert np.abs(Lk).max() <= 1.0
    assert np.abs(Lk @ np.triu(a) - a0[perm]).max() / np.abs(a0).max() <= 50 * b * EPS
    assert rel(np.triu(a), U) < 1e-12


@pytest.mark.parametrize("b,s", CASES)
def test_gessm_oracle_and_consistency(b, s):
    a0 = rnd(9 * b + s, b, b)
    f = a0.copy()
    piv = K.getrf(f, s)
    c = rnd(10 * b, b, b)
    order = np.arange(b)
    K.apply_row_swaps(order[:, None], piv)
    ref = forward_unit_lower(np.tril(f, -1) + np.eye(b), c[order])
    K.gessm(c, f, piv)
    assert rel(c, ref) < 1e-13
    col = a0.copy()
    K.gessm(col, f, piv)
    assert np.abs(col - np.triu(f)).max() <= 50 * b * EPS * np.abs(a0).max()


def test_gessm_examples():
    c = rnd(15, 2, 2)
    c0 = c.copy()
    K.gessm(c, np.eye(2), np.array([0, 1]))
    assert np.array_equal(c, c0)
    l = np.array([[1.0, 0.0], [2.0, 1.0]])
    c = np.array([[1.0, 0.0], [1.0, 1.0]])
    K.gessm(c, l, np.array([0, 1]))
    assert c.tolist() == [[1.0, 0.0], [-1.0, 1.0]]


def test_tstrf_zero_bottom():
    u = np.triu(rnd(16, 4, 4)) + 4 * np.eye(4)
    u0 = u.copy()
    a = np.zeros((4, 4))
    piv, lstrip = K.tstrf(u, a, 2)
    assert np.array_equal(u, u0)
    assert not a.any() and not lstrip.any()
    assert piv.tolist() == [0, 1, 2, 3]


def test_tstrf_scalar():
    u, a = np.array([[1.0]]), np.array([[3.0]])
    piv, _ = K.tstrf(u, a, 1)
    assert piv.tolist() == [1]  # bottom row 0 swapped in
    assert u[0, 0] == 3.0
    assert a[0, 0] == pytest.approx(1.0 / 3.0, rel=1e-15)


def test_tstrf_tie_keeps_top():
    u, a = np.array([[2.0]]), np.array([[-2.0]])
    piv, _ = K.tstrf(u, a, 1)
    assert piv.tolist() == [0]


def test_tstrf_singular():
    with pytest.raises(K.SingularError):
        K.tstrf(np.zeros((2, 2)), np.zeros((2, 2)), 2)


def _stack_transform(lbot, lstrip, piv, b, s):
    # explicit 2b x 2b matrix of the tstrf transformation, built block by block
    m = np.eye(2 * b)
    for c in range(0, b, s):
        e = c + s
        p = np.eye(2 * b)
        for jj, r in enumerate(piv[c:e]):
            if r >= b:
                p[[c + jj, r]] = p[[r, c + jj]]
        low = np.eye(2 * b)
        low[c:e, c:e] = np.tril(lstrip[:, c:e], -1) + np.eye(s)
        low[b:, c:e] = lbot[:, c:e]
        m = np.linalg.solve(low, p @ m)
    return m


@pytest.mark.parametrize("b,s", CASES)
def test_tstrf_ssssm_reconstruction(b, s):
    u0 = np.triu(rnd(11 * b + s, b, b))
    a0 = rnd(12 * b + s, b, b)
    u, a = u0.copy(), a0.copy()
    piv, lstrip = K.tstrf(u, a, s)
    assert np.abs(a).max() <= 1.0 and np.abs(np.tril(lstrip, -1)).max() <= 1.0
    for c in range(0, b, s):
        assert not np.triu(lstrip[:, c:c + s]).any()
    m = _stack_transform(a, lstrip, piv, b, s)
    couple = np.vstack([u0, a0])
    out = m @ couple
    scale = np.abs(couple).max()
    assert np.abs(out[:b] - np.triu(u)).max() <= 1e-13 * scale
    assert np.abs(out[b:]).max() <= 1e-13 * scale
    top, bot = rnd(13 * b, b, b), rnd(14 * b, b, b)
    ref = m @ np.vstack([top, bot])
    K.ssssm(top, bot, a, lstrip, piv)
    assert rel(np.vstack([top, bot]), ref) < 1e-13
    top, bot = u0.copy(), a0.copy()
    K.ssssm(top, bot, a, lstrip, piv)
    assert np.abs(top - np.triu(u)).max() <= 50 * b * EPS * scale
    assert np.abs(bot).max() <= 50 * b * EPS * scale


@pytest.mark.parametrize("b", [4, 8, 32])
def test_tstrf_full_block_equals_stacked_gepp(b):
    # with s = b the pairwise step is partial pivoting on the stacked couple
    u0 = np.triu(rnd(15 * b, b, b))
    a0 = rnd(16 * b, b, b)
    u, a = u0.copy(), a0.copy()
    K.tstrf(u, a, b)
    _, _, U = gepp_loop(np.vstack([u0, a0]))
    assert rel(np.triu(u), U) < 1e-12


def test_ssssm_examples():
    top, bot = rnd(17, 2, 3), rnd(18, 2, 3)
    t0, b0 = top.copy(), bot.copy()
    K.ssssm(top, bot, np.zeros((2, 2)), np.zeros((2, 2)), np.array([0, 1]))
    assert np.array_equal(top, t0) and np.array_equal(bot, b0)
    K.ssssm(top, bot, np.zeros((2, 2)), np.zeros((1, 2)), np.array([2, 1]))
    assert np.array_equal(top[0], b0[0]) and np.array_equal(bot[0], t0[0])
    assert np.array_equal(top[1], t0[1]) and np.array_equal(bot[1], b0[1])


# --------------------------------------------------------------------------

def test_kernel_flops():
    b, s = 200, 40
    assert K.kernel_flops("ssrfb", b, s) == 4 * b ** 3 + s * b ** 2
    assert K.kernel_flops("ssssm", b, s) == 2 * b ** 3 + s * b ** 2
    assert K.kernel_flops("gsmm", b) == 2 * b ** 3
    with pytest.raises(ValueError):
        K.kernel_flops("ssrfb", 10, 3)


def test_inner_block_must_divide():
    with pytest.raises(ValueError):
        K.geqrt(np.eye(4), 3)


@settings(max_examples=25, deadline=None)
@given(kind=st.sampled_from(["geqrt", "getrf", "tsqrt", "tstrf"]),
       b=st.sampled_from([4, 8]), seed=st.integers(0, 10_000))
def test_kernels_are_pure(kind, b, seed):
    s = b // 2
    r = np.random.default_rng(seed)
    x0 = r.standard_normal((b, b))
    y0 = r.standard_normal((b, b))
    outs = []
    for _ in range(2):
        x, y = np.triu(x0) + 0.0, y0.copy()
        if kind == "geqrt":
            aux = K.geqrt(x, s)
        elif kind == "getrf":
            aux = K.getrf(x, s)
        elif kind == "tsqrt":
            aux = K.tsqrt(x, y, s)
        else:
            aux = K.tstrf(x + b * np.eye(b), y, s)
        outs.append((x.tobytes(), y.tobytes(), repr(aux)))
    assert outs[0] == outs[1]


@settings(max_examples=25, deadline=None)
@given(b=st.sampled_from([4, 8]), seed=st.integers(0, 10_000))
def test_multipliers_bounded(b, seed):
    r = np.random.default_rng(seed)
    a = r.standard_normal((b, b))
    K.getrf(a, b // 2)
    assert np.abs(np.tril(a, -1)).max() <= 1.0
    u, x = np.triu(r.standard_normal((b, b))), r.standard_normal((b, b))
    _, lstrip = K.tstrf(u, x, b // 2)
    assert np.abs(x).max() <= 1.0 and np.abs(lstrip).max() <= 1.0


def test_lenient_zero_pivot():
    a = np.array([[0.0, 1.0], [0.0, 2.0]])
    piv = K.getrf(a, 2, strict=False)
    assert piv.tolist() == [0, 1] and a[0, 0] == 0.0
    # a zero top pivot is then resolved by the coupled bottom tile
    u, x = np.array([[0.0]]), np.array([[5.0]])
    piv, _ = K.tstrf(u, x, 1, strict=False)
    assert piv.tolist() == [1] and u[0, 0] == 5.0 and x[0, 0] == 0.0
    u, x = np.zeros((1, 1)), np.zeros((1, 1))
    piv, _ = K.tstrf(u, x, 1, strict=False)
    assert piv.tolist() == [0] and u[0, 0] == 0.0
