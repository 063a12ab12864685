"""Sequential tile kernels for tiled Cholesky, QR and LU.

All kernels work in place on ``b x b`` float64 tile views. ``s`` is the
inner block size: QR/LU transformations are produced and applied in groups
of ``s`` columns, so ``s`` must divide ``b``.

Storage conventions
-------------------
geqrt
    ``R`` in the upper triangle, Householder vectors in the strict lower
    triangle (unit diagonal implicit), accumulation factors returned as an
    ``s x b`` strip holding ``b/s`` upper triangular ``s x s`` blocks.
tsqrt
    New ``R`` overwrites the upper triangle of the top tile; the lower halves
    of the reflectors overwrite the bottom tile. The top halves are columns
    of the identity and are never stored.
getrf
    ``L`` (unit, strict lower) and ``U`` packed in the tile, pivots returned
    LAPACK style: row ``j`` was swapped with row ``piv[j] >= j``.
tstrf
    New ``U`` overwrites the upper triangle of the top tile, multipliers for
    the bottom rows overwrite the bottom tile and the multipliers that row
    interchanges carried into the top rows go to an ``s x b`` strip of unit
    lower ``s x s`` blocks (strict lower part stored). ``piv[j] == j`` keeps
    the top row; ``piv[j] = b + r`` means bottom row ``r`` was swapped in.

Kernels that touch a diagonal tile shared with concurrently running tasks
only write the triangle they own (upper for tsqrt/tstrf, nothing for
larfb/gessm).
"""

from __future__ import annotations

import math

import numpy as np
from scipy.linalg import solve_triangular

KINDS = (
    "potf2", "trsm", "gsmm",
    "geqrt", "larfb", "tsqrt", "ssrfb",
    "getrf", "gessm", "tstrf", "ssssm",
)


class KernelError(ArithmeticError):
    """Base class for numerical failures inside a tile kernel."""

    def __init__(self, msg: str, index: int):
        super().__init__(msg)
        self.index = index


class NotPositiveDefiniteError(KernelError):
    pass


class SingularTriangleError(KernelError):
    pass


class SingularError(KernelError):
    """Exact zero pivot during LU of a tile or a coupled pair of tiles."""


def _check_inner(b: int, s: int) -> None:
    if s < 1 or b % s:
        raise ValueError(f"inner block size {s} must divide tile size {b}")


# --------------------------------------------------------------------------
# Cholesky

def potf2(a: np.ndarray) -> None:
    """Unblocked Cholesky of an SPD tile; only the lower triangle is read."""
    b = a.shape[0]
    for j in range(b):
        row = a[j, :j]
        d = a[j, j] - row @ row
        if not d > 0.0:
            raise NotPositiveDefiniteError(
                f"leading minor {j + 1} is not positive definite", j)
        ljj = math.sqrt(d)
        a[j, j] = ljj
        if j + 1 < b:
            a[j + 1:, j] = (a[j + 1:, j] - a[j + 1:, :j] @ row) / ljj
    a[np.triu_indices(b, 1)] = 0.0


def trsm(l: np.ndarray, a: np.ndarray) -> None:
    """``a := a @ inv(l).T`` for lower triangular ``l``."""
    diag = np.diagonal(l)
    zero = np.flatnonzero(diag == 0.0)
    if zero.size:
        raise SingularTriangleError("zero on the triangle diagonal", int(zero[0]))
    a[:] = solve_triangular(l, a.T, lower=True, check_finite=False).T


def gsmm(l_ik: np.ndarray, l_jk: np.ndarray, a: np.ndarray, diagonal: bool = False) -> None:
    """``a := a - l_ik @ l_jk.T``; with ``diagonal`` only the lower triangle moves."""
    prod = l_ik @ l_jk.T
    if diagonal:
        idx = np.tril_indices(a.shape[0])
        a[idx] -= prod[idx]
    else:
        a -= prod


# --------------------------------------------------------------------------
# QR

def _householder(alpha: float, x: np.ndarray) -> tuple[float, float, np.ndarray]:
    # Reflector H = I - tau*[1; v][1; v]^T with H [alpha; x] = [beta; 0].
    # Same convention as LAPACK dlarfg: beta = -sign(alpha)*norm.
    xnorm = float(np.sqrt(x @ x))
    if xnorm == 0.0:
        return alpha, 0.0, x.copy()
    beta = -math.copysign(math.hypot(alpha, xnorm), alpha)
    tau = (beta - alpha) / beta
    return beta, tau, x / (alpha - beta)


def _unit_lower_panel(v: np.ndarray, s: int) -> np.ndarray:
    # rows c: of a geqrt panel -> explicit reflectors with unit diagonal
    w = v.copy()
    top = w[:s, :s]
    top[np.triu_indices(s)] = 0.0
    top[np.diag_indices(s)] = 1.0
    return w


def _apply_block_qt(v: np.ndarray, t: np.ndarray, c: np.ndarray) -> None:
    # c := (I - v t v^T)^T c
    w = t.T @ (v.T @ c)
    c -= v @ w


def geqrt(a: np.ndarray, s: int) -> np.ndarray:
    """Householder QR of a tile; returns the ``s x b`` accumulation strip."""
    b = a.shape[0]
    _check_inner(b, s)
    t = np.zeros((s, b))
    for c in range(0, b, s):
        e = c + s
        tb = t[:, c:e]
        for j in range(c, e):
            beta, tau, v = _householder(a[j, j], a[j + 1:, j])
            a[j, j] = beta
            a[j + 1:, j] = v
            if tau != 0.0 and j + 1 < e:
                w = a[j, j + 1:e] + v @ a[j + 1:, j + 1:e]
                a[j, j + 1:e] -= tau * w
                a[j + 1:, j + 1:e] -= tau * np.outer(v, w)
            jj = j - c
            tb[jj, jj] = tau
            if jj > 0:
                z = a[j, c:j] + a[j + 1:, c:j].T @ v
                tb[:jj, jj] = -tau * (tb[:jj, :jj] @ z)
        if e < b:
            _apply_block_qt(_unit_lower_panel(a[c:, c:e], s), tb, a[c:, e:])
    return t


def larfb(a_kj: np.ndarray, v_kk: np.ndarray, t_kk: np.ndarray) -> None:
    """Apply the transpose of the geqrt orthogonal factor to ``a_kj``."""
    s, b = t_kk.shape
    for c in range(0, b, s):
        e = c + s
        _apply_block_qt(_unit_lower_panel(v_kk[c:, c:e], s), t_kk[:, c:e], a_kj[c:, :])


def _apply_ts_qt(top: np.ndarray, bot: np.ndarray, w: np.ndarray, t: np.ndarray) -> None:
    # reflectors are [E; w] with E rows of the identity matching ``top``
    z = t.T @ (top + w.T @ bot)
    top -= z
    bot -= w @ z


def tsqrt(r: np.ndarray, a: np.ndarray, s: int) -> np.ndarray:
    """QR of ``[r; a]`` with ``r`` upper triangular; returns the accumulation strip."""
    b = r.shape[0]
    _check_inner(b, s)
    t = np.zeros((s, b))
    for c in range(0, b, s):
        e = c + s
        tb = t[:, c:e]
        for j in range(c, e):
            beta, tau, v = _householder(r[j, j], a[:, j])
            r[j, j] = beta
            a[:, j] = v
            if tau != 0.0 and j + 1 < e:
                w = r[j, j + 1:e] + v @ a[:, j + 1:e]
                r[j, j + 1:e] -= tau * w
                a[:, j + 1:e] -= tau * np.outer(v, w)
            jj = j - c
            tb[jj, jj] = tau
            if jj > 0:
                tb[:jj, jj] = -tau * (tb[:jj, :jj] @ (a[:, c:j].T @ v))
        if e < b:
            _apply_ts_qt(r[c:e, e:], a[:, e:], a[:, c:e], tb)
    return t


def ssrfb(r_kj: np.ndarray, a_ij: np.ndarray, v_ik: np.ndarray, t_ik: np.ndarray) -> None:
    """Apply the transpose of the tsqrt orthogonal factor to ``[r_kj; a_ij]``."""
    s, b = t_ik.shape
    for c in range(0, b, s):
        e = c + s
        _apply_ts_qt(r_kj[c:e, :], a_ij, v_ik[:, c:e], t_ik[:, c:e])


# --------------------------------------------------------------------------
# LU

def _solve_unit_lower(l: np.ndarray, x: np.ndarray) -> np.ndarray:
    return solve_triangular(l, x, lower=True, unit_diagonal=True, check_finite=False)


def getrf(a: np.ndarray, s: int, strict: bool = True) -> np.ndarray:
    """LU with partial pivoting inside a tile; returns the pivot vector.

    With ``strict=False`` an all-zero pivot column is skipped (as LAPACK
    does) and leaves a zero on the diagonal of ``U`` instead of raising.
    """
    b = a.shape[0]
    _check_inner(b, s)
    piv = np.empty(b, dtype=np.intp)
    for c in range(0, b, s):
        e = c + s
        for j in range(c, e):
            r = j + int(np.argmax(np.abs(a[j:, j])))
            piv[j] = r
            if a[r, j] == 0.0:
                if strict:
                    raise SingularError(f"zero pivot in column {j}", j)
                continue
            if r != j:
                a[[j, r], :] = a[[r, j], :]
            a[j + 1:, j] /= a[j, j]
            if j + 1 < e:
                a[j + 1:, j + 1:e] -= np.outer(a[j + 1:, j], a[j, j + 1:e])
        if e < b:
            a[c:e, e:] = _solve_unit_lower(a[c:e, c:e], a[c:e, e:])
            a[e:, e:] -= a[e:, c:e] @ a[c:e, e:]
    return piv


def apply_row_swaps(a: np.ndarray, piv: np.ndarray) -> None:
    for j, r in enumerate(piv):
        if r != j:
            a[[j, r], :] = a[[r, j], :]


def gessm(a_kj: np.ndarray, l_kk: np.ndarray, piv: np.ndarray) -> None:
    """``a_kj := inv(L) P a_kj`` with the factors of getrf."""
    apply_row_swaps(a_kj, piv)
    a_kj[:] = _solve_unit_lower(l_kk, a_kj)


def _apply_ts_l(top: np.ndarray, bot: np.ndarray, lbot: np.ndarray,
                ltop: np.ndarray, piv: np.ndarray) -> None:
    # one inner block of the tstrf transformation: swaps, then elimination
    b = bot.shape[0]
    for jj, r in enumerate(piv):
        if r >= b:
            tmp = top[jj].copy()
            top[jj] = bot[r - b]
            bot[r - b] = tmp
    top[:] = _solve_unit_lower(ltop, top)
    bot -= lbot @ top


def tstrf(u: np.ndarray, a: np.ndarray, s: int,
          strict: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """LU with pivoting of ``[u; a]``, ``u`` upper triangular.

    Returns ``(piv, lstrip)``. Pivot candidates for column ``j`` are ``u[j, j]``
    and the whole column ``a[:, j]``; ties keep the top row. ``strict`` as
    in :func:`getrf`.
    """
    b = u.shape[0]
    _check_inner(b, s)
    piv = np.empty(b, dtype=np.intp)
    lstrip = np.zeros((s, b))
    for c in range(0, b, s):
        e = c + s
        lup = lstrip[:, c:e]
        for j in range(c, e):
            jj = j - c
            col = a[:, j]
            r = int(np.argmax(np.abs(col)))
            if abs(col[r]) > abs(u[j, j]):
                piv[j] = b + r
                tmp = u[j, j:e].copy()
                u[j, j:e] = a[r, j:e]
                a[r, j:e] = tmp
                # earlier multipliers of the incoming row move to the top strip
                lup[jj, :jj] = a[r, c:j]
                a[r, c:j] = 0.0
            else:
                piv[j] = j
            if u[j, j] == 0.0:
                if strict:
                    raise SingularError(f"zero pivot in column {j}", j)
                continue
            a[:, j] /= u[j, j]
            if j + 1 < e:
                a[:, j + 1:e] -= np.outer(a[:, j], u[j, j + 1:e])
        if e < b:
            _apply_ts_l(u[c:e, e:], a[:, e:], a[:, c:e], _with_unit_diag(lup), piv[c:e])
    return piv, lstrip


def _with_unit_diag(lblock: np.ndarray) -> np.ndarray:
    out = np.tril(lblock, -1)
    out[np.diag_indices(out.shape[0])] = 1.0
    return out


def ssssm(u_kj: np.ndarray, a_ij: np.ndarray, l_ik: np.ndarray,
          lstrip: np.ndarray, piv: np.ndarray) -> None:
    """``[u_kj; a_ij] := inv(L) P [u_kj; a_ij]`` with the factors of tstrf."""
    s, b = lstrip.shape
    for c in range(0, b, s):
        e = c + s
        _apply_ts_l(u_kj[c:e, :], a_ij, l_ik[:, c:e], _with_unit_diag(lstrip[:, c:e]), piv[c:e])


# --------------------------------------------------------------------------

def kernel_flops(kind: str, b: int, s: int | None = None, diagonal: bool = False) -> float:
    """Leading-order floating point operation count of one kernel call."""
    if s is not None:
        _check_inner(b, s)
    b3 = b ** 3
    if kind == "ssrfb":
        return 4 * b3 + s * b * b
    if kind == "ssssm":
        return 2 * b3 + s * b * b
    table = {
        "potf2": b3 / 3,
        "trsm": b3,
        "gsmm": b3 if diagonal else 2 * b3,
        "geqrt": 4 * b3 / 3,
        "larfb": 2 * b3,
        "tsqrt": 2 * b3,
        "getrf": 2 * b3 / 3,
        "gessm": b3,
        "tstrf": b3,
    }
    try:
        return table[kind]
    except KeyError:
        raise ValueError(f"unknown kernel kind {kind!r}") from None
