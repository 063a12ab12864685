"""Stability laboratory for Gaussian elimination with tiled pairwise pivoting.

GETWP is the pivoting performed by the tiled LU: partial pivoting inside a
diagonal tile, then pairwise pivoting between the current ``U`` tile and
each tile below it. Its left factor is not a permuted unit lower triangular
matrix, so it is kept as an ordered list of elimination couples

    T_c = inv(L_c) P_c         acting on a subset ``rows`` of the matrix rows

with ``U = T_last ... T_1 A``. The explicit left factor is
``N = inv(T_1) ... inv(T_last)`` so that ``N U = A``.

GEPP (``b = n``) and GENP are expressed the same way with a single couple,
which lets every quantity be computed by one code path.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np
from scipy.linalg import solve_triangular

from .factor import execute_sequential, plan_lu
from .tilemat import TileMatrix, gen_random, inf_norm

log = logging.getLogger(__name__)

EPS = 2.0 ** -52
N_CAP = 2048

REPORT_FIELDS = ["matrix", "n", "b", "p", "method", "be_fact", "be_soln",
                 "norm_N", "norm_U", "norm_absNU", "flags"]


class SingularFactorError(ArithmeticError):
    pass


@dataclass
class Couple:
    """One elimination step ``inv(lower) P`` on a subset of rows.

    ``swaps`` uses LAPACK convention on local indices: for each position
    ``jj`` in order, local rows ``jj`` and ``swaps[jj]`` are exchanged.
    """
    rows: np.ndarray
    swaps: np.ndarray
    lower: np.ndarray

    def apply(self, x: np.ndarray) -> None:
        """In place ``x[rows] := inv(lower) P x[rows]``."""
        xs = x[self.rows]
        _swap_rows(xs, self.swaps)
        x[self.rows] = solve_triangular(self.lower, xs, lower=True,
                                        unit_diagonal=True, check_finite=False)

    def max_multiplier(self) -> float:
        return float(np.abs(np.tril(self.lower, -1)).max(initial=0.0))


def _swap_rows(x: np.ndarray, swaps: np.ndarray) -> None:
    for jj, r in enumerate(swaps):
        if r != jj:
            x[[jj, r]] = x[[r, jj]]


@dataclass
class EliminationRecord:
    method: str
    n: int
    b: int
    couples: list[Couple] = field(default_factory=list)
    U: np.ndarray | None = None
    singular: bool = False

    @property
    def p(self) -> int:
        return self.n // self.b

    def max_multiplier(self) -> float:
        return max((c.max_multiplier() for c in self.couples), default=0.0)


class LUFactors(NamedTuple):
    """``P A = L U`` with ``P`` given by LAPACK-style row swaps ``piv``."""
    L: np.ndarray
    U: np.ndarray
    piv: np.ndarray
    singular: bool

    def perm(self) -> np.ndarray:
        """Row order: ``P A == A[perm]``."""
        order = np.arange(len(self.piv))
        _swap_rows(order, self.piv)
        return order


# --------------------------------------------------------------------------
# reference eliminations

def gepp(a: np.ndarray) -> LUFactors:
    """Right-looking Gaussian elimination with partial pivoting."""
    a = np.array(a, dtype=np.float64, order="F")
    n = a.shape[0]
    if a.shape != (n, n):
        raise ValueError("square matrix required")
    piv = np.arange(n)
    singular = False
    for j in range(n):
        r = j + int(np.argmax(np.abs(a[j:, j])))
        piv[j] = r
        if a[r, j] == 0.0:
            singular = True
            continue
        if r != j:
            a[[j, r], :] = a[[r, j], :]
        a[j + 1:, j] /= a[j, j]
        a[j + 1:, j + 1:] -= np.outer(a[j + 1:, j], a[j, j + 1:])
    L = np.tril(a, -1) + np.eye(n)
    return LUFactors(L, np.triu(a), piv, singular)


def genp(a: np.ndarray) -> LUFactors:
    """Gaussian elimination without pivoting."""
    a = np.array(a, dtype=np.float64, order="F")
    n = a.shape[0]
    if a.shape != (n, n):
        raise ValueError("square matrix required")
    singular = False
    for j in range(n):
        if a[j, j] == 0.0:
            singular = True
            break
        a[j + 1:, j] /= a[j, j]
        a[j + 1:, j + 1:] -= np.outer(a[j + 1:, j], a[j, j + 1:])
    L = np.tril(a, -1) + np.eye(n)
    return LUFactors(L, np.triu(a), np.arange(n), singular)


def record_from_lu(f: LUFactors, method: str) -> EliminationRecord:
    n = f.U.shape[0]
    return EliminationRecord(method, n, n, [Couple(np.arange(n), f.piv.copy(), f.L)],
                             f.U, f.singular)


# --------------------------------------------------------------------------
# tiled pairwise pivoting

def getwp(a: np.ndarray, b: int, s: int | None = None) -> EliminationRecord:
    """Factor with the tiled LU and collect its elimination couples in order."""
    a = np.asarray(a, dtype=np.float64)
    n = a.shape[0]
    if a.shape != (n, n):
        raise ValueError("square matrix required")
    s = b if s is None else s
    tiles = TileMatrix.from_dense(a, b)
    plan = plan_lu(tiles.p, tiles.q, b, s)
    rec = EliminationRecord("getwp", n, b)
    # zero pivot columns are stepped over: a later tile may still supply the pivot
    _, aux = execute_sequential(plan, tiles, strict=False)
    T = tiles.tile
    for task in plan.tasks:
        k, i = task.k, task.i
        if task.kind == "getrf":
            lower = np.tril(T(k, k), -1) + np.eye(b)
            rec.couples.append(Couple(k * b + np.arange(b), aux.piv[(k, k)].copy(), lower))
        elif task.kind == "tstrf":
            piv, lstrip, lbot = aux.piv[(i, k)], aux.lstrip[(i, k)], T(i, k)
            for c in range(0, b, s):
                e = c + s
                lower = np.eye(s + b)
                lower[:s, :s] += np.tril(lstrip[:, c:e], -1)
                lower[s:, :s] = lbot[:, c:e]
                local = np.array([jj if r < b else s + r - b
                                  for jj, r in enumerate(piv[c:e])])
                rows = np.concatenate([k * b + np.arange(c, e), i * b + np.arange(b)])
                rec.couples.append(Couple(rows, local, lower))
    rec.U = np.triu(tiles.to_dense())
    rec.singular = bool(np.any(np.diagonal(rec.U) == 0.0))
    return rec


def factor_record(a: np.ndarray, method: str, b: int | None = None) -> EliminationRecord:
    if method == "getwp":
        return getwp(a, b if b is not None else a.shape[0])
    if method == "gepp":
        return record_from_lu(gepp(a), "gepp")
    if method == "genp":
        return record_from_lu(genp(a), "genp")
    raise ValueError(f"unknown method {method!r}")


# --------------------------------------------------------------------------
# using the record

def assemble_N(rec: EliminationRecord) -> np.ndarray:
    """Explicit left factor with ``N @ U == A`` (up to rounding)."""
    if rec.singular:
        raise SingularFactorError("record of a singular factorization")
    N = np.eye(rec.n)
    for c in rec.couples:
        ns = N[:, c.rows]
        _swap_rows(ns.T, c.swaps)
        N[:, c.rows] = ns @ c.lower
    return N


def solve(factors, y: np.ndarray) -> np.ndarray:
    """Solve ``A x = y`` from an elimination record or :class:`LUFactors`."""
    rec = factors if isinstance(factors, EliminationRecord) else record_from_lu(factors, "lu")
    if rec.singular or np.any(np.diagonal(rec.U) == 0.0):
        raise SingularFactorError("zero pivot in U")
    x = np.array(y, dtype=np.float64)
    for c in rec.couples:
        c.apply(x)
    return solve_triangular(rec.U, x, lower=False, check_finite=False)


def backward_error_soln(a: np.ndarray, x: np.ndarray, y: np.ndarray) -> float:
    r = y - a @ x
    return float(np.abs(r).max() / (inf_norm(a) * np.abs(x).max()))


def backward_error_fact(a: np.ndarray, N: np.ndarray, U: np.ndarray) -> float:
    return inf_norm(a - N @ U) / inf_norm(a)


class Refinement(NamedTuple):
    x: np.ndarray
    steps: int
    backward_error: float
    converged: bool


def iterative_refinement(factors, a: np.ndarray, y: np.ndarray,
                         max_steps: int = 3, tol: float | None = None) -> Refinement:
    """Fixed-precision refinement ``x += solve(y - A x)``; keeps the best iterate."""
    n = a.shape[0]
    tol = n * EPS if tol is None else tol
    x = solve(factors, y)
    err = backward_error_soln(a, x, y)
    best, best_err, steps = x, err, 0
    while best_err > tol and steps < max_steps:
        x = x + solve(factors, y - a @ x)
        steps += 1
        err = backward_error_soln(a, x, y)
        if err < best_err:
            best, best_err = x, err
    if best_err > tol:
        log.info("refinement stopped after %d steps at backward error %.3g", steps, best_err)
    return Refinement(best, steps, best_err, best_err <= tol)


# --------------------------------------------------------------------------
# reports and campaigns

@dataclass
class StabilityReport:
    method: str
    n: int
    b: int
    p: int
    be_fact: float
    be_soln: float
    norm_N: float
    norm_U: float
    norm_absNU: float
    flags: str = ""
    matrix: str = ""

    def row(self) -> dict:
        d = asdict(self)
        return {k: d[k] for k in REPORT_FIELDS}


def _floor(x: float) -> float:
    return max(x, EPS) if not math.isnan(x) else x


def report(a: np.ndarray, method: str, b: int | None = None, rhs_seed: int = 0,
           n_cap: int = N_CAP, matrix: str = "") -> StabilityReport:
    """Backward errors and factor norms of one factorization.

    Backward errors below machine precision are raised to machine precision.
    """
    a = np.asarray(a, dtype=np.float64)
    n = a.shape[0]
    b = n if (b is None or method != "getwp") else b
    nan = float("nan")
    rec = factor_record(a, method, b)
    if rec.singular or np.any(np.diagonal(rec.U) == 0.0):
        return StabilityReport(method, n, b, n // b, nan, nan, nan, nan, nan, "singular", matrix)
    flags = []
    norm_U = inf_norm(rec.U)
    be_fact = norm_N = norm_absNU = nan
    if n <= n_cap:
        N = assemble_N(rec)
        be_fact = _floor(backward_error_fact(a, N, rec.U))
        norm_N = inf_norm(N)
        norm_absNU = inf_norm(np.abs(N) @ np.abs(rec.U))
    else:
        flags.append("no_N")
    y = gen_random(n, 1, rhs_seed)[:, 0]
    x = solve(rec, y)
    be_soln = _floor(backward_error_soln(a, x, y))
    if not (np.isfinite(be_soln) and (n > n_cap or np.isfinite(be_fact))):
        flags.append("nonfinite")
    return StabilityReport(method, n, b, n // b, be_fact, be_soln, norm_N, norm_U,
                           norm_absNU, ";".join(flags), matrix)


def _mean_report(reports: Sequence[StabilityReport], matrix: str) -> StabilityReport:
    first = reports[0]
    mean = {f: float(np.mean([getattr(r, f) for r in reports]))
            for f in ("be_fact", "be_soln", "norm_N", "norm_U", "norm_absNU")}
    flags = sorted({fl for r in reports for fl in r.flags.split(";") if fl})
    return StabilityReport(first.method, first.n, first.b, first.p, flags=";".join(flags),
                           matrix=matrix, **mean)


def rhs_seed_for(seed: int) -> int:
    return seed + 1_000_003


def campaign_random(n: int, p_list: Sequence[int], sample: int = 10,
                    seeds: Sequence[int] | None = None,
                    baselines: Sequence[str] = ("gepp", "genp")) -> list[StabilityReport]:
    """Mean GETWP reports for each tile count ``p`` over seeded random matrices.

    Baseline methods (GEPP, GENP) are appended as extra rows with ``p = 1``.
    """
    seeds = list(range(sample)) if seeds is None else list(seeds)
    for p in p_list:
        if p < 1 or n % p:
            raise ValueError(f"p={p} does not divide n={n}")
    mats = [(gen_random(n, n, sd), rhs_seed_for(sd)) for sd in seeds]
    name = f"randn{n}x{len(seeds)}"
    out = []
    for p in p_list:
        out.append(_mean_report([report(a, "getwp", n // p, rs) for a, rs in mats], name))
    for method in baselines:
        out.append(_mean_report([report(a, method, None, rs) for a, rs in mats], name))
    return out


def reports_to_csv(reports: Sequence[StabilityReport]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=REPORT_FIELDS, lineterminator="\n")
    w.writeheader()
    for r in reports:
        w.writerow(r.row())
    return buf.getvalue()


# --------------------------------------------------------------------------
# Matrix Market

class UnsupportedMatrix(ValueError):
    pass


def read_mtx(path: str | Path) -> np.ndarray:
    """Dense real matrix from a Matrix Market file (symmetric storage expanded)."""
    from scipy.io import mminfo, mmread

    rows, cols, _, fmt, field_, symm = mminfo(str(path))
    if field_ not in ("real", "integer", "double"):
        raise UnsupportedMatrix(f"{path}: unsupported field {field_!r}")
    if symm not in ("general", "symmetric", "skew-symmetric"):
        raise UnsupportedMatrix(f"{path}: unsupported symmetry {symm!r}")
    m = mmread(str(path))
    dense = m.toarray() if hasattr(m, "toarray") else np.asarray(m)
    return np.asarray(dense, dtype=np.float64)


def tile_size_for(n: int, p: int = 32) -> int | None:
    """Largest divisor ``b`` of ``n`` with ``n / b >= p``; ``None`` if ``n < p``."""
    for b in range(n // p, 0, -1):
        if n % b == 0:
            return b
    return None


class MtxResult(NamedTuple):
    matrix: str
    n: int
    b: int
    p: int
    ratio_fact: float
    ratio_soln: float
    flags: str


RATIO_FIELDS = list(MtxResult._fields)


def campaign_mtx(directory: str | Path, p: int = 32, rhs_seed: int = 0,
                 n_cap: int = N_CAP, max_n: int | None = None):
    """GETWP vs GEPP backward error ratios over a directory of ``.mtx`` files.

    Returns ``(reports, ratios)``. Singular factorizations are flagged and
    left out of the ratios; unreadable, non-square, complex or pattern files
    are skipped with a log message.
    """
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"no such directory: {directory}")
    reports: list[StabilityReport] = []
    ratios: list[MtxResult] = []
    for path in sorted(directory.glob("*.mtx")):
        name = path.stem
        try:
            a = read_mtx(path)
        except Exception as exc:  # noqa: BLE001 - any unreadable file is skipped
            log.warning("skipping %s: %s", path.name, exc)
            continue
        n = a.shape[0]
        if a.shape[0] != a.shape[1]:
            log.warning("skipping %s: not square (%dx%d)", path.name, *a.shape)
            continue
        if max_n is not None and n > max_n:
            log.warning("skipping %s: n=%d above limit %d", path.name, n, max_n)
            continue
        b = tile_size_for(n, p)
        if b is None:
            log.warning("skipping %s: n=%d smaller than p=%d", path.name, n, p)
            continue
        pp = report(a, "gepp", None, rhs_seed, n_cap, name)
        wp = report(a, "getwp", b, rhs_seed, n_cap, name)
        reports += [pp, wp]
        if "singular" in pp.flags or "singular" in wp.flags:
            ratios.append(MtxResult(name, n, b, n // b, float("nan"), float("nan"), "singular"))
            continue
        flags = sorted({f for r in (pp, wp) for f in r.flags.split(";") if f})
        ratios.append(MtxResult(name, n, b, n // b, wp.be_fact / pp.be_fact,
                                wp.be_soln / pp.be_soln, ";".join(flags)))
    return reports, ratios


def ratio_histogram(ratios: Sequence[MtxResult], edges: Sequence[float] | None = None):
    """Counts of finite ratios per bin; bins are decades from 1 to 1e8 by default."""
    if edges is None:
        edges = [10.0 ** e for e in range(0, 9)]
    edges = [0.0] + list(edges) + [math.inf]
    fact = [r.ratio_fact for r in ratios if math.isfinite(r.ratio_fact)]
    soln = [r.ratio_soln for r in ratios if math.isfinite(r.ratio_soln)]
    rows = []
    for lo, hi in zip(edges[:-1], edges[1:]):
        rows.append((lo, hi, sum(lo <= v < hi for v in fact), sum(lo <= v < hi for v in soln)))
    return rows


def ratios_to_csv(ratios: Sequence[MtxResult]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RATIO_FIELDS)
    for r in ratios:
        w.writerow(r)
    return buf.getvalue()


def histogram_to_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["bin_lo", "bin_hi", "count_fact", "count_soln"])
    for row in rows:
        w.writerow(row)
    return buf.getvalue()
