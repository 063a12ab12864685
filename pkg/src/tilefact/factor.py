"""Tiled factorization drivers: task plans, dependency graphs and flop models.

A plan lists the kernel calls of a tiled Cholesky, QR or LU factorization in
program order. Every task declares the data regions it reads and writes; a
region is ``(i, j, part)`` with ``part`` either ``"lo"`` (strict lower
triangle of tile ``(i, j)``) or ``"up"`` (upper triangle with diagonal).
Splitting tiles this way lets ``tsqrt``/``tstrf`` (which only rewrite the
upper triangle of the diagonal tile) run alongside ``larfb``/``gessm`` (which
only read its lower triangle). Auxiliary data (T strips, pivots, L strips)
travel with the region that their producing kernel writes.

Dependency edges follow the usual hazards on regions: read-after-write,
write-after-write and write-after-read against the nearest preceding writer.
Successive updates of a tile are therefore chained, which fixes the
floating-point evaluation order and makes every valid schedule produce
bitwise identical results.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from . import kernels as K
from .tilemat import TileMatrix

LO, UP = "lo", "up"

PRIORITY = {
    "chol": {"potf2": 2, "trsm": 1, "gsmm": 0},
    "qr": {"geqrt": 3, "tsqrt": 2, "larfb": 1, "ssrfb": 0},
    "lu": {"getrf": 3, "tstrf": 2, "gessm": 1, "ssssm": 0},
}


def _full(i: int, j: int) -> tuple:
    return ((i, j, LO), (i, j, UP))


@dataclass(frozen=True)
class Task:
    kind: str
    k: int
    i: int
    j: int
    reads: tuple
    writes: tuple
    priority: int = 0

    @property
    def key(self) -> tuple:
        return (self.kind, self.k, self.i, self.j)

    def __str__(self) -> str:
        return f"{self.kind}({self.k},{self.i},{self.j})"


@dataclass
class FactorizationPlan:
    kind: str
    p: int
    q: int
    b: int
    s: int | None
    tasks: list[Task]
    preds: list[tuple[int, ...]] = field(init=False, repr=False)

    def __post_init__(self):
        self.preds = _dependencies(self.tasks)
        self._index = {t.key: n for n, t in enumerate(self.tasks)}

    def __len__(self) -> int:
        return len(self.tasks)

    def index(self, kind: str, k: int, i: int, j: int) -> int:
        return self._index[(kind, k, i, j)]

    @property
    def edges(self) -> list[tuple[int, int]]:
        return [(u, v) for v, ps in enumerate(self.preds) for u in ps]

    def successors(self) -> list[list[int]]:
        succ: list[list[int]] = [[] for _ in self.tasks]
        for u, v in self.edges:
            succ[u].append(v)
        return succ

    def topological_order(self, rng: random.Random | None = None) -> list[int]:
        """Kahn's algorithm; with ``rng`` the ready task is drawn at random."""
        indeg = [len(ps) for ps in self.preds]
        succ = self.successors()
        ready = [n for n, d in enumerate(indeg) if d == 0]
        order = []
        while ready:
            pos = rng.randrange(len(ready)) if rng else 0
            ready[pos], ready[-1] = ready[-1], ready[pos]
            u = ready.pop()
            order.append(u)
            for v in succ[u]:
                indeg[v] -= 1
                if indeg[v] == 0:
                    ready.append(v)
            if not rng:
                ready.sort()
        if len(order) != len(self.tasks):
            raise ValueError("dependency graph has a cycle")
        return order

    def dump(self) -> str:
        """Line-oriented DAG text: tasks ``kind k i j priority`` then edges ``u -> v``."""
        lines = [f"{t.kind} {t.k} {t.i} {t.j} {t.priority}" for t in self.tasks]
        lines += [f"{u} -> {v}" for u, v in self.edges]
        return "\n".join(lines) + "\n"


def _dependencies(tasks: list[Task]) -> list[tuple[int, ...]]:
    last_writer: dict[tuple, int] = {}
    readers: dict[tuple, list[int]] = {}
    preds = []
    for v, t in enumerate(tasks):
        ps: set[int] = set()
        writes = set(t.writes)
        for region in set(t.reads) | writes:
            w = last_writer.get(region)
            if w is not None:
                ps.add(w)
            if region in writes:
                ps.update(readers.pop(region, ()))
                last_writer[region] = v
            else:
                readers.setdefault(region, []).append(v)
        ps.discard(v)
        preds.append(tuple(sorted(ps)))
    return preds


def _task(kind: str, family: str, k: int, i: int, j: int, reads: Iterable, writes: Iterable) -> Task:
    writes = tuple(writes)
    return Task(kind, k, i, j, tuple(reads) + writes, writes, PRIORITY[family][kind])


def plan_cholesky(p: int, b: int) -> FactorizationPlan:
    if p < 1:
        raise ValueError("p must be >= 1")
    tasks = []
    for k in range(p):
        tasks.append(_task("potf2", "chol", k, k, k, (), _full(k, k)))
        for i in range(k + 1, p):
            tasks.append(_task("trsm", "chol", k, i, k, _full(k, k), _full(i, k)))
        for i in range(k + 1, p):
            for j in range(k + 1, i + 1):
                tasks.append(_task("gsmm", "chol", k, i, j,
                                   _full(i, k) + _full(j, k), _full(i, j)))
    return FactorizationPlan("chol", p, p, b, None, tasks)


def _plan_qr_like(family: str, names: tuple[str, str, str, str],
                  p: int, q: int, b: int, s: int) -> FactorizationPlan:
    if p < 1 or q < 1:
        raise ValueError("p and q must be >= 1")
    if s < 1 or b % s:
        raise ValueError(f"inner block size s={s} must divide b={b}")
    fact, apply_, couple, update = names
    tasks = []
    for k in range(min(p, q)):
        tasks.append(_task(fact, family, k, k, k, (), _full(k, k)))
        for j in range(k + 1, q):
            tasks.append(_task(apply_, family, k, k, j, ((k, k, LO),), _full(k, j)))
        for i in range(k + 1, p):
            tasks.append(_task(couple, family, k, i, k, (), ((k, k, UP),) + _full(i, k)))
            for j in range(k + 1, q):
                tasks.append(_task(update, family, k, i, j, _full(i, k),
                                   _full(k, j) + _full(i, j)))
    return FactorizationPlan(family, p, q, b, s, tasks)


def plan_qr(p: int, q: int, b: int, s: int) -> FactorizationPlan:
    return _plan_qr_like("qr", ("geqrt", "larfb", "tsqrt", "ssrfb"), p, q, b, s)


def plan_lu(p: int, q: int, b: int, s: int) -> FactorizationPlan:
    return _plan_qr_like("lu", ("getrf", "gessm", "tstrf", "ssssm"), p, q, b, s)


def make_plan(kind: str, p: int, q: int, b: int, s: int | None = None) -> FactorizationPlan:
    if kind == "chol":
        if p != q:
            raise ValueError("Cholesky needs a square tile grid")
        return plan_cholesky(p, b)
    s = b if s is None else s
    if kind == "qr":
        return plan_qr(p, q, b, s)
    if kind == "lu":
        return plan_lu(p, q, b, s)
    raise ValueError(f"unknown factorization kind {kind!r}")


# --------------------------------------------------------------------------
# auxiliary storage

@dataclass
class QRAux:
    """Accumulation strips ``t[(i, k)]`` of geqrt (``i == k``) and tsqrt."""
    t: dict = field(default_factory=dict)


@dataclass
class LUAux:
    """Pivots ``piv[(i, k)]`` and top multiplier strips ``lstrip[(i, k)]`` (tstrf only)."""
    piv: dict = field(default_factory=dict)
    lstrip: dict = field(default_factory=dict)


def make_aux(plan: FactorizationPlan):
    return {"qr": QRAux, "lu": LUAux}.get(plan.kind, lambda: None)()


class FactorizationError(ArithmeticError):
    """A kernel failed; carries the task that raised."""

    def __init__(self, task: Task, cause: K.KernelError):
        super().__init__(f"{task}: {cause}")
        self.task = task
        self.cause = cause


def run_task(task: Task, a: TileMatrix, aux, s: int | None, strict: bool = True) -> None:
    """Execute one task against the tile matrix and auxiliary storage.

    ``strict=False`` lets the LU factor kernels step over zero pivot columns.
    """
    kind, k, i, j = task.kind, task.k, task.i, task.j
    T = a.tile
    try:
        if kind == "potf2":
            K.potf2(T(k, k))
        elif kind == "trsm":
            K.trsm(T(k, k), T(i, k))
        elif kind == "gsmm":
            K.gsmm(T(i, k), T(j, k), T(i, j), diagonal=(i == j))
        elif kind == "geqrt":
            aux.t[(k, k)] = K.geqrt(T(k, k), s)
        elif kind == "larfb":
            K.larfb(T(k, j), T(k, k), aux.t[(k, k)])
        elif kind == "tsqrt":
            aux.t[(i, k)] = K.tsqrt(T(k, k), T(i, k), s)
        elif kind == "ssrfb":
            K.ssrfb(T(k, j), T(i, j), T(i, k), aux.t[(i, k)])
        elif kind == "getrf":
            aux.piv[(k, k)] = K.getrf(T(k, k), s, strict)
        elif kind == "gessm":
            K.gessm(T(k, j), T(k, k), aux.piv[(k, k)])
        elif kind == "tstrf":
            aux.piv[(i, k)], aux.lstrip[(i, k)] = K.tstrf(T(k, k), T(i, k), s, strict)
        elif kind == "ssssm":
            K.ssssm(T(k, j), T(i, j), T(i, k), aux.lstrip[(i, k)], aux.piv[(i, k)])
        else:
            raise ValueError(f"unknown task kind {kind!r}")
    except K.KernelError as exc:
        raise FactorizationError(task, exc) from exc


def _check_matrix(plan: FactorizationPlan, a: TileMatrix) -> None:
    if (a.p, a.q, a.b) != (plan.p, plan.q, plan.b):
        raise ValueError(
            f"matrix tiling {a.p}x{a.q} (b={a.b}) does not match plan "
            f"{plan.p}x{plan.q} (b={plan.b})")


def execute_sequential(plan: FactorizationPlan, a: TileMatrix, aux=None, order=None,
                       strict: bool = True):
    """Run the plan in program order (or in the given task order) in place.

    Returns ``(a, aux)``.
    """
    _check_matrix(plan, a)
    if aux is None:
        aux = make_aux(plan)
    for n in (range(len(plan.tasks)) if order is None else order):
        run_task(plan.tasks[n], a, aux, plan.s, strict)
    return a, aux


# --------------------------------------------------------------------------
# reading factors back

def upper_factor(a: TileMatrix) -> np.ndarray:
    """Dense upper triangular R (QR) or U (LU) from a factored tile matrix."""
    return np.triu(a.to_dense())


def cholesky_factor(a: TileMatrix) -> np.ndarray:
    return np.tril(a.to_dense())


def apply_transforms(plan: FactorizationPlan, a: TileMatrix, aux, x: np.ndarray) -> np.ndarray:
    """Apply the stored left transformations of a QR/LU plan to the rows of ``x``.

    For QR this computes ``Q^T x``; for LU it computes ``inv(L) P x`` in the
    elimination order of the plan. ``x`` must have ``plan.p * plan.b`` rows.
    """
    x = np.array(x, dtype=np.float64)
    if x.shape[0] != plan.p * plan.b:
        raise ValueError(f"x must have {plan.p * plan.b} rows")
    b = plan.b
    rows = [x[r * b:(r + 1) * b] for r in range(plan.p)]  # views, updated in place
    T = a.tile
    for task in plan.tasks:
        k, i = task.k, task.i
        if task.kind == "geqrt":
            K.larfb(rows[k], T(k, k), aux.t[(k, k)])
        elif task.kind == "tsqrt":
            K.ssrfb(rows[k], rows[i], T(i, k), aux.t[(i, k)])
        elif task.kind == "getrf":
            K.gessm(rows[k], T(k, k), aux.piv[(k, k)])
        elif task.kind == "tstrf":
            K.ssssm(rows[k], rows[i], T(i, k), aux.lstrip[(i, k)], aux.piv[(i, k)])
    return x


def explicit_q(plan: FactorizationPlan, a: TileMatrix, aux) -> np.ndarray:
    """Orthogonal factor of a tiled QR, assembled by applying it to the identity."""
    m = plan.p * plan.b
    return apply_transforms(plan, a, aux, np.eye(m)).T


# --------------------------------------------------------------------------
# flop models

def total_flops(kind: str, m, n, b, s=None):
    """Leading-order flop count of a whole tiled factorization (``m >= n``).

    Works with ``fractions.Fraction`` arguments for exact evaluation.
    """
    if kind == "qr":
        return 2 * n ** 2 * (m - n / 3) * (1 + s / (4 * b))
    if kind == "lu":
        return n ** 2 * (m - n / 3) * (1 + s / (2 * b))
    if kind == "chol":
        return n ** 3 / 3
    raise ValueError(f"unknown factorization kind {kind!r}")


def lapack_flops(kind: str, m, n):
    """Operation count of the corresponding LAPACK blocked algorithm."""
    if kind == "qr":
        return 2 * n ** 2 * (m - n / 3)
    if kind == "lu":
        return n ** 2 * (m - n / 3)
    if kind == "chol":
        return n ** 3 / 3
    raise ValueError(f"unknown factorization kind {kind!r}")


def plan_flops(plan: FactorizationPlan) -> float:
    return sum(K.kernel_flops(t.kind, plan.b, plan.s if t.kind in ("ssrfb", "ssssm") else None,
                              diagonal=(t.kind == "gsmm" and t.i == t.j))
               for t in plan.tasks)


# --------------------------------------------------------------------------
# convenience

def factorize(kind: str, a: np.ndarray, b: int, s: int | None = None,
              nthreads: int = 1, trace: bool = False):
    """Factor a dense matrix; returns ``(tiles, aux)`` or ``(tiles, aux, trace)``."""
    t = TileMatrix.from_dense(a, b)
    plan = make_plan(kind, t.p, t.q, b, s)
    if nthreads == 1 and not trace:
        return execute_sequential(plan, t)
    from .runtime import execute_parallel
    out, aux, tr = execute_parallel(plan, t, nthreads=nthreads)
    return (out, aux, tr) if trace else (out, aux)
