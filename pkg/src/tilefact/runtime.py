"""Dependency-driven asynchronous execution of factorization plans.

Workers are self-scheduled: each one locks the shared progress table, picks
the highest priority ready task, runs it without holding the lock and then
records its completion, which may make other tasks ready.

Readiness is derived from per-region counters instead of an explicit edge
list. For every region a task touches we precompute how many writers precede
it in program order (the version it must see) and, when the task writes, how
many readers of that version precede it. A task is ready when each region has
reached exactly that version and, for writes, all those readers are done.
"""

from __future__ import annotations

import csv
import io
import os
import threading
import time
from dataclasses import dataclass, field
from typing import NamedTuple

from .factor import PRIORITY, FactorizationPlan, FactorizationError, make_aux, run_task, _check_matrix
from .tilemat import TileMatrix

UNCLAIMED, CLAIMED, DONE = 0, 1, 2


class ProgressTable:
    """Shared completion state of one factorization."""

    def __init__(self, plan: FactorizationPlan):
        self.plan = plan
        n = len(plan.tasks)
        self.status = [UNCLAIMED] * n
        self.writes_done: dict[tuple, int] = {}
        self.reads_done: dict[tuple, int] = {}
        # per task: list of (region, required version, required readers or -1)
        self.needs: list[list[tuple[tuple, int, int]]] = []
        # (region, version) -> tasks that access the region at that version
        self.waiting: dict[tuple, list[int]] = {}
        version: dict[tuple, int] = {}
        nreaders: dict[tuple, int] = {}
        for v, t in enumerate(plan.tasks):
            writes = set(t.writes)
            need = []
            for region in sorted(set(t.reads) | writes):
                w = version.get(region, 0)
                if region in writes:
                    need.append((region, w, nreaders.get(region, 0)))
                    version[region] = w + 1
                    nreaders[region] = 0
                else:
                    need.append((region, w, -1))
                    nreaders[region] = nreaders.get(region, 0) + 1
                self.waiting.setdefault((region, w), []).append(v)
            self.needs.append(need)
        for region in version:
            self.writes_done[region] = 0
            self.reads_done[region] = 0
        for region in nreaders:
            self.writes_done.setdefault(region, 0)
            self.reads_done.setdefault(region, 0)
        self.remaining = n

    def is_ready(self, v: int) -> bool:
        if self.status[v] != UNCLAIMED:
            return False
        for region, w, r in self.needs[v]:
            if self.writes_done[region] != w:
                return False
            if r >= 0 and self.reads_done[region] != r:
                return False
        return True

    def claim(self, v: int) -> bool:
        if self.status[v] != UNCLAIMED:
            return False
        self.status[v] = CLAIMED
        return True

    def complete(self, v: int) -> list[int]:
        """Mark ``v`` done; returns tasks that became ready."""
        if self.status[v] == DONE:
            raise RuntimeError(f"task {v} completed twice")
        self.status[v] = DONE
        self.remaining -= 1
        touched = []
        for region, w, r in self.needs[v]:
            if r >= 0:
                self.writes_done[region] = w + 1
                self.reads_done[region] = 0
                touched.append((region, w + 1))
            else:
                self.reads_done[region] += 1
                touched.append((region, w))
        fresh = set()
        for key in touched:
            for u in self.waiting.get(key, ()):
                if self.is_ready(u):
                    fresh.add(u)
        return sorted(fresh)

    @property
    def finished(self) -> bool:
        return self.remaining == 0


@dataclass(frozen=True)
class PriorityPolicy:
    """Kernel kind -> rank; larger ranks run first."""
    ranks: dict

    @classmethod
    def for_kind(cls, kind: str) -> "PriorityPolicy":
        return cls(dict(PRIORITY[kind]))

    def rank(self, kind: str) -> int:
        return self.ranks.get(kind, 0)


def ready_tasks(table: ProgressTable, plan: FactorizationPlan | None = None) -> set[int]:
    """All unclaimed tasks whose dependencies are complete (full scan)."""
    return {v for v in range(len(table.status)) if table.is_ready(v)}


def pick_task(ready, plan: FactorizationPlan, policy: PriorityPolicy) -> int:
    """Highest rank first, ties broken by the smallest ``(k, i, j)``."""
    if not ready:
        raise ValueError("no ready task to pick")

    def order(v):
        t = plan.tasks[v]
        return (-policy.rank(t.kind), t.k, t.i, t.j)

    return min(ready, key=order)


class TraceEvent(NamedTuple):
    task: int
    start_ns: int
    end_ns: int


class PickEvent(NamedTuple):
    worker: int
    task: int
    rank: int
    best_ready_rank: int


@dataclass
class ExecutionTrace:
    workers: list[list[TraceEvent]]
    picks: list[PickEvent] = field(default_factory=list)

    def events(self):
        for w, evs in enumerate(self.workers):
            for ev in evs:
                yield w, ev

    @property
    def makespan_ns(self) -> int:
        evs = [ev for _, ev in self.events()]
        if not evs:
            return 0
        return max(e.end_ns for e in evs) - min(e.start_ns for e in evs)

    def idle_ns(self) -> int:
        """Total time workers spent between tasks inside the makespan."""
        evs = [ev for _, ev in self.events()]
        if not evs:
            return 0
        t0 = min(e.start_ns for e in evs)
        t1 = max(e.end_ns for e in evs)
        busy = sum(e.end_ns - e.start_ns for e in evs)
        return len(self.workers) * (t1 - t0) - busy

    def to_csv(self, plan: FactorizationPlan) -> str:
        out = io.StringIO()
        w = csv.writer(out, lineterminator="\n")
        w.writerow(["worker", "task_kind", "k", "i", "j", "start_ns", "end_ns"])
        for worker, ev in self.events():
            t = plan.tasks[ev.task]
            w.writerow([worker, t.kind, t.k, t.i, t.j, ev.start_ns, ev.end_ns])
        return out.getvalue()


class Violation(NamedTuple):
    before: int
    after: int

    def describe(self, plan: FactorizationPlan) -> str:
        return (f"{plan.tasks[self.after]} started before its predecessor "
                f"{plan.tasks[self.before]} ended")


def validate_trace(trace: ExecutionTrace, plan: FactorizationPlan) -> Violation | None:
    """``None`` if every task started after all its predecessors ended."""
    start, end = {}, {}
    for _, ev in trace.events():
        if ev.task in start:
            return Violation(ev.task, ev.task)
        start[ev.task] = ev.start_ns
        end[ev.task] = ev.end_ns
    for v, preds in enumerate(plan.preds):
        for u in preds:
            if u not in end or v not in start:
                return Violation(u, v)
            if start[v] < end[u]:
                return Violation(u, v)
    return None


def default_threads() -> int:
    env = os.environ.get("TILEFACT_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def execute_parallel(plan: FactorizationPlan, a: TileMatrix, aux=None,
                     nthreads: int | None = None, policy: PriorityPolicy | None = None):
    """Run the plan on a pool of self-scheduled worker threads.

    Returns ``(a, aux, trace)``. The first failing task in program order is
    re-raised after the pool has drained; no new tasks start once a kernel
    has failed.
    """
    _check_matrix(plan, a)
    nthreads = default_threads() if nthreads is None else nthreads
    if nthreads < 1:
        raise ValueError("nthreads must be >= 1")
    if aux is None:
        aux = make_aux(plan)
    policy = policy or PriorityPolicy.for_kind(plan.kind)

    table = ProgressTable(plan)
    ready = ready_tasks(table)
    cond = threading.Condition()
    errors: dict[int, BaseException] = {}
    trace = ExecutionTrace([[] for _ in range(nthreads)])
    clock = time.perf_counter_ns

    def worker(wid: int) -> None:
        log = trace.workers[wid]
        while True:
            with cond:
                while not ready and not errors and not table.finished:
                    cond.wait()
                if errors or table.finished:
                    return
                best = max(policy.rank(plan.tasks[u].kind) for u in ready)
                v = pick_task(ready, plan, policy)
                ready.discard(v)
                table.claim(v)
                trace.picks.append(PickEvent(wid, v, policy.rank(plan.tasks[v].kind), best))
            t0 = clock()
            try:
                run_task(plan.tasks[v], a, aux, plan.s)
            except BaseException as exc:  # noqa: BLE001 - re-raised by the caller
                with cond:
                    errors[v] = exc
                    cond.notify_all()
                return
            t1 = clock()
            log.append(TraceEvent(v, t0, t1))
            with cond:
                fresh = table.complete(v)
                ready.update(fresh)
                if fresh or table.finished:
                    cond.notify_all()

    threads = [threading.Thread(target=worker, args=(w,), name=f"tilefact-{w}", daemon=True)
               for w in range(nthreads)]
    for th in threads:
        th.start()
    for th in threads:
        th.join()
    if errors:
        raise errors[min(errors)]
    return a, aux, trace


__all__ = [
    "ProgressTable", "PriorityPolicy", "ExecutionTrace", "TraceEvent", "PickEvent",
    "Violation", "ready_tasks", "pick_task", "validate_trace", "execute_parallel",
    "default_threads", "FactorizationError",
]
