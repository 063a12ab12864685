"""Command-line front end: ``tilefact {factor,bench,stability,dag}``.

Exit codes: 0 success, 1 numerical or kernel failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import logging
import math
import statistics
import sys
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import stability as stab
from .factor import (FactorizationError, apply_transforms, cholesky_factor, explicit_q,
                     lapack_flops, make_plan, total_flops, upper_factor)
from .runtime import default_threads, execute_parallel
from .tilemat import TileMatrix, gen_random, gen_spd, inf_norm

log = logging.getLogger("tilefact")

EPS = 2.0 ** -52
KINDS = ("chol", "qr", "lu")
CHECK_FACTOR = {"chol": 1e3, "qr": 1e3, "lu": 1e4}


class UsageError(Exception):
    """Invalid combination of arguments (exit status 2)."""


@dataclass
class BenchRecord:
    kind: str
    m: int
    n: int
    b: int
    s: int
    nthreads: int
    rep: str
    wall_s: float
    model_flops: float
    true_flops: float
    gflops: float
    convert_s: str = ""
    flags: str = ""


BENCH_FIELDS = [f.name for f in fields(BenchRecord)]


@dataclass
class RunConfig:
    command: str
    kind: str = "qr"
    m: int | None = None
    n: int | None = None
    b: int | None = None
    s: int | None = None
    threads: list[int] | None = None
    seed: int = 0
    reps: int = 3
    out: str | None = None
    check: bool = False


# --------------------------------------------------------------------------
# argument helpers

def _int_list(text: str) -> list[int]:
    try:
        vals = [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma separated integers, got {text!r}")
    if not vals or any(v < 1 for v in vals):
        raise argparse.ArgumentTypeError(f"expected positive integers, got {text!r}")
    return vals


def _positive(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}")
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {v}")
    return v


def nearest_divisor(n: int, target: int, lo: int = 1, hi: int | None = None) -> int:
    """Divisor of ``n`` closest to ``target``, preferring ones inside ``[lo, hi]``."""
    divs = [d for d in range(1, n + 1) if n % d == 0]
    inside = [d for d in divs if d >= lo and (hi is None or d <= hi)]
    pool = inside or divs
    return min(pool, key=lambda d: (abs(d - target), -d))


def default_b(n: int) -> int:
    return nearest_divisor(n, 200)


def default_s(b: int) -> int:
    return nearest_divisor(b, 32, 20, 40)


def _validate(kind: str, m: int, n: int, b: int, s: int | None) -> None:
    if kind == "chol" and m != n:
        raise UsageError(f"Cholesky needs a square matrix (got m={m}, n={n})")
    if m % b or n % b:
        raise UsageError(f"tile size b={b} does not divide the matrix size {m}x{n}")
    if kind != "chol" and m < n:
        raise UsageError(f"need m >= n (got m={m}, n={n})")
    if s is not None and b % s:
        raise UsageError(f"inner block size s={s} does not divide b={b}")


def _matrix(kind: str, m: int, n: int, seed: int) -> np.ndarray:
    return gen_spd(n, seed) if kind == "chol" else gen_random(m, n, seed)


def _write(text: str, out: str | None) -> None:
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def output_hash(a: TileMatrix) -> str:
    return hashlib.sha256(a.buf.tobytes()).hexdigest()


# --------------------------------------------------------------------------
# factor

def check_factorization(kind: str, plan, a0: np.ndarray, tiles: TileMatrix, aux) -> dict:
    """Residual metrics of a finished factorization."""
    na = inf_norm(a0)
    if kind == "chol":
        L = cholesky_factor(tiles)
        return {"residual": inf_norm(a0 - L @ L.T) / na}
    R = upper_factor(tiles)[: a0.shape[1]]
    if kind == "qr":
        Q = explicit_q(plan, tiles, aux)[:, : a0.shape[1]]
        return {"residual": inf_norm(a0 - Q @ R) / na,
                "orthogonality": inf_norm(Q.T @ Q - np.eye(Q.shape[1]))}
    # LU: A = N U with N the inverse of the accumulated row transformations
    M = apply_transforms(plan, tiles, aux, np.eye(a0.shape[0]))
    N = np.linalg.solve(M, np.eye(a0.shape[0]))
    U = upper_factor(tiles)
    return {"residual": inf_norm(a0 - N @ U) / na}


def cmd_factor(args) -> int:
    kind = args.kind
    n = args.n
    m = args.m if args.m is not None else n
    b = args.b if args.b is not None else default_b(n)
    s = args.s if kind != "chol" else None
    if kind != "chol" and s is None:
        s = default_s(b)
    _validate(kind, m, n, b, s)
    nthreads = args.threads if args.threads is not None else default_threads()

    a0 = _matrix(kind, m, n, args.seed)
    tiles = TileMatrix.from_dense(a0, b)
    plan = make_plan(kind, tiles.p, tiles.q, b, s)
    t0 = time.perf_counter()
    try:
        tiles, aux, trace = execute_parallel(plan, tiles, nthreads=nthreads)
    except FactorizationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    wall = time.perf_counter() - t0
    flops = lapack_flops(kind, m, n)
    print(f"kind={kind} m={m} n={n} b={b} s={s if s is not None else ''} "
          f"threads={nthreads} tasks={len(plan)} wall_s={wall:.6f} "
          f"gflops={flops / wall / 1e9:.3f}")
    print(f"hash={output_hash(tiles)}")
    if args.trace:
        Path(args.trace).write_text(trace.to_csv(plan))
    status = 0
    if args.check:
        tol = CHECK_FACTOR[kind] * n * EPS
        metrics = check_factorization(kind, plan, a0, tiles, aux)
        for name, val in metrics.items():
            ok = val <= tol
            print(f"{name}={val:.3e} tol={tol:.3e} {'ok' if ok else 'FAILED'}")
            if not ok:
                status = 1
    return status


# --------------------------------------------------------------------------
# bench

def _time_one(kind, a0, b, s, nthreads, want_conversion):
    t0 = time.perf_counter()
    tiles = TileMatrix.from_dense(a0, b)
    t1 = time.perf_counter()
    plan = make_plan(kind, tiles.p, tiles.q, b, s)
    t2 = time.perf_counter()
    execute_parallel(plan, tiles, nthreads=nthreads)
    t3 = time.perf_counter()
    return t3 - t2, (t1 - t0) if want_conversion else None


def bench_cells(args) -> list[tuple[int, int, int]]:
    """``(m, n, nthreads)`` triples of the sweep."""
    threads = args.threads_list or [args.threads if args.threads is not None else default_threads()]
    if args.weak:
        if not args.nloc:
            raise UsageError("--weak requires --nloc")
        cells = []
        for t in threads:
            # constant memory per core: n^2 / t = nloc^2
            n = args.nloc * math.sqrt(t)
            b = args.b or default_b(args.nloc)
            n = max(b, int(round(n / b)) * b)
            cells.append((n, n, t))
        return cells
    sizes = args.n_list or ([args.n] if args.n else None)
    if not sizes:
        raise UsageError("bench needs --n or --n-list (or --weak --nloc)")
    return [(args.m or n, n, t) for n in sizes for t in threads]


def cmd_bench(args) -> int:
    kind = args.kind
    records: list[BenchRecord] = []
    prev_median: dict[tuple, float] = {}
    for m, n, nthreads in bench_cells(args):
        b = args.b or (default_b(args.nloc) if args.weak else default_b(n))
        s = None if kind == "chol" else (args.s or default_s(b))
        _validate(kind, m, n, b, s)
        a0 = _matrix(kind, m, n, args.seed)
        model = float(lapack_flops(kind, m, n))
        true = float(total_flops(kind, m, n, b, s))
        flags = []
        walls = []
        try:
            _time_one(kind, a0, b, s, nthreads, False)  # warmup
            for rep in range(args.reps):
                wall, conv = _time_one(kind, a0, b, s, nthreads, args.conversion)
                walls.append(wall)
                records.append(BenchRecord(kind, m, n, b, s or 0, nthreads, str(rep), wall,
                                           model, true, model / wall / 1e9,
                                           "" if conv is None else f"{conv:.6f}"))
        except FactorizationError as exc:
            log.error("cell m=%d n=%d threads=%d failed: %s", m, n, nthreads, exc)
            records.append(BenchRecord(kind, m, n, b, s or 0, nthreads, "median",
                                       math.nan, model, true, math.nan, "", "failed"))
            continue
        med = statistics.median(walls)
        key = (m, n)
        if not args.weak and key in prev_median and med > prev_median[key]:
            flags.append("slower_than_fewer_threads")
        prev_median[key] = med
        records.append(BenchRecord(kind, m, n, b, s or 0, nthreads, "median", med,
                                   model, true, model / med / 1e9, "", ";".join(flags)))
    _write(bench_to_csv(records), args.out)
    return 0


def bench_to_csv(records) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=BENCH_FIELDS, lineterminator="\n")
    w.writeheader()
    for r in records:
        w.writerow(asdict(r))
    return buf.getvalue()


# --------------------------------------------------------------------------
# stability

def cmd_stability(args) -> int:
    if args.experiment == "random":
        n = args.n or 512
        p_list = args.p_list or [1, 2, 4, 8, 16, 32]
        bad = [p for p in p_list if n % p]
        if bad:
            raise UsageError(f"p={bad[0]} does not divide n={n}")
        seeds = range(args.seed, args.seed + args.sample)
        baselines = ("gepp", "genp") if args.baselines else ()
        reports = stab.campaign_random(n, p_list, seeds=seeds, baselines=baselines)
        _write(stab.reports_to_csv(reports), args.out)
        return 0

    if not args.dir:
        raise UsageError("--experiment mtx needs --dir")
    directory = Path(args.dir)
    if not directory.is_dir():
        raise UsageError(f"directory not found: {directory}")
    reports, ratios = stab.campaign_mtx(directory, p=args.p or 32,
                                         rhs_seed=stab.rhs_seed_for(args.seed))
    hist = stab.histogram_to_csv(stab.ratio_histogram(ratios))
    if args.out:
        out = Path(args.out)
        out.write_text(hist)
        out.with_name(out.stem + "_ratios.csv").write_text(stab.ratios_to_csv(ratios))
        out.with_name(out.stem + "_reports.csv").write_text(stab.reports_to_csv(reports))
    else:
        sys.stdout.write(stab.ratios_to_csv(ratios))
        sys.stdout.write("\n")
        sys.stdout.write(hist)
    return 0


# --------------------------------------------------------------------------
# dag

def cmd_dag(args) -> int:
    p = args.p or 3
    q = args.q or p
    if args.kind == "chol" and p != q:
        raise UsageError("Cholesky plans are square (p == q)")
    if args.kind != "chol" and p < q:
        raise UsageError("need p >= q")
    b = args.b or 1
    s = args.s if args.s is not None else b
    if b % s:
        raise UsageError(f"inner block size s={s} does not divide b={b}")
    plan = make_plan(args.kind, p, q, b, None if args.kind == "chol" else s)
    _write(plan.dump(), args.out)
    return 0


# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="tilefact", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(sp, kind_default="qr"):
        sp.add_argument("--kind", choices=KINDS, default=kind_default)
        sp.add_argument("--m", type=_positive)
        sp.add_argument("--n", type=_positive)
        sp.add_argument("--b", type=_positive)
        sp.add_argument("--s", type=_positive)
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--out")

    f = sub.add_parser("factor", help="run one factorization")
    common(f)
    f.add_argument("--threads", type=_positive)
    f.add_argument("--check", action="store_true")
    f.add_argument("--trace", help="write a per-task CSV trace")

    bch = sub.add_parser("bench", help="timing sweep, CSV output")
    common(bch)
    bch.add_argument("--threads", type=_positive)
    bch.add_argument("--threads-list", type=_int_list)
    bch.add_argument("--n-list", type=_int_list)
    bch.add_argument("--reps", type=_positive, default=3)
    bch.add_argument("--weak", action="store_true", help="weak scaling at constant local size")
    bch.add_argument("--nloc", type=_positive)
    bch.add_argument("--conversion", action="store_true",
                     help="also time the conversion to tile layout")

    st = sub.add_parser("stability", help="backward error campaigns")
    st.add_argument("--experiment", choices=("random", "mtx"), default="random")
    st.add_argument("--n", type=_positive)
    st.add_argument("--p-list", type=_int_list)
    st.add_argument("--sample", type=_positive, default=10)
    st.add_argument("--baselines", action="store_true", help="append GEPP and GENP rows")
    st.add_argument("--dir")
    st.add_argument("--p", type=_positive)
    st.add_argument("--seed", type=int, default=0)
    st.add_argument("--out")

    d = sub.add_parser("dag", help="dump a task graph")
    d.add_argument("--kind", choices=KINDS, default="qr")
    d.add_argument("--p", type=_positive)
    d.add_argument("--q", type=_positive)
    d.add_argument("--b", type=_positive)
    d.add_argument("--s", type=_positive)
    d.add_argument("--out")
    return ap


COMMANDS = {"factor": cmd_factor, "bench": cmd_bench, "stability": cmd_stability, "dag": cmd_dag}


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s: %(message)s")
    if getattr(args, "n", None) is None and args.command in ("factor",):
        ap.error("factor needs --n")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"tilefact: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
