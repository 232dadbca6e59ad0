"""Benchmark harness and break-even analysis.

Timing protocol: barrier, time one ``init``, ``warmup`` untimed
``start``/``wait`` pairs, barrier, ``iterations`` timed pairs.  Each rank
averages its timed pairs; the reported per-iteration time is the maximum of
those means over ranks.  ``t_init_s`` covers init plus the final free.
Receive buffers are cleared and refilled by one extra untimed exchange and
then validated against the rank-ID fill rule.
"""
from __future__ import annotations

import csv
import io
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable, Sequence, TextIO

from .collectives import INITS, alltoallv_baseline
from .matrix_market import SparseMatrix, read_matrix_market
from .patterns import Mismatch, Pattern, fill_send, matrix_pattern, uniform_pattern, validate_recv
from .runtime import DEFAULT_TIMEOUT, RankContext, spawn_world

VARIANTS = ("baseline", "fence", "lock", "fence-hier")
PERSISTENT = VARIANTS[1:]

CSV_HEADER = (
    "variant,transport,ranks,ppn,pattern,msg_size_bytes,iterations,warmup,"
    "t_init_s,t_per_iter_s,t_total_s,delta_s,n_breakeven,savings_pct,validated"
)
CSV_FIELDS = tuple(CSV_HEADER.split(","))

ClockFactory = Callable[[int], Callable[[], float]]


class UndefinedPercentageError(ValueError):
    pass


class FakeClock:
    """Deterministic timer: every call advances by ``step`` seconds.

    The default step is a power of two so tick differences are exact.
    """

    def __init__(self, step: float = 2.0**-20):
        self.step = step
        self._ticks = 0

    def __call__(self) -> float:
        self._ticks += 1
        return self._ticks * self.step


def fake_clock(rank: int) -> FakeClock:
    return FakeClock()


def wall_clock(rank: int) -> Callable[[], float]:
    return time.perf_counter


@dataclass
class TimingRecord:
    variant: str
    ranks: int
    ppn: int
    pattern: str
    msg_size_bytes: int | None
    iterations: int
    warmup: int
    t_init_s: float
    t_per_iter_s: float
    t_total_s: float
    validated: bool
    transport: str = "sim"
    rank_means: list[float] = field(default_factory=list, compare=False, repr=False)
    cache_hits: int = field(default=0, compare=False)
    cache_misses: int = field(default=0, compare=False)
    mismatches: list[Mismatch] = field(default_factory=list, compare=False, repr=False)


@dataclass(frozen=True)
class BreakEvenResult:
    delta_s: float
    n_breakeven: int | None
    savings_abs_s: float
    savings_pct: float | None


def _ceil(x: float) -> int:
    # t_init/delta is often an integer up to rounding (0.1/0.02 -> 5.000000000000001)
    n = math.ceil(x)
    if n - 1 >= 0 and math.isclose(x, n - 1, rel_tol=1e-9, abs_tol=0.0):
        n -= 1
    return n


def break_even(t_init_s: float, t_mpi_s: float, t_persist_s: float, *, percent: bool = True) -> BreakEvenResult:
    """Iterations after which persistent setup is paid back, plus per-iteration savings.

    ``n_breakeven = max(1, ceil(t_init / (t_mpi - t_persist)))`` when the
    persistent path is faster per iteration, else ``None``.
    """
    if min(t_init_s, t_mpi_s, t_persist_s) < 0:
        raise ValueError("times must be non-negative")
    delta = t_mpi_s - t_persist_s
    n = max(1, _ceil(t_init_s / delta)) if delta > 0 else None
    pct = None
    if percent:
        if t_mpi_s == 0:
            raise UndefinedPercentageError("savings percentage undefined for t_mpi_s == 0")
        pct = 100.0 * delta / t_mpi_s
    return BreakEvenResult(delta, n, delta, pct)


def total_cost(t_init_s: float, t_persist_s: float, n: int) -> float:
    """Persistent cost of ``n`` iterations: one init plus ``n`` start/wait pairs."""
    return t_init_s + n * t_persist_s


def baseline_cost(t_mpi_s: float, n: int) -> float:
    return n * t_mpi_s


# -- harness ------------------------------------------------------------------


def _bench_rank(
    ctx: RankContext,
    variant: str,
    pattern: Pattern,
    iterations: int,
    warmup: int,
    init_repeats: int,
    clock_factory: ClockFactory,
) -> dict[str, Any]:
    clock = clock_factory(ctx.rank)
    spec = pattern.slice(ctx.rank)
    fill_send(spec, ctx.rank)
    req = None
    ctx.barrier()
    if variant == "baseline":
        t_init = 0.0

        def step() -> None:
            alltoallv_baseline(ctx, spec)

    else:
        init = INITS[variant]
        t0 = clock()
        req = init(ctx, spec)
        t_init = clock() - t0
        for _ in range(init_repeats - 1):
            req = init(ctx, spec)

        def step() -> None:
            req.start()
            req.wait()

    for _ in range(warmup):
        step()
    ctx.barrier()
    t0 = clock()
    for _ in range(iterations):
        step()
    mean = (clock() - t0) / iterations

    spec.recv_bytes[:] = 0
    # a lock-variant peer may start its next epoch before this rank re-locks
    ctx.barrier()
    step()
    if req is not None:
        req.recv()
    mismatches = validate_recv(spec, ctx.rank)

    hits = misses = 0
    if req is not None:
        hits, misses = req.cache.hits, req.cache.misses
        t0 = clock()
        req.free()
        t_init += clock() - t0
    return {"t_init": t_init, "mean": mean, "mismatches": mismatches, "hits": hits, "misses": misses}


def run_pattern_bench(
    variant: str,
    pattern: Pattern,
    ppn: int = 1,
    iterations: int = 1000,
    warmup: int = 10,
    *,
    msg_size_bytes: int | None = None,
    init_repeats: int = 1,
    validate_rma: bool | None = None,
    timeout: float = DEFAULT_TIMEOUT,
    clock: ClockFactory | None = None,
) -> TimingRecord:
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; choose from {', '.join(VARIANTS)}")
    if iterations < 1 or warmup < 0 or init_repeats < 1:
        raise ValueError("need iterations >= 1, warmup >= 0, init_repeats >= 1")
    results = spawn_world(
        pattern.ranks,
        ppn,
        _bench_rank,
        variant,
        pattern,
        iterations,
        warmup,
        init_repeats,
        clock or wall_clock,
        validate=validate_rma,
        timeout=timeout,
    )
    t_init = max(r["t_init"] for r in results)
    means = [r["mean"] for r in results]
    t_iter = max(means)
    mismatches = [m for r in results for m in r["mismatches"]]
    return TimingRecord(
        variant=variant,
        ranks=pattern.ranks,
        ppn=ppn,
        pattern=pattern.name,
        msg_size_bytes=msg_size_bytes,
        iterations=iterations,
        warmup=warmup,
        t_init_s=t_init,
        t_per_iter_s=t_iter,
        t_total_s=t_init + iterations * t_iter,
        validated=not mismatches,
        rank_means=means,
        cache_hits=results[0]["hits"],
        cache_misses=results[0]["misses"],
        mismatches=mismatches,
    )


def run_uniform_bench(
    variant: str,
    ranks: int,
    ppn: int,
    msg_size: int,
    iterations: int = 1000,
    warmup: int = 10,
    *,
    elem_size: int = 4,
    **kwargs: Any,
) -> TimingRecord:
    """Benchmark 1: every rank sends ``msg_size`` bytes to every rank."""
    pattern = uniform_pattern(ranks, msg_size, elem_size)
    return run_pattern_bench(variant, pattern, ppn, iterations, warmup, msg_size_bytes=msg_size, **kwargs)


def run_sparse_bench(
    variant: str,
    matrix: str | Path | SparseMatrix,
    ranks: int,
    ppn: int,
    iterations: int = 1000,
    warmup: int = 10,
    *,
    elem_size: int = 4,
    **kwargs: Any,
) -> TimingRecord:
    """Benchmark 2: Alltoallv derived from a sparse matrix's block structure.

    For persistent variants the window must be created exactly once, however
    many inits are run (``init_repeats``).
    """
    m = matrix if isinstance(matrix, SparseMatrix) else read_matrix_market(matrix)
    pattern = matrix_pattern(m, ranks, elem_size)
    rec = run_pattern_bench(variant, pattern, ppn, iterations, warmup, **kwargs)
    if variant != "baseline" and rec.cache_misses != 1:
        raise RuntimeError(f"expected one window creation, saw {rec.cache_misses} cache misses")
    return rec


# -- CSV ----------------------------------------------------------------------


def pair_break_evens(records: Sequence[TimingRecord]) -> list[BreakEvenResult | None]:
    """Break-even of each persistent record against the baseline of the same configuration."""
    base = {
        (r.pattern, r.msg_size_bytes, r.ranks, r.ppn): r for r in records if r.variant == "baseline"
    }
    out: list[BreakEvenResult | None] = []
    for r in records:
        b = base.get((r.pattern, r.msg_size_bytes, r.ranks, r.ppn))
        if r.variant == "baseline" or b is None or b.t_per_iter_s <= 0:
            out.append(None)
        else:
            out.append(break_even(r.t_init_s, b.t_per_iter_s, r.t_per_iter_s))
    return out


def _fmt(x: float | None) -> str:
    return "" if x is None else f"{x:.9g}"


def emit_csv(
    records: Iterable[TimingRecord],
    break_evens: Iterable[BreakEvenResult | None] | None,
    out: TextIO,
) -> None:
    records = list(records)
    bes = list(break_evens) if break_evens is not None else [None] * len(records)
    if len(bes) != len(records):
        raise ValueError("need one break-even entry (or None) per record")
    w = csv.writer(out, lineterminator="\n")
    w.writerow(CSV_FIELDS)
    for r, be in zip(records, bes):
        w.writerow(
            [
                r.variant,
                r.transport,
                r.ranks,
                r.ppn,
                r.pattern,
                "" if r.msg_size_bytes is None else r.msg_size_bytes,
                r.iterations,
                r.warmup,
                _fmt(r.t_init_s),
                _fmt(r.t_per_iter_s),
                _fmt(r.t_total_s),
                _fmt(be.delta_s if be else None),
                "" if be is None or be.n_breakeven is None else be.n_breakeven,
                _fmt(be.savings_pct if be else None),
                "true" if r.validated else "false",
            ]
        )


def emit_csv_text(records: Sequence[TimingRecord], break_evens=None) -> str:
    buf = io.StringIO()
    emit_csv(records, break_evens, buf)
    return buf.getvalue()


def read_csv(src: TextIO) -> tuple[list[TimingRecord], list[BreakEvenResult | None]]:
    reader = csv.DictReader(src)
    if tuple(reader.fieldnames or ()) != CSV_FIELDS:
        raise ValueError(f"unexpected CSV header {reader.fieldnames}")
    records, bes = [], []
    for row in reader:
        records.append(
            TimingRecord(
                variant=row["variant"],
                ranks=int(row["ranks"]),
                ppn=int(row["ppn"]),
                pattern=row["pattern"],
                msg_size_bytes=int(row["msg_size_bytes"]) if row["msg_size_bytes"] else None,
                iterations=int(row["iterations"]),
                warmup=int(row["warmup"]),
                t_init_s=float(row["t_init_s"]),
                t_per_iter_s=float(row["t_per_iter_s"]),
                t_total_s=float(row["t_total_s"]),
                validated=row["validated"] == "true",
                transport=row["transport"],
            )
        )
        if row["delta_s"]:
            delta = float(row["delta_s"])
            n = int(row["n_breakeven"]) if row["n_breakeven"] else None
            pct = float(row["savings_pct"]) if row["savings_pct"] else None
            bes.append(BreakEvenResult(delta, n, delta, pct))
        else:
            bes.append(None)
    return records, bes
