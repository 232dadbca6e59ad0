"""Command-line front-end: ``rma-alltoallv <subcommand> ...``.

Exit codes: 0 success, 1 validation failure or runtime error, 2 usage error.
"""
from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path
from typing import Sequence, TextIO

import numpy as np

from . import bench
from .collectives import INITS, alltoallv_baseline
from .matrix_market import MatrixMarketError, read_matrix_market
from .patterns import compare_recv, matrix_pattern, random_specs, uniform_pattern
from .runtime import RMAError, spawn_world


def _variants(text: str) -> list[str]:
    names = [v.strip() for v in text.split(",") if v.strip()]
    unknown = [v for v in names if v not in bench.VARIANTS]
    if unknown:
        raise argparse.ArgumentTypeError(
            f"unknown variant {', '.join(unknown)} (choose from {', '.join(bench.VARIANTS)})"
        )
    if not names:
        raise argparse.ArgumentTypeError("empty variant list")
    return names


def _sizes(text: str) -> list[int]:
    try:
        sizes = [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad size list {text!r}") from None
    if not sizes or min(sizes) <= 0:
        raise argparse.ArgumentTypeError("sizes must be positive integers")
    return sizes


def _positive(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a value >= 1, got {value}")
    return value


def _non_negative(text: str) -> int:
    value = int(text)
    if value < 0:
        raise argparse.ArgumentTypeError(f"expected a value >= 0, got {value}")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rma-alltoallv",
        description="Persistent one-sided Alltoallv on a simulated multi-rank runtime.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    world = argparse.ArgumentParser(add_help=False)
    world.add_argument("--ranks", type=_positive, default=4)
    world.add_argument("--ppn", type=_positive, default=1)
    world.add_argument("--seed", type=int, default=0)
    world.add_argument("--validate-rma", action="store_true", help="check RMA protocol rules (also RMA_VALIDATE=1)")
    world.add_argument("--timeout", type=float, default=30.0, help="per-world deadlock timeout in seconds")

    timing = argparse.ArgumentParser(add_help=False)
    timing.add_argument("--variants", type=_variants, default=list(bench.VARIANTS))
    timing.add_argument("--iterations", type=_positive, default=1000)
    timing.add_argument("--warmup", type=_non_negative, default=10)
    timing.add_argument("--elem-size", type=_positive, default=4)
    timing.add_argument("-o", "--output", type=Path, help="CSV output file (default: stdout)")
    timing.add_argument("--fake-clock", action="store_true", help="deterministic timer for reproducible CSV")

    p = sub.add_parser("bench-uniform", parents=[world, timing], help="uniform message-size sweep")
    p.add_argument("--sizes", type=_sizes, default=[32, 32768], help="comma-separated bytes per peer")

    p = sub.add_parser("bench-sparse", parents=[world, timing], help="Matrix Market derived pattern")
    p.add_argument("--matrix", type=Path, required=True)

    p = sub.add_parser("validate", parents=[world], help="check every variant against the baseline")
    p.add_argument("--trials", type=_positive, default=10)
    p.add_argument("--inject-fault", action="store_true", help="flip one received byte to exercise the checker")

    p = sub.add_parser("breakeven", help="break-even analysis of a benchmark CSV")
    p.add_argument("csv_in", type=Path)

    p = sub.add_parser("pattern", parents=[world], help="print a communication pattern's byte-count matrix")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--size", type=_positive, help="uniform bytes per peer")
    src.add_argument("--matrix", type=Path)
    p.add_argument("--elem-size", type=_positive, default=4)
    return parser


def _validate_flag(args: argparse.Namespace) -> bool | None:
    return True if args.validate_rma else None


def _clock(args: argparse.Namespace):
    return bench.fake_clock if args.fake_clock else bench.wall_clock


def _write_records(records: list[bench.TimingRecord], args: argparse.Namespace, out: TextIO) -> int:
    bes = bench.pair_break_evens(records)
    if args.output is not None:
        with open(args.output, "w", newline="") as fh:
            bench.emit_csv(records, bes, fh)
    else:
        bench.emit_csv(records, bes, out)
    bad = [r for r in records if not r.validated]
    for r in bad:
        print(f"validation failed: {r.variant} {r.pattern} size={r.msg_size_bytes}", file=sys.stderr)
    return 1 if bad else 0


def cmd_bench_uniform(args: argparse.Namespace, out: TextIO) -> int:
    records = []
    for size in args.sizes:
        if size % args.elem_size:
            print(f"error: size {size} is not a multiple of --elem-size {args.elem_size}", file=sys.stderr)
            return 2
        for variant in args.variants:
            records.append(
                bench.run_uniform_bench(
                    variant,
                    args.ranks,
                    args.ppn,
                    size,
                    args.iterations,
                    args.warmup,
                    elem_size=args.elem_size,
                    validate_rma=_validate_flag(args),
                    timeout=args.timeout,
                    clock=_clock(args),
                )
            )
    return _write_records(records, args, out)


def _load_matrix(path: Path):
    if not path.is_file():
        print(f"error: matrix file {path} not found", file=sys.stderr)
        return None
    try:
        return read_matrix_market(path)
    except MatrixMarketError as exc:
        print(f"error: {path}: {exc}", file=sys.stderr)
        return None


def cmd_bench_sparse(args: argparse.Namespace, out: TextIO) -> int:
    m = _load_matrix(args.matrix)
    if m is None:
        return 2
    if args.ranks > m.n_rows or m.n_rows != m.n_cols:
        print(f"error: {m.name} is {m.n_rows}x{m.n_cols}; cannot split over {args.ranks} ranks", file=sys.stderr)
        return 2
    records = [
        bench.run_sparse_bench(
            variant,
            m,
            args.ranks,
            args.ppn,
            args.iterations,
            args.warmup,
            elem_size=args.elem_size,
            validate_rma=_validate_flag(args),
            timeout=args.timeout,
            clock=_clock(args),
        )
        for variant in args.variants
    ]
    return _write_records(records, args, out)


def _validate_trial(ctx, specs, inject_fault: bool):
    mine = specs[ctx.rank]
    ref = mine.copy()
    alltoallv_baseline(ctx, ref)
    results = {"reference": ref}
    for name, init in INITS.items():
        spec = mine.copy()
        req = init(ctx, spec)
        req.start()
        req.wait()
        req.recv()
        req.free()
        results[name] = spec
    if inject_fault:
        victim = next((r for r, s in enumerate(specs) if s.total_recv_bytes), None)
        if victim == ctx.rank:
            results["fence"].recv_bytes[0] ^= 0xFF
    return results


def cmd_validate(args: argparse.Namespace, out: TextIO) -> int:
    rng = np.random.default_rng(args.seed)
    failures: dict[str, list[str]] = {name: [] for name in INITS}
    for trial in range(args.trials):
        specs = random_specs(args.ranks, rng)
        per_rank = spawn_world(
            args.ranks,
            args.ppn,
            _validate_trial,
            specs,
            args.inject_fault and trial == 0,
            validate=_validate_flag(args),
            timeout=args.timeout,
        )
        for rank, res in enumerate(per_rank):
            for name in INITS:
                for m in compare_recv(res[name], res["reference"], rank):
                    failures[name].append(
                        f"variant={name} trial={trial} rank={m.rank} peer={m.peer} index={m.index} "
                        f"expected={m.expected:#x} got={m.got:#x}"
                    )
    for name, bad in failures.items():
        print(f"{name}: {'PASS' if not bad else 'FAIL'} ({args.trials} trials, {args.ranks} ranks)", file=out)
        for line in bad:
            print(f"  {line}", file=out)
    return 1 if any(failures.values()) else 0


def cmd_breakeven(args: argparse.Namespace, out: TextIO) -> int:
    if not args.csv_in.is_file():
        print(f"error: {args.csv_in} not found", file=sys.stderr)
        return 2
    with open(args.csv_in, newline="") as fh:
        try:
            records, _ = bench.read_csv(fh)
        except (ValueError, KeyError) as exc:
            print(f"error: {args.csv_in}: {exc}", file=sys.stderr)
            return 2
    base = {(r.pattern, r.msg_size_bytes, r.ranks): r for r in records if r.variant == "baseline"}
    print("variant,pattern,msg_size_bytes,ranks,t_mpi_s,t_persist_s,delta_s,n_breakeven,savings_pct", file=out)
    status = 0
    for r in records:
        b = base.get((r.pattern, r.msg_size_bytes, r.ranks))
        if b is None:
            print(
                f"error: no baseline row for variant={r.variant} pattern={r.pattern} "
                f"msg_size_bytes={r.msg_size_bytes} ranks={r.ranks}",
                file=sys.stderr,
            )
            status = 1
            continue
        t_init = 0.0 if r is b else r.t_init_s
        try:
            be = bench.break_even(t_init, b.t_per_iter_s, r.t_per_iter_s)
            pct = f"{be.savings_pct:.2f}"
        except bench.UndefinedPercentageError:
            be = bench.break_even(t_init, b.t_per_iter_s, r.t_per_iter_s, percent=False)
            pct = "-"
        n = "-" if be.n_breakeven is None else str(be.n_breakeven)
        size = "" if r.msg_size_bytes is None else r.msg_size_bytes
        print(
            f"{r.variant},{r.pattern},{size},{r.ranks},{b.t_per_iter_s:.9g},{r.t_per_iter_s:.9g},"
            f"{be.delta_s:.9g},{n},{pct}",
            file=out,
        )
    return status


def cmd_pattern(args: argparse.Namespace, out: TextIO) -> int:
    if args.matrix is not None:
        m = _load_matrix(args.matrix)
        if m is None:
            return 2
        try:
            pattern = matrix_pattern(m, args.ranks, args.elem_size)
        except ValueError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 2
    else:
        try:
            pattern = uniform_pattern(args.ranks, args.size, args.elem_size)
        except ValueError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 2
    c = pattern.counts_bytes
    print(f"pattern={pattern.name} ranks={pattern.ranks} elem_size={pattern.elem_size}", file=out)
    print("bytes sent (row) -> received (column)", file=out)
    width = max(len(str(int(c.max(initial=0)))), 3)
    for r in range(pattern.ranks):
        print(" ".join(f"{int(v):>{width}}" for v in c[r]) + f" | {int(c[r].sum())}", file=out)
    print(" ".join(f"{int(v):>{width}}" for v in c.sum(axis=0)), file=out)
    return 0


COMMANDS = {
    "bench-uniform": cmd_bench_uniform,
    "bench-sparse": cmd_bench_sparse,
    "validate": cmd_validate,
    "breakeven": cmd_breakeven,
    "pattern": cmd_pattern,
}


def main(argv: Sequence[str] | None = None, out: TextIO | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if getattr(args, "validate_rma", False) is False and os.environ.get("RMA_VALIDATE") == "1":
        args.validate_rma = True
    out = out if out is not None else sys.stdout
    try:
        return COMMANDS[args.command](args, out)
    except RMAError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
