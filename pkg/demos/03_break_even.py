"""Break-even arithmetic and a small simulated benchmark sweep.

Run with ``python demos/03_break_even.py``.
"""
from __future__ import annotations

import sys

from persistent_rma import break_even, emit_csv, pair_break_evens, run_uniform_bench
from persistent_rma.bench import baseline_cost, total_cost

# Measured numbers from a 32 KiB uniform exchange on a cluster.
be = break_even(t_init_s=0.0, t_mpi_s=0.0588, t_persist_s=0.0410)
print(f"saving per iteration {be.savings_abs_s:.4f} s ({be.savings_pct:.2f}%)")

# A setup cost of 0.1 s with a 0.02 s saving is paid back at iteration 5.
be = break_even(0.1, 0.06, 0.04)
print("n_breakeven:", be.n_breakeven)
for n in (4, 5, 6):
    print(f"  N={n}: persistent {total_cost(0.1, 0.04, n):.2f} s, baseline {baseline_cost(0.06, n):.2f} s")

# Simulated timings are thread-scheduler noise, not network physics, but the
# pipeline from harness to CSV is the one used on real data.
records = [run_uniform_bench(v, 4, 2, 1024, iterations=200, warmup=10) for v in ("baseline", "fence", "lock", "fence-hier")]
emit_csv(records, pair_break_evens(records), sys.stdout)
