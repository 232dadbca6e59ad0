"""Deriving an Alltoallv pattern from a sparse matrix and benchmarking it.

Run with ``python demos/04_sparse_pattern.py``.
"""
from __future__ import annotations

from pathlib import Path

from persistent_rma import matrix_pattern, read_matrix_market, run_sparse_bench

path = Path(__file__).resolve().parents[1] / "tests" / "data" / "random64.mtx"
m = read_matrix_market(path)
print(f"{m.name}: {m.n_rows}x{m.n_cols}, {m.nnz} nonzeros")

# Rows are split into contiguous blocks; entry (i, j) means the owner of row i
# sends one element to the owner of column j.
pattern = matrix_pattern(m, 4)
print("bytes per (sender, receiver):")
print(pattern.counts_bytes)

for variant in ("baseline", "fence", "lock", "fence-hier"):
    rec = run_sparse_bench(variant, m, 4, 2, iterations=100, warmup=5, init_repeats=3)
    print(
        f"{variant:>10}: validated={rec.validated} t_per_iter={rec.t_per_iter_s * 1e6:.1f} us "
        f"window cache hits/misses={rec.cache_hits}/{rec.cache_misses}"
    )
