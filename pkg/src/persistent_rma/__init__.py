"""Persistent one-sided Alltoallv collectives over a simulated multi-rank runtime."""
from .bench import (
    BreakEvenResult,
    FakeClock,
    TimingRecord,
    baseline_cost,
    break_even,
    emit_csv,
    pair_break_evens,
    read_csv,
    run_sparse_bench,
    run_uniform_bench,
    total_cost,
)
from .collectives import (
    CountMismatchError,
    ExchangeSpec,
    LifecycleError,
    PersistentRequest,
    ReceiveOverflowError,
    RequestState,
    Variant,
    WindowCache,
    alltoallv_baseline,
    alltoallv_fence_hierarchy_init,
    alltoallv_fence_init,
    alltoallv_lock_init,
    fence_hierarchy_start,
    fence_start,
    fence_wait,
    free_request,
    lock_free,
    lock_start,
    lock_wait,
)
from .matrix_market import MatrixMarketError, SparseMatrix, parse_matrix_market, read_matrix_market
from .patterns import Pattern, fill_send, matrix_pattern, random_specs, uniform_pattern, validate_recv
from .runtime import (
    FenceAssert,
    LockMode,
    ProtocolViolation,
    PutDescriptor,
    RaceDetected,
    RankContext,
    Window,
    WorldError,
    spawn_world,
)

__version__ = "0.1.0"
