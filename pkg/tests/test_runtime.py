import threading
import time
import warnings

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from persistent_rma.runtime import (
    DeadlockError,
    EpochState,
    FenceAssert,
    LockMode,
    OverlapWarning,
    ProtocolViolation,
    PutDescriptor,
    RaceDetected,
    RMABoundsError,
    StaleWindowError,
    WindowFreedError,
    WorldError,
    spawn_world,
)


def put_desc(ctx, target, length, toff=0, ooff=0):
    return PutDescriptor(ctx.rank, target, ooff, toff, length)


# -- spawn_world ---------------------------------------------------------------


def test_single_rank_world():
    assert spawn_world(1, 1, lambda ctx: ctx.rank) == [0]


@pytest.mark.parametrize("size,ppn", [(4, 2), (5, 2), (7, 3), (6, 1), (3, 8)])
def test_node_ids_are_block_placement(size, ppn):
    got = spawn_world(size, ppn, lambda ctx: ctx.node_id)
    assert got == [r // ppn for r in range(size)]
    if (size, ppn) == (5, 2):
        assert got == [0, 0, 1, 1, 2]


def test_world_size_visible_everywhere():
    assert spawn_world(3, 1, lambda ctx: ctx.world_size) == [3, 3, 3]


def test_worker_error_names_rank():
    def prog(ctx):
        if ctx.rank == 2:
            raise RuntimeError("boom")
        ctx.barrier()

    with pytest.raises(WorldError) as info:
        spawn_world(4, 1, prog)
    assert info.value.rank == 2
    assert isinstance(info.value.cause, RuntimeError)


def test_mismatched_collectives_hit_timeout():
    def prog(ctx):
        if ctx.rank == 0:
            ctx.barrier()

    with pytest.raises(WorldError) as info:
        spawn_world(2, 1, prog, timeout=0.3)
    assert isinstance(info.value.cause, DeadlockError)


@pytest.mark.parametrize("size,ppn", [(0, 1), (2, 0)])
def test_bad_world_arguments(size, ppn):
    with pytest.raises(ValueError):
        spawn_world(size, ppn, lambda ctx: None)


# -- barrier / alltoall_exchange ------------------------------------------------


def test_barrier_all_return():
    assert spawn_world(4, 1, lambda ctx: ctx.barrier() or True) == [True] * 4


def test_barrier_orders_write_before_read():
    def prog(ctx):
        win = ctx.win_create(bytearray(8))
        win.fence()
        if ctx.rank == 0:
            win.put(put_desc(ctx, 1, 8), b"ABCDEFGH")
        win.fence(FenceAssert.NO_PUT | FenceAssert.NO_SUCCEED)
        ctx.barrier()
        data = win.read() if ctx.rank == 1 else None
        win.free()
        return data

    assert spawn_world(2, 1, prog, validate=True)[1] == b"ABCDEFGH"


def test_alltoall_constant_rows():
    got = spawn_world(4, 1, lambda ctx: ctx.alltoall_exchange([ctx.rank] * 4))
    assert got == [[0, 1, 2, 3]] * 4


def test_alltoall_transpose_oracle():
    size = 5
    got = spawn_world(size, 1, lambda ctx: ctx.alltoall_exchange([ctx.rank * 10 + p for p in range(size)]))
    # transpose oracle: rank r receives entry [p][r] of the sent matrix
    sent = [[r * 10 + p for p in range(size)] for r in range(size)]
    assert got == [[sent[p][r] for p in range(size)] for r in range(size)]
    assert got[2] == [2, 12, 22, 32, 42]


def test_alltoall_single_rank():
    assert spawn_world(1, 1, lambda ctx: ctx.alltoall_exchange(["x"])) == [["x"]]


def test_alltoall_wrong_length():
    with pytest.raises(WorldError) as info:
        spawn_world(2, 1, lambda ctx: ctx.alltoall_exchange([1, 2, 3]))
    assert isinstance(info.value.cause, ValueError)


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 6).flatmap(lambda n: st.lists(st.lists(st.integers(), min_size=n, max_size=n), min_size=n, max_size=n)))
def test_alltoall_twice_is_identity(matrix):
    n = len(matrix)
    got = spawn_world(n, 1, lambda ctx: ctx.alltoall_exchange(ctx.alltoall_exchange(matrix[ctx.rank])))
    assert got == matrix


# -- windows -------------------------------------------------------------------


def test_zero_length_window():
    def prog(ctx):
        win = ctx.win_create(bytearray(0))
        win.fence()
        win.put(put_desc(ctx, 0, 0), b"")
        with pytest.raises(RMABoundsError):
            win.put(put_desc(ctx, 0, 1), b"x")
        win.fence(FenceAssert.NO_SUCCEED)
        win.free()
        return win.size_bytes

    assert spawn_world(2, 1, prog) == [0, 0]


def test_window_sizes_differ_per_rank():
    def prog(ctx):
        win = ctx.win_create(bytearray([64, 128][ctx.rank]))
        return win.size_bytes, win.epoch_state

    assert spawn_world(2, 1, prog) == [(64, EpochState.IDLE), (128, EpochState.IDLE)]


def test_size_mismatch_is_argument_error():
    with pytest.raises(WorldError) as info:
        spawn_world(1, 1, lambda ctx: ctx.win_create(bytearray(8), 16))
    assert isinstance(info.value.cause, ValueError)


def test_generation_increments_on_recreate():
    def prog(ctx):
        a = ctx.win_create(bytearray(4))
        a.free()
        b = ctx.win_create(bytearray(4))
        return a.generation, b.generation

    assert spawn_world(2, 1, prog) == [(1, 2), (1, 2)]


def test_free_then_put_and_double_free():
    def prog(ctx):
        win = ctx.win_create(bytearray(4))
        win.free()
        with pytest.raises(WindowFreedError, match="window freed"):
            win.put(put_desc(ctx, 0, 1), b"x")
        with pytest.raises(WindowFreedError):
            win.free()
        return True

    assert spawn_world(2, 1, prog) == [True, True]


def test_free_while_self_locked_is_violation():
    def prog(ctx):
        win = ctx.win_create(bytearray(4))
        win.lock(ctx.rank, LockMode.EXCLUSIVE)
        assert win.epoch_state is EpochState.SELF_LOCKED_EXCLUSIVE
        with pytest.raises(ProtocolViolation):
            win.free()
        win.unlock(ctx.rank)
        win.free()
        return True

    assert spawn_world(1, 1, prog) == [True]


def test_stale_handle_rejected():
    def prog(ctx):
        old = ctx.win_create(bytearray(4))
        ctx.win_create(bytearray(4))
        with pytest.raises(StaleWindowError):
            old.fence()
        return True

    assert spawn_world(2, 1, prog) == [True, True]


# -- fence epochs ----------------------------------------------------------------


def test_fence_put_visible_after_closing_fence():
    def prog(ctx):
        buf = bytearray(8)
        win = ctx.win_create(buf)
        win.fence()
        before = None
        if ctx.rank == 0:
            win.put(put_desc(ctx, 1, 8), b"\x01" * 8)
        ctx.barrier()
        if ctx.rank == 1:
            before = bytes(buf)
        win.fence()
        return before, bytes(buf)

    res = spawn_world(2, 1, prog)
    assert res[1] == (b"\x00" * 8, b"\x01" * 8)
    assert res[0][1] == b"\x00" * 8


def test_consecutive_fences_without_puts():
    def prog(ctx):
        buf = bytearray(b"abcd")
        win = ctx.win_create(buf)
        win.fence()
        win.fence()
        assert win.epoch_state is EpochState.FENCE_OPEN
        win.fence(FenceAssert.NO_SUCCEED)
        assert win.epoch_state is EpochState.IDLE
        win.free()
        return bytes(buf)

    assert spawn_world(3, 1, prog) == [b"abcd"] * 3


def test_put_after_noput_fence_flagged_in_validating_mode():
    def prog(ctx):
        win = ctx.win_create(bytearray(4))
        win.fence(FenceAssert.NO_PUT)
        with pytest.raises(ProtocolViolation, match="NO_PUT"):
            win.put(put_desc(ctx, 0, 1), b"x")
        return True

    assert spawn_world(2, 1, prog, validate=True) == [True, True]


def test_noput_not_enforced_without_validation():
    def prog(ctx):
        buf = bytearray(1)
        win = ctx.win_create(buf)
        win.fence(FenceAssert.NO_PUT)
        win.put(put_desc(ctx, ctx.rank, 1), b"z")
        win.fence(FenceAssert.NO_SUCCEED)
        return bytes(buf)

    assert spawn_world(2, 1, prog, validate=False) == [b"z", b"z"]


def test_fence_during_lock_epoch_is_violation():
    def prog(ctx):
        win = ctx.win_create(bytearray(4))
        win.lock_all()
        with pytest.raises(ProtocolViolation):
            win.fence()
        win.unlock_all()
        return True

    assert spawn_world(1, 1, prog) == [True]


# -- put -------------------------------------------------------------------------


def test_put_zero_length_changes_nothing():
    def prog(ctx):
        buf = bytearray(b"keep")
        win = ctx.win_create(buf)
        win.fence()
        win.put(put_desc(ctx, 0, 0), b"")
        win.fence(FenceAssert.NO_SUCCEED)
        return bytes(buf)

    assert spawn_world(1, 1, prog) == [b"keep"]


def test_put_out_of_bounds_names_target():
    def prog(ctx):
        win = ctx.win_create(bytearray(8))
        win.fence()
        if ctx.rank == 0:
            with pytest.raises(RMABoundsError, match=r"rank 1 bytes \[6, 10\)"):
                win.put(put_desc(ctx, 1, 4, toff=6), b"abcd")
        win.fence(FenceAssert.NO_SUCCEED)
        return True

    assert spawn_world(2, 1, prog) == [True, True]


def test_put_origin_range_checked():
    def prog(ctx):
        win = ctx.win_create(bytearray(8))
        win.fence()
        with pytest.raises(RMABoundsError, match="origin"):
            win.put(put_desc(ctx, 0, 4, ooff=2), b"abc")
        return True

    assert spawn_world(1, 1, prog) == [True]


def test_put_outside_epoch():
    def prog(ctx):
        win = ctx.win_create(bytearray(4))
        with pytest.raises(ProtocolViolation, match="outside any access epoch"):
            win.put(put_desc(ctx, 0, 1), b"x")
        return True

    assert spawn_world(1, 1, prog) == [True]


def test_self_put_memmove_oracle():
    def prog(ctx):
        buf = bytearray(range(16))
        expected = bytearray(buf)
        expected[4:10] = bytes(buf[0:6])  # memmove oracle on a snapshot
        win = ctx.win_create(buf)
        win.fence()
        win.put(put_desc(ctx, 0, 6, toff=4, ooff=0), bytes(buf))
        win.fence(FenceAssert.NO_SUCCEED)
        return bytes(buf) == bytes(expected)

    assert spawn_world(1, 1, prog) == [True]


def test_eager_delivery_option():
    def prog(ctx):
        buf = bytearray(2)
        win = ctx.win_create(buf)
        win.fence()
        win.put(put_desc(ctx, 0, 2), b"hi")
        seen = bytes(buf)
        win.fence(FenceAssert.NO_SUCCEED)
        return seen

    assert spawn_world(1, 1, prog, eager=True) == [b"hi"]
    assert spawn_world(1, 1, prog) == [b"\x00\x00"]


def test_overlapping_puts_last_issued_wins_with_warning():
    def prog(ctx):
        buf = bytearray(4)
        win = ctx.win_create(buf)
        win.fence()
        win.put(put_desc(ctx, 0, 4), b"AAAA")
        win.put(put_desc(ctx, 0, 2, toff=1), b"BB")
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            win.fence(FenceAssert.NO_SUCCEED)
        return bytes(buf), [w.category for w in caught]

    data, cats = spawn_world(1, 1, prog, validate=True)[0]
    assert data == b"ABBA"
    assert OverlapWarning in cats


# -- locks ------------------------------------------------------------------------


def test_lock_all_blocks_on_owner_exclusive_lock():
    events = []

    def prog(ctx):
        win = ctx.win_create(bytearray(4))
        if ctx.rank == 0:
            win.lock(0, LockMode.EXCLUSIVE)
            ctx.barrier()
            time.sleep(0.2)
            events.append("owner-unlock")
            win.unlock(0)
        else:
            ctx.barrier()
            win.lock_all()
            events.append("lock_all-granted")
            win.unlock_all()
        ctx.barrier()
        win.free()

    spawn_world(2, 1, prog)
    assert events == ["owner-unlock", "lock_all-granted"]


def test_lock_unlock_no_puts():
    def prog(ctx):
        buf = bytearray(b"same")
        win = ctx.win_create(buf)
        win.lock((ctx.rank + 1) % ctx.world_size, LockMode.SHARED)
        win.unlock((ctx.rank + 1) % ctx.world_size)
        ctx.barrier()
        return bytes(buf)

    assert spawn_world(3, 1, prog) == [b"same"] * 3


def test_exclusive_self_lock_put_unlock():
    def prog(ctx):
        buf = bytearray(3)
        win = ctx.win_create(buf)
        win.lock(0, LockMode.EXCLUSIVE)
        win.put(put_desc(ctx, 0, 3), b"xyz")
        pending = bytes(buf)
        win.unlock(0)
        return pending, bytes(buf)

    assert spawn_world(1, 1, prog) == [(b"\x00" * 3, b"xyz")]


def test_unlock_without_lock():
    def prog(ctx):
        win = ctx.win_create(bytearray(1))
        with pytest.raises(ProtocolViolation):
            win.unlock(0)
        with pytest.raises(ProtocolViolation):
            win.unlock_all()
        return True

    assert spawn_world(1, 1, prog) == [True]


def test_nested_lock_all_and_double_lock():
    def prog(ctx):
        win = ctx.win_create(bytearray(1))
        win.lock(0)
        with pytest.raises(ProtocolViolation):
            win.lock(0)
        win.unlock(0)
        win.lock_all()
        with pytest.raises(ProtocolViolation, match="nested"):
            win.lock_all()
        win.unlock_all()
        return True

    assert spawn_world(1, 1, prog) == [True]


def test_lock_all_puts_reach_every_target():
    def prog(ctx):
        n = ctx.world_size
        buf = bytearray(n)
        win = ctx.win_create(buf)
        win.lock_all()
        for t in range(n):
            win.put(put_desc(ctx, t, 1, toff=ctx.rank), bytes([ctx.rank + 1]))
        win.unlock_all()
        ctx.barrier()
        return bytes(buf)

    assert spawn_world(4, 1, prog) == [bytes([1, 2, 3, 4])] * 4


def test_lock_exclusion_by_delivery_order():
    """With rank 0 holding an exclusive lock on rank 2, rank 1's puts land only after release."""

    def prog(ctx):
        win = ctx.win_create(bytearray(4))
        if ctx.rank == 0:
            win.lock(2, LockMode.EXCLUSIVE)
            ctx.barrier()
            time.sleep(0.15)
            win.unlock(2)
        elif ctx.rank == 1:
            ctx.barrier()
            win.lock_all()
            win.put(put_desc(ctx, 2, 4), b"data")
            win.unlock_all()
        else:
            ctx.barrier()
        ctx.barrier()
        return ctx.world.trace

    trace = spawn_world(3, 1, prog, validate=True)[0]
    release = next(seq for seq, kind, o, t in trace if kind == "unlock" and (o, t) == (0, 2))
    delivers = [seq for seq, kind, o, t in trace if kind == "deliver" and (o, t) == (1, 2)]
    assert delivers and min(delivers) > release


# -- validating-mode race detection ----------------------------------------------


def test_read_during_remote_lock_epoch_is_race():
    gate = threading.Event()

    def prog(ctx):
        win = ctx.win_create(bytearray(4))
        if ctx.rank == 1:
            win.lock_all()
            ctx.barrier()
            gate.wait(5)
            win.unlock_all()
        else:
            ctx.barrier()
            try:
                win.read()
            except RaceDetected:
                return "race"
            finally:
                gate.set()
        return None

    assert spawn_world(2, 1, prog, validate=True)[0] == "race"


def test_read_with_pending_fence_put_is_race():
    def prog(ctx):
        win = ctx.win_create(bytearray(4))
        win.fence()
        win.put(put_desc(ctx, 0, 4), b"abcd")
        with pytest.raises(RaceDetected):
            win.read()
        win.fence(FenceAssert.NO_SUCCEED)
        return win.read()

    assert spawn_world(1, 1, prog, validate=True) == [b"abcd"]
