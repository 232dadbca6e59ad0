"""Simulated multi-rank runtime with one-sided (RMA) windows.

One Python thread plays each rank.  The runtime object (:class:`World`) is
shared; every call a rank makes goes through its :class:`RankContext`.

Puts are buffered per epoch and applied to the target bytes when the epoch
closes (``fence``, ``unlock``, ``unlock_all``), which mirrors MPI RMA
completion rules.  Setting ``eager=True`` applies puts at issue time instead.

Validating mode (``validate=True`` or ``RMA_VALIDATE=1``) additionally

* rejects puts issued after a fence asserting ``NO_PUT``,
* raises :class:`RaceDetected` when a rank reads its own window while a put
  to it is still pending or another rank holds a lock on it,
* warns about overlapping puts within one epoch, and
* keeps a put log per rank and a global event trace.
"""
from __future__ import annotations

import enum
import itertools
import logging
import os
import queue
import threading
import time
import warnings
from dataclasses import dataclass
from typing import Any, Callable, Sequence

import numpy as np

log = logging.getLogger(__name__)

DEFAULT_TIMEOUT = 30.0
_POLL = 0.05


class RMAError(Exception):
    """Base class for runtime errors."""


class ProtocolViolation(RMAError):
    """An RMA synchronization rule was broken."""


class RaceDetected(ProtocolViolation):
    """A local read raced an open access epoch (validating mode)."""


class WindowFreedError(ProtocolViolation):
    pass


class StaleWindowError(ProtocolViolation):
    pass


class RMABoundsError(RMAError):
    pass


class DeadlockError(RMAError):
    """A rank waited longer than the world timeout."""


class WorldAborted(RMAError):
    """Raised in surviving ranks after another rank failed."""


class WorldError(RMAError):
    """Raised by :func:`spawn_world` when a rank fails."""

    def __init__(self, rank: int, cause: BaseException):
        self.rank = rank
        self.cause = cause
        super().__init__(f"rank {rank} failed: {type(cause).__name__}: {cause}")


class OverlapWarning(UserWarning):
    """Two puts in one epoch wrote overlapping target bytes."""


class FenceAssert(enum.Flag):
    NONE = 0
    NO_STORE = enum.auto()
    NO_PRECEDE = enum.auto()
    NO_PUT = enum.auto()
    NO_SUCCEED = enum.auto()


class EpochState(enum.Enum):
    IDLE = "Idle"
    FENCE_OPEN = "FenceOpen"
    LOCK_ALL_OPEN = "LockAllOpen"
    SELF_LOCKED_EXCLUSIVE = "SelfLockedExclusive"


class LockMode(enum.Enum):
    EXCLUSIVE = "exclusive"
    SHARED = "shared"


@dataclass(frozen=True)
class PutDescriptor:
    origin_rank: int
    target_rank: int
    origin_offset_bytes: int
    target_offset_bytes: int
    length_bytes: int


@dataclass(frozen=True)
class PutRecord:
    """One entry of a rank's put log (validating mode only)."""

    issue_index: int
    epoch: int
    seq: int
    origin: int
    target: int
    target_offset: int
    length: int


def _env_validate() -> bool:
    return os.environ.get("RMA_VALIDATE", "").strip().lower() in {"1", "true", "yes", "on"}


def as_bytes(buf: Any) -> np.ndarray:
    """Flat writable ``uint8`` view of a contiguous buffer."""
    if isinstance(buf, (bytes, bytearray, memoryview)):
        arr = np.frombuffer(buf, dtype=np.uint8)
    else:
        arr = np.asarray(buf)
    if not arr.flags.c_contiguous:
        raise ValueError("buffer must be C-contiguous")
    return arr.reshape(-1).view(np.uint8)


class World:
    """Shared state for one simulated job of ``size`` ranks."""

    def __init__(
        self,
        size: int,
        ppn: int = 1,
        *,
        validate: bool | None = None,
        timeout: float = DEFAULT_TIMEOUT,
        eager: bool = False,
        lazy_locks: bool = False,
    ):
        if size < 1:
            raise ValueError(f"world size must be >= 1, got {size}")
        if ppn < 1:
            raise ValueError(f"ppn must be >= 1, got {ppn}")
        self.size = size
        self.ppn = ppn
        self.validate = _env_validate() if validate is None else bool(validate)
        self.timeout = timeout
        self.eager = eager
        self.lazy_locks = lazy_locks
        self._barrier = threading.Barrier(size)
        self._slots: list[Any] = [None] * size
        self._mail = {(s, d): queue.Queue() for s in range(size) for d in range(size)}
        self._seq = itertools.count()
        self._seq_lock = threading.Lock()
        self._aborted = threading.Event()
        self.trace: list[tuple[int, str, int, int]] = []
        self.violations: list[str] = []

    @property
    def aborted(self) -> bool:
        return self._aborted.is_set()

    def abort(self) -> None:
        self._aborted.set()
        self._barrier.abort()

    def next_seq(self) -> int:
        with self._seq_lock:
            return next(self._seq)

    def record(self, kind: str, origin: int, target: int) -> None:
        if self.validate:
            with self._seq_lock:
                self.trace.append((next(self._seq), kind, origin, target))

    def flag(self, exc: ProtocolViolation) -> ProtocolViolation:
        self.violations.append(str(exc))
        return exc

    def rendezvous(self) -> None:
        try:
            self._barrier.wait(self.timeout)
        except threading.BrokenBarrierError:
            if self.aborted:
                raise WorldAborted("world aborted by another rank") from None
            self.abort()
            raise DeadlockError(f"barrier timed out after {self.timeout} s") from None

    def wait_for(self, cond: threading.Condition, predicate: Callable[[], bool], what: str) -> None:
        """Wait on ``cond`` (held by caller) until ``predicate`` holds."""
        deadline = time.monotonic() + self.timeout
        while not predicate():
            if self.aborted:
                raise WorldAborted("world aborted by another rank")
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                self.abort()
                raise DeadlockError(f"timed out after {self.timeout} s waiting for {what}")
            cond.wait(min(_POLL, remaining))


class RankContext:
    """Per-rank handle on the runtime; only used from that rank's thread."""

    def __init__(self, world: World, rank: int):
        self.world = world
        self.rank = rank
        self.world_size = world.size
        self.node_id = rank // world.ppn
        self.puts_issued = 0
        self.put_log: list[PutRecord] = []
        # slot name -> generation of the newest window created in that slot
        self.generations: dict[str, int] = {}
        # per-communicator caches owned by higher layers (see collectives.WindowCache)
        self.caches: dict[str, Any] = {}

    def __repr__(self) -> str:
        return f"RankContext(rank={self.rank}, world_size={self.world_size}, node_id={self.node_id})"

    @property
    def validate(self) -> bool:
        return self.world.validate

    # -- collectives -------------------------------------------------------

    def barrier(self) -> None:
        self.world.rendezvous()

    def allgather(self, value: Any) -> list[Any]:
        w = self.world
        w._slots[self.rank] = value
        w.rendezvous()
        out = list(w._slots)
        w.rendezvous()
        return out

    def alltoall_exchange(self, send: Sequence[Any]) -> list[Any]:
        """``result[p]`` is ``send[self.rank]`` as provided by rank ``p``."""
        send = list(send)
        if len(send) != self.world_size:
            raise ValueError(f"alltoall_exchange needs {self.world_size} entries, got {len(send)}")
        rows = self.allgather(send)
        return [rows[p][self.rank] for p in range(self.world_size)]

    def node_ranks(self) -> list[int]:
        """Ranks sharing this rank's node, found by gathering node ids."""
        nodes = self.allgather(self.node_id)
        return [p for p, n in enumerate(nodes) if n == self.node_id]

    # -- two-sided messaging ----------------------------------------------

    def send(self, dest: int, payload: Any) -> None:
        self.world._mail[(self.rank, dest)].put(payload)

    def recv(self, src: int) -> Any:
        w = self.world
        box = w._mail[(src, self.rank)]
        deadline = time.monotonic() + w.timeout
        while True:
            if w.aborted:
                raise WorldAborted("world aborted by another rank")
            try:
                return box.get(timeout=_POLL)
            except queue.Empty:
                if time.monotonic() > deadline:
                    w.abort()
                    raise DeadlockError(f"rank {self.rank} timed out receiving from {src}") from None

    # -- windows -----------------------------------------------------------

    def win_create(self, region: Any, size_bytes: int | None = None, *, slot: str = "default") -> Window:
        """Collectively expose ``region`` as this rank's part of a new window."""
        region = as_bytes(region)
        if size_bytes is None:
            size_bytes = region.size
        if size_bytes != region.size:
            raise ValueError(f"rank {self.rank}: size_bytes={size_bytes} but region holds {region.size} bytes")
        candidate = _WindowGroup(self.world_size) if self.rank == 0 else None
        group = self.allgather(candidate)[0]
        group.regions[self.rank] = region
        group.sizes[self.rank] = size_bytes
        self.world.rendezvous()
        gen = self.generations.get(slot, 0) + 1
        self.generations[slot] = gen
        return Window(self, group, slot, gen)


class _WindowGroup:
    """State of one window shared by all ranks."""

    def __init__(self, size: int):
        self.regions: list[np.ndarray | None] = [None] * size
        self.sizes = [0] * size
        self.cond = threading.Condition()
        self.excl: list[int | None] = [None] * size
        self.shared: list[set[int]] = [set() for _ in range(size)]
        # pending fence puts per target: (seq, origin, offset, data)
        self.fence_pending: list[list[tuple[int, int, int, bytes]]] = [[] for _ in range(size)]
        # pending passive-target puts per origin: (seq, target, offset, data)
        self.passive_pending: list[list[tuple[int, int, int, bytes]]] = [[] for _ in range(size)]


class Window:
    """A rank's handle on an RMA window."""

    def __init__(self, ctx: RankContext, group: _WindowGroup, slot: str, generation: int):
        self.ctx = ctx
        self._group = group
        self.slot = slot
        self.generation = generation
        self.size_bytes = group.sizes[ctx.rank]
        self.freed = False
        self.last_asserts = FenceAssert.NONE
        self._fence_open = False
        self._no_put = False
        self._lock_all = False
        self._locks: dict[int, LockMode] = {}
        self._epoch = 0

    def __repr__(self) -> str:
        return (
            f"Window(rank={self.ctx.rank}, slot={self.slot!r}, generation={self.generation}, "
            f"size_bytes={self.size_bytes}, state={self.epoch_state.value})"
        )

    @property
    def base(self) -> np.ndarray:
        return self._group.regions[self.ctx.rank]

    @property
    def epoch_state(self) -> EpochState:
        if self._lock_all:
            return EpochState.LOCK_ALL_OPEN
        if self._locks.get(self.ctx.rank) is LockMode.EXCLUSIVE:
            return EpochState.SELF_LOCKED_EXCLUSIVE
        if self._fence_open:
            return EpochState.FENCE_OPEN
        return EpochState.IDLE

    @property
    def held_locks(self) -> dict[int, LockMode]:
        return dict(self._locks)

    def _violation(self, msg: str, cls: type[ProtocolViolation] = ProtocolViolation) -> ProtocolViolation:
        return self.ctx.world.flag(cls(f"rank {self.ctx.rank}: {msg}"))

    def _check_live(self) -> None:
        if self.freed:
            raise self._violation("window freed", WindowFreedError)
        current = self.ctx.generations.get(self.slot)
        if current != self.generation:
            raise self._violation(
                f"stale window handle (generation {self.generation}, current {current})", StaleWindowError
            )

    def _check_rank(self, target: int) -> None:
        if not 0 <= target < self.ctx.world_size:
            raise ValueError(f"target rank {target} outside [0, {self.ctx.world_size})")

    # -- delivery ----------------------------------------------------------

    def _apply(self, target: int, items: list[tuple[int, int, int, bytes]]) -> None:
        """Write ``(seq, origin, offset, data)`` items into ``target``'s region; caller holds cond."""
        world = self.ctx.world
        items = sorted(items)
        if world.validate and len(items) > 1:
            spans = sorted((off, off + len(data), origin) for _, origin, off, data in items if data)
            for (s0, e0, o0), (s1, _, o1) in zip(spans, spans[1:]):
                if s1 < e0:
                    warnings.warn(
                        f"overlapping puts to rank {target} from ranks {o0} and {o1} at byte {s1}",
                        OverlapWarning,
                        stacklevel=3,
                    )
        region = self._group.regions[target]
        for _, origin, off, data in items:
            region[off : off + len(data)] = np.frombuffer(data, dtype=np.uint8)
            world.record("deliver", origin, target)

    def _deliver_fence(self) -> None:
        g = self._group
        me = self.ctx.rank
        with g.cond:
            batch, g.fence_pending[me] = g.fence_pending[me], []
            if batch:
                self._apply(me, batch)

    def _deliver_passive(self, target: int | None = None) -> None:
        """Apply this origin's pending passive puts (to ``target`` only, if given); caller holds cond."""
        g = self._group
        me = self.ctx.rank
        keep, by_target = [], {}
        for seq, t, off, data in g.passive_pending[me]:
            if target is None or t == target:
                by_target.setdefault(t, []).append((seq, me, off, data))
            else:
                keep.append((seq, t, off, data))
        g.passive_pending[me] = keep
        for t, items in by_target.items():
            self._apply(t, items)
        g.cond.notify_all()

    # -- fence synchronization --------------------------------------------

    def fence(self, asserts: FenceAssert = FenceAssert.NONE) -> None:
        """Collective fence: complete the current epoch and (unless NO_SUCCEED) open a new one."""
        self._check_live()
        if self._lock_all or self._locks:
            raise self._violation("fence called while a lock epoch is open")
        world = self.ctx.world
        world.rendezvous()
        self._deliver_fence()
        world.rendezvous()
        self.last_asserts = asserts
        self._fence_open = not (asserts & FenceAssert.NO_SUCCEED)
        self._no_put = bool(asserts & FenceAssert.NO_PUT)
        self._epoch += 1

    # -- passive target ----------------------------------------------------

    def _acquire(self, target: int, mode: LockMode) -> None:
        g = self._group
        me = self.ctx.rank
        world = self.ctx.world
        with g.cond:
            if mode is LockMode.EXCLUSIVE:
                world.wait_for(
                    g.cond, lambda: g.excl[target] is None and not g.shared[target], f"exclusive lock on {target}"
                )
                g.excl[target] = me
            else:
                world.wait_for(g.cond, lambda: g.excl[target] is None, f"shared lock on {target}")
                g.shared[target].add(me)
            world.record("lock", me, target)

    def _release(self, target: int, mode: LockMode) -> None:
        g = self._group
        me = self.ctx.rank
        if mode is LockMode.EXCLUSIVE:
            g.excl[target] = None
        else:
            g.shared[target].discard(me)
        self.ctx.world.record("unlock", me, target)
        g.cond.notify_all()

    def lock(self, target: int, mode: LockMode = LockMode.EXCLUSIVE) -> None:
        self._check_live()
        self._check_rank(target)
        if self._fence_open:
            raise self._violation("lock called inside an open fence epoch")
        if target in self._locks or self._lock_all:
            raise self._violation(f"rank already holds a lock covering target {target}")
        self._acquire(target, mode)
        self._locks[target] = mode
        self._epoch += 1

    def unlock(self, target: int) -> None:
        """Complete puts issued under the lock on ``target`` and release it."""
        self._check_live()
        self._check_rank(target)
        mode = self._locks.pop(target, None)
        if mode is None:
            raise self._violation(f"unlock of target {target} without a matching lock")
        with self._group.cond:
            self._deliver_passive(target)
            self._release(target, mode)

    def lock_all(self) -> None:
        self._check_live()
        if self._fence_open:
            raise self._violation("lock_all called inside an open fence epoch")
        if self._lock_all:
            raise self._violation("nested lock_all")
        if self._locks:
            raise self._violation(f"lock_all while holding locks on {sorted(self._locks)}")
        if not self.ctx.world.lazy_locks:
            for t in range(self.ctx.world_size):
                self._acquire(t, LockMode.SHARED)
        self._lock_all = True
        self._epoch += 1

    def unlock_all(self) -> None:
        self._check_live()
        if not self._lock_all:
            raise self._violation("unlock_all without lock_all")
        g = self._group
        me = self.ctx.rank
        if self.ctx.world.lazy_locks:
            targets = sorted({t for _, t, _, _ in g.passive_pending[me]})
            for t in targets:
                self._acquire(t, LockMode.SHARED)
                with g.cond:
                    self._deliver_passive(t)
                    self._release(t, LockMode.SHARED)
        else:
            with g.cond:
                self._deliver_passive()
                for t in range(self.ctx.world_size):
                    self._release(t, LockMode.SHARED)
        self._lock_all = False

    # -- data movement -----------------------------------------------------

    def put(self, desc: PutDescriptor, origin: Any) -> None:
        """Issue a put of ``origin[origin_offset:origin_offset+length]`` to the target window.

        The payload is copied at issue time and becomes visible at the target
        when the enclosing epoch closes.
        """
        self._check_live()
        ctx = self.ctx
        world = ctx.world
        if desc.origin_rank != ctx.rank:
            raise ValueError(f"put issued by rank {ctx.rank} with origin_rank={desc.origin_rank}")
        t = desc.target_rank
        self._check_rank(t)
        if self._fence_open:
            passive = False
            if world.validate and self._no_put:
                raise self._violation(f"put to {t} after a fence asserting NO_PUT")
        elif self._lock_all or t in self._locks:
            passive = True
        else:
            raise self._violation(f"put to {t} outside any access epoch")
        n = desc.length_bytes
        if n < 0 or desc.origin_offset_bytes < 0 or desc.target_offset_bytes < 0:
            raise ValueError(f"negative offset or length in {desc}")
        if n == 0:
            return
        target_size = self._group.sizes[t]
        if desc.target_offset_bytes + n > target_size:
            raise RMABoundsError(
                f"put to rank {t} bytes [{desc.target_offset_bytes}, {desc.target_offset_bytes + n}) "
                f"exceeds window size {target_size}"
            )
        src = as_bytes(origin)
        if desc.origin_offset_bytes + n > src.size:
            raise RMABoundsError(
                f"origin range [{desc.origin_offset_bytes}, {desc.origin_offset_bytes + n}) "
                f"exceeds origin buffer of {src.size} bytes"
            )
        data = src[desc.origin_offset_bytes : desc.origin_offset_bytes + n].tobytes()
        seq = world.next_seq()
        if world.validate:
            ctx.put_log.append(
                PutRecord(ctx.puts_issued, self._epoch, seq, ctx.rank, t, desc.target_offset_bytes, n)
            )
        ctx.puts_issued += 1
        g = self._group
        off = desc.target_offset_bytes
        with g.cond:
            if world.eager:
                self._apply(t, [(seq, ctx.rank, off, data)])
            elif passive:
                g.passive_pending[ctx.rank].append((seq, t, off, data))
            else:
                g.fence_pending[t].append((seq, ctx.rank, off, data))

    def read(self, offset: int = 0, length: int | None = None) -> bytes:
        """Copy bytes out of this rank's own window, checking for races in validating mode."""
        self._check_live()
        if self.ctx.validate:
            self.check_local_access()
        end = self.size_bytes if length is None else offset + length
        if offset < 0 or end > self.size_bytes:
            raise RMABoundsError(f"read [{offset}, {end}) outside window of {self.size_bytes} bytes")
        return self.base[offset:end].tobytes()

    def check_local_access(self) -> None:
        """Raise :class:`RaceDetected` if the local window is exposed to an unfinished access epoch."""
        g = self._group
        me = self.ctx.rank
        with g.cond:
            holders = sorted(o for o in g.shared[me] | {g.excl[me]} if o is not None and o != me)
            pending = [o for _, o, _, _ in g.fence_pending[me]]
            for origin, items in enumerate(g.passive_pending):
                pending.extend(origin for _, t, _, _ in items if t == me)
        if holders:
            raise self._violation(f"local read while ranks {holders} hold locks on this window", RaceDetected)
        if pending:
            raise self._violation(
                f"local read while puts from ranks {sorted(set(pending))} are pending", RaceDetected
            )

    def free(self) -> None:
        """Collectively free the window; the handle is unusable afterwards."""
        self._check_live()
        if self._lock_all or self._locks:
            raise self._violation(f"free inside an open lock epoch ({self.epoch_state.value})")
        g = self._group
        me = self.ctx.rank
        with g.cond:
            mine = any(o == me for items in g.fence_pending for _, o, _, _ in items)
        if mine:
            raise self._violation("free with puts pending in an open fence epoch")
        self.ctx.world.rendezvous()
        self.freed = True
        self._fence_open = False


WindowHandle = Window


def spawn_world(
    size: int,
    ppn: int,
    program: Callable[..., Any],
    *args: Any,
    validate: bool | None = None,
    timeout: float = DEFAULT_TIMEOUT,
    eager: bool = False,
    lazy_locks: bool = False,
    world: World | None = None,
) -> list[Any]:
    """Run ``program(ctx, *args)`` on ``size`` ranks and return their results in rank order.

    If any rank raises, the world is aborted and a :class:`WorldError` naming
    the first failing rank is raised.
    """
    if world is None:
        world = World(size, ppn, validate=validate, timeout=timeout, eager=eager, lazy_locks=lazy_locks)
    results: list[Any] = [None] * size
    errors: list[tuple[int, BaseException]] = []
    err_lock = threading.Lock()

    def run(rank: int) -> None:
        ctx = RankContext(world, rank)
        try:
            results[rank] = program(ctx, *args)
        except BaseException as exc:  # noqa: BLE001 - surfaced through WorldError
            with err_lock:
                errors.append((rank, exc))
            world.abort()

    threads = [threading.Thread(target=run, args=(r,), name=f"rank-{r}", daemon=True) for r in range(size)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    if errors:
        primary = [e for e in errors if not isinstance(e[1], WorldAborted)] or errors
        rank, exc = primary[0]
        log.debug("world failed on rank %d: %r", rank, exc)
        raise WorldError(rank, exc) from exc
    return results
