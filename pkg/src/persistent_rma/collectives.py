"""Alltoallv: two-sided baseline and persistent one-sided variants.

Each persistent variant splits the collective into ``init`` (window setup and
metadata exchange, done once), ``start``/``wait`` (one epoch of puts, repeated)
and ``free``.  Windows are cached per communicator in a :class:`WindowCache`
and reused while the receive buffer and its byte size stay the same.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable

import numpy as np

from .runtime import (
    FenceAssert,
    LockMode,
    ProtocolViolation,
    PutDescriptor,
    RankContext,
    RMAError,
    Window,
    as_bytes,
)


class LifecycleError(ProtocolViolation):
    """Illegal transition of a persistent request."""


class ReceiveOverflowError(RMAError):
    pass


class CountMismatchError(RMAError):
    pass


class Variant(enum.Enum):
    FENCE = "fence"
    LOCK = "lock"
    FENCE_HIERARCHY = "fence-hier"


class RequestState(enum.Enum):
    INITIALIZED = "Initialized"
    STARTED = "Started"
    COMPLETED = "Completed"
    FREED = "Freed"


def _int_array(values: Any, name: str) -> np.ndarray:
    arr = np.array(values, dtype=np.int64).reshape(-1)
    if (arr < 0).any():
        raise ValueError(f"{name} must be non-negative, got {arr.tolist()}")
    return arr


def _check_regions(counts: np.ndarray, displs: np.ndarray, limit: int, side: str) -> None:
    ends = counts + displs
    for p in np.nonzero(ends > limit)[0]:
        raise ValueError(
            f"{side} region for peer {p} ends at element {ends[p]} beyond buffer of {limit} elements"
        )
    live = np.nonzero(counts > 0)[0]
    order = live[np.argsort(displs[live], kind="stable")]
    for a, b in zip(order, order[1:]):
        if displs[b] < ends[a]:
            raise ValueError(f"{side} regions for peers {a} and {b} overlap")


@dataclass(eq=False)
class ExchangeSpec:
    """Full argument set of one rank's Alltoallv call.

    Counts and displacements are in elements of ``elem_size`` bytes.  The
    buffers may be any C-contiguous numpy arrays; their byte length decides
    how many elements they hold.
    """

    sendcounts: np.ndarray
    sdispls: np.ndarray
    recvcounts: np.ndarray
    rdispls: np.ndarray
    elem_size: int
    sendbuf: np.ndarray
    recvbuf: np.ndarray

    def __post_init__(self) -> None:
        self.sendcounts = _int_array(self.sendcounts, "sendcounts")
        self.sdispls = _int_array(self.sdispls, "sdispls")
        self.recvcounts = _int_array(self.recvcounts, "recvcounts")
        self.rdispls = _int_array(self.rdispls, "rdispls")
        n = self.sendcounts.size
        if not all(a.size == n for a in (self.sdispls, self.recvcounts, self.rdispls)):
            raise ValueError("sendcounts, sdispls, recvcounts and rdispls must have equal length")
        if self.elem_size < 1:
            raise ValueError(f"elem_size must be positive, got {self.elem_size}")
        _check_regions(self.sendcounts, self.sdispls, self.send_bytes.size // self.elem_size, "send")
        _check_regions(self.recvcounts, self.rdispls, self.recv_bytes.size // self.elem_size, "receive")

    @property
    def size(self) -> int:
        return int(self.sendcounts.size)

    @property
    def send_bytes(self) -> np.ndarray:
        return as_bytes(self.sendbuf)

    @property
    def recv_bytes(self) -> np.ndarray:
        return as_bytes(self.recvbuf)

    @property
    def total_recv_bytes(self) -> int:
        return int(self.recvcounts.sum()) * self.elem_size

    def copy(self) -> ExchangeSpec:
        return ExchangeSpec(
            self.sendcounts.copy(),
            self.sdispls.copy(),
            self.recvcounts.copy(),
            self.rdispls.copy(),
            self.elem_size,
            self.sendbuf.copy(),
            self.recvbuf.copy(),
        )


# -- baseline ---------------------------------------------------------------


def alltoallv_baseline(ctx: RankContext, spec: ExchangeSpec) -> None:
    """Two-sided pairwise-exchange Alltoallv; the reference for every RMA variant."""
    size, rank, e = ctx.world_size, ctx.rank, spec.elem_size
    if spec.size != size:
        raise ValueError(f"spec has {spec.size} peers, world has {size}")
    send = spec.send_bytes
    recv = spec.recv_bytes
    for step in range(size):
        dst = (rank + step) % size
        src = (rank - step) % size
        lo = int(spec.sdispls[dst]) * e
        n = int(spec.sendcounts[dst]) * e
        ctx.send(dst, (int(spec.sendcounts[dst]), e, send[lo : lo + n].tobytes()))
        count, peer_elem, data = ctx.recv(src)
        if count != spec.recvcounts[src] or peer_elem != e:
            raise CountMismatchError(
                f"sender {src} -> receiver {rank}: sent {count} elements of {peer_elem} bytes, "
                f"receiver expects {int(spec.recvcounts[src])} of {e} bytes"
            )
        if data:
            off = int(spec.rdispls[src]) * e
            recv[off : off + len(data)] = np.frombuffer(data, dtype=np.uint8)


# -- window cache -----------------------------------------------------------


class WindowCache:
    """Per-communicator window slot reused across persistent inits.

    A hit needs the same receive buffer object and the same total receive
    size on every rank; otherwise the old window is freed and a new one is
    created (collectively), bumping the window generation.
    """

    def __init__(self, slot: str = "alltoallv"):
        self.slot = slot
        self.window: Window | None = None
        self.total_recv_bytes: int | None = None
        self.recvbuf: Any = None
        self.owner: PersistentRequest | None = None
        self.hits = 0
        self.misses = 0

    def __repr__(self) -> str:
        gen = self.window.generation if self.window is not None else None
        return f"WindowCache(slot={self.slot!r}, generation={gen}, hits={self.hits}, misses={self.misses})"

    @classmethod
    def for_context(cls, ctx: RankContext, slot: str = "alltoallv") -> WindowCache:
        cache = ctx.caches.get(slot)
        if cache is None:
            cache = ctx.caches[slot] = cls(slot)
        return cache

    def _retire_owner(self) -> None:
        owner = self.owner
        if owner is None:
            return
        if owner.state is RequestState.STARTED:
            raise LifecycleError("cannot re-initialize while a request on this window is started")
        owner.state = RequestState.FREED
        owner.superseded = True
        self.owner = None

    def acquire(self, ctx: RankContext, recvbuf: Any, total_recv_bytes: int) -> tuple[Window, bool]:
        """Collectively return a window over ``recvbuf[:total_recv_bytes]`` and whether it was reused."""
        if self.owner is not None and self.owner.state is RequestState.STARTED:
            raise LifecycleError("cannot re-initialize while a request on this window is started")
        win = self.window
        local_hit = (
            win is not None
            and not win.freed
            and self.total_recv_bytes == total_recv_bytes
            and self.recvbuf is recvbuf
        )
        if all(ctx.allgather(local_hit)):
            self.hits += 1
            self._retire_owner()
            return win, True
        self.misses += 1
        self.release()
        region = as_bytes(recvbuf)[:total_recv_bytes]
        self.window = ctx.win_create(region, total_recv_bytes, slot=self.slot)
        self.total_recv_bytes = total_recv_bytes
        self.recvbuf = recvbuf
        return self.window, False

    def release(self) -> None:
        """Free the cached window (collective if one is cached)."""
        self._retire_owner()
        win = self.window
        if win is not None and not win.freed:
            if win.ctx.rank in win.held_locks:
                win.unlock(win.ctx.rank)
            win.free()
        self.window = None
        self.total_recv_bytes = None
        self.recvbuf = None


# -- persistent requests ----------------------------------------------------

_LEGAL = {
    "start": (RequestState.INITIALIZED, RequestState.COMPLETED),
    "wait": (RequestState.STARTED,),
    "free": (RequestState.INITIALIZED, RequestState.COMPLETED),
}


@dataclass(eq=False)
class PersistentRequest:
    """Metadata cached by ``init`` and reused by every ``start``/``wait``."""

    variant: Variant
    ctx: RankContext
    spec: ExchangeSpec
    window: Window
    cache: WindowCache
    put_displs: np.ndarray
    send_bytes: np.ndarray
    sdispl_bytes: np.ndarray
    total_recv_bytes: int
    cache_hit: bool
    remote_targets: list[int] = field(default_factory=list)
    local_targets: list[int] = field(default_factory=list)
    state: RequestState = RequestState.INITIALIZED
    superseded: bool = False

    def __repr__(self) -> str:
        return (
            f"PersistentRequest(variant={self.variant.value}, rank={self.ctx.rank}, "
            f"state={self.state.value}, generation={self.window.generation})"
        )

    def _require(self, op: str, *variants: Variant) -> None:
        if variants and self.variant not in variants:
            raise LifecycleError(f"{op} is not defined for the {self.variant.value} variant")
        if self.state not in _LEGAL[op]:
            detail = " (superseded by a newer init)" if self.superseded else ""
            raise LifecycleError(f"cannot {op} a request in state {self.state.value}{detail}")

    def _issue(self, targets: Iterable[int]) -> None:
        win = self.window
        send = self.spec.send_bytes
        rank = self.ctx.rank
        for p in targets:
            n = int(self.send_bytes[p])
            if n > 0:
                win.put(PutDescriptor(rank, p, int(self.sdispl_bytes[p]), int(self.put_displs[p]), n), send)

    def start(self) -> None:
        _STARTS[self.variant](self)

    def wait(self) -> None:
        _WAITS[self.variant](self)

    def free(self) -> None:
        free_request(self)

    def recv(self) -> np.ndarray:
        """The receive buffer, after a race check in validating mode."""
        if self.ctx.validate and not self.window.freed:
            self.window.check_local_access()
        return self.spec.recvbuf


def _init(ctx: RankContext, spec: ExchangeSpec, cache: WindowCache | None, variant: Variant) -> PersistentRequest:
    size, rank, e = ctx.world_size, ctx.rank, spec.elem_size
    if spec.size != size:
        raise ValueError(f"spec has {spec.size} peers, world has {size}")
    cache = cache if cache is not None else WindowCache.for_context(ctx)

    total = spec.total_recv_bytes
    layout_end = int(((spec.rdispls + spec.recvcounts) * e)[spec.recvcounts > 0].max(initial=0))
    if layout_end > total:
        raise ValueError(
            f"rank {rank}: receive layout ends at byte {layout_end}, past total_recv_bytes={total}"
        )
    win, hit = cache.acquire(ctx, spec.recvbuf, total)

    self_locked = rank in win.held_locks
    if variant is Variant.LOCK and not self_locked:
        # keep the window closed to remote epochs until start
        win.lock(rank, LockMode.EXCLUSIVE)
    elif variant is not Variant.LOCK and self_locked:
        win.unlock(rank)

    peer_elem = ctx.alltoall_exchange([e] * size)
    bad = [p for p, pe in enumerate(peer_elem) if pe != e]
    if bad:
        raise ValueError(f"rank {rank}: element size {e} differs from peers {bad}")
    put_displs = np.array(ctx.alltoall_exchange(spec.rdispls.tolist()), dtype=np.int64) * e
    send_bytes = spec.sendcounts * e
    sdispl_bytes = spec.sdispls * e

    incoming = ctx.alltoall_exchange(spec.sendcounts.tolist())
    for p, n in enumerate(incoming):
        if n > spec.recvcounts[p]:
            raise ReceiveOverflowError(
                f"receive overflow: rank {p} sends {n} elements to rank {rank}, "
                f"recvcounts[{p}]={int(spec.recvcounts[p])}"
            )

    remote: list[int] = []
    local: list[int] = []
    if variant is Variant.FENCE_HIERARCHY:
        local = ctx.node_ranks()
        remote = [p for p in range(size) if p not in set(local)]

    req = PersistentRequest(
        variant=variant,
        ctx=ctx,
        spec=spec,
        window=win,
        cache=cache,
        put_displs=put_displs,
        send_bytes=send_bytes,
        sdispl_bytes=sdispl_bytes,
        total_recv_bytes=total,
        cache_hit=hit,
        remote_targets=remote,
        local_targets=local,
    )
    cache.owner = req
    return req


def alltoallv_fence_init(ctx: RankContext, spec: ExchangeSpec, cache: WindowCache | None = None) -> PersistentRequest:
    return _init(ctx, spec, cache, Variant.FENCE)


def alltoallv_lock_init(ctx: RankContext, spec: ExchangeSpec, cache: WindowCache | None = None) -> PersistentRequest:
    """Like the fence init, but leaves the window exclusively self-locked until ``start``."""
    return _init(ctx, spec, cache, Variant.LOCK)


def alltoallv_fence_hierarchy_init(
    ctx: RankContext, spec: ExchangeSpec, cache: WindowCache | None = None
) -> PersistentRequest:
    """Fence init plus the on-node/off-node split of the target list."""
    return _init(ctx, spec, cache, Variant.FENCE_HIERARCHY)


def fence_start(req: PersistentRequest) -> None:
    req._require("start", Variant.FENCE)
    req.window.fence(FenceAssert.NO_STORE | FenceAssert.NO_PRECEDE)
    req._issue(range(req.ctx.world_size))
    req.state = RequestState.STARTED


def fence_hierarchy_start(req: PersistentRequest) -> None:
    req._require("start", Variant.FENCE_HIERARCHY)
    req.window.fence(FenceAssert.NO_PRECEDE)
    req._issue(req.remote_targets)
    req._issue(req.local_targets)
    req.state = RequestState.STARTED


def fence_wait(req: PersistentRequest) -> None:
    req._require("wait", Variant.FENCE, Variant.FENCE_HIERARCHY)
    req.window.fence(FenceAssert.NO_PUT | FenceAssert.NO_SUCCEED)
    req.state = RequestState.COMPLETED


def lock_start(req: PersistentRequest) -> None:
    req._require("start", Variant.LOCK)
    win = req.window
    win.unlock(req.ctx.rank)
    win.lock_all()
    req._issue(range(req.ctx.world_size))
    req.state = RequestState.STARTED


def lock_wait(req: PersistentRequest, *, barrier: bool = True) -> None:
    """Close the lock_all epoch, wait for every rank to do the same, re-lock self.

    ``barrier=False`` skips the barrier; it exists only to demonstrate the
    race the barrier prevents.
    """
    req._require("wait", Variant.LOCK)
    win = req.window
    win.unlock_all()
    if barrier:
        req.ctx.barrier()
    win.lock(req.ctx.rank, LockMode.EXCLUSIVE)
    req.state = RequestState.COMPLETED


def free_request(req: PersistentRequest) -> None:
    """Release the self-lock (lock variant), free the window and clear the cache slot."""
    if req.state is RequestState.FREED:
        raise LifecycleError("request already freed" + (" (superseded by a newer init)" if req.superseded else ""))
    req._require("free")
    cache = req.cache
    if cache.window is req.window:
        cache.owner = None
        cache.release()
    else:
        win = req.window
        if req.ctx.rank in win.held_locks:
            win.unlock(req.ctx.rank)
        if not win.freed:
            win.free()
    req.state = RequestState.FREED


lock_free = free_request

_STARTS: dict[Variant, Callable[[PersistentRequest], None]] = {
    Variant.FENCE: fence_start,
    Variant.LOCK: lock_start,
    Variant.FENCE_HIERARCHY: fence_hierarchy_start,
}
_WAITS: dict[Variant, Callable[[PersistentRequest], None]] = {
    Variant.FENCE: fence_wait,
    Variant.LOCK: lock_wait,
    Variant.FENCE_HIERARCHY: fence_wait,
}

INITS: dict[str, Callable[..., PersistentRequest]] = {
    Variant.FENCE.value: alltoallv_fence_init,
    Variant.LOCK.value: alltoallv_lock_init,
    Variant.FENCE_HIERARCHY.value: alltoallv_fence_hierarchy_init,
}
