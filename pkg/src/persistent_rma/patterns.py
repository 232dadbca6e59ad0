"""Communication patterns, the rank-ID fill rule and receive validation."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Union

import numpy as np

from .collectives import ExchangeSpec
from .matrix_market import SparseMatrix
from .runtime import as_bytes


@dataclass(frozen=True)
class Uniform:
    msg_size: int


@dataclass(frozen=True)
class MatrixSource:
    name: str
    partition: str = "block"


Provenance = Union[Uniform, MatrixSource]


def _buffer(n_elems: int, elem_size: int) -> np.ndarray:
    if elem_size in (1, 2, 4, 8):
        return np.zeros(n_elems, dtype=np.dtype(f"<u{elem_size}"))
    return np.zeros(n_elems * elem_size, dtype=np.uint8)


def exclusive_prefix(counts: np.ndarray) -> np.ndarray:
    out = np.zeros_like(counts)
    np.cumsum(counts[:-1], out=out[1:])
    return out


@dataclass(frozen=True, eq=False)
class Pattern:
    """``counts_bytes[r, p]`` is the number of bytes rank ``r`` sends to rank ``p``."""

    counts_bytes: np.ndarray
    elem_size: int
    provenance: Provenance

    def __post_init__(self) -> None:
        c = np.asarray(self.counts_bytes, dtype=np.int64)
        if c.ndim != 2 or c.shape[0] != c.shape[1]:
            raise ValueError(f"count matrix must be square, got shape {c.shape}")
        if (c < 0).any():
            raise ValueError("count matrix has negative entries")
        if self.elem_size < 1 or (c % self.elem_size).any():
            raise ValueError(f"counts must be multiples of elem_size={self.elem_size}")
        object.__setattr__(self, "counts_bytes", c)

    @property
    def ranks(self) -> int:
        return self.counts_bytes.shape[0]

    @property
    def name(self) -> str:
        p = self.provenance
        return "uniform" if isinstance(p, Uniform) else p.name

    @property
    def counts(self) -> np.ndarray:
        """Counts in elements."""
        return self.counts_bytes // self.elem_size

    def slice(self, rank: int) -> ExchangeSpec:
        """Rank ``rank``'s Alltoallv arguments, regions packed in rank order, with zeroed buffers."""
        counts = self.counts
        send = counts[rank].copy()
        recv = counts[:, rank].copy()
        return ExchangeSpec(
            send,
            exclusive_prefix(send),
            recv,
            exclusive_prefix(recv),
            self.elem_size,
            _buffer(int(send.sum()), self.elem_size),
            _buffer(int(recv.sum()), self.elem_size),
        )

    def specs(self) -> list[ExchangeSpec]:
        return [self.slice(r) for r in range(self.ranks)]


def uniform_pattern(ranks: int, msg_size_bytes: int, elem_size: int = 4) -> Pattern:
    if msg_size_bytes % elem_size:
        raise ValueError(f"message size {msg_size_bytes} is not a multiple of elem_size={elem_size}")
    counts = np.full((ranks, ranks), msg_size_bytes, dtype=np.int64)
    return Pattern(counts, elem_size, Uniform(msg_size_bytes))


def block_owner(n: int, ranks: int) -> np.ndarray:
    """Owner rank of each of ``n`` rows under contiguous blocks of ``ceil(n / ranks)``."""
    return np.arange(n, dtype=np.int64) // math.ceil(n / ranks)


def matrix_pattern(m: SparseMatrix, ranks: int, elem_size: int = 4) -> Pattern:
    """Count nonzeros per (row block, column block); rows and columns share one block map."""
    if m.n_rows != m.n_cols:
        raise ValueError(f"matrix {m.name} is {m.n_rows}x{m.n_cols}; patterns need a square matrix")
    if ranks > m.n_rows:
        raise ValueError(f"{ranks} ranks exceed the {m.n_rows} rows of {m.name}")
    owner = block_owner(m.n_rows, ranks)
    counts = np.zeros((ranks, ranks), dtype=np.int64)
    if m.nnz:
        np.add.at(counts, (owner[m.coords[:, 0]], owner[m.coords[:, 1]]), 1)
    return Pattern(counts * elem_size, elem_size, MatrixSource(m.name))


# -- fill and validation ------------------------------------------------------


def encode(sender: int, elem_size: int) -> bytes:
    """Byte image of one element carrying ``sender`` (little-endian, truncated)."""
    return (sender % (1 << (8 * elem_size))).to_bytes(elem_size, "little")


class Mismatch(NamedTuple):
    rank: int
    peer: int
    index: int
    expected: int
    got: int


def _regions(buf: np.ndarray, counts: np.ndarray, displs: np.ndarray, e: int):
    for p, (c, d) in enumerate(zip(counts.tolist(), displs.tolist())):
        if c:
            yield p, buf[d * e : (d + c) * e].reshape(c, e)


def fill_send(spec: ExchangeSpec, rank: int) -> None:
    """Set every element sent to any peer to ``encode(rank)``."""
    e = spec.elem_size
    word = np.frombuffer(encode(rank, e), dtype=np.uint8)
    for _, region in _regions(spec.send_bytes, spec.sendcounts, spec.sdispls, e):
        region[:] = word


def validate_recv(spec: ExchangeSpec, rank: int) -> list[Mismatch]:
    """Element-wise check that the region from each peer ``p`` holds ``encode(p)``."""
    e = spec.elem_size
    out: list[Mismatch] = []
    for p, region in _regions(spec.recv_bytes, spec.recvcounts, spec.rdispls, e):
        word = np.frombuffer(encode(p, e), dtype=np.uint8)
        for idx in np.nonzero(~np.all(region == word, axis=1))[0].tolist():
            got = int.from_bytes(region[idx].tobytes(), "little")
            out.append(Mismatch(rank, p, idx, int.from_bytes(word.tobytes(), "little"), got))
    return out


def compare_recv(spec: ExchangeSpec, reference: ExchangeSpec, rank: int) -> list[Mismatch]:
    """Element-wise differences between two receive buffers over the regions of ``spec``."""
    e = spec.elem_size
    out: list[Mismatch] = []
    ref = dict(_regions(reference.recv_bytes, reference.recvcounts, reference.rdispls, e))
    for p, region in _regions(spec.recv_bytes, spec.recvcounts, spec.rdispls, e):
        want = ref[p]
        for idx in np.nonzero(~np.all(region == want, axis=1))[0].tolist():
            out.append(
                Mismatch(
                    rank,
                    p,
                    idx,
                    int.from_bytes(want[idx].tobytes(), "little"),
                    int.from_bytes(region[idx].tobytes(), "little"),
                )
            )
    return out


# -- randomized specs ---------------------------------------------------------


def random_counts(ranks: int, rng: np.random.Generator, max_count: int = 6) -> np.ndarray:
    """Random element-count matrix with zero entries, empty ranks, self-heavy or imbalanced traffic."""
    counts = rng.integers(0, max_count + 1, size=(ranks, ranks))
    counts[rng.random((ranks, ranks)) < 0.3] = 0
    style = rng.integers(0, 4)
    if style == 1 and ranks > 1:
        quiet = rng.integers(0, ranks)
        counts[quiet, :] = 0
        counts[:, rng.integers(0, ranks)] = 0
    elif style == 2:
        counts[np.diag_indices(ranks)] += 4 * max_count
    elif style == 3:
        counts[:, rng.integers(0, ranks)] *= 5
    return counts.astype(np.int64)


def random_specs(
    ranks: int, rng: np.random.Generator, elem_size: int = 4, max_count: int = 6
) -> list[ExchangeSpec]:
    """Consistent per-rank specs for a random count matrix.

    Send regions are placed in a random peer order with random gaps; receive
    regions are packed (no gaps, so they fit the window) in a random peer
    order.  Send buffers hold random bytes and receive buffers a 0xEE fill.
    """
    counts = random_counts(ranks, rng, max_count)
    specs = []
    for r in range(ranks):
        send = counts[r]
        sdispls = np.zeros(ranks, dtype=np.int64)
        pos = 0
        for p in rng.permutation(ranks):
            pos += int(rng.integers(0, 3))
            sdispls[p] = pos
            pos += int(send[p])
        recv = counts[:, r]
        rdispls = np.zeros(ranks, dtype=np.int64)
        rpos = 0
        for p in rng.permutation(ranks):
            rdispls[p] = rpos
            rpos += int(recv[p])
        sendbuf = rng.integers(0, 256, size=(pos + int(rng.integers(0, 3))) * elem_size, dtype=np.uint8)
        recvbuf = np.full((rpos + int(rng.integers(0, 3))) * elem_size, 0xEE, dtype=np.uint8)
        specs.append(ExchangeSpec(send.copy(), sdispls, recv.copy(), rdispls, elem_size, sendbuf, recvbuf))
    return specs
