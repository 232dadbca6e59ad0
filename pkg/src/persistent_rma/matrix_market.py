"""Reader/writer for the Matrix Market coordinate format (structure only).

Accepted headers are ``%%MatrixMarket matrix coordinate F S`` with field
``F`` in {pattern, real, integer} and symmetry ``S`` in {general, symmetric}.
Values are checked for syntax and then dropped: only the sparsity structure
is kept.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

FIELDS = ("pattern", "real", "integer")
SYMMETRIES = ("general", "symmetric")


class MatrixMarketError(ValueError):
    def __init__(self, lineno: int, message: str):
        self.lineno = lineno
        super().__init__(f"line {lineno}: {message}")


@dataclass(frozen=True, eq=False)
class SparseMatrix:
    """Sparsity structure: zero-based ``(row, col)`` pairs, sorted and unique."""

    n_rows: int
    n_cols: int
    coords: np.ndarray
    name: str = "matrix"

    @property
    def nnz(self) -> int:
        return int(self.coords.shape[0])

    def coordinate_set(self) -> set[tuple[int, int]]:
        return {(int(i), int(j)) for i, j in self.coords}

    @classmethod
    def from_coords(cls, n_rows: int, n_cols: int, coords, name: str = "matrix") -> SparseMatrix:
        arr = np.asarray(coords, dtype=np.int64).reshape(-1, 2)
        if arr.size and (arr.min() < 0 or arr[:, 0].max() >= n_rows or arr[:, 1].max() >= n_cols):
            raise ValueError(f"coordinates outside a {n_rows}x{n_cols} matrix")
        arr = np.unique(arr, axis=0) if arr.size else arr
        return cls(n_rows, n_cols, arr, name)


def _ints(tokens: list[str], lineno: int, what: str) -> list[int]:
    try:
        return [int(t) for t in tokens]
    except ValueError:
        raise MatrixMarketError(lineno, f"expected integer {what}, got {' '.join(tokens)!r}") from None


def parse_matrix_market(text: str, name: str = "matrix") -> SparseMatrix:
    lines = text.splitlines()
    if not lines or not lines[0].startswith("%%MatrixMarket"):
        raise MatrixMarketError(1, "missing '%%MatrixMarket' header")
    header = lines[0].split()
    if len(header) != 5:
        raise MatrixMarketError(1, f"header needs 5 fields, got {len(header)}")
    obj, fmt, fld, sym = (h.lower() for h in header[1:])
    if obj != "matrix" or fmt != "coordinate":
        raise MatrixMarketError(1, f"only 'matrix coordinate' is supported, got '{obj} {fmt}'")
    if fld not in FIELDS:
        raise MatrixMarketError(1, f"unsupported field {fld!r}")
    if sym not in SYMMETRIES:
        raise MatrixMarketError(1, f"unsupported symmetry {sym!r}")
    ntok = 2 if fld == "pattern" else 3

    shape = None
    rows: list[int] = []
    cols: list[int] = []
    for lineno, raw in enumerate(lines[1:], start=2):
        line = raw.strip()
        if not line or line.startswith("%"):
            continue
        tokens = line.split()
        if shape is None:
            if len(tokens) != 3:
                raise MatrixMarketError(lineno, "size line needs 'rows cols entries'")
            shape = _ints(tokens, lineno, "sizes")
            if min(shape) < 0:
                raise MatrixMarketError(lineno, "negative size")
            if sym == "symmetric" and shape[0] != shape[1]:
                raise MatrixMarketError(lineno, "symmetric matrix must be square")
            continue
        if len(rows) == shape[2]:
            raise MatrixMarketError(lineno, f"more than the declared {shape[2]} entries")
        if len(tokens) != ntok:
            raise MatrixMarketError(lineno, f"{fld} entry needs {ntok} fields, got {len(tokens)}")
        i, j = _ints(tokens[:2], lineno, "indices")
        if ntok == 3:
            try:
                int(tokens[2]) if fld == "integer" else float(tokens[2])
            except ValueError:
                raise MatrixMarketError(lineno, f"bad {fld} value {tokens[2]!r}") from None
        if not (1 <= i <= shape[0] and 1 <= j <= shape[1]):
            raise MatrixMarketError(lineno, f"index ({i}, {j}) outside {shape[0]}x{shape[1]}")
        if sym == "symmetric" and i < j:
            raise MatrixMarketError(lineno, f"symmetric entry ({i}, {j}) above the diagonal")
        rows.append(i - 1)
        cols.append(j - 1)

    if shape is None:
        raise MatrixMarketError(len(lines) + 1, "missing size line")
    if len(rows) != shape[2]:
        raise MatrixMarketError(len(lines) + 1, f"expected {shape[2]} entries, found {len(rows)}")

    r = np.array(rows, dtype=np.int64)
    c = np.array(cols, dtype=np.int64)
    if sym == "symmetric":
        off = r != c
        r, c = np.concatenate([r, c[off]]), np.concatenate([c, r[off]])
    return SparseMatrix.from_coords(shape[0], shape[1], np.stack([r, c], axis=1), name)


def read_matrix_market(path: str | Path) -> SparseMatrix:
    path = Path(path)
    return parse_matrix_market(path.read_text(), name=path.stem)


def serialize_matrix_market(m: SparseMatrix) -> str:
    """General pattern file with one line per stored coordinate."""
    out = ["%%MatrixMarket matrix coordinate pattern general", f"{m.n_rows} {m.n_cols} {m.nnz}"]
    out.extend(f"{i + 1} {j + 1}" for i, j in m.coords.tolist())
    return "\n".join(out) + "\n"
