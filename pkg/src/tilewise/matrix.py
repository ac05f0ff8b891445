"""Dense and sparse matrix types, binary file I/O, and the reference GEMM.

All numeric payloads are float32. The reference GEMM accumulates each output
element in fixed ascending-k order, which makes it bit-identical to a naive
triple loop and independent of blocking or worker count.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from enum import IntEnum
from typing import Callable, Union

import numpy as np

from ._kernels import mm_accum

MAGIC_DENSE = b"TWMX"
MAGIC_CSC = b"TWCS"
FORMAT_VERSION = 1

# Column-block width for the dense path. Keeps the active output slab
# (block x M) inside L2 for typical M; any block width gives bit-identical
# results because the per-element k order never changes.
DENSE_COL_BLOCK = 128


class Layout(IntEnum):
    ROW_MAJOR = 0
    COL_MAJOR = 1


class DimensionError(ValueError):
    """Operand shapes do not match the operation's contract."""


class FormatError(ValueError):
    """A binary file is malformed: bad magic, bad header, or truncated."""


@dataclass(frozen=True)
class GemmShape:
    m: int
    k: int
    n: int

    def __post_init__(self) -> None:
        if self.m < 1 or self.k < 1 or self.n < 1:
            raise DimensionError(f"GEMM dims must be positive, got {self}")

    @property
    def flops(self) -> int:
        return 2 * self.m * self.k * self.n


@dataclass(frozen=True)
class DenseMatrix:
    """2-D float32 matrix with an explicit storage layout tag.

    data is the flat storage buffer: row-by-row for ROW_MAJOR, column-by-
    column for COL_MAJOR. Instances are immutable; the buffer is frozen at
    construction so matrices are safe to share across threads.
    """

    rows: int
    cols: int
    layout: Layout
    data: np.ndarray

    def __post_init__(self) -> None:
        if self.rows < 0 or self.cols < 0:
            raise DimensionError(f"negative dims {self.rows}x{self.cols}")
        if self.data.dtype != np.float32:
            raise DimensionError(f"buffer must be float32, got {self.data.dtype}")
        if self.data.ndim != 1 or self.data.size != self.rows * self.cols:
            raise DimensionError(
                f"buffer has {self.data.size} elements, expected {self.rows * self.cols}"
            )
        self.data.setflags(write=False)

    @classmethod
    def from_array(cls, arr: np.ndarray, layout: Layout | None = None) -> "DenseMatrix":
        """Wrap a 2-D array. Fortran-contiguous input maps to COL_MAJOR
        without copying; anything else is stored ROW_MAJOR (copying only if
        needed). An explicit layout forces that storage order."""
        a = np.asarray(arr, dtype=np.float32)
        if a.ndim != 2:
            raise DimensionError(f"expected 2-D array, got ndim={a.ndim}")
        if layout is None:
            layout = Layout.COL_MAJOR if (a.flags.f_contiguous and not a.flags.c_contiguous) else Layout.ROW_MAJOR
        order = "C" if layout == Layout.ROW_MAJOR else "F"
        buf = np.ravel(a, order=order)
        if buf.base is not None:
            # ravel returned a view into caller memory; copy so freezing the
            # buffer really makes the matrix immutable
            buf = buf.copy()
        return cls(a.shape[0], a.shape[1], layout, buf)

    def array(self) -> np.ndarray:
        """Read-only 2-D view of shape (rows, cols)."""
        if self.layout == Layout.ROW_MAJOR:
            return self.data.reshape(self.rows, self.cols)
        return self.data.reshape(self.cols, self.rows).T

    @property
    def shape(self) -> tuple[int, int]:
        return (self.rows, self.cols)


@dataclass(frozen=True)
class CscMatrix:
    """Compressed sparse column matrix (float32 values)."""

    rows: int
    cols: int
    col_ptr: np.ndarray  # uint32, cols+1 offsets
    row_idx: np.ndarray  # uint32, nnz row indices, strictly increasing per column
    values: np.ndarray  # float32, nnz

    def __post_init__(self) -> None:
        cp = self.col_ptr
        if cp.ndim != 1 or cp.size != self.cols + 1:
            raise DimensionError("col_ptr must have cols+1 entries")
        if cp[0] != 0 or np.any(np.diff(cp.astype(np.int64)) < 0):
            raise FormatError("col_ptr must be nondecreasing and start at 0")
        nnz = int(cp[-1])
        if self.row_idx.size != nnz or self.values.size != nnz:
            raise DimensionError("row_idx/values length must equal col_ptr[-1]")
        if nnz:
            ri = self.row_idx.astype(np.int64)
            if ri.min() < 0 or ri.max() >= self.rows:
                raise DimensionError("row index out of range")
            # strictly increasing within each column
            col_of = np.repeat(
                np.arange(self.cols), np.diff(cp.astype(np.int64))
            )
            same_col = col_of[1:] == col_of[:-1]
            if np.any(np.diff(ri)[same_col] <= 0):
                raise FormatError("row indices must be strictly increasing per column")
        for name in ("col_ptr", "row_idx", "values"):
            getattr(self, name).setflags(write=False)

    @property
    def nnz(self) -> int:
        return int(self.col_ptr[-1])


def gemm_dense(a: DenseMatrix, b: DenseMatrix) -> DenseMatrix:
    """C = A x B, float32, each element accumulated in ascending-k order.

    Bit-identical to a naive triple loop; deterministic across runs. The
    output is COL_MAJOR: the kernel writes a transposed (N, M) buffer so the
    inner loop is stride-1, and that buffer is exactly C in column order.
    """
    if a.cols != b.rows:
        raise DimensionError(f"A is {a.shape}, B is {b.shape}: inner dims differ")
    m, n = a.rows, b.cols
    at = np.ascontiguousarray(a.array().T)
    bv = b.array()
    ct = np.zeros((n, m), dtype=np.float32)
    out_rows = np.arange(n, dtype=np.int64)
    for c0 in range(0, n, DENSE_COL_BLOCK):
        c1 = min(c0 + DENSE_COL_BLOCK, n)
        mm_accum(at, bv[:, c0:c1], out_rows[c0:c1], ct)
    return DenseMatrix(m, n, Layout.COL_MAJOR, ct.reshape(-1))


def transpose(m: DenseMatrix) -> DenseMatrix:
    """Physical transpose: out[j][i] == m[i][j], stored ROW_MAJOR so that a
    former column traversal becomes a contiguous row traversal."""
    out = np.ascontiguousarray(m.array().T)
    return DenseMatrix.from_array(out, Layout.ROW_MAJOR)


KeepPredicate = Union[np.ndarray, Callable[[np.ndarray], np.ndarray]]


def to_csc(m: DenseMatrix, keep: KeepPredicate) -> CscMatrix:
    """Build a CSC matrix from exactly the elements where keep holds.

    keep is a boolean mask of the matrix shape, or a vectorized predicate
    applied to the dense array (e.g. lambda v: np.abs(v) > tau).
    """
    a = m.array()
    mask = keep(a) if callable(keep) else np.asarray(keep, dtype=bool)
    if mask.shape != a.shape:
        raise DimensionError(f"keep mask {mask.shape} does not match matrix {a.shape}")
    kept = np.argwhere(mask.T)  # (col, row) pairs, sorted by col then row
    col = kept[:, 0]
    row = kept[:, 1]
    counts = np.bincount(col, minlength=m.cols)
    col_ptr = np.zeros(m.cols + 1, dtype=np.uint32)
    np.cumsum(counts, out=col_ptr[1:])
    values = np.ascontiguousarray(a[row, col], dtype=np.float32)
    return CscMatrix(m.rows, m.cols, col_ptr, row.astype(np.uint32), values)


def csc_to_dense(s: CscMatrix) -> DenseMatrix:
    """Expand a CSC matrix to dense (zeros where no entry is stored)."""
    out = np.zeros((s.rows, s.cols), dtype=np.float32)
    col_of = np.repeat(np.arange(s.cols), np.diff(s.col_ptr.astype(np.int64)))
    out[s.row_idx.astype(np.int64), col_of] = s.values
    return DenseMatrix.from_array(out, Layout.ROW_MAJOR)


_DENSE_HEADER = struct.Struct("<IIIB3x")  # version, rows, cols, layout
_CSC_HEADER = struct.Struct("<IIII")  # version, rows, cols, nnz


def dense_to_bytes(m: DenseMatrix) -> bytes:
    if m.rows == 0 or m.cols == 0:
        raise FormatError(f"refusing to write empty {m.rows}x{m.cols} matrix")
    header = MAGIC_DENSE + _DENSE_HEADER.pack(FORMAT_VERSION, m.rows, m.cols, int(m.layout))
    return header + m.data.astype("<f4", copy=False).tobytes()


def dense_from_bytes(raw: bytes, off: int = 0) -> tuple[DenseMatrix, int]:
    """Decode one dense-matrix record at `off`; returns (matrix, next offset)
    so records can be concatenated in container files."""
    if raw[off : off + 4] != MAGIC_DENSE:
        raise FormatError(f"bad magic {raw[off : off + 4]!r}, expected {MAGIC_DENSE!r}")
    off += 4
    if len(raw) < off + _DENSE_HEADER.size:
        raise FormatError("header truncated")
    version, rows, cols, layout = _DENSE_HEADER.unpack_from(raw, off)
    off += _DENSE_HEADER.size
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported version {version}")
    if layout not in (0, 1):
        raise FormatError(f"bad layout byte {layout}")
    if rows == 0 or cols == 0:
        raise FormatError(f"empty matrix {rows}x{cols} in file")
    expected = rows * cols * 4
    if len(raw) < off + expected:
        raise FormatError(f"payload has {len(raw) - off} bytes, expected {expected}")
    data = np.frombuffer(raw, dtype="<f4", count=rows * cols, offset=off).astype(np.float32)
    return DenseMatrix(rows, cols, Layout(layout), data), off + expected


def write_matrix(m: DenseMatrix, path) -> None:
    with open(path, "wb") as f:
        f.write(dense_to_bytes(m))


def read_matrix(path) -> DenseMatrix:
    with open(path, "rb") as f:
        raw = f.read()
    m, off = dense_from_bytes(raw)
    if off != len(raw):
        raise FormatError(f"{len(raw) - off} trailing bytes after payload")
    return m


def write_csc(s: CscMatrix, path) -> None:
    with open(path, "wb") as f:
        f.write(MAGIC_CSC)
        f.write(_CSC_HEADER.pack(FORMAT_VERSION, s.rows, s.cols, s.nnz))
        f.write(s.col_ptr.astype("<u4", copy=False).tobytes())
        f.write(s.row_idx.astype("<u4", copy=False).tobytes())
        f.write(s.values.astype("<f4", copy=False).tobytes())


def read_csc(path) -> CscMatrix:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != MAGIC_CSC:
        raise FormatError(f"bad magic {raw[:4]!r}, expected {MAGIC_CSC!r}")
    if len(raw) < 4 + _CSC_HEADER.size:
        raise FormatError("header truncated")
    version, rows, cols, nnz = _CSC_HEADER.unpack_from(raw, 4)
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported version {version}")
    off = 4 + _CSC_HEADER.size
    need = (cols + 1 + nnz) * 4 + nnz * 4
    if len(raw) - off != need:
        raise FormatError(f"payload has {len(raw) - off} bytes, expected {need}")
    col_ptr = np.frombuffer(raw, dtype="<u4", count=cols + 1, offset=off).astype(np.uint32)
    off += (cols + 1) * 4
    row_idx = np.frombuffer(raw, dtype="<u4", count=nnz, offset=off).astype(np.uint32)
    off += nnz * 4
    values = np.frombuffer(raw, dtype="<f4", count=nnz, offset=off).astype(np.float32)
    return CscMatrix(rows, cols, col_ptr, row_idx, values)
