"""Tile sparsity patterns: partitioning, column re-organization, compaction,
statistics, comparator masks (EW/VW/BW), and zero-capture analysis.

A pattern covers a K x N weight matrix with granularity G: every tile owns a
disjoint set of surviving global columns (exactly G per tile after
re-organization, except the last) plus its own surviving-row set.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

from .matrix import (
    FORMAT_VERSION,
    DenseMatrix,
    DimensionError,
    FormatError,
    Layout,
)

MAGIC_PATTERN = b"TWPT"

MASK_WORD_BITS = 32

# Comparator defaults: vector length for VW, block edge for BW.
VW_VECTOR_LEN = 16
BW_BLOCK_EDGE = 32


def exact_count(fraction: float, total: int) -> int:
    """floor(fraction * total), with a small bias so fractions that are not
    binary-exact (0.3 * 10 multiplies to 2.999...) still hit the
    mathematical floor. Every prune budget in the package goes through
    here so stage counts are reproducible."""
    return int(math.floor(fraction * total + 1e-9))


@dataclass(frozen=True)
class TileConfig:
    """Engine-facing granularity config. g is the tile width in columns and
    must be a multiple of the micro-kernel width (8); ty is the output-tile
    height reported by the bench harness (informational)."""

    g: int
    ty: int = 8

    def __post_init__(self) -> None:
        if self.g < 1:
            raise DimensionError(f"granularity must be >= 1, got {self.g}")
        if self.g % 8 != 0:
            raise DimensionError(f"granularity must be a multiple of 8, got {self.g}")
        if self.ty < 1:
            raise DimensionError(f"ty must be >= 1, got {self.ty}")


@dataclass(frozen=True)
class Tile:
    col_ids: np.ndarray  # int32, sorted global column ids, <= G of them
    row_keep: np.ndarray  # bool, length K, True = row survives

    def __post_init__(self) -> None:
        object.__setattr__(self, "col_ids", np.ascontiguousarray(self.col_ids, dtype=np.int32))
        object.__setattr__(self, "row_keep", np.ascontiguousarray(self.row_keep, dtype=bool))
        self.col_ids.setflags(write=False)
        self.row_keep.setflags(write=False)

    @property
    def k_i(self) -> int:
        return int(np.count_nonzero(self.row_keep))

    @property
    def n_i(self) -> int:
        return int(self.col_ids.size)


@dataclass(frozen=True)
class TilePattern:
    k: int
    n: int
    g: int
    tiles: tuple[Tile, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "tiles", tuple(self.tiles))
        if self.k < 1 or self.n < 1 or self.g < 1:
            raise DimensionError(f"bad pattern dims K={self.k} N={self.n} G={self.g}")
        seen = np.concatenate([t.col_ids for t in self.tiles]) if self.tiles else np.empty(0, np.int32)
        if seen.size:
            if seen.min() < 0 or seen.max() >= self.n:
                raise DimensionError("column id out of range")
            if np.unique(seen).size != seen.size:
                raise DimensionError("column ids must be disjoint across tiles")
        for i, t in enumerate(self.tiles):
            if t.row_keep.size != self.k:
                raise DimensionError(f"tile {i} row_keep length {t.row_keep.size} != K={self.k}")
            if t.n_i == 0:
                raise DimensionError(f"tile {i} is empty; empty tiles must be dropped")
            if np.any(np.diff(t.col_ids) <= 0):
                raise DimensionError(f"tile {i} col_ids must be strictly ascending")
            width_ok = t.n_i == self.g or (i == len(self.tiles) - 1 and t.n_i < self.g)
            if not width_ok:
                raise DimensionError(
                    f"tile {i} has width {t.n_i}; only the last tile may be narrower than G={self.g}"
                )

    @property
    def surviving_columns(self) -> np.ndarray:
        if not self.tiles:
            return np.empty(0, dtype=np.int32)
        return np.concatenate([t.col_ids for t in self.tiles])

    def keep_mask(self) -> np.ndarray:
        """Element-level keep mask of shape (K, N)."""
        mask = np.zeros((self.k, self.n), dtype=bool)
        for t in self.tiles:
            mask[np.ix_(t.row_keep, t.col_ids)] = True
        return mask

    def unit_counts(self) -> tuple[int, int, int, int]:
        """(pruned column units, total column units, pruned row units,
        total row units). Row units exist per tile: one per (tile, k)."""
        pruned_cols = self.n - int(self.surviving_columns.size)
        total_rows = len(self.tiles) * self.k
        kept_rows = sum(t.k_i for t in self.tiles)
        return pruned_cols, self.n, total_rows - kept_rows, total_rows


@dataclass(frozen=True)
class CompactTile:
    sub_matrix: DenseMatrix  # k_i x n_i, COL_MAJOR (transposed storage)
    row_mask_words: np.ndarray  # uint32 words, bit=1 keep, little-endian bit order
    col_ids: np.ndarray  # int32 global output column ids

    def __post_init__(self) -> None:
        object.__setattr__(self, "row_mask_words", np.ascontiguousarray(self.row_mask_words, dtype=np.uint32))
        object.__setattr__(self, "col_ids", np.ascontiguousarray(self.col_ids, dtype=np.int32))
        self.row_mask_words.setflags(write=False)
        self.col_ids.setflags(write=False)


@dataclass(frozen=True)
class CompactTileSet:
    k: int
    n: int
    g: int
    tiles: tuple[CompactTile, ...]

    def expand(self) -> DenseMatrix:
        """Zero-filled K x N reconstruction of the compacted weight."""
        out = np.zeros((self.k, self.n), dtype=np.float32)
        for t in self.tiles:
            rows = mask_words_to_indices(t.row_mask_words, self.k)
            out[np.ix_(rows, t.col_ids)] = t.sub_matrix.array()
        return DenseMatrix.from_array(out, Layout.ROW_MAJOR)


@dataclass(frozen=True)
class PatternStats:
    sparsity: float  # element-level: 1 - kept/(K*N)
    flops: int  # sum of 2*M*k_i*n_i
    per_tile_dims: tuple[tuple[int, int], ...]
    tiles_dropped: int  # original ceil(N/G) tiles emptied by re-organization


def pack_mask_words(keep: np.ndarray) -> np.ndarray:
    """Pack a boolean keep vector into uint32 words, little-endian bit order:
    bit b of word w corresponds to index w*32+b, 1 = keep."""
    bits = np.ascontiguousarray(keep, dtype=bool)
    nwords = (bits.size + MASK_WORD_BITS - 1) // MASK_WORD_BITS
    padded = np.zeros(nwords * MASK_WORD_BITS, dtype=bool)
    padded[: bits.size] = bits
    packed = np.packbits(padded, bitorder="little")
    return packed.view("<u4").astype(np.uint32)


def unpack_mask_words(words: np.ndarray, length: int) -> np.ndarray:
    raw = np.ascontiguousarray(words, dtype=np.uint32).view(np.uint8)
    bits = np.unpackbits(raw, bitorder="little")
    if bits.size < length:
        raise DimensionError(f"mask words cover {bits.size} bits, need {length}")
    return bits[:length].astype(bool)


def mask_words_to_indices(words: np.ndarray, length: int) -> np.ndarray:
    return np.flatnonzero(unpack_mask_words(words, length)).astype(np.int64)


def partition(n: int, g: int) -> list[tuple[int, int]]:
    """Split [0, N) into ceil(N/G) contiguous column ranges; all width G
    except a final remainder."""
    if n < 1 or g < 1:
        raise DimensionError(f"need N >= 1 and G >= 1, got N={n} G={g}")
    return [(start, min(start + g, n)) for start in range(0, n, g)]


def reorganize_columns(survivors, g: int) -> list[np.ndarray]:
    """Concatenate all surviving global column indices in ascending order and
    regroup into consecutive width-G tiles; the last takes the remainder.
    Tiles emptied by pruning simply disappear from the output."""
    if g < 1:
        raise DimensionError(f"G must be >= 1, got {g}")
    parts = [np.asarray(s, dtype=np.int32) for s in survivors]
    merged = np.concatenate(parts) if parts else np.empty(0, np.int32)
    merged = np.sort(merged)
    if merged.size and np.unique(merged).size != merged.size:
        raise DimensionError("survivor lists must be disjoint")
    return [merged[i : i + g] for i in range(0, merged.size, g)]


def dense_pattern(k: int, n: int, g: int) -> TilePattern:
    """The keep-everything pattern: partition only, nothing pruned."""
    tiles = tuple(
        Tile(np.arange(start, stop, dtype=np.int32), np.ones(k, dtype=bool))
        for start, stop in partition(n, g)
    )
    return TilePattern(k, n, g, tiles)


def compact(b: DenseMatrix, p: TilePattern) -> CompactTileSet:
    """Physically remove pruned rows and columns per tile (offline step).
    Sub-matrices are stored COL_MAJOR so the execution kernel walks each
    output column's k entries contiguously."""
    if (b.rows, b.cols) != (p.k, p.n):
        raise DimensionError(f"matrix {b.shape} does not match pattern ({p.k}, {p.n})")
    arr = b.array()
    tiles = []
    for t in p.tiles:
        rows = np.flatnonzero(t.row_keep)
        sub = np.asfortranarray(arr[np.ix_(rows, t.col_ids)])
        tiles.append(
            CompactTile(
                sub_matrix=DenseMatrix.from_array(sub, Layout.COL_MAJOR),
                row_mask_words=pack_mask_words(t.row_keep),
                col_ids=t.col_ids,
            )
        )
    return CompactTileSet(p.k, p.n, p.g, tuple(tiles))


def zero_fill(b: DenseMatrix, p: TilePattern) -> DenseMatrix:
    """Dense weight with pruned entries set to zero: the correctness oracle
    for every sparse execution path."""
    if (b.rows, b.cols) != (p.k, p.n):
        raise DimensionError(f"matrix {b.shape} does not match pattern ({p.k}, {p.n})")
    out = np.where(p.keep_mask(), b.array(), np.float32(0.0)).astype(np.float32)
    return DenseMatrix.from_array(out, Layout.ROW_MAJOR)


def pattern_stats(p: TilePattern, m: int) -> PatternStats:
    if m < 1:
        raise DimensionError(f"M must be >= 1, got {m}")
    dims = tuple((t.k_i, t.n_i) for t in p.tiles)
    kept = sum(ki * ni for ki, ni in dims)
    flops = 2 * m * kept
    sparsity = 1.0 - kept / (p.k * p.n)
    original_tiles = (p.n + p.g - 1) // p.g
    return PatternStats(
        sparsity=sparsity,
        flops=flops,
        per_tile_dims=dims,
        tiles_dropped=original_tiles - len(p.tiles),
    )


def _stable_lowest(scores: np.ndarray, count: int) -> np.ndarray:
    """Indices of the `count` lowest scores; ties broken by ascending index."""
    order = np.argsort(scores, kind="stable")
    return order[:count]


def generate_comparator_mask(
    kind: str,
    scores: np.ndarray,
    sparsity: float,
    vector_len: int = VW_VECTOR_LEN,
    block_edge: int = BW_BLOCK_EDGE,
) -> np.ndarray:
    """Element keep-mask for the comparator sparsity patterns.

    EW prunes the globally lowest-scored elements; VW prunes the lowest
    floor(s*len) per length-`vector_len` column vector; BW prunes the
    lowest-mean-score `block_edge` square blocks globally. All ties break by
    ascending index so masks are deterministic.
    """
    s = np.asarray(scores, dtype=np.float64)
    if s.ndim != 2:
        raise DimensionError(f"scores must be 2-D, got ndim={s.ndim}")
    if not 0.0 <= sparsity < 1.0:
        raise DimensionError(f"sparsity must be in [0, 1), got {sparsity}")
    rows, cols = s.shape
    keep = np.ones((rows, cols), dtype=bool)
    if kind == "EW":
        count = exact_count(sparsity, s.size)
        flat = _stable_lowest(s.ravel(), count)
        keep.ravel()[flat] = False
        return keep
    if kind == "VW":
        if vector_len < 1:
            raise DimensionError(f"vector_len must be >= 1, got {vector_len}")
        for j in range(cols):
            for r0 in range(0, rows, vector_len):
                seg = s[r0 : r0 + vector_len, j]
                count = exact_count(sparsity, seg.size)
                pruned = _stable_lowest(seg, count)
                keep[r0 + pruned, j] = False
        return keep
    if kind == "BW":
        if block_edge < 1:
            raise DimensionError(f"block_edge must be >= 1, got {block_edge}")
        blocks = []
        means = []
        for r0 in range(0, rows, block_edge):
            for c0 in range(0, cols, block_edge):
                blocks.append((r0, c0))
                means.append(s[r0 : r0 + block_edge, c0 : c0 + block_edge].mean())
        count = exact_count(sparsity, len(blocks))
        for bi in _stable_lowest(np.asarray(means), count):
            r0, c0 = blocks[bi]
            keep[r0 : r0 + block_edge, c0 : c0 + block_edge] = False
        return keep
    raise DimensionError(f"unknown comparator kind {kind!r}, expected EW/VW/BW")


def zero_capture_analysis(ew_mask: np.ndarray, shapes) -> dict[tuple[int, int], np.ndarray]:
    """For each unit shape (h, w), the cumulative distribution of pruned
    (zero) elements captured per unit when the matrix is tiled into h x w
    units (edge units are clipped). Returns shape -> cdf where cdf[c] is the
    fraction of units containing at most c zeros, c in 0..h*w."""
    mask = np.asarray(ew_mask, dtype=bool)
    if mask.ndim != 2:
        raise DimensionError(f"mask must be 2-D, got ndim={mask.ndim}")
    zeros = ~mask
    rows, cols = mask.shape
    out: dict[tuple[int, int], np.ndarray] = {}
    for h, w in shapes:
        if h < 1 or w < 1:
            raise DimensionError(f"bad unit shape ({h}, {w})")
        counts = []
        for r0 in range(0, rows, h):
            for c0 in range(0, cols, w):
                counts.append(int(zeros[r0 : r0 + h, c0 : c0 + w].sum()))
        hist = np.bincount(np.asarray(counts), minlength=h * w + 1)
        out[(h, w)] = np.cumsum(hist) / len(counts)
    return out


def random_uniform_pattern(
    k: int, n: int, g: int, sparsity: float, seed: int
) -> TilePattern:
    """Random pattern with the given element-level sparsity, spread uniformly:
    the same unit fraction u = 1 - sqrt(1 - s) is pruned from the columns and
    from every tile's rows, so kept elements = (1-u)^2 ~ 1-s of K*N."""
    if not 0.0 <= sparsity < 1.0:
        raise DimensionError(f"sparsity must be in [0, 1), got {sparsity}")
    rng = np.random.default_rng(seed)
    u = 1.0 - (1.0 - sparsity) ** 0.5
    pruned_cols = exact_count(u, n)
    keep_cols = np.setdiff1d(np.arange(n, dtype=np.int32), rng.choice(n, size=pruned_cols, replace=False))
    groups = reorganize_columns([keep_cols], g)
    pruned_rows = exact_count(u, k)
    tiles = []
    for cols in groups:
        keep = np.ones(k, dtype=bool)
        keep[rng.choice(k, size=pruned_rows, replace=False)] = False
        tiles.append(Tile(cols, keep))
    return TilePattern(k, n, g, tuple(tiles))


_PATTERN_HEADER = struct.Struct("<IIIII")  # version, K, N, G, tile count


def write_pattern(p: TilePattern, path) -> None:
    nwords = (p.k + MASK_WORD_BITS - 1) // MASK_WORD_BITS
    with open(path, "wb") as f:
        f.write(MAGIC_PATTERN)
        f.write(_PATTERN_HEADER.pack(FORMAT_VERSION, p.k, p.n, p.g, len(p.tiles)))
        for t in p.tiles:
            f.write(struct.pack("<I", t.n_i))
            f.write(t.col_ids.astype("<u4").tobytes())
            words = pack_mask_words(t.row_keep)
            assert words.size == nwords
            f.write(words.astype("<u4", copy=False).tobytes())


def read_pattern(path) -> TilePattern:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != MAGIC_PATTERN:
        raise FormatError(f"bad magic {raw[:4]!r}, expected {MAGIC_PATTERN!r}")
    if len(raw) < 4 + _PATTERN_HEADER.size:
        raise FormatError("header truncated")
    version, k, n, g, ntiles = _PATTERN_HEADER.unpack_from(raw, 4)
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported version {version}")
    nwords = (k + MASK_WORD_BITS - 1) // MASK_WORD_BITS
    off = 4 + _PATTERN_HEADER.size
    tiles = []
    for _ in range(ntiles):
        if len(raw) < off + 4:
            raise FormatError("tile header truncated")
        (n_i,) = struct.unpack_from("<I", raw, off)
        off += 4
        need = n_i * 4 + nwords * 4
        if len(raw) < off + need:
            raise FormatError("tile payload truncated")
        col_ids = np.frombuffer(raw, dtype="<u4", count=n_i, offset=off).astype(np.int32)
        off += n_i * 4
        words = np.frombuffer(raw, dtype="<u4", count=nwords, offset=off).astype(np.uint32)
        off += nwords * 4
        tiles.append(Tile(col_ids, unpack_mask_words(words, k)))
    if off != len(raw):
        raise FormatError(f"{len(raw) - off} trailing bytes after last tile")
    try:
        return TilePattern(k, n, g, tuple(tiles))
    except DimensionError as e:
        raise FormatError(f"pattern file violates invariants: {e}") from e
