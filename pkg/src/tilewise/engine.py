"""Tile-sparse GEMM execution: gather, shape batching, load-balanced worker
pool, and the CSC overlay path.

Every tile task owns a disjoint set of output columns and accumulates each
element in ascending-k order with the same micro-kernel as the dense
reference, so results are bit-identical for any worker count and any
schedule — and speedups against the dense path isolate the sparsity effect.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from ._kernels import mm_accum, spmm_accum
from .matrix import CscMatrix, DenseMatrix, DimensionError, Layout
from .pattern import CompactTileSet, mask_words_to_indices, unpack_mask_words


@dataclass(frozen=True)
class TileTask:
    """One tile's sub-GEMM: gathered activation rows x compact sub-matrix,
    written to this tile's own output columns."""

    index: int
    gathered_at: np.ndarray  # (k_i, M) float32, row-contiguous
    b_sub: np.ndarray  # (k_i, n_i) float32, column-contiguous
    out_rows: np.ndarray  # int64 global output column ids

    @property
    def flops(self) -> int:
        m = self.gathered_at.shape[1]
        return 2 * m * self.b_sub.shape[0] * self.b_sub.shape[1]


@dataclass(frozen=True)
class BatchGroup:
    """Tile tasks sharing the same tile width n_i, executed back to back so
    they share gathered activations and kernel shape."""

    n_i: int
    tasks: tuple[TileTask, ...]

    @property
    def flops(self) -> int:
        return sum(t.flops for t in self.tasks)


@dataclass(frozen=True)
class FlopReport:
    wall_time: float
    flops: int  # sum of 2*M*k_i*n_i over tiles
    dense_flops: int  # 2*M*K*N
    ratio: float  # flops / dense_flops


def gather_rows(at: np.ndarray, row_mask_words: np.ndarray, force_copy: bool = False) -> np.ndarray:
    """Pack the surviving rows of the transposed activation matrix, in
    original order, so the kernel's inner traversal stays stride-1. A full
    mask returns the input unchanged (zero copies) unless force_copy."""
    k = at.shape[0]
    keep = unpack_mask_words(row_mask_words, k)
    if keep.all():
        return at.copy() if force_copy else at
    return np.ascontiguousarray(at[np.flatnonzero(keep)])


def group_by_shape(tasks: Sequence[TileTask]) -> list[BatchGroup]:
    """Partition tasks into groups of equal tile width n_i, ordered by
    descending total FLOPs (largest first, for load balance); ties keep the
    lower first-tile index first."""
    by_width: dict[int, list[TileTask]] = {}
    for t in tasks:
        by_width.setdefault(int(t.b_sub.shape[1]), []).append(t)
    groups = [BatchGroup(w, tuple(ts)) for w, ts in by_width.items()]
    groups.sort(key=lambda gr: (-gr.flops, gr.tasks[0].index))
    return groups


def _run_tasks(tasks: Sequence[TileTask], ct: np.ndarray) -> None:
    for t in tasks:
        mm_accum(t.gathered_at, t.b_sub, t.out_rows, ct)


def execute_batched(groups: Sequence[BatchGroup], n: int, workers: int = 1) -> np.ndarray:
    """Run all groups into one (N, M) transposed output buffer.

    Scheduling is static longest-processing-time: groups are taken largest
    first and assigned to the least-loaded worker. Tasks write disjoint
    output rows and accumulate in fixed order, so the result is bit-identical
    for any worker count.
    """
    if workers < 1:
        raise DimensionError(f"workers must be >= 1, got {workers}")
    if n < 1:
        raise DimensionError(f"output needs n >= 1, got {n}")
    m = groups[0].tasks[0].gathered_at.shape[1] if groups else 1
    ct = np.zeros((n, m), dtype=np.float32)
    if not groups:
        return ct
    if workers == 1:
        for g in groups:
            _run_tasks(g.tasks, ct)
        return ct
    bins: list[list[BatchGroup]] = [[] for _ in range(workers)]
    loads = [0] * workers
    for g in groups:  # already sorted largest first
        w = loads.index(min(loads))
        bins[w].append(g)
        loads[w] += g.flops
    with ThreadPoolExecutor(max_workers=workers) as pool:
        futures = [
            pool.submit(lambda bs=b: [_run_tasks(g.tasks, ct) for g in bs])
            for b in bins
            if b
        ]
        for f in futures:
            f.result()
    return ct


def _plan_tasks(a: DenseMatrix, tiles: CompactTileSet) -> list[TileTask]:
    """Transpose the activations once, then gather a packed row subset per
    distinct row mask (cached, shared across tiles with the same mask)."""
    at = np.ascontiguousarray(a.array().T)
    gathered: dict[bytes, np.ndarray] = {}
    tasks = []
    for i, t in enumerate(tiles.tiles):
        sub = t.sub_matrix
        if sub.rows == 0 or sub.cols == 0:
            continue  # fully pruned tile: its output columns stay zero
        key = t.row_mask_words.tobytes()
        packed = gathered.get(key)
        if packed is None:
            packed = gather_rows(at, t.row_mask_words, force_copy=True)
            gathered[key] = packed
        tasks.append(
            TileTask(
                index=i,
                gathered_at=packed,
                b_sub=sub.array(),
                out_rows=t.col_ids.astype(np.int64),
            )
        )
    return tasks


def gemm_tw(a: DenseMatrix, tiles: CompactTileSet, workers: int = 1) -> DenseMatrix:
    """C = A x expand(tiles), executed as one dense sub-GEMM per tile.
    Output columns of fully pruned tiles (and of pruned columns) are exactly
    zero. Matches the zero-fill dense oracle within 1e-4*K max-abs-diff (in
    practice bit-exactly, since pruning only removes terms)."""
    if a.cols != tiles.k:
        raise DimensionError(f"A has {a.cols} cols but pattern K is {tiles.k}")
    tasks = _plan_tasks(a, tiles)
    groups = group_by_shape(tasks)
    ct = execute_batched(groups, tiles.n, workers=workers)
    if ct.shape[1] != a.rows:  # no tasks at all: shape the empty result
        ct = np.zeros((tiles.n, a.rows), dtype=np.float32)
    return DenseMatrix(a.rows, tiles.n, Layout.COL_MAJOR, ct.reshape(-1))


def spmm_csc(a: DenseMatrix, s: CscMatrix) -> DenseMatrix:
    """C[i][j] = sum over the stored entries of column j: A[i][k] * S[k][j]."""
    if a.cols != s.rows:
        raise DimensionError(f"A has {a.cols} cols but S has {s.rows} rows")
    at = np.ascontiguousarray(a.array().T)
    ct = np.zeros((s.cols, a.rows), dtype=np.float32)
    if s.nnz:
        spmm_accum(
            at,
            s.col_ptr.astype(np.int64),
            s.row_idx.astype(np.int64),
            s.values,
            ct,
        )
    return DenseMatrix(a.rows, s.cols, Layout.COL_MAJOR, ct.reshape(-1))


def gemm_tew(
    a: DenseMatrix, tiles: CompactTileSet, ew: CscMatrix, workers: int = 1
) -> DenseMatrix:
    """TW plus element-wise overlay by linearity: gemm_tw + spmm_csc,
    summed elementwise. With an empty overlay this is gemm_tw exactly."""
    if ew.rows != tiles.k or ew.cols != tiles.n:
        raise DimensionError(
            f"overlay is {ew.rows}x{ew.cols}, pattern is {tiles.k}x{tiles.n}"
        )
    tw = gemm_tw(a, tiles, workers=workers)
    if ew.nnz == 0:
        return tw
    extra = spmm_csc(a, ew)
    out = tw.data + extra.data  # both COL_MAJOR buffers in the same order
    return DenseMatrix(tw.rows, tw.cols, Layout.COL_MAJOR, out)


def flop_report(tiles: CompactTileSet, m: int, wall_time: float) -> FlopReport:
    """Static FLOP accounting for an execution that took wall_time seconds."""
    if m < 1:
        raise DimensionError(f"M must be >= 1, got {m}")
    flops = sum(
        2 * m * t.sub_matrix.rows * t.sub_matrix.cols for t in tiles.tiles
    )
    dense = 2 * m * tiles.k * tiles.n
    return FlopReport(wall_time=wall_time, flops=flops, dense_flops=dense, ratio=flops / dense)


def time_median(fn, repeats: int, warmup: int = 1) -> tuple[float, float, float]:
    """(median, mean, stddev) of fn's wall time over `repeats` runs after
    `warmup` discarded runs. Monotonic clock."""
    for _ in range(warmup):
        fn()
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    arr = np.asarray(times)
    return float(np.median(arr)), float(arr.mean()), float(arr.std())
