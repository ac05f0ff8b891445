"""Numba micro-kernels shared by the dense reference GEMM and the tile engine.

Compiled without fastmath on purpose: every multiply and add rounds
separately (no FMA contraction, no reassociation), so each output element
accumulates in exact ascending-k order and the result is bit-identical to a
naive float32 triple loop regardless of operand layout, tiling, or thread
count. nogil=True lets the worker pool run kernels concurrently.
"""

from numba import njit


@njit(nogil=True, cache=True)
def mm_accum(at, b, out_rows, ct):
    # at: (k, M) activations, one row per surviving k index
    # b: (k, n) weight tile
    # out_rows: n output row ids into ct (global output column ids)
    # ct: (N, M) transposed output, accumulated in place
    k_dim = at.shape[0]
    m_dim = at.shape[1]
    n_dim = b.shape[1]
    for k in range(k_dim):
        for j in range(n_dim):
            r = out_rows[j]
            bv = b[k, j]
            for m in range(m_dim):
                ct[r, m] += bv * at[k, m]


@njit(nogil=True, cache=True)
def spmm_accum(at, col_ptr, row_idx, values, ct):
    # CSC column j accumulates into ct row j; row_idx is strictly
    # increasing within a column, which keeps the k order ascending.
    n_dim = col_ptr.shape[0] - 1
    m_dim = at.shape[1]
    for j in range(n_dim):
        for p in range(col_ptr[j], col_ptr[j + 1]):
            k = row_idx[p]
            v = values[p]
            for m in range(m_dim):
                ct[j, m] += v * at[k, m]
