"""Tile patterns: partitioning, re-organization, compaction, stats,
comparator masks, zero-capture counting, and the pattern file format."""

import numpy as np
import pytest

from tilewise.matrix import DenseMatrix, DimensionError, FormatError
from tilewise.pattern import (
    Tile,
    TileConfig,
    TilePattern,
    compact,
    dense_pattern,
    exact_count,
    generate_comparator_mask,
    pack_mask_words,
    partition,
    pattern_stats,
    random_uniform_pattern,
    read_pattern,
    reorganize_columns,
    unpack_mask_words,
    write_pattern,
    zero_capture_analysis,
    zero_fill,
)


def random_dense(rows, cols, seed):
    rng = np.random.default_rng(seed)
    return DenseMatrix.from_array(rng.standard_normal((rows, cols)).astype(np.float32))


def make_pattern(k, n, g, pruned_cols=(), pruned_rows_per_tile=None):
    """Build a pattern by pruning explicit column ids, then explicit row ids
    per re-organized tile."""
    keep_cols = np.setdiff1d(np.arange(n, dtype=np.int32), np.asarray(pruned_cols, np.int32))
    groups = reorganize_columns([keep_cols], g)
    tiles = []
    for t, cols in enumerate(groups):
        keep = np.ones(k, dtype=bool)
        if pruned_rows_per_tile:
            keep[np.asarray(pruned_rows_per_tile[t], dtype=np.int64)] = False
        tiles.append(Tile(cols, keep))
    return TilePattern(k, n, g, tuple(tiles))


def test_exact_count_floor_semantics():
    assert exact_count(0.3, 10) == 3  # 0.3*10 is 2.999... in binary
    assert exact_count(0.5, 7) == 3
    assert exact_count(0.0, 100) == 0
    assert exact_count(10 / 256, 256) == 10


def test_tile_config():
    assert TileConfig(64).g == 64
    with pytest.raises(DimensionError):
        TileConfig(0)
    with pytest.raises(DimensionError):
        TileConfig(12)  # not a multiple of the kernel width


def test_partition():
    assert partition(256, 64) == [(0, 64), (64, 128), (128, 192), (192, 256)]
    assert [b - a for a, b in partition(130, 64)] == [64, 64, 2]
    assert partition(1, 128) == [(0, 1)]


def test_reorganize_columns_fig_walkthrough():
    # 4 tiles of width G=64 losing 4,3,2,1 columns -> widths G,G,G,G-10
    g = 64
    survivors = []
    pruned_per = (4, 3, 2, 1)
    for t, np_cols in enumerate(pruned_per):
        cols = np.arange(t * g + np_cols, (t + 1) * g, dtype=np.int32)
        survivors.append(cols)
    groups = reorganize_columns(survivors, g)
    assert [len(c) for c in groups] == [64, 64, 64, 54]
    merged = np.concatenate(groups)
    assert np.all(np.diff(merged) > 0)  # ascending across tile boundaries


def test_reorganize_columns_nothing_pruned():
    groups = reorganize_columns([np.arange(8, dtype=np.int32)], 4)
    assert [list(c) for c in groups] == [[0, 1, 2, 3], [4, 5, 6, 7]]


def test_reorganize_columns_emptied_tail():
    # N=8, G=4, the whole last tile pruned -> a single width-4 tile remains
    groups = reorganize_columns([np.arange(4, dtype=np.int32)], 4)
    assert [len(c) for c in groups] == [4]


def test_reorganize_rejects_overlap():
    with pytest.raises(DimensionError):
        reorganize_columns([np.array([0, 1], np.int32), np.array([1, 2], np.int32)], 2)


def test_pattern_invariants():
    with pytest.raises(DimensionError):  # duplicate column across tiles
        TilePattern(2, 4, 2, (
            Tile(np.array([0, 1], np.int32), np.ones(2, bool)),
            Tile(np.array([1, 2], np.int32), np.ones(2, bool)),
        ))
    with pytest.raises(DimensionError):  # non-last tile narrower than G
        TilePattern(2, 6, 2, (
            Tile(np.array([0], np.int32), np.ones(2, bool)),
            Tile(np.array([2, 3], np.int32), np.ones(2, bool)),
        ))
    with pytest.raises(DimensionError):  # out-of-range column id
        TilePattern(2, 2, 2, (Tile(np.array([0, 5], np.int32), np.ones(2, bool)),))


def test_mask_words_roundtrip():
    rng = np.random.default_rng(0)
    for length in (1, 31, 32, 33, 96, 100):
        keep = rng.random(length) > 0.5
        words = pack_mask_words(keep)
        assert words.size == (length + 31) // 32
        assert np.array_equal(unpack_mask_words(words, length), keep)


def test_compact_full_keep_tiles_input_exactly():
    b = random_dense(6, 8, seed=1)
    p = dense_pattern(6, 8, 4)
    ts = compact(b, p)
    arr = b.array()
    for t, (lo, hi) in zip(ts.tiles, partition(8, 4)):
        assert np.array_equal(t.sub_matrix.array(), arr[:, lo:hi])


def test_compact_expand_equals_zero_fill():
    b = random_dense(64, 96, seed=2)
    p = random_uniform_pattern(64, 96, 32, 0.5, seed=3)
    expanded = compact(b, p).expand()
    assert np.array_equal(expanded.array(), zero_fill(b, p).array())


def test_compact_row_subset_order():
    b = DenseMatrix.from_array(np.arange(12, dtype=np.float32).reshape(3, 4))
    p = TilePattern(3, 4, 4, (Tile(np.arange(4, dtype=np.int32), np.array([True, False, True])),))
    sub = compact(b, p).tiles[0].sub_matrix.array()
    assert np.array_equal(sub, b.array()[[0, 2], :])


def test_pattern_stats_uniform_half_half():
    # 50% of columns and 50% of rows pruned -> 75% FLOP reduction, exactly
    k, n, g = 32, 64, 16
    p = make_pattern(k, n, g,
                     pruned_cols=range(0, n, 2),
                     pruned_rows_per_tile=[range(0, k, 2)] * 2)
    st = pattern_stats(p, m=8)
    dense_flops = 2 * 8 * k * n
    assert st.flops == dense_flops // 4
    assert st.sparsity == 0.75


def test_pattern_stats_dense():
    p = dense_pattern(16, 32, 8)
    st = pattern_stats(p, m=4)
    assert st.sparsity == 0.0
    assert st.flops == 2 * 4 * 16 * 32
    assert st.tiles_dropped == 0


def test_pattern_stats_one_tile_fully_pruned():
    # 4 equal tiles, one pruned entirely -> sparsity 0.25, tile dropped
    p = make_pattern(8, 16, 4, pruned_cols=range(12, 16))
    st = pattern_stats(p, m=1)
    assert st.sparsity == 0.25
    assert st.tiles_dropped == 1


def test_comparator_ew():
    scores = np.arange(1, 9, dtype=np.float64).reshape(2, 4)
    keep = generate_comparator_mask("EW", scores, 0.5)
    assert np.array_equal(keep.ravel(), scores.ravel() > 4)


def test_comparator_vw_fixed_count_per_vector():
    rng = np.random.default_rng(4)
    scores = rng.random((16, 8))
    keep = generate_comparator_mask("VW", scores, 0.5, vector_len=4)
    for j in range(8):
        for r0 in range(0, 16, 4):
            assert keep[r0 : r0 + 4, j].sum() == 2


def test_comparator_bw_lowest_block():
    scores = np.ones((4, 4))
    scores[2:, :2] = 0.1  # lowest-mean 2x2 block
    keep = generate_comparator_mask("BW", scores, 0.25, block_edge=2)
    want = np.ones((4, 4), dtype=bool)
    want[2:, :2] = False
    assert np.array_equal(keep, want)
    with pytest.raises(DimensionError):
        generate_comparator_mask("XX", scores, 0.25)


def test_comparator_ties_break_by_index():
    scores = np.ones((1, 8))
    keep = generate_comparator_mask("EW", scores, 0.5)
    assert np.array_equal(keep[0], [False] * 4 + [True] * 4)


def test_zero_capture_all_zero_mask():
    mask = np.zeros((8, 8), dtype=bool)  # everything pruned
    cdf = zero_capture_analysis(mask, [(2, 2)])[(2, 2)]
    assert cdf[3] == 0.0 and cdf[4] == 1.0  # step at the unit size


def test_zero_capture_checkerboard():
    mask = np.indices((4, 4)).sum(axis=0) % 2 == 0
    cdf = zero_capture_analysis(mask, [(1, 2)])[(1, 2)]
    assert cdf[0] == 0.0 and cdf[1] == 1.0  # every 1x2 unit holds exactly 1 zero


def test_zero_capture_matches_direct_count():
    rng = np.random.default_rng(5)
    mask = rng.random((32, 32)) > 0.75
    for shape in ((32, 1), (8, 8), (1, 32)):
        cdf = zero_capture_analysis(mask, [shape])[shape]
        h, w = shape
        counts = []
        for r0 in range(0, 32, h):
            for c0 in range(0, 32, w):
                counts.append((~mask[r0 : r0 + h, c0 : c0 + w]).sum())
        for c in range(h * w + 1):
            assert cdf[c] == sum(1 for x in counts if x <= c) / len(counts)


def test_random_uniform_pattern_sparsity():
    p = random_uniform_pattern(128, 256, 64, 0.75, seed=6)
    st = pattern_stats(p, m=1)
    assert abs(st.sparsity - 0.75) < 0.02
    widths = [t.n_i for t in p.tiles]
    assert all(w == 64 for w in widths[:-1])


def test_pattern_file_roundtrip(tmp_path):
    p = random_uniform_pattern(100, 130, 64, 0.5, seed=7)
    path = tmp_path / "p.twpt"
    write_pattern(p, path)
    back = read_pattern(path)
    assert (back.k, back.n, back.g) == (p.k, p.n, p.g)
    assert len(back.tiles) == len(p.tiles)
    for a, b in zip(back.tiles, p.tiles):
        assert np.array_equal(a.col_ids, b.col_ids)
        assert np.array_equal(a.row_keep, b.row_keep)


def test_pattern_file_errors(tmp_path):
    path = tmp_path / "p.twpt"
    path.write_bytes(b"NOPE" + b"\x00" * 24)
    with pytest.raises(FormatError):
        read_pattern(path)
    p = dense_pattern(8, 8, 8)
    write_pattern(p, path)
    raw = path.read_bytes()
    path.write_bytes(raw[:-2])
    with pytest.raises(FormatError):
        read_pattern(path)


def test_zero_fill_keeps_surviving_values():
    b = random_dense(16, 24, seed=8)
    p = random_uniform_pattern(16, 24, 8, 0.4, seed=9)
    zf = zero_fill(b, p).array()
    mask = p.keep_mask()
    assert np.array_equal(zf[mask], b.array()[mask])
    assert np.all(zf[~mask] == 0.0)
