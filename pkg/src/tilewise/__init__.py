"""Tile-sparse linear algebra: structured pruning of weight matrices into
width-G column tiles with per-tile row pruning, a compacted GEMM engine that
is bit-identical to its dense reference, and a small trainer that supplies
real gradients for importance scoring."""

from .matrix import (
    CscMatrix,
    DenseMatrix,
    DimensionError,
    FormatError,
    GemmShape,
    Layout,
    csc_to_dense,
    gemm_dense,
    read_csc,
    read_matrix,
    to_csc,
    transpose,
    write_csc,
    write_matrix,
)
from .pattern import (
    CompactTile,
    CompactTileSet,
    PatternStats,
    Tile,
    TileConfig,
    TilePattern,
    compact,
    dense_pattern,
    exact_count,
    generate_comparator_mask,
    partition,
    pattern_stats,
    random_uniform_pattern,
    read_pattern,
    reorganize_columns,
    write_pattern,
    zero_capture_analysis,
    zero_fill,
)
from .pruning import (
    AprioriConfig,
    ConfigError,
    NEVER_PRUNE,
    PruneSchedule,
    ScoreMap,
    TewConfig,
    aggregate_unit_sparsity,
    apriori_tuning,
    build_apriori,
    column_units,
    global_rank,
    importance_scores,
    magnitude_scores,
    multi_stage_prune,
    percentile_threshold,
    prune_stage,
    row_units,
    tew_overlay,
    tile_scores,
)
from .engine import (
    BatchGroup,
    FlopReport,
    TileTask,
    execute_batched,
    flop_report,
    gather_rows,
    gemm_tew,
    gemm_tw,
    group_by_shape,
    spmm_csc,
    time_median,
)
from .trainer import (
    DivergenceError,
    GradSnapshot,
    MlpModel,
    SyntheticDataset,
    evaluate,
    fine_tune_masked,
    grad_snapshot,
    load_model,
    save_model,
    train,
)

__version__ = "0.1.0"
