"""Importance scoring and the staged tile pruning algorithms.

A stage prunes whole column units (K x 1), re-organizes the survivors into
width-G tiles, then prunes whole row units (1 x G) per tile — columns
strictly before rows. Thresholds are exact-count: floor(s_t * len) units are
pruned per phase, ties broken by ascending unit index. Global mode pools
unit scores across matrices under a single threshold.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .matrix import CscMatrix, DenseMatrix, DimensionError, to_csc
from .pattern import Tile, TilePattern, exact_count, pattern_stats, reorganize_columns

# Sentinel marking a unit that must never be pruned (apriori last-n2).
NEVER_PRUNE = np.inf


class ConfigError(ValueError):
    """A schedule, apriori, or TEW configuration is invalid or unsatisfiable."""


@dataclass(frozen=True)
class ScoreMap:
    """Per-element importance scores for one weight matrix (same shape,
    nonnegative). Kept in float64: scores order units, they never enter the
    float32 GEMM path."""

    scores: np.ndarray

    def __post_init__(self) -> None:
        s = np.ascontiguousarray(self.scores, dtype=np.float64)
        if s.ndim != 2:
            raise DimensionError(f"scores must be 2-D, got ndim={s.ndim}")
        if s.size and s.min() < 0:
            raise DimensionError("scores must be nonnegative")
        object.__setattr__(self, "scores", s)
        self.scores.setflags(write=False)

    @property
    def shape(self) -> tuple[int, int]:
        return self.scores.shape


@dataclass(frozen=True)
class PruneSchedule:
    """Staged sparsity targets: strictly increasing, ending at the overall
    target. Each s_t is the unit fraction pruned per phase at stage t."""

    target_sparsity: float
    stage_targets: tuple[float, ...]
    fine_tune_epochs_per_stage: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "stage_targets", tuple(float(s) for s in self.stage_targets))
        ts = self.target_sparsity
        st = self.stage_targets
        if not st:
            raise ConfigError("schedule needs at least one stage")
        if not 0.0 < ts <= 1.0:
            raise ConfigError(f"target sparsity must be in (0, 1], got {ts}")
        if any(not 0.0 < s <= ts for s in st):
            raise ConfigError(f"stage targets must lie in (0, {ts}], got {st}")
        if any(b <= a for a, b in zip(st, st[1:])):
            raise ConfigError(f"stage targets must be strictly increasing, got {st}")
        if st[-1] != ts:
            raise ConfigError(f"last stage {st[-1]} must equal target {ts}")
        if self.fine_tune_epochs_per_stage < 0:
            raise ConfigError("fine-tune epochs must be >= 0")

    @classmethod
    def gradually(
        cls,
        target_sparsity: float,
        first: float = 0.2,
        step: float = 0.1,
        fine_tune_epochs_per_stage: int = 0,
    ) -> "PruneSchedule":
        """Default ramp: 20% in the first stage, then 10-point increments
        until the target (final stage clipped to the target)."""
        if target_sparsity <= first:
            stages = [target_sparsity]
        else:
            stages = []
            s = first
            while s < target_sparsity - 1e-12:
                stages.append(round(s, 10))
                s += step
            stages.append(target_sparsity)
        return cls(target_sparsity, tuple(stages), fine_tune_epochs_per_stage)


@dataclass(frozen=True)
class AprioriConfig:
    """Bias column-unit scores using an EW reference run at the target
    sparsity: the n1 units with the highest EW sparsity are force-pruned,
    the n2 with the lowest are never pruned."""

    n1: int
    n2: int
    ew_reference: np.ndarray  # per column unit, EW sparsity fraction

    def __post_init__(self) -> None:
        ref = np.ascontiguousarray(self.ew_reference, dtype=np.float64)
        if ref.ndim != 1:
            raise DimensionError("ew_reference must be 1-D (one entry per column unit)")
        if self.n1 < 0 or self.n2 < 0:
            raise ConfigError(f"n1/n2 must be >= 0, got {self.n1}/{self.n2}")
        if self.n1 + self.n2 > ref.size:
            raise ConfigError(f"n1+n2={self.n1 + self.n2} exceeds {ref.size} units")
        object.__setattr__(self, "ew_reference", ref)
        self.ew_reference.setflags(write=False)

    def forced_and_protected(self) -> tuple[np.ndarray, np.ndarray]:
        """(forced prune indices, never-prune indices), each sorted ascending.
        Top-n1 by EW sparsity descending, last-n2 ascending; ties by index."""
        ref = self.ew_reference
        desc = np.lexsort((np.arange(ref.size), -ref))
        asc = np.lexsort((np.arange(ref.size), ref))
        forced = np.sort(desc[: self.n1])
        protected = np.sort(asc[: self.n2])
        if np.intersect1d(forced, protected).size:
            raise ConfigError("top-n1 and last-n2 sets overlap")
        return forced, protected


@dataclass(frozen=True)
class TewConfig:
    """TW at sparsity alpha+delta with the delta fraction of highest-scored
    pruned elements restored as an element-wise overlay."""

    alpha: float
    delta: float

    def __post_init__(self) -> None:
        if not (0.0 <= self.delta < self.alpha + self.delta <= 1.0):
            raise ConfigError(
                f"need 0 <= delta < alpha+delta <= 1, got alpha={self.alpha} delta={self.delta}"
            )


def importance_scores(w: DenseMatrix, grad: DenseMatrix) -> ScoreMap:
    """First-order importance: score[i][j] = |grad[i][j] * w[i][j]|, the
    estimated loss change from zeroing that weight."""
    if w.shape != grad.shape:
        raise DimensionError(f"weight {w.shape} and gradient {grad.shape} differ")
    s = np.abs(w.array().astype(np.float64) * grad.array().astype(np.float64))
    return ScoreMap(s)


def magnitude_scores(w: DenseMatrix) -> ScoreMap:
    """Fallback scoring when no gradients are available: score = |w|."""
    return ScoreMap(np.abs(w.array().astype(np.float64)))


def tile_scores(scores: ScoreMap, units: Sequence[np.ndarray]) -> np.ndarray:
    """Collective score per unit: the mean of member element scores. Units
    are flat C-order index arrays into the score matrix."""
    flat = scores.scores.ravel()
    out = np.empty(len(units), dtype=np.float64)
    for i, u in enumerate(units):
        idx = np.asarray(u, dtype=np.int64)
        if idx.size == 0:
            raise DimensionError(f"unit {i} is empty")
        out[i] = flat[idx].mean()
    return out


def column_units(k: int, n: int) -> list[np.ndarray]:
    """Flat index sets for the N column units of a K x N matrix."""
    base = np.arange(k, dtype=np.int64) * n
    return [base + j for j in range(n)]


def row_units(col_groups: Sequence[np.ndarray], k: int, n: int) -> list[np.ndarray]:
    """Flat index sets for the (tile, k) row units given tile column groups,
    ordered tile-major then row — unit index = tile*K + k."""
    out = []
    for cols in col_groups:
        c = np.asarray(cols, dtype=np.int64)
        for r in range(k):
            out.append(r * n + c)
    return out


def percentile_threshold(unit_scores: np.ndarray, s_t: float) -> float:
    """The score of the first surviving unit when floor(s_t*len) units are
    pruned in (score, index) order: exactly that many score strictly below
    it once ties are broken by ascending unit index."""
    scores = np.asarray(unit_scores, dtype=np.float64)
    if scores.size == 0:
        raise DimensionError("unit score list is empty")
    if not 0.0 <= s_t < 1.0:
        raise ConfigError(f"s_t must be in [0, 1), got {s_t}")
    budget = exact_count(s_t, scores.size)
    order = np.argsort(scores, kind="stable")
    return float(scores[order[budget]])


def _select_units(
    scores: np.ndarray,
    budget: int,
    forced: np.ndarray,
    protected: np.ndarray,
    tie_matrix: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Pick `budget` unit indices to prune: all of `forced` first (ascending),
    the rest by ascending (score, index) skipping `protected`. With
    tie_matrix given (pooled selection), ties order by (score, unit index
    within matrix, matrix index). Forced indices beyond the budget are
    dropped — the exact-count contract wins."""
    n = scores.size
    forced = np.asarray(forced, dtype=np.int64)
    protected = np.asarray(protected, dtype=np.int64)
    if budget > n - protected.size:
        raise ConfigError(
            f"budget {budget} cannot be met with {protected.size} protected of {n} units"
        )
    take = forced[:budget]
    remaining = budget - take.size
    if remaining == 0:
        return np.sort(take)
    blocked = np.zeros(n, dtype=bool)
    blocked[take] = True
    blocked[protected] = True
    if tie_matrix is None:
        order = np.argsort(scores, kind="stable")
    else:
        unit_in_matrix = np.arange(n, dtype=np.int64) - np.concatenate(
            ([0], np.cumsum(np.bincount(tie_matrix)))
        )[tie_matrix]
        order = np.lexsort((tie_matrix, unit_in_matrix, scores))
    fill = order[~blocked[order]][:remaining]
    return np.sort(np.concatenate([take, fill]))


def apriori_tuning(unit_scores: np.ndarray, cfg: AprioriConfig) -> np.ndarray:
    """Adjusted column-unit scores: forced units get 0, protected units get
    the never-prune sentinel, everything else is unchanged."""
    scores = np.asarray(unit_scores, dtype=np.float64)
    if scores.size != cfg.ew_reference.size:
        raise DimensionError(
            f"{scores.size} unit scores vs {cfg.ew_reference.size} reference entries"
        )
    forced, protected = cfg.forced_and_protected()
    out = scores.copy()
    out[forced] = 0.0
    out[protected] = NEVER_PRUNE
    return out


def _pruned_columns_of(p: TilePattern) -> np.ndarray:
    return np.setdiff1d(np.arange(p.n, dtype=np.int64), p.surviving_columns.astype(np.int64))


def prune_stage(
    w: DenseMatrix,
    scores: ScoreMap,
    s_t: float,
    g: int,
    apriori: Optional[AprioriConfig] = None,
    prev: Optional[TilePattern] = None,
) -> TilePattern:
    """One pruning stage over a single matrix. With `prev` given (the
    pattern from the previous stage), previously pruned columns are pruned
    again first, and row units whose elements were all pruned before take
    priority, so patterns grow monotonically across stages."""
    if w.shape != scores.shape:
        raise DimensionError(f"weight {w.shape} and scores {scores.shape} differ")
    if not 0.0 <= s_t < 1.0:
        raise ConfigError(f"s_t must be in [0, 1), got {s_t}")
    k, n = w.rows, w.cols
    s = scores.scores

    col_budget = exact_count(s_t, n)
    forced_cols = np.empty(0, dtype=np.int64)
    prev_keep = None
    if prev is not None:
        if (prev.k, prev.n) != (k, n):
            raise DimensionError("previous pattern shape does not match")
        forced_cols = _pruned_columns_of(prev)
        if forced_cols.size > col_budget:
            raise ConfigError(
                f"s_t regression: {forced_cols.size} columns already pruned, budget {col_budget}"
            )
        prev_keep = prev.keep_mask()

    col_scores = s.mean(axis=0)
    protected = np.empty(0, dtype=np.int64)
    if apriori is not None:
        col_scores = apriori_tuning(col_scores, apriori)
        ap_forced, protected = apriori.forced_and_protected()
        if np.intersect1d(ap_forced, protected).size or np.intersect1d(forced_cols, protected).size:
            raise ConfigError("apriori protection conflicts with forced prunes")
        forced_cols = np.union1d(forced_cols, ap_forced)
        if forced_cols.size > col_budget:
            raise ConfigError(
                f"{forced_cols.size} forced column prunes exceed budget {col_budget}"
            )
    pruned_cols = _select_units(col_scores, col_budget, forced_cols, protected)

    keep_cols = np.setdiff1d(np.arange(n, dtype=np.int64), pruned_cols)
    col_groups = reorganize_columns([keep_cols], g)
    ntiles = len(col_groups)
    if ntiles == 0:
        return TilePattern(k, n, g, ())

    # Row phase: unit (t, r) has flat index t*K + r; score = mean over the
    # tile's surviving columns at row r.
    row_score = np.empty(ntiles * k, dtype=np.float64)
    for t, cols in enumerate(col_groups):
        row_score[t * k : (t + 1) * k] = s[:, cols].mean(axis=1)
    row_budget = exact_count(s_t, ntiles * k)
    forced_rows = np.empty(0, dtype=np.int64)
    if prev_keep is not None:
        dead = []
        for t, cols in enumerate(col_groups):
            fully_pruned = ~prev_keep[:, cols].any(axis=1)
            dead.append(np.flatnonzero(fully_pruned) + t * k)
        forced_rows = np.concatenate(dead) if dead else forced_rows
    pruned_rows = _select_units(row_score, row_budget, forced_rows, np.empty(0, np.int64))

    tiles = []
    pruned_row_set = np.zeros(ntiles * k, dtype=bool)
    pruned_row_set[pruned_rows] = True
    for t, cols in enumerate(col_groups):
        keep = ~pruned_row_set[t * k : (t + 1) * k]
        tiles.append(Tile(cols.astype(np.int32), keep))
    return TilePattern(k, n, g, tuple(tiles))


def global_rank(unit_scores: Sequence[np.ndarray]) -> np.ndarray:
    """Pool unit scores across matrices into one ranking. Returns an array of
    (matrix index, unit index) rows in ascending pooled order; ties break by
    unit index then matrix index, so identical matrices prune evenly."""
    if not unit_scores:
        raise DimensionError("need at least one matrix")
    mats = [np.asarray(u, dtype=np.float64) for u in unit_scores]
    pooled = np.concatenate(mats)
    mat_idx = np.concatenate([np.full(u.size, i, dtype=np.int64) for i, u in enumerate(mats)])
    unit_idx = np.concatenate([np.arange(u.size, dtype=np.int64) for u in mats])
    order = np.lexsort((mat_idx, unit_idx, pooled))
    return np.stack([mat_idx[order], unit_idx[order]], axis=1)


def _global_stage(
    weights: Sequence[DenseMatrix],
    score_maps: Sequence[ScoreMap],
    s_t: float,
    g: int,
    prevs: Optional[Sequence[Optional[TilePattern]]],
    aprioris: Optional[Sequence[Optional[AprioriConfig]]],
) -> list[TilePattern]:
    """One stage under a single pooled threshold across all matrices."""
    nmat = len(weights)
    dims = [(w.rows, w.cols) for w in weights]
    col_scores = []
    offsets = np.zeros(nmat + 1, dtype=np.int64)
    for i, sm in enumerate(score_maps):
        cs = sm.scores.mean(axis=0)
        if aprioris is not None and aprioris[i] is not None:
            cs = apriori_tuning(cs, aprioris[i])
        col_scores.append(cs)
        offsets[i + 1] = offsets[i] + cs.size
    pooled = np.concatenate(col_scores)
    mat_of = np.concatenate([np.full(cs.size, i, dtype=np.int64) for i, cs in enumerate(col_scores)])

    forced, protected = [], []
    prev_keeps: list[Optional[np.ndarray]] = [None] * nmat
    for i in range(nmat):
        if prevs is not None and prevs[i] is not None:
            forced.append(_pruned_columns_of(prevs[i]) + offsets[i])
            prev_keeps[i] = prevs[i].keep_mask()
        if aprioris is not None and aprioris[i] is not None:
            f, pr = aprioris[i].forced_and_protected()
            forced.append(f + offsets[i])
            protected.append(pr + offsets[i])
    forced_arr = np.union1d(
        np.concatenate(forced) if forced else np.empty(0, np.int64), np.empty(0, np.int64)
    )
    protected_arr = np.concatenate(protected) if protected else np.empty(0, np.int64)
    if np.intersect1d(forced_arr, protected_arr).size:
        raise ConfigError("apriori protection conflicts with forced prunes")
    col_budget = exact_count(s_t, pooled.size)
    if forced_arr.size > col_budget:
        raise ConfigError(f"{forced_arr.size} forced column prunes exceed budget {col_budget}")
    pruned_pooled = _select_units(pooled, col_budget, forced_arr, protected_arr, tie_matrix=mat_of)

    col_groups_per_mat = []
    for i, (k, n) in enumerate(dims):
        local = pruned_pooled[(pruned_pooled >= offsets[i]) & (pruned_pooled < offsets[i + 1])] - offsets[i]
        keep_cols = np.setdiff1d(np.arange(n, dtype=np.int64), local)
        col_groups_per_mat.append(reorganize_columns([keep_cols], g))

    row_scores = []
    row_offsets = np.zeros(nmat + 1, dtype=np.int64)
    forced_rows = []
    for i, (k, n) in enumerate(dims):
        groups = col_groups_per_mat[i]
        rs = np.empty(len(groups) * k, dtype=np.float64)
        for t, cols in enumerate(groups):
            rs[t * k : (t + 1) * k] = score_maps[i].scores[:, cols].mean(axis=1)
        row_scores.append(rs)
        row_offsets[i + 1] = row_offsets[i] + rs.size
        if prev_keeps[i] is not None:
            for t, cols in enumerate(groups):
                dead = np.flatnonzero(~prev_keeps[i][:, cols].any(axis=1))
                forced_rows.append(dead + t * k + row_offsets[i])
    pooled_rows = np.concatenate(row_scores) if row_scores else np.empty(0, np.float64)
    mat_of_rows = np.concatenate(
        [np.full(rs.size, i, dtype=np.int64) for i, rs in enumerate(row_scores)]
    )
    row_budget = exact_count(s_t, pooled_rows.size)
    forced_rows_arr = np.sort(np.concatenate(forced_rows)) if forced_rows else np.empty(0, np.int64)
    pruned_rows = _select_units(
        pooled_rows, row_budget, forced_rows_arr, np.empty(0, np.int64), tie_matrix=mat_of_rows
    )

    patterns = []
    pruned_row_set = np.zeros(pooled_rows.size, dtype=bool)
    pruned_row_set[pruned_rows] = True
    for i, (k, n) in enumerate(dims):
        tiles = []
        for t, cols in enumerate(col_groups_per_mat[i]):
            base = row_offsets[i] + t * k
            keep = ~pruned_row_set[base : base + k]
            tiles.append(Tile(cols.astype(np.int32), keep))
        patterns.append(TilePattern(k, n, g, tuple(tiles)))
    return patterns


FineTuneCallback = Callable[
    [list[TilePattern]], tuple[list[DenseMatrix], Optional[list[DenseMatrix]]]
]


def multi_stage_prune(
    weights: Sequence[DenseMatrix],
    schedule: PruneSchedule,
    g: int,
    grads: Optional[Sequence[DenseMatrix]] = None,
    fine_tune: Optional[FineTuneCallback] = None,
    apriori: Optional[Sequence[Optional[AprioriConfig]]] = None,
    mode: str = "per_layer",
) -> list[TilePattern]:
    """Run the staged pruning loop over a list of weight matrices.

    Scores come from |w * grad| (or |w| when grads is None). After each
    stage the fine_tune callback, if given, returns refreshed weights and
    gradients for the next stage's scores; otherwise pruned entries are
    zeroed in place so their scores vanish. Patterns only ever grow.
    """
    if mode not in ("per_layer", "global"):
        raise ConfigError(f"mode must be per_layer or global, got {mode}")
    if apriori is not None and len(apriori) != len(weights):
        raise ConfigError("need one apriori config (or None) per matrix")
    ws = list(weights)
    gs = list(grads) if grads is not None else None

    def make_scores() -> list[ScoreMap]:
        if gs is None:
            return [magnitude_scores(w) for w in ws]
        return [importance_scores(w, gr) for w, gr in zip(ws, gs)]

    patterns: Optional[list[TilePattern]] = None
    for s_t in schedule.stage_targets:
        score_maps = make_scores()
        prevs = patterns if patterns is not None else [None] * len(ws)
        if mode == "per_layer":
            patterns = [
                prune_stage(
                    ws[i],
                    score_maps[i],
                    s_t,
                    g,
                    apriori=apriori[i] if apriori is not None else None,
                    prev=prevs[i],
                )
                for i in range(len(ws))
            ]
        else:
            patterns = _global_stage(ws, score_maps, s_t, g, prevs, apriori)
        if fine_tune is not None:
            new_w, new_g = fine_tune(patterns)
            if len(new_w) != len(ws) or (new_g is not None and len(new_g) != len(ws)):
                raise ConfigError("fine_tune callback returned wrong number of matrices")
            ws = list(new_w)
            gs = list(new_g) if new_g is not None else None
        else:
            masked = []
            for w, p in zip(ws, patterns):
                arr = np.where(p.keep_mask(), w.array(), np.float32(0.0)).astype(np.float32)
                masked.append(DenseMatrix.from_array(arr))
            ws = masked
    assert patterns is not None
    return patterns


def aggregate_unit_sparsity(patterns: Sequence[TilePattern]) -> float:
    """Pooled pruned-unit fraction over both phases and all matrices."""
    pruned = total = 0
    for p in patterns:
        pc, tc, pr, tr = p.unit_counts()
        pruned += pc + pr
        total += tc + tr
    return pruned / total if total else 0.0


def build_apriori(
    scores: ScoreMap, target_sparsity: float, n1: int, n2: int
) -> AprioriConfig:
    """Build the EW reference for one matrix: run EW pruning at the target
    sparsity on the element scores, then record each column's pruned
    fraction (computed once, at the final target)."""
    from .pattern import generate_comparator_mask

    keep = generate_comparator_mask("EW", scores.scores, target_sparsity)
    ew_col_sparsity = 1.0 - keep.mean(axis=0)
    return AprioriConfig(n1=n1, n2=n2, ew_reference=ew_col_sparsity)


def tew_overlay(
    w: DenseMatrix,
    scores: ScoreMap,
    pattern: TilePattern,
    cfg: TewConfig,
    tol: float = 0.05,
) -> tuple[TilePattern, CscMatrix]:
    """Restore the floor(delta*K*N) highest-scored elements pruned by the
    pattern into a CSC overlay, keeping their original values. The pattern
    itself is unchanged; combined effective sparsity is alpha."""
    if w.shape != scores.shape:
        raise DimensionError(f"weight {w.shape} and scores {scores.shape} differ")
    if (pattern.k, pattern.n) != w.shape:
        raise DimensionError("pattern does not match weight matrix")
    stats = pattern_stats(pattern, m=1)
    if abs(stats.sparsity - (cfg.alpha + cfg.delta)) > tol:
        raise ConfigError(
            f"pattern sparsity {stats.sparsity:.4f} is not alpha+delta="
            f"{cfg.alpha + cfg.delta:.4f} within {tol}"
        )
    restore_count = exact_count(cfg.delta, pattern.k * pattern.n)
    keep = pattern.keep_mask()
    pruned_flat = np.flatnonzero(~keep.ravel())
    if restore_count > pruned_flat.size:
        raise ConfigError(
            f"delta asks to restore {restore_count} elements but only "
            f"{pruned_flat.size} are pruned"
        )
    s = scores.scores.ravel()[pruned_flat]
    order = np.lexsort((pruned_flat, -s))  # highest score first, ties by index
    chosen = pruned_flat[order[:restore_count]]
    restore_mask = np.zeros(pattern.k * pattern.n, dtype=bool)
    restore_mask[chosen] = True
    csc = to_csc(w, restore_mask.reshape(pattern.k, pattern.n))
    return pattern, csc
