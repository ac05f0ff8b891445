"""Command-line front end: train the mini model, prune checkpoints, verify
sparse execution against the dense oracle, benchmark, and emit analysis CSVs.

Exit codes: 0 success, 1 verification failure, 2 usage/config error,
3 I/O or file-format error. Options may come from a key=value config file
(--config); command-line flags override it.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
from dataclasses import dataclass

import numpy as np

from .engine import flop_report, gemm_tw, time_median
from .matrix import DenseMatrix, DimensionError, FormatError, gemm_dense, write_csc
from .pattern import (
    TilePattern,
    compact,
    dense_pattern,
    exact_count,
    pattern_stats,
    random_uniform_pattern,
    read_pattern,
    write_pattern,
    zero_capture_analysis,
    zero_fill,
)
from .pruning import (
    AprioriConfig,
    ConfigError,
    PruneSchedule,
    TewConfig,
    aggregate_unit_sparsity,
    build_apriori,
    importance_scores,
    multi_stage_prune,
    tew_overlay,
)
from . import trainer

EXIT_OK = 0
EXIT_VERIFY = 1
EXIT_CONFIG = 2
EXIT_IO = 3

BENCH_HEADER = [
    "m", "k", "n", "g", "sparsity", "workers", "repeats",
    "dense_ms_median", "dense_ms_mean", "dense_ms_std",
    "tw_ms_median", "tw_ms_mean", "tw_ms_std",
    "flops", "dense_flops", "speedup", "max_abs_diff",
]
PRUNE_HEADER = ["layer", "rows", "cols", "tiles", "tiles_dropped", "element_sparsity"]
LAYER_HEADER = ["layer", "rows", "cols", "sparsity"]
CDF_HEADER = ["layer", "unit_h", "unit_w", "zeros", "cum_fraction"]


@dataclass(frozen=True)
class BenchReport:
    """One benchmark configuration's measurements."""

    m: int
    k: int
    n: int
    g: int
    sparsity: float
    workers: int
    repeats: int
    dense_ms: tuple[float, float, float]  # median, mean, stddev
    tw_ms: tuple[float, float, float]
    flops: int
    dense_flops: int
    speedup: float  # dense median / tw median
    max_abs_diff: float

    def row(self) -> list:
        return [
            self.m, self.k, self.n, self.g, self.sparsity, self.workers, self.repeats,
            f"{self.dense_ms[0]:.6f}", f"{self.dense_ms[1]:.6f}", f"{self.dense_ms[2]:.6f}",
            f"{self.tw_ms[0]:.6f}", f"{self.tw_ms[1]:.6f}", f"{self.tw_ms[2]:.6f}",
            self.flops, self.dense_flops, f"{self.speedup:.4f}", f"{self.max_abs_diff:.8g}",
        ]


def _load_config(path: str) -> dict[str, str]:
    cfg: dict[str, str] = {}
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
            key, value = line.split("=", 1)
            cfg[key.strip().replace("-", "_")] = value.strip()
    return cfg


def _floats_csv(s: str) -> tuple[float, ...]:
    return tuple(float(x) for x in s.split(",") if x.strip())


def _ints_csv(s: str) -> tuple[int, ...]:
    return tuple(int(x) for x in s.split(",") if x.strip())


def _shapes(s: str) -> tuple[tuple[int, int, int], ...]:
    out = []
    for part in s.split(";"):
        dims = _ints_csv(part)
        if len(dims) != 3:
            raise ValueError(f"shape needs m,k,n, got {part!r}")
        out.append(dims)
    return tuple(out)


def _unit_shapes(s: str) -> tuple[tuple[int, int], ...]:
    out = []
    for part in s.split(","):
        h, _, w = part.strip().partition("x")
        out.append((int(h), int(w)))
    return tuple(out)


# Per-command option table: dest -> (cast for config strings, default).
# None default means the option is required (by flag or config file).
_OPTION_CASTS: dict[str, dict] = {
    "train": {
        "out": (str, None),
        "epochs": (int, 25),
        "lr": (float, 0.1),
        "seed": (int, 42),
        "margin": (float, 5.0),
    },
    "prune": {
        "model": (str, None),
        "out": (str, None),
        "sparsity": (float, None),
        "granularity": (int, 128),
        "schedule": (_floats_csv, ()),
        "mode": (str, "per_layer"),
        "ft_epochs": (int, 0),
        "lr": (float, 0.05),
        "seed": (int, 42),
        "delta": (float, 0.0),
        "apriori_n1": (int, 0),
        "apriori_n2": (int, 0),
    },
    "verify": {
        "model": (str, None),
        "patterns": (str, None),
        "probes": (int, 20),
        "seed": (int, 42),
        "workers": (int, 1),
    },
    "bench": {
        "shapes": (_shapes, ((256, 768, 3072),)),
        "sparsities": (_floats_csv, (0.0, 0.25, 0.5, 0.75, 0.9)),
        "granularity": (_ints_csv, (128,)),
        "workers": (int, 1),
        "repeats": (int, 5),
        "seed": (int, 42),
        "out": (str, None),
    },
    "analyze": {
        "model": (str, None),
        "sparsity": (float, 0.75),
        "units": (_unit_shapes, ((64, 1), (8, 8))),
        "granularity": (int, 64),
        "out": (str, None),
    },
}


def _resolve(args: argparse.Namespace, cfg: dict[str, str]) -> argparse.Namespace:
    """Fill unset options from the config file, then from defaults. Flags win
    over config; unknown config keys are an error."""
    table = _OPTION_CASTS[args.command]
    for key in cfg:
        if key not in table:
            raise ConfigError(f"unknown config key {key!r} for command {args.command}")
    for dest, (cast, default) in table.items():
        if getattr(args, dest, None) is not None:
            continue
        if dest in cfg:
            try:
                setattr(args, dest, cast(cfg[dest]))
            except ValueError as e:
                raise ConfigError(f"config key {dest}: {e}") from e
        elif default is not None:
            setattr(args, dest, default)
        else:
            raise ConfigError(f"missing required option --{dest.replace('_', '-')}")
    return args


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tilewise",
        description="Tile-sparse pruning, execution, and benchmarking.",
    )
    parser.add_argument("--config", help="key=value options file; flags override it")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train the reference MLP and write a checkpoint")
    p.add_argument("--out", help="checkpoint path to write")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--margin", type=float, help="class separation of the synthetic data")

    p = sub.add_parser("prune", help="staged tile pruning of a checkpoint")
    p.add_argument("--model", help="input checkpoint")
    p.add_argument("--out", help="output directory")
    p.add_argument("-s", "--sparsity", type=float, help="per-phase unit sparsity target")
    p.add_argument("-g", "--granularity", type=int, help="tile width G")
    p.add_argument("--schedule", type=_floats_csv, help="stage targets, e.g. 0.2,0.5,0.75")
    p.add_argument("--mode", choices=("per_layer", "global"))
    p.add_argument("--ft-epochs", type=int, dest="ft_epochs", help="fine-tune epochs per stage")
    p.add_argument("--lr", type=float, help="fine-tune learning rate")
    p.add_argument("--seed", type=int)
    p.add_argument("--delta", type=float, help="element overlay fraction (TEW)")
    p.add_argument("--apriori-n1", type=int, dest="apriori_n1")
    p.add_argument("--apriori-n2", type=int, dest="apriori_n2")

    p = sub.add_parser("verify", help="random-probe oracle equivalence sweep")
    p.add_argument("--model", help="checkpoint to verify")
    p.add_argument("--patterns", help="directory holding pattern_<i>.twpt files")
    p.add_argument("--probes", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--workers", type=int)

    p = sub.add_parser("bench", help="dense vs tile-sparse timing sweep")
    p.add_argument("--shapes", type=_shapes, help="semicolon-separated m,k,n triples")
    p.add_argument("--sparsities", type=_floats_csv)
    p.add_argument("-g", "--granularity", type=_ints_csv, help="tile widths to sweep")
    p.add_argument("--workers", type=int)
    p.add_argument("--repeats", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="CSV output path")

    p = sub.add_parser("analyze", help="zero-capture CDF and per-layer sparsity reports")
    p.add_argument("--model", help="checkpoint to analyze")
    p.add_argument("-s", "--sparsity", type=float, help="EW reference sparsity")
    p.add_argument("--units", type=_unit_shapes, help="unit shapes, e.g. 64x1,8x8")
    p.add_argument("-g", "--granularity", type=int)
    p.add_argument("--out", help="output directory")
    return parser


def cmd_train(ns: argparse.Namespace) -> int:
    data = trainer.SyntheticDataset.generate(seed=ns.seed, margin=ns.margin)
    model = trainer.MlpModel.init(seed=ns.seed)
    model, losses = trainer.train(model, data, epochs=ns.epochs, lr=ns.lr, seed=ns.seed)
    acc = trainer.evaluate(model, data)
    trainer.save_model(model, ns.out)
    print(f"epochs {len(losses)}  first loss {losses[0]:.4f}  final loss {losses[-1]:.4f}")
    print(f"test accuracy {acc:.4f}")
    print(f"checkpoint {ns.out}")
    return EXIT_OK


def _pattern_path(outdir: str, i: int) -> str:
    return os.path.join(outdir, f"pattern_{i}.twpt")


def cmd_prune(ns: argparse.Namespace) -> int:
    model = trainer.load_model(ns.model)
    os.makedirs(ns.out, exist_ok=True)

    if ns.sparsity == 0.0:
        # nothing to prune: dense patterns, checkpoint passes through
        patterns = [dense_pattern(w.shape[0], w.shape[1], ns.granularity) for w in model.weights]
        _write_prune_outputs(model, patterns, ns.out)
        print("sparsity 0: dense patterns written, checkpoint unchanged")
        return EXIT_OK

    data = trainer.SyntheticDataset.generate(seed=ns.seed)
    batch = (data.x_train[:512], data.y_train[:512])
    weights = trainer.weight_matrices(model)
    grads = trainer.grad_matrices(trainer.grad_snapshot(model, batch))
    orig_weights = weights

    stages = ns.schedule if ns.schedule else None
    if stages:
        schedule = PruneSchedule(ns.sparsity, stages, ns.ft_epochs)
    else:
        schedule = PruneSchedule.gradually(ns.sparsity, fine_tune_epochs_per_stage=ns.ft_epochs)

    apriori = None
    if ns.apriori_n1 or ns.apriori_n2:
        apriori = [
            build_apriori(importance_scores(w, g), ns.sparsity, ns.apriori_n1, ns.apriori_n2)
            for w, g in zip(weights, grads)
        ]

    def ft_callback(patterns: list[TilePattern]):
        trainer.fine_tune_masked(
            model, data, patterns, epochs=ns.ft_epochs, lr=ns.lr, seed=ns.seed
        )
        snap = trainer.grad_snapshot(model, batch)
        return trainer.weight_matrices(model), trainer.grad_matrices(snap)

    fine_tune = ft_callback if ns.ft_epochs > 0 else None

    patterns = multi_stage_prune(
        weights, schedule, ns.granularity, grads=grads, fine_tune=fine_tune,
        apriori=apriori, mode=ns.mode,
    )

    for w, p in zip(model.weights, patterns):
        w *= p.keep_mask()
    _write_prune_outputs(model, patterns, ns.out)

    if ns.delta > 0.0:
        scores = [importance_scores(w, g) for w, g in zip(orig_weights, grads)]
        for i, (w, sm, p) in enumerate(zip(orig_weights, scores, patterns)):
            e = pattern_stats(p, m=1).sparsity
            cfg = TewConfig(alpha=e - ns.delta, delta=ns.delta)
            _, overlay = tew_overlay(w, sm, p, cfg)
            write_csc(overlay, os.path.join(ns.out, f"overlay_{i}.twcs"))
        print(f"wrote {len(patterns)} element overlays at delta={ns.delta}")

    agg = aggregate_unit_sparsity(patterns)
    for i, p in enumerate(patterns):
        st = pattern_stats(p, m=1)
        print(f"layer {i}: {p.k}x{p.n} tiles {len(p.tiles)} element sparsity {st.sparsity:.4f}")
    print(f"aggregate unit sparsity {agg:.4f}")
    return EXIT_OK


def _write_prune_outputs(model, patterns: list[TilePattern], outdir: str) -> None:
    for i, p in enumerate(patterns):
        write_pattern(p, _pattern_path(outdir, i))
    trainer.save_model(model, os.path.join(outdir, "model_pruned.twml"))
    with open(os.path.join(outdir, "summary.csv"), "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(PRUNE_HEADER)
        for i, p in enumerate(patterns):
            st = pattern_stats(p, m=1)
            w.writerow([i, p.k, p.n, len(p.tiles), st.tiles_dropped, f"{st.sparsity:.6f}"])


def cmd_verify(ns: argparse.Namespace) -> int:
    model = trainer.load_model(ns.model)
    patterns = []
    for i in range(len(model.weights)):
        path = _pattern_path(ns.patterns, i)
        if not os.path.exists(path):
            raise FileNotFoundError(f"missing pattern file {path}")
        patterns.append(read_pattern(path))
    rng = np.random.default_rng(ns.seed)
    worst = 0.0
    m = 32
    for w64, p in zip(model.weights, patterns):
        if (p.k, p.n) != w64.shape:
            raise DimensionError(f"pattern ({p.k},{p.n}) does not match weight {w64.shape}")
        w = DenseMatrix.from_array(w64.astype(np.float32))
        tiles = compact(w, p)
        oracle_w = zero_fill(w, p)
        tol = 1e-4 * p.k
        for _ in range(ns.probes):
            a = DenseMatrix.from_array(
                rng.standard_normal((m, p.k)).astype(np.float32)
            )
            got = gemm_tw(a, tiles, workers=ns.workers).array()
            want = gemm_dense(a, oracle_w).array()
            diff = float(np.max(np.abs(got - want))) if got.size else 0.0
            worst = max(worst, diff)
            if diff > tol:
                print(f"FAIL layer {p.k}x{p.n}: diff {diff:.3e} > tol {tol:.3e}")
                print(f"worst diff {worst:.3e}")
                return EXIT_VERIFY
    print(f"PASS {ns.probes} probes x {len(patterns)} layers, worst diff {worst:.3e}")
    return EXIT_OK


def cmd_bench(ns: argparse.Namespace) -> int:
    if ns.repeats < 5:
        raise ConfigError(f"repeats must be >= 5, got {ns.repeats}")
    reports = []
    for m, k, n in ns.shapes:
        for g in ns.granularity:
            for s in ns.sparsities:
                reports.append(_bench_one(m, k, n, g, s, ns.workers, ns.repeats, ns.seed))
    with open(ns.out, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(BENCH_HEADER)
        for r in reports:
            w.writerow(r.row())
    for r in reports:
        print(
            f"m={r.m} k={r.k} n={r.n} g={r.g} s={r.sparsity} "
            f"dense {r.dense_ms[0]:.3f}ms tw {r.tw_ms[0]:.3f}ms "
            f"speedup {r.speedup:.3f} diff {r.max_abs_diff:.3g}"
        )
    print(f"csv {ns.out}")
    return EXIT_OK


def _bench_one(
    m: int, k: int, n: int, g: int, s: float, workers: int, repeats: int, seed: int
) -> BenchReport:
    rng = np.random.default_rng(seed)
    a = DenseMatrix.from_array(rng.standard_normal((m, k)).astype(np.float32))
    b = DenseMatrix.from_array(rng.standard_normal((k, n)).astype(np.float32))
    pattern = random_uniform_pattern(k, n, g, s, seed)
    tiles = compact(b, pattern)

    oracle = gemm_dense(a, zero_fill(b, pattern)).array()
    got = gemm_tw(a, tiles, workers=workers).array()
    diff = float(np.max(np.abs(got - oracle)))

    dense_ms = tuple(x * 1e3 for x in time_median(lambda: gemm_dense(a, b), repeats))
    tw_ms = tuple(x * 1e3 for x in time_median(lambda: gemm_tw(a, tiles, workers=workers), repeats))
    rep = flop_report(tiles, m, wall_time=tw_ms[0] * 1e-3)
    return BenchReport(
        m=m, k=k, n=n, g=g, sparsity=s, workers=workers, repeats=repeats,
        dense_ms=dense_ms, tw_ms=tw_ms, flops=rep.flops, dense_flops=rep.dense_flops,
        speedup=dense_ms[0] / tw_ms[0], max_abs_diff=diff,
    )


def cmd_analyze(ns: argparse.Namespace) -> int:
    model = trainer.load_model(ns.model)
    os.makedirs(ns.out, exist_ok=True)

    # one EW threshold pooled over every layer, so per-layer sparsity spreads
    flats = [np.abs(w).ravel() for w in model.weights]
    pooled = np.concatenate(flats)
    count = exact_count(ns.sparsity, pooled.size)
    order = np.argsort(pooled, kind="stable")
    pruned = np.zeros(pooled.size, dtype=bool)
    pruned[order[:count]] = True

    offsets = np.cumsum([0] + [f.size for f in flats])
    layer_masks = []
    with open(os.path.join(ns.out, "layer_sparsity.csv"), "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(LAYER_HEADER)
        for i, wt in enumerate(model.weights):
            flat_pruned = pruned[offsets[i] : offsets[i + 1]]
            keep = ~flat_pruned.reshape(wt.shape)
            layer_masks.append(keep)
            w.writerow([i, wt.shape[0], wt.shape[1], f"{flat_pruned.mean():.6f}"])
            print(f"layer {i}: {wt.shape[0]}x{wt.shape[1]} EW sparsity {flat_pruned.mean():.4f}")

    with open(os.path.join(ns.out, "zero_capture.csv"), "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(CDF_HEADER)
        for i, keep in enumerate(layer_masks):
            cdfs = zero_capture_analysis(keep, ns.units)
            for (h, wd), cdf in cdfs.items():
                for zeros, frac in enumerate(cdf):
                    w.writerow([i, h, wd, zeros, f"{frac:.6f}"])
    print(f"csv {os.path.join(ns.out, 'layer_sparsity.csv')}")
    print(f"csv {os.path.join(ns.out, 'zero_capture.csv')}")
    return EXIT_OK


_COMMANDS = {
    "train": cmd_train,
    "prune": cmd_prune,
    "verify": cmd_verify,
    "bench": cmd_bench,
    "analyze": cmd_analyze,
}


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = _load_config(args.config) if args.config else {}
        ns = _resolve(args, cfg)
        return _COMMANDS[ns.command](ns)
    except (ConfigError, DimensionError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except FormatError as e:
        print(f"format error: {e}", file=sys.stderr)
        return EXIT_IO
    except OSError as e:
        print(f"io error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
