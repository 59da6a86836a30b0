"""Command line entry point: gen, train, worker, eval, bench, speedup."""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from dataclasses import fields
from pathlib import Path

from . import checkpoint
from .bench import bench, format_table, read_times_csv, speedup_table, write_bench_csv, write_delta_csv, write_speedup_csv
from .collective import Layout, LinkCostModel
from .datagen import Q1_RANGE, Q2_RANGE, build_dataset, normalize, read_dataset, write_dataset
from .launch import WorkerFailure, launch, run_worker
from .metrics import DEFAULT_BINS, scatter_export
from .training import DEFAULT_EVAL_STEPS, TrainConfig, checkpoint_predictor, evaluate

log = logging.getLogger("cfdsurrogate")

# roughly the measured single-core cost at desk dimensions
DEFAULT_COMPUTE_PER_SAMPLE = 4e-3

EVAL_COLUMNS = ["group", "timestep", "pearson", "spearman", "rmse", "hist_r2", "n"]


def read_config(path) -> dict[str, str]:
    """Flat ``key=value`` lines; ``#`` starts a comment; blank lines ignored."""
    out = {}
    text = Path(path).read_text(encoding="utf-8")
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key=value")
        key, value = line.split("=", 1)
        out[key.strip().replace("-", "_")] = value.strip()
    return out


def _merge(args, keys) -> dict:
    """Config-file values overridden by any flag given on the command line."""
    values = read_config(args.config) if getattr(args, "config", None) else {}
    for key in keys:
        flag = getattr(args, key, None)
        if flag is not None:
            values[key] = flag
    return values


def _range(text: str) -> tuple[float, float]:
    lo, _, hi = str(text).partition(":")
    try:
        pair = float(lo), float(hi)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a:b, got {text!r}") from None
    if not pair[0] <= pair[1]:
        raise argparse.ArgumentTypeError(f"empty range {text!r}")
    return pair


def _int_list(text: str) -> list[int]:
    return [int(v) for v in str(text).split(",") if v.strip()]


_TRAIN_KEYS = [f.name for f in fields(TrainConfig)]
_BOOL_KEYS = {"global_batch", "shuffle"}


def _add_train_flags(p):
    p.add_argument("--config", help="key=value config file; flags override it")
    for f in fields(TrainConfig):
        flag = "--" + f.name.replace("_", "-")
        if f.name in _BOOL_KEYS:
            p.add_argument(flag, dest=f.name, default=None, action=argparse.BooleanOptionalAction)
        else:
            p.add_argument(flag, dest=f.name, default=None)


def train_config(args) -> TrainConfig:
    values = _merge(args, _TRAIN_KEYS)
    unknown = set(values) - set(_TRAIN_KEYS)
    if unknown:
        raise ValueError(f"unknown config key(s): {sorted(unknown)}")
    return TrainConfig.from_mapping({k: v if not isinstance(v, bool) else str(v) for k, v in values.items()})


# ---------------------------------------------------------------- subcommands

def cmd_gen(args) -> int:
    keys = ["cases", "timesteps", "cells", "seed", "q1", "q2", "out"]
    v = _merge(args, keys)
    if "out" not in v:
        raise ValueError("--out is required")
    ds = build_dataset(int(v.get("cases", 16)), int(v.get("cells", 256)), int(v.get("timesteps", 64)),
                       _range(v.get("q1", f"{Q1_RANGE[0]}:{Q1_RANGE[1]}")),
                       _range(v.get("q2", f"{Q2_RANGE[0]}:{Q2_RANGE[1]}")), seed=int(v.get("seed", 0)))
    write_dataset(ds, v["out"])
    n, t, c, k = ds.shape
    print(f"wrote {v['out']}: {n} cases x {t} timesteps x {c} cells x {k} components")
    return 0


def cmd_train(args) -> int:
    config = train_config(args)
    if not config.dataset:
        raise ValueError("dataset is required")
    _, history = launch(config)
    print(f"trained {history.epochs} epochs ({history.stop_reason}); "
          f"train {history.train_loss[-1]:.5f} val {history.val_loss[-1]:.5f} -> {config.checkpoint}")
    return 0


def cmd_worker(args) -> int:
    config = train_config(args)
    run_worker(config, args.rank, args.world, args.address)
    return 0


def cmd_eval(args) -> int:
    v = _merge(args, ["checkpoint", "dataset", "timesteps", "bins", "out", "scatter_dir"])
    dims, params, _ = checkpoint.load(v["checkpoint"])
    ds = read_dataset(v["dataset"])
    n, t, c, k = ds.shape
    if dims.flat_dim != c * k:
        raise ValueError(f"checkpoint expects {dims.flat_dim} features per timestep, dataset has {c * k}")
    nds, _ = normalize(ds)
    steps = _int_list(v["timesteps"]) if "timesteps" in v else list(DEFAULT_EVAL_STEPS)
    rows, pairs = evaluate(checkpoint_predictor(params, dims.horizon), nds, steps, dims.window,
                           int(v.get("bins", DEFAULT_BINS)))
    out = v.get("out", "eval.csv")
    with open(out, "w", newline="") as fh:
        w = csv.DictWriter(fh, EVAL_COLUMNS, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    if v.get("scatter_dir"):
        d = Path(v["scatter_dir"])
        d.mkdir(parents=True, exist_ok=True)
        for label, (cfd, ai) in pairs.items():
            scatter_export(cfd, ai, d / f"scatter_{label}.csv")
    for r in rows:
        print(f"{r['group']:>10}  pearson {r['pearson']:.4f}  spearman {r['spearman']:.4f}  "
              f"rmse {r['rmse']:.4g}  hist_r2 {r['hist_r2']:.2f}%")
    return 0


def cmd_bench(args) -> int:
    config = train_config(args)
    layouts = [Layout.parse(s) for s in args.layouts.split(",")]
    model = LinkCostModel(args.intra_latency, args.intra_per_byte, args.inter_latency, args.inter_per_byte,
                          args.compute_per_sample)
    table = bench(layouts, config, args.mode, model, runs=args.runs, samples=args.samples)
    write_bench_csv(table, args.out)
    if args.deltas and table.deltas:
        write_delta_csv(table.deltas, args.deltas)
    print(format_table(table))
    return 0


def cmd_speedup(args) -> int:
    times = read_times_csv(args.times)
    baseline = args.baseline or times[0][0]
    table = speedup_table(times, baseline)
    if args.out:
        write_speedup_csv(table, args.out)
    print(format_table(table))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cfdsurrogate", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="write a synthetic dataset")
    p.add_argument("--config")
    p.add_argument("--cases", type=int)
    p.add_argument("--timesteps", type=int)
    p.add_argument("--cells", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--q1", help="lo:hi")
    p.add_argument("--q2", help="lo:hi")
    p.add_argument("--out")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train serially or over localhost workers")
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("worker", help="internal: one training process of a multi-worker run")
    _add_train_flags(p)
    p.add_argument("--rank", type=int, required=True)
    p.add_argument("--world", type=int, required=True)
    p.add_argument("--address", required=True)
    p.set_defaults(func=cmd_worker)

    p = sub.add_parser("eval", help="metric rows per timestep group")
    p.add_argument("--config")
    p.add_argument("--checkpoint")
    p.add_argument("--dataset")
    p.add_argument("--timesteps", help="comma list; negative counts from the end")
    p.add_argument("--bins", type=int)
    p.add_argument("--out")
    p.add_argument("--scatter-dir", dest="scatter_dir")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="per-layout epoch time and speedups")
    _add_train_flags(p)
    p.add_argument("--layouts", default="1x1,1x2,2x1,1x4,4x1,2x2")
    p.add_argument("--mode", choices=["measured", "simulated"], default="simulated")
    p.add_argument("--runs", type=int, default=3)
    p.add_argument("--samples", type=int, help="samples per epoch for simulated mode")
    d = LinkCostModel()
    p.add_argument("--intra-latency", type=float, default=d.intra_latency)
    p.add_argument("--intra-per-byte", type=float, default=d.intra_per_byte)
    p.add_argument("--inter-latency", type=float, default=d.inter_latency)
    p.add_argument("--inter-per-byte", type=float, default=d.inter_per_byte)
    p.add_argument("--compute-per-sample", type=float, default=DEFAULT_COMPUTE_PER_SAMPLE,
                   help="seconds of forward+backward per sample")
    p.add_argument("--out", default="bench.csv")
    p.add_argument("--deltas", default="", help="also write the layout-delta matrix here")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("speedup", help="speedups from a label,seconds CSV")
    p.add_argument("--times", required=True)
    p.add_argument("--baseline")
    p.add_argument("--out")
    p.set_defaults(func=cmd_speedup)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except WorkerFailure as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (ValueError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
