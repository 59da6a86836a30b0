"""Scalability benchmark: per-layout epoch time with speedup and layout-delta tables."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .batching import samples_per_case
from .collective import Layout, LinkCostModel, simulate_allreduce_time
from .datagen import read_header, split_counts
from .model import ModelDims
from .reprosum import slices_for
from .tensor import resolve_dtype

BENCH_COLUMNS = ["label", "nodes", "slots", "processes", "mode", "seconds", "seconds_min", "seconds_max",
                 "parallel_speedup", "incremental_speedup"]
SPEEDUP_COLUMNS = ["label", "seconds", "parallel_speedup", "incremental_speedup"]


@dataclass
class BenchRow:
    label: str
    seconds: float
    parallel_speedup: float = 1.0
    incremental_speedup: float = math.nan
    seconds_min: float = math.nan
    seconds_max: float = math.nan
    layout: Layout | None = None
    mode: str = ""


@dataclass
class BenchTable:
    rows: list[BenchRow]
    baseline: str
    deltas: dict[Layout, float] = field(default_factory=dict)

    def row(self, label: str) -> BenchRow:
        for r in self.rows:
            if r.label == label:
                return r
        raise KeyError(label)

    def rounded(self) -> list[tuple[str, float, float]]:
        return [(r.label, round(r.parallel_speedup, 2), round(r.incremental_speedup, 2)) for r in self.rows]


def speedup_table(times, baseline: str) -> BenchTable:
    """Parallel speedup ``t_base / t`` and incremental ``t_prev / t`` in listed order."""
    times = [(str(label), float(t)) for label, t in times]
    lookup = dict(times)
    if baseline not in lookup:
        raise KeyError(f"missing baseline {baseline!r}")
    bad = [label for label, t in times if not t > 0]
    if bad:
        raise ValueError(f"times must be positive: {bad}")
    t_base = lookup[baseline]
    rows, prev = [], None
    for label, t in times:
        rows.append(BenchRow(label, t, t_base / t, math.nan if prev is None else prev / t))
        prev = t
    return BenchTable(rows, baseline)


def layout_delta(t_layout: float, t_mirror: float) -> float:
    """Fraction by which a layout beats its mirror (``nodes`` and ``slots`` swapped).

    Positive when the layout is faster. The pair ``d``, ``d'`` always
    satisfies ``(1 - d) * (1 - d') == 1``.
    """
    return (t_mirror - t_layout) / t_mirror


def layout_delta_matrix(times: dict) -> dict[Layout, float]:
    """Delta for every off-diagonal layout against its mirror layout.

    Keys may be :class:`Layout` objects or ``"NxS"`` strings. The cell for
    ``n x s`` compares with ``s x n``, the symmetric cell across the
    diagonal; square layouts have no entry.
    """
    times = {(k if isinstance(k, Layout) else Layout.parse(k)): float(v) for k, v in times.items()}
    out = {}
    for lay, t in times.items():
        if lay.nodes == lay.slots:
            continue
        mirror = lay.transpose()
        if mirror not in times:
            raise KeyError(f"missing pair: {lay} has no {mirror} to compare with")
        out[lay] = layout_delta(t, times[mirror])
    return out


def delta_grid(deltas: dict[Layout, float]):
    """``(nodes_labels, slot_labels, matrix)`` with NaN where there is no entry."""
    nodes = sorted({l.nodes for l in deltas} | {l.slots for l in deltas})
    grid = np.full((len(nodes), len(nodes)), np.nan)
    for lay, d in deltas.items():
        grid[nodes.index(lay.nodes), nodes.index(lay.slots)] = d
    return nodes, nodes, grid


# ------------------------------------------------------------------ benchmark

def gradient_payload_bytes(dims: ModelDims, precision: str) -> int:
    """Bytes moved by the two all-reduces of one training step (max, then folded sum)."""
    dtype = resolve_dtype(precision)
    n = dims.param_count()
    return n * dtype.itemsize + (n + 1) * slices_for(dtype) * 8


def simulated_epoch_time(layout: Layout, samples: int, batch: int, dims: ModelDims, precision: str,
                         model: LinkCostModel) -> float:
    """Modeled epoch seconds with ``samples / (batch * P)`` steps, not rounded to whole steps."""
    p = layout.world
    steps = samples / (batch * p)
    dtype = resolve_dtype(precision)
    n = dims.param_count()
    comm = (simulate_allreduce_time(layout, n * dtype.itemsize, model)
            + simulate_allreduce_time(layout, (n + 1) * slices_for(dtype) * 8, model))
    return steps * (batch * model.compute_per_sample + comm)


def _dataset_shape(path):
    n, t, c, k = read_header(path)
    return n, t, c * k


def bench(layouts, config, mode: str = "simulated", cost_model: LinkCostModel | None = None,
          runs: int = 3, samples: int | None = None, launcher=None) -> BenchTable:
    """Time each layout and tabulate speedups and layout deltas.

    ``measured`` trains for ``config.epochs`` epochs per run on localhost
    workers and averages the per-epoch training time (initialization and
    data loading excluded) over ``runs`` runs. ``simulated`` evaluates the
    cost model. The baseline is the first single-process layout, else the
    first layout.
    """
    layouts = [l if isinstance(l, Layout) else Layout.parse(l) for l in layouts]
    if not layouts:
        raise ValueError("no layouts given")
    rows = []
    if mode == "simulated":
        model = cost_model or LinkCostModel()
        n_cases, timesteps, flat = _dataset_shape(config.dataset) if config.dataset else (None, None, None)
        if samples is None:
            if n_cases is None:
                raise ValueError("simulated mode needs a dataset or an explicit sample count")
            samples = split_counts(n_cases)[0] * samples_per_case(timesteps, config.window, config.horizon)
        dims = ModelDims(flat or 768, config.window, config.horizon, config.encoder_units,
                         config.decoder_units, config.head_units)
        for lay in layouts:
            t = simulated_epoch_time(lay, samples, config.batch_size, dims, config.precision, model)
            rows.append(BenchRow(str(lay), t, seconds_min=t, seconds_max=t, layout=lay, mode=mode))
    elif mode == "measured":
        if launcher is None:
            from .launch import launch as launcher
        for lay in layouts:
            per_run = []
            for _ in range(runs):
                _, history = launcher(replace(config, layout=str(lay)))
                per_run.append(float(np.mean(history.train_seconds)))
            rows.append(BenchRow(str(lay), float(np.mean(per_run)), seconds_min=min(per_run),
                                 seconds_max=max(per_run), layout=lay, mode=mode))
    else:
        raise ValueError(f"mode must be 'measured' or 'simulated', got {mode!r}")

    base = next((r.label for r in rows if r.layout.world == 1), rows[0].label)
    table = speedup_table([(r.label, r.seconds) for r in rows], base)
    for src, dst in zip(rows, table.rows):
        src.parallel_speedup, src.incremental_speedup = dst.parallel_speedup, dst.incremental_speedup
    times = {r.layout: r.seconds for r in rows}
    paired = {l: t for l, t in times.items() if l.nodes != l.slots and l.transpose() in times}
    return BenchTable(rows, base, layout_delta_matrix(paired) if paired else {})


# ------------------------------------------------------------------------ csv

def _fmt(v) -> str:
    if isinstance(v, float):
        return "" if math.isnan(v) else repr(v)
    return str(v)


def write_bench_csv(table: BenchTable, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(BENCH_COLUMNS)
        for r in table.rows:
            lay = r.layout
            w.writerow([r.label, lay.nodes if lay else "", lay.slots if lay else "", lay.world if lay else "",
                        r.mode, _fmt(r.seconds), _fmt(r.seconds_min), _fmt(r.seconds_max),
                        _fmt(r.parallel_speedup), _fmt(r.incremental_speedup)])


def write_delta_csv(deltas: dict[Layout, float], path) -> None:
    """Rows are node counts, columns slot counts; cells in percent."""
    nodes, slots, grid = delta_grid(deltas)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["nodes"] + [f"{s}_slots" for s in slots])
        for i, n in enumerate(nodes):
            w.writerow([n] + [_fmt(float(100 * v)) for v in grid[i]])


def read_times_csv(path) -> list[tuple[str, float]]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if not reader.fieldnames or not {"label", "seconds"} <= set(reader.fieldnames):
            raise ValueError("times CSV needs 'label' and 'seconds' columns")
        return [(row["label"], float(row["seconds"].replace("_", ""))) for row in reader]


def write_speedup_csv(table: BenchTable, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SPEEDUP_COLUMNS)
        for r in table.rows:
            w.writerow([r.label, _fmt(r.seconds), _fmt(r.parallel_speedup), _fmt(r.incremental_speedup)])


def format_table(table: BenchTable) -> str:
    lines = [f"{'label':>12} {'seconds':>12} {'parallel':>9} {'incremental':>12}"]
    for r in table.rows:
        inc = "-" if math.isnan(r.incremental_speedup) else f"{r.incremental_speedup:.2f}x"
        lines.append(f"{r.label:>12} {r.seconds:>12.3f} {r.parallel_speedup:>8.2f}x {inc:>12}")
    return "\n".join(lines)
