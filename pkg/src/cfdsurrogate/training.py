"""Synchronous data-parallel training and evaluation."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import checkpoint
from .batching import DEFAULT_BATCH, WindowGenerator
from .collective import Layout, WorkerGroup, local_group
from .datagen import TEST, TRAIN, VAL, Dataset, denormalize, normalize, read_dataset
from .metrics import DEFAULT_BINS, report
from .model import PARAM_NAMES, ModelDims, backward, forward, init_params
from .optim import DEFAULT_LR, AdamState, adam_step, mae_loss
from .reprosum import finish, fold, grid_exponents, slices_for
from .tensor import resolve_dtype

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    dataset: str = ""
    epochs: int = 20
    patience: int = 10
    batch_size: int = DEFAULT_BATCH
    lr: float = DEFAULT_LR
    window: int = 3
    horizon: int = 1
    seed: int = 0
    layout: str = "1x1"
    precision: str = "f32"
    encoder_units: int = 200
    decoder_units: int = 200
    head_units: int = 100
    global_batch: bool = False
    shuffle: bool = True
    checkpoint: str = "model.ckpt"
    log: str = ""
    rank_checkpoints: str = ""
    timeout: float = 30.0

    def __post_init__(self):
        for name in ("epochs", "patience", "batch_size", "window", "horizon",
                     "encoder_units", "decoder_units", "head_units"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        resolve_dtype(self.precision)

    @property
    def world(self) -> int:
        return Layout.parse(self.layout).world

    def per_replica_batch(self) -> int:
        if not self.global_batch:
            return self.batch_size
        if self.batch_size % self.world:
            raise ValueError(f"global batch {self.batch_size} not divisible by {self.world} workers")
        return self.batch_size // self.world

    @classmethod
    def from_mapping(cls, values: dict) -> "TrainConfig":
        kinds = {f.name: f.type for f in fields(cls)}
        out = {}
        for key, raw in values.items():
            key = key.replace("-", "_")
            if key not in kinds:
                raise ValueError(f"unknown config key {key!r}")
            kind = kinds[key]
            if isinstance(raw, str):
                if kind == "bool":
                    raw = raw.strip().lower() in ("1", "true", "yes", "on")
                elif kind == "int":
                    raw = int(raw)
                elif kind == "float":
                    raw = float(raw)
            out[key] = raw
        return cls(**out)

    def to_text(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in asdict(self).items())


@dataclass
class TrainingLog:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    seconds: list[float] = field(default_factory=list)
    train_seconds: list[float] = field(default_factory=list)
    stop_reason: str = ""

    @property
    def epochs(self) -> int:
        return len(self.train_loss)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)

    @classmethod
    def from_json(cls, text: str) -> "TrainingLog":
        return cls(**json.loads(text))


class EarlyStopping:
    """Stops once more than ``patience`` epochs passed since the best validation loss."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = math.inf
        self.best_epoch = 0

    def update(self, epoch: int, val_loss: float) -> bool:
        if val_loss < self.best:
            self.best = val_loss
            self.best_epoch = epoch
        return epoch - self.best_epoch > self.patience


def data_parallel_step(params, state: AdamState, observations, targets, group: WorkerGroup, horizon: int = 1):
    """Forward, MAE, backward and one Adam step, synchronized over ``group``.

    Every rank holds an equal shard. Per-sample gradients are scaled by the
    global entry count and reduced with the partition-independent sum, so the
    result is bitwise equal to one serial step on the union of the shards.
    Returns ``(params', state', global_loss)``.
    """
    local = observations.shape[0]
    total = local * group.world
    dtype = params[PARAM_NAMES[0]].dtype
    pred, cache = forward(params, observations, horizon)
    loss, d_pred = mae_loss(pred, targets, count=total * pred.shape[1] * pred.shape[2])
    per_sample = backward(params, cache, d_pred, per_sample=True)

    flat = [per_sample[n].reshape(local, -1) for n in PARAM_NAMES]
    sizes = [f.shape[1] for f in flat]
    local_max = np.concatenate([np.abs(f).max(axis=0) for f in flat])
    global_max = group.allreduce(local_max, op="max")
    exps = grid_exponents(global_max, total)
    slices = slices_for(dtype)
    folded, start = [], 0
    for f, size in zip(flat, sizes):
        folded.append(fold(f, exps[start:start + size], total, slices))
        start += size
    loss_col = np.zeros((slices, 1))
    loss_col[0] = loss
    reduced = group.allreduce(np.concatenate(folded + [loss_col], axis=1), op="sum")
    summed = finish(reduced[:, :-1], dtype)
    global_loss = float(reduced[0, -1])

    grads, start = {}, 0
    for name, size in zip(PARAM_NAMES, sizes):
        grads[name] = summed[start:start + size].reshape(params[name].shape)
        start += size
    params, state = adam_step(params, grads, state)
    return params, state, global_loss


def evaluate_loss(params, gen: WindowGenerator, group: WorkerGroup, horizon: int, chunk: int = 64) -> float:
    """MAE over every sample of an unshuffled generator, split positionally over ranks."""
    ids = np.arange(gen.n_samples)[group.rank::group.world]
    total = np.zeros(2)
    for start in range(0, ids.size, chunk):
        batch = gen.materialize(ids[start:start + chunk])
        pred, _ = forward(params, batch.observations, horizon)
        total[0] += np.abs(pred.astype(np.float64) - batch.targets).sum()
        total[1] += pred.size
    total = group.allreduce(total, op="sum")
    return float(total[0] / total[1])


def prepare_dataset(config: TrainConfig) -> Dataset:
    ds = read_dataset(config.dataset)
    nds, _ = normalize(ds)
    return nds


def model_dims(config: TrainConfig, flat_dim: int) -> ModelDims:
    return ModelDims(flat_dim, config.window, config.horizon, config.encoder_units,
                     config.decoder_units, config.head_units)


def run_training(config: TrainConfig, ds: Dataset, group: WorkerGroup | None = None):
    """Train on a normalized dataset; returns ``(dims, params, state, log)``.

    ``group`` defaults to a single local worker.
    """
    group = group or local_group()
    dtype = resolve_dtype(config.precision)
    train_cases = ds.subset(TRAIN)
    val_cases = ds.subset(VAL)
    gen = WindowGenerator(train_cases, config.per_replica_batch(), config.window, config.horizon,
                          config.seed, group.rank, group.world, shuffle=config.shuffle)
    val_gen = WindowGenerator(val_cases, 1, config.window, config.horizon, shuffle=False) if val_cases else None
    if len(gen) == 0:
        raise ValueError(f"{gen.n_samples} training samples cannot fill one batch of "
                         f"{gen.batch_size} x {group.world} workers")
    dims = model_dims(config, gen.data.shape[-1])
    params = init_params(dims, config.seed, dtype)
    state = AdamState.zeros_like(params, lr=config.lr)
    stopper = EarlyStopping(config.patience)
    history = TrainingLog(stop_reason="max-epochs")

    for epoch in range(1, config.epochs + 1):
        t0 = time.perf_counter()
        losses = []
        for step in range(len(gen)):
            batch = gen[step]
            obs = batch.observations.astype(dtype, copy=False)
            params, state, loss = data_parallel_step(params, state, obs, batch.targets, group, config.horizon)
            if not math.isfinite(loss):
                raise TrainingDiverged(f"loss became {loss} at epoch {epoch}, step {step}")
            losses.append(loss)
        t_train = time.perf_counter() - t0
        val = evaluate_loss(params, val_gen, group, config.horizon) if val_gen else float(np.mean(losses))
        history.train_loss.append(float(np.mean(losses)))
        history.val_loss.append(val)
        history.train_seconds.append(t_train)
        history.seconds.append(time.perf_counter() - t0)
        log.info("rank %d epoch %d train %.5f val %.5f (%.2fs)", group.rank, epoch,
                 history.train_loss[-1], val, history.seconds[-1])
        gen.on_epoch_end()
        if stopper.update(epoch, val):
            history.stop_reason = "early-stop"
            break
    return dims, params, state, history


def write_outputs(config: TrainConfig, dims, params, state, history, rank: int = 0) -> None:
    blob = checkpoint.encode(dims, params, state)
    if config.rank_checkpoints:
        out = Path(config.rank_checkpoints)
        out.mkdir(parents=True, exist_ok=True)
        (out / f"rank{rank}.ckpt").write_bytes(blob)
    if rank == 0:
        Path(config.checkpoint).write_bytes(blob)
        if config.log:
            Path(config.log).write_text(history.to_json())


# ----------------------------------------------------------------- evaluation

DEFAULT_EVAL_STEPS = (10, 20, -1)


def evaluate(predict, ds: Dataset, timesteps=DEFAULT_EVAL_STEPS, window: int = 3, bins: int = DEFAULT_BINS,
             which: str = TEST):
    """Metric rows per evaluated timestep, in physical units.

    ``predict`` maps normalized windows ``[N, W, F]`` to normalized next
    fields ``[N, F]``. ``ds`` must be normalized. Returns ``(rows, pairs)``
    where ``pairs[label] = (cfd, ai)`` flat arrays.
    """
    if not ds.normalized:
        raise ValueError("evaluate expects a normalized dataset")
    cases = ds.subset(which)
    if not cases:
        raise ValueError(f"no {which} cases")
    T = cases[0].timesteps
    rows, pairs = [], {}
    for t in timesteps:
        t_abs = t if t >= 0 else T + t
        if not window <= t_abs < T:
            raise ValueError(f"timestep {t} cannot be predicted from a window of {window} in {T} steps")
        windows = np.stack([c.field[t_abs - window:t_abs].reshape(window, -1) for c in cases])
        pred = np.asarray(predict(windows)).reshape(len(cases), -1, 3)
        truth = np.stack([c.field[t_abs] for c in cases])
        cfd = denormalize(truth.astype(np.float64), ds.norm).ravel()
        ai = denormalize(pred.astype(np.float64), ds.norm).ravel()
        label = "converged" if t_abs == T - 1 else str(t_abs)
        rows.append({"group": label, "timestep": t_abs, **report(cfd, ai, bins).as_dict()})
        pairs[label] = (cfd, ai)
    return rows, pairs


def checkpoint_predictor(params, horizon: int = 1):
    def predict(windows):
        pred, _ = forward(params, windows.astype(params["enc.kernel"].dtype), horizon)
        return pred[:, 0]
    return predict
