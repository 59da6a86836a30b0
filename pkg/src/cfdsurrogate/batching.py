"""Epoch generator over concatenated case series, with positional sharding.

Sample ``s`` is the window starting at offset ``s mod per_case`` of case
``s div per_case``; windows never straddle two cases. After a shuffle shared
by every rank, rank ``r`` of ``P`` owns positions ``r, r + P, r + 2P, ...``.
Global batch ``i`` is positions ``[i*B*P, (i+1)*B*P)`` of the shuffled array,
so the union of all ranks' ``i``-th batches is one contiguous slice.
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

from .datagen import CaseSeries, UnsupportedDatasetError

DEFAULT_BATCH = 14


class MiniBatch(NamedTuple):
    observations: np.ndarray  # [B, W, F]
    targets: np.ndarray       # [B, H, F]
    sample_ids: np.ndarray    # [B]


def samples_per_case(timesteps: int, window: int = 3, horizon: int = 1) -> int:
    return max(0, timesteps - (window + horizon) + 1)


def decode_sample(sample_id: int, per_case: int) -> tuple[int, int]:
    return divmod(int(sample_id), per_case)


class WindowGenerator:
    """Mini-batch provider for one worker.

    Parameters
    ----------
    cases : list of CaseSeries or ndarray ``[N, T, C, 3]``
        All cases must share one length.
    batch_size, window, horizon : int
    seed : int
        Seeds the epoch-indexed shuffle stream shared by every rank.
    rank, world : int
        This worker's shard.
    shuffle : bool
        ``False`` keeps the identity order (evaluation, sanity runs).
    """

    def __init__(self, cases, batch_size: int = DEFAULT_BATCH, window: int = 3, horizon: int = 1,
                 seed: int = 0, rank: int = 0, world: int = 1, shuffle: bool = True):
        fields = [c.field if isinstance(c, CaseSeries) else np.asarray(c) for c in cases]
        if not fields:
            raise UnsupportedDatasetError("no cases to iterate")
        lengths = {f.shape[0] for f in fields}
        if len(lengths) != 1:
            raise UnsupportedDatasetError(f"cases have different lengths {sorted(lengths)}")
        if not 0 <= rank < world:
            raise ValueError(f"rank {rank} outside world of {world}")
        if batch_size < 1:
            raise ValueError("batch_size must be positive")
        self.data = np.stack([f.reshape(f.shape[0], -1) for f in fields])  # [N, T, F]
        self.timesteps = lengths.pop()
        self.batch_size = batch_size
        self.window = window
        self.horizon = horizon
        self.seed = seed
        self.rank = rank
        self.world = world
        self.shuffle = shuffle
        self.per_case = samples_per_case(self.timesteps, window, horizon)
        if self.per_case < 1:
            raise UnsupportedDatasetError(f"{self.timesteps} timesteps cannot hold window {window} + horizon {horizon}")
        self.indexes = np.arange(len(fields) * self.per_case)
        self.epoch = -1
        self.on_epoch_end()

    @property
    def n_samples(self) -> int:
        return self.indexes.size

    def __len__(self) -> int:
        return self.n_samples // (self.batch_size * self.world)

    def on_epoch_end(self) -> None:
        self.epoch += 1
        if self.shuffle:
            rng = np.random.default_rng([self.seed, self.epoch])
            rng.shuffle(self.indexes)

    def shard(self) -> np.ndarray:
        """This rank's sample ids for the current epoch, dropped tail excluded."""
        used = len(self) * self.batch_size * self.world
        return self.indexes[:used][self.rank::self.world]

    def batch_ids(self, batch_index: int) -> np.ndarray:
        if not 0 <= batch_index < len(self):
            raise IndexError(f"batch {batch_index} outside epoch of {len(self)} batches")
        b, p = self.batch_size, self.world
        block = self.indexes[batch_index * b * p:(batch_index + 1) * b * p]
        return block[self.rank::p]

    def materialize(self, sample_ids: np.ndarray) -> MiniBatch:
        case, offset = np.divmod(np.asarray(sample_ids), self.per_case)
        span = self.window + self.horizon
        steps = offset[:, None] + np.arange(span)
        rows = self.data[case[:, None], steps]
        return MiniBatch(rows[:, :self.window], rows[:, self.window:], np.asarray(sample_ids))

    def __getitem__(self, batch_index: int) -> MiniBatch:
        return self.materialize(self.batch_ids(batch_index))

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]
