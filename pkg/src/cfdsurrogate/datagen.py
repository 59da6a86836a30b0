"""Synthetic quasi-steady flow series, splits, normalization and the dataset file.

Each case is a velocity field over a 1-D strip of cells driven by two inflow
rates. The field relaxes from a transient towards a steady state that depends
smoothly on both rates:

    field[t] = steady(cell; q1, q2) + transient(cell; q1, q2) * exp(-t / tau) + noise

with ``tau = timesteps / 5`` and uniform noise bounded by 1e-3 of the
noiseless range.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

DATA_MAGIC = b"SRTDATA1"
DATA_VERSION = 1
COMPONENTS = 3
Q1_RANGE = (0.1666, 0.3389)
Q2_RANGE = (0.3333, 0.4443)
NOISE_FRACTION = 1e-3

TRAIN, VAL, TEST = "train", "val", "test"


class DatasetFormatError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class DegenerateComponentError(ValueError):
    pass


class UnsupportedDatasetError(ValueError):
    pass


@dataclass
class CaseSeries:
    q1: float
    q2: float
    field: np.ndarray  # [T, C, 3]

    @property
    def timesteps(self) -> int:
        return self.field.shape[0]

    @property
    def cells(self) -> int:
        return self.field.shape[1]


@dataclass(frozen=True, eq=False)
class NormStats:
    mean: np.ndarray  # [3]
    std: np.ndarray   # [3]

    def __post_init__(self):
        # stored as float32 on disk; keep in-memory values representable there
        object.__setattr__(self, "mean", np.asarray(self.mean, dtype=np.float32).astype(np.float64))
        object.__setattr__(self, "std", np.asarray(self.std, dtype=np.float32).astype(np.float64))
        if np.any(~(self.std > 0)):
            raise DegenerateComponentError(f"non-positive standard deviation {self.std}")

    def __eq__(self, other):
        if not isinstance(other, NormStats):
            return NotImplemented
        return np.array_equal(self.mean, other.mean) and np.array_equal(self.std, other.std)


@dataclass
class Dataset:
    cases: list[CaseSeries]
    split: list[str]
    norm: NormStats | None = None
    normalized: bool = False

    def __post_init__(self):
        if len(self.split) != len(self.cases):
            raise ValueError("split must assign every case")

    def subset(self, which: str) -> list[CaseSeries]:
        return [c for c, s in zip(self.cases, self.split) if s == which]

    @property
    def shape(self) -> tuple[int, int, int, int]:
        c = self.cases[0]
        return (len(self.cases), c.timesteps, c.cells, COMPONENTS)


def _steady(s: np.ndarray, q1: float, q2: float) -> np.ndarray:
    u = q1 * np.sin(2 * np.pi * s) + 0.5 * q2 * np.cos(3 * np.pi * s) + 0.3 * q1 * q2 / (0.2 + s)
    v = q2 * np.sin(np.pi * s) ** 2 - 0.4 * q1 * np.cos(2 * np.pi * s * (1 + q2))
    w = 0.6 * (q2 - q1) * np.sin(4 * np.pi * s + 3 * q1) + 0.2 * q1 * s
    return np.stack([u, v, w], axis=-1)


def _transient(s: np.ndarray, q1: float, q2: float) -> np.ndarray:
    amp = 0.8 * (q1 + q2)
    return amp * np.stack([
        np.cos(5 * np.pi * s + 4 * q1),
        np.sin(3 * np.pi * s - 2 * q2),
        0.5 * np.cos(7 * np.pi * s * q2 + q1),
    ], axis=-1)


def steady_field(q1: float, q2: float, cells: int) -> np.ndarray:
    s = (np.arange(cells) + 0.5) / cells
    return _steady(s, q1, q2)


def generate_case(q1: float, q2: float, cells: int, timesteps: int, seed: int) -> CaseSeries:
    if cells < 1:
        raise ValueError(f"cells must be >= 1, got {cells}")
    if timesteps < 4:
        raise ValueError(f"timesteps must be >= 4, got {timesteps}")
    # parameters are stored as float32; generate from the stored values
    q1, q2 = float(np.float32(q1)), float(np.float32(q2))
    s = (np.arange(cells) + 0.5) / cells
    steady = _steady(s, q1, q2)
    decay = np.exp(-np.arange(timesteps) / (timesteps / 5.0))
    clean = steady[None] + _transient(s, q1, q2)[None] * decay[:, None, None]
    span = float(clean.max() - clean.min())
    rng = np.random.default_rng([seed, int(round(q1 * 1e6)), int(round(q2 * 1e6))])
    noise = rng.uniform(-1.0, 1.0, size=clean.shape) * NOISE_FRACTION * span
    return CaseSeries(q1, q2, (clean + noise).astype(np.float32))


def split_counts(n_cases: int) -> tuple[int, int, int]:
    """(train, validation, test) case counts; validation is carved out of train."""
    n_train = n_cases * 4 // 5
    n_val = n_train // 5
    return n_train - n_val, n_val, n_cases - n_train


def positional_split(n_cases: int) -> list[str]:
    n_fit, n_val, n_test = split_counts(n_cases)
    return [TRAIN] * n_fit + [VAL] * n_val + [TEST] * n_test


def _parameter_grid(n: int, q1_range, q2_range) -> list[tuple[float, float]]:
    # roughly square grid, truncated to exactly n points
    n2 = max(1, int(math.floor(math.sqrt(n))))
    n1 = math.ceil(n / n2)
    q1s = np.linspace(*q1_range, n1)
    q2s = np.linspace(*q2_range, n2)
    return [(float(a), float(b)) for a in q1s for b in q2s][:n]


def build_dataset(n_cases: int, cells: int, timesteps: int, q1_range=Q1_RANGE, q2_range=Q2_RANGE,
                  seed: int = 0) -> Dataset:
    """Generate, shuffle and split cases.

    Cases are stored in split order (train, then validation, then test), so
    a dataset file carries its split implicitly through the case count.
    """
    if n_cases < 5:
        raise ValueError(f"need at least 5 cases, got {n_cases}")
    grid = _parameter_grid(n_cases, q1_range, q2_range)
    order = np.random.default_rng(seed).permutation(n_cases)
    cases = [generate_case(*grid[i], cells=cells, timesteps=timesteps, seed=seed) for i in order]
    return Dataset(cases, positional_split(n_cases))


class ComponentScaler(TransformerMixin, BaseEstimator):
    """Standardize the trailing velocity-component axis.

    Fitted statistics are accumulated in float64 over every leading axis.
    """

    def fit(self, X, y=None):
        X = np.asarray(X)
        if X.shape[-1] != COMPONENTS:
            raise ValueError(f"expected trailing axis of {COMPONENTS} components, got {X.shape}")
        flat = X.reshape(-1, COMPONENTS).astype(np.float64)
        self.mean_ = flat.mean(axis=0)
        self.scale_ = flat.std(axis=0)
        if np.any(self.scale_ == 0):
            raise DegenerateComponentError(f"component(s) {np.flatnonzero(self.scale_ == 0).tolist()} have zero variance")
        self.n_features_in_ = COMPONENTS
        return self

    @classmethod
    def from_stats(cls, stats: NormStats) -> "ComponentScaler":
        scaler = cls()
        scaler.mean_ = np.asarray(stats.mean, dtype=np.float64)
        scaler.scale_ = np.asarray(stats.std, dtype=np.float64)
        scaler.n_features_in_ = COMPONENTS
        return scaler

    def stats(self) -> NormStats:
        check_is_fitted(self, ["mean_", "scale_"])
        return NormStats(self.mean_.copy(), self.scale_.copy())

    def transform(self, X):
        check_is_fitted(self, ["mean_", "scale_"])
        X = np.asarray(X)
        return ((X - self.mean_) / self.scale_).astype(X.dtype, copy=False)

    def inverse_transform(self, X):
        check_is_fitted(self, ["mean_", "scale_"])
        X = np.asarray(X)
        return (X * self.scale_ + self.mean_).astype(X.dtype, copy=False)


def fit_stats(ds: Dataset) -> NormStats:
    train = ds.subset(TRAIN)
    if not train:
        raise ValueError("training split is empty")
    return ComponentScaler().fit(np.stack([c.field for c in train])).stats()


def normalize(ds: Dataset, stats: NormStats | None = None):
    """Standardize every case with training-split statistics.

    Returns ``(normalized_dataset, stats)``. Validation and test cases never
    contribute to the statistics.
    """
    if ds.normalized:
        raise ValueError("dataset is already normalized")
    stats = stats or ds.norm or fit_stats(ds)
    scaler = ComponentScaler.from_stats(stats)
    cases = [replace(c, field=scaler.transform(c.field)) for c in ds.cases]
    return Dataset(cases, list(ds.split), stats, normalized=True), stats


def denormalize(values: np.ndarray, stats: NormStats) -> np.ndarray:
    return ComponentScaler.from_stats(stats).inverse_transform(values)


# ---------------------------------------------------------------- file format

_HEADER = struct.Struct("<8sI4Q")


def pack_header(n_cases: int, timesteps: int, cells: int, components: int = COMPONENTS) -> bytes:
    return _HEADER.pack(DATA_MAGIC, DATA_VERSION, n_cases, timesteps, cells, components)


def write_dataset(ds: Dataset, path) -> None:
    """Write the physical-unit dataset; normalization stats go in the trailer."""
    if ds.normalized:
        raise ValueError("write the physical-unit dataset; normalization statistics travel in the trailer")
    n, t, c, k = ds.shape
    with open(path, "wb") as fh:
        fh.write(pack_header(n, t, c, k))
        fh.write(np.array([[cs.q1, cs.q2] for cs in ds.cases], dtype="<f4").tobytes())
        for cs in ds.cases:
            if cs.field.shape != (t, c, k):
                raise UnsupportedDatasetError(f"case shape {cs.field.shape} differs from {(t, c, k)}")
            fh.write(np.ascontiguousarray(cs.field, dtype="<f4").tobytes())
        if ds.norm is not None:
            fh.write(np.concatenate([ds.norm.mean, ds.norm.std]).astype("<f4").tobytes())


def read_header(path) -> tuple[int, int, int, int]:
    """``(cases, timesteps, cells, components)`` from a file or raw header bytes."""
    if isinstance(path, (bytes, bytearray)):
        return tuple(_parse_header(bytes(path))[2:])
    with open(path, "rb") as fh:
        raw = fh.read(_HEADER.size)
    return tuple(_parse_header(raw)[2:])


def _parse_header(raw: bytes):
    if len(raw) < 8 or raw[:8] != DATA_MAGIC:
        raise DatasetFormatError("bad magic", 0)
    if len(raw) < _HEADER.size:
        raise DatasetFormatError("truncated header", len(raw))
    magic, version, *extents = _HEADER.unpack(raw[:_HEADER.size])
    if version != DATA_VERSION:
        raise DatasetFormatError(f"unsupported version {version}", 8)
    return magic, version, *extents


def read_dataset(path) -> Dataset:
    raw = Path(path).read_bytes()
    _, _, n, t, c, k = _parse_header(raw)
    if k != COMPONENTS:
        raise DatasetFormatError(f"expected {COMPONENTS} components, header declares {k}", 28)
    pos = _HEADER.size
    q_bytes = n * 2 * 4
    body = n * t * c * k * 4
    if len(raw) < pos + q_bytes + body:
        raise DatasetFormatError(f"truncated: need {pos + q_bytes + body} bytes, file has {len(raw)}", len(raw))
    qs = np.frombuffer(raw, dtype="<f4", count=n * 2, offset=pos).reshape(n, 2)
    pos += q_bytes
    fields = np.frombuffer(raw, dtype="<f4", count=n * t * c * k, offset=pos).reshape(n, t, c, k)
    pos += body
    trailer = len(raw) - pos
    norm = None
    if trailer == 6 * 4:
        vals = np.frombuffer(raw, dtype="<f4", count=6, offset=pos).astype(np.float64)
        norm = NormStats(vals[:3], vals[3:])
    elif trailer != 0:
        raise DatasetFormatError(f"unexpected {trailer} trailing bytes", pos)
    cases = [CaseSeries(float(q[0]), float(q[1]), fields[i].astype(np.float32)) for i, q in enumerate(qs)]
    return Dataset(cases, positional_split(n), norm)
