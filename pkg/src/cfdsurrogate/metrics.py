"""Agreement metrics between solver output and predictions."""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass

import numpy as np
from scipy.stats import rankdata

log = logging.getLogger(__name__)

DEFAULT_BINS = 64


class UndefinedMetricError(ValueError):
    """A metric's denominator vanished for the given input."""


@dataclass(frozen=True)
class MetricsReport:
    pearson: float
    spearman: float
    rmse: float
    hist_r2: float  # percent
    n: int

    def as_dict(self) -> dict:
        return asdict(self)


def _pair(x, y, min_n: int = 1):
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.shape != y.shape:
        raise ValueError(f"length mismatch: {x.size} vs {y.size}")
    if x.size < min_n:
        raise ValueError(f"need at least {min_n} samples, got {x.size}")
    return x, y


def pearson(x, y) -> float:
    x, y = _pair(x, y, 2)
    dx = x - x.mean()
    dy = y - y.mean()
    sxx = np.dot(dx, dx)
    syy = np.dot(dy, dy)
    if sxx == 0 or syy == 0:
        raise UndefinedMetricError("correlation undefined for zero-variance input")
    den = np.sqrt(sxx * syy)
    if not np.isfinite(den):  # product overflowed
        den = np.sqrt(sxx) * np.sqrt(syy)
    r = np.dot(dx, dy) / den
    return float(np.clip(r, -1.0, 1.0))


def spearman(x, y) -> float:
    """Pearson correlation of average ranks."""
    x, y = _pair(x, y, 2)
    return pearson(rankdata(x), rankdata(y))


def rmse(x, y) -> float:
    x, y = _pair(x, y)
    d = x - y
    return float(np.sqrt(np.dot(d, d) / d.size))


def hist_r2(x, y, bins: int = DEFAULT_BINS, clamp: bool = True) -> float:
    """Coefficient of determination between count histograms, in percent.

    Both series share ``bins`` equal bins spanning their joint range; the
    reference histogram is the one of ``x``. Negative values are reported as
    0 unless ``clamp`` is False.
    """
    x, y = _pair(x, y)
    if bins < 2:
        raise ValueError("need at least 2 bins")
    lo = min(x.min(), y.min())
    hi = max(x.max(), y.max())
    if lo == hi:
        raise UndefinedMetricError("degenerate value range")
    hx, _ = np.histogram(x, bins=bins, range=(lo, hi))
    hy, _ = np.histogram(y, bins=bins, range=(lo, hi))
    return r2_from_counts(hx, hy, clamp)


def r2_from_counts(hx, hy, clamp: bool = True) -> float:
    """R2 of histogram ``hy`` against reference ``hx``, in percent."""
    hx = np.asarray(hx, dtype=np.float64)
    hy = np.asarray(hy, dtype=np.float64)
    ss_tot = np.sum((hx - hx.mean()) ** 2)
    if ss_tot == 0:
        raise UndefinedMetricError("reference histogram has zero variance")
    raw = 100.0 * (1.0 - np.sum((hy - hx) ** 2) / ss_tot)
    if clamp and raw < 0:
        log.info("histogram R2 %.3f%% clamped to 0", raw)
        return 0.0
    return float(raw)


def report(x, y, bins: int = DEFAULT_BINS) -> MetricsReport:
    x, y = _pair(x, y, 2)
    return MetricsReport(pearson(x, y), spearman(x, y), rmse(x, y), hist_r2(x, y, bins), int(x.size))


def scatter_export(x, y, path) -> None:
    """CSV with header ``cfd,ai``; values written as shortest float32 round-trip text."""
    x, y = _pair(x, y, 0)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["cfd", "ai"])
        for a, b in zip(x.astype(np.float32), y.astype(np.float32)):
            writer.writerow([str(a), str(b)])


def read_scatter(path) -> tuple[np.ndarray, np.ndarray]:
    data = np.loadtxt(path, delimiter=",", skiprows=1, dtype=np.float32, ndmin=2)
    return data[:, 0], data[:, 1]
