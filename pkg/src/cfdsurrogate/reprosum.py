"""Partition-independent summation of per-sample gradients.

Floating-point addition is not associative, so summing the same per-sample
gradients as one batch or as several worker shards normally gives
different last bits. To make a data-parallel step bitwise equal to the
serial step on the union batch, each value is split into slices quantized
to a grid chosen from the global per-element maximum (one slice is enough
for float32 results, float64 takes two). Sums of grid-aligned values are
exact in float64 whatever the grouping or order, so shard partial sums can
be combined in any order. The exact slice totals are then added once,
coarsest first.

The scheme needs every participant to agree on the per-element maximum
magnitude and on the total number of summands before extraction.
"""

from __future__ import annotations

import numpy as np

_MANT = 52


def _headroom(count: int) -> int:
    if count < 1:
        raise ValueError("count must be positive")
    return int(np.ceil(np.log2(count))) + 1


def grid_exponents(max_abs: np.ndarray, count: int) -> np.ndarray:
    """Exponent ``E`` per element with ``count * max_abs < 2**(E - 1)``."""
    _, e = np.frexp(np.asarray(max_abs, dtype=np.float64))
    return e.astype(np.int64) + _headroom(count)


def slices_for(dtype) -> int:
    """Grid slices needed so the reduction is at least as accurate as ``dtype``."""
    return 1 if np.dtype(dtype).itemsize <= 4 else 2


def fold(values: np.ndarray, exponents: np.ndarray, count: int, slices: int = 2) -> np.ndarray:
    """Exact partial sums over axis 0, one per grid slice.

    ``values`` is ``[n, ...]`` and ``count`` is the total number of summands
    across all participants. Returns ``[slices, ...]`` float64 totals;
    adding partial totals from any grouping of the samples is exact.
    """
    x = np.array(values, dtype=np.float64)
    out = np.empty((slices,) + x.shape[1:], dtype=np.float64)
    e = np.asarray(exponents)
    for k in range(slices):
        # x + 1.5 * 2**E lands in [2**E, 2**(E+1)), rounding x to a multiple of 2**(E-52)
        m = np.ldexp(1.5, e)
        q = x + m
        q -= m
        x -= q
        out[k] = q.sum(axis=0)
        # residual is at most 2**(E-53); the next grid starts one binade above
        e = e - _MANT + _headroom(count)
    return out


def finish(folded: np.ndarray, dtype) -> np.ndarray:
    """Collapse exact slice totals to one value per element, coarsest first."""
    total = folded[0].copy()
    for part in folded[1:]:
        total += part
    return total.astype(dtype, copy=False)


def repro_sum(values: np.ndarray, dtype=None) -> np.ndarray:
    """Single-process partition-independent sum over axis 0."""
    values = np.asarray(values)
    dtype = values.dtype if dtype is None else dtype
    exps = grid_exponents(np.max(np.abs(values), axis=0), values.shape[0])
    return finish(fold(values, exps, values.shape[0], slices_for(dtype)), dtype)
