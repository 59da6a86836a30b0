"""Dense kernels with a fixed accumulation order.

Every array-valued quantity in the package is a plain C-contiguous
:class:`numpy.ndarray`. Two working precisions exist: ``"f32"`` for
production runs and ``"f64"`` for verification.

The matrix products here do not call BLAS. They accumulate over the inner
axis strictly left to right with separate multiply and add steps, so a row
of the output depends only on the matching row of the input. That makes
results bitwise independent of batch size and of how a batch is split
across workers.
"""

from __future__ import annotations

import numpy as np

PRECISIONS = {"f32": np.dtype(np.float32), "f64": np.dtype(np.float64)}


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


def resolve_dtype(precision) -> np.dtype:
    if isinstance(precision, str):
        try:
            return PRECISIONS[precision]
        except KeyError:
            raise ValueError(f"unknown precision {precision!r}, expected one of {sorted(PRECISIONS)}") from None
    dtype = np.dtype(precision)
    if dtype not in PRECISIONS.values():
        raise ValueError(f"unsupported dtype {dtype}")
    return dtype


def precision_name(dtype) -> str:
    dtype = np.dtype(dtype)
    for name, dt in PRECISIONS.items():
        if dt == dtype:
            return name
    raise ValueError(f"unsupported dtype {dtype}")


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product ``a[..., m, k] @ b[k, n]`` summed left to right over k.

    Leading axes of ``a`` are treated as batch axes.
    """
    if a.ndim < 2 or b.ndim != 2 or a.shape[-1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    dtype = np.result_type(a, b)
    out = np.zeros(a.shape[:-1] + (b.shape[1],), dtype=dtype)
    tmp = np.empty_like(out)
    b = np.ascontiguousarray(b)
    for k in range(a.shape[-1]):
        np.multiply(a[..., k, None], b[k], out=tmp)
        out += tmp
    return out


def outer_sum(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Per-sample sum of outer products over the step axis.

    ``x`` is ``[B, T, I]`` and ``g`` is ``[B, T, J]``; returns ``[B, I, J]``
    with ``out[b] = x[b, 0] (x) g[b, 0] + x[b, 1] (x) g[b, 1] + ...`` in step order.
    """
    if x.ndim != 3 or g.ndim != 3 or x.shape[:2] != g.shape[:2]:
        raise DimensionError(f"outer_sum shape mismatch: {x.shape} vs {g.shape}")
    dtype = np.result_type(x, g)
    out = np.zeros((x.shape[0], x.shape[2], g.shape[2]), dtype=dtype)
    tmp = np.empty_like(out)
    for t in range(x.shape[1]):
        np.multiply(x[:, t, :, None], g[:, t, None, :], out=tmp)
        out += tmp
    return out


def step_sum(x: np.ndarray) -> np.ndarray:
    """Sum ``x[B, T, ...]`` over axis 1 in step order."""
    out = np.zeros((x.shape[0],) + x.shape[2:], dtype=x.dtype)
    for t in range(x.shape[1]):
        out += x[:, t]
    return out


def add_bias(x: np.ndarray, bias: np.ndarray) -> np.ndarray:
    if x.shape[-1] != bias.shape[-1] or bias.ndim != 1:
        raise DimensionError(f"bias shape {bias.shape} does not match {x.shape}")
    return x + bias


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0).astype(x.dtype, copy=False)


def sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    ez = np.exp(-x[pos])
    out[pos] = 1 / (1 + ez)
    ez = np.exp(x[~pos])
    out[~pos] = ez / (1 + ez)
    return out


def tanh(x: np.ndarray) -> np.ndarray:
    return np.tanh(x)


def check_finite(x: np.ndarray, what: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise FloatingPointError(f"non-finite values in {what}")
    return x
