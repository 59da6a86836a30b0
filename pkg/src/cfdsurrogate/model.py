"""Sequence-to-sequence LSTM surrogate with hand-written backpropagation.

Architecture, for a window of ``W`` flattened velocity fields of width ``F``:

    encoder LSTM(enc) -> final hidden state
    repeat H times
    decoder LSTM(dec) returning every step
    dense(head, ReLU) -> dense(F, linear), applied per step

LSTM gate order inside the fused kernels is (input, forget, cell, output).
All states start at zero for every window.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import NamedTuple

import numpy as np

from .reprosum import repro_sum
from .tensor import DimensionError, add_bias, matmul, outer_sum, relu, resolve_dtype, sigmoid, step_sum, tanh

PARAM_NAMES = (
    "enc.kernel", "enc.recurrent", "enc.bias",
    "dec.kernel", "dec.recurrent", "dec.bias",
    "head.kernel", "head.bias",
    "out.kernel", "out.bias",
)


@dataclass(frozen=True)
class ModelDims:
    flat_dim: int
    window: int = 3
    horizon: int = 1
    encoder_units: int = 200
    decoder_units: int = 200
    head_units: int = 100

    def __post_init__(self):
        for name, value in asdict(self).items():
            if int(value) != value or value < 1:
                raise ValueError(f"{name} must be a positive integer, got {value!r}")

    @property
    def cells(self) -> int:
        if self.flat_dim % 3:
            raise ValueError(f"flat_dim {self.flat_dim} is not cells x 3")
        return self.flat_dim // 3

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        e, d, h, f = self.encoder_units, self.decoder_units, self.head_units, self.flat_dim
        return {
            "enc.kernel": (f, 4 * e),
            "enc.recurrent": (e, 4 * e),
            "enc.bias": (4 * e,),
            "dec.kernel": (e, 4 * d),
            "dec.recurrent": (d, 4 * d),
            "dec.bias": (4 * d,),
            "head.kernel": (d, h),
            "head.bias": (h,),
            "out.kernel": (h, f),
            "out.bias": (f,),
        }

    def param_count(self) -> int:
        return sum(int(np.prod(s)) for s in self.param_shapes().values())


def lstm_param_count(inputs: int, units: int) -> int:
    return 4 * (inputs * units + units * units + units)


def dense_param_count(inputs: int, outputs: int) -> int:
    return inputs * outputs + outputs


def init_params(dims: ModelDims, seed: int, precision="f32") -> dict[str, np.ndarray]:
    """Glorot-uniform kernels, zero biases, LSTM forget-gate bias of one.

    Draws happen in float64 in ``PARAM_NAMES`` order and are then cast, so
    both precisions start from the same values up to rounding.
    """
    dtype = resolve_dtype(precision)
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in dims.param_shapes().items():
        if len(shape) == 2:
            limit = np.sqrt(6.0 / (shape[0] + shape[1]))
            params[name] = rng.uniform(-limit, limit, size=shape).astype(dtype)
        else:
            params[name] = np.zeros(shape, dtype=dtype)
    for prefix in ("enc", "dec"):
        bias = params[prefix + ".bias"]
        units = bias.shape[0] // 4
        bias[units:2 * units] = 1
    return params


def zeros_like_params(params: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {k: np.zeros_like(v) for k, v in params.items()}


def _gates(z: np.ndarray):
    u = z.shape[-1] // 4
    return sigmoid(z[..., :u]), sigmoid(z[..., u:2 * u]), tanh(z[..., 2 * u:3 * u]), sigmoid(z[..., 3 * u:])


def lstm_step(x, h, c, kernel, recurrent, bias):
    """One LSTM cell update; returns ``(h', c')``."""
    units = recurrent.shape[0]
    if (x.shape[-1] != kernel.shape[0] or h.shape[-1] != units or c.shape[-1] != units
            or kernel.shape[1] != 4 * units or recurrent.shape[1] != 4 * units or bias.shape != (4 * units,)):
        raise DimensionError(
            f"lstm_step shapes x{x.shape} h{h.shape} c{c.shape} "
            f"kernel{kernel.shape} recurrent{recurrent.shape} bias{bias.shape}")
    z = add_bias(matmul(x[None] if x.ndim == 1 else x, kernel) + matmul(h[None] if h.ndim == 1 else h, recurrent), bias)
    i, f, g, o = _gates(z)
    c_new = f * c + i * g
    h_new = o * tanh(c_new)
    if x.ndim == 1:
        return h_new[0], c_new[0]
    return h_new, c_new


class LayerTrace(NamedTuple):
    inputs: np.ndarray   # [B, T, in]
    i: np.ndarray        # gate activations, each [B, T, u]
    f: np.ndarray
    g: np.ndarray
    o: np.ndarray
    c: np.ndarray        # cell states after each step, [B, T, u]
    tanh_c: np.ndarray
    h: np.ndarray        # hidden states after each step, [B, T, u]


class ForwardCache(NamedTuple):
    single: bool
    encoder: LayerTrace
    decoder: LayerTrace
    head_pre: np.ndarray   # [B, H, head]
    head_act: np.ndarray   # [B, H, head]


def _run_lstm(x: np.ndarray, kernel, recurrent, bias) -> LayerTrace:
    batch, steps, _ = x.shape
    units = recurrent.shape[0]
    # input projection for all steps at once; rows are independent
    zx = matmul(x, kernel)
    h = np.zeros((batch, units), dtype=x.dtype)
    c = np.zeros_like(h)
    trace = {k: np.empty((batch, steps, units), dtype=x.dtype) for k in ("i", "f", "g", "o", "c", "tanh_c", "h")}
    for t in range(steps):
        z = add_bias(zx[:, t] + matmul(h, recurrent), bias)
        i, f, g, o = _gates(z)
        c = f * c + i * g
        tc = tanh(c)
        h = o * tc
        for k, v in (("i", i), ("f", f), ("g", g), ("o", o), ("c", c), ("tanh_c", tc), ("h", h)):
            trace[k][:, t] = v
    return LayerTrace(inputs=x, **trace)


def _check_params(params, flat_dim=None):
    missing = [n for n in PARAM_NAMES if n not in params]
    if missing:
        raise DimensionError(f"missing parameters: {missing}")
    if flat_dim is not None and params["enc.kernel"].shape[0] != flat_dim:
        raise DimensionError(f"window width {flat_dim} does not match encoder kernel {params['enc.kernel'].shape}")


def forward(params: dict[str, np.ndarray], window: np.ndarray, horizon: int = 1):
    """Predict ``[H, F]`` from a ``[W, F]`` window, or ``[B, H, F]`` from ``[B, W, F]``.

    Returns ``(pred, cache)``; the cache feeds :func:`backward`.
    """
    window = np.asarray(window)
    single = window.ndim == 2
    x = window[None] if single else window
    if x.ndim != 3:
        raise DimensionError(f"window must be [W, F] or [B, W, F], got {window.shape}")
    _check_params(params, x.shape[-1])
    x = x.astype(params["enc.kernel"].dtype, copy=False)

    enc = _run_lstm(x, params["enc.kernel"], params["enc.recurrent"], params["enc.bias"])
    repeated = np.repeat(enc.h[:, -1:, :], horizon, axis=1)
    dec = _run_lstm(repeated, params["dec.kernel"], params["dec.recurrent"], params["dec.bias"])
    head_pre = add_bias(matmul(dec.h, params["head.kernel"]), params["head.bias"])
    head_act = relu(head_pre)
    pred = add_bias(matmul(head_act, params["out.kernel"]), params["out.bias"])
    cache = ForwardCache(single, enc, dec, head_pre, head_act)
    return (pred[0] if single else pred), cache


def _lstm_backward(trace: LayerTrace, dh_out: np.ndarray, recurrent: np.ndarray, kernel, need_dx: bool):
    """BPTT through one layer. ``dh_out`` is ``[B, T, u]`` (gradient on every emitted h)."""
    batch, steps, units = trace.h.shape
    dz = np.empty((batch, steps, 4 * units), dtype=dh_out.dtype)
    dh_next = np.zeros((batch, units), dtype=dh_out.dtype)
    dc_next = np.zeros_like(dh_next)
    rec_t = np.ascontiguousarray(recurrent.T)
    for t in reversed(range(steps)):
        i, f, g, o = trace.i[:, t], trace.f[:, t], trace.g[:, t], trace.o[:, t]
        tc = trace.tanh_c[:, t]
        c_prev = trace.c[:, t - 1] if t > 0 else np.zeros_like(tc)
        dh = dh_out[:, t] + dh_next
        dc = dc_next + dh * o * (1 - tc * tc)
        dz[:, t, :units] = dc * g * i * (1 - i)
        dz[:, t, units:2 * units] = dc * c_prev * f * (1 - f)
        dz[:, t, 2 * units:3 * units] = dc * i * (1 - g * g)
        dz[:, t, 3 * units:] = dh * tc * o * (1 - o)
        dc_next = dc * f
        dh_next = matmul(dz[:, t], rec_t)
    h_prev = np.concatenate([np.zeros((batch, 1, units), dtype=trace.h.dtype), trace.h[:, :-1]], axis=1)
    grads = {
        "kernel": outer_sum(trace.inputs, dz),
        "recurrent": outer_sum(h_prev, dz),
        "bias": step_sum(dz),
    }
    dx = matmul(dz, np.ascontiguousarray(kernel.T)) if need_dx else None
    return grads, dx


def backward(params: dict[str, np.ndarray], cache: ForwardCache, d_pred: np.ndarray, per_sample: bool = False):
    """Exact gradients of ``sum(pred * d_pred)`` with respect to every parameter.

    With ``per_sample=True`` each entry carries a leading batch axis and no
    reduction over samples happens. Otherwise per-sample gradients are
    combined with the partition-independent sum.
    """
    _check_params(params)
    dy = np.asarray(d_pred)
    if cache.single:
        dy = dy[None]
    expected = cache.head_act.shape[:2] + (params["out.kernel"].shape[1],)
    if dy.shape != expected:
        raise DimensionError(f"d_pred shape {np.shape(d_pred)} does not match prediction {expected}")
    if cache.head_act.shape[-1] != params["out.kernel"].shape[0] or cache.encoder.inputs.shape[-1] != params["enc.kernel"].shape[0]:
        raise DimensionError("cache was produced with parameters of different shape")
    dy = dy.astype(params["out.kernel"].dtype, copy=False)

    g = {}
    g["out.kernel"] = outer_sum(cache.head_act, dy)
    g["out.bias"] = step_sum(dy)
    d_act = matmul(dy, np.ascontiguousarray(params["out.kernel"].T))
    d_pre = d_act * (cache.head_pre > 0)
    g["head.kernel"] = outer_sum(cache.decoder.h, d_pre)
    g["head.bias"] = step_sum(d_pre)
    dh_dec = matmul(d_pre, np.ascontiguousarray(params["head.kernel"].T))

    dec_grads, dx_dec = _lstm_backward(cache.decoder, dh_dec, params["dec.recurrent"], params["dec.kernel"], True)
    # every repeat of the encoder state feeds the decoder; gradients add up
    dh_enc = np.zeros_like(cache.encoder.h)
    dh_enc[:, -1] = step_sum(dx_dec)
    enc_grads, _ = _lstm_backward(cache.encoder, dh_enc, params["enc.recurrent"], params["enc.kernel"], False)
    for prefix, layer in (("dec", dec_grads), ("enc", enc_grads)):
        for k, v in layer.items():
            g[f"{prefix}.{k}"] = v

    g = {name: g[name] for name in PARAM_NAMES}
    if per_sample:
        return g
    return {name: repro_sum(v) for name, v in g.items()}
