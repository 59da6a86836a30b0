"""MAE loss and the Adam update."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .tensor import DimensionError

DEFAULT_LR = 0.00025


def mae_loss(pred: np.ndarray, target: np.ndarray, count: int | None = None):
    """Mean absolute error and its subgradient with respect to ``pred``.

    ``count`` overrides the divisor; data-parallel workers pass the global
    number of entries so local gradients already carry the global scale.
    The subgradient uses sign(0) = 0.
    """
    pred = np.asarray(pred)
    target = np.asarray(target)
    if pred.shape != target.shape:
        raise DimensionError(f"mae_loss shape mismatch: {pred.shape} vs {target.shape}")
    n = pred.size if count is None else count
    diff = pred - target.astype(pred.dtype, copy=False)
    loss = float(np.abs(diff, dtype=np.float64).sum()) / n
    d_pred = (np.sign(diff) / pred.dtype.type(n)).astype(pred.dtype, copy=False)
    return loss, d_pred


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0
    lr: float = DEFAULT_LR
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-7

    @classmethod
    def zeros_like(cls, params: dict[str, np.ndarray], **hyper) -> "AdamState":
        return cls(m={k: np.zeros_like(p) for k, p in params.items()},
                   v={k: np.zeros_like(p) for k, p in params.items()}, **hyper)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState):
    """One bias-corrected Adam update; returns ``(params', state')`` without mutating inputs.

    The update is ``theta - lr * m_hat / (sqrt(v_hat) + eps)``.
    """
    if state.t < 0:
        raise ValueError("step counter must be non-negative")
    if set(params) != set(grads) or set(params) != set(state.m):
        raise DimensionError("params, grads and optimizer state hold different tensors")
    t = state.t + 1
    b1, b2 = state.beta1, state.beta2
    corr1 = 1.0 - b1 ** t
    corr2 = 1.0 - b2 ** t
    new_params, new_m, new_v = {}, {}, {}
    for name, theta in params.items():
        g = grads[name]
        if g.shape != theta.shape or state.m[name].shape != theta.shape:
            raise DimensionError(f"{name}: grad {g.shape} / moment {state.m[name].shape} vs param {theta.shape}")
        dt = theta.dtype.type
        m = dt(b1) * state.m[name] + dt(1 - b1) * g
        v = dt(b2) * state.v[name] + dt(1 - b2) * (g * g)
        m_hat = m / dt(corr1)
        v_hat = v / dt(corr2)
        new_params[name] = theta - dt(state.lr) * m_hat / (np.sqrt(v_hat) + dt(state.epsilon))
        new_m[name] = m
        new_v[name] = v
    return new_params, replace(state, m=new_m, v=new_v, t=t)
