"""Checkpoint file: model dimensions, parameters and optimizer state.

Layout (all integers unsigned 64-bit little-endian)::

    b"SRTCKPT1"
    flat_dim, window, horizon, enc, dec, head, precision, tensor_count
    per tensor: name_length, UTF-8 name, rank, extents..., raw LE payload

``precision`` is 0 for float32 and 1 for float64; every payload uses it.
Optimizer moments are stored as ``adam.m.<param>`` / ``adam.v.<param>``
and the step counter as the one-element tensor ``adam.step``.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .model import PARAM_NAMES, ModelDims
from .optim import AdamState
from .tensor import resolve_dtype

CKPT_MAGIC = b"SRTCKPT1"
_U64 = struct.Struct("<Q")
_FLAGS = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


class CheckpointFormatError(ValueError):
    pass


def encode(dims: ModelDims, params: dict[str, np.ndarray], state: AdamState | None = None) -> bytes:
    dtype = params[PARAM_NAMES[0]].dtype
    tensors = [(name, params[name]) for name in PARAM_NAMES]
    if state is not None:
        tensors += [(f"adam.m.{n}", state.m[n]) for n in PARAM_NAMES]
        tensors += [(f"adam.v.{n}", state.v[n]) for n in PARAM_NAMES]
        tensors.append(("adam.step", np.array([state.t], dtype=dtype)))
    parts = [CKPT_MAGIC, struct.pack("<8Q", dims.flat_dim, dims.window, dims.horizon, dims.encoder_units,
                                     dims.decoder_units, dims.head_units, _FLAGS[dtype], len(tensors))]
    le = dtype.newbyteorder("<")
    for name, arr in tensors:
        if arr.dtype != dtype:
            raise CheckpointFormatError(f"{name} has dtype {arr.dtype}, checkpoint precision is {dtype}")
        raw = name.encode("utf-8")
        parts.append(_U64.pack(len(raw)) + raw + _U64.pack(arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=le).tobytes())
    return b"".join(parts)


def decode(raw: bytes):
    """Returns ``(dims, params, state_or_None)``."""
    if raw[:8] != CKPT_MAGIC:
        raise CheckpointFormatError("bad checkpoint magic at byte 0")
    if len(raw) < 72:
        raise CheckpointFormatError(f"truncated header at byte {len(raw)}")
    f, w, h, enc, dec, head, flag, count = struct.unpack_from("<8Q", raw, 8)
    if flag not in (0, 1):
        raise CheckpointFormatError(f"unknown precision flag {flag} at byte 56")
    dims = ModelDims(f, w, h, enc, dec, head)
    dtype = resolve_dtype("f32" if flag == 0 else "f64")
    le = dtype.newbyteorder("<")
    pos = 72
    tensors = {}

    def take(n):
        nonlocal pos
        if pos + n > len(raw):
            raise CheckpointFormatError(f"truncated at byte {pos}: need {n} more bytes")
        out = raw[pos:pos + n]
        pos += n
        return out

    for _ in range(count):
        name = take(_U64.unpack(take(8))[0]).decode("utf-8")
        ndim = _U64.unpack(take(8))[0]
        shape = struct.unpack(f"<{ndim}Q", take(8 * ndim))
        n = int(np.prod(shape, dtype=np.int64))
        tensors[name] = np.frombuffer(take(n * dtype.itemsize), dtype=le).reshape(shape).astype(dtype)
    if pos != len(raw):
        raise CheckpointFormatError(f"{len(raw) - pos} unexpected trailing bytes at byte {pos}")

    expected = dims.param_shapes()
    params = {}
    for name in PARAM_NAMES:
        if name not in tensors:
            raise CheckpointFormatError(f"missing tensor {name}")
        if tensors[name].shape != expected[name]:
            raise CheckpointFormatError(f"{name} has shape {tensors[name].shape}, dims imply {expected[name]}")
        params[name] = tensors[name]
    state = None
    if "adam.step" in tensors:
        state = AdamState(m={n: tensors[f"adam.m.{n}"] for n in PARAM_NAMES},
                          v={n: tensors[f"adam.v.{n}"] for n in PARAM_NAMES},
                          t=int(tensors["adam.step"][0]))
    return dims, params, state


def save(path, dims: ModelDims, params, state: AdamState | None = None) -> None:
    Path(path).write_bytes(encode(dims, params, state))


def load(path):
    return decode(Path(path).read_bytes())
