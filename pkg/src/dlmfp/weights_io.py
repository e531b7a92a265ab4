"""Binary weight files.

Layout (little-endian)::

    b"DLMW" | u32 version=1 | u32 d, h, n_layers, d_ff, V, L_max, mode
    float32 tensors, declaration order, row-major
    u64 FNV-1a checksum over the tensor bytes

mode is 0 for bidirectional, 1 for causal.
"""
from __future__ import annotations

import os
import struct
from pathlib import Path

import numpy as np

from . import _kernels
from .errors import ConfigurationError, FormatError
from .models import BIDIRECTIONAL, CAUSAL, ModelSpec, Weights, tensor_shapes, weights_from_tensors

MAGIC = b"DLMW"
VERSION = 1
_HEADER = struct.Struct("<4sI7I")
_CHECKSUM = struct.Struct("<Q")
_MODE_CODES = {BIDIRECTIONAL: 0, CAUSAL: 1}


def payload_bytes(weights: Weights) -> bytes:
    return b"".join(np.ascontiguousarray(t, dtype="<f4").tobytes() for _, t in weights.tensors())


def weights_checksum(weights: Weights) -> int:
    return _kernels.fnv1a_bytes(np.frombuffer(payload_bytes(weights), dtype=np.uint8))


def save_weights(spec: ModelSpec, weights: Weights, path) -> int:
    """Write ``weights`` to ``path`` and return the payload checksum."""
    payload = payload_bytes(weights)
    checksum = _kernels.fnv1a_bytes(np.frombuffer(payload, dtype=np.uint8))
    header = _HEADER.pack(MAGIC, VERSION, spec.d, spec.h, spec.n_layers, spec.d_ff, spec.V, spec.L_max,
                          _MODE_CODES[spec.mode])
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(header)
        fh.write(payload)
        fh.write(_CHECKSUM.pack(checksum))
    os.replace(tmp, path)
    return checksum


def load_weights(path) -> tuple[ModelSpec, Weights]:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise FormatError(f"file too short for header ({len(data)} bytes)", offset=len(data))
    magic, version, d, h, n_layers, d_ff, V, L_max, mode = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}", offset=0)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", offset=4)
    modes = {v: k for k, v in _MODE_CODES.items()}
    if mode not in modes:
        raise FormatError(f"unknown mode code {mode}", offset=32)
    try:
        spec = ModelSpec(d, h, n_layers, d_ff, V, L_max, modes[mode])
    except ConfigurationError as exc:
        raise FormatError(f"invalid header: {exc}", offset=8) from None

    shapes = tensor_shapes(spec)
    n_floats = sum(int(np.prod(s)) for _, s in shapes)
    end_payload = _HEADER.size + 4 * n_floats
    if len(data) < end_payload + _CHECKSUM.size:
        raise FormatError(f"truncated file: need {end_payload + _CHECKSUM.size} bytes, have {len(data)}",
                          offset=len(data))
    if len(data) > end_payload + _CHECKSUM.size:
        raise FormatError("trailing bytes after checksum", offset=end_payload + _CHECKSUM.size)
    payload = np.frombuffer(data, dtype=np.uint8, count=4 * n_floats, offset=_HEADER.size)
    (stored,) = _CHECKSUM.unpack_from(data, end_payload)
    actual = _kernels.fnv1a_bytes(payload)
    if stored != actual:
        raise FormatError(f"checksum mismatch: stored {stored:#018x}, computed {actual:#018x}", offset=end_payload)

    floats = np.frombuffer(data, dtype="<f4", count=n_floats, offset=_HEADER.size).astype(np.float32)
    arrays, pos = [], 0
    for _, shape in shapes:
        size = int(np.prod(shape))
        arrays.append(floats[pos:pos + size].reshape(shape).copy())
        pos += size
    return spec, weights_from_tensors(spec, arrays)
