"""Dense kernels with exact FLOP accounting.

Storage is float32; products and normalizations accumulate in float64.  Only
matrix multiply-adds are counted (2 per multiply-add), attributed to a module
tag so per-module totals can be checked against the analytic model.
"""
from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .errors import ConfigurationError

RMS_EPS = 1e-6


@dataclass
class FlopCounter:
    """Per-session multiply-add counter.  Never shared between sessions."""

    total: int = 0
    by_module: Counter = field(default_factory=Counter)

    def add(self, flops: int, module: str = "other") -> None:
        self.total += int(flops)
        self.by_module[module] += int(flops)

    def snapshot(self) -> tuple[int, dict[str, int]]:
        return self.total, dict(self.by_module)


def matmul(a: np.ndarray, b: np.ndarray, counter: FlopCounter | None = None, module: str = "other") -> np.ndarray:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ConfigurationError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    out = (a.astype(np.float64) @ b.astype(np.float64)).astype(np.float32)
    if counter is not None:
        counter.add(2 * a.shape[0] * a.shape[1] * b.shape[1], module)
    return out


def attention(q: np.ndarray, k: np.ndarray, v: np.ndarray, n_heads: int, causal: bool,
              q_offset: int = 0, counter: FlopCounter | None = None, return_probs: bool = False):
    """Multi-head scaled dot-product attention.

    ``q`` holds queries for absolute positions ``q_offset .. q_offset+n-1``;
    ``k``/``v`` hold the full context.  In causal mode a query at absolute
    position p sees context rows ``<= p``.  The score and mixing products are
    counted as full ``n x ctx`` matmuls even when causal masking zeroes part
    of them, mirroring how a dense implementation would run.
    """
    n, d = q.shape
    ctx = k.shape[0]
    if k.shape[1] != d or v.shape != k.shape or d % n_heads:
        raise ConfigurationError(f"attention shape mismatch: q{q.shape} k{k.shape} v{v.shape} heads={n_heads}")
    out, probs = _kernels.attention(q, k, v, n_heads, causal, q_offset)
    if counter is not None:
        counter.add(2 * n * ctx * d, "qk")
        counter.add(2 * n * ctx * d, "sv")
    if return_probs:
        return out, probs
    return out


def softmax_row(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.size == 0:
        raise ConfigurationError("softmax of an empty vector")
    return _kernels.softmax_rows(v.reshape(1, -1))[0]


def softmax_rows(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] == 0:
        raise ConfigurationError(f"softmax_rows needs a non-empty 2-D array, got {x.shape}")
    return _kernels.softmax_rows(x)


def argmax(v) -> int:
    """Index of the maximum; ties resolve to the lowest index."""
    v = np.asarray(v)
    if v.size == 0:
        raise ConfigurationError("argmax of an empty vector")
    return int(np.argmax(v))


def top_k(v, k: int) -> np.ndarray:
    """Indices of the k largest entries, descending; equal values keep ascending index order."""
    v = np.asarray(v)
    if not 1 <= k <= v.size:
        raise ConfigurationError(f"top_k: k={k} outside [1, {v.size}]")
    return np.argsort(-v.astype(np.float64), kind="stable")[:k]


def top_k_rows(x: np.ndarray, k: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if not 1 <= k <= x.shape[1]:
        raise ConfigurationError(f"top_k: k={k} outside [1, {x.shape[1]}]")
    return np.argsort(-x, axis=1, kind="stable")[:, :k]


def rms_norm(v, gain) -> np.ndarray:
    v = np.asarray(v, dtype=np.float32)
    gain = np.asarray(gain, dtype=np.float32)
    if v.shape[-1] != gain.shape[0]:
        raise ConfigurationError(f"rms_norm: input width {v.shape[-1]} != gain width {gain.shape[0]}")
    if v.ndim == 1:
        return _kernels.rms_norm_rows(v.reshape(1, -1), gain, RMS_EPS)[0]
    return _kernels.rms_norm_rows(v, gain, RMS_EPS)
