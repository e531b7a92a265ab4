"""Small deterministic transformers: a bidirectional denoiser and a causal guider.

Pre-norm residual blocks, learned absolute positions, GELU feed-forward,
untied output head.  The MASK token is the last vocabulary id and is embedded
like any other token.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .errors import ConfigurationError, ContractError, InputError
from .tensor_core import FlopCounter, attention, matmul, rms_norm

BIDIRECTIONAL = "bidirectional"
CAUSAL = "causal"
MODES = (BIDIRECTIONAL, CAUSAL)


@dataclass(frozen=True)
class ModelSpec:
    d: int
    h: int
    n_layers: int
    d_ff: int
    V: int
    L_max: int
    mode: str = BIDIRECTIONAL

    def __post_init__(self):
        if self.d < 1 or self.h < 1 or self.d % self.h:
            raise ConfigurationError(f"d={self.d} must be a positive multiple of h={self.h}")
        if self.V < 2:
            raise ConfigurationError(f"V={self.V} must be at least 2")
        if self.L_max < 1:
            raise ConfigurationError(f"L_max={self.L_max} must be at least 1")
        if self.n_layers < 0 or self.d_ff < 1:
            raise ConfigurationError("n_layers must be >= 0 and d_ff >= 1")
        if self.mode not in MODES:
            raise ConfigurationError(f"unknown attention mode {self.mode!r}")

    @property
    def mask_id(self) -> int:
        return self.V - 1

    @property
    def causal(self) -> bool:
        return self.mode == CAUSAL


@dataclass
class LayerWeights:
    attn_gain: np.ndarray
    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    w_out: np.ndarray
    ffn_gain: np.ndarray
    w_1: np.ndarray
    w_2: np.ndarray

    FIELDS = ("attn_gain", "w_q", "w_k", "w_v", "w_out", "ffn_gain", "w_1", "w_2")


@dataclass
class Weights:
    tok_emb: np.ndarray
    pos_emb: np.ndarray
    layers: list[LayerWeights]
    final_gain: np.ndarray
    head: np.ndarray

    def tensors(self) -> list[tuple[str, np.ndarray]]:
        """All tensors in file/declaration order."""
        out = [("tok_emb", self.tok_emb), ("pos_emb", self.pos_emb)]
        for i, layer in enumerate(self.layers):
            out.extend((f"layers.{i}.{name}", getattr(layer, name)) for name in LayerWeights.FIELDS)
        out.append(("final_gain", self.final_gain))
        out.append(("head", self.head))
        return out

    def parameter_count(self) -> int:
        return sum(t.size for _, t in self.tensors())


def tensor_shapes(spec: ModelSpec) -> list[tuple[str, tuple[int, ...]]]:
    d, f = spec.d, spec.d_ff
    shapes = [("tok_emb", (spec.V, d)), ("pos_emb", (spec.L_max, d))]
    per_layer = {
        "attn_gain": (d,), "w_q": (d, d), "w_k": (d, d), "w_v": (d, d), "w_out": (d, d),
        "ffn_gain": (d,), "w_1": (d, f), "w_2": (f, d),
    }
    for i in range(spec.n_layers):
        shapes.extend((f"layers.{i}.{name}", per_layer[name]) for name in LayerWeights.FIELDS)
    shapes.append(("final_gain", (d,)))
    shapes.append(("head", (d, spec.V)))
    return shapes


def weights_from_tensors(spec: ModelSpec, arrays: list[np.ndarray]) -> Weights:
    expected = tensor_shapes(spec)
    if len(arrays) != len(expected):
        raise ConfigurationError(f"expected {len(expected)} tensors, got {len(arrays)}")
    for (name, shape), arr in zip(expected, arrays):
        if arr.shape != shape:
            raise ConfigurationError(f"{name}: shape {arr.shape} != {shape}")
    it = iter(arrays)
    tok, pos = next(it), next(it)
    layers = [LayerWeights(*(next(it) for _ in LayerWeights.FIELDS)) for _ in range(spec.n_layers)]
    return Weights(tok, pos, layers, next(it), next(it))


def init_weights(spec: ModelSpec, seed: int) -> Weights:
    """Seeded uniform(-1/sqrt(d), 1/sqrt(d)) init from a counter-based splitmix64 stream.

    Tensor number i in declaration order draws from stream i, so a given
    (spec, seed) yields the same bits on every platform.  Norm gains start at 1.
    """
    bound = 1.0 / math.sqrt(spec.d)
    arrays = []
    for stream, (name, shape) in enumerate(tensor_shapes(spec)):
        if name.endswith("gain"):
            arrays.append(np.ones(shape, dtype=np.float32))
            continue
        u = _kernels.uniform_stream(_kernels.stream_key(seed, stream), int(np.prod(shape)))
        arrays.append(((2.0 * u - 1.0) * bound).astype(np.float32).reshape(shape))
    return weights_from_tensors(spec, arrays)


@dataclass
class KVCache:
    """Per-layer keys/values over the whole sequence plus the frozen-prefix length."""

    keys: np.ndarray
    values: np.ndarray
    frozen_len: int = 0

    @classmethod
    def empty(cls, n_layers: int, length: int, d: int) -> "KVCache":
        shape = (n_layers, length, d)
        return cls(np.zeros(shape, dtype=np.float32), np.zeros(shape, dtype=np.float32), 0)

    @property
    def length(self) -> int:
        return self.keys.shape[1]


def _gelu(x: np.ndarray) -> np.ndarray:
    x64 = x.astype(np.float64)
    return (0.5 * x64 * (1.0 + np.tanh(0.7978845608028654 * (x64 + 0.044715 * x64 * x64 * x64)))).astype(np.float32)


def _check_tokens(spec: ModelSpec, tokens) -> np.ndarray:
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim != 1 or tokens.size == 0:
        raise InputError("tokens must be a non-empty 1-D sequence")
    if tokens.size > spec.L_max:
        raise InputError(f"sequence length {tokens.size} exceeds L_max={spec.L_max}")
    if tokens.min() < 0 or tokens.max() >= spec.V:
        raise InputError(f"token ids must lie in [0, {spec.V})")
    return tokens


def _block(spec, layer: LayerWeights, x, layer_idx, keys_out, values_out, k_ctx_fn, q_offset, counter, attn_sink):
    hn = rms_norm(x, layer.attn_gain)
    q = matmul(hn, layer.w_q, counter, "wq")
    k = matmul(hn, layer.w_k, counter, "wk")
    v = matmul(hn, layer.w_v, counter, "wv")
    keys_out[layer_idx, q_offset:q_offset + x.shape[0]] = k
    values_out[layer_idx, q_offset:q_offset + x.shape[0]] = v
    k_ctx, v_ctx = k_ctx_fn(layer_idx)
    res = attention(q, k_ctx, v_ctx, spec.h, spec.causal, q_offset, counter, return_probs=attn_sink is not None)
    if attn_sink is not None:
        res, probs = res
        attn_sink.append(probs)
    x = x + matmul(res, layer.w_out, counter, "wout")
    hn = rms_norm(x, layer.ffn_gain)
    x = x + matmul(_gelu(matmul(hn, layer.w_1, counter, "w1")), layer.w_2, counter, "w2")
    return x


def forward_full(spec: ModelSpec, weights: Weights, tokens, counter: FlopCounter | None = None,
                 attn_sink: list | None = None):
    """Full forward pass.  Returns ``(logits L x V, keys, values)`` with K/V shaped ``(n_layers, L, d)``."""
    tokens = _check_tokens(spec, tokens)
    L = tokens.size
    keys = np.zeros((spec.n_layers, L, spec.d), dtype=np.float32)
    values = np.zeros_like(keys)
    x = weights.tok_emb[tokens] + weights.pos_emb[:L]
    for i, layer in enumerate(weights.layers):
        x = _block(spec, layer, x, i, keys, values, lambda j: (keys[j], values[j]), 0, counter, attn_sink)
    logits = matmul(rms_norm(x, weights.final_gain), weights.head, counter, "head")
    return logits, keys, values


def forward_windowed(spec: ModelSpec, weights: Weights, tokens, cache: KVCache, window_start: int,
                     counter: FlopCounter | None = None) -> np.ndarray:
    """Recompute only positions ``[window_start, len(tokens))`` against cached context.

    Keys/values for the window are written into ``cache``; entries below
    ``cache.frozen_len`` are never touched.  ``tokens`` may be shorter than the
    cache; context beyond ``len(tokens)`` is ignored.
    """
    tokens = _check_tokens(spec, tokens)
    L = tokens.size
    if window_start != cache.frozen_len:
        raise ContractError(f"window starts at {window_start} but frozen prefix has length {cache.frozen_len}")
    if L > cache.length:
        raise ContractError(f"sequence length {L} exceeds cache length {cache.length}")
    if cache.keys.shape[0] != spec.n_layers or cache.keys.shape[2] != spec.d:
        raise ContractError("cache shape does not match the model")
    if window_start >= L:
        return np.zeros((0, spec.V), dtype=np.float32)
    x = weights.tok_emb[tokens[window_start:]] + weights.pos_emb[window_start:L]
    for i, layer in enumerate(weights.layers):
        x = _block(spec, layer, x, i, cache.keys, cache.values,
                   lambda j: (cache.keys[j, :L], cache.values[j, :L]), window_start, counter, None)
    return matmul(rms_norm(x, weights.final_gain), weights.head, counter, "head")


@dataclass
class Transformer:
    """A ModelSpec bound to its weights, exposing the decode-loop model interface."""

    spec: ModelSpec
    weights: Weights = field(repr=False)

    @property
    def vocab_size(self) -> int:
        return self.spec.V

    @property
    def mask_id(self) -> int:
        return self.spec.mask_id

    @property
    def mode(self) -> str:
        return self.spec.mode

    @property
    def max_len(self) -> int:
        return self.spec.L_max

    @property
    def flop_spec(self) -> ModelSpec:
        return self.spec

    def new_cache(self, length: int) -> KVCache:
        return KVCache.empty(self.spec.n_layers, length, self.spec.d)

    def forward_full(self, tokens, counter=None):
        return forward_full(self.spec, self.weights, tokens, counter)

    def forward_windowed(self, tokens, cache, window_start, counter=None):
        return forward_windowed(self.spec, self.weights, tokens, cache, window_start, counter)


def random_transformer(spec: ModelSpec, seed: int) -> Transformer:
    return Transformer(spec, init_weights(spec, seed))
