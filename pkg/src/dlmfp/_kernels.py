"""Hot inner loops, compiled with numba when available.

Every kernel exists twice: a loop version that numba compiles, and a
numpy (or plain-Python, for inherently sequential hashes) version used when
numba is missing or ``DLMFP_DISABLE_JIT=1`` is set.  The active set is bound
to module-level names at import time; with numba on it still routes the
BLAS-bound kernels to numpy (see ``active`` below).  Both full sets stay
reachable through ``numpy_impl`` and ``jit_impl`` so tests and the benchmark
can compare them.

Integer kernels (hashes, the counter-based generator, rule emission) are
bit-identical across backends.  Float kernels accumulate in float64 and agree
to rounding.
"""
from __future__ import annotations

import math
import os
from types import SimpleNamespace

import numpy as np

try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None

JIT_DISABLED = os.environ.get("DLMFP_DISABLE_JIT", "").strip().lower() not in ("", "0", "false", "no")
USE_JIT = numba is not None and not JIT_DISABLED
BACKEND = "numba" if USE_JIT else "numpy"

MASK64 = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15
MIX1 = 0xBF58476D1CE4E5B9
MIX2 = 0x94D049BB133111EB
FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
INV_2_53 = 1.0 / 9007199254740992.0

HEUR_CONFIDENCE = 0
HEUR_ENTROPY = 1
HEUR_MARGIN = 2


def mix64(x: int) -> int:
    """splitmix64 finalizer on a Python int (wraps at 64 bits)."""
    z = (x + GOLDEN) & MASK64
    z = ((z ^ (z >> 30)) * MIX1) & MASK64
    z = ((z ^ (z >> 27)) * MIX2) & MASK64
    return z ^ (z >> 31)


def stream_key(seed: int, stream: int) -> int:
    return mix64(mix64(seed & MASK64) ^ (stream & MASK64))


# ---------------------------------------------------------------------------
# numpy / pure-Python reference path
# ---------------------------------------------------------------------------

def _mix64_np(x: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        z = x + np.uint64(GOLDEN)
        z = (z ^ (z >> np.uint64(30))) * np.uint64(MIX1)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(MIX2)
    return z ^ (z >> np.uint64(31))


def uniform_stream_np(key: int, n: int) -> np.ndarray:
    with np.errstate(over="ignore"):
        x = np.uint64(key) + np.arange(n, dtype=np.uint64)
    z = _mix64_np(x)
    return (z >> np.uint64(11)).astype(np.float64) * INV_2_53


def fnv1a_bytes_np(buf: np.ndarray) -> int:
    h = FNV_OFFSET
    for b in buf.tobytes():
        h = ((h ^ b) * FNV_PRIME) & MASK64
    return h


def rule_emit_np(tokens, mask_id, modulus, p, blind_p, key, causal):
    tokens = [int(t) for t in tokens]
    n = len(tokens)
    comp = list(tokens)
    for i in range(n):
        if comp[i] == mask_id:
            a = comp[i - 1] if i >= 1 else 0
            b = comp[i - 2] if i >= 2 else 0
            comp[i] = (a + b) % modulus
    full_hash = FNV_OFFSET
    for t in tokens:
        full_hash = ((full_hash ^ (t & MASK64)) * FNV_PRIME) & MASK64
    emitted = np.empty(n, dtype=np.int64)
    blind = np.zeros(n, dtype=np.bool_)
    h = FNV_OFFSET
    shift = 1 if causal else 0
    for i in range(n):
        h = ((h ^ (tokens[i] & MASK64)) * FNV_PRIME) & MASK64
        target = i + shift
        a = comp[target - 1] if target >= 1 else 0
        b = comp[target - 2] if target >= 2 else 0
        correct = (a + b) % modulus
        is_blind = (target >= 1 and tokens[target - 1] == mask_id) or (
            target >= 2 and tokens[target - 2] == mask_id)
        ctx_hash = h if causal else full_hash
        u = (mix64(mix64(ctx_hash ^ key) + target) >> 11) * INV_2_53
        competence = blind_p if is_blind else p
        emitted[i] = correct if u < competence else (correct + 1) % modulus
        blind[i] = is_blind
    return emitted, blind


def softmax_rows_np(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    z = x - x.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def rms_norm_rows_np(x: np.ndarray, gain: np.ndarray, eps: float) -> np.ndarray:
    x64 = np.asarray(x, dtype=np.float64)
    ms = np.mean(x64 * x64, axis=1, keepdims=True)
    return (x64 / np.sqrt(ms + eps) * gain.astype(np.float64)).astype(np.float32)


def attention_np(q, k, v, n_heads, causal, q_offset):
    n, d = q.shape
    ctx = k.shape[0]
    dh = d // n_heads
    qh = q.astype(np.float64).reshape(n, n_heads, dh).transpose(1, 0, 2)
    kh = k.astype(np.float64).reshape(ctx, n_heads, dh).transpose(1, 0, 2)
    vh = v.astype(np.float64).reshape(ctx, n_heads, dh).transpose(1, 0, 2)
    scores = (qh @ kh.transpose(0, 2, 1)) * (1.0 / math.sqrt(dh))
    if causal:
        rows = np.arange(n)[:, None] + q_offset
        cols = np.arange(ctx)[None, :]
        scores = np.where(cols > rows, -np.inf, scores)
    scores = scores - scores.max(axis=2, keepdims=True)
    e = np.exp(scores)
    probs = e / e.sum(axis=2, keepdims=True)
    out = (probs @ vh).transpose(1, 0, 2).reshape(n, d)
    return out.astype(np.float32), probs


def heuristic_scores_np(probs: np.ndarray, kind: int) -> np.ndarray:
    probs = np.asarray(probs, dtype=np.float64)
    if kind == HEUR_CONFIDENCE:
        return probs.max(axis=1)
    if kind == HEUR_ENTROPY:
        with np.errstate(divide="ignore", invalid="ignore"):
            terms = np.where(probs > 0, probs * np.log(probs), 0.0)
        return terms.sum(axis=1)
    if probs.shape[1] < 2:
        return probs[:, 0].copy()
    top2 = -np.partition(-probs, 1, axis=1)[:, :2]
    return top2[:, 0] - top2[:, 1]


# ---------------------------------------------------------------------------
# loop path (compiled by numba)
# ---------------------------------------------------------------------------

def _mix64_loop(x):
    z = x + np.uint64(GOLDEN)
    z = (z ^ (z >> np.uint64(30))) * np.uint64(MIX1)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(MIX2)
    return z ^ (z >> np.uint64(31))


def _uniform_stream_loop(key, n):
    out = np.empty(n, dtype=np.float64)
    base = np.uint64(key)
    for j in range(n):
        z = _mix64_loop(base + np.uint64(j))
        out[j] = np.float64(z >> np.uint64(11)) * INV_2_53
    return out


def _fnv1a_bytes_loop(buf):
    h = np.uint64(FNV_OFFSET)
    prime = np.uint64(FNV_PRIME)
    for j in range(buf.shape[0]):
        h = (h ^ np.uint64(buf[j])) * prime
    return h


def _rule_emit_loop(tokens, mask_id, modulus, p, blind_p, key, causal):
    n = tokens.shape[0]
    comp = tokens.copy()
    for i in range(n):
        if comp[i] == mask_id:
            a = comp[i - 1] if i >= 1 else 0
            b = comp[i - 2] if i >= 2 else 0
            comp[i] = (a + b) % modulus
    prime = np.uint64(FNV_PRIME)
    full_hash = np.uint64(FNV_OFFSET)
    for i in range(n):
        full_hash = (full_hash ^ np.uint64(tokens[i])) * prime
    emitted = np.empty(n, dtype=np.int64)
    blind = np.zeros(n, dtype=np.bool_)
    h = np.uint64(FNV_OFFSET)
    shift = 1 if causal else 0
    ukey = np.uint64(key)
    for i in range(n):
        h = (h ^ np.uint64(tokens[i])) * prime
        target = i + shift
        a = comp[target - 1] if target >= 1 else 0
        b = comp[target - 2] if target >= 2 else 0
        correct = (a + b) % modulus
        is_blind = False
        if target >= 1 and tokens[target - 1] == mask_id:
            is_blind = True
        if target >= 2 and tokens[target - 2] == mask_id:
            is_blind = True
        ctx_hash = h if causal else full_hash
        z = _mix64_loop(_mix64_loop(ctx_hash ^ ukey) + np.uint64(target))
        u = np.float64(z >> np.uint64(11)) * INV_2_53
        competence = blind_p if is_blind else p
        emitted[i] = correct if u < competence else (correct + 1) % modulus
        blind[i] = is_blind
    return emitted, blind


def _softmax_rows_loop(x):
    n, m = x.shape
    out = np.empty((n, m), dtype=np.float64)
    for i in range(n):
        mx = x[i, 0]
        for j in range(1, m):
            if x[i, j] > mx:
                mx = x[i, j]
        s = 0.0
        for j in range(m):
            e = math.exp(np.float64(x[i, j]) - mx)
            out[i, j] = e
            s += e
        for j in range(m):
            out[i, j] /= s
    return out


def _rms_norm_rows_loop(x, gain, eps):
    n, m = x.shape
    out = np.empty((n, m), dtype=np.float32)
    for i in range(n):
        ss = 0.0
        for j in range(m):
            xv = np.float64(x[i, j])
            ss += xv * xv
        inv = 1.0 / math.sqrt(ss / m + eps)
        for j in range(m):
            out[i, j] = np.float32(np.float64(x[i, j]) * inv * np.float64(gain[j]))
    return out


def _attention_loop(q, k, v, n_heads, causal, q_offset):
    n, d = q.shape
    ctx = k.shape[0]
    dh = d // n_heads
    scale = 1.0 / math.sqrt(dh)
    qf, kf, vf = q.astype(np.float64), k.astype(np.float64), v.astype(np.float64)
    out = np.zeros((n, d), dtype=np.float32)
    probs = np.zeros((n_heads, n, ctx), dtype=np.float64)
    for idx in range(n_heads * n):
        hd = idx // n
        r = idx - hd * n
        c0 = hd * dh
        limit = ctx
        if causal:
            limit = min(ctx, q_offset + r + 1)
        mx = -np.inf
        for j in range(limit):
            s = 0.0
            for c in range(dh):
                s += qf[r, c0 + c] * kf[j, c0 + c]
            s *= scale
            probs[hd, r, j] = s
            if s > mx:
                mx = s
        tot = 0.0
        for j in range(limit):
            e = math.exp(probs[hd, r, j] - mx)
            probs[hd, r, j] = e
            tot += e
        acc = np.zeros(dh, dtype=np.float64)
        for j in range(limit):
            w = probs[hd, r, j] / tot
            probs[hd, r, j] = w
            for c in range(dh):
                acc[c] += w * vf[j, c0 + c]
        for c in range(dh):
            out[r, c0 + c] = np.float32(acc[c])
    return out, probs


def _heuristic_scores_loop(probs, kind):
    n, m = probs.shape
    out = np.empty(n, dtype=np.float64)
    for i in range(n):
        if kind == 0:
            best = probs[i, 0]
            for j in range(1, m):
                if probs[i, j] > best:
                    best = probs[i, j]
            out[i] = best
        elif kind == 1:
            s = 0.0
            for j in range(m):
                pv = probs[i, j]
                if pv > 0.0:
                    s += pv * math.log(pv)
            out[i] = s
        else:
            first = -np.inf
            second = -np.inf
            for j in range(m):
                pv = probs[i, j]
                if pv > first:
                    second = first
                    first = pv
                elif pv > second:
                    second = pv
            if m < 2:
                second = 0.0
            out[i] = first - second
    return out


numpy_impl = SimpleNamespace(
    uniform_stream=uniform_stream_np,
    fnv1a_bytes=fnv1a_bytes_np,
    rule_emit=rule_emit_np,
    softmax_rows=softmax_rows_np,
    rms_norm_rows=rms_norm_rows_np,
    attention=attention_np,
    heuristic_scores=heuristic_scores_np,
)

jit_impl = None
if numba is not None:
    _jit = numba.njit(cache=True, nogil=True)
    _mix64_loop = _jit(_mix64_loop)
    _uniform_jit = _jit(_uniform_stream_loop)
    _fnv_jit = _jit(_fnv1a_bytes_loop)
    _rule_jit = _jit(_rule_emit_loop)

    def _uniform_stream_jit(key, n):
        return _uniform_jit(np.uint64(key), n)

    def _fnv1a_bytes_jit(buf):
        return int(_fnv_jit(np.ascontiguousarray(buf, dtype=np.uint8)))

    def _rule_emit_jit(tokens, mask_id, modulus, p, blind_p, key, causal):
        return _rule_jit(np.ascontiguousarray(tokens, dtype=np.int64), int(mask_id), int(modulus),
                         float(p), float(blind_p), np.uint64(key), bool(causal))

    _softmax_jit = _jit(_softmax_rows_loop)
    _rms_jit = _jit(_rms_norm_rows_loop)
    _attn_jit = _jit(_attention_loop)
    _heur_jit = _jit(_heuristic_scores_loop)

    jit_impl = SimpleNamespace(
        uniform_stream=_uniform_stream_jit,
        fnv1a_bytes=_fnv1a_bytes_jit,
        rule_emit=_rule_emit_jit,
        softmax_rows=lambda x: _softmax_jit(np.ascontiguousarray(x, dtype=np.float64)),
        rms_norm_rows=lambda x, gain, eps: _rms_jit(
            np.ascontiguousarray(x, dtype=np.float32), np.ascontiguousarray(gain, dtype=np.float32), float(eps)),
        attention=lambda q, k, v, n_heads, causal, q_offset: _attn_jit(
            np.ascontiguousarray(q, dtype=np.float32), np.ascontiguousarray(k, dtype=np.float32),
            np.ascontiguousarray(v, dtype=np.float32), int(n_heads), bool(causal), int(q_offset)),
        heuristic_scores=lambda probs, kind: _heur_jit(np.ascontiguousarray(probs, dtype=np.float64), int(kind)),
    )

# The loop attention and heuristic scoring lose to BLAS-backed numpy at every
# shape we benchmarked, so the compiled backend keeps numpy for those two.
if USE_JIT:
    active = SimpleNamespace(**vars(jit_impl))
    active.attention = numpy_impl.attention
    active.heuristic_scores = numpy_impl.heuristic_scores
else:
    active = numpy_impl

uniform_stream = active.uniform_stream
fnv1a_bytes = active.fnv1a_bytes
rule_emit = active.rule_emit
softmax_rows = active.softmax_rows
rms_norm_rows = active.rms_norm_rows
attention = active.attention
heuristic_scores = active.heuristic_scores
