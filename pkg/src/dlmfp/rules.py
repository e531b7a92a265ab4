"""Rule-based stand-in models with tunable competence.

The synthetic language is the additive recurrence
``t[i] = (t[i-1] + t[i-2]) mod (V-1)``; id ``V-1`` is MASK and is never
emitted.  A RuleModel predicts the recurrence correctly with probability
``p`` (``blind_p`` when one of the two inputs is still masked), otherwise it
emits ``correct + 1``.  Coins are a pure function of (seed, context hash,
target position), so identical inputs always give identical outputs.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .errors import ConfigurationError, ContractError, InputError
from .models import BIDIRECTIONAL, CAUSAL, MODES, KVCache

_RULE_STREAM = 0x52554C45
MASK_LOGIT = -30.0


@dataclass(frozen=True)
class RuleModel:
    V: int
    p: float = 1.0
    seed: int = 0
    mode: str = BIDIRECTIONAL
    blind_p: float | None = None
    rule: str = "fib"
    sharpness: float = 2.0
    blind_sharpness: float = 0.5

    def __post_init__(self):
        if self.V < 4:
            raise ConfigurationError("rule models need V >= 4 (three real tokens plus MASK)")
        if not 0.0 <= self.p <= 1.0 or (self.blind_p is not None and not 0.0 <= self.blind_p <= 1.0):
            raise ConfigurationError("competence must lie in [0, 1]")
        if self.mode not in MODES:
            raise ConfigurationError(f"unknown mode {self.mode!r}")
        if self.rule != "fib":
            raise ConfigurationError(f"unknown rule {self.rule!r}")

    @property
    def vocab_size(self) -> int:
        return self.V

    @property
    def mask_id(self) -> int:
        return self.V - 1

    @property
    def modulus(self) -> int:
        return self.V - 1

    @property
    def max_len(self) -> int:
        return 1 << 30

    @property
    def flop_spec(self):
        return None

    @property
    def causal(self) -> bool:
        return self.mode == CAUSAL

    def _emit(self, tokens):
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.ndim != 1 or tokens.size == 0:
            raise InputError("tokens must be a non-empty 1-D sequence")
        if tokens.min() < 0 or tokens.max() >= self.V:
            raise InputError(f"token ids must lie in [0, {self.V})")
        blind_p = self.p if self.blind_p is None else self.blind_p
        key = _kernels.stream_key(self.seed, _RULE_STREAM)
        return _kernels.rule_emit(tokens, self.mask_id, self.modulus, self.p, blind_p, key, self.causal)

    def logits(self, tokens) -> np.ndarray:
        """Per-row logits: row i scores position i (bidirectional) or i+1 (causal)."""
        emitted, blind = self._emit(tokens)
        n = emitted.size
        scale = np.where(blind, self.blind_sharpness, self.sharpness).astype(np.float32)
        out = np.zeros((n, self.V), dtype=np.float32)
        rows = np.arange(n)
        out[rows, (emitted + 1) % self.modulus] = scale
        out[rows, emitted] = 2.0 * scale
        out[:, self.mask_id] = MASK_LOGIT
        return out

    def forward_full(self, tokens, counter=None):
        logits = self.logits(tokens)
        empty = np.zeros((0, logits.shape[0], 0), dtype=np.float32)
        return logits, empty, empty

    def forward_windowed(self, tokens, cache: KVCache, window_start: int, counter=None):
        if window_start != cache.frozen_len:
            raise ContractError(f"window starts at {window_start} but frozen prefix has length {cache.frozen_len}")
        return self.logits(tokens)[window_start:]

    def new_cache(self, length: int) -> KVCache:
        return KVCache.empty(0, length, 0)


def rule_predict(model: RuleModel, sequence, positions) -> np.ndarray:
    """Tokens the model proposes for ``positions``.

    A causal model's proposal for position i comes from its row i-1, so
    position 0 has no causal proposal.
    """
    positions = np.asarray(positions, dtype=np.int64)
    emitted, _ = model._emit(sequence)
    n = emitted.size
    if positions.size and (positions.min() < 0 or positions.max() >= n):
        raise ContractError("positions out of range")
    if model.causal:
        if positions.size and positions.min() < 1:
            raise ContractError("a causal model has no prediction for position 0")
        return emitted[positions - 1]
    return emitted[positions]


def rule_continue(prefix, length: int, modulus: int) -> np.ndarray:
    out = [int(t) for t in prefix]
    while len(out) < length:
        a = out[-1] if len(out) >= 1 else 0
        b = out[-2] if len(out) >= 2 else 0
        out.append((a + b) % modulus)
    return np.asarray(out[:length], dtype=np.int64)


def rule_prompt(V: int, length: int, seed: int) -> np.ndarray:
    """A rule-consistent prompt: two seeded starting tokens, then the recurrence."""
    if length < 1:
        raise InputError("prompt length must be at least 1")
    u = _kernels.uniform_stream(_kernels.stream_key(seed, 0x50524F4D), 2)
    start = (u * (V - 1)).astype(np.int64)
    return rule_continue(start[:min(length, 2)], length, V - 1)


def rule_match_rate(tokens, start: int, modulus: int) -> float:
    """Fraction of positions ``i >= max(start, 2)`` satisfying the recurrence."""
    tokens = np.asarray(tokens, dtype=np.int64)
    lo = max(start, 2)
    if lo >= tokens.size:
        return 1.0
    want = (tokens[lo - 1:-1] + tokens[lo - 2:-2]) % modulus
    return float(np.mean(tokens[lo:] == want))
