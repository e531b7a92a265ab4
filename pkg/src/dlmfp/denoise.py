"""Baseline iterative denoising: full forward each step, heuristic-ranked unmasking."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .blocks import apportion_steps, partition_blocks
from .errors import ConfigurationError, ContractError, InputError
from .tensor_core import FlopCounter
from .trace import DLM, DecodeTrace

HEURISTICS = {
    "maskgit_confidence": _kernels.HEUR_CONFIDENCE,
    "entropy": _kernels.HEUR_ENTROPY,
    "topk_margin": _kernels.HEUR_MARGIN,
}


@dataclass
class SequenceState:
    tokens: np.ndarray
    prompt_len: int
    mask_id: int
    step: int

    @classmethod
    def initial(cls, prompt, gen_len: int, mask_id: int, steps: int) -> "SequenceState":
        prompt = np.asarray(prompt, dtype=np.int64)
        if prompt.ndim != 1 or prompt.size == 0:
            raise InputError("prompt must hold at least one token")
        if np.any(prompt == mask_id):
            raise InputError("prompt contains the MASK token")
        tokens = np.concatenate([prompt, np.full(gen_len, mask_id, dtype=np.int64)])
        return cls(tokens, int(prompt.size), mask_id, steps)

    @property
    def mask_set(self) -> np.ndarray:
        return np.flatnonzero(self.tokens == self.mask_id)

    def masked_in(self, lo: int, hi: int) -> np.ndarray:
        return lo + np.flatnonzero(self.tokens[lo:hi] == self.mask_id)

    @property
    def done(self) -> bool:
        return not np.any(self.tokens == self.mask_id)


@dataclass(frozen=True)
class UnmaskSchedule:
    total_steps: int
    counts: tuple[int, ...]


def make_schedule(n_masked: int, total_steps: int) -> UnmaskSchedule:
    """Near-equal per-step counts: each step unmasks floor or ceil of n/T, larger ones first."""
    if not 1 <= total_steps <= n_masked:
        raise ConfigurationError(f"steps={total_steps} must lie in [1, {n_masked}]")
    base, rem = divmod(n_masked, total_steps)
    return UnmaskSchedule(total_steps, tuple(base + (i < rem) for i in range(total_steps)))


def token_probs(logits, mask_id: int) -> np.ndarray:
    """Row-wise softmax with the MASK column excluded (probability 0)."""
    z = np.array(logits, dtype=np.float64, ndmin=2)
    z[:, mask_id] = -np.inf
    return _kernels.softmax_rows(z)


def score_positions(probs, heuristic: str) -> np.ndarray:
    """Higher score = unmask sooner."""
    if heuristic not in HEURISTICS:
        raise ConfigurationError(f"unknown heuristic {heuristic!r}; choose from {sorted(HEURISTICS)}")
    probs = np.array(probs, dtype=np.float64, ndmin=2)
    if probs.size and (np.any(probs < 0) or np.any(np.abs(probs.sum(axis=1) - 1.0) > 1e-4)):
        raise InputError("probability rows must be non-negative and sum to 1")
    return _kernels.heuristic_scores(probs, HEURISTICS[heuristic])


def select_unmask(state: SequenceState, scores, n: int, candidates=None) -> np.ndarray:
    """The ``n`` candidates with the highest scores (ties to the lower position), ascending."""
    cand = state.mask_set if candidates is None else np.asarray(candidates, dtype=np.int64)
    scores = np.asarray(scores, dtype=np.float64)
    if scores.shape != cand.shape:
        raise ContractError(f"{scores.size} scores for {cand.size} candidate positions")
    if not 1 <= n <= cand.size:
        raise ContractError(f"cannot unmask {n} of {cand.size} masked positions")
    order = np.lexsort((cand, -scores))
    return np.sort(cand[order[:n]])


def apply_unmask(state: SequenceState, positions, proposals) -> SequenceState:
    positions = np.asarray(positions, dtype=np.int64)
    proposals = np.asarray(proposals, dtype=np.int64)
    if positions.size == 0:
        raise ContractError("empty unmask set")
    if positions.shape != proposals.shape:
        raise ContractError("positions and proposals differ in length")
    if np.unique(positions).size != positions.size:
        raise ContractError("duplicate positions in unmask set")
    if np.any(positions < state.prompt_len) or np.any(positions >= state.tokens.size):
        raise ContractError("unmask position outside the generation region")
    if np.any(state.tokens[positions] != state.mask_id):
        raise ContractError("unmask position is not masked")
    if np.any(proposals == state.mask_id):
        raise ContractError("proposal is the MASK token")
    tokens = state.tokens.copy()
    tokens[positions] = proposals
    return SequenceState(tokens, state.prompt_len, state.mask_id, state.step - 1)


def check_decode_inputs(model, prompt, gen_len: int) -> np.ndarray:
    prompt = np.asarray(prompt, dtype=np.int64)
    if gen_len < 1:
        raise InputError(f"gen_len must be >= 1, got {gen_len}")
    if prompt.ndim != 1 or prompt.size == 0:
        raise InputError("prompt must hold at least one token")
    if prompt.min() < 0 or prompt.max() >= model.vocab_size or np.any(prompt == model.mask_id):
        raise InputError(f"prompt tokens must be non-MASK ids below {model.vocab_size}")
    if prompt.size + gen_len > model.max_len:
        raise InputError(f"prompt+gen_len={prompt.size + gen_len} exceeds model length {model.max_len}")
    return prompt


def block_plan(prompt_len: int, gen_len: int, steps: int | None, block_size: int | None):
    """Per-block (range, per-step counts); ``block_size=None`` means one block."""
    blocks = partition_blocks(prompt_len, gen_len, block_size or gen_len)
    steps = gen_len if steps is None else steps
    per_block = apportion_steps(blocks.lengths, steps)
    plan = []
    for i, t_b in enumerate(per_block):
        lo, hi = blocks.block_range(i)
        plan.append(((lo, hi), make_schedule(hi - lo, t_b).counts))
    return blocks, plan


def decode_baseline(model, prompt, gen_len: int, steps: int | None = None,
                    heuristic: str = "maskgit_confidence", block_size: int | None = None,
                    counter: FlopCounter | None = None, observer=None):
    """Uncached denoising: every step runs the model over the whole sequence.

    ``block_size`` restricts unmasking to one block at a time, left to right
    (semi-autoregressive); the forward pass still covers the full length.
    ``observer(state, keys, values)`` sees each pass's K/V before unmasking.
    Returns ``(tokens, trace)``.
    """
    prompt = check_decode_inputs(model, prompt, gen_len)
    if heuristic not in HEURISTICS:
        raise ConfigurationError(f"unknown heuristic {heuristic!r}")
    counter = counter if counter is not None else FlopCounter()
    _, plan = block_plan(prompt.size, gen_len, steps, block_size)
    state = SequenceState.initial(prompt, gen_len, model.mask_id, sum(len(c) for _, c in plan))
    L = state.tokens.size
    trace = DecodeTrace("baseline", prompt.size, gen_len)
    for (lo, hi), counts in plan:
        for n in counts:
            trace.begin_step(counter)
            logits, keys, values = model.forward_full(state.tokens, counter)
            trace.record_pass(DLM, L, L)
            if observer is not None:
                observer(state, keys, values)
            cand = state.masked_in(lo, hi)
            probs = token_probs(logits[cand], model.mask_id)
            chosen = select_unmask(state, score_positions(probs, heuristic), n, cand)
            proposals = probs[np.searchsorted(cand, chosen)].argmax(axis=1)
            before = state.mask_set
            state = apply_unmask(state, chosen, proposals)
            trace.end_step(counter, L, before, chosen)
    return state.tokens, trace
