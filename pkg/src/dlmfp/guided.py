"""AR-guided unmasking.

Each step the denoiser drafts every masked position of the current
speculation window in a single pass.  A frozen causal guider reads the
draft-filled sequence once, and the longest run of draft tokens that fall in
the guider's top-K sets is committed.  When nothing matches, only the first
masked position is committed.  Drafting runs on the reducing-window cache, so
the guider composes with block freezing.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .denoise import SequenceState, apply_unmask, block_plan, check_decode_inputs, token_probs
from .errors import ConfigurationError, ContractError
from .freecache import DEFAULT_BLOCK_SIZE, _freeze_finished, initial_pass
from .models import CAUSAL
from .tensor_core import FlopCounter, top_k_rows
from .trace import DLM, GUIDER, DecodeTrace, GuidedStepRecord

DETERMINISTIC = "deterministic_prefix"
STOCHASTIC = "stochastic"


@dataclass(frozen=True)
class GuidanceConfig:
    speculation_block: int = 32
    topk_match: int = 2
    tau: float = 0.5
    mode: str = DETERMINISTIC
    fallback_source: str = "dlm"
    match: str = "prefix"

    def __post_init__(self):
        if self.speculation_block < 1:
            raise ConfigurationError("speculation_block must be >= 1")
        if self.topk_match < 1:
            raise ConfigurationError("topk_match must be >= 1")
        if not self.tau >= 0:
            raise ConfigurationError(f"tau must be >= 0, got {self.tau}")
        if self.mode not in (DETERMINISTIC, STOCHASTIC):
            raise ConfigurationError(f"unknown guidance mode {self.mode!r}")
        if self.fallback_source not in ("dlm", "ar"):
            raise ConfigurationError(f"fallback_source must be 'dlm' or 'ar', got {self.fallback_source!r}")
        if self.match not in ("prefix", "count"):
            raise ConfigurationError(f"match must be 'prefix' or 'count', got {self.match!r}")


def draft_from_logits(logits_rows, mask_id: int):
    probs = token_probs(logits_rows, mask_id)
    tokens = probs.argmax(axis=1)
    return tokens, probs[np.arange(tokens.size), tokens]


def dlm_draft(dlm_model, state: SequenceState, positions=None, counter: FlopCounter | None = None):
    """Top-1 draft and its probability for masked ``positions`` (default: all masked), one full pass."""
    positions = state.mask_set if positions is None else np.asarray(positions, dtype=np.int64)
    if positions.size == 0:
        raise ContractError("nothing left to draft")
    if np.any(state.tokens[positions] != state.mask_id):
        raise ContractError("draft requested for an unmasked position")
    logits, _, _ = dlm_model.forward_full(state.tokens, counter)
    return draft_from_logits(logits[positions], state.mask_id)


def verify_from_logits(logits_rows, mask_id: int, k: int):
    probs = token_probs(logits_rows, mask_id)
    if k > probs.shape[1]:
        raise ConfigurationError(f"topk_match={k} exceeds the vocabulary ({probs.shape[1]})")
    ids = top_k_rows(probs, k)
    return ids, np.take_along_axis(probs, ids, axis=1)


def ar_verify(ar_model, filled, positions, k: int, counter: FlopCounter | None = None):
    """Guider top-``k`` ids and probabilities for each position, read from the row before it."""
    filled = np.asarray(filled, dtype=np.int64)
    positions = np.asarray(positions, dtype=np.int64)
    if np.any(filled == ar_model.mask_id):
        raise ContractError("guider input still contains MASK")
    if positions.size and positions.min() < 1:
        raise ContractError("position 0 has no predecessor for the guider to read")
    logits, _, _ = ar_model.forward_full(filled, counter)
    return verify_from_logits(logits[positions - 1], ar_model.mask_id, k)


def prefix_match(draft, guider_sets, match: str = "prefix") -> int:
    """Length of the leading run of draft tokens found in the guider's sets.

    ``match="count"`` instead counts agreeing positions anywhere in the window.
    """
    draft = np.asarray(draft)
    sets = np.asarray(guider_sets)
    if sets.ndim == 1:
        sets = sets[:, None]
    if sets.shape[0] != draft.size:
        raise ContractError("draft and guider sets differ in length")
    agree = np.any(sets == draft[:, None], axis=1)
    if match == "count":
        return int(agree.sum())
    misses = np.flatnonzero(~agree)
    return int(misses[0]) if misses.size else int(draft.size)


def stochastic_accept(draft_max_probs, guider_topk_probs, tau: float) -> np.ndarray:
    """Accept where the draft probability exceeds ``tau`` times the guider's top-K maximum."""
    if not tau >= 0:
        raise ConfigurationError(f"tau must be >= 0, got {tau}")
    g = np.array(guider_topk_probs, dtype=np.float64, ndmin=2)
    return np.asarray(draft_max_probs, dtype=np.float64) > tau * g.max(axis=1)


def decode_guided(dlm_model, ar_model, prompt, gen_len: int, cfg: GuidanceConfig | None = None,
                  block_size: int = DEFAULT_BLOCK_SIZE, counter: FlopCounter | None = None, observer=None):
    """Guided decode over reducing-window blocks.  Returns ``(tokens, trace)``.

    The guider keeps its own causal cache over the committed prefix, so each
    verification pass only recomputes the freshly drafted span.
    """
    cfg = cfg or GuidanceConfig()
    if dlm_model.vocab_size != ar_model.vocab_size or dlm_model.mask_id != ar_model.mask_id:
        raise ConfigurationError("denoiser and guider vocabularies differ")
    if ar_model.mode != CAUSAL:
        raise ConfigurationError("the guider must be a causal model")
    prompt = check_decode_inputs(dlm_model, prompt, gen_len)
    if prompt.size + gen_len > ar_model.max_len:
        raise ConfigurationError("sequence does not fit the guider's maximum length")
    counter = counter if counter is not None else FlopCounter()
    # guided steps replace the per-step unmask counts; only the block tiling is used
    schedule, _ = block_plan(prompt.size, gen_len, None, block_size)
    state = SequenceState.initial(prompt, gen_len, dlm_model.mask_id, gen_len)
    mask_id = dlm_model.mask_id
    L = state.tokens.size
    policy = "guided_stochastic" if cfg.mode == STOCHASTIC else "guided"
    trace = DecodeTrace(policy, prompt.size, gen_len)

    trace.begin_step(counter)
    cache, logits = initial_pass(dlm_model, state.tokens, prompt.size, counter)
    trace.record_pass(DLM, L, L)
    start = 0
    ar_cache = ar_model.new_cache(L)

    for b in range(schedule.n_blocks):
        lo, hi = schedule.block_range(b)
        while True:
            masked = state.masked_in(lo, hi)
            if masked.size == 0:
                break
            if logits is None:
                trace.begin_step(counter)
                start = cache.frozen_len
                logits = dlm_model.forward_windowed(state.tokens, cache, start, counter)
                trace.record_pass(DLM, L - start, L)
                _freeze_finished(cache, schedule, state)
            window_len = L - start
            spec_pos = masked[:cfg.speculation_block]
            draft, draft_p = draft_from_logits(logits[spec_pos - start], mask_id)
            logits = None

            filled = state.tokens.copy()
            filled[spec_pos] = draft
            end = int(spec_pos[-1]) + 1
            ar_start = ar_cache.frozen_len
            ar_logits = ar_model.forward_windowed(filled[:end], ar_cache, ar_start, counter)
            trace.record_pass(GUIDER, end - ar_start, end)
            top_ids, top_p = verify_from_logits(ar_logits[spec_pos - 1 - ar_start], mask_id, cfg.topk_match)

            k = prefix_match(draft, top_ids, cfg.match)
            accept = np.zeros(spec_pos.size, dtype=bool)
            accept[:k] = True
            if cfg.mode == STOCHASTIC:
                accept |= stochastic_accept(draft_p, top_p, cfg.tau)
            proposals = draft.copy()
            fallback = not accept.any()
            if fallback:
                accept[0] = True
                if cfg.fallback_source == "ar":
                    proposals[0] = top_ids[0, 0]
            chosen = spec_pos[accept]
            before = state.mask_set
            state = apply_unmask(state, chosen, proposals[accept])

            remaining = state.mask_set
            limit = min(end, int(remaining[0]) - 1) if remaining.size else end
            differs = np.flatnonzero(filled[ar_start:end] != state.tokens[ar_start:end])
            if differs.size:
                limit = min(limit, ar_start + int(differs[0]))
            ar_cache.frozen_len = max(ar_cache.frozen_len, limit)

            record = GuidedStepRecord(tuple(int(i) for i in spec_pos), tuple(int(t) for t in draft),
                                      tuple(tuple(int(t) for t in row) for row in top_ids), int(k),
                                      tuple(int(i) for i in chosen), fallback)
            trace.end_step(counter, window_len, before, chosen, guided=record)
            if observer is not None:
                observer(state, cache)
        schedule.current_block += 1
    _freeze_finished(cache, schedule, state)
    return state.tokens, trace
