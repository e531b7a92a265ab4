"""Reducing-window KV caching for the denoising loop.

The generation region is tiled into fixed-size blocks.  One full pass fills
the cache; afterwards each step recomputes only the active window
``[frozen_len, L)`` (the current block and everything after it) while
attending to frozen keys/values for the prompt and finished blocks.

A finished block is frozen after the first pass that sees it fully unmasked,
i.e. at the start of the next block.  That pass is needed anyway, so the
frozen entries come from clean tokens at no extra cost.
"""
from __future__ import annotations

import numpy as np

from .blocks import BlockSchedule, partition_blocks
from .denoise import (HEURISTICS, SequenceState, apply_unmask, block_plan, check_decode_inputs, score_positions,
                      select_unmask, token_probs)
from .errors import ConfigurationError, ContractError
from .models import KVCache
from .tensor_core import FlopCounter
from .trace import DLM, DecodeTrace

DEFAULT_BLOCK_SIZE = 256

__all__ = [
    "BlockSchedule", "KVCache", "partition_blocks", "initial_pass", "freeze_block", "decode_block",
    "decode_freecache", "DEFAULT_BLOCK_SIZE",
]


def initial_pass(model, tokens, prompt_len: int, counter: FlopCounter | None = None):
    """Full pass over the fully masked sequence.

    Returns ``(cache, logits)``; the cache has the prompt frozen.  The logits
    serve the first denoising step, so no pass is wasted.
    """
    logits, keys, values = model.forward_full(tokens, counter)
    return KVCache(keys.copy(), values.copy(), frozen_len=int(prompt_len)), logits


def freeze_block(cache: KVCache, schedule: BlockSchedule, state: SequenceState) -> None:
    """Freeze the oldest unfrozen block; it must contain no MASK."""
    if schedule.n_frozen >= schedule.n_blocks:
        raise ContractError("every block is already frozen")
    lo, hi = schedule.block_range(schedule.n_frozen)
    if cache.frozen_len != lo:
        raise ContractError(f"frozen prefix ends at {cache.frozen_len}, block starts at {lo}")
    if state.masked_in(lo, hi).size:
        raise ContractError(f"block {schedule.n_frozen} still contains MASK")
    cache.frozen_len = hi
    schedule.n_frozen += 1


def _freeze_finished(cache, schedule, state):
    while schedule.n_frozen < schedule.current_block:
        freeze_block(cache, schedule, state)


def decode_block(model, state: SequenceState, cache: KVCache, schedule: BlockSchedule, counts,
                 heuristic: str, counter: FlopCounter, trace: DecodeTrace, initial_logits=None,
                 observer=None) -> SequenceState:
    """Unmask the current block with windowed passes, one step per entry of ``counts``.

    Blocks before the current one must be unmasked; the one immediately
    before may still await freezing, which happens right after this block's
    first pass.  ``initial_logits`` (full-length) replace the first pass; the
    caller has already opened that step on the trace.
    """
    b = schedule.current_block
    lo, hi = schedule.block_range(b)
    if schedule.n_frozen < b - 1 or state.masked_in(schedule.prompt_len, lo).size:
        raise ContractError(f"blocks before {b} are not finished")
    L = state.tokens.size
    for i, n in enumerate(counts):
        if i == 0 and initial_logits is not None:
            logits, start = initial_logits, 0
        else:
            trace.begin_step(counter)
            start = cache.frozen_len
            logits = model.forward_windowed(state.tokens, cache, start, counter)
            trace.record_pass(DLM, L - start, L)
            _freeze_finished(cache, schedule, state)
        cand = state.masked_in(lo, hi)
        probs = token_probs(logits[cand - start], model.mask_id)
        chosen = select_unmask(state, score_positions(probs, heuristic), n, cand)
        proposals = probs[np.searchsorted(cand, chosen)].argmax(axis=1)
        before = state.mask_set
        state = apply_unmask(state, chosen, proposals)
        trace.end_step(counter, L - start, before, chosen)
        if observer is not None:
            observer(state, cache)
    if state.masked_in(lo, hi).size:
        raise ContractError(f"block {b} not fully unmasked by its schedule")
    schedule.current_block += 1
    return state


def decode_freecache(model, prompt, gen_len: int, block_size: int = DEFAULT_BLOCK_SIZE, steps: int | None = None,
                     heuristic: str = "maskgit_confidence", counter: FlopCounter | None = None, observer=None):
    """Block-wise denoising with a shrinking recomputation window.

    ``steps`` is the total step budget, apportioned over blocks by length
    (default: one token per step).  ``observer(state, cache)`` runs after
    every step.  Returns ``(tokens, trace)``.
    """
    prompt = check_decode_inputs(model, prompt, gen_len)
    if heuristic not in HEURISTICS:
        raise ConfigurationError(f"unknown heuristic {heuristic!r}")
    counter = counter if counter is not None else FlopCounter()
    schedule, plan = block_plan(prompt.size, gen_len, steps, block_size)
    state = SequenceState.initial(prompt, gen_len, model.mask_id, sum(len(c) for _, c in plan))
    L = state.tokens.size
    trace = DecodeTrace("freecache", prompt.size, gen_len)

    trace.begin_step(counter)
    cache, logits = initial_pass(model, state.tokens, prompt.size, counter)
    trace.record_pass(DLM, L, L)
    for b, (_, counts) in enumerate(plan):
        state = decode_block(model, state, cache, schedule, counts, heuristic, counter, trace,
                             initial_logits=logits if b == 0 else None, observer=observer)
    # no pass follows the last block, so its entries are frozen as computed
    _freeze_finished(cache, schedule, state)
    return state.tokens, trace
