"""Analytic cost models, FLOP verification, and KV-stability heatmaps."""
from __future__ import annotations

import csv
import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .denoise import decode_baseline
from .errors import ConfigurationError, VerificationError
from .models import ModelSpec, tensor_shapes
from .trace import DLM, GUIDER, DecodeTrace, GuidedStepRecord, PassRecord, StepRecord

__all__ = [
    "DecodeTrace", "StepRecord", "PassRecord", "GuidedStepRecord", "MODULES", "flops_analytic", "pass_flops",
    "verify_flops", "FlopReport", "memory_estimate", "SimilarityHeatmap", "kv_similarity_heatmap",
    "write_heatmap", "read_heatmap_csv",
]

MODULES = ("wq", "wk", "wv", "wout", "qk", "sv", "w1", "w2", "head")
FLOAT_BYTES = 4


def pass_flops(spec: ModelSpec, n_query: int, n_ctx: int) -> dict[str, int]:
    """Multiply-add FLOPs (x2) of one forward pass: ``n_query`` rows against ``n_ctx`` context rows."""
    d, f, nl = spec.d, spec.d_ff, spec.n_layers
    proj = 2 * n_query * d * d * nl
    mix = 2 * n_query * n_ctx * d * nl
    ffn = 2 * n_query * d * f * nl
    return {"wq": proj, "wk": proj, "wv": proj, "wout": proj, "qk": mix, "sv": mix,
            "w1": ffn, "w2": ffn, "head": 2 * n_query * d * spec.V}


def flops_analytic(spec: ModelSpec, L: int, l: int | None = None, mode: str = "dlm_step",
                   window: int | None = None) -> dict[str, int]:
    """Per-module FLOPs for one step, with a ``total`` entry.

    ``ar_decode_step``: one new token against a prefix of length ``l``.
    ``dlm_step``: all ``L`` positions.  ``dlm_windowed_step``: ``window``
    query positions attending over all ``L``.
    """
    if mode == "ar_decode_step":
        if l is None or l < 1:
            raise ConfigurationError("ar_decode_step needs a prefix length l >= 1")
        out = pass_flops(spec, 1, l)
    elif mode == "dlm_step":
        out = pass_flops(spec, L, L)
    elif mode == "dlm_windowed_step":
        if window is None or not 0 <= window <= L:
            raise ConfigurationError(f"window must lie in [0, {L}]")
        out = pass_flops(spec, window, L)
    else:
        raise ConfigurationError(f"unknown mode {mode!r}")
    out["total"] = sum(out[m] for m in MODULES)
    return out


@dataclass
class FlopReport:
    steps_checked: int
    total_flops: int
    per_step: list[int] = field(default_factory=list)


def verify_flops(trace: DecodeTrace, spec: ModelSpec | None, guider_spec: ModelSpec | None = None) -> FlopReport:
    """Check every step's instrumented FLOPs against the analytic model, exactly.

    A ``None`` spec stands for a rule model, which performs no matmuls.
    Raises VerificationError at the first offending step.
    """
    specs = {DLM: spec, GUIDER: guider_spec}
    per_step = []
    for rec in trace.steps:
        expected = Counter()
        for p in rec.passes:
            role_spec = specs.get(p.role)
            if role_spec is not None:
                expected.update(pass_flops(role_spec, p.n_query, p.n_ctx))
        want_total = sum(expected.values())
        got = {k: v for k, v in rec.flops_by_module.items() if v}
        want = {k: v for k, v in expected.items() if v}
        if rec.flops != want_total or got != want:
            diff = {m: (got.get(m, 0), want.get(m, 0)) for m in set(got) | set(want) if got.get(m, 0) != want.get(m, 0)}
            raise VerificationError(
                f"step {rec.step}: instrumented {rec.flops} != analytic {want_total}; per module {diff}", step=rec.step)
        per_step.append(rec.flops)
    return FlopReport(len(trace.steps), sum(per_step), per_step)


def _activation_elems(spec: ModelSpec, L: int) -> int:
    phases = [L * spec.d + L * spec.V]
    if spec.n_layers:
        phases.append(5 * L * spec.d + spec.h * L * L)
        phases.append(2 * L * spec.d + L * spec.d_ff)
    return max(phases)


def memory_estimate(spec: ModelSpec, L: int, cache_present: bool = True, guider_spec: ModelSpec | None = None,
                    guider_L: int | None = None) -> dict[str, int]:
    """Analytic byte counts for the denoiser, the guider, and their total.

    The guider, when given, always keeps its own KV cache.
    """
    def one(s: ModelSpec, length: int, cached: bool) -> dict[str, int]:
        params = sum(int(np.prod(shape)) for _, shape in tensor_shapes(s))
        return {
            "weights": params * FLOAT_BYTES,
            "kv_cache": s.n_layers * 2 * length * s.d * FLOAT_BYTES if cached else 0,
            "activations": _activation_elems(s, length) * FLOAT_BYTES,
        }

    out = one(spec, L, cache_present)
    out["dlm"] = out["weights"] + out["kv_cache"] + out["activations"]
    out["guider"] = 0
    if guider_spec is not None:
        out["guider"] = sum(one(guider_spec, guider_L or L, True).values())
    out["total"] = out["dlm"] + out["guider"]
    return out


@dataclass
class SimilarityHeatmap:
    """Cosine similarity of each position's K or V row to the previous pass.

    Row r compares pass r+1 with pass r; pass 0 is the fully masked input and
    the last pass runs on the finished sequence.  ``masked[t, i]`` records
    whether position i was masked in the input to pass t.
    """

    matrix: np.ndarray
    layer: int
    kind: str
    prompt_len: int
    masked: np.ndarray
    degenerate: np.ndarray

    @property
    def steps(self) -> int:
        return self.matrix.shape[0]

    def still_masked(self) -> np.ndarray:
        return self.masked[1:]

    def settled(self) -> np.ndarray:
        """Generated positions already unmasked in the pass before the compared pair."""
        out = np.zeros_like(self.matrix, dtype=bool)
        out[1:] = ~self.masked[:-2]
        out[:, :self.prompt_len] = False
        return out


def _cosine(a: np.ndarray, b: np.ndarray):
    a64, b64 = a.astype(np.float64), b.astype(np.float64)
    na, nb = np.linalg.norm(a64, axis=1), np.linalg.norm(b64, axis=1)
    degenerate = (na == 0) | (nb == 0)
    with np.errstate(invalid="ignore", divide="ignore"):
        sim = np.einsum("ij,ij->i", a64, b64) / (na * nb)
    sim = np.where(degenerate, 0.0, np.clip(sim, -1.0, 1.0))
    # identical rows are exactly 1; the division above can land an ulp off
    same = np.all(a == b, axis=1) & ~degenerate
    return np.where(same, 1.0, sim), degenerate


def kv_similarity_heatmap(model, prompt, gen_len: int, steps: int | None = None,
                          heuristic: str = "maskgit_confidence", layer: int = 0, kind: str = "V",
                          block_size: int | None = None) -> SimilarityHeatmap:
    n_layers = model.spec.n_layers
    if not 0 <= layer < n_layers:
        raise ConfigurationError(f"layer {layer} outside [0, {n_layers})")
    if kind not in ("K", "V"):
        raise ConfigurationError(f"kind must be 'K' or 'V', got {kind!r}")
    snaps, masked = [], []

    def observe(state, keys, values):
        snaps.append((keys if kind == "K" else values)[layer].copy())
        masked.append(state.tokens == state.mask_id)

    tokens, _ = decode_baseline(model, prompt, gen_len, steps, heuristic, block_size, observer=observe)
    _, keys, values = model.forward_full(tokens)
    snaps.append((keys if kind == "K" else values)[layer].copy())
    masked.append(tokens == model.mask_id)

    rows, flags = zip(*(_cosine(snaps[t + 1], snaps[t]) for t in range(len(snaps) - 1)))
    return SimilarityHeatmap(np.vstack(rows), layer, kind, int(np.size(prompt)), np.vstack(masked), np.vstack(flags))


def write_heatmap(hm: SimilarityHeatmap, prefix) -> tuple[Path, Path]:
    """Write ``<prefix>.csv`` (header = positions, one row per step) and a JSON sidecar."""
    prefix = Path(prefix)
    csv_path, json_path = prefix.with_suffix(".csv"), prefix.with_suffix(".json")
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(range(hm.matrix.shape[1]))
        for row in hm.matrix:
            w.writerow(repr(float(x)) for x in row)
    meta = {
        "schema": 1, "layer": hm.layer, "kind": hm.kind, "steps": hm.steps, "positions": hm.matrix.shape[1],
        "prompt_len": hm.prompt_len, "degenerate": [[int(t), int(i)] for t, i in zip(*np.nonzero(hm.degenerate))],
    }
    json_path.write_text(json.dumps(meta, indent=2) + "\n")
    return csv_path, json_path


def read_heatmap_csv(path) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return np.array([[float(x) for x in r] for r in rows[1:]], dtype=np.float64)
