"""Acceptance suite: one check per criterion, one PASS/FAIL line each.

Run directly (``python3 tests/test_acceptance.py``) for the summary, or
through pytest, where each criterion is its own test and prints its line
(visible with ``-s``).
"""
import sys
import time
from pathlib import Path

import numpy as np
from scipy.stats import binomtest

sys.path.insert(0, str(Path(__file__).parent))

from dlmfp.denoise import decode_baseline
from dlmfp.diagnostics import flops_analytic, kv_similarity_heatmap, verify_flops
from dlmfp.freecache import decode_freecache
from dlmfp.guided import GuidanceConfig, decode_guided, draft_from_logits, prefix_match, verify_from_logits
from dlmfp.models import ModelSpec, forward_full, random_transformer
from dlmfp.rules import RuleModel, rule_match_rate, rule_prompt
from dlmfp.tensor_core import softmax_row

from conftest import make_transformer, random_prompt
from recording import Recording

HEURISTICS = ("maskgit_confidence", "entropy", "topk_margin")


def report(number, title, check):
    try:
        detail = check()
    except AssertionError as exc:
        print(f"criterion {number:2d} FAIL  {title}: {exc}")
        raise
    print(f"criterion {number:2d} PASS  {title}: {detail}")


# 1 ------------------------------------------------------------------------

def check_one_layer_exactness():
    t0 = time.perf_counter()
    worst = 0.0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        V = int(rng.integers(6, 20))
        h = int(rng.choice([1, 2, 4]))
        m = make_transformer(d=4 * h * int(rng.integers(1, 3)), h=h, layers=1, d_ff=16, V=V, L=48, seed=seed)
        prompt = random_prompt(V, int(rng.integers(1, 8)), seed)
        gen_len, block = int(rng.integers(4, 33)), int(rng.choice([2, 4, 8, 16]))
        fc, base = Recording(m), Recording(m)
        t1, _ = decode_freecache(fc, prompt, gen_len, block)
        t2, _ = decode_baseline(base, prompt, gen_len, block_size=block)
        assert np.array_equal(t1, t2), f"seed {seed}: tokens differ"
        assert len(fc.calls) == len(base.calls), f"seed {seed}: pass counts differ"
        for (start, win), (_, full) in zip(fc.calls, base.calls):
            ref = full[start:]
            gap = float(np.max(np.abs(win - ref)) / max(float(np.max(np.abs(ref))), 1e-30))
            worst = max(worst, gap)
    elapsed = time.perf_counter() - t0
    assert worst <= 1e-5, f"worst relative logit gap {worst:.2e}"
    assert elapsed < 60, f"took {elapsed:.1f}s"
    return f"100/100 identical, worst relative logit gap {worst:.1e}, {elapsed:.1f}s"


def test_criterion_01_one_layer_freecache_exactness():
    report(1, "1-layer FreeCache exactness", check_one_layer_exactness)


# 2 ------------------------------------------------------------------------

def _assert_loop_invariants(trace, prompt_len, gen_len, T):
    masked = set(range(prompt_len, prompt_len + gen_len))
    sizes = []
    for rec in trace.steps:
        before, chosen = set(rec.masked_before), set(rec.unmasked)
        assert before == masked, f"{trace.policy} step {rec.step}: mask set drifted"
        assert chosen and chosen <= before, f"{trace.policy} step {rec.step}: U_t not within M_t"
        masked = before - chosen
        sizes.append(len(masked))
    assert all(a > b for a, b in zip([gen_len] + sizes, sizes)), f"{trace.policy}: |M| not strictly decreasing"
    assert not masked, f"{trace.policy}: masks remain"
    if T is not None:
        assert len(trace) == T, f"{trace.policy}: {len(trace)} steps, expected {T}"


def check_loop_invariants():
    runs = 0
    for seed in range(40):
        rng = np.random.default_rng(1000 + seed)
        m = make_transformer(layers=int(rng.integers(1, 4)), seed=seed)
        ar = make_transformer(layers=1, mode="causal", seed=seed + 1)
        p = random_prompt(11, int(rng.integers(1, 6)), seed)
        G = int(rng.integers(4, 25))
        T = int(rng.integers(1, G + 1))
        block = int(rng.integers(1, G + 1))
        heur = HEURISTICS[seed % 3]
        _, tr = decode_baseline(m, p, G, T, heur)
        _assert_loop_invariants(tr, p.size, G, T)
        n_blocks = -(-G // block)
        T_fc = max(T, n_blocks)
        _, tr = decode_freecache(m, p, G, block, T_fc, heur)
        _assert_loop_invariants(tr, p.size, G, T_fc)
        _, tr = decode_guided(m, ar, p, G, GuidanceConfig(speculation_block=int(rng.integers(1, 9))), block)
        _assert_loop_invariants(tr, p.size, G, None)
        runs += 3
    return f"{runs} runs, every step satisfied U_t in M_t, M_next = M_t minus U_t, |M| decreasing, T steps"


def test_criterion_02_denoising_loop_invariants():
    report(2, "denoising-loop invariants", check_loop_invariants)


# 3 ------------------------------------------------------------------------

def check_guided_limits():
    prompt = rule_prompt(11, 4, 0)
    dlm = RuleModel(11, 1.0, seed=1)
    cfg = GuidanceConfig(speculation_block=32)
    _, tr = decode_guided(dlm, RuleModel(11, 1.0, seed=2, mode="causal"), prompt, 128, cfg)
    assert (tr.dlm_passes, tr.ar_passes) == (4, 4), f"full agreement: {tr.dlm_passes}/{tr.ar_passes} passes"
    toks, tr0 = decode_guided(dlm, RuleModel(11, 0.0, seed=2, mode="causal"), prompt, 128, cfg)
    base, _ = decode_baseline(dlm, prompt, 128, 128)
    assert len(tr0) == 128, f"zero agreement took {len(tr0)} steps"
    assert np.array_equal(toks, base), "zero agreement output differs from sequential decode"
    return "full agreement 4 DLM + 4 guider passes; zero agreement 128 steps, output equals sequential"


def test_criterion_03_guided_step_counts():
    report(3, "guided full/zero agreement", check_guided_limits)


# 4 ------------------------------------------------------------------------

def check_progress_and_soundness():
    n_steps = n_prefix = 0
    seed = 0
    while n_steps < 1000:
        rng = np.random.default_rng(seed)
        if seed % 2:
            dlm = make_transformer(layers=2, seed=seed)
            ar = make_transformer(layers=1, mode="causal", seed=seed + 7)
            prompt = random_prompt(11, 3, seed)
        else:
            dlm = RuleModel(11, float(rng.uniform(0.5, 1)), seed=seed, blind_p=float(rng.uniform(0, 1)))
            ar = RuleModel(11, float(rng.uniform(0, 1)), seed=seed + 1, mode="causal")
            prompt = rule_prompt(11, 3, seed)
        cfg = GuidanceConfig(speculation_block=int(rng.integers(1, 12)), topk_match=int(rng.integers(1, 4)),
                             fallback_source="dlm" if seed % 3 else "ar")
        toks, trace = decode_guided(dlm, ar, prompt, 40, cfg, block_size=int(rng.integers(4, 41)))
        for s in trace.steps:
            g = s.guided
            assert len(g.accepted) >= 1, f"seed {seed} step {s.step}: no progress"
            draft = dict(zip(g.positions, g.draft))
            for pos in g.positions[:g.k]:
                assert toks[pos] == draft[pos], f"seed {seed}: prefix-accepted token differs from draft"
                n_prefix += 1
        n_steps += len(trace)
        seed += 1
    return f"{n_steps} guided steps all progressed; {n_prefix} prefix-accepted tokens equal their drafts"


def test_criterion_04_progress_and_soundness():
    report(4, "guided progress and soundness", check_progress_and_soundness)


# 5 ------------------------------------------------------------------------

def check_topk_monotone():
    strict = 0
    for seed in range(1000):
        rng = np.random.default_rng(seed)
        n, V = int(rng.integers(1, 33)), int(rng.integers(6, 40))
        scale = float(rng.uniform(0.1, 4))
        draft, _ = draft_from_logits(rng.standard_normal((n, V)) * scale, V - 1)
        guider = rng.standard_normal((n, V)) * scale
        ks = [prefix_match(draft, verify_from_logits(guider, V - 1, K)[0]) for K in (1, 2, 5)]
        assert ks == sorted(ks), f"seed {seed}: k over K=1,2,5 is {ks}"
        strict += ks[0] < ks[-1]
    return f"1000 pairs non-decreasing in K ({strict} strictly increasing)"


def test_criterion_05_topk_monotonicity():
    report(5, "top-K monotonicity", check_topk_monotone)


# 6 ------------------------------------------------------------------------

def check_tau_limits():
    for seed in range(20):
        if seed % 2:
            dlm, ar = make_transformer(layers=2, seed=seed), make_transformer(layers=1, mode="causal", seed=seed + 3)
            prompt = random_prompt(11, 4, seed)
        else:
            dlm = RuleModel(11, 0.8, seed=seed, blind_p=0.4)
            ar = RuleModel(11, 0.5, seed=seed + 1, mode="causal")
            prompt = rule_prompt(11, 4, seed)
        spec_block = 8
        zero = GuidanceConfig(speculation_block=spec_block, mode="stochastic", tau=0.0)
        _, tr = decode_guided(dlm, ar, prompt, 32, zero)
        assert len(tr.steps[0].unmasked) == spec_block, f"seed {seed}: tau=0 did not take the whole window"
        assert len(tr) == 32 // spec_block, f"seed {seed}: tau=0 took {len(tr)} steps"
        t1, a = decode_guided(dlm, ar, prompt, 32, GuidanceConfig(spec_block, mode="stochastic", tau=1e9))
        t2, b = decode_guided(dlm, ar, prompt, 32, GuidanceConfig(spec_block))
        assert np.array_equal(t1, t2), f"seed {seed}: tau=1e9 output differs"
        assert [s.unmasked for s in a.steps] == [s.unmasked for s in b.steps], f"seed {seed}: steps differ"
    return "20 seeds: tau=0 commits each window in one step; tau=1e9 matches deterministic step-for-step"


def test_criterion_06_stochastic_tau_limits():
    report(6, "stochastic tau limits", check_tau_limits)


# 7 ------------------------------------------------------------------------

def check_flop_fidelity():
    checked = 0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        h = int(rng.choice([1, 2, 4]))
        spec = ModelSpec(h * int(rng.integers(1, 5)), h, int(rng.integers(0, 4)), int(rng.integers(1, 40)),
                         int(rng.integers(4, 30)), 64)
        m = random_transformer(spec, seed)
        ar = random_transformer(ModelSpec(spec.d, h, int(rng.integers(1, 3)), 8, spec.V, 64, "causal"), seed + 1)
        prompt = random_prompt(spec.V, int(rng.integers(1, 6)), seed)
        G = int(rng.integers(4, 30))
        block = int(rng.integers(2, G + 1))
        traces = [
            (decode_baseline(m, prompt, G, int(rng.integers(1, G + 1)))[1], None),
            (decode_freecache(m, prompt, G, block)[1], None),
            (decode_guided(m, ar, prompt, G, GuidanceConfig(int(rng.integers(1, 8))), block)[1], ar.spec),
        ]
        for trace, gspec in traces:
            rep = verify_flops(trace, spec, gspec)
            assert rep.total_flops == trace.total_flops
            checked += rep.steps_checked
        for L in (1, 17, 64):
            dlm_step = flops_analytic(spec, L, mode="dlm_step")
            ar_step = flops_analytic(spec, L, l=L, mode="ar_decode_step")
            for mod in ("wq", "wk", "wv", "wout", "w1", "w2", "head"):
                assert dlm_step[mod] == L * ar_step[mod], f"{mod} ratio at L={L}"
    return f"20 specs x 3 policies, {checked} steps exactly equal; projection ratio == L"


def test_criterion_07_flop_model_fidelity():
    report(7, "FLOP model fidelity", check_flop_fidelity)


# 8 ------------------------------------------------------------------------

def check_reducing_window():
    runs = freezes = 0
    for seed in range(30):
        rng = np.random.default_rng(seed)
        m = make_transformer(layers=int(rng.integers(1, 4)), seed=seed)
        G = int(rng.integers(8, 33))
        block = int(rng.integers(2, G // 2 + 1))
        seen = []
        steps = int(rng.integers(-(-G // block), G + 1))
        _, trace = decode_freecache(m, random_prompt(11, 4, seed), G, block, steps,
                                    observer=lambda s, c: seen.append((c.frozen_len, c.keys.copy(), c.values.copy())))
        flops = [r.flops for r in trace.steps]
        assert all(a >= b for a, b in zip(flops, flops[1:])), f"seed {seed}: FLOPs rose"
        for s in range(len(seen) - 1):
            # a freeze seen after step s+2 must shrink step s+3, if there is one
            if seen[s + 1][0] > seen[s][0] and s + 2 < len(flops):
                freezes += 1
                assert flops[s + 2] < flops[s + 1], f"seed {seed}: no drop after freeze at step {s + 2}"
        for s, (f, k, v) in enumerate(seen):
            for _, k2, v2 in seen[s + 1:]:
                assert np.array_equal(k[:, :f], k2[:, :f]) and np.array_equal(v[:, :f], v2[:, :f]), \
                    f"seed {seed}: frozen entries changed"
        runs += 1
    return f"{runs} multi-block runs, {freezes} freezes, FLOPs non-increasing, frozen K/V bit-stable"


def test_criterion_08_reducing_window_law():
    report(8, "reducing-window law", check_reducing_window)


# 9 ------------------------------------------------------------------------

def check_causality_and_stability():
    worst_row = worst_shift = 0.0
    for seed in range(30):
        rng = np.random.default_rng(seed)
        m = make_transformer(layers=int(rng.integers(1, 4)), mode="causal", seed=seed)
        toks = rng.integers(0, 11, 24)
        i = int(rng.integers(0, 23))
        edited = toks.copy()
        edited[i + 1:] = rng.integers(0, 11, 23 - i)
        a, _, _ = m.forward_full(toks)
        b, _, _ = m.forward_full(edited)
        assert np.array_equal(a[:i + 1], b[:i + 1]), f"seed {seed}: prefix logits changed"
        for mode in ("causal", "bidirectional"):
            sink = []
            mm = make_transformer(layers=2, h=2, mode=mode, seed=seed)
            forward_full(mm.spec, mm.weights, toks, attn_sink=sink)
            for probs in sink:
                worst_row = max(worst_row, float(np.max(np.abs(probs.sum(axis=-1) - 1.0))))
        v = rng.standard_normal(int(rng.integers(1, 50))) * 10
        c = float(rng.uniform(-100, 100))
        worst_shift = max(worst_shift, float(np.max(np.abs(softmax_row(v) - softmax_row(v + c)))))
    assert worst_row <= 1e-6, f"attention row sum off by {worst_row:.1e}"
    assert worst_shift <= 1e-6, f"softmax shift gap {worst_shift:.1e}"
    return f"suffix edits never touch prefix logits; row-sum error {worst_row:.1e}; shift gap {worst_shift:.1e}"


def test_criterion_09_causality_and_stability():
    report(9, "causality and numerical stability", check_causality_and_stability)


# 10 -----------------------------------------------------------------------

def heatmap_study(n_models=60, gen_len=16, steps=16):
    """Per layer: list of (mean clean similarity - mean masked similarity), one per model."""
    diffs = {}
    prompt_ok = True
    for seed in range(n_models):
        layers = 2 + seed % 3
        m = make_transformer(d=16, h=4, layers=layers, d_ff=32, V=13, L=32, seed=seed)
        prompt = random_prompt(13, 4, seed)
        for layer in range(layers):
            hm = kv_similarity_heatmap(m, prompt, gen_len, steps, layer=layer, kind="V")
            if layer == 0:
                prompt_ok &= bool(np.all(hm.matrix[:, :4] == 1.0))
            clean, masked = hm.settled() & ~hm.degenerate, hm.still_masked() & ~hm.degenerate
            diffs.setdefault(layer, []).append(float(hm.matrix[clean].mean() - hm.matrix[masked].mean()))
    return prompt_ok, diffs


def check_kv_stability():
    t0 = time.perf_counter()
    prompt_ok, diffs = heatmap_study()
    elapsed = time.perf_counter() - t0
    assert prompt_ok, "layer-0 prompt columns are not all exactly 1.0"
    parts, failed = [], []
    for layer, d in sorted(diffs.items()):
        d = np.asarray(d)
        wins, losses = int(np.sum(d > 0)), int(np.sum(d < 0))
        p = binomtest(wins, wins + losses, 0.5, alternative="greater").pvalue if wins + losses else 1.0
        parts.append(f"L{layer}: {wins}+/{losses}- mean {d.mean():+.4f} p={p:.2g}")
        if not p < 0.01:
            failed.append(layer)
    assert elapsed < 300, f"took {elapsed:.0f}s"
    summary = "; ".join(parts)
    assert not failed, f"prompt columns 1.0 ok, but clean > masked not significant at layers {failed} ({summary})"
    return f"prompt columns 1.0; {summary}; {elapsed:.0f}s"


def test_criterion_10_kv_similarity_heatmap():
    report(10, "KV similarity heatmap (clean vs masked)", check_kv_stability)


# 11 -----------------------------------------------------------------------

def check_steps_vs_quality():
    G, seeds = 32, 200
    rates = {h: {} for h in HEURISTICS}
    for heur in HEURISTICS:
        for T in (G, G // 2, G // 4):
            total = 0.0
            for seed in range(seeds):
                m = RuleModel(11, 0.95, seed=seed, blind_p=0.3)
                prompt = rule_prompt(11, 4, seed)
                toks, _ = decode_baseline(m, prompt, G, T, heur)
                total += rule_match_rate(toks, prompt.size, 10)
            rates[heur][T] = total / seeds
    lines = []
    for heur, r in rates.items():
        seq = [r[G], r[G // 2], r[G // 4]]
        lines.append(f"{heur} " + "/".join(f"{x:.3f}" for x in seq))
        assert seq[0] >= seq[1] >= seq[2], f"{heur}: rates {seq} not non-increasing as T shrinks"
    return "rule-match at T=32/16/8: " + ", ".join(lines)


def test_criterion_11_fewer_steps_lower_quality():
    report(11, "fewer steps never improve rule-match", check_steps_vs_quality)


# 12 -----------------------------------------------------------------------

def simulate_guided_passes(p, gen_len, window, rng):
    """Independent model of the acceptance process: one fixed coin per position."""
    agree = rng.random(gen_len) < p
    pos = passes = 0
    while pos < gen_len:
        passes += 1
        run = 0
        limit = min(window, gen_len - pos)
        while run < limit and agree[pos + run]:
            run += 1
        pos += max(run, 1)
    return passes


def check_speedup_accounting():
    p, G, seeds = 0.9, 128, 500
    cfg = GuidanceConfig(speculation_block=32, topk_match=2)
    dlm = RuleModel(11, 1.0, seed=0)
    passes = []
    for seed in range(seeds):
        ar = RuleModel(11, p, seed=seed, mode="causal")
        _, trace = decode_guided(dlm, ar, rule_prompt(11, 4, seed), G, cfg)
        passes.append(trace.dlm_passes)
    rng = np.random.default_rng(12345)
    sim = np.mean([simulate_guided_passes(p, G, 32, rng) for _ in range(20000)])
    mean = float(np.mean(passes))
    _, base = decode_baseline(dlm, rule_prompt(11, 4, 0), G, G)
    rel = abs(mean - sim) / sim
    assert rel <= 0.10, f"guided mean {mean:.2f} vs simulation {sim:.2f} ({rel:.1%} apart)"
    assert mean < 0.25 * base.dlm_passes, f"guided mean {mean:.2f} not < 25% of {base.dlm_passes}"
    return (f"guided mean {mean:.2f} DLM passes vs simulated {sim:.2f} ({rel:.1%} apart); "
            f"{mean / base.dlm_passes:.1%} of the sequential {base.dlm_passes}")


def test_criterion_12_speedup_accounting():
    report(12, "guided pass-count accounting", check_speedup_accounting)


CHECKS = [
    (1, "1-layer FreeCache exactness", check_one_layer_exactness),
    (2, "denoising-loop invariants", check_loop_invariants),
    (3, "guided full/zero agreement", check_guided_limits),
    (4, "guided progress and soundness", check_progress_and_soundness),
    (5, "top-K monotonicity", check_topk_monotone),
    (6, "stochastic tau limits", check_tau_limits),
    (7, "FLOP model fidelity", check_flop_fidelity),
    (8, "reducing-window law", check_reducing_window),
    (9, "causality and numerical stability", check_causality_and_stability),
    (10, "KV similarity heatmap (clean vs masked)", check_kv_stability),
    (11, "fewer steps never improve rule-match", check_steps_vs_quality),
    (12, "guided pass-count accounting", check_speedup_accounting),
]

if __name__ == "__main__":
    failures = 0
    for number, title, fn in CHECKS:
        try:
            report(number, title, fn)
        except AssertionError:
            failures += 1
    print(f"{len(CHECKS) - failures}/{len(CHECKS)} criteria pass")
    sys.exit(1 if failures else 0)
