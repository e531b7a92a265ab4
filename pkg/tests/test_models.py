import math
import struct
from pathlib import Path

import numpy as np
import pytest

from dlmfp.errors import ConfigurationError, ContractError, InputError
from dlmfp.models import KVCache, ModelSpec, init_weights, random_transformer, tensor_shapes
from dlmfp.tensor_core import FlopCounter
from dlmfp.weights_io import load_weights, weights_checksum

from conftest import make_transformer

DEMO = ModelSpec(8, 2, 1, 16, 11, 32)
DEMO_CHECKSUM = 0x724AB97C7A429C36
DATA = Path(__file__).parent / "data"


def _splitmix(x):
    m = (1 << 64) - 1
    z = (x + 0x9E3779B97F4A7C15) & m
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & m
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & m
    return z ^ (z >> 31)


def _oracle_init(spec, seed):
    """Plain-int re-derivation of the documented init: tensor i uses stream i."""
    bound = 1.0 / math.sqrt(spec.d)
    out = []
    for stream, (name, shape) in enumerate(tensor_shapes(spec)):
        n = int(np.prod(shape))
        if name.endswith("gain"):
            out.append(np.ones(shape, np.float32))
            continue
        key = _splitmix(_splitmix(seed) ^ stream)
        u = [(_splitmix((key + j) & ((1 << 64) - 1)) >> 11) / 2.0**53 for j in range(n)]
        out.append(np.array([(2 * x - 1) * bound for x in u], dtype=np.float32).reshape(shape))
    return out


def _oracle_fnv(arrays):
    h = 0xCBF29CE484222325
    for a in arrays:
        for b in a.astype("<f4").tobytes():
            h = ((h ^ b) * 0x100000001B3) & ((1 << 64) - 1)
    return h


def test_init_matches_plain_int_oracle():
    w = init_weights(DEMO, 7)
    oracle = _oracle_init(DEMO, 7)
    for (name, got), want in zip(w.tensors(), oracle):
        assert np.array_equal(got, want), name


def test_demo_golden_checksum():
    w = init_weights(DEMO, 7)
    assert weights_checksum(w) == _oracle_fnv(_oracle_init(DEMO, 7)) == DEMO_CHECKSUM


def test_golden_checkpoint_file_loads_and_matches_init():
    spec, w = load_weights(DATA / "demo_seed7.dlmw")
    assert spec == DEMO
    assert weights_checksum(w) == DEMO_CHECKSUM
    for (_, a), (_, b) in zip(w.tensors(), init_weights(DEMO, 7).tensors()):
        assert np.array_equal(a, b)


def test_parameter_count_by_enumeration():
    d, f, V, L = 8, 16, 11, 32
    per_layer = 2 * d + 4 * d * d + 2 * d * f
    want = V * d + L * d + 1 * per_layer + d + d * V
    assert init_weights(DEMO, 0).parameter_count() == want


def test_different_seeds_differ_and_same_seed_repeats():
    a, b = init_weights(DEMO, 1), init_weights(DEMO, 2)
    assert weights_checksum(a) != weights_checksum(b)
    assert weights_checksum(a) == weights_checksum(init_weights(DEMO, 1))


@pytest.mark.parametrize("bad", [dict(d=6, h=4), dict(V=1), dict(L_max=0), dict(n_layers=-1), dict(mode="x")])
def test_spec_validation(bad):
    base = dict(d=8, h=2, n_layers=1, d_ff=16, V=11, L_max=32, mode="bidirectional")
    base.update(bad)
    with pytest.raises(ConfigurationError):
        ModelSpec(**base)


def test_forward_full_shapes_and_flops(tiny):
    toks = np.array([1, 2, 3, 10, 10])
    c = FlopCounter()
    logits, keys, values = tiny.forward_full(toks, c)
    assert logits.shape == (5, 11)
    assert keys.shape == values.shape == (1, 5, 8)
    s = tiny.spec
    assert c.by_module["wq"] == 2 * 5 * s.d * s.d
    assert c.by_module["head"] == 2 * 5 * s.d * s.V


def test_forward_rejects_bad_tokens(tiny):
    with pytest.raises(InputError):
        tiny.forward_full(np.array([0, 11]))
    with pytest.raises(InputError):
        tiny.forward_full(np.zeros(49, dtype=int))


def test_causal_logits_invariant_to_suffix_edits():
    m = make_transformer(layers=2, mode="causal", seed=4)
    rng = np.random.default_rng(0)
    for _ in range(20):
        toks = rng.integers(0, 11, 20)
        i = int(rng.integers(0, 19))
        edited = toks.copy()
        edited[i + 1:] = rng.integers(0, 11, 19 - i)
        a, _, _ = m.forward_full(toks)
        b, _, _ = m.forward_full(edited)
        assert np.array_equal(a[: i + 1], b[: i + 1])


def test_bidirectional_depends_on_suffix(tiny):
    a, _, _ = tiny.forward_full(np.array([1, 2, 3, 4]))
    b, _, _ = tiny.forward_full(np.array([1, 2, 3, 5]))
    assert not np.array_equal(a[0], b[0])


@pytest.mark.parametrize("mode", ["bidirectional", "causal"])
def test_windowed_with_fresh_cache_matches_full(mode):
    m = make_transformer(layers=3, mode=mode, seed=9)
    toks = np.random.default_rng(1).integers(0, 11, 16)
    full, keys, values = m.forward_full(toks)
    cache = KVCache(keys.copy(), values.copy(), frozen_len=6)
    win = m.forward_windowed(toks, cache, 6)
    assert np.allclose(win, full[6:], rtol=1e-5, atol=1e-6)
    assert np.allclose(cache.keys, keys, atol=1e-6)


def test_windowed_counts_window_rows_only():
    m = make_transformer(layers=2, seed=2)
    toks = np.arange(10) % 10
    _, keys, values = m.forward_full(toks)
    c = FlopCounter()
    m.forward_windowed(toks, KVCache(keys, values, 4), 4, c)
    assert c.by_module["wq"] == 2 * 2 * 6 * 8 * 8
    assert c.by_module["qk"] == 2 * 2 * 6 * 10 * 8


def test_windowed_contract(tiny):
    cache = tiny.new_cache(6)
    with pytest.raises(ContractError):
        tiny.forward_windowed(np.zeros(6, dtype=int), cache, 2)


def test_zero_layer_model_is_embedding_plus_head():
    m = random_transformer(ModelSpec(4, 1, 0, 4, 7, 8), 0)
    logits, keys, _ = m.forward_full(np.array([1, 2]))
    assert logits.shape == (2, 7) and keys.shape == (0, 2, 4)


def test_golden_file_header_layout():
    raw = (DATA / "demo_seed7.dlmw").read_bytes()
    assert raw[:4] == b"DLMW"
    assert struct.unpack_from("<8I", raw, 4) == (1, 8, 2, 1, 16, 11, 32, 0)
