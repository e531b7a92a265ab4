#!/usr/bin/env python3
"""Compare the numba-compiled kernels against the numpy fallback.

Prints one JSON line per kernel with the median wall time of each backend,
then (unless --no-decode) times a transformer FreeCache decode and a
rule-model guided decode in two subprocesses, one with DLMFP_DISABLE_JIT=1.

    python3 benchmarks/bench_kernels.py --repeat 20
"""
import argparse
import json
import os
import subprocess
import sys
import time

import numpy as np

from dlmfp import _kernels

DECODE_SNIPPET = """
import time
from dlmfp import _kernels
from dlmfp.freecache import decode_freecache
from dlmfp.guided import decode_guided
from dlmfp.models import ModelSpec, random_transformer
from dlmfp.rules import RuleModel
m = random_transformer(ModelSpec(64, 4, 4, 256, 64, 320), 0)
dlm, ar = RuleModel(64, 0.95, 1), RuleModel(64, 0.9, 2, mode="causal")
decode_freecache(m, [1, 2, 3], 8, 8)  # warm-up and compile
decode_guided(dlm, ar, [1, 2], 8)
t0 = time.perf_counter()
decode_freecache(m, [1, 2, 3, 4], 256, 64, steps=64)
t1 = time.perf_counter()
decode_guided(dlm, ar, [1, 2], 1024)
print(_kernels.BACKEND, t1 - t0, time.perf_counter() - t1)
"""


def median_ms(fn, repeat):
    fn()  # compile / warm caches
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return 1e3 * float(np.median(times))


def cases(rng):
    probs = _kernels.numpy_impl.softmax_rows(rng.standard_normal((256, 1024)))
    q = rng.standard_normal((256, 64)).astype(np.float32)
    kv = rng.standard_normal((512, 64)).astype(np.float32)
    toks = rng.integers(0, 64, 4096)
    return {
        "uniform_stream": lambda k: k.uniform_stream(12345, 1 << 18),
        "fnv1a_bytes": lambda k: k.fnv1a_bytes(rng.integers(0, 256, 1 << 14).astype(np.uint8)),
        "rule_emit": lambda k: k.rule_emit(toks, 63, 63, 0.9, 0.3, 99, True),
        "softmax_rows": lambda k: k.softmax_rows(rng.standard_normal((256, 1024))),
        "rms_norm_rows": lambda k: k.rms_norm_rows(q, np.ones(64, np.float32), 1e-6),
        "attention": lambda k: k.attention(q, kv, kv, 4, True, 256),
        "heuristic_scores": lambda k: k.heuristic_scores(probs, 1),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=10)
    ap.add_argument("--no-decode", action="store_true")
    args = ap.parse_args()
    if _kernels.jit_impl is None:
        sys.exit("numba is not importable; nothing to compare")
    rng = np.random.default_rng(0)
    for name, fn in cases(rng).items():
        ref = median_ms(lambda: fn(_kernels.numpy_impl), args.repeat)
        jit = median_ms(lambda: fn(_kernels.jit_impl), args.repeat)
        print(json.dumps({"kernel": name, "numpy_ms": round(ref, 4), "numba_ms": round(jit, 4),
                          "speedup": round(ref / jit, 2)}))
    if args.no_decode:
        return
    timings = {}
    for flag in ("0", "1"):
        env = dict(os.environ, DLMFP_DISABLE_JIT=flag)
        out = subprocess.run([sys.executable, "-c", DECODE_SNIPPET], env=env, capture_output=True, text=True,
                             check=True).stdout.split()
        timings[out[0]] = (float(out[1]), float(out[2]))
    for i, name in enumerate(("transformer_freecache_decode", "rule_guided_decode")):
        ref, jit = timings["numpy"][i], timings["numba"][i]
        print(json.dumps({"end_to_end": name, "numpy_s": round(ref, 4), "numba_s": round(jit, 4),
                          "speedup": round(ref / jit, 2)}))


if __name__ == "__main__":
    main()
