#!/usr/bin/env python3
"""Benchmark the numba attention kernel against the pure-numpy fallback.

Times the hot multi-head attention kernel across context lengths, checks the
two paths agree numerically, and times an end-to-end decode under each
backend. The active backend for package users is chosen at import time by the
FASTOCR_NUMBA environment variable; this script imports both implementations
directly so one process can compare them.

Usage: python benchmarks/bench_kernels.py
"""

import subprocess
import sys
import time

import numpy as np

from fastocr.kernels import _HAS_NUMBA, mha_attend_numpy

if _HAS_NUMBA:
    from fastocr.kernels import _mha_attend_njit as mha_attend_numba
else:
    mha_attend_numba = None
    print("numba unavailable; only the numpy path will be timed\n")


def time_kernel(fn, query, keys, values, num_heads, repeats=200):
    fn(query, keys, values, num_heads)  # warm (JIT compile / cache touch)
    t0 = time.perf_counter()
    for _ in range(repeats):
        fn(query, keys, values, num_heads)
    return (time.perf_counter() - t0) / repeats


def bench_contexts():
    print(f"{'hidden':>7} {'heads':>6} {'context':>8} {'numpy (us)':>11} "
          f"{'numba (us)':>11} {'speedup':>8} {'max |diff|':>11}")
    rng = np.random.default_rng(0)
    for hidden, heads in [(64, 4), (256, 8)]:
        for n in [128, 512, 2048, 8192]:
            q = rng.normal(size=hidden)
            k = rng.normal(size=(n, hidden))
            v = rng.normal(size=(n, hidden))
            t_np = time_kernel(mha_attend_numpy, q, k, v, heads)
            if mha_attend_numba is None:
                print(f"{hidden:>7} {heads:>6} {n:>8} {t_np * 1e6:>11.2f}")
                continue
            t_nb = time_kernel(mha_attend_numba, q, k, v, heads)
            out_np, w_np = mha_attend_numpy(q, k, v, heads)
            out_nb, w_nb = mha_attend_numba(q, k, v, heads)
            diff = max(np.abs(out_np - out_nb).max(), np.abs(w_np - w_nb).max())
            print(f"{hidden:>7} {heads:>6} {n:>8} {t_np * 1e6:>11.2f} "
                  f"{t_nb * 1e6:>11.2f} {t_np / t_nb:>7.2f}x {diff:>11.2e}")


DECODE_SNIPPET = """
import time
from fastocr import (DecodeSession, FixationConfig, FixationPolicy, ModelConfig,
                     init_model, prompt_token_ids, backend_name)

mc = ModelConfig(seed=1)
policy = FixationPolicy(FixationConfig(focal_layer_ratio=0.25), 8)
session = DecodeSession(init_model(mc), policy)
session.prefill(64, prompt_token_ids(1, 8, mc.vocab_size))
session.generate(5)  # warm kernels
t0 = time.perf_counter()
session.generate(200)
dt = time.perf_counter() - t0
print(f"{backend_name():>6}: 200 decode steps in {dt:.3f}s "
      f"({dt / 200 * 1e3:.2f} ms/step), last token {session.generated[-1]}")
"""


def bench_decode():
    # backend selection is an import-time decision, so drive each in a
    # subprocess with the env flag set accordingly
    import os

    for flag in ("1", "0"):
        env = dict(os.environ, FASTOCR_NUMBA=flag)
        subprocess.run([sys.executable, "-c", DECODE_SNIPPET], env=env, check=True)


if __name__ == "__main__":
    print("== kernel microbenchmark ==")
    bench_contexts()
    print("\n== end-to-end decode (fastocr policy, default toy config) ==")
    bench_decode()
