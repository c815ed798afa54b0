"""Compiled vs. NumPy kernels at the shapes training uses (25 particles, N=10).

    python3 benchmarks/bench_kernels.py [--repeat 200]

Prints microseconds per call for each kernel in both backends, then the wall
time of one full training run with each backend selected at import.
"""

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from learnedsis import kernels
from learnedsis import _kernels_py as py

B, N = 25, 10

TRAIN_SNIPPET = """
import time, numpy as np
from learnedsis import kernels
from learnedsis.experiment import train_proposal
from learnedsis.models import ScenarioConfig, generate_scenario
m = generate_scenario(ScenarioConfig("linear", 10.0, 0))
train_proposal(m, (0,), 1, 25, 12)
t0 = time.perf_counter()
train_proposal(m, (0,), 10, 25, 12)
print(kernels.BACKEND, (time.perf_counter() - t0) / 10)
"""


def _cases(rng):
    G = rng.standard_normal((B, N, N))
    S = G @ np.transpose(G, (0, 2, 1)) + N * np.eye(N)
    L = np.linalg.cholesky(S)
    v = rng.standard_normal((B, N))
    tr = np.trace(S, axis1=1, axis2=2) / N
    base, floor, cap = 1e-6 * tr, 1e-12 * tr, 1e-2 * tr
    flat = rng.standard_normal(10_000)
    m, s = np.zeros_like(flat), np.zeros_like(flat)
    return {
        "cholesky_batched": lambda k: k.cholesky_batched(S, base, floor, cap),
        "solve_lower_batched": lambda k: k.solve_lower_batched(L, v),
        "solve_lower_transpose_batched": lambda k: k.solve_lower_transpose_batched(L, v),
        "lower_matvec_batched": lambda k: k.lower_matvec_batched(L, v),
        "cholesky_backward_batched": lambda k: k.cholesky_backward_batched(L, G),
        "gaussian_gram_batched": lambda k: k.gaussian_gram_batched(v),
        "adam_update (10k params)": lambda k: k.adam_update(flat.copy(), flat, m.copy(), s.copy(),
                                                             1e-3, 0.9, 0.999, 1e-8, 0.1, 0.001),
    }


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=200)
    ap.add_argument("--no-training", action="store_true")
    args = ap.parse_args()

    compiled = kernels.compiled_backend()
    if compiled is None:
        print("compiled extension not built; only the NumPy backend is timed")
    print(f"{'kernel':32s} {'numpy us':>10s} {'cython us':>10s} {'speedup':>8s}")
    for name, call in _cases(np.random.default_rng(0)).items():
        t_py = min(timeit.repeat(lambda: call(py), number=args.repeat, repeat=3)) / args.repeat * 1e6
        if compiled is None:
            print(f"{name:32s} {t_py:10.1f}")
            continue
        t_c = min(timeit.repeat(lambda: call(compiled), number=args.repeat, repeat=3)) / args.repeat * 1e6
        print(f"{name:32s} {t_py:10.1f} {t_c:10.1f} {t_py / t_c:8.2f}")

    if args.no_training:
        return
    print("\nseconds per training run (T=12, K=25, hidden 256/512):")
    for pure in ("1", "0"):
        env = dict(os.environ, LEARNEDSIS_PURE_PYTHON=pure)
        out = subprocess.run([sys.executable, "-c", TRAIN_SNIPPET], env=env,
                             capture_output=True, text=True, check=True)
        backend, secs = out.stdout.split()
        print(f"  {backend:8s} {float(secs):.4f}")


if __name__ == "__main__":
    main()
