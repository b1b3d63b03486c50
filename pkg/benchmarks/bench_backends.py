"""Timing comparison of the numba kernels against the pure-numpy fallback.

Run as a script:

    python benchmarks/bench_backends.py [--repeats N]

Both backends compute bit-identical results (that is tested, not benchmarked);
this script only answers "what does the fallback cost".  The shapes mirror the
defaults: 100x100 images cut into two shards, batch 32, widths 128/64.
"""

import argparse
import time

import numpy as np

from splitlimb.backend import available_backends, colsum, exp_f64, log_f64, matmul, use_backend
from splitlimb.config import ExperimentConfig, TrainConfig, DataConfig, validate
from splitlimb.limbs import run_split_training


def _time(fn, repeats):
    fn()  # warm-up: first numba call pays compilation/cache-load
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def _kernel_cases():
    rng = np.random.default_rng(0)
    a = rng.standard_normal((32, 5000)).astype(np.float32)  # limb forward, one shard
    b = rng.standard_normal((5000, 128)).astype(np.float32)
    c = rng.standard_normal((32, 256)).astype(np.float32)  # server hidden forward
    d = rng.standard_normal((256, 64)).astype(np.float32)
    g = rng.standard_normal((32, 128)).astype(np.float32)
    z = rng.standard_normal((32, 64)).astype(np.float64)
    zp = np.abs(z) + 0.01
    return [
        ("matmul 32x5000 @ 5000x128", lambda: matmul(a, b)),
        ("matmul 32x256 @ 256x64", lambda: matmul(c, d)),
        ("colsum 32x128", lambda: colsum(g)),
        ("exp_f64 32x64", lambda: exp_f64(z)),
        ("log_f64 32x64", lambda: log_f64(zp)),
    ]


def _training_run():
    cfg = ExperimentConfig()
    cfg.train = TrainConfig(epochs=1, k=2, seed=0)
    cfg.data = DataConfig(n=128)
    validate(cfg)
    run_split_training(cfg)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=5, help="timed repeats (best-of)")
    args = ap.parse_args()

    cases = _kernel_cases() + [("one epoch, n=128, k=2, defaults", _training_run)]
    rows = {}
    for backend in available_backends():
        use_backend(backend)
        for name, fn in cases:
            repeats = 1 if name.startswith("one epoch") else args.repeats
            rows.setdefault(name, {})[backend] = _time(fn, repeats)

    width = max(len(n) for n in rows) + 2
    backends = list(available_backends())
    header = f"{'case':<{width}}" + "".join(f"{b:>12}" for b in backends)
    if len(backends) == 2:
        header += f"{'ratio':>9}"
    print(header)
    print("-" * len(header))
    for name, times in rows.items():
        line = f"{name:<{width}}" + "".join(f"{times[b] * 1e3:>10.2f}ms" for b in backends)
        if len(backends) == 2:
            slow, fast = times[backends[1]], times[backends[0]]
            line += f"{slow / fast:>8.1f}x"
        print(line)


if __name__ == "__main__":
    main()
