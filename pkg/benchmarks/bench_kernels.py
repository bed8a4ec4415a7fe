"""Benchmark the compiled kernel backend against the numpy reference.

Times the fused GRU cell (forward + backward) and the lambda-return scan
on trainer-realistic shapes and prints the speedup.

Usage: python benchmarks/bench_kernels.py [--repeats 50]
"""

import argparse
import importlib
import time

import numpy as np


def _load_backends():
    from marlab.kernels import _ref

    backends = {"numpy": _ref}
    try:
        _core = importlib.import_module("marlab.kernels._core")
        backends["cython"] = _core
    except ImportError:
        print("compiled extension not available; benchmarking numpy only")
    return backends


def _time(fn, repeats):
    fn()  # warm up
    best = np.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def bench_gru(impl, batch, hidden, repeats):
    rng = np.random.default_rng(0)
    x = rng.normal(size=(batch, hidden))
    h = rng.normal(size=(batch, hidden))
    ws = [rng.normal(size=(2 * hidden, hidden)) * 0.1 for _ in range(3)]
    bs = [np.zeros(hidden) for _ in range(3)]
    dh = rng.normal(size=(batch, hidden))

    def run():
        h_new, cache = impl.gru_forward(x, h, *ws, *bs)
        impl.gru_backward(cache, *ws, dh)
        return h_new

    return _time(run, repeats)


def bench_lambda_scan(impl, batch, t_max, repeats):
    rng = np.random.default_rng(1)
    r = rng.normal(size=(batch, t_max))
    boot = rng.normal(size=(batch, t_max))
    term = (rng.random(size=(batch, t_max)) < 0.02).astype(np.float64)
    mask = np.ones((batch, t_max))
    run = lambda: impl.lambda_scan(r, boot, term, mask, 0.6, 0.99)
    return _time(run, repeats)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeats", type=int, default=50)
    args = ap.parse_args()
    backends = _load_backends()

    cases = [
        ("gru b=384 h=64", lambda i: bench_gru(i, 384, 64, args.repeats)),
        ("gru b=1024 h=256", lambda i: bench_gru(i, 1024, 256, max(5, args.repeats // 5))),
        ("lambda_scan b=128 t=200", lambda i: bench_lambda_scan(i, 128, 200, args.repeats)),
        ("lambda_scan b=1024 t=200", lambda i: bench_lambda_scan(i, 1024, 200, args.repeats)),
    ]

    header = f"{'case':26s}" + "".join(f"{name:>12s}" for name in backends)
    if len(backends) > 1:
        header += f"{'speedup':>10s}"
    print(header)
    for label, fn in cases:
        times = {name: fn(impl) for name, impl in backends.items()}
        row = f"{label:26s}" + "".join(f"{t * 1e3:10.3f}ms" for t in times.values())
        if len(times) > 1:
            row += f"{times['numpy'] / times['cython']:9.2f}x"
        print(row)


if __name__ == "__main__":
    main()
