"""Compare the compiled inference kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeats 50] [--json out.json]
"""
import argparse
import importlib
import json
import statistics
import time

import numpy as np

from dcss.kernels import _pykernels


def _time(fn, repeats):
    fn()
    samples = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        samples.append(time.perf_counter() - t0)
    return statistics.median(samples)


def cases(rng):
    # shapes match one 32x32 image with a 3-task model, and a larger stress size
    for N, c in ((64, 2), (64, 8), (4096, 8)):
        S = rng.random((N, c))
        S[S < 0.6] = 0.0
        yield f"select_rows N={N} c={c}", "select_rows", (S,)
    for K, H in ((2, 32), (6, 32), (6, 256)):
        masks = rng.random((K, H, H))
        yield f"aggregate_labels K={K} {H}x{H}", "aggregate_labels", (masks, rng.random(K), np.arange(1, K + 1), 0.5)
    for H in (32, 256):
        p, g = rng.integers(0, 7, (H, H)), rng.integers(0, 7, (H, H))
        yield f"confusion {H}x{H} L=7", "confusion", (p, g, 7)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=50)
    ap.add_argument("--json", default=None)
    args = ap.parse_args(argv)
    try:
        compiled = importlib.import_module("dcss.kernels._ckernels")
    except ImportError:
        raise SystemExit("compiled kernels are not built; run `pip install -e . --no-build-isolation`")
    rng = np.random.default_rng(0)
    rows = []
    print(f"{'case':34s} {'numpy us':>10s} {'cython us':>10s} {'speedup':>8s}")
    for name, fn, inputs in cases(rng):
        a = getattr(_pykernels, fn)(*inputs)
        b = getattr(compiled, fn)(*inputs)
        same = all(np.array_equal(x, y) for x, y in zip(a, b)) if isinstance(a, tuple) else np.array_equal(a, b)
        if not same:
            raise SystemExit(f"backends disagree on {name}")
        tp = _time(lambda: getattr(_pykernels, fn)(*inputs), args.repeats)
        tc = _time(lambda: getattr(compiled, fn)(*inputs), args.repeats)
        rows.append({"case": name, "numpy_s": tp, "cython_s": tc, "speedup": tp / tc})
        print(f"{name:34s} {tp * 1e6:10.1f} {tc * 1e6:10.1f} {tp / tc:8.2f}")
    if args.json:
        with open(args.json, "w") as f:
            json.dump(rows, f, indent=2)


if __name__ == "__main__":
    main()
