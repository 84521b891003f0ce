"""Compiled kernels vs the numpy fallback on training-sized inputs.

    python3 benchmarks/bench_kernels.py [--repeat 20] [--json out.json]

Prints one row per kernel with the median wall time of each backend and the
speedup. Also checks that both backends agree before timing anything.
"""

from __future__ import annotations

import argparse
import json
import sys
import timeit

import numpy as np

from milpool import _fallback

try:
    from milpool import _kernels
except ImportError:  # pragma: no cover - depends on the build
    _kernels = None


def make_inputs(batch: int, frames: int, classes: int, seed: int = 0):
    rng = np.random.default_rng(seed)
    y = np.clip(rng.uniform(size=(batch, frames, classes)), 1e-7, 1.0)
    n = rng.uniform(0.3, 3.0, size=classes)
    up = rng.normal(size=(batch, classes))
    binary = (rng.uniform(size=(batch * classes, frames)) > 0.6).astype(np.int8)
    return y, n, up, binary


def cases(y, n, up, binary, window):
    def forward(mod):
        return lambda: mod.power_pool_forward(y, n)

    def backward(mod):
        clip, w = mod.power_pool_forward(y, n)
        return lambda: mod.power_pool_backward(y, n, w, clip, up)

    def median(mod):
        return lambda: [mod.median_filter_binary(row, window) for row in binary]

    return {"power_pool_forward": forward, "power_pool_backward": backward, "median_filter_binary": median}


def agree(y, n, up, binary, window) -> float:
    worst = 0.0
    ca, wa = _fallback.power_pool_forward(y, n)
    cb, wb = _kernels.power_pool_forward(y, n)
    worst = max(worst, np.max(np.abs(ca - cb)), np.max(np.abs(wa - wb)))
    da, na = _fallback.power_pool_backward(y, n, wa, ca, up)
    db, nb = _kernels.power_pool_backward(y, n, wb, cb, up)
    worst = max(worst, np.max(np.abs(da - db)), np.max(np.abs(na - nb)))
    for row in binary[:50]:
        if not np.array_equal(_fallback.median_filter_binary(row, window), _kernels.median_filter_binary(row, window)):
            return float("inf")
    return float(worst)


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--batch", type=int, default=32)
    ap.add_argument("--frames", type=int, default=250)
    ap.add_argument("--classes", type=int, default=10)
    ap.add_argument("--window", type=int, default=27)
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--json", help="write results as JSON")
    args = ap.parse_args(argv)
    if _kernels is None:
        print("compiled kernels not built; run: python3 setup.py build_ext --inplace", file=sys.stderr)
        return 2
    y, n, up, binary = make_inputs(args.batch, args.frames, args.classes)
    diff = agree(y, n, up, binary, args.window)
    print(f"max backend difference: {diff:.3e}")
    rows = []
    print(f"{'kernel':24s} {'python ms':>10s} {'cython ms':>10s} {'speedup':>8s}")
    for name, make in cases(y, n, up, binary, args.window).items():
        times = {}
        for label, mod in (("python", _fallback), ("cython", _kernels)):
            fn = make(mod)
            fn()
            times[label] = 1e3 * float(np.median(timeit.repeat(fn, number=1, repeat=args.repeat)))
        speedup = times["python"] / times["cython"]
        rows.append({"kernel": name, "python_ms": times["python"], "cython_ms": times["cython"], "speedup": speedup})
        print(f"{name:24s} {times['python']:10.3f} {times['cython']:10.3f} {speedup:8.2f}")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump({"max_difference": diff, "shape": [args.batch, args.frames, args.classes], "rows": rows}, fh, indent=1)
    return 0


if __name__ == "__main__":
    sys.exit(main())
