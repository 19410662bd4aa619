"""Compiled vs numpy kernel timings.

    python benchmarks/bench_kernels.py [--size 64] [--repeat 5] [--csv out.csv]

Each row times one primitive under both backends (best of ``--repeat``)
and reports the speedup of the compiled path. Exits 1 if the extension
is not built.
"""

import argparse
import csv
import sys
import timeit

import numpy as np

from idf import core
from idf.core import _backend
from idf.modules import ModelWeights, did_forward


def cases(size):
    rng = np.random.default_rng(0)
    img = rng.random((3, size, size))
    M = size * size
    kern = rng.random((9, M))
    patches = core.unfold(img, 3, 2)
    grad = rng.normal(size=(3, 9, M))
    w = ModelWeights.init(seed=0)
    prev2 = np.clip(img + rng.normal(0, 0.05, img.shape), 0, 1)
    wide = rng.random((56, size, size))
    w56 = rng.normal(size=(56, 56, 3, 3)) * 0.05
    g56 = rng.normal(size=(56, size, size))
    u65 = rng.random((65, size, size))
    w9 = rng.normal(size=(9, 65, 3, 3))
    return [
        ("unfold K=3 d=2", lambda: core.unfold(img, 3, 2)),
        ("unfold_adjoint K=3 d=2", lambda: core.unfold_adjoint(grad, (size, size), 3, 2)),
        ("apply_kernels", lambda: core.apply_kernels(patches, kern)),
        ("local_correlation 7x7", lambda: _backend.kernels.local_correlation(img, 3, 2, 7, 1e-8)),
        ("conv2d 56->56", lambda: core.conv2d(wide, w56)),
        ("conv2d_backward 56->56", lambda: core.conv2d_backward(wide, w56, g56)),
        ("conv2d 65->9", lambda: core.conv2d(u65, w9)),
        ("did_forward C_h=56", lambda: did_forward(img, prev2, w, 2)),
    ]


def best(fn, repeat):
    fn()
    n = max(1, int(0.2 / max(timeit.timeit(fn, number=1), 1e-6)))
    return min(timeit.repeat(fn, number=n, repeat=repeat)) / n


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--size", type=int, default=64)
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--csv")
    args = ap.parse_args(argv)
    if "cython" not in _backend.available():
        print("compiled extension not built; run `pip install -e . --no-build-isolation`")
        return 1
    prev = _backend.name
    rows = []
    try:
        for name, fn in cases(args.size):
            t = {}
            for b in ("numpy", "cython"):
                _backend.use(b)
                t[b] = best(fn, args.repeat)
            rows.append((name, t["numpy"] * 1e3, t["cython"] * 1e3, t["numpy"] / t["cython"]))
    finally:
        _backend.use(prev)
    print(f"3x{args.size}x{args.size} image, best of {args.repeat}")
    print(f"{'kernel':<26}{'numpy ms':>10}{'cython ms':>11}{'speedup':>9}")
    for name, a, b, s in rows:
        print(f"{name:<26}{a:>10.3f}{b:>11.3f}{s:>8.1f}x")
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["kernel", "numpy_ms", "cython_ms", "speedup"])
            wr.writerows(rows)
    return 0


if __name__ == "__main__":
    sys.exit(main())
