"""Time the compiled kernels against the numpy fallback.

Run with ``python benchmarks/bench_kernels.py``. Each kernel is timed on the
same inputs with both backends; outputs are checked for bit equality first.
"""
import argparse
import timeit

import numpy as np

from cimtrain import _kernels_py as py

try:
    from cimtrain import _ckernels as cy
except ImportError:
    cy = None


def cases(rng):
    x = rng.normal(size=(16, 34, 34, 32))
    cols = py.im2col(x, 3, 3, 1)
    t = rng.normal(size=(256, 1024))
    pool_in = rng.normal(size=(16, 32, 32, 32))
    out, arg = py.maxpool2x2(pool_in)
    g = rng.normal(size=out.shape)
    return {
        "im2col": (lambda m: m.im2col(x, 3, 3, 1)),
        "col2im": (lambda m: m.col2im(cols, 16, 34, 34, 32, 3, 3, 1)),
        "fake_quant": (lambda m: m.fake_quant(t, -1.0, 1.0 - 2 / 15, 2 / 15, 7.0)),
        "maxpool2x2": (lambda m: m.maxpool2x2(pool_in)),
        "maxpool2x2_backward": (lambda m: m.maxpool2x2_backward(g, arg, 32, 32)),
    }


def same(a, b):
    if isinstance(a, tuple):
        return all(same(u, v) for u, v in zip(a, b))
    return np.array_equal(np.asarray(a), np.asarray(b))


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    if cy is None:
        print("compiled kernels are not built; only the numpy backend is available")
        return 1
    print(f"{'kernel':<22}{'numpy ms':>10}{'cython ms':>11}{'speedup':>9}  equal")
    for name, fn in cases(np.random.default_rng(0)).items():
        eq = same(fn(py), fn(cy))
        tp = min(timeit.repeat(lambda: fn(py), number=1, repeat=args.repeat)) * 1e3
        tc = min(timeit.repeat(lambda: fn(cy), number=1, repeat=args.repeat)) * 1e3
        print(f"{name:<22}{tp:>10.2f}{tc:>11.2f}{tp / tc:>8.1f}x  {eq}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
