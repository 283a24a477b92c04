"""Time the compiled kernels against the numpy fallback.

Usage::

    python benchmarks/bench_kernels.py [--repeat 20] [--batch 24]

Shapes follow one training batch of the toy configuration: 24 rows of
32x32x3 through conv blocks of width 8, 16 and 32, plus one per-image NMF.
"""

from __future__ import annotations

import argparse
import importlib
import timeit

import numpy as np

from chl import _kernels_py, kernels
from chl.stain import REFERENCE_HE


def cases(batch: int, rng: np.random.Generator):
    x = rng.normal(size=(batch, 8, 32, 32))
    w = rng.normal(size=(16, 8, 3, 3))
    b = rng.normal(size=16)
    dy = rng.normal(size=(batch, 16, 32, 32))
    pooled_dy = rng.normal(size=(batch, 16, 16, 16))
    v = np.abs(REFERENCE_HE @ rng.exponential(0.5, (2, 1024)))
    h0 = np.abs(rng.normal(size=(2, 1024)))
    return {
        "conv3x3_forward": lambda impl: kernels.conv3x3_forward(x, w, b, impl),
        "conv3x3_input_grad": lambda impl: kernels.conv3x3_input_grad(dy, w, impl),
        "conv3x3_weight_grad": lambda impl: kernels.conv3x3_weight_grad(x, dy, impl),
        "squareplus_with_grad": lambda impl: kernels.squareplus_with_grad(dy, impl),
        "avg_pool2": lambda impl: kernels.avg_pool2(dy, impl),
        "avg_pool2_backward_mul": lambda impl: kernels.avg_pool2_backward_mul(pooled_dy, dy, impl),
        "sparse_nmf (100 it)": lambda impl: kernels.sparse_nmf(v, REFERENCE_HE, h0, 0.1, 100, 0.0, impl),
    }


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=20)
    parser.add_argument("--batch", type=int, default=24)
    args = parser.parse_args(argv)
    if kernels.BACKEND != "compiled":
        print("compiled extension not built; only the numpy fallback is timed")
        compiled = None
    else:
        compiled = importlib.import_module("chl._kernels")
    rng = np.random.default_rng(0)
    print(f"{'kernel':<24}{'numpy ms':>12}{'compiled ms':>14}{'speedup':>10}")
    for name, fn in cases(args.batch, rng).items():
        py = min(timeit.repeat(lambda: fn(_kernels_py), number=1, repeat=args.repeat)) * 1e3
        if compiled is None:
            print(f"{name:<24}{py:>12.2f}{'-':>14}{'-':>10}")
            continue
        c = min(timeit.repeat(lambda: fn(compiled), number=1, repeat=args.repeat)) * 1e3
        print(f"{name:<24}{py:>12.2f}{c:>14.2f}{py / c:>9.1f}x")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
