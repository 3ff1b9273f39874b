"""Compare the compiled kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat 5]
"""
import argparse
import timeit

import numpy as np

from treecount import _pykernels

try:
    from treecount import _ckernels
except ImportError:
    _ckernels = None


def cases(rng):
    xs, ys = rng.uniform(0, 256, 40), rng.uniform(0, 256, 40)
    m = rng.random((64, 64))
    pred, gt = rng.uniform(0, 64, (200, 2)), rng.uniform(0, 64, (200, 2))
    return {
        "gaussian_density 40 pts 256x256": lambda k: k.gaussian_density(xs, ys, 256, 256, 4.0, 4.0),
        "local_maxima 64x64": lambda k: k.local_maxima(m, 0.5),
        "greedy_match 200x200": lambda k: k.greedy_match(pred, gt, 2.0),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawTextHelpFormatter)
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--number", type=int, default=20)
    args = ap.parse_args()

    rng = np.random.default_rng(0)
    print(f"{'kernel':34s} {'python ms':>10s} {'cython ms':>10s} {'speedup':>8s}")
    for name, fn in cases(rng).items():
        py = min(timeit.repeat(lambda: fn(_pykernels), number=args.number, repeat=args.repeat))
        py = 1e3 * py / args.number
        if _ckernels is None:
            print(f"{name:34s} {py:10.3f} {'n/a':>10s} {'n/a':>8s}")
            continue
        # both backends must agree before the timing means anything
        a, b = fn(_pykernels), fn(_ckernels)
        if isinstance(a, np.ndarray):
            np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-15)
        else:
            assert list(a) == list(b), name
        cy = min(timeit.repeat(lambda: fn(_ckernels), number=args.number, repeat=args.repeat))
        cy = 1e3 * cy / args.number
        print(f"{name:34s} {py:10.3f} {cy:10.3f} {py / cy:7.1f}x")


if __name__ == "__main__":
    main()
