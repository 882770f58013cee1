"""Time the compiled loop kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat N]

Each kernel is run on identical inputs through both backends; outputs are
compared before timing so a speedup never hides a disagreement.
"""

import argparse
import timeit

import numpy as np

from sting import _pykernels
from sting.evaluation import masked_distances

try:
    from sting import _ckernels
except ImportError:
    _ckernels = None


def cases(seed=0):
    rng = np.random.default_rng(seed)
    T, D = 2000, 36
    ts = np.cumsum(rng.uniform(0.5, 2.0, T))
    mask = (rng.random((T, D)) < 0.3).astype(np.uint8)
    x = rng.normal(size=(T, D))
    fill = rng.normal(size=D)

    n, P = 500, 48 * 5
    vals = rng.normal(size=(n, P))
    m = (rng.random((n, P)) < 0.7).astype(np.uint8)
    dist = masked_distances(vals, m)
    order = np.argsort(dist, axis=1, kind="stable")
    order = np.where(np.take_along_axis(dist, order, axis=1) < np.inf, order, -1)
    return {
        "delta_recurrence": ((ts, mask), {}),
        "carry_forward": ((x, mask, fill), {}),
        "knn_fill": ((order, vals, m, 10, np.zeros(P)), {}),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if _ckernels is None:
        print("compiled extension not built; run `python3 setup.py build_ext --inplace`")
        return
    print(f"{'kernel':<18} {'python (ms)':>12} {'cython (ms)':>12} {'speedup':>8}")
    for name, (a, kw) in cases().items():
        py, cy = getattr(_pykernels, name), getattr(_ckernels, name)
        np.testing.assert_allclose(py(*a, **kw), cy(*a, **kw), rtol=0, atol=1e-12)
        t_py = min(timeit.repeat(lambda: py(*a, **kw), number=1, repeat=args.repeat))
        t_cy = min(timeit.repeat(lambda: cy(*a, **kw), number=1, repeat=args.repeat))
        print(f"{name:<18} {1e3 * t_py:12.2f} {1e3 * t_cy:12.2f} {t_py / t_cy:7.1f}x")


if __name__ == "__main__":
    main()
