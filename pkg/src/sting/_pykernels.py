"""Pure-Python/numpy versions of the loop kernels in ``_ckernels.pyx``.

Used when the compiled extension is unavailable. Semantics must match the
Cython versions exactly; ``tests/test_kernels.py`` compares the two.
"""

import numpy as np


def delta_recurrence(timestamps, mask):
    """Time since the last observation, per cell.

    ``delta[0] = 0``; afterwards the gap accumulates until the previous step
    was observed. The accumulated sum telescopes to ``s[t] - s[j]`` with ``j``
    the last observed step before ``t`` (or 0), which is what is computed, so
    no rounding builds up along long gaps.
    """
    s = np.asarray(timestamps, dtype=np.float64)
    m = np.asarray(mask)
    T, D = m.shape
    out = np.zeros((T, D), dtype=np.float64)
    last = np.zeros(D, dtype=np.intp)
    for t in range(1, T):
        last = np.where(m[t - 1] > 0, t - 1, last)
        out[t] = s[t] - s[last]
    return out


def carry_forward(values, mask, fill):
    """Last observation carried forward; leading gaps take ``fill[d]``."""
    x = np.asarray(values, dtype=np.float64)
    m = np.asarray(mask)
    T, D = x.shape
    out = np.empty((T, D), dtype=np.float64)
    for d in range(D):
        last = fill[d]
        for t in range(T):
            if m[t, d]:
                last = x[t, d]
            out[t, d] = last
    return out


def knn_fill(order, values, mask, k, fallback):
    """Fill missing cells of each row from its nearest donors.

    ``order[i]`` lists candidate donor rows by increasing distance (``-1``
    terminates the list early). A missing cell ``(i, p)`` averages the first
    ``k`` donors in that order that observe ``p``; with no donor it takes
    ``fallback[p]``.
    """
    order = np.asarray(order, dtype=np.int64)
    x = np.asarray(values, dtype=np.float64)
    m = np.asarray(mask).astype(bool)
    out = np.where(m, x, 0.0)
    for i in range(x.shape[0]):
        missing = np.flatnonzero(~m[i])
        if missing.size == 0:
            continue
        donors = order[i]
        donors = donors[donors >= 0]
        avail = m[np.ix_(donors, missing)]
        taken = avail & (np.cumsum(avail, axis=0) <= k)
        counts = taken.sum(axis=0)
        sums = (taken * x[np.ix_(donors, missing)]).sum(axis=0)
        filled = np.where(counts > 0, sums / np.maximum(counts, 1), fallback[missing])
        out[i, missing] = filled
    return out
