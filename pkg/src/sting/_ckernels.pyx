# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled loop kernels. See ``_pykernels.py`` for the reference semantics."""

import numpy as np
cimport numpy as cnp

cnp.import_array()


def delta_recurrence(timestamps, mask):
    cdef double[::1] s = np.ascontiguousarray(timestamps, dtype=np.float64)
    cdef unsigned char[:, ::1] m = np.ascontiguousarray(mask, dtype=np.uint8)
    cdef Py_ssize_t T = m.shape[0], D = m.shape[1], t, d
    out_arr = np.zeros((T, D), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    # index of the last observation strictly before t (0 if none)
    last_arr = np.zeros(D, dtype=np.intp)
    cdef Py_ssize_t[::1] last = last_arr
    for t in range(1, T):
        for d in range(D):
            if m[t - 1, d]:
                last[d] = t - 1
            out[t, d] = s[t] - s[last[d]]
    return out_arr


def carry_forward(values, mask, fill):
    cdef double[:, ::1] x = np.ascontiguousarray(values, dtype=np.float64)
    cdef unsigned char[:, ::1] m = np.ascontiguousarray(mask, dtype=np.uint8)
    cdef double[::1] f = np.ascontiguousarray(fill, dtype=np.float64)
    cdef Py_ssize_t T = x.shape[0], D = x.shape[1], t, d
    out_arr = np.empty((T, D), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef double last
    for d in range(D):
        last = f[d]
        for t in range(T):
            if m[t, d]:
                last = x[t, d]
            out[t, d] = last
    return out_arr


def knn_fill(order, values, mask, Py_ssize_t k, fallback):
    cdef long long[:, ::1] o = np.ascontiguousarray(order, dtype=np.int64)
    cdef double[:, ::1] x = np.ascontiguousarray(values, dtype=np.float64)
    cdef unsigned char[:, ::1] m = np.ascontiguousarray(mask, dtype=np.uint8)
    cdef double[::1] fb = np.ascontiguousarray(fallback, dtype=np.float64)
    cdef Py_ssize_t N = x.shape[0], P = x.shape[1], L = o.shape[1]
    cdef Py_ssize_t i, p, j, taken
    cdef long long donor
    cdef double total
    out_arr = np.empty((N, P), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    for i in range(N):
        for p in range(P):
            if m[i, p]:
                out[i, p] = x[i, p]
                continue
            taken = 0
            total = 0.0
            for j in range(L):
                donor = o[i, j]
                if donor < 0:
                    break
                if m[donor, p]:
                    total += x[donor, p]
                    taken += 1
                    if taken == k:
                        break
            out[i, p] = total / taken if taken > 0 else fb[p]
    return out_arr
