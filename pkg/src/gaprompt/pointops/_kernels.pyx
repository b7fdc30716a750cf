# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled farthest point sampling and k-nearest-neighbour selection.

Must stay bit-compatible with ``_kernels_py``: squared distances accumulate
coordinate by coordinate, ties resolve to the lowest index. Build with
``-ffp-contract=off`` so the compiler does not fuse the multiply-adds.
"""
import numpy as np


def pairwise_sqdist(a, b):
    a = np.ascontiguousarray(a, dtype=np.float64)
    b = np.ascontiguousarray(b, dtype=np.float64)
    squeeze = a.ndim == 2
    if squeeze:
        a = a[None]
        b = b[None]
    out = np.empty((a.shape[0], a.shape[1], b.shape[1]), dtype=np.float64)
    _sqdist(a, b, out)
    return out[0] if squeeze else out


cdef void _sqdist(const double[:, :, ::1] a, const double[:, :, ::1] b, double[:, :, ::1] out) noexcept nogil:
    cdef Py_ssize_t bi, i, j, t
    cdef double acc, diff
    for bi in range(a.shape[0]):
        for i in range(a.shape[1]):
            for j in range(b.shape[1]):
                diff = a[bi, i, 0] - b[bi, j, 0]
                acc = diff * diff
                for t in range(1, a.shape[2]):
                    diff = a[bi, i, t] - b[bi, j, t]
                    acc = acc + diff * diff
                out[bi, i, j] = acc


def fps_batch(points, Py_ssize_t m, starts):
    cdef const double[:, :, ::1] p = np.ascontiguousarray(points, dtype=np.float64)
    cdef const long long[::1] st = np.ascontiguousarray(starts, dtype=np.int64)
    cdef Py_ssize_t nb = p.shape[0], n = p.shape[1], d = p.shape[2]
    out = np.empty((nb, m), dtype=np.int64)
    cdef long long[:, ::1] o = out
    mind_arr = np.empty(n, dtype=np.float64)
    cdef double[::1] mind = mind_arr
    cdef Py_ssize_t bi, i, s, t, last, best
    cdef double acc, diff, bestd
    with nogil:
        for bi in range(nb):
            last = st[bi]
            o[bi, 0] = last
            for i in range(n):
                diff = p[bi, last, 0] - p[bi, i, 0]
                acc = diff * diff
                for t in range(1, d):
                    diff = p[bi, last, t] - p[bi, i, t]
                    acc = acc + diff * diff
                mind[i] = acc
            mind[last] = -1.0
            for s in range(1, m):
                best = -1
                bestd = -1.0
                for i in range(n):
                    if mind[i] > bestd:
                        bestd = mind[i]
                        best = i
                o[bi, s] = best
                mind[best] = -1.0
                last = best
                for i in range(n):
                    if mind[i] < 0.0:
                        continue
                    diff = p[bi, last, 0] - p[bi, i, 0]
                    acc = diff * diff
                    for t in range(1, d):
                        diff = p[bi, last, t] - p[bi, i, t]
                        acc = acc + diff * diff
                    if acc < mind[i]:
                        mind[i] = acc
    return out


def knn_batch(query, reference, Py_ssize_t k):
    cdef const double[:, :, ::1] q = np.ascontiguousarray(query, dtype=np.float64)
    cdef const double[:, :, ::1] r = np.ascontiguousarray(reference, dtype=np.float64)
    cdef Py_ssize_t nb = q.shape[0], nq = q.shape[1], n = r.shape[1], d = q.shape[2]
    out = np.empty((nb, nq, k), dtype=np.int64)
    cdef long long[:, :, ::1] o = out
    bd_arr = np.empty(k, dtype=np.float64)
    cdef double[::1] bd = bd_arr
    cdef Py_ssize_t bi, qi, j, t, filled, pos, u
    cdef double acc, diff
    with nogil:
        for bi in range(nb):
            for qi in range(nq):
                filled = 0
                for j in range(n):
                    diff = q[bi, qi, 0] - r[bi, j, 0]
                    acc = diff * diff
                    for t in range(1, d):
                        diff = q[bi, qi, t] - r[bi, j, t]
                        acc = acc + diff * diff
                    if filled == k and acc >= bd[k - 1]:
                        continue
                    # insert after every entry with distance <= acc (stable)
                    pos = filled if filled < k else k - 1
                    while pos > 0 and bd[pos - 1] > acc:
                        pos -= 1
                    u = filled if filled < k else k - 1
                    while u > pos:
                        bd[u] = bd[u - 1]
                        o[bi, qi, u] = o[bi, qi, u - 1]
                        u -= 1
                    bd[pos] = acc
                    o[bi, qi, pos] = j
                    if filled < k:
                        filled += 1
    return out
