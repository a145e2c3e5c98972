# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled versions of the hot kernels. Same signatures as _pykernels."""
import numpy as np
cimport numpy as cnp

cnp.import_array()


def scatter_add_rows(double[:, ::1] out, const long long[::1] ids, const double[:, ::1] src):
    cdef Py_ssize_t r, e, row
    cdef Py_ssize_t d = out.shape[1]
    with nogil:
        for r in range(ids.shape[0]):
            row = ids[r]
            for e in range(d):
                out[row, e] += src[r, e]
    return np.asarray(out)


def pair_expand(const double[:, :, ::1] Z, const double[:, :, ::1] X,
                const long long[::1] left, const long long[::1] right, bint outer):
    cdef Py_ssize_t B = Z.shape[0], n = Z.shape[1], d = Z.shape[2]
    cdef Py_ssize_t m = left.shape[0]
    cdef Py_ssize_t b, k, e, i, j
    cdef double s
    P_arr = np.empty((B, m, d), dtype=np.float64)
    cdef double[:, :, ::1] P = P_arr
    with nogil:
        for b in range(B):
            for k in range(m):
                i = left[k]
                j = right[k]
                if outer:
                    s = 0.0
                    for e in range(d):
                        s = s + X[b, j, e]
                    for e in range(d):
                        P[b, k, e] = Z[b, i, e] * s
                else:
                    for e in range(d):
                        P[b, k, e] = Z[b, i, e] * X[b, j, e]
    return P_arr


def pair_expand_backward(const double[:, :, ::1] G, const double[:, :, ::1] Z,
                         const double[:, :, ::1] X, const long long[::1] left,
                         const long long[::1] right, bint outer):
    cdef Py_ssize_t B = Z.shape[0], n = Z.shape[1], d = Z.shape[2]
    cdef Py_ssize_t m = left.shape[0]
    cdef Py_ssize_t b, k, e, i, j
    cdef double s, acc
    gZ_arr = np.zeros((B, n, d), dtype=np.float64)
    gX_arr = np.zeros((B, n, d), dtype=np.float64)
    cdef double[:, :, ::1] gZ = gZ_arr
    cdef double[:, :, ::1] gX = gX_arr
    with nogil:
        for b in range(B):
            for k in range(m):
                i = left[k]
                j = right[k]
                if outer:
                    s = 0.0
                    acc = 0.0
                    for e in range(d):
                        s = s + X[b, j, e]
                        acc = acc + G[b, k, e] * Z[b, i, e]
                    for e in range(d):
                        gZ[b, i, e] += G[b, k, e] * s
                        gX[b, j, e] += acc
                else:
                    for e in range(d):
                        gZ[b, i, e] += G[b, k, e] * X[b, j, e]
                        gX[b, j, e] += G[b, k, e] * Z[b, i, e]
    return gZ_arr, gX_arr


def _bounds(Py_ssize_t m, Py_ssize_t n):
    starts = np.empty(n, dtype=np.int64)
    ends = np.empty(n, dtype=np.int64)
    cdef Py_ssize_t i
    for i in range(n):
        starts[i] = (i * m) // n
        ends[i] = ((i + 1) * m + n - 1) // n
    return starts, ends


def adaptive_pool(const double[:, :, ::1] P, Py_ssize_t n):
    cdef Py_ssize_t B = P.shape[0], m = P.shape[1], d = P.shape[2]
    cdef Py_ssize_t b, i, r, e, s, t
    cdef double w
    out_arr = np.zeros((B, n, d), dtype=np.float64)
    cdef double[:, :, ::1] out = out_arr
    starts_arr, ends_arr = _bounds(m, n)
    cdef long long[::1] starts = starts_arr
    cdef long long[::1] ends = ends_arr
    with nogil:
        for b in range(B):
            for i in range(n):
                s = starts[i]
                t = ends[i]
                w = 1.0 / (t - s)
                for r in range(s, t):
                    for e in range(d):
                        out[b, i, e] += P[b, r, e]
                for e in range(d):
                    out[b, i, e] *= w
    return out_arr


def adaptive_pool_backward(const double[:, :, ::1] G, Py_ssize_t m):
    cdef Py_ssize_t B = G.shape[0], n = G.shape[1], d = G.shape[2]
    cdef Py_ssize_t b, i, r, e, s, t
    cdef double w
    out_arr = np.zeros((B, m, d), dtype=np.float64)
    cdef double[:, :, ::1] out = out_arr
    starts_arr, ends_arr = _bounds(m, n)
    cdef long long[::1] starts = starts_arr
    cdef long long[::1] ends = ends_arr
    with nogil:
        for b in range(B):
            for i in range(n):
                s = starts[i]
                t = ends[i]
                w = 1.0 / (t - s)
                for r in range(s, t):
                    for e in range(d):
                        out[b, r, e] += w * G[b, i, e]
    return out_arr


def rank_auc(scores, labels):
    cdef double[::1] s_sorted
    cdef long long[::1] order
    cdef const signed char[::1] lab
    sc = np.ascontiguousarray(scores, dtype=np.float64)
    lab_arr = np.ascontiguousarray(np.asarray(labels) == 1, dtype=np.int8)
    order_arr = np.argsort(sc, kind="mergesort").astype(np.int64)
    order = order_arr
    s_sorted = sc[order_arr]
    lab = lab_arr
    cdef Py_ssize_t n = sc.shape[0]
    cdef Py_ssize_t start = 0, end, r
    cdef double rank_sum = 0.0, mid
    cdef long long n_pos = 0, pos_in_run
    with nogil:
        while start < n:
            end = start + 1
            while end < n and s_sorted[end] == s_sorted[start]:
                end += 1
            mid = (start + end + 1) / 2.0
            pos_in_run = 0
            for r in range(start, end):
                pos_in_run += lab[order[r]]
            rank_sum += mid * pos_in_run
            n_pos += pos_in_run
            start = end
    cdef long long n_neg = n - n_pos
    return (rank_sum - n_pos * (n_pos + 1) / 2.0) / (<double>n_pos * n_neg)
