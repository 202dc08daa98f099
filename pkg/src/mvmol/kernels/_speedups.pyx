# Hot inner loops for graph aggregation, shared by the autodiff ops and the
# geometry utilities. Compiled with bounds checks off; callers validate index
# ranges before dispatching here.

import numpy as np

cimport numpy as cnp

cnp.import_array()


def scatter_add_rows(const cnp.float64_t[:, ::1] src, const cnp.int64_t[::1] index, Py_ssize_t n_out):
    """Sum rows of ``src`` into an (n_out, d) output at positions ``index``."""
    cdef Py_ssize_t m = src.shape[0]
    cdef Py_ssize_t d = src.shape[1]
    out_arr = np.zeros((n_out, d), dtype=np.float64)
    cdef cnp.float64_t[:, ::1] out = out_arr
    cdef Py_ssize_t i, j, row
    for i in range(m):
        row = index[i]
        for j in range(d):
            out[row, j] += src[i, j]
    return out_arr


def gather_rows(const cnp.float64_t[:, ::1] src, const cnp.int64_t[::1] index):
    """Row lookup src[index]; mirror of scatter_add_rows for benchmarks."""
    cdef Py_ssize_t m = index.shape[0]
    cdef Py_ssize_t d = src.shape[1]
    out_arr = np.empty((m, d), dtype=np.float64)
    cdef cnp.float64_t[:, ::1] out = out_arr
    cdef Py_ssize_t i, j, row
    for i in range(m):
        row = index[i]
        for j in range(d):
            out[i, j] = src[row, j]
    return out_arr


def pairwise_sq_dists(const cnp.float64_t[:, ::1] x):
    """Dense matrix of squared Euclidean distances between rows of x."""
    cdef Py_ssize_t n = x.shape[0]
    cdef Py_ssize_t d = x.shape[1]
    out_arr = np.zeros((n, n), dtype=np.float64)
    cdef cnp.float64_t[:, ::1] out = out_arr
    cdef Py_ssize_t i, j, k
    cdef cnp.float64_t acc, diff
    for i in range(n):
        for j in range(i + 1, n):
            acc = 0.0
            for k in range(d):
                diff = x[i, k] - x[j, k]
                acc += diff * diff
            out[i, j] = acc
            out[j, i] = acc
    return out_arr
