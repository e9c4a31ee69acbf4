# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels: flat L2 nearest-neighbour scan and a fused dense layer."""

import numpy as np

from libc.math cimport exp
from scipy.linalg.cython_blas cimport dgemm


def l2_argmin(const float[:, ::1] keys, const float[::1] query):
    """Index and squared distance of the nearest key; ties go to the lowest index."""
    cdef Py_ssize_t n = keys.shape[0], d = keys.shape[1]
    cdef Py_ssize_t i, j, best = -1
    cdef double acc, diff, best_dist = 0.0
    if query.shape[0] != d:
        raise ValueError(f"query has dimension {query.shape[0]}, keys have {d}")
    if n == 0:
        raise ValueError("empty key set")
    with nogil:
        for i in range(n):
            acc = 0.0
            for j in range(d):
                diff = <double>keys[i, j] - <double>query[j]
                acc = acc + diff * diff
                if best >= 0 and acc >= best_dist:
                    break  # partial sums only grow, so this key cannot win
            if best < 0 or acc < best_dist:
                best = i
                best_dist = acc
    return best, best_dist


def l2_argmin_many(const float[:, ::1] keys, const float[:, ::1] queries):
    cdef Py_ssize_t n = keys.shape[0], d = keys.shape[1], m = queries.shape[0]
    cdef Py_ssize_t q, i, j, best
    cdef double acc, diff, best_dist
    if queries.shape[1] != d:
        raise ValueError(f"queries have dimension {queries.shape[1]}, keys have {d}")
    if n == 0:
        raise ValueError("empty key set")
    idx = np.empty(m, dtype=np.int64)
    dist = np.empty(m, dtype=np.float64)
    cdef long long[::1] idx_v = idx
    cdef double[::1] dist_v = dist
    with nogil:
        for q in range(m):
            best = -1
            best_dist = 0.0
            for i in range(n):
                acc = 0.0
                for j in range(d):
                    diff = <double>keys[i, j] - <double>queries[q, j]
                    acc = acc + diff * diff
                    if best >= 0 and acc >= best_dist:
                        break
                if best < 0 or acc < best_dist:
                    best = i
                    best_dist = acc
            idx_v[q] = best
            dist_v[q] = best_dist
    return idx, dist


def dense_forward(const double[:, ::1] x, const double[:, ::1] weight, const double[::1] bias,
                  bint activate, bint residual):
    """``silu(x @ weight.T + bias) (+ x)`` in one pass over a BLAS product."""
    cdef int rows = <int>x.shape[0]
    cdef int n_in = <int>x.shape[1]
    cdef int n_out = <int>weight.shape[0]
    cdef Py_ssize_t r, c
    cdef double v
    cdef double one = 1.0, zero = 0.0
    cdef char transa = b'T', transb = b'N'
    if weight.shape[1] != n_in or bias.shape[0] != n_out:
        raise ValueError("dense layer shape mismatch")
    if residual and n_in != n_out:
        raise ValueError("residual connection needs equal widths")
    out = np.empty((rows, n_out), dtype=np.float64)
    cdef double[:, ::1] out_v = out
    if rows == 0:
        return out
    # row-major (rows, n_out) == column-major (n_out, rows) = W_cm^T @ x_cm
    dgemm(&transa, &transb, &n_out, &rows, &n_in, &one,
          <double*>&weight[0, 0], &n_in, <double*>&x[0, 0], &n_in,
          &zero, &out_v[0, 0], &n_out)
    with nogil:
        for r in range(rows):
            for c in range(n_out):
                v = out_v[r, c] + bias[c]
                if activate:
                    v = v / (1.0 + exp(-v))
                if residual:
                    v = v + x[r, c]
                out_v[r, c] = v
    return out
