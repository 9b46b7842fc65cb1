# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels. Mirrors ``_pykernels`` one function at a time."""

import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt

cnp.import_array()

BACKEND = "cython"


def ffd_assign(const long long[::1] lengths, long long capacity, long long max_items):
    cdef Py_ssize_t n = lengths.shape[0]
    cdef long long[::1] free = np.empty(max(n, 1), dtype=np.int64)
    cdef long long[::1] counts = np.empty(max(n, 1), dtype=np.int64)
    out_arr = np.empty(n, dtype=np.int64)
    cdef long long[::1] out = out_arr
    cdef Py_ssize_t i, b, n_bins = 0
    cdef long long length
    with nogil:
        for i in range(n):
            length = lengths[i]
            for b in range(n_bins):
                if free[b] >= length and counts[b] < max_items:
                    free[b] -= length
                    counts[b] += 1
                    out[i] = b
                    break
            else:
                free[n_bins] = capacity - length
                counts[n_bins] = 1
                out[i] = n_bins
                n_bins += 1
    return out_arr, n_bins


def lpt_assign(const long long[::1] loads, Py_ssize_t num_bins):
    # num_bins is small in practice (ranks); a linear argmin scan is fine.
    cdef Py_ssize_t n = loads.shape[0]
    cdef long long[::1] current = np.zeros(num_bins, dtype=np.int64)
    out_arr = np.empty(n, dtype=np.int64)
    cdef long long[::1] out = out_arr
    cdef Py_ssize_t i, b, best
    with nogil:
        for i in range(n):
            best = 0
            for b in range(1, num_bins):
                if current[b] < current[best]:
                    best = b
            out[i] = best
            current[best] += loads[i]
    return out_arr


def nearest_centroid(const float[:, ::1] points, const double[:, ::1] centroids):
    cdef Py_ssize_t n = points.shape[0]
    cdef Py_ssize_t k = centroids.shape[0]
    cdef Py_ssize_t d = centroids.shape[1]
    labels_arr = np.empty(n, dtype=np.int64)
    best_arr = np.empty(n, dtype=np.float64)
    cdef long long[::1] labels = labels_arr
    cdef double[::1] best = best_arr
    cdef Py_ssize_t i, j, t, arg
    cdef double acc, diff, cur
    with nogil:
        for i in range(n):
            arg = 0
            cur = 0.0
            for j in range(k):
                acc = 0.0
                for t in range(d):
                    diff = <double>points[i, t] - centroids[j, t]
                    acc = acc + diff * diff
                if j == 0 or acc < cur:
                    cur = acc
                    arg = j
            labels[i] = arg
            best[i] = cur
    return labels_arr, best_arr


def pairwise_distances(const double[:, ::1] x):
    cdef Py_ssize_t b = x.shape[0]
    cdef Py_ssize_t d = x.shape[1]
    out_arr = np.empty(b * (b - 1) // 2, dtype=np.float64)
    cdef double[::1] out = out_arr
    cdef Py_ssize_t i, j, t, pos = 0
    cdef double acc, diff
    with nogil:
        for i in range(b - 1):
            for j in range(i + 1, b):
                acc = 0.0
                for t in range(d):
                    diff = x[i, t] - x[j, t]
                    acc = acc + diff * diff
                out[pos] = sqrt(acc)
                pos += 1
    return out_arr
