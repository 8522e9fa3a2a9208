# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled twins of the kernels in ``pyref.py``.

These are the inner loops of edge-restricted attention (gather/scatter over
edge lists) where ``np.add.at`` / ``np.maximum.at`` are the bottleneck.
Accumulation order matches the reference implementation exactly.
"""

import numpy as np

cimport numpy as cnp

IMPL = "cython"

ctypedef fused real:
    float
    double


def scatter_add_rows(real[:, ::1] out, const cnp.int64_t[::1] index, const real[:, ::1] src):
    cdef Py_ssize_t e, j, row
    cdef Py_ssize_t n = index.shape[0]
    cdef Py_ssize_t d = src.shape[1]
    for e in range(n):
        row = index[e]
        for j in range(d):
            out[row, j] += src[e, j]
    return np.asarray(out)


def segment_sum(const real[:, ::1] values, const cnp.int64_t[::1] seg, Py_ssize_t n_seg):
    cdef Py_ssize_t e, j, row
    cdef Py_ssize_t n = seg.shape[0]
    cdef Py_ssize_t d = values.shape[1]
    if real is float:
        out_np = np.zeros((n_seg, d), dtype=np.float32)
    else:
        out_np = np.zeros((n_seg, d), dtype=np.float64)
    cdef real[:, ::1] out = out_np
    for e in range(n):
        row = seg[e]
        for j in range(d):
            out[row, j] += values[e, j]
    return out_np


def segment_max(const real[:, ::1] values, const cnp.int64_t[::1] seg, Py_ssize_t n_seg):
    cdef Py_ssize_t e, j, row
    cdef Py_ssize_t n = seg.shape[0]
    cdef Py_ssize_t d = values.shape[1]
    if real is float:
        out_np = np.full((n_seg, d), -np.inf, dtype=np.float32)
    else:
        out_np = np.full((n_seg, d), -np.inf, dtype=np.float64)
    cdef real[:, ::1] out = out_np
    for e in range(n):
        row = seg[e]
        for j in range(d):
            if values[e, j] > out[row, j]:
                out[row, j] = values[e, j]
    return out_np
