# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled co-occurrence counting kernel.

Single pass over the image per offset, no temporaries; this is the hot loop
of per-case feature extraction at full input resolution.
"""

import numpy as np

cimport numpy as cnp

cnp.import_array()


def glcm_counts(cnp.uint8_t[:, ::1] quantized, int levels, int dr, int dc):
    """Count directed level pairs (q[r, c], q[r + dr, c + dc]).

    Mirrors cxrtriage.kernels._glcm_py.glcm_counts exactly.
    """
    cdef Py_ssize_t h = quantized.shape[0]
    cdef Py_ssize_t w = quantized.shape[1]
    cdef Py_ssize_t r0 = -dr if dr < 0 else 0
    cdef Py_ssize_t r1 = h - (dr if dr > 0 else 0)
    cdef Py_ssize_t c0 = -dc if dc < 0 else 0
    cdef Py_ssize_t c1 = w - (dc if dc > 0 else 0)

    out = np.zeros((levels, levels), dtype=np.int64)
    cdef cnp.int64_t[:, ::1] counts = out
    cdef Py_ssize_t r, c
    cdef int i, j

    if r0 >= r1 or c0 >= c1:
        return out
    for r in range(r0, r1):
        for c in range(c0, c1):
            i = quantized[r, c]
            j = quantized[r + dr, c + dc]
            counts[i, j] += 1
    return out
