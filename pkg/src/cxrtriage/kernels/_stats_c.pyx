# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled two-pass intensity statistics.

Per-row partial sums are combined with Neumaier compensation, so accuracy
tracks numpy's pairwise summation to well below the documented tolerance
while the inner loops stay branch-light and pipeline-friendly.
"""

from libc.math cimport fabs, rint

import numpy as np

cimport numpy as cnp

cnp.import_array()


cdef inline void _neum(double v, double *s, double *c) nogil:
    cdef double t = s[0] + v
    if fabs(s[0]) >= fabs(v):
        c[0] += (s[0] - t) + v
    else:
        c[0] += (v - t) + s[0]
    s[0] = t


def first_order_stats(double[:, :] interior, int levels_n, double bin_width):
    """Moments, extrema, energy, the 256-bin value histogram and the
    quantized level map in two passes.

    Returns (mean, m2, m3, m4, energy, vmin, vmax, hist256, exact_256,
    levels). ``hist256`` counts rint(clip(v, 0, 1) * 255); ``exact_256`` is
    True when every value equals its 8-bit reconstruction k / 255, in which
    case order statistics can be read off the histogram exactly. ``levels``
    is the level map floor(rint(clip(v) * 255) / bin_width).
    """
    cdef Py_ssize_t h = interior.shape[0], w = interior.shape[1]
    cdef Py_ssize_t n = h * w
    if n == 0:
        raise ValueError("empty intensity matrix")

    cdef cnp.ndarray[cnp.uint8_t, ndim=2] levels = np.empty((h, w), dtype=np.uint8)
    cdef cnp.ndarray[cnp.int64_t, ndim=1] hist256 = np.zeros(256, dtype=np.int64)
    cdef cnp.uint8_t[:, ::1] lv = levels
    cdef cnp.int64_t[::1] hv = hist256

    cdef double[256] table
    cdef int k
    for k in range(256):
        table[k] = k / 255.0

    cdef double s = 0.0, comp = 0.0
    cdef double vmin = interior[0, 0], vmax = interior[0, 0]
    cdef double v, clipped, rs
    cdef Py_ssize_t i, j
    cdef int q, exact = 1
    with nogil:
        for i in range(h):
            rs = 0.0
            for j in range(w):
                v = interior[i, j]
                rs += v
                if v < vmin:
                    vmin = v
                if v > vmax:
                    vmax = v
                clipped = v
                if clipped < 0.0:
                    clipped = 0.0
                elif clipped > 1.0:
                    clipped = 1.0
                q = <int>rint(clipped * 255.0)
                hv[q] += 1
                lv[i, j] = <cnp.uint8_t>(<int>(q / bin_width))
                if v != table[q]:
                    exact = 0
            _neum(rs, &s, &comp)
    cdef double mean = (s + comp) / n

    cdef double s2 = 0.0, c2 = 0.0, s3 = 0.0, c3 = 0.0
    cdef double s4 = 0.0, c4 = 0.0, se = 0.0, ce = 0.0
    cdef double r2, r3, r4, re, d, d2
    with nogil:
        for i in range(h):
            r2 = 0.0
            r3 = 0.0
            r4 = 0.0
            re = 0.0
            for j in range(w):
                v = interior[i, j]
                d = v - mean
                d2 = d * d
                r2 += d2
                r3 += d2 * d
                r4 += d2 * d2
                re += v * v
            _neum(r2, &s2, &c2)
            _neum(r3, &s3, &c3)
            _neum(r4, &s4, &c4)
            _neum(re, &se, &ce)
    return (
        mean,
        (s2 + c2) / n,
        (s3 + c3) / n,
        (s4 + c4) / n,
        se + ce,
        vmin,
        vmax,
        hist256,
        bool(exact),
        levels,
    )


def glcm_counts_multi(cnp.uint8_t[:, ::1] quantized, int levels):
    """Raw co-occurrence counts for the four canonical offsets in one sweep.

    Offsets (dr, dc): (0,1), (1,0), (1,1), (1,-1). Counts are directional;
    symmetrization happens downstream.
    """
    cdef Py_ssize_t h = quantized.shape[0], w = quantized.shape[1]
    cdef cnp.ndarray[cnp.int64_t, ndim=3] counts = np.zeros(
        (4, levels, levels), dtype=np.int64
    )
    cdef cnp.int64_t[:, :, ::1] cv = counts
    cdef Py_ssize_t i, j
    cdef int a
    with nogil:
        for i in range(h):
            for j in range(w):
                a = quantized[i, j]
                if j + 1 < w:
                    cv[0, a, quantized[i, j + 1]] += 1
                if i + 1 < h:
                    cv[1, a, quantized[i + 1, j]] += 1
                    if j + 1 < w:
                        cv[2, a, quantized[i + 1, j + 1]] += 1
                    if j - 1 >= 0:
                        cv[3, a, quantized[i + 1, j - 1]] += 1
    return counts
