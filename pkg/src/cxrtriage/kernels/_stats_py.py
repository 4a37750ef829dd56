"""Numpy fallback for the intensity statistics kernel."""

import numpy as np

_TABLE = np.arange(256, dtype=np.float64) / 255.0


def first_order_stats(interior, levels_n, bin_width):
    interior = np.asarray(interior, dtype=np.float64)
    if interior.size == 0:
        raise ValueError("empty intensity matrix")
    flat = interior.reshape(-1)
    mean = float(np.mean(flat, dtype=np.float64))
    dev = flat - mean
    d2 = dev * dev
    m2 = float(np.mean(d2, dtype=np.float64))
    m3 = float(np.mean(d2 * dev, dtype=np.float64))
    m4 = float(np.mean(d2 * d2, dtype=np.float64))
    energy = float(np.sum(flat * flat, dtype=np.float64))
    q = np.rint(np.clip(interior, 0.0, 1.0) * 255.0).astype(np.int64)
    hist256 = np.bincount(q.reshape(-1), minlength=256).astype(np.int64)
    exact = bool(np.all(interior == _TABLE[q]))
    levels = (q / bin_width).astype(np.uint8)
    return (
        mean,
        m2,
        m3,
        m4,
        energy,
        float(np.min(flat)),
        float(np.max(flat)),
        hist256,
        exact,
        levels,
    )


def glcm_counts_multi(quantized, levels):
    from cxrtriage.kernels import _glcm_py

    offsets = ((0, 1), (1, 0), (1, 1), (1, -1))
    counts = np.zeros((4, levels, levels), dtype=np.int64)
    for k, (dr, dc) in enumerate(offsets):
        counts[k] = _glcm_py.glcm_counts(quantized, levels, dr, dc)
    return counts
