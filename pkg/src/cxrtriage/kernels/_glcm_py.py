"""Pure-NumPy co-occurrence counting, the fallback when the C kernel is absent."""

import numpy as np


def glcm_counts(quantized, levels, dr, dc):
    """Count directed level pairs (q[r, c], q[r + dr, c + dc]) over a 2D array.

    Args:
        quantized: 2D uint8 array of discretized intensity levels.
        levels: number of levels; every value must be < levels.
        dr, dc: row/column displacement of the second pixel.

    Returns:
        int64 array of shape (levels, levels); entry (i, j) is the number of
        positions where the first pixel has level i and the displaced pixel
        has level j. Both endpoints must fall inside the array.
    """
    h, w = quantized.shape
    r0, r1 = max(0, -dr), h - max(0, dr)
    c0, c1 = max(0, -dc), w - max(0, dc)
    if r0 >= r1 or c0 >= c1:
        return np.zeros((levels, levels), dtype=np.int64)
    a = quantized[r0:r1, c0:c1]
    b = quantized[r0 + dr : r1 + dr, c0 + dc : c1 + dc]
    codes = a.astype(np.int64) * levels + b
    counts = np.bincount(codes.ravel(), minlength=levels * levels)
    return counts.reshape(levels, levels).astype(np.int64)
