"""Backend selection for the hot numeric kernels.

Two kernel families live here: co-occurrence counting and the fused
first-order statistics pass. The compiled Cython extensions are preferred
when importable; otherwise the NumPy implementations are used. Set
CXRTRIAGE_KERNELS=c or CXRTRIAGE_KERNELS=py to force one backend (forcing
``c`` raises if an extension is missing).
"""

import os

from cxrtriage.kernels import _glcm_py, _stats_py

_requested = os.environ.get("CXRTRIAGE_KERNELS", "auto").lower()

if _requested not in ("auto", "c", "py"):
    raise ValueError(f"CXRTRIAGE_KERNELS must be 'auto', 'c' or 'py', got {_requested!r}")

if _requested == "py":
    BACKEND = "py"
else:
    try:
        from cxrtriage.kernels import _glcm_c, _stats_c  # noqa: F401

        BACKEND = "c"
    except ImportError:
        if _requested == "c":
            raise
        BACKEND = "py"

if BACKEND == "c":
    from cxrtriage.kernels._glcm_c import glcm_counts
    from cxrtriage.kernels._stats_c import first_order_stats, glcm_counts_multi
else:
    glcm_counts = _glcm_py.glcm_counts
    first_order_stats = _stats_py.first_order_stats
    glcm_counts_multi = _stats_py.glcm_counts_multi

__all__ = ["glcm_counts", "first_order_stats", "glcm_counts_multi", "BACKEND"]
