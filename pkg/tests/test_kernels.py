"""Backend parity and selection for the compiled numeric kernels."""

import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cxrtriage import kernels
from cxrtriage.kernels import _glcm_py, _stats_py

try:
    from cxrtriage.kernels import _glcm_c, _stats_c

    HAVE_C = True
except ImportError:
    HAVE_C = False

needs_c = pytest.mark.skipif(not HAVE_C, reason="compiled kernels not built")

LEVELS = 26
BIN_WIDTH = 10.0


def _random_unit_matrix(rng, h, w, eight_bit):
    if eight_bit:
        return rng.integers(0, 256, (h, w)).astype(np.float64) / 255.0
    return rng.uniform(0.0, 1.0, (h, w))


def _assert_stats_match(got, want):
    g_mean, g_m2, g_m3, g_m4, g_energy, g_min, g_max, g_hist, g_exact, g_levels = got
    w_mean, w_m2, w_m3, w_m4, w_energy, w_min, w_max, w_hist, w_exact, w_levels = want
    for g, w in ((g_mean, w_mean), (g_m2, w_m2), (g_m3, w_m3), (g_m4, w_m4)):
        assert g == pytest.approx(w, rel=1e-10, abs=1e-12)
    assert g_energy == pytest.approx(w_energy, rel=1e-10)
    assert g_min == w_min
    assert g_max == w_max
    assert np.array_equal(g_hist, w_hist)
    assert g_exact == w_exact
    assert np.array_equal(g_levels, w_levels)


def test_auto_backend_prefers_compiled():
    if HAVE_C:
        assert kernels.BACKEND == "c"
    else:
        assert kernels.BACKEND == "py"


@needs_c
@pytest.mark.parametrize("eight_bit", [True, False])
@pytest.mark.parametrize("shape", [(1, 1), (3, 7), (40, 40), (64, 17)])
def test_first_order_stats_backend_parity(rng, shape, eight_bit):
    matrix = _random_unit_matrix(rng, *shape, eight_bit)
    got = _stats_c.first_order_stats(matrix, LEVELS, BIN_WIDTH)
    want = _stats_py.first_order_stats(matrix, LEVELS, BIN_WIDTH)
    _assert_stats_match(got, want)
    assert got[8] is eight_bit  # the exact-256 flag tracks the data source


@needs_c
def test_first_order_stats_parity_on_strided_interior(rng):
    # The feature path hands the kernels a border-trimmed view, not a
    # contiguous array; both backends must accept it and agree.
    full = _random_unit_matrix(rng, 12, 9, eight_bit=False)
    interior = full[1:-1, 1:-1]
    got = _stats_c.first_order_stats(interior, LEVELS, BIN_WIDTH)
    want = _stats_py.first_order_stats(interior, LEVELS, BIN_WIDTH)
    _assert_stats_match(got, want)


@needs_c
@pytest.mark.parametrize("offset", [(0, 1), (1, 0), (1, 1), (1, -1)])
def test_glcm_counts_backend_parity(rng, offset):
    quantized = rng.integers(0, LEVELS, (23, 31)).astype(np.uint8)
    got = _glcm_c.glcm_counts(quantized, LEVELS, *offset)
    want = _glcm_py.glcm_counts(quantized, LEVELS, *offset)
    assert np.array_equal(got, want)


@needs_c
def test_glcm_counts_multi_backend_parity(rng):
    quantized = rng.integers(0, LEVELS, (17, 17)).astype(np.uint8)
    got = _stats_c.glcm_counts_multi(quantized, LEVELS)
    want = _stats_py.glcm_counts_multi(quantized, LEVELS)
    assert got.shape == (4, LEVELS, LEVELS)
    assert np.array_equal(got, want)


def test_empty_matrix_rejected():
    empty = np.empty((0, 0), dtype=np.float64)
    with pytest.raises(ValueError, match="empty intensity matrix"):
        _stats_py.first_order_stats(empty, LEVELS, BIN_WIDTH)
    if HAVE_C:
        with pytest.raises(ValueError, match="empty intensity matrix"):
            _stats_c.first_order_stats(empty, LEVELS, BIN_WIDTH)


def test_glcm_zero_overlap_is_all_zeros():
    one_row = np.zeros((1, 5), dtype=np.uint8)
    counts = _glcm_py.glcm_counts(one_row, LEVELS, 1, 0)
    assert counts.shape == (LEVELS, LEVELS)
    assert counts.sum() == 0
    if HAVE_C:
        assert _glcm_c.glcm_counts(one_row, LEVELS, 1, 0).sum() == 0


@settings(max_examples=40, deadline=None)
@given(
    h=st.integers(min_value=1, max_value=14),
    w=st.integers(min_value=1, max_value=14),
    seed=st.integers(min_value=0, max_value=2**32 - 1),
)
def test_glcm_counts_total_equals_valid_pairs(h, w, seed):
    """Each offset contributes one count per in-bounds pixel pair."""
    quantized = np.random.default_rng(seed).integers(0, LEVELS, (h, w)).astype(np.uint8)
    for dr, dc in ((0, 1), (1, 0), (1, 1), (1, -1)):
        counts = kernels.glcm_counts(quantized, LEVELS, dr, dc)
        assert counts.sum() == (h - abs(dr)) * (w - abs(dc))


def _backend_in_subprocess(value):
    env = dict(os.environ)
    env.pop("CXRTRIAGE_KERNELS", None)
    if value is not None:
        env["CXRTRIAGE_KERNELS"] = value
    return subprocess.run(
        [sys.executable, "-c", "import cxrtriage.kernels as k; print(k.BACKEND)"],
        capture_output=True,
        text=True,
        env=env,
    )


def test_env_forces_python_backend():
    proc = _backend_in_subprocess("py")
    assert proc.returncode == 0
    assert proc.stdout.strip() == "py"


@needs_c
def test_env_forces_compiled_backend():
    proc = _backend_in_subprocess("c")
    assert proc.returncode == 0
    assert proc.stdout.strip() == "c"


def test_env_rejects_unknown_backend():
    proc = _backend_in_subprocess("fortran")
    assert proc.returncode != 0
    assert "CXRTRIAGE_KERNELS" in proc.stderr
