"""Radiomic feature extraction and the reference feature space.

Features are computed over a whole-image mask with a one-pixel zero border,
on intensities in [0, 1]. Texture statistics use intensities quantized with
bin width 10 on the 0-255 scale, giving 26 levels.

First-order statistics (x = masked intensities, N = mask size):
    mean        (1/N) sum x
    variance    (1/N) sum (x - mean)^2          (population form)
    skewness    m3 / m2^(3/2), 0 when variance is 0
    kurtosis    m4 / m2^2, 0 when variance is 0
    energy      sum x^2
    entropy     -sum p log2 p over the 26-bin quantized histogram
    min, max, median, 10th/90th percentile, interquartile range
    robust MAD  mean |x - mean(x_sub)| for x_sub within [p10, p90]

Co-occurrence statistics are averaged over the four distance-1 offsets
(0,1), (1,0), (1,1), (1,-1), each matrix symmetrized and normalized:
    contrast       sum (i-j)^2 P(i,j)
    correlation    (sum ij P(i,j) - mu_x mu_y) / (sigma_x sigma_y), 0 when
                   either marginal has zero variance
    joint energy   sum P(i,j)^2
    homogeneity    sum P(i,j) / (1 + (i-j)^2)   (inverse difference moment)
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from cxrtriage import kernels

log = logging.getLogger(__name__)

QUANT_BIN_WIDTH = 10
QUANT_LEVELS = 26  # ceil(256 / 10)
GLCM_OFFSETS = ((0, 1), (1, 0), (1, 1), (1, -1))

FIRST_ORDER_NAMES = (
    "fo_mean",
    "fo_variance",
    "fo_skewness",
    "fo_kurtosis",
    "fo_energy",
    "fo_entropy",
    "fo_min",
    "fo_max",
    "fo_median",
    "fo_p10",
    "fo_p90",
    "fo_iqr",
    "fo_rmad",
)
GLCM_NAMES = ("glcm_contrast", "glcm_correlation", "glcm_joint_energy", "glcm_homogeneity")
FEATURE_NAMES = FIRST_ORDER_NAMES + GLCM_NAMES

# RawFeatureVector: mapping feature name -> value, None marking a missing entry.
RawFeatureVector = dict


class FeatureSpaceError(ValueError):
    """Raised when the fitted feature space degenerates to nothing usable."""


def quantize_levels(pixels: np.ndarray) -> np.ndarray:
    """Map [0, 1] intensities to integer levels floor(round(v * 255) / 10)."""
    v255 = np.rint(np.clip(pixels, 0.0, 1.0) * 255.0)
    return (v255 / QUANT_BIN_WIDTH).astype(np.uint8)


def _interior(pixels: np.ndarray) -> np.ndarray:
    if pixels.ndim != 2:
        raise ValueError(f"expected a 2D intensity matrix, got shape {pixels.shape}")
    if pixels.shape[0] < 3 or pixels.shape[1] < 3:
        raise ValueError("image too small for a one-pixel border mask")
    return pixels[1:-1, 1:-1]


_VALUE_GRID = np.arange(256, dtype=np.float64) / 255.0
_PCTS = (10.0, 25.0, 50.0, 75.0, 90.0)


def _hist_percentiles(hist256: np.ndarray, n: int, qs) -> list:
    """Percentiles of 8-bit-exact data read off the value histogram.

    Reproduces numpy's linear interpolation (including its symmetric lerp
    form) bit for bit, without sorting the raw values.
    """
    cum = np.cumsum(hist256)

    def order_stat(j: int) -> float:
        return float(_VALUE_GRID[np.searchsorted(cum, j, side="right")])

    out = []
    for q in qs:
        virtual = (q / 100.0) * (n - 1)
        lower = math.floor(virtual)
        t = virtual - lower
        a = order_stat(int(lower))
        b = order_stat(min(int(lower) + 1, n - 1))
        diff = b - a
        r = a + diff * t
        if t >= 0.5:
            r = b - diff * (1.0 - t)
        out.append(r)
    return out


def _hist_rmad(hist256: np.ndarray, lo: float, hi: float) -> float:
    sel = (_VALUE_GRID >= lo) & (_VALUE_GRID <= hi)
    count = int(hist256[sel].sum())
    if count == 0:
        return 0.0
    weights = hist256[sel].astype(np.float64)
    values = _VALUE_GRID[sel]
    mean_sub = float(np.sum(weights * values)) / count
    return float(np.sum(weights * np.abs(values - mean_sub))) / count


def _first_order(masked: np.ndarray) -> tuple[dict, np.ndarray]:
    """First-order block via the fused kernel; also returns the level map."""
    mean, m2, m3, m4, energy, vmin, vmax, hist256, exact, levels = kernels.first_order_stats(
        masked, QUANT_LEVELS, float(QUANT_BIN_WIDTH)
    )
    if vmin < 0.0 or vmax > 1.0:
        raise ValueError("intensities outside [0, 1]")
    n = masked.size
    if m2 > 0.0:
        skew = m3 / m2**1.5
        kurt = m4 / (m2 * m2)
    else:
        skew = 0.0
        kurt = 0.0

    level_counts = np.add.reduceat(hist256, np.arange(0, 256, QUANT_BIN_WIDTH))
    p = level_counts[level_counts > 0] / n
    entropy = float(-np.sum(p * np.log2(p)))

    if exact:
        p10, p25, p50, p75, p90 = _hist_percentiles(hist256, n, _PCTS)
        rmad = _hist_rmad(hist256, p10, p90)
    else:
        flat = masked.ravel()  # the interior slice is strided, so this copies
        p10, p25, p50, p75, p90 = np.percentile(flat, _PCTS, overwrite_input=True)
        sub = flat[(flat >= p10) & (flat <= p90)]
        rmad = (
            float(np.mean(np.abs(sub - np.mean(sub, dtype=np.float64)), dtype=np.float64))
            if sub.size
            else 0.0
        )

    features = {
        "fo_mean": mean,
        "fo_variance": m2,
        "fo_skewness": skew,
        "fo_kurtosis": kurt,
        "fo_energy": energy,
        "fo_entropy": entropy,
        "fo_min": vmin,
        "fo_max": vmax,
        "fo_median": float(p50),
        "fo_p10": float(p10),
        "fo_p90": float(p90),
        "fo_iqr": float(p75 - p25),
        "fo_rmad": rmad,
    }
    return features, levels


_IDX = np.arange(QUANT_LEVELS, dtype=np.float64)
_DIFF_SQ = (_IDX[:, None] - _IDX[None, :]) ** 2


def _glcm_offset_features(counts: np.ndarray) -> tuple[float, float, float, float]:
    sym = counts + counts.T
    total = sym.sum()
    if total == 0:
        return 0.0, 0.0, 0.0, 0.0
    P = sym / total
    contrast = float(np.sum(_DIFF_SQ * P))
    px = P.sum(axis=1)
    mu = float(np.sum(_IDX * px))
    var = float(np.sum((_IDX - mu) ** 2 * px))
    if var > 0.0:
        correlation = (float(np.sum(_IDX[:, None] * _IDX[None, :] * P)) - mu * mu) / var
    else:
        correlation = 0.0
    joint_energy = float(np.sum(P * P))
    homogeneity = float(np.sum(P / (1.0 + _DIFF_SQ)))
    return contrast, correlation, joint_energy, homogeneity


def _glcm(levels: np.ndarray) -> dict:
    counts = kernels.glcm_counts_multi(np.ascontiguousarray(levels), QUANT_LEVELS)
    acc = np.zeros(4)
    for k in range(counts.shape[0]):
        acc += _glcm_offset_features(counts[k])
    acc /= counts.shape[0]
    return dict(zip(GLCM_NAMES, acc.tolist()))


def extract_features(pixels: np.ndarray) -> dict:
    """Compute the full feature vector for one [0, 1] intensity matrix.

    Returns a name -> float mapping in canonical ``FEATURE_NAMES`` order.
    Equal pixel matrices yield bit-equal feature vectors.
    """
    masked = _interior(np.asarray(pixels, dtype=np.float64))
    out, levels = _first_order(masked)
    out.update(_glcm(levels))
    return out


@dataclass
class FeatureCatalog:
    """Retained feature names plus per-feature imputation values.

    Fitting starts from first-seen name order across the stack, imputes each
    missing entry with the per-feature reference median, then drops columns
    that are identically zero and, after that, columns with zero variance.
    """

    retained: list = field(default_factory=list)
    impute: dict = field(default_factory=dict)

    @classmethod
    def fit(cls, vectors: list) -> "FeatureCatalog":
        if not vectors:
            raise FeatureSpaceError("degenerate feature space: no vectors to fit")
        names = []
        seen = set()
        for vec in vectors:
            for name in vec:
                if name not in seen:
                    seen.add(name)
                    names.append(name)

        impute = {}
        columns = {}
        for name in names:
            present = [float(v[name]) for v in vectors if v.get(name) is not None]
            if not present:
                log.warning("feature %s missing in every vector, dropping", name)
                continue
            impute[name] = float(np.median(present))
            columns[name] = np.array(
                [float(v[name]) if v.get(name) is not None else impute[name] for v in vectors]
            )

        retained = [n for n in columns if np.any(columns[n] != 0.0)]
        retained = [n for n in retained if np.ptp(columns[n]) > 0.0]
        if not retained:
            raise FeatureSpaceError("degenerate feature space: all columns removed")
        return cls(retained=retained, impute={n: impute[n] for n in retained})

    @property
    def dim(self) -> int:
        return len(self.retained)

    def align(self, raw: dict) -> np.ndarray:
        """Order a raw vector by the catalog, imputing missing entries."""
        return np.array(
            [
                float(raw[n]) if raw.get(n) is not None else self.impute[n]
                for n in self.retained
            ]
        )


@dataclass
class Standardizer:
    """Per-feature affine map to zero mean and unit sample deviation."""

    mu: np.ndarray
    sigma: np.ndarray

    @classmethod
    def fit(cls, matrix: np.ndarray) -> "Standardizer":
        matrix = np.asarray(matrix, dtype=np.float64)
        if matrix.ndim != 2 or matrix.shape[0] < 2:
            raise ValueError("standardizer needs at least two aligned vectors")
        mu = matrix.mean(axis=0)
        sigma = matrix.std(axis=0, ddof=1)
        bad = np.flatnonzero(sigma == 0.0)
        if bad.size:
            raise ValueError(f"zero-variance feature at column(s) {bad.tolist()}")
        return cls(mu=mu, sigma=sigma)

    def transform(self, vec: np.ndarray) -> np.ndarray:
        return (np.asarray(vec, dtype=np.float64) - self.mu) / self.sigma

    def inverse(self, z: np.ndarray) -> np.ndarray:
        return np.asarray(z, dtype=np.float64) * self.sigma + self.mu


def read_feature_table(path) -> list:
    """Read a delimited feature table: header row of names, one row per case.

    The ``case_id`` column is mandatory; empty fields mean missing values.
    Returns a list of (case_id, raw vector) pairs in file order.
    """
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or "case_id" not in reader.fieldnames:
            raise ValueError(f"feature table {path} lacks a case_id column")
        out = []
        for row in reader:
            case_id = row.pop("case_id")
            if not case_id:
                raise ValueError(f"feature table {path} has a row without case_id")
            vec = {}
            for name, text in row.items():
                if text is None or text == "":
                    vec[name] = None
                else:
                    try:
                        vec[name] = float(text)
                    except ValueError as exc:
                        raise ValueError(
                            f"feature table {path}: bad value {text!r} for {name}"
                        ) from exc
            out.append((case_id, vec))
    return out


def write_feature_table(path, rows: list) -> None:
    """Write (case_id, raw vector) pairs; None values become empty fields."""
    names = []
    seen = set()
    for _, vec in rows:
        for name in vec:
            if name not in seen:
                seen.add(name)
                names.append(name)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["case_id", *names])
        for case_id, vec in rows:
            writer.writerow(
                [case_id] + ["" if vec.get(n) is None else repr(float(vec[n])) for n in names]
            )
