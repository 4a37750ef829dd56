"""Out-of-distribution scoring against a reference feature distribution.

A reference set of standardized feature vectors is summarized by its mean and
sample covariance (n - 1 denominator). New cases are scored with the
Mahalanobis distance

    score(z) = sqrt((z - mu)^T (Sigma + lambda I)^(-1) (z - mu))

computed through a Cholesky solve, never an explicit inverse. The ridge
lambda = lambda_rel * trace(Sigma) / d keeps the factorization well posed;
lambda_rel escalates by 10x until the factorization succeeds, capped at 1e-1.

The flagging threshold is the nearest-rank 95th percentile of the reference
set's own scores; a case is out-of-distribution iff score > threshold, so a
score exactly at the threshold still counts as in-distribution.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from cxrtriage import MODEL_SCHEMA_VERSION, __version__
from cxrtriage.features import QUANT_BIN_WIDTH, QUANT_LEVELS, FeatureCatalog, Standardizer

DEFAULT_LAMBDA_REL = 1e-6
MAX_LAMBDA_REL = 1e-1
DEFAULT_OOD_PERCENTILE = 95.0


class SingularCovarianceError(ValueError):
    """Raised when no permitted ridge makes the covariance factorizable."""


@dataclass
class OodSignal:
    score: float
    tau: float

    @property
    def is_ood(self) -> bool:
        return self.score > self.tau


@dataclass
class ReferenceModel:
    """Gaussian summary of the reference set in standardized feature space."""

    mu: np.ndarray
    sigma: np.ndarray
    lam: float
    n_ref: int
    _factor: tuple = field(default=None, repr=False, compare=False)

    def _cho(self):
        if self._factor is None:
            d = self.mu.shape[0]
            try:
                self._factor = cho_factor(self.sigma + self.lam * np.eye(d), lower=True)
            except np.linalg.LinAlgError as exc:
                raise SingularCovarianceError("covariance irreparably singular") from exc
        return self._factor


def fit_reference(zs: np.ndarray, lambda_rel: float = DEFAULT_LAMBDA_REL) -> ReferenceModel:
    """Fit mean, sample covariance and ridge from standardized vectors (n, d)."""
    zs = np.asarray(zs, dtype=np.float64)
    if zs.ndim != 2 or zs.shape[0] < 2:
        raise ValueError("reference fit needs at least two vectors")
    if not np.all(np.isfinite(zs)):
        raise ValueError("non-finite values in reference vectors")
    n, d = zs.shape
    mu = zs.mean(axis=0)
    centered = zs - mu
    sigma = centered.T @ centered / (n - 1)

    base = float(np.trace(sigma)) / d
    if not math.isfinite(base) or base <= 0.0:
        # A zero (or broken) trace gives no scale to be relative to; fall back
        # to an absolute ridge so e.g. two identical points still factorize.
        base = 1.0

    rel = lambda_rel
    while True:
        lam = rel * base
        try:
            factor = cho_factor(sigma + lam * np.eye(d), lower=True)
            break
        except np.linalg.LinAlgError:
            rel *= 10.0
            if rel > MAX_LAMBDA_REL * (1.0 + 1e-9):
                raise SingularCovarianceError("covariance irreparably singular") from None
    return ReferenceModel(mu=mu, sigma=sigma, lam=lam, n_ref=n, _factor=factor)


def mahalanobis(model: ReferenceModel, z: np.ndarray) -> float:
    """Regularized Mahalanobis distance of one standardized vector."""
    z = np.asarray(z, dtype=np.float64)
    if z.shape != model.mu.shape:
        raise ValueError(f"expected shape {model.mu.shape}, got {z.shape}")
    if not np.all(np.isfinite(z)):
        raise ValueError("non-finite values in scored vector")
    r = z - model.mu
    d2 = float(r @ cho_solve(model._cho(), r))
    return math.sqrt(max(d2, 0.0))


def calibrate_tau(scores, percentile: float = DEFAULT_OOD_PERCENTILE) -> float:
    """Nearest-rank percentile: sort ascending, take entry ceil(q/100 * n)."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 1 or scores.size == 0:
        raise ValueError("need a non-empty 1D score list")
    if not 0.0 < percentile <= 100.0:
        raise ValueError(f"percentile must be in (0, 100], got {percentile}")
    ordered = np.sort(scores)
    rank = max(1, math.ceil(percentile / 100.0 * ordered.size))
    return float(ordered[min(rank, ordered.size) - 1])


@dataclass
class ModelBundle:
    """Everything cmd_run needs to score a case, persisted as one file."""

    catalog: FeatureCatalog
    standardizer: Standardizer
    reference: ReferenceModel
    tau_ood: float
    ood_percentile: float = DEFAULT_OOD_PERCENTILE
    lambda_rel: float = DEFAULT_LAMBDA_REL
    version_tag: str = ""

    def score_raw(self, raw: dict) -> tuple:
        """Align, standardize and score one raw feature vector."""
        z = self.standardizer.transform(self.catalog.align(raw))
        return z, OodSignal(score=mahalanobis(self.reference, z), tau=self.tau_ood)

    def to_payload(self) -> dict:
        return {
            "schema_version": MODEL_SCHEMA_VERSION,
            "engine_version": __version__,
            "quantization": {"bin_width": QUANT_BIN_WIDTH, "levels": QUANT_LEVELS},
            "catalog": {"retained": list(self.catalog.retained), "impute": self.catalog.impute},
            "standardizer": {
                "mu": self.standardizer.mu.tolist(),
                "sigma": self.standardizer.sigma.tolist(),
            },
            "reference": {
                "mu": self.reference.mu.tolist(),
                "sigma": self.reference.sigma.tolist(),
                "lam": self.reference.lam,
                "n_ref": self.reference.n_ref,
            },
            "tau_ood": self.tau_ood,
            "ood_percentile": self.ood_percentile,
            "lambda_rel": self.lambda_rel,
        }

    def save(self, path) -> str:
        """Write the bundle atomically; identical fits give identical bytes."""
        data = json.dumps(self.to_payload(), sort_keys=True, indent=2).encode() + b"\n"
        tmp = f"{path}.tmp-{os.getpid()}"
        with open(tmp, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
        return model_version_tag(data)

    @classmethod
    def load(cls, path) -> "ModelBundle":
        with open(path, "rb") as fh:
            data = fh.read()
        payload = json.loads(data)
        if payload.get("schema_version") != MODEL_SCHEMA_VERSION:
            raise ValueError(
                f"unsupported model schema {payload.get('schema_version')!r} in {path}"
            )
        bundle = cls(
            catalog=FeatureCatalog(
                retained=list(payload["catalog"]["retained"]),
                impute={k: float(v) for k, v in payload["catalog"]["impute"].items()},
            ),
            standardizer=Standardizer(
                mu=np.array(payload["standardizer"]["mu"]),
                sigma=np.array(payload["standardizer"]["sigma"]),
            ),
            reference=ReferenceModel(
                mu=np.array(payload["reference"]["mu"]),
                sigma=np.array(payload["reference"]["sigma"]),
                lam=float(payload["reference"]["lam"]),
                n_ref=int(payload["reference"]["n_ref"]),
            ),
            tau_ood=float(payload["tau_ood"]),
            ood_percentile=float(payload["ood_percentile"]),
            lambda_rel=float(payload["lambda_rel"]),
            version_tag=model_version_tag(data),
        )
        return bundle


def model_version_tag(data: bytes) -> str:
    return f"{MODEL_SCHEMA_VERSION}:{hashlib.sha256(data).hexdigest()[:16]}"


def fit_bundle(
    raw_vectors: list,
    lambda_rel: float = DEFAULT_LAMBDA_REL,
    percentile: float = DEFAULT_OOD_PERCENTILE,
) -> ModelBundle:
    """Catalog -> standardize -> reference fit -> threshold, in one pass."""
    catalog = FeatureCatalog.fit(raw_vectors)
    aligned = np.vstack([catalog.align(r) for r in raw_vectors])
    standardizer = Standardizer.fit(aligned)
    zs = np.vstack([standardizer.transform(v) for v in aligned])
    reference = fit_reference(zs, lambda_rel=lambda_rel)
    self_scores = [mahalanobis(reference, z) for z in zs]
    tau = calibrate_tau(self_scores, percentile)
    return ModelBundle(
        catalog=catalog,
        standardizer=standardizer,
        reference=reference,
        tau_ood=tau,
        ood_percentile=percentile,
        lambda_rel=lambda_rel,
    )
