"""Distance scoring, threshold calibration and the persisted model bundle."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cxrtriage import ood
from cxrtriage.ood import (
    ModelBundle,
    OodSignal,
    ReferenceModel,
    SingularCovarianceError,
    calibrate_tau,
    fit_bundle,
    fit_reference,
    mahalanobis,
)


def _random_spd(rng, d):
    a = rng.normal(size=(d, d))
    return a @ a.T + d * np.eye(d)


def _random_model(rng, d, lam=0.0):
    return ReferenceModel(
        mu=rng.normal(size=d), sigma=_random_spd(rng, d), lam=lam, n_ref=50
    )


def test_fit_reference_matches_numpy_cov(rng):
    zs = rng.normal(size=(40, 6))
    model = fit_reference(zs)
    assert np.allclose(model.mu, zs.mean(axis=0), atol=1e-14)
    assert np.allclose(model.sigma, np.cov(zs.T, ddof=1), atol=1e-12)
    assert model.n_ref == 40
    assert model.lam == pytest.approx(1e-6 * np.trace(model.sigma) / 6)


def test_mahalanobis_matches_explicit_inverse(rng):
    for _ in range(200):
        d = int(rng.integers(1, 6))
        model = _random_model(rng, d)
        z = rng.normal(size=d)
        r = z - model.mu
        want = math.sqrt(r @ np.linalg.inv(model.sigma + model.lam * np.eye(d)) @ r)
        assert abs(mahalanobis(model, z) - want) <= 1e-9


def test_mahalanobis_scale_equivariance(rng):
    d = 4
    sigma = _random_spd(rng, d)
    mu = rng.normal(size=d)
    z = rng.normal(size=d)
    base = mahalanobis(ReferenceModel(mu=mu, sigma=sigma, lam=0.0, n_ref=10), z)
    for c in (0.25, 2.0, 9.0):
        scaled = mahalanobis(ReferenceModel(mu=mu, sigma=c * sigma, lam=0.0, n_ref=10), z)
        assert abs(scaled - base / math.sqrt(c)) <= 1e-9


def test_mahalanobis_zero_at_the_mean(rng):
    model = _random_model(rng, 3)
    assert mahalanobis(model, model.mu) == 0.0


def test_input_validation(rng):
    with pytest.raises(ValueError, match="at least two"):
        fit_reference(np.ones((1, 3)))
    with pytest.raises(ValueError, match="non-finite"):
        fit_reference(np.array([[1.0, np.nan], [2.0, 3.0]]))
    model = _random_model(rng, 3)
    with pytest.raises(ValueError, match="expected shape"):
        mahalanobis(model, np.zeros(4))
    with pytest.raises(ValueError, match="non-finite"):
        mahalanobis(model, np.array([1.0, np.inf, 0.0]))


def test_ridge_escalates_until_factorization_succeeds(rng, monkeypatch):
    """The relative ridge steps up by 10x; the attempted values prove it."""
    zs = rng.normal(size=(20, 3))
    sigma = np.cov(zs.T, ddof=1)
    base = np.trace(sigma) / 3
    attempts = []
    real_cho = ood.cho_factor

    def flaky_cho(matrix, **kw):
        lam = (matrix - sigma)[0, 0]
        attempts.append(lam / base)
        if lam / base < 0.5e-3:
            raise np.linalg.LinAlgError("scripted failure")
        return real_cho(matrix, **kw)

    monkeypatch.setattr(ood, "cho_factor", flaky_cho)
    model = fit_reference(zs, lambda_rel=1e-6)
    assert model.lam == pytest.approx(1e-3 * base)
    assert np.allclose(attempts, [1e-6, 1e-5, 1e-4, 1e-3])


def test_irreparable_covariance_raises(rng, monkeypatch):
    zs = rng.normal(size=(20, 3))

    def always_fails(matrix, **kw):
        raise np.linalg.LinAlgError("scripted failure")

    monkeypatch.setattr(ood, "cho_factor", always_fails)
    with pytest.raises(SingularCovarianceError):
        fit_reference(zs, lambda_rel=1e-6)


def test_lazy_factorization_failure_is_classified():
    broken = ReferenceModel(
        mu=np.zeros(2), sigma=np.array([[1.0, 0.0], [0.0, -1.0]]), lam=0.0, n_ref=5
    )
    with pytest.raises(SingularCovarianceError):
        mahalanobis(broken, np.ones(2))


def test_identical_reference_points_still_fit():
    # Zero covariance has no trace to scale against; the absolute fallback
    # ridge must keep the factorization alive.
    model = fit_reference(np.ones((5, 3)))
    assert mahalanobis(model, np.ones(3)) == 0.0
    assert mahalanobis(model, np.zeros(3)) > 0.0


# ---------------------------------------------------------------------------
# threshold calibration


def test_calibrate_tau_nearest_rank():
    scores = np.arange(1.0, 101.0)
    assert calibrate_tau(scores) == 95.0
    assert calibrate_tau(scores, percentile=100.0) == 100.0
    assert calibrate_tau(scores, percentile=1.0) == 1.0
    # Order must not matter.
    assert calibrate_tau(scores[::-1].copy()) == 95.0


def test_calibrate_tau_small_sets():
    assert calibrate_tau([7.0]) == 7.0
    assert calibrate_tau([3.0, 1.0, 2.0], percentile=50.0) == 2.0
    # ceil(0.95 * 3) = 3: the maximum.
    assert calibrate_tau([3.0, 1.0, 2.0]) == 3.0


def test_calibrate_tau_validation():
    with pytest.raises(ValueError):
        calibrate_tau([])
    with pytest.raises(ValueError):
        calibrate_tau(np.ones((2, 2)))
    with pytest.raises(ValueError):
        calibrate_tau([1.0], percentile=0.0)
    with pytest.raises(ValueError):
        calibrate_tau([1.0], percentile=101.0)


@settings(max_examples=50, deadline=None)
@given(
    n=st.integers(min_value=2, max_value=400),
    seed=st.integers(min_value=0, max_value=2**32 - 1),
)
def test_self_flag_fraction_bounded(n, seed):
    """At most a 0.05 + 1/n fraction of the reference scores exceed tau."""
    scores = np.random.default_rng(seed).exponential(size=n)
    tau = calibrate_tau(scores)
    flagged = np.sum(scores > tau)
    assert flagged / n <= 0.05 + 1.0 / n


def test_boundary_score_counts_as_in_distribution():
    signal = OodSignal(score=5.0, tau=5.0)
    assert not signal.is_ood
    assert OodSignal(score=5.0000001, tau=5.0).is_ood


# ---------------------------------------------------------------------------
# the bundle


def _toy_vectors(rng, n=30):
    return [
        {"a": float(v[0]), "b": float(v[1]), "c": float(v[2])}
        for v in rng.normal(size=(n, 3))
    ]


def test_fit_bundle_flags_bounded_fraction_of_reference(rng):
    vectors = _toy_vectors(rng, n=60)
    bundle = fit_bundle(vectors)
    flagged = sum(1 for v in vectors if bundle.score_raw(v)[1].is_ood)
    assert flagged / 60 <= 0.05 + 1 / 60


def test_bundle_save_load_round_trip(rng, tmp_path):
    bundle = fit_bundle(_toy_vectors(rng))
    path = tmp_path / "model.json"
    tag = bundle.save(path)
    loaded = ModelBundle.load(path)
    assert loaded.version_tag == tag

    probe = {"a": 0.4, "b": -1.2, "c": 3.3}
    z1, sig1 = bundle.score_raw(probe)
    z2, sig2 = loaded.score_raw(probe)
    assert np.array_equal(z1, z2)
    assert sig1.score == sig2.score
    assert sig1.tau == sig2.tau

    # Saving the loaded bundle reproduces the file byte for byte.
    second = tmp_path / "model2.json"
    assert loaded.save(second) == tag
    assert second.read_bytes() == path.read_bytes()


def test_bundle_rejects_unknown_schema(tmp_path):
    path = tmp_path / "stale.json"
    path.write_text('{"schema_version": "model-v999"}\n')
    with pytest.raises(ValueError, match="schema"):
        ModelBundle.load(path)


def test_bundle_scores_far_point_as_ood(rng):
    bundle = fit_bundle(_toy_vectors(rng))
    _, signal = bundle.score_raw({"a": 50.0, "b": -50.0, "c": 50.0})
    assert signal.is_ood
