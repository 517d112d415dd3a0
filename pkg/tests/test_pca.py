"""Energy-capped PCA and its dense-layer folding."""

import numpy as np
import pytest

from advshield.errors import ValidationError
from advshield.pca import fit_pca, fold_into_dense


def random_features(seed, n=200, p=12, spectrum=None):
    rng = np.random.default_rng(seed)
    if spectrum is None:
        spectrum = np.linspace(3.0, 0.1, p)
    basis = np.linalg.qr(rng.normal(size=(p, p)))[0]
    z = rng.normal(size=(n, p)) * spectrum
    return z @ basis.T + rng.normal(size=p)


def test_energy_threshold_met_minimally():
    feats = random_features(0)
    pca = fit_pca(feats, min_energy=0.99)
    var = np.var(feats - feats.mean(axis=0), axis=0, ddof=0).sum()
    kept = pca.eigenvalues[:pca.components.shape[1]].sum()
    assert kept / var >= 0.99 - 1e-9
    if pca.components.shape[1] > 1:
        assert (pca.eigenvalues[:pca.components.shape[1] - 1].sum() / var
                < 0.99)


def test_exact_energy_boundary_not_overshot():
    # two independent coordinates with an exact 99/1 variance split: the
    # first component alone reaches the default threshold
    rng = np.random.default_rng(3)
    a = rng.normal(size=4000) * np.sqrt(99.0)
    b = rng.normal(size=4000) * 1.0
    a = (a - a.mean()) / a.std() * np.sqrt(99.0)
    b = (b - b.mean()) / b.std()
    feats = np.stack([a, b], axis=1)
    pca = fit_pca(feats, min_energy=0.99)
    assert pca.components.shape[1] == 1


def test_projection_reconstructs_low_rank_data():
    rng = np.random.default_rng(5)
    low = rng.normal(size=(100, 3)) @ rng.normal(size=(3, 10))
    pca = fit_pca(low, min_energy=0.999)
    assert pca.components.shape[1] <= 3
    proj = pca.project(low)
    back = proj @ pca.components.T + pca.mean
    assert np.abs(back - low).max() < 1e-8


def test_components_orthonormal():
    pca = fit_pca(random_features(7), min_energy=0.95)
    w = pca.components
    np.testing.assert_allclose(w.T @ w, np.eye(w.shape[1]), atol=1e-10)


def test_fold_into_dense_matches_project():
    feats = random_features(9)
    pca = fit_pca(feats)
    weight, bias = fold_into_dense(pca)
    np.testing.assert_allclose(feats @ weight + bias, pca.project(feats),
                               atol=1e-12)


def test_requires_at_least_dim_samples():
    with pytest.raises(ValidationError):
        fit_pca(np.zeros((5, 6)))


def test_degenerate_zero_variance():
    pca = fit_pca(np.ones((20, 4)))
    assert pca.components.shape[1] == 1
    assert pca.energy_kept == 1.0
