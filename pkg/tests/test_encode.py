import warnings

import numpy as np
import pytest

from alquery.encode import ZeroVarianceWarning, decode, encode, fit_pca, fit_random_projection
from alquery.errors import ConfigurationError, ShapeError


def test_rank_one_line():
    t = np.linspace(-3, 3, 25)
    x = np.column_stack([t, 2 * t])
    enc = fit_pca(x, 1)
    assert abs(enc.explained_variance_ratio[0] - 1.0) < 1e-9
    np.testing.assert_allclose(np.abs(enc.projection[:, 0]), np.array([1, 2]) / np.sqrt(5), atol=1e-12)


def test_full_basis_reconstructs():
    x = np.random.default_rng(0).normal(size=(40, 6))
    enc = fit_pca(x, 6)
    assert np.max(np.abs(decode(enc, encode(enc, x)) - x)) < 1e-9


def test_embedding_covariance_diagonal_and_ordered():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(200, 8)) @ rng.normal(size=(8, 8))
    enc = fit_pca(x, 5)
    z = encode(enc, x)
    cov = np.cov(z, rowvar=False)
    assert np.max(np.abs(cov - np.diag(np.diag(cov)))) < 1e-8
    np.testing.assert_allclose(np.diag(cov), enc.explained_variance, rtol=1e-10)
    assert np.all(np.diff(enc.explained_variance) <= 0)
    assert np.trace(cov) <= np.trace(np.cov(x, rowvar=False)) + 1e-9


def test_sign_convention_is_stable():
    x = np.random.default_rng(2).normal(size=(30, 4))
    a, b = fit_pca(x, 3), fit_pca(x[::-1], 3)
    np.testing.assert_allclose(a.projection, b.projection, atol=1e-10)
    pivots = np.argmax(np.abs(a.projection), axis=0)
    assert np.all(a.projection[pivots, np.arange(3)] > 0)


def test_identical_rows_warn_and_embed_to_zero():
    x = np.ones((5, 3))
    with pytest.warns(ZeroVarianceWarning):
        enc = fit_pca(x, 2)
    assert np.all(encode(enc, x) == 0)


def test_full_rank_request_does_not_warn():
    x = np.random.default_rng(3).normal(size=(10, 3))
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        fit_pca(x, 3)


@pytest.mark.parametrize("n_lat", [0, 4, 10])
def test_pca_rejects_bad_n_lat(n_lat):
    with pytest.raises(ConfigurationError):
        fit_pca(np.random.default_rng(0).normal(size=(4, 6)), n_lat)


def test_random_projection_seeded():
    x = np.random.default_rng(4).normal(size=(20, 10))
    a = fit_random_projection(x, 3, seed=5)
    b = fit_random_projection(x, 3, seed=5)
    np.testing.assert_array_equal(a.projection, b.projection)
    assert encode(a, x).shape == (20, 3)
    np.testing.assert_allclose(encode(a, x).mean(axis=0), 0.0, atol=1e-12)


def test_encode_checks_width():
    enc = fit_pca(np.random.default_rng(0).normal(size=(5, 3)), 2)
    with pytest.raises(ShapeError):
        encode(enc, np.zeros((2, 4)))
