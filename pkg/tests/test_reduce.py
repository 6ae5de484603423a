import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nvx.reduce import (
    FEATURE_SET_DIMS,
    Kernel,
    RankError,
    fit_scores,
    kpca_fit,
    kpca_transform,
    subsample_frames,
)
from nvx.signal import ShapeError


def pca_scores(X, m):
    """Classical PCA through the eigendecomposition of the sample covariance."""
    Xc = X - X.mean(axis=0)
    vals, vecs = np.linalg.eigh(Xc.T @ Xc)
    order = np.argsort(vals)[::-1][:m]
    return Xc @ vecs[:, order]


def match_up_to_sign(a, b):
    signs = np.sign(np.sum(a * b, axis=0))
    return np.max(np.abs(a - b * signs))


@pytest.mark.parametrize("seed", range(5))
def test_linear_kernel_equals_pca(seed):
    X = np.random.default_rng(seed).standard_normal((20, 5))
    model = kpca_fit(X, "linear", 5)
    assert match_up_to_sign(kpca_transform(model, X), pca_scores(X, 5)) <= 1e-8


@settings(max_examples=40, deadline=None)
@given(N=st.integers(3, 50), D=st.integers(1, 10), seed=st.integers(0, 10_000))
def test_linear_kernel_equals_pca_property(N, D, seed):
    X = np.random.default_rng(seed).standard_normal((N, D))
    m = min(D, N - 1)
    model = kpca_fit(X, "linear", m)
    assert match_up_to_sign(kpca_transform(model, X), pca_scores(X, m)) <= 1e-8


@pytest.mark.parametrize("feature_set, dim", [(1, 30), (2, 50), (3, 93)])
def test_component_counts(feature_set, dim):
    assert FEATURE_SET_DIMS[feature_set] == dim
    X = np.random.default_rng(feature_set).standard_normal((150, 40))
    model = kpca_fit(X, None, FEATURE_SET_DIMS[feature_set])
    assert model.n_components == dim
    assert kpca_transform(model, X[:7]).shape == (7, dim)


def test_eigenvalues_positive_descending():
    model = kpca_fit(np.random.default_rng(0).standard_normal((60, 8)), None, 30)
    assert np.all(model.eigenvalues > 0)
    assert np.all(np.diff(model.eigenvalues) <= 0)


def test_transform_of_training_matches_fit_scores():
    X = np.random.default_rng(1).standard_normal((80, 6))
    model = kpca_fit(X, None, 20)
    assert np.max(np.abs(kpca_transform(model, X) - fit_scores(model))) <= 1e-10


def test_duplicate_row_query():
    X = np.random.default_rng(2).standard_normal((40, 5))
    model = kpca_fit(X, None, 10)
    np.testing.assert_allclose(kpca_transform(model, X[13]), fit_scores(model)[13:14], rtol=0, atol=1e-10)
    assert kpca_transform(model, X[0]).shape == (1, 10)


def test_gram_space_orthonormality():
    X = np.random.default_rng(3).standard_normal((50, 7))
    model = kpca_fit(X, None, 25)
    K = model.kernel(X, X)
    col = K.mean(axis=0)
    Kc = K - col[None, :] - col[:, None] + K.mean()
    V = model.centered_eigenvectors * np.sqrt(model.eigenvalues)
    np.testing.assert_allclose(V.T @ Kc @ V, np.diag(model.eigenvalues), rtol=0, atol=1e-8)


def test_rbf_shift_invariance():
    rng = np.random.default_rng(4)
    X, Y = rng.standard_normal((45, 6)), rng.standard_normal((9, 6))
    shift = rng.uniform(-50, 50, 6)
    a = kpca_transform(kpca_fit(X, None, 15), Y)
    b = kpca_transform(kpca_fit(X + shift, None, 15), Y + shift)
    assert np.max(np.abs(a - b)) <= 1e-9


def test_rank_limit_of_centered_gram():
    # double centering removes one dimension, so N frames support N - 1 components
    X = np.random.default_rng(5).standard_normal((30, 40))
    assert kpca_fit(X, None, 29).n_components == 29
    with pytest.raises(RankError) as exc:
        kpca_fit(X, None, 30)
    assert exc.value.achievable == 29 and "29" in str(exc.value)


def test_rank_error_linear_low_rank():
    X = np.random.default_rng(6).standard_normal((30, 3))
    with pytest.raises(RankError) as exc:
        kpca_fit(X, "linear", 4)
    assert exc.value.achievable == 3


def test_argument_errors():
    X = np.random.default_rng(7).standard_normal((10, 3))
    with pytest.raises(ValueError):
        kpca_fit(X, None, 11)
    with pytest.raises(ValueError):
        kpca_fit(X, None, 0)
    with pytest.raises(ValueError):
        kpca_fit(np.full((10, 3), np.nan), None, 2)
    with pytest.raises(ValueError):
        kpca_fit(X, Kernel("poly"), 2)
    with pytest.raises(ShapeError):
        kpca_transform(kpca_fit(X, None, 2), np.zeros((2, 4)))


def test_subsample_frames():
    X = np.arange(50.0).reshape(25, 2)
    assert subsample_frames(X, 100, 0) is X
    s = subsample_frames(X, 10, 3)
    assert s.shape == (10, 2)
    assert np.array_equal(s, subsample_frames(X, 10, 3))
    assert np.all(np.diff(s[:, 0]) > 0)
