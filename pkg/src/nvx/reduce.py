"""Kernel PCA reduction of EEG feature frames."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .signal import ShapeError

# EEG feature set -> reduced dimension
FEATURE_SET_DIMS = {1: 30, 2: 50, 3: 93}
EIG_REL_CUTOFF = 1e-12


class RankError(ValueError):
    def __init__(self, requested: int, achievable: int):
        super().__init__(f"requested {requested} components but the centered Gram matrix only has rank {achievable}")
        self.requested = requested
        self.achievable = achievable


@dataclass(frozen=True)
class Kernel:
    name: str = "rbf"
    gamma: float = 0.0

    def __call__(self, A: np.ndarray, B: np.ndarray) -> np.ndarray:
        if self.name == "linear":
            return A @ B.T
        if self.name == "rbf":
            sq = np.sum(A * A, 1)[:, None] + np.sum(B * B, 1)[None, :] - 2.0 * (A @ B.T)
            return np.exp(-self.gamma * np.maximum(sq, 0.0))
        raise ValueError(f"unknown kernel {self.name!r}")


def default_rbf(X: np.ndarray) -> Kernel:
    """rbf with gamma = 1 / (D * mean per-dimension variance)."""
    var = float(np.mean(np.var(X, axis=0)))
    return Kernel("rbf", 1.0 / (X.shape[1] * var) if var > 0 else 1.0)


@dataclass(frozen=True)
class KpcaModel:
    training_frames: np.ndarray
    kernel: Kernel
    centered_eigenvectors: np.ndarray  # N x m, columns scaled by 1/sqrt(eigenvalue)
    eigenvalues: np.ndarray
    train_kernel_col_means: np.ndarray
    train_kernel_mean: float

    @property
    def n_components(self) -> int:
        return self.eigenvalues.size

    @property
    def input_dim(self) -> int:
        return self.training_frames.shape[1]


def _center_train(K: np.ndarray) -> np.ndarray:
    col = K.mean(axis=0)
    return K - col[None, :] - col[:, None] + K.mean()


def kpca_fit(X, kernel: Kernel | str | None = None, n_components: int = 30) -> KpcaModel:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise ShapeError("X must be an N x D matrix")
    if not np.all(np.isfinite(X)):
        raise ValueError("X contains non-finite values")
    N = X.shape[0]
    if not 1 <= n_components <= N:
        raise ValueError(f"need 1 <= n_components <= N, got {n_components} with N={N}")
    if kernel is None or kernel == "rbf":
        kernel = default_rbf(X)
    elif kernel == "linear":
        kernel = Kernel("linear")
    K = kernel(X, X)
    Kc = _center_train(K)
    Kc = 0.5 * (Kc + Kc.T)
    vals, vecs = np.linalg.eigh(Kc)
    order = np.argsort(vals)[::-1]
    vals, vecs = vals[order], vecs[:, order]
    keep = vals > EIG_REL_CUTOFF * max(vals[0], 0.0)
    rank = int(np.count_nonzero(keep))
    if rank < n_components:
        raise RankError(n_components, rank)
    vals, vecs = vals[:n_components], vecs[:, :n_components]
    # fix the sign so the largest-magnitude loading of each component is positive
    flip = np.sign(vecs[np.argmax(np.abs(vecs), axis=0), np.arange(n_components)])
    vecs = vecs * flip
    return KpcaModel(
        training_frames=X.copy(),
        kernel=kernel,
        # C order so a model reloaded from disk multiplies through the same BLAS path
        centered_eigenvectors=np.ascontiguousarray(vecs / np.sqrt(vals)),
        eigenvalues=vals,
        train_kernel_col_means=K.mean(axis=0),
        train_kernel_mean=float(K.mean()),
    )


def kpca_transform(model: KpcaModel, Y) -> np.ndarray:
    Y = np.atleast_2d(np.asarray(Y, dtype=np.float64))
    if Y.shape[1] != model.input_dim:
        raise ShapeError(f"query has {Y.shape[1]} columns, model was fit on {model.input_dim}")
    K = model.kernel(Y, model.training_frames)
    Kc = K - model.train_kernel_col_means[None, :] - K.mean(axis=1, keepdims=True) + model.train_kernel_mean
    return Kc @ model.centered_eigenvectors


def fit_scores(model: KpcaModel) -> np.ndarray:
    """Training-frame scores (eigenvector * sqrt(eigenvalue))."""
    return model.centered_eigenvectors * model.eigenvalues


def subsample_frames(X: np.ndarray, max_frames: int, seed: int) -> np.ndarray:
    """Seeded row subsample so the N x N eigenproblem stays tractable."""
    if X.shape[0] <= max_frames:
        return X
    idx = np.sort(np.random.default_rng(seed).choice(X.shape[0], max_frames, replace=False))
    return X[idx]
