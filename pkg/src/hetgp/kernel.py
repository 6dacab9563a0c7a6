"""Radial-basis-function kernel and Gram matrices.

The kernel is parameterised by a *spread* ``l`` that multiplies the squared
distance::

    k(x, w) = exp(-l * ||x - w||^2)

so large ``l`` gives narrow basis functions and ``K(X, X) -> I`` for
distinct inputs, while ``l -> 0`` gives ``K -> 1 1^T``. Inputs are arrays of
shape ``(n_samples, n_features)``.
"""

from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist


@dataclass(frozen=True)
class KernelConfig:
    """RBF kernel settings.

    Parameters
    ----------
    length_scale : float
        Spread ``l`` multiplying the squared distance. Must be positive.
    jitter : float
        Diagonal increment used only when a Cholesky factorization fails.
        Must lie in ``[0, 1e-6]``.
    """

    length_scale: float = 0.5
    jitter: float = 1e-10

    def __post_init__(self):
        if not np.isfinite(self.length_scale) or self.length_scale <= 0:
            raise ValueError(f"length_scale must be > 0, got {self.length_scale}")
        if not 0 <= self.jitter <= 1e-6:
            raise ValueError(f"jitter must lie in [0, 1e-6], got {self.jitter}")


def as_inputs(X):
    """Coerce to a 2-D float array of shape (n_samples, n_features)."""
    X = np.asarray(X, dtype=float)
    if X.ndim == 0:
        X = X.reshape(1, 1)
    elif X.ndim == 1:
        X = X.reshape(-1, 1)
    elif X.ndim != 2:
        raise ValueError(f"inputs must be at most 2-D, got shape {X.shape}")
    return X


def kernel_scalar(config, x, w):
    x = np.atleast_1d(np.asarray(x, dtype=float))
    w = np.atleast_1d(np.asarray(w, dtype=float))
    if x.shape != w.shape or x.ndim != 1:
        raise ValueError(f"dimension mismatch: {x.shape} vs {w.shape}")
    d = x - w
    return float(np.exp(-config.length_scale * (d @ d)))


def kernel_cross(config, X, W):
    """Cross-covariance matrix ``K[i, j] = k(X[i], W[j])``."""
    X = as_inputs(X)
    W = as_inputs(W)
    if X.shape[0] == 0 or W.shape[0] == 0:
        raise ValueError("kernel_cross needs non-empty input collections")
    if X.shape[1] != W.shape[1]:
        raise ValueError(
            f"dimension mismatch: {X.shape[1]} features vs {W.shape[1]}"
        )
    return np.exp(-config.length_scale * cdist(X, W, "sqeuclidean"))
