"""Closed-form GP conditionals with a per-point noise adjustment.

Two conditionals share one code path:

* the posterior GP over ``y`` with system matrix ``K + s0 I + diag(gamma)``;
* the prior GP over the squared-residual targets ``z`` with system matrix
  ``K + s0 I`` (``gamma = 0``).

With ``gamma = 0`` the posterior GP is the classical constant-noise GP.
All solves go through a Cholesky factor; explicit inverses are never formed.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve, solve_triangular

from .kernel import KernelConfig, as_inputs, kernel_cross

VARIANCE_FLOOR = 1e-8


class NumericalError(ArithmeticError):
    """A system matrix could not be factorized."""


@dataclass(frozen=True)
class Dataset:
    """Paired inputs ``X`` of shape (n, n_features) and scalar outputs ``Y``."""

    X: np.ndarray
    Y: np.ndarray

    def __post_init__(self):
        X = as_inputs(self.X)
        Y = np.asarray(self.Y, dtype=float).reshape(-1)
        if X.shape[0] < 1:
            raise ValueError("a dataset needs at least one sample")
        if X.shape[0] != Y.shape[0]:
            raise ValueError(f"X has {X.shape[0]} rows but Y has {Y.shape[0]}")
        if not np.all(np.isfinite(X)):
            raise ValueError("X contains non-finite values")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "Y", Y)

    def __len__(self):
        return self.Y.shape[0]


@dataclass(frozen=True)
class Prediction:
    mean: np.ndarray
    noise_variance: np.ndarray
    epistemic_variance: np.ndarray


@dataclass(frozen=True)
class GPModel:
    """A fitted conditional.

    ``alpha`` solves ``(K + s0 I + diag(gamma_train)) alpha = Y`` where the
    diagonal noise ``s0 + gamma_train`` has been clamped at
    :data:`VARIANCE_FLOOR`. ``n_clamped`` counts how many points hit the floor.
    """

    kernel: KernelConfig
    sigma0_sq: float
    X_train: np.ndarray
    Y_train: np.ndarray
    gamma_train: np.ndarray
    alpha: np.ndarray
    chol: tuple = field(repr=False)
    n_clamped: int = 0
    jitter_used: float = 0.0

    def predict(self, X, gamma_at_x=0.0):
        return predict(self, X, gamma_at_x)


def clamp_noise(sigma0_sq, gamma):
    """Per-point noise ``s0 + gamma`` floored at VARIANCE_FLOOR, plus hit count."""
    noise = sigma0_sq + np.asarray(gamma, dtype=float)
    low = noise < VARIANCE_FLOOR
    return np.where(low, VARIANCE_FLOOR, noise), int(np.count_nonzero(low))


def factorize(A, jitter=1e-10):
    """Cholesky factor of a symmetric matrix, retrying with diagonal jitter.

    The plain matrix is tried first; on failure the diagonal is incremented by
    ``jitter``, then by ten-fold larger amounts up to 1e-6.

    Returns
    -------
    chol : tuple
        ``(c, lower)`` as returned by :func:`scipy.linalg.cho_factor`.
    added : float
        Diagonal increment that succeeded (0.0 when none was needed).
    """
    ladder = [0.0]
    step = jitter
    while 0 < step <= 1e-6:
        ladder.append(step)
        step *= 10.0
    for added in ladder:
        try:
            M = A if added == 0.0 else A + added * np.eye(A.shape[0])
            return cho_factor(M, lower=True, check_finite=True), added
        except LinAlgError:
            continue
    with np.errstate(all="ignore"):
        cond = np.linalg.cond(A)
        min_eig = np.linalg.eigvalsh(A).min()
    raise NumericalError(
        f"system matrix is not positive definite after jitter {ladder[-1]:g}: "
        f"condition number {cond:.3g}, smallest eigenvalue {min_eig:.3g}"
    )


def _check_sigma(sigma0_sq):
    if not np.isfinite(sigma0_sq) or sigma0_sq <= 0:
        raise ValueError(f"sigma0_sq must be > 0, got {sigma0_sq}")


def fit_posterior_gp(data, kernel, sigma0_sq, gamma=None, K=None):
    """Condition the posterior GP on ``data`` with noise ``s0 + gamma``.

    ``K`` may be passed to reuse an already evaluated Gram matrix.
    """
    _check_sigma(sigma0_sq)
    n = len(data)
    gamma = np.zeros(n) if gamma is None else np.asarray(gamma, dtype=float)
    if gamma.shape != (n,):
        raise ValueError(f"gamma must have shape ({n},), got {gamma.shape}")
    if K is None:
        K = kernel_cross(kernel, data.X, data.X)
    noise, n_clamped = clamp_noise(sigma0_sq, gamma)
    A = K + np.diag(noise)
    chol, added = factorize(A, kernel.jitter)
    alpha = cho_solve(chol, data.Y)
    return GPModel(
        kernel=kernel,
        sigma0_sq=float(sigma0_sq),
        X_train=data.X,
        Y_train=data.Y,
        gamma_train=gamma.copy(),
        alpha=alpha,
        chol=chol,
        n_clamped=n_clamped,
        jitter_used=added,
    )


def fit_prior_gp(X, Z, kernel, sigma0_sq, K=None):
    """Condition the prior GP on squared-residual targets ``Z``.

    The system matrix is ``K + s0 I`` with no per-point adjustment.
    """
    return fit_posterior_gp(Dataset(X, Z), kernel, sigma0_sq, None, K=K)


def predict(model, X, gamma_at_x=0.0):
    """Predictive moments of the conditional at the rows of ``X``.

    ``gamma_at_x`` is the noise adjustment at the query points (the prior-GP
    mean for the heteroscedastic model, zero for the classical one).

    Returns a :class:`Prediction` of arrays with one entry per row:
    ``mean`` is ``k(x, X) alpha``; ``noise_variance`` is
    ``k(x, x) + s0 + gamma(x) - k(x, X) A^{-1} k(X, x)`` floored at
    VARIANCE_FLOOR; ``epistemic_variance`` is the data-independent-noise part
    ``k(x, x) - k(x, X) A^{-1} k(X, x)`` floored at zero.
    """
    X = as_inputs(X)
    if X.shape[1] != model.X_train.shape[1]:
        raise ValueError(
            f"expected {model.X_train.shape[1]} features, got {X.shape[1]}"
        )
    Ks = kernel_cross(model.kernel, X, model.X_train)
    mean = Ks @ model.alpha
    c, lower = model.chol
    V = solve_triangular(c, Ks.T, lower=lower, check_finite=False)
    quad = np.einsum("ij,ij->j", V, V)
    gamma_at_x = np.broadcast_to(np.asarray(gamma_at_x, dtype=float), mean.shape)
    noise_x, _ = clamp_noise(model.sigma0_sq, gamma_at_x)
    epistemic = np.maximum(1.0 - quad, 0.0)
    total = np.maximum(1.0 + noise_x - quad, VARIANCE_FLOOR)
    return Prediction(mean=mean, noise_variance=total, epistemic_variance=epistemic)


def second_moment_targets(data, lambda_at_train, sigma0_sq):
    """Prior-GP targets ``z_i = (y_i - lambda(x_i))**2 - s0``, unclamped."""
    lam = np.asarray(lambda_at_train, dtype=float)
    if lam.shape != data.Y.shape:
        raise ValueError(f"lambda_at_train must have shape {data.Y.shape}")
    return (data.Y - lam) ** 2 - sigma0_sq
