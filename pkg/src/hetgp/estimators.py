"""scikit-learn estimators wrapping the functional GP core.

Both regressors accept ``X`` of shape (n_samples, n_features) and ``y`` of
shape (n_samples,) or (n_samples, n_outputs). Multiple outputs are fitted as
independent GPs, one per column.
"""

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted, validate_data

from .gp import Dataset, clamp_noise, fit_posterior_gp, predict
from .iterative import IterConfig, fit_hetgp
from .kernel import KernelConfig


def _columns(y):
    return y[:, None] if y.ndim == 1 else y


def _stack(values, single):
    out = np.column_stack(values)
    return out[:, 0] if single else out


class GPRegressor(RegressorMixin, BaseEstimator):
    """GP regression with a constant noise variance ``sigma0_sq``.

    Parameters
    ----------
    length_scale : float
        RBF spread ``l`` in ``exp(-l ||x - w||^2)``.
    sigma0_sq : float
        Noise variance shared by all samples.
    jitter : float
        Fallback diagonal increment for ill-conditioned factorizations.
    """

    def __init__(self, length_scale=0.5, sigma0_sq=1.0, jitter=1e-10):
        self.length_scale = length_scale
        self.sigma0_sq = sigma0_sq
        self.jitter = jitter

    def fit(self, X, y):
        X, y = validate_data(self, X, y, multi_output=True, y_numeric=True)
        kernel = KernelConfig(self.length_scale, self.jitter)
        self._single_output = y.ndim == 1
        self.models_ = [
            fit_posterior_gp(Dataset(X, col), kernel, self.sigma0_sq)
            for col in _columns(y).T
        ]
        return self

    def _predictions(self, X):
        check_is_fitted(self, "models_")
        X = validate_data(self, X, reset=False)
        return [predict(m, X) for m in self.models_]

    def predict(self, X, return_std=False):
        """Posterior mean, optionally with the total predictive std."""
        preds = self._predictions(X)
        mean = _stack([p.mean for p in preds], self._single_output)
        if not return_std:
            return mean
        std = _stack([np.sqrt(p.noise_variance) for p in preds], self._single_output)
        return mean, std

    def predict_variance(self, X):
        preds = self._predictions(X)
        return _stack([p.noise_variance for p in preds], self._single_output)

    def predict_noise(self, X):
        """Noise variance of a single observation, constant for this model."""
        check_is_fitted(self, "models_")
        X = validate_data(self, X, reset=False)
        shape = (X.shape[0], len(self.models_))
        out = np.full(shape, float(self.sigma0_sq))
        return out[:, 0] if self._single_output else out

    def predict_epistemic(self, X):
        preds = self._predictions(X)
        return _stack([p.epistemic_variance for p in preds], self._single_output)


class HeteroscedasticGPRegressor(RegressorMixin, BaseEstimator):
    """GP regression that learns a state-dependent noise variance.

    A posterior GP for the function and a prior GP for the noise adjustment
    ``gamma(x)`` are refined jointly until the posterior weights settle. The
    per-sample noise variance is ``sigma0_sq + gamma(x)``.

    Parameters
    ----------
    length_scale : float
        RBF spread ``l`` shared by both GPs.
    sigma0_sq : float
        Base noise variance. Convergence is guaranteed (for narrow kernels)
        when ``sigma0_sq >= max(y**2)``; smaller values are allowed and the
        condition is reported in ``fit_reports_``.
    delta : float
        Tolerance on the 2-norm change of the posterior weights.
    max_iter : int
        Iteration cap; hitting it sets ``converged_`` to False.
    jitter : float
        Fallback diagonal increment for ill-conditioned factorizations.

    Attributes
    ----------
    models_ : list of HetGP
        One fitted pair per output column.
    fit_reports_ : list of FitReport
    converged_ : bool
        True when every output column converged.
    """

    def __init__(
        self, length_scale=0.5, sigma0_sq=1.0, delta=1e-6, max_iter=200, jitter=1e-10
    ):
        self.length_scale = length_scale
        self.sigma0_sq = sigma0_sq
        self.delta = delta
        self.max_iter = max_iter
        self.jitter = jitter

    def _config(self):
        return IterConfig(
            delta=self.delta,
            max_iter=self.max_iter,
            sigma0_sq=self.sigma0_sq,
            kernel=KernelConfig(self.length_scale, self.jitter),
        )

    def fit(self, X, y):
        X, y = validate_data(self, X, y, multi_output=True, y_numeric=True)
        config = self._config()
        self._single_output = y.ndim == 1
        self.models_ = [fit_hetgp(Dataset(X, col), config) for col in _columns(y).T]
        self.fit_reports_ = [m.report for m in self.models_]
        self.converged_ = all(r.converged for r in self.fit_reports_)
        self.n_iter_ = max(r.iterations for r in self.fit_reports_)
        return self

    def _predictions(self, X):
        check_is_fitted(self, "models_")
        X = validate_data(self, X, reset=False)
        return X, [m.predict(X) for m in self.models_]

    def predict(self, X, return_std=False):
        """Posterior mean, optionally with the total predictive std."""
        _, preds = self._predictions(X)
        mean = _stack([p.mean for p in preds], self._single_output)
        if not return_std:
            return mean
        std = _stack([np.sqrt(p.noise_variance) for p in preds], self._single_output)
        return mean, std

    def predict_variance(self, X):
        _, preds = self._predictions(X)
        return _stack([p.noise_variance for p in preds], self._single_output)

    def predict_noise(self, X):
        """Estimated noise variance ``sigma0_sq + gamma(x)``, floored."""
        check_is_fitted(self, "models_")
        X = validate_data(self, X, reset=False)
        cols = [clamp_noise(self.sigma0_sq, m.predict_gamma(X))[0] for m in self.models_]
        return _stack(cols, self._single_output)

    def predict_epistemic(self, X):
        """Prior-GP variance, the uncertainty of the noise estimate."""
        _, preds = self._predictions(X)
        return _stack([p.epistemic_variance for p in preds], self._single_output)
