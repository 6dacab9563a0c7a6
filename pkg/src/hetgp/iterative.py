"""Joint fixed-point estimation of the posterior GP and the prior GP.

Each sweep at the training inputs does::

    lam    = K (K + s0 I + diag(gamma_j))^-1 Y
    Z      = (Y - lam)**2 - s0
    gamma' = K (K + s0 I)^-1 Z
    alpha' = (K + s0 I + diag(gamma'))^-1 Y

and stops once ``||alpha' - alpha||_2 <= delta``. The factorization used for
``alpha'`` is the one the next sweep needs for ``lam``, so each sweep costs a
single Cholesky of the posterior system.

The module also carries the elementwise analysis of the sweep in the regime
``K(X, X) = I``, used to check boundedness and contraction numerically.
"""

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_solve

from .gp import (
    Dataset,
    GPModel,
    Prediction,
    clamp_noise,
    factorize,
    fit_posterior_gp,
    fit_prior_gp,
    predict,
)
from .kernel import KernelConfig, kernel_cross

OSCILLATION_WINDOW = 20


@dataclass(frozen=True)
class IterConfig:
    delta: float = 1e-6
    max_iter: int = 200
    sigma0_sq: float = 1.0
    kernel: KernelConfig = field(default_factory=KernelConfig)

    def __post_init__(self):
        if not self.delta > 0:
            raise ValueError(f"delta must be > 0, got {self.delta}")
        if int(self.max_iter) != self.max_iter or self.max_iter < 1:
            raise ValueError(f"max_iter must be a positive integer, got {self.max_iter}")
        if not self.sigma0_sq > 0:
            raise ValueError(f"sigma0_sq must be > 0, got {self.sigma0_sq}")


@dataclass
class FitReport:
    """Trace of one run of the joint iteration.

    ``alpha_trace``, ``gamma_trace`` and ``lambda_trace`` hold the iterates
    ``j = 1 .. iterations``; the initial zeros are not stored.
    """

    converged: bool
    iterations: int
    gamma_final: np.ndarray
    lambda_final: np.ndarray
    alpha_trace: list
    stopping_metric_trace: list
    clamp_events: int
    sigma_condition_ok: bool
    oscillating: bool = False
    gamma_trace: list = field(default_factory=list)
    lambda_trace: list = field(default_factory=list)

    def to_dict(self):
        return {
            "converged": bool(self.converged),
            "iterations": int(self.iterations),
            "gamma_final": np.asarray(self.gamma_final).tolist(),
            "lambda_final": np.asarray(self.lambda_final).tolist(),
            "alpha_trace": [np.asarray(a).tolist() for a in self.alpha_trace],
            "stopping_metric_trace": [float(m) for m in self.stopping_metric_trace],
            "clamp_events": int(self.clamp_events),
            "sigma_condition_ok": bool(self.sigma_condition_ok),
            "oscillating": bool(self.oscillating),
        }

    def to_json(self, **kwargs):
        return json.dumps(self.to_dict(), **kwargs)

    @classmethod
    def from_dict(cls, d):
        return cls(
            converged=d["converged"],
            iterations=d["iterations"],
            gamma_final=np.asarray(d["gamma_final"], dtype=float),
            lambda_final=np.asarray(d["lambda_final"], dtype=float),
            alpha_trace=[np.asarray(a, dtype=float) for a in d["alpha_trace"]],
            stopping_metric_trace=list(d["stopping_metric_trace"]),
            clamp_events=d["clamp_events"],
            sigma_condition_ok=d["sigma_condition_ok"],
            oscillating=d.get("oscillating", False),
        )


@dataclass(frozen=True)
class HetGP:
    """Posterior GP, prior GP and the trace that produced them."""

    posterior: GPModel
    prior: GPModel
    report: FitReport

    def predict(self, X):
        """Posterior mean, total predictive variance and prior-GP variance.

        ``noise_variance`` uses the prior-GP mean as the noise adjustment at
        each query point; ``epistemic_variance`` is the prior-GP variance.
        """
        prior_pred = predict(self.prior, X)
        post = predict(self.posterior, X, prior_pred.mean)
        return Prediction(
            mean=post.mean,
            noise_variance=post.noise_variance,
            epistemic_variance=prior_pred.noise_variance,
        )

    def predict_gamma(self, X):
        return predict(self.prior, X).mean

    def predict_posterior_epistemic(self, X):
        """``Lambda(x) - s0 - gamma(x)``, the alternative epistemic measure."""
        prior_pred = predict(self.prior, X)
        return predict(self.posterior, X, prior_pred.mean).epistemic_variance


def _oscillating(metrics, window=OSCILLATION_WINDOW):
    if len(metrics) <= window:
        return False
    recent = metrics[-(window + 1):]
    return min(recent[1:]) >= recent[0]


def iterate(data, config, n_iter=None, stop=True, K=None):
    """Run the joint sweep and return ``(FitReport, K)``.

    With ``stop=False`` exactly ``n_iter`` sweeps are executed regardless of
    the stopping rule, which the theory checks use to obtain a reference
    fixed point.
    """
    n_iter = config.max_iter if n_iter is None else int(n_iter)
    s0 = config.sigma0_sq
    X, Y = data.X, data.Y
    n = Y.shape[0]
    if K is None:
        K = kernel_cross(config.kernel, X, X)
    prior_chol, _ = factorize(K + s0 * np.eye(n), config.kernel.jitter)

    gamma = np.zeros(n)
    alpha = np.zeros(n)
    lam = np.zeros(n)
    noise, clamps = clamp_noise(s0, gamma)
    post_chol, _ = factorize(K + np.diag(noise), config.kernel.jitter)
    w = cho_solve(post_chol, Y)

    report = FitReport(
        converged=False,
        iterations=0,
        gamma_final=gamma,
        lambda_final=np.zeros(n),
        alpha_trace=[],
        stopping_metric_trace=[],
        clamp_events=clamps,
        sigma_condition_ok=bool(np.all(s0 >= Y**2)),
    )
    for j in range(n_iter):
        lam = K @ w
        Z = (Y - lam) ** 2 - s0
        gamma = K @ cho_solve(prior_chol, Z)
        noise, hits = clamp_noise(s0, gamma)
        try:
            post_chol, _ = factorize(K + np.diag(noise), config.kernel.jitter)
        except ArithmeticError as exc:
            raise type(exc)(f"iteration {j + 1}: {exc}") from exc
        w = cho_solve(post_chol, Y)
        metric = float(np.linalg.norm(w - alpha))
        alpha = w

        report.clamp_events += hits
        report.iterations = j + 1
        report.alpha_trace.append(alpha)
        report.gamma_trace.append(gamma)
        report.lambda_trace.append(lam)
        report.stopping_metric_trace.append(metric)
        if stop and metric <= config.delta:
            break
    report.converged = bool(report.stopping_metric_trace) and (
        report.stopping_metric_trace[-1] <= config.delta
    )
    report.gamma_final = gamma
    report.lambda_final = lam
    report.oscillating = (not report.converged) and _oscillating(
        report.stopping_metric_trace
    )
    return report, K


def fit_hetgp(data, config):
    """Fit the heteroscedastic GP pair on ``data``.

    Non-convergence within ``config.max_iter`` is reported through
    ``report.converged`` rather than raised.
    """
    if not isinstance(data, Dataset):
        data = Dataset(*data)
    report, K = iterate(data, config)
    posterior = fit_posterior_gp(
        data, config.kernel, config.sigma0_sq, report.gamma_final, K=K
    )
    Z = (data.Y - report.lambda_final) ** 2 - config.sigma0_sq
    prior = fit_prior_gp(data.X, Z, config.kernel, config.sigma0_sq, K=K)
    return HetGP(posterior=posterior, prior=prior, report=report)


def fit_hetgp_multi(X, Y, config):
    """One independent fit per output column of ``Y``."""
    Y = np.asarray(Y, dtype=float)
    if Y.ndim == 1:
        Y = Y[:, None]
    return [fit_hetgp(Dataset(X, Y[:, i]), config) for i in range(Y.shape[1])]


# -- elementwise analysis for K(X, X) = I ------------------------------------


def analytic_small_l_step(gamma, Y, sigma0_sq):
    """One sweep of the iteration when ``K(X, X) = I``, elementwise.

    ``gamma+ = (M**2 y**2 - s0) / (1 + s0)`` with
    ``M = (s0 + gamma) / (1 + s0 + gamma)``.
    """
    gamma = np.asarray(gamma, dtype=float)
    Y = np.asarray(Y, dtype=float)
    if gamma.shape != Y.shape:
        raise ValueError(f"shape mismatch: {gamma.shape} vs {Y.shape}")
    denom = 1.0 + sigma0_sq + gamma
    if np.any(denom <= 0):
        raise ArithmeticError("1 + sigma0_sq + gamma must be positive")
    M = (sigma0_sq + gamma) / denom
    return (M**2 * Y**2 - sigma0_sq) / (1.0 + sigma0_sq)


def gamma_envelope(Y, sigma0_sq):
    """Elementwise ``(lower, upper)`` envelope for iterates in the K = I regime."""
    Y = np.asarray(Y, dtype=float)
    lower = np.full(Y.shape, -sigma0_sq / (1.0 + sigma0_sq))
    upper = (Y**2 - sigma0_sq) / (1.0 + sigma0_sq)
    return lower, upper


@dataclass
class BoundsReport:
    passed: bool
    violations: int
    worst_margin: float
    worst_iteration: int

    def to_dict(self):
        return {
            "passed": self.passed,
            "violations": self.violations,
            "worst_margin": self.worst_margin,
            "worst_iteration": self.worst_iteration,
        }


def check_gamma_envelope(gamma_trace, Y, sigma0_sq, atol=0.0):
    """Check every iterate against the K = I envelope.

    The margin of an iterate is its smallest distance to either bound
    (negative when outside). ``atol`` admits round-off of that size.
    """
    lower, upper = gamma_envelope(Y, sigma0_sq)
    worst = np.inf
    worst_j = 0
    violations = 0
    for j, g in enumerate(gamma_trace, start=1):
        g = np.asarray(g, dtype=float)
        margin = np.minimum(g - lower, upper - g)
        violations += int(np.count_nonzero(margin < -atol))
        m = float(margin.min())
        if m < worst:
            worst, worst_j = m, j
    return BoundsReport(
        passed=violations == 0,
        violations=violations,
        worst_margin=float(worst),
        worst_iteration=worst_j,
    )


def contraction_factor(gamma_j, gamma_star, y, sigma0_sq):
    """Factor ``a`` with ``step(gamma_j) - step(gamma_star) = a (gamma_j - gamma_star)``."""
    s = sigma0_sq
    num = gamma_j + gamma_star + 2.0 * (
        s + s * gamma_j + s * gamma_star + gamma_j * gamma_star + s * s
    )
    den = (1.0 + s + gamma_j) ** 2 * (1.0 + s + gamma_star) ** 2
    return (y * y / (1.0 + s)) * num / den


def scalar_fixed_point(y, sigma0_sq, tol=1e-15, max_iter=200):
    """Fixed point of the scalar K = I sweep, by bisection.

    The root is bracketed by the lower envelope ``-s0 / (1 + s0)`` and the
    upper envelope ``max(0, (y**2 - s0) / (1 + s0))``.
    """

    def residual(g):
        return float(analytic_small_l_step(np.array([g]), np.array([y]), sigma0_sq)[0]) - g

    lo = -sigma0_sq / (1.0 + sigma0_sq)
    hi = max(0.0, (y * y - sigma0_sq) / (1.0 + sigma0_sq))
    r_lo = residual(lo)
    if r_lo == 0.0:
        return lo
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        r_mid = residual(mid)
        if r_mid == 0.0 or hi - lo <= tol:
            return mid
        if (r_mid > 0) == (r_lo > 0):
            lo, r_lo = mid, r_mid
        else:
            hi = mid
    return 0.5 * (lo + hi)
