import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hetgp.gp import (
    VARIANCE_FLOOR,
    Dataset,
    NumericalError,
    factorize,
    fit_posterior_gp,
    fit_prior_gp,
    predict,
    second_moment_targets,
)
from hetgp.kernel import KernelConfig
from oracles import dense_gp


def rel_err(a, b):
    return np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-300)


class TestDataset:
    def test_coerces_shapes(self):
        d = Dataset([1.0, 2.0], [[3.0], [4.0]])
        assert d.X.shape == (2, 1) and d.Y.shape == (2,) and len(d) == 2

    @pytest.mark.parametrize(
        "X,Y", [([], []), ([1.0, 2.0], [1.0]), ([np.nan], [1.0])]
    )
    def test_rejects_invalid(self, X, Y):
        with pytest.raises(ValueError):
            Dataset(X, Y)


class TestPosteriorAgainstDenseInverse:
    @pytest.mark.parametrize("seed", range(5))
    def test_classical(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(1, 30))
        X, Y = rng.uniform(0, 5, (n, 2)), rng.normal(size=n)
        Xs = rng.uniform(0, 5, (7, 2))
        m = fit_posterior_gp(Dataset(X, Y), KernelConfig(0.8), 0.3)
        p = predict(m, Xs)
        mean, var = dense_gp(X, Y, 0.8, 0.3, Xs=Xs)
        assert rel_err(p.mean, mean) < 1e-9
        assert rel_err(p.noise_variance, var) < 1e-9

    def test_per_point_noise(self):
        rng = np.random.default_rng(7)
        X, Y = rng.uniform(0, 5, 12), rng.normal(size=12)
        gamma = rng.uniform(-0.2, 1.0, 12)
        Xs = np.linspace(0, 5, 9)
        gs = rng.uniform(-0.1, 0.5, 9)
        m = fit_posterior_gp(Dataset(X, Y), KernelConfig(1.3), 0.5, gamma)
        p = predict(m, Xs, gs)
        mean, var = dense_gp(X[:, None], Y, 1.3, 0.5, gamma, Xs[:, None], gs)
        assert rel_err(p.mean, mean) < 1e-9
        assert rel_err(p.noise_variance, var) < 1e-9

    def test_single_point_closed_form(self):
        m = fit_posterior_gp(Dataset([2.0], [1.5]), KernelConfig(0.5), 0.25)
        p = predict(m, [2.0])
        assert p.mean[0] == pytest.approx(1.5 / 1.25, rel=1e-14)
        assert p.noise_variance[0] == pytest.approx(1.25 - 1 / 1.25, rel=1e-14)
        assert p.epistemic_variance[0] == pytest.approx(1 - 1 / 1.25, rel=1e-14)


class TestPriorGP:
    def test_ignores_any_gamma(self):
        rng = np.random.default_rng(3)
        X, Z = rng.uniform(0, 3, 8), rng.normal(size=8)
        m = fit_prior_gp(X, Z, KernelConfig(), 0.7)
        np.testing.assert_array_equal(m.gamma_train, 0.0)
        mean, var = dense_gp(X[:, None], Z, 0.5, 0.7)
        assert rel_err(predict(m, X).mean, mean) < 1e-9

    def test_second_moment_targets(self):
        d = Dataset([0.0, 1.0], [1.0, -2.0])
        np.testing.assert_allclose(
            second_moment_targets(d, np.array([0.5, 0.0]), 0.1), [0.15, 3.9])
        with pytest.raises(ValueError):
            second_moment_targets(d, np.zeros(3), 0.1)


class TestNumerics:
    def test_variance_floor_applied(self):
        m = fit_posterior_gp(Dataset([0.0], [0.0]), KernelConfig(), 1.0, [-5.0])
        assert m.n_clamped == 1
        p = predict(m, [0.0], -5.0)
        assert p.noise_variance[0] >= VARIANCE_FLOOR

    def test_jitter_rescues_singular_matrix(self):
        A = np.ones((3, 3))
        _, added = factorize(A, 1e-10)
        assert 0 < added <= 1e-6

    def test_jitter_not_used_when_unneeded(self):
        assert factorize(np.eye(3))[1] == 0.0

    def test_indefinite_matrix_raises(self):
        with pytest.raises(NumericalError, match="condition number"):
            factorize(-np.eye(2))

    @pytest.mark.parametrize("s0", [0.0, -1.0, np.nan])
    def test_bad_sigma(self, s0):
        with pytest.raises(ValueError):
            fit_posterior_gp(Dataset([0.0], [1.0]), KernelConfig(), s0)

    def test_feature_mismatch(self):
        m = fit_posterior_gp(Dataset(np.zeros((2, 2)), [1.0, 2.0]), KernelConfig(), 1.0)
        with pytest.raises(ValueError):
            predict(m, np.zeros((1, 3)))


@settings(max_examples=50, deadline=None)
@given(
    st.integers(1, 15),
    st.floats(0.05, 5.0),
    st.floats(0.01, 3.0),
    st.integers(0, 2**32 - 1),
)
def test_epistemic_bounded_by_total(n, l, s0, seed):
    rng = np.random.default_rng(seed)
    X, Y = rng.uniform(-3, 3, n), rng.normal(size=n)
    m = fit_posterior_gp(Dataset(X, Y), KernelConfig(l), s0)
    p = predict(m, np.linspace(-4, 4, 11))
    assert np.all(p.epistemic_variance >= 0)
    assert np.all(p.epistemic_variance <= 1.0 + 1e-12)
    np.testing.assert_allclose(p.noise_variance, p.epistemic_variance + s0, atol=1e-9)
