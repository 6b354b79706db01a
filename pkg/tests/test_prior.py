import numpy as np
import pytest

from sboed.errors import ContractError
from sboed.forward import Grid
from sboed.prior import PriorOperator, robin_coefficient


@pytest.fixture(scope="module")
def prior9():
    return PriorOperator(Grid(9, 9))


def _cinv_orthonormal(prior, r, seed):
    """Random columns made orthonormal in the prior-precision metric."""
    X = prior.apply_cov(np.random.default_rng(seed).standard_normal((prior.grid.n, r)))
    G = X.T @ prior.apply_prec(X)
    L = np.linalg.cholesky(0.5 * (G + G.T))
    return X @ np.linalg.inv(L).T


def test_robin_default():
    p = PriorOperator(Grid(9, 9), gamma=0.1, delta=0.8)
    assert p.robin_beta == pytest.approx(0.1 * np.sqrt(8.0) / 1.42)
    assert robin_coefficient(0.1, 0.8) == p.robin_beta


def test_constant_interior(prior9):
    x = np.full(prior9.grid.n, 2.0)
    Ax = prior9.apply_A(x)
    interior = (prior9.grid.boundary_weights == 0)
    np.testing.assert_allclose(Ax[interior], prior9.delta * 2.0, rtol=1e-12)
    assert not np.any(prior9.apply_A(np.zeros(prior9.grid.n)))


def test_symmetry_weighted(prior9):
    rng = np.random.default_rng(1)
    w = prior9.grid.weights
    for _ in range(10):
        x, y = rng.standard_normal((2, prior9.grid.n))
        a = np.sum(w * prior9.apply_A(x) * y)
        b = np.sum(w * x * prior9.apply_A(y))
        assert abs(a - b) <= 1e-12 * max(1.0, abs(a))


def test_spd(prior9):
    assert np.linalg.eigvalsh(prior9.dense_A()).min() > 0


def test_cov_dense_and_roundtrip(prior9):
    x = np.random.default_rng(2).standard_normal(prior9.grid.n)
    cx = prior9.apply_cov(x)
    ref = prior9.dense_cov() @ x
    assert np.abs(cx - ref).max() <= 1e-8 * np.abs(ref).max()
    assert np.linalg.norm(prior9.apply_prec(cx) - x) <= 1e-6 * np.linalg.norm(x)
    assert not np.any(prior9.apply_cov(np.zeros(prior9.grid.n)))


def test_cg_solver_matches_direct():
    g = Grid(9, 9)
    a, b = PriorOperator(g), PriorOperator(g, solver="cg")
    x = np.random.default_rng(3).standard_normal(g.n)
    np.testing.assert_allclose(b.apply_cov(x), a.apply_cov(x), rtol=1e-8, atol=1e-12)


def test_sample_deterministic(prior9):
    np.testing.assert_array_equal(prior9.sample(5), prior9.sample(5))


def test_monte_carlo_moments(prior9):
    S = prior9.sample(7, n_samples=5000)
    var = np.diag(prior9.dense_cov())
    std = np.sqrt(var)
    mean_err = np.abs(S[:2000].mean(axis=0) - prior9.mean)
    assert np.all(mean_err <= 5 * std / np.sqrt(2000))
    np.testing.assert_allclose(S.var(axis=0), var, rtol=0.15)


def test_pointwise_variance(prior9):
    np.testing.assert_allclose(prior9.pointwise_variance(), np.diag(prior9.dense_cov()), rtol=1e-12)
    np.testing.assert_allclose(prior9.pointwise_variance([3, 7]), np.diag(prior9.dense_cov())[[3, 7]])


class TestWhitening:
    def test_prior_mean_maps_to_zero(self, prior9):
        psi = _cinv_orthonormal(prior9, 6, 0)
        np.testing.assert_allclose(prior9.whiten(psi, prior9.mean), 0.0, atol=1e-14)
        np.testing.assert_array_equal(prior9.unwhiten(psi, np.zeros(6)), prior9.mean)

    def test_roundtrip(self, prior9):
        psi = _cinv_orthonormal(prior9, 6, 1)
        B = np.random.default_rng(4).standard_normal((6, 20))
        np.testing.assert_allclose(prior9.whiten(psi, prior9.unwhiten(psi, B)), B, atol=1e-8)

    def test_regulariser_is_euclidean(self, prior9):
        psi = _cinv_orthonormal(prior9, 6, 2)
        beta = np.random.default_rng(5).standard_normal(6)
        assert prior9.cost(prior9.unwhiten(psi, beta)) == pytest.approx(0.5 * beta @ beta, rel=1e-8)

    def test_whitened_samples_standard(self, prior9):
        psi = _cinv_orthonormal(prior9, 5, 3)
        S = prior9.sample(8, n_samples=5000)
        beta = prior9.whiten(psi, S.T)
        cov = np.cov(beta)
        assert np.abs(cov - np.eye(5)).max() <= 0.1

    def test_non_orthonormal_rejected(self, prior9):
        with pytest.raises(ContractError):
            prior9.whiten(np.eye(prior9.grid.n)[:, :3], prior9.mean)
