import numpy as np
import pytest
import scipy.linalg
from hypothesis import given, settings
from hypothesis import strategies as st

from sboed.errors import ContractError
from sboed.forward import AdvectionDiffusion, Grid, PdeConfig, make_velocity
from sboed.prior import PriorOperator
from sboed.reduction import (
    ReducedBases,
    active_subspace,
    parameter_projection_error,
    pca_states,
    project_training_targets,
    retained_variance,
    state_projection_error,
)


@pytest.fixture(scope="module")
def small():
    grid = Grid(9, 9)
    model = AdvectionDiffusion(grid, PdeConfig(kappa=0.02, n_steps=4, t_final=0.4), make_velocity(grid, "g1"))
    prior = PriorOperator(grid)
    samples = prior.sample(rng=np.random.default_rng(0), n_samples=3)
    samples = samples if samples.shape[0] == 3 else samples.T
    return grid, model, prior, samples


def _dense_jacobians(model, m):
    Phi = np.linalg.solve(model.lhs.toarray(), model.rhs.toarray())
    D = model.initial_derivative(m, np.eye(model.grid.n))
    return [np.linalg.matrix_power(Phi, k) @ D for k in range(1, model.cfg.n_steps + 1)]


def test_active_subspace_matches_dense_gevp(small):
    grid, model, prior, samples = small
    W = np.diag(grid.weights)
    H = np.zeros((grid.n, grid.n))
    for m in samples:
        for J in _dense_jacobians(model, m):
            H += J.T @ W @ J
    H /= len(samples)
    P = np.linalg.inv(prior.dense_cov())
    ref = scipy.linalg.eigh(H, P, eigvals_only=True)[::-1]
    # oversampling to the full dimension makes the randomized solver exact
    psi, lam = active_subspace(model, prior, samples, 6, oversample=grid.n - 6, seed=1)
    assert np.allclose(lam, ref[:6], rtol=1e-6)
    assert np.allclose(psi.T @ prior.apply_prec(psi), np.eye(6), atol=1e-8)
    assert np.all(np.diff(lam) <= 0)


def test_active_subspace_contracts(small):
    _, model, prior, samples = small
    with pytest.raises(ContractError):
        active_subspace(model, prior, [], 3)
    with pytest.raises(ContractError):
        active_subspace(model, prior, samples, 0)


def test_pca_matches_covariance_eigenvectors():
    rng = np.random.default_rng(3)
    snaps = [rng.standard_normal((4, 12)) @ np.diag(np.linspace(3, 0.1, 12)) for _ in range(10)]
    psi, ubar, s = pca_states(snaps, 3)
    X = np.concatenate(snaps).T
    Xc = X - X.mean(axis=1, keepdims=True)
    w, V = np.linalg.eigh(Xc @ Xc.T)
    assert np.allclose(s**2, np.sort(w)[::-1][: s.size], rtol=1e-8, atol=1e-8)
    assert np.allclose(np.abs(psi.T @ V[:, ::-1][:, :3]), np.eye(3), atol=1e-6)
    assert np.allclose(ubar, X.mean(axis=1))


def test_pca_recovers_low_rank_data_exactly():
    rng = np.random.default_rng(0)
    basis = np.linalg.qr(rng.standard_normal((20, 2)))[0]
    snaps = [(rng.standard_normal((3, 2)) @ basis.T) + 5.0 for _ in range(6)]
    psi, ubar, s = pca_states(snaps, 2)
    assert retained_variance(s, 2) > 1 - 1e-12
    u = snaps[0]
    bases = ReducedBases(np.zeros((20, 1)), psi, ubar, np.ones(1), s)
    assert state_projection_error(bases, u) < 1e-10


@settings(max_examples=20, deadline=None)
@given(st.lists(st.floats(0, 10), min_size=1, max_size=10))
def test_retained_variance_is_monotone(vals):
    s = np.sort(np.asarray(vals))[::-1]
    fr = [retained_variance(s, r) for r in range(len(s) + 1)]
    assert all(b >= a - 1e-15 for a, b in zip(fr, fr[1:]))
    assert np.isclose(fr[-1], 1.0)


def _bases(small, r_m=4, r_u=5):
    grid, model, prior, samples = small
    psi_m, lam = active_subspace(model, prior, samples, r_m)
    trajs = [model.solve_forward(m).states for m in samples]
    psi_u, ubar, s = pca_states(trajs, r_u)
    return ReducedBases(psi_m, psi_u, ubar, lam, s, meta={"grid_hash": "g", "prior_hash": "p"})


def test_projected_jacobian_matches_fd(small):
    grid, model, prior, samples = small
    bases = _bases(small)
    m = samples[1]
    ps = project_training_targets(model, prior, bases, m)
    assert ps.beta_u.shape == (4, 5) and ps.beta_J.shape == (4, 5, 4)
    h = 1e-6
    for j in range(bases.r_m):
        up = model.solve_forward(m + h * bases.psi_m[:, j]).states[1:]
        dn = model.solve_forward(m - h * bases.psi_m[:, j]).states[1:]
        fd = (up - dn) @ bases.psi_u / (2 * h)
        assert np.allclose(ps.beta_J[:, :, j], fd, rtol=1e-5, atol=1e-6)
    assert np.allclose(ps.beta_m, prior.whiten(bases, m))


def test_parameter_projection_error_zero_in_span(small):
    grid, model, prior, samples = small
    bases = _bases(small)
    m = prior.mean + bases.psi_m @ np.array([1.0, -2.0, 0.5, 0.3])
    assert parameter_projection_error(prior, bases, m) < 1e-8
    assert 0 < parameter_projection_error(prior, bases, samples[0]) <= 1 + 1e-12


def test_bases_roundtrip_and_mismatch(small, tmp_path):
    grid, model, prior, _ = small
    bases = _bases(small)
    bases.check(prior)
    man = bases.save(tmp_path)
    back = ReducedBases.load(tmp_path, grid_hash="g", prior_hash="p")
    assert back.fingerprint() == bases.fingerprint() == man["fingerprint"]
    with pytest.raises(ContractError):
        ReducedBases.load(tmp_path, grid_hash="other")
    bad = ReducedBases(bases.psi_m * 1.01, bases.psi_u, bases.u_bar, bases.as_eigvals, bases.pca_singulars)
    with pytest.raises(ContractError):
        bad.check(prior)


def test_bases_reject_unsorted_spectra():
    with pytest.raises(ContractError):
        ReducedBases(np.zeros((3, 2)), np.zeros((3, 1)), np.zeros(3), np.array([1.0, 2.0]), np.ones(1))
