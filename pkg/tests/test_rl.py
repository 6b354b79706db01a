import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import sboed.rl as rl
from sboed.errors import ContractError
from sboed.forward import Grid, observation_matrix
from sboed.laplace import d_optimality
from sboed.reduction import ReducedBases
from sboed.rl import (
    DesignBounds,
    EpisodeInputs,
    SensorEnv,
    actor_objective,
    apply_design,
    critic_value,
    evaluate_policy,
    init_networks,
    observe_field,
    observe_latent,
    policy_act,
    random_designs,
    td_loss,
    td_targets,
    train_policy,
)

R_M, R_U, K = 3, 4, 6


def _bases(grid, seed=0):
    rng = np.random.default_rng(seed)
    psi_u = np.linalg.qr(rng.standard_normal((grid.n, R_U)))[0]
    return ReducedBases(np.zeros((grid.n, R_M)), psi_u, 1.0 + rng.random(grid.n), np.ones(R_M), np.ones(R_U))


def _env(stage_steps=([0, 1], [2, 3], [4, 5])):
    grid = Grid(9, 9)
    bounds = DesignBounds(
        np.array([[0.3, 0.5], [0.7, 0.4]]),
        np.array([[0.1, 0.45, 0.2, 0.8], [0.6, 0.9, 0.1, 0.9]]),
        len(stage_steps),
    )
    return SensorEnv(grid, _bases(grid), bounds, stage_steps)


def _inputs(E, seed=1):
    rng = np.random.default_rng(seed)
    return EpisodeInputs(
        rng.standard_normal((E, R_M)),
        rng.standard_normal((E, K, R_U)),
        rng.standard_normal((E, K, R_U, R_M)),
    )


def test_caps_are_edge_distance_over_stage_count():
    env = _env()
    b = env.bounds
    # sensor 0: x distances (0.2, 0.15), y distances (0.3, 0.3)
    assert np.allclose(b.caps[0], [0.15 / 3, 0.3 / 3])
    assert np.allclose(b.caps[1], [0.1 / 3, 0.3 / 3])


def test_maximal_moves_land_on_the_nearest_edge():
    b = _env().bounds
    # move every stage by the full cap towards the closest edge per axis
    x, y = b.initial[:, 0], b.initial[:, 1]
    r = b.rects
    sx = np.where(x - r[:, 0] < r[:, 1] - x, -1.0, 1.0)
    sy = np.where(y - r[:, 2] < r[:, 3] - y, -1.0, 1.0)
    d = (np.column_stack([sx, sy]) * b.caps).ravel()
    c = b.initial
    for _ in range(b.n_stages):
        c = apply_design(c, d, b)
    assert b.contains(c)
    hit = np.column_stack([np.where(sx < 0, r[:, 0], r[:, 1]), np.where(sy < 0, r[:, 2], r[:, 3])])
    assert np.isclose(c[0, 0], hit[0, 0]) and np.isclose(c[1, 0], hit[1, 0])


def test_random_episodes_never_leave_the_rectangles():
    b = _env().bounds
    rng = np.random.default_rng(0)
    D = random_designs(b, rng, 1000)
    assert np.all(np.abs(D) <= b.cap_vector)
    paths = b.initial[None] + np.cumsum(D.reshape(1000, b.n_stages, b.n_sensors, 2), axis=1)
    assert b.contains(paths)


def test_over_cap_design_is_rejected():
    b = _env().bounds
    d = b.cap_vector.copy()
    d[2] *= 1.01
    with pytest.raises(ContractError):
        apply_design(b.initial, d, b)
    with pytest.raises(ContractError):
        DesignBounds(np.array([[0.0, 0.0]]), np.array([[0.1, 0.2, 0.1, 0.2]]), 1)


def test_field_and_latent_observations_agree():
    env = _env()
    rng = np.random.default_rng(3)
    beta = rng.standard_normal(R_U)
    u = env.bases.u_bar + env.bases.psi_u @ beta
    coords = np.array([[0.33, 0.41], [0.77, 0.12]])
    P, c = env.operators(coords)
    assert np.allclose(observe_field(env.grid, coords, u), observe_latent(P, c, beta), atol=1e-12)


def test_bilinear_observation_at_nodes_and_midpoints():
    grid = Grid(5, 5)
    u = np.arange(grid.n, dtype=float) ** 1.5
    # node (x=0.25, y=0.5) and the midpoint of a cell edge
    node = observe_field(grid, [[0.25, 0.5]], u)[0]
    assert np.isclose(node, u[grid.locate((0.25, 0.5))])
    mid = observe_field(grid, [[0.375, 0.5]], u)[0]
    assert np.isclose(mid, 0.5 * (u[grid.locate((0.25, 0.5))] + u[grid.locate((0.5, 0.5))]))
    assert observation_matrix(grid, [[0.1, 0.9]]).sum() == pytest.approx(1.0)


def test_zero_weight_policy_keeps_sensors_still():
    env = _env()
    pol, _ = init_networks(env, 0)
    zero = pol.replace(np.zeros_like(pol.flat))
    d = policy_act(zero, env, 1, np.ones((4, env.dim_x)))
    assert np.array_equal(d, np.zeros((4, env.d_d)))


def test_policy_output_stays_inside_caps():
    env = _env()
    pol, _ = init_networks(env, 1, final_scale=None)
    big = pol.replace(pol.flat * 50)
    d = policy_act(big, env, 0, 100 * np.random.default_rng(0).standard_normal((64, env.dim_x)))
    assert np.all(np.abs(d) <= env.bounds.cap_vector)


def test_information_vector_transition():
    env = _env()
    pol, _ = init_networks(env, 2)
    batch = env.rollout(pol, _inputs(5), np.random.default_rng(0))
    assert env.dim_x == 2 * (env.d_d + 4)
    assert np.all(batch.states[:, 0] == 0)
    w = env.stage_width[0]
    x1 = batch.states[:, 1]
    assert np.allclose(x1[:, : env.d_d], batch.designs[:, 0])
    assert np.allclose(x1[:, env.d_d : w], batch.observations[:, 0])
    assert np.all(x1[:, w:] == 0)  # later stages still padded
    x2 = batch.states[:, 2]
    assert np.allclose(x2[:, :w], x1[:, :w])
    assert np.allclose(x2[:, w : w + env.d_d], batch.designs[:, 1])
    assert np.allclose(batch.coords[:, -1], env.bounds.initial + batch.designs.reshape(5, 3, 2, 2).sum(axis=1))


def test_single_stage_problem():
    env = _env(stage_steps=([0, 1, 2],))
    assert env.dim_x == 0 and env.input_dim == 1
    pol, _ = init_networks(env, 0)
    batch = env.rollout(pol, _inputs(3), np.random.default_rng(0))
    assert batch.rewards.shape == (3,) and np.all(batch.rewards > 0)


def test_noise_level_from_initial_sensor_readings():
    env = _env()
    inp = _inputs(2)
    sig = env.episode_sigma(inp.beta_u)
    for e in range(2):
        ys = []
        for k in range(K):
            u = env.bases.u_bar + env.bases.psi_u @ inp.beta_u[e, k]
            ys.append(observe_field(env.grid, env.bounds.initial, u))
        assert np.isclose(sig[e], 0.01 * np.abs(ys).max())


def test_reward_matches_dense_log_determinant():
    env = _env()
    inp = _inputs(1)
    coords = [env.bounds.initial + 0.01 * n for n in range(1, 4)]
    sigma = 0.2
    rows = []
    for n, steps in enumerate(env.stage_steps):
        B = observation_matrix(env.grid, coords[n]).toarray()
        rows += [B @ env.bases.psi_u @ inp.jac[0, k] for k in steps]
    G = np.vstack(rows) / sigma
    expect = 0.5 * np.linalg.slogdet(np.eye(R_M) + G.T @ G)[1]
    assert np.isclose(env.reward(inp.jac[0], coords, sigma), expect, rtol=1e-10)


def test_stage_rewards_telescope():
    env = _env()
    inp = _inputs(1)
    coords = [env.bounds.initial] * 3
    parts = env.stage_rewards(inp.jac[0], coords, 0.3)
    assert np.all(parts >= -1e-12)
    assert np.isclose(parts.sum(), env.reward(inp.jac[0], coords, 0.3))


@settings(max_examples=15, deadline=None)
@given(st.floats(0.05, 5.0))
def test_reward_grows_as_noise_shrinks(sigma):
    env = _env()
    jac = _inputs(1).jac[0]
    c = [env.bounds.initial] * 3
    assert env.reward(jac, c, sigma) >= env.reward(jac, c, 1.5 * sigma) - 1e-12


def test_td_gradient_matches_finite_differences():
    env = _env()
    pol, cri = init_networks(env, 3, final_scale=None)
    batch = env.rollout(pol, _inputs(6), np.random.default_rng(0))
    env.reward_shift, env.reward_scale = float(batch.rewards.mean()), float(batch.rewards.std())
    targets = td_targets(cri, env, batch)
    _, g = td_loss(cri, env, batch, targets=targets)
    rng = np.random.default_rng(5)
    h = 1e-6
    for i in rng.choice(cri.flat.size, 20, replace=False):
        e = np.zeros_like(cri.flat)
        e[i] = h
        up = td_loss(cri.replace(cri.flat + e), env, batch, targets=targets)[0]
        dn = td_loss(cri.replace(cri.flat - e), env, batch, targets=targets)[0]
        assert np.isclose(g[i], (up - dn) / (2 * h), rtol=1e-4, atol=1e-8)


def test_td_targets_use_next_critic_value_and_terminal_reward():
    env = _env()
    pol, cri = init_networks(env, 4, final_scale=None)
    batch = env.rollout(pol, _inputs(4), np.random.default_rng(1))
    t = td_targets(cri, env, batch).reshape(3, 4)
    assert np.allclose(t[0], critic_value(cri, env, 1, batch.states[:, 1], batch.designs[:, 1]))
    assert np.allclose(t[2], batch.rewards)


def test_actor_gradient_matches_finite_differences():
    env = _env()
    pol, cri = init_networks(env, 5, final_scale=None)
    batch = env.rollout(pol, _inputs(4), np.random.default_rng(2))
    _, g = actor_objective(pol, cri, env, batch)
    rng = np.random.default_rng(6)
    h = 1e-6
    for i in rng.choice(pol.flat.size, 15, replace=False):
        e = np.zeros_like(pol.flat)
        e[i] = h
        fd = (actor_objective(pol.replace(pol.flat + e), cri, env, batch)[0] - actor_objective(pol.replace(pol.flat - e), cri, env, batch)[0]) / (2 * h)
        assert np.isclose(g[i], fd, rtol=1e-4, atol=1e-9)


def test_zero_policy_steps_return_initial_weights():
    env = _env()
    init = init_networks(env, 0)
    res = train_policy(env, [], 3, 1e-3, 1e-3, init=init)
    assert np.array_equal(res.policy.flat, init[0].flat) and res.curves == []


def test_training_is_deterministic():
    runs = []
    for _ in range(2):
        env = _env()
        batches = [_inputs(8, seed=s) for s in range(3)]
        res = train_policy(env, batches, 2, 1e-3, 1e-3, seed=9, explore=0.3)
        runs.append((res.policy.flat, [r["objective"] for r in res.curves]))
    assert np.array_equal(runs[0][0], runs[1][0]) and runs[0][1] == runs[1][1]


def test_actor_climbs_a_fixed_critic():
    # with the critic frozen, repeated actor steps must raise the critic's mean value
    env = _env()
    pol, cri = init_networks(env, 6, final_scale=None)
    batch = env.rollout(pol, _inputs(8), np.random.default_rng(0))
    opt = rl.Adam(1e-3)
    v0 = actor_objective(pol, cri, env, batch)[0]
    for _ in range(30):
        pol = rl.actor_update(pol, cri, opt, env, batch)
    assert actor_objective(pol, cri, env, batch)[0] > v0


def test_win_rate_is_zero_when_random_designs_tie(monkeypatch):
    env = _env()
    pol, _ = init_networks(env, 0)
    zero = pol.replace(np.zeros_like(pol.flat))
    monkeypatch.setattr(rl, "random_designs", lambda b, rng, n: np.zeros((n, b.n_stages, b.d_d)))
    rows = evaluate_policy(env, zero, _inputs(2), 10)
    assert all(r["win_rate"] == 0.0 for r in rows)
    assert all(np.isclose(r["random_mean"], r["d_optimality"]) for r in rows)


def test_win_rate_invariant_under_monotone_reward_transform():
    env = _env()
    pol, _ = init_networks(env, 1)
    base = evaluate_policy(env, pol, _inputs(2), 30, seed=3)
    orig = env.reward
    env.reward = lambda *a, **k: np.exp(orig(*a, **k)) * 2.0 + 1.0
    moved = evaluate_policy(env, pol, _inputs(2), 30, seed=3)
    assert [r["win_rate"] for r in base] == [r["win_rate"] for r in moved]
    none = evaluate_policy(env, pol, _inputs(1), 0)
    assert none[0]["win_rate"] is None


def test_policy_curve_layout():
    env = _env()
    res = train_policy(env, [_inputs(4)], 1, 1e-3, 1e-3, seed=0)
    assert set(res.curves[0]) == {"step", "objective", "behaviour_objective", "critic_loss", "lr", "action_std"}
    assert np.isfinite(res.curves[0]["critic_loss"])
    assert d_optimality([]) == 0.0
