"""Sequential design as a finite-horizon MDP, solved with a deterministic actor-critic.

The state is the zero-padded information vector of past designs and
observations; the action moves every sensor by a bounded displacement; the
only reward is the terminal D-optimality of the whole experiment, evaluated
through the surrogate at the generating prior sample.
"""
from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from functools import partial
from pathlib import Path
from typing import Callable, List, Optional, Sequence

import jax
import jax.numpy as jnp
import numpy as np

from .errors import ContractError, NumericFailure
from .forward import Grid, observation_matrix
from .laplace import d_optimality
from .nn import Adam, Layout, NetParams, init_params, mlp, mlp_layout
from .reduction import ReducedBases

__all__ = [
    "DesignBounds",
    "EpisodeInputs",
    "EpisodeBatch",
    "SensorEnv",
    "apply_design",
    "observe_field",
    "observe_latent",
    "policy_layout",
    "critic_layout",
    "policy_act",
    "critic_value",
    "td_loss",
    "critic_update",
    "actor_update",
    "train_policy",
    "evaluate_policy",
    "random_designs",
]

CAP_TOL = 1e-12


# -- designs ------------------------------------------------------------------------
@dataclass(frozen=True)
class DesignBounds:
    """Permissible rectangles ``[x0, x1, y0, y1]`` and per-stage displacement caps."""

    initial: np.ndarray  # (S, 2)
    rects: np.ndarray  # (S, 4)
    n_stages: int

    def __post_init__(self):
        init = np.atleast_2d(np.asarray(self.initial, float))
        rects = np.atleast_2d(np.asarray(self.rects, float))
        object.__setattr__(self, "initial", init)
        object.__setattr__(self, "rects", rects)
        if init.shape[1] != 2 or rects.shape != (init.shape[0], 4):
            raise ContractError("need one rectangle per sensor")
        if self.n_stages < 1:
            raise ContractError("at least one stage is required")
        if not self.contains(init):
            raise ContractError("initial sensor coordinates must lie inside their rectangles")

    @property
    def n_sensors(self) -> int:
        return self.initial.shape[0]

    @property
    def d_d(self) -> int:
        return 2 * self.n_sensors

    @property
    def caps(self) -> np.ndarray:
        """``(S, 2)``: shortest distance to the rectangle edge per axis, divided by the stage count."""
        x, y = self.initial[:, 0], self.initial[:, 1]
        r = self.rects
        cx = np.minimum(x - r[:, 0], r[:, 1] - x)
        cy = np.minimum(y - r[:, 2], r[:, 3] - y)
        return np.column_stack([cx, cy]) / self.n_stages

    @property
    def cap_vector(self) -> np.ndarray:
        return self.caps.ravel()

    def contains(self, coords, tol: float = 1e-12) -> bool:
        c = np.asarray(coords, float).reshape(-1, self.n_sensors, 2)
        r = self.rects
        ok = (c[..., 0] >= r[:, 0] - tol) & (c[..., 0] <= r[:, 1] + tol)
        ok &= (c[..., 1] >= r[:, 2] - tol) & (c[..., 1] <= r[:, 3] + tol)
        return bool(ok.all())


def apply_design(coords, d, bounds: DesignBounds) -> np.ndarray:
    """Additive sensor move; rejects displacements beyond the caps."""
    d = np.asarray(d, float)
    cap = bounds.cap_vector
    if d.shape[-1] != cap.size:
        raise ContractError(f"design must have {cap.size} entries")
    if np.any(np.abs(d) > cap * (1 + CAP_TOL) + CAP_TOL):
        raise ContractError("design entry exceeds its displacement cap")
    return np.asarray(coords, float) + d.reshape(d.shape[:-1] + (bounds.n_sensors, 2))


def random_designs(bounds: DesignBounds, rng: np.random.Generator, n: int) -> np.ndarray:
    """``(n, N, d_d)`` displacements drawn uniformly inside the caps."""
    cap = bounds.cap_vector
    return rng.uniform(-1.0, 1.0, (n, bounds.n_stages, cap.size)) * cap


# -- observations ---------------------------------------------------------------------
def observe_field(grid: Grid, coords, u: np.ndarray, sigma: float = 0.0, rng=None) -> np.ndarray:
    """Bilinear interpolation of a nodal field at the sensors plus Gaussian noise."""
    y = observation_matrix(grid, coords) @ u
    if sigma > 0:
        y = y + sigma * rng.standard_normal(y.shape)
    return y


def observe_latent(P: np.ndarray, c: np.ndarray, beta_u: np.ndarray, sigma: float = 0.0, rng=None) -> np.ndarray:
    """Same observation through precomputed ``B Psi_u`` rows and offsets ``B u_bar``."""
    y = P @ beta_u + c
    if sigma > 0:
        y = y + sigma * rng.standard_normal(y.shape)
    return y


# -- networks ----------------------------------------------------------------------------
def policy_layout(input_dim: int, d_d: int) -> Layout:
    w = 10 * input_dim
    return mlp_layout("pi", [input_dim, w, w, d_d], "he")


def critic_layout(input_dim: int, d_d: int) -> Layout:
    n_in = input_dim + d_d
    w = 10 * n_in
    return mlp_layout("q", [n_in, w, w, 1], "he")


def _policy_raw(tree, inp, cap):
    z = mlp(tree, "pi", inp, 3, act="relu", out_act="sigmoid")
    return cap * (2.0 * z - 1.0)


def _critic_raw(tree, inp, d_scaled):
    return mlp(tree, "q", jnp.concatenate([inp, d_scaled], axis=-1), 3, act="relu")[..., 0]


@dataclass
class EpisodeInputs:
    """Per-episode surrogate latents, precomputed once for every Monte Carlo sample."""

    beta_m: np.ndarray  # (E, r_m)
    beta_u: np.ndarray  # (E, K, r_u)
    jac: np.ndarray  # (E, K, r_u, r_m)

    def __len__(self):
        return self.beta_m.shape[0]

    def subset(self, idx) -> "EpisodeInputs":
        return EpisodeInputs(self.beta_m[idx], self.beta_u[idx], self.jac[idx])


@dataclass
class EpisodeBatch:
    states: np.ndarray  # (E, N, dim_x): information vector before each decision
    designs: np.ndarray  # (E, N, d_d)
    observations: np.ndarray  # (E, N, d_y)
    coords: np.ndarray  # (E, N + 1, S, 2): initial then after each stage's move
    sigma: np.ndarray  # (E,)
    rewards: np.ndarray  # (E,) terminal D-optimality

    @property
    def objective(self) -> float:
        return float(self.rewards.mean())


class SensorEnv:
    """Stage structure, bounds and surrogate-backed observation/reward plumbing.

    ``stage_steps[n]`` lists the surrogate sequence positions (time step
    minus one) observed in stage ``n``.
    """

    def __init__(
        self,
        grid: Grid,
        bases: ReducedBases,
        bounds: DesignBounds,
        stage_steps: Sequence[Sequence[int]],
        noise_fraction: float = 0.01,
        obs_scale: Optional[float] = None,
        reward_shift: float = 0.0,
        reward_scale: float = 1.0,
    ):
        if len(stage_steps) != bounds.n_stages:
            raise ContractError("stage structure and bounds disagree on the number of stages")
        self.grid = grid
        self.bases = bases
        self.bounds = bounds
        self.stage_steps = [list(map(int, s)) for s in stage_steps]
        self.noise_fraction = float(noise_fraction)
        self.N = bounds.n_stages
        self.S = bounds.n_sensors
        self.d_d = bounds.d_d
        self.d_y = [self.S * len(s) for s in self.stage_steps]
        self.stage_width = [self.d_d + dy for dy in self.d_y]
        self.dim_x = int(sum(self.stage_width[: self.N - 1]))
        self.input_dim = self.N + self.dim_x
        self.obs_scale = float(obs_scale) if obs_scale else float(np.mean(np.abs(bases.u_bar)) or 1.0)
        self.reward_shift = float(reward_shift)
        self.reward_scale = float(reward_scale)
        all_steps = sorted({k for s in self.stage_steps for k in s})
        self._all_steps = all_steps
        # feature scaling applied to the information vector (no shift, so padding stays zero)
        scale = []
        for n in range(self.N - 1):
            scale += list(1.0 / np.maximum(bounds.cap_vector, 1e-12)) + [1.0 / self.obs_scale] * self.d_y[n]
        self._x_scale = np.asarray(scale)

    # observation operators at arbitrary sensor coordinates
    def operators(self, coords):
        B = observation_matrix(self.grid, coords)
        return np.asarray(B @ self.bases.psi_u), np.asarray(B @ self.bases.u_bar)

    def episode_sigma(self, beta_u: np.ndarray) -> np.ndarray:
        """Noise level per episode: fraction of the largest noiseless reading at the initial sensors."""
        P, c = self.operators(self.bounds.initial)
        y = np.einsum("sr,ekr->eks", P, beta_u[:, self._all_steps]) + c
        sig = self.noise_fraction * np.abs(y).max(axis=(1, 2))
        if np.any(sig <= 0):
            raise NumericFailure("zero noise level from vanishing observations")
        return sig

    def network_input(self, n: int, x: np.ndarray) -> np.ndarray:
        """``[one-hot(n), scaled information vector]`` with ``n`` zero-based."""
        x = np.atleast_2d(x)
        onehot = np.zeros((x.shape[0], self.N))
        onehot[:, n] = 1.0
        return np.concatenate([onehot, x * self._x_scale], axis=1)

    def design_scaled(self, d: np.ndarray) -> np.ndarray:
        return d / self.bounds.cap_vector

    def hessian(self, jac: np.ndarray, coords_per_stage, sigma: float, n_stages: Optional[int] = None) -> np.ndarray:
        r_m = jac.shape[-1]
        H = np.zeros((r_m, r_m))
        for n in range(self.N if n_stages is None else n_stages):
            P, _ = self.operators(coords_per_stage[n])
            for k in self.stage_steps[n]:
                BJ = P @ jac[k]
                H += BJ.T @ BJ
        H /= sigma**2
        return 0.5 * (H + H.T)

    def reward(self, jac: np.ndarray, coords_per_stage, sigma: float, n_stages: Optional[int] = None) -> float:
        """Terminal D-optimality of the (possibly truncated) design sequence."""
        lam = np.linalg.eigvalsh(self.hessian(jac, coords_per_stage, sigma, n_stages))
        return d_optimality(np.maximum(lam, 0.0))

    def stage_rewards(self, jac, coords_per_stage, sigma) -> np.ndarray:
        """Incremental D-optimality gains; they sum to the terminal reward."""
        cum = [0.0] + [self.reward(jac, coords_per_stage, sigma, n) for n in range(1, self.N + 1)]
        return np.diff(cum)

    def rollout(
        self,
        policy: Optional[NetParams],
        inputs: EpisodeInputs,
        rng: np.random.Generator,
        designs: Optional[np.ndarray] = None,
        explore: float = 0.0,
    ) -> EpisodeBatch:
        """Act, observe and transition for every stage; designs come from the policy unless given.

        ``explore > 0`` adds Gaussian noise of that many caps to the policy's
        actions (behaviour policy), clipped back into the caps.
        """
        E = len(inputs)
        sigma = self.episode_sigma(inputs.beta_u)
        X = np.zeros((E, self.N, max(self.dim_x, 0)))
        D = np.zeros((E, self.N, self.d_d))
        Y = np.zeros((E, self.N, max(self.d_y)))
        C = np.zeros((E, self.N + 1, self.S, 2))
        C[:, 0] = self.bounds.initial
        x = np.zeros((E, self.dim_x))
        offset = 0
        for n in range(self.N):
            X[:, n] = x
            if designs is not None:
                d = np.asarray(designs[:, n], float)
            else:
                d = policy_act(policy, self, n, x)
                if explore > 0:
                    cap = self.bounds.cap_vector
                    d = np.clip(d + explore * cap * rng.standard_normal(d.shape), -cap, cap)
            D[:, n] = d
            for e in range(E):
                C[e, n + 1] = apply_design(C[e, n], d[e], self.bounds)
                P, c = self.operators(C[e, n + 1])
                ys = [observe_latent(P, c, inputs.beta_u[e, k], sigma[e], rng) for k in self.stage_steps[n]]
                Y[e, n, : self.d_y[n]] = np.concatenate(ys)
            if n < self.N - 1:
                w = self.stage_width[n]
                x = x.copy()
                x[:, offset : offset + self.d_d] = d
                x[:, offset + self.d_d : offset + w] = Y[:, n, : self.d_y[n]]
                offset += w
        R = np.array([self.reward(inputs.jac[e], C[e, 1:], sigma[e]) for e in range(E)])
        return EpisodeBatch(X, D, Y, C, sigma, R)


# -- policy and critic evaluation ---------------------------------------------------------
@jax.jit
def _policy_batch(tree, inp, cap):
    return _policy_raw(tree, inp, cap)


def policy_act(policy: NetParams, env: SensorEnv, n: int, x) -> np.ndarray:
    """Bounded displacement for stage ``n`` (zero-based) given information vectors ``x``."""
    if not 0 <= n < env.N:
        raise ContractError(f"stage index {n} outside 0..{env.N - 1}")
    inp = jnp.asarray(env.network_input(n, x))
    d = np.asarray(_policy_batch(policy.tree(), inp, jnp.asarray(env.bounds.cap_vector)))
    # sigmoid saturation can land a hair outside the cap in floating point
    cap = env.bounds.cap_vector
    return np.clip(d, -cap, cap)


def critic_value(critic: NetParams, env: SensorEnv, n: int, x, d) -> np.ndarray:
    inp = jnp.asarray(env.network_input(n, x))
    return np.asarray(_critic_raw(critic.tree(), inp, jnp.asarray(env.design_scaled(np.atleast_2d(d)))))


def _stack_transitions(env: SensorEnv, batch: EpisodeBatch):
    """Flattened (input, scaled design, target-index) arrays over all (episode, stage) pairs."""
    E, N = batch.designs.shape[:2]
    inp = np.concatenate([env.network_input(n, batch.states[:, n]) for n in range(N)])
    dsc = np.concatenate([env.design_scaled(batch.designs[:, n]) for n in range(N)])
    return inp, dsc


def td_targets(critic: NetParams, env: SensorEnv, batch: EpisodeBatch, policy: Optional[NetParams] = None) -> np.ndarray:
    """Terminal formulation: ``Q(n+1, x', d')`` for ``n < N`` and the scaled reward at ``n = N``.

    ``d'`` is the recorded next action, or the policy's own action at ``x'``
    when ``policy`` is given (needed when the batch came from a noisy
    behaviour policy).
    """
    E, N = batch.designs.shape[:2]
    r = (batch.rewards - env.reward_shift) / env.reward_scale
    out = []
    for n in range(N):
        if n < N - 1:
            x_next = batch.states[:, n + 1]
            d_next = batch.designs[:, n + 1] if policy is None else policy_act(policy, env, n + 1, x_next)
            out.append(critic_value(critic, env, n + 1, x_next, d_next))
        else:
            out.append(r)
    return np.concatenate(out)


def _td_loss_flat(flat, layout, inp, dsc, targets):
    q = _critic_raw(layout.unpack(flat), inp, dsc)
    return jnp.mean((q - targets) ** 2)


_CRITIC_CACHE = {}


def _critic_fns(layout: Layout):
    key = id(layout)
    if key not in _CRITIC_CACHE:
        vg = jax.jit(jax.value_and_grad(lambda f, a, b, t: _td_loss_flat(f, layout, a, b, t)))
        _CRITIC_CACHE[key] = (layout, vg)
    return _CRITIC_CACHE[key][1]


def td_loss(
    critic: NetParams,
    env: SensorEnv,
    batch: EpisodeBatch,
    targets: Optional[np.ndarray] = None,
    policy: Optional[NetParams] = None,
):
    """Mean squared TD error with the targets held fixed; returns ``(loss, gradient)``."""
    inp, dsc = _stack_transitions(env, batch)
    t = td_targets(critic, env, batch, policy) if targets is None else targets
    val, g = _critic_fns(critic.layout)(jnp.asarray(critic.flat), jnp.asarray(inp), jnp.asarray(dsc), jnp.asarray(t))
    val = float(val)
    if not np.isfinite(val):
        raise NumericFailure("non-finite TD loss")
    return val, np.asarray(g)


def critic_update(critic: NetParams, opt: Adam, env: SensorEnv, batch: EpisodeBatch, policy: Optional[NetParams] = None):
    """One Adam step on the TD loss (semi-gradient: targets recomputed, then frozen)."""
    loss, g = td_loss(critic, env, batch, policy=policy)
    return critic.replace(opt.step(critic.flat, g)), loss


_ACTOR_CACHE = {}


def _actor_fn(p_layout: Layout, q_layout: Layout):
    key = (id(p_layout), id(q_layout))
    if key not in _ACTOR_CACHE:

        def objective(pflat, qflat, inp, cap):
            d = _policy_raw(p_layout.unpack(pflat), inp, cap)
            return jnp.mean(_critic_raw(q_layout.unpack(qflat), inp, d / cap))

        _ACTOR_CACHE[key] = (p_layout, q_layout, jax.jit(jax.value_and_grad(objective)))
    return _ACTOR_CACHE[key][2]


def actor_objective(policy: NetParams, critic: NetParams, env: SensorEnv, batch: EpisodeBatch):
    """Mean critic value at the policy's own actions and its gradient over policy weights."""
    inp, _ = _stack_transitions(env, batch)
    val, g = _actor_fn(policy.layout, critic.layout)(
        jnp.asarray(policy.flat), jnp.asarray(critic.flat), jnp.asarray(inp), jnp.asarray(env.bounds.cap_vector)
    )
    return float(val), np.asarray(g)


def actor_update(policy: NetParams, critic: NetParams, opt: Adam, env: SensorEnv, batch: EpisodeBatch) -> NetParams:
    """One Adam ascent step along the deterministic policy gradient."""
    _, g = actor_objective(policy, critic, env, batch)
    return policy.replace(opt.step(policy.flat, g, ascent=True))


# -- training and evaluation ----------------------------------------------------------------
@dataclass
class PolicyResult:
    policy: NetParams
    critic: NetParams
    curves: List[dict] = field(default_factory=list)
    seconds: float = 0.0


def init_networks(env: SensorEnv, seed: int, final_scale: Optional[float] = 3e-3):
    """Policy and critic weights; output layers drawn from ``U(-final_scale, final_scale)``.

    Small output layers start the policy at the centred (zero-displacement)
    design and keep the initial critic nearly flat.  ``final_scale=None``
    keeps the plain fan-in initialisation for every layer.
    """
    ss = np.random.SeedSequence(seed).spawn(3)
    pol = init_params(policy_layout(env.input_dim, env.d_d), int(ss[0].generate_state(1)[0]))
    cri = init_params(critic_layout(env.input_dim, env.d_d), int(ss[1].generate_state(1)[0]))
    if final_scale is not None:
        rng = np.random.default_rng(ss[2])
        out = []
        for net, last in ((pol, "pi.2"), (cri, "q.2")):
            tree = {k: np.array(v) for k, v in net.tree().items()}
            for name in (last + ".W", last + ".b"):
                tree[name] = rng.uniform(-final_scale, final_scale, tree[name].shape)
            out.append(net.replace(net.layout.pack(tree)))
        pol, cri = out
    return pol, cri


def train_policy(
    env: SensorEnv,
    batches: Sequence[EpisodeInputs],
    critic_steps: int,
    lr_actor: float,
    lr_critic: float,
    decay: float = 0.98,
    seed: int = 0,
    init=None,
    log: Optional[Callable[[dict], None]] = None,
    explore: float = 0.0,
) -> PolicyResult:
    """Algorithm loop: roll out a batch, fit the critic, take one actor step.

    The reward normalisation of ``env`` is fixed from the first batch when it
    has not been set, so the critic regresses values of order one.  With
    ``explore > 0`` the critic learns from a noisy behaviour rollout and the
    logged objective comes from a separate noise-free rollout of the policy
    on the same parameters.
    """
    policy, critic = init if init is not None else init_networks(env, seed)
    a_opt = Adam(lr_actor, decay=decay)
    c_opt = Adam(lr_critic, decay=1.0)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 7]))
    curves = []
    t0 = time.perf_counter()
    eval_rng = np.random.default_rng(np.random.SeedSequence([seed, 8]))
    for step, inputs in enumerate(batches):
        batch = env.rollout(policy, inputs, rng, explore=explore)
        greedy = env.rollout(policy, inputs, eval_rng) if explore > 0 else batch
        if step == 0 and env.reward_scale == 1.0 and env.reward_shift == 0.0:
            env.reward_shift = float(batch.rewards.mean())
            env.reward_scale = float(max(batch.rewards.std(), 1e-3 * abs(env.reward_shift), 1e-12))
        closs = np.nan
        for _ in range(critic_steps):
            critic, closs = critic_update(critic, c_opt, env, batch, policy if explore > 0 else None)
        c_opt.lr *= decay
        actor_lr = a_opt.lr
        policy = actor_update(policy, critic, a_opt, env, batch)
        row = {
            "step": step,
            "objective": greedy.objective,
            "behaviour_objective": batch.objective,
            "critic_loss": float(closs),
            "lr": actor_lr,
            "action_std": float((greedy.designs.std(axis=0) / env.bounds.cap_vector).mean()),
        }
        curves.append(row)
        if log is not None:
            log(row)
    return PolicyResult(policy, critic, curves, time.perf_counter() - t0)


def evaluate_policy(
    env: SensorEnv,
    policy: NetParams,
    test_inputs: EpisodeInputs,
    n_random: int,
    seed: int = 0,
) -> List[dict]:
    """Policy D-optimality per test parameter and the share of random designs it beats (strictly)."""
    if n_random < 0:
        raise ContractError("n_random must be non-negative")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 11]))
    rows = []
    for i in range(len(test_inputs)):
        one = test_inputs.subset([i])
        pol = env.rollout(policy, one, rng)
        dopt = float(pol.rewards[0])
        row = {"parameter": i, "d_optimality": dopt, "random_mean": None, "win_rate": None}
        if n_random > 0:
            designs = random_designs(env.bounds, rng, n_random)
            rep = one.subset(np.zeros(n_random, dtype=int))
            rand = env.rollout(None, rep, rng, designs=designs).rewards
            row["random_mean"] = float(rand.mean())
            row["win_rate"] = float(np.mean(dopt > rand))
        rows.append(row)
    return rows


def write_csv(path, rows: Sequence[dict]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        if not rows:
            fh.write("")
            return path
        w = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        w.writeheader()
        for r in rows:
            w.writerow({k: ("" if v is None else v) for k, v in r.items()})
    return path
