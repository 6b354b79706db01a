"""Derivative-informed latent attention surrogate in reduced coordinates.

The network maps ``(beta_m, beta_u0)`` to two latent trajectories of length
``K``: the state chain ``beta_u`` and the auxiliary chain ``beta_J`` whose
derivative with respect to ``beta_m`` approximates the reduced Jacobian
``Psi_u^T (du_k/dm) Psi_m``.
"""
from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field
from functools import partial
from typing import Callable, Dict, List, Optional, Sequence

import jax
import jax.numpy as jnp
import numpy as np
import scipy.optimize

from .errors import ContractError, NumericFailure
from .forward import observation_matrix
from .laplace import ExperimentHistory, NoiseModel, d_optimality
from .linalg import LinearMap, dense_sym_eig
from .nn import (
    Adam,
    Layout,
    NetParams,
    attention_block,
    attention_layout,
    causal_mask,
    init_params,
    layer_norm,
    load_checkpoint,
    save_checkpoint,
)
from .reduction import ReducedBases

__all__ = [
    "LanoConfig",
    "LanoOutput",
    "TrainingSet",
    "TrainResult",
    "Surrogate",
    "lano_layout",
    "linear_layout",
    "lano_forward",
    "lano_jacobian",
    "lano_train",
    "decode_state",
    "decode_jacobian",
    "reduced_observations",
    "surrogate_map",
    "reduced_gn_eigs",
    "efficient_reward",
]


@dataclass(frozen=True)
class LanoConfig:
    r_m: int
    r_u: int
    d_z: int = 48
    d_a: int = 24
    K: int = 10
    hidden_decoder: int = 32
    ffn_hidden: int = 96
    lambda_jac: float = 1.0
    state_scale: float = 1.0  # fixed scalar; reduced states enter and leave the network divided by it
    kind: str = "lano"  # or "linear" for the strictly linear oracle network

    def __post_init__(self):
        if self.d_a > self.d_z or self.K < 1 or min(self.r_m, self.r_u, self.d_z, self.d_a) < 1:
            raise ContractError("inconsistent surrogate dimensions")
        if self.state_scale <= 0:
            raise ContractError("state_scale must be positive")
        if self.lambda_jac < 0:
            raise ContractError("lambda_jac must be non-negative")
        if self.kind not in ("lano", "linear"):
            raise ContractError(f"unknown surrogate kind {self.kind!r}")


@dataclass
class LanoOutput:
    beta_u: np.ndarray  # (K, r_u)
    beta_J: np.ndarray  # (K, r_u)
    beta_J_jvp: Optional[np.ndarray] = None  # (K, r_u, n_tangents)


# -- architecture ---------------------------------------------------------------
def lano_layout(cfg: LanoConfig) -> Layout:
    K, dz = cfg.K, cfg.d_z
    lay = Layout()
    lay.add("enc.Wm", (cfg.r_m, dz), "xavier").add("enc.bm", (dz,))
    lay.add("enc.Wu0", (K, cfg.r_u, dz), "xavier").add("enc.bu0", (K, dz))
    lay.add("enc.Wz", (K, 2 * dz, dz), "xavier").add("enc.bz", (K, dz))
    lay.extend(attention_layout("attn", dz, cfg.d_a))
    lay.add("proj.W", (cfg.d_a, dz), "xavier")
    lay.add("ln1.g", (dz,), "ones").add("ln1.b", (dz,))
    lay.add("ffn.W1", (dz, cfg.ffn_hidden), "he").add("ffn.b1", (cfg.ffn_hidden,))
    lay.add("ffn.W2", (cfg.ffn_hidden, dz), "xavier").add("ffn.b2", (dz,))
    lay.add("ln2.g", (dz,), "ones").add("ln2.b", (dz,))
    for br in ("dyn_u", "dyn_J"):
        lay.add(f"{br}.W1", (K, dz, cfg.hidden_decoder), "he").add(f"{br}.b1", (K, cfg.hidden_decoder))
        lay.add(f"{br}.W2", (K, cfg.hidden_decoder, cfg.r_u), "xavier").add(f"{br}.b2", (K, cfg.r_u))
    return lay


def linear_layout(cfg: LanoConfig) -> Layout:
    K = cfg.K
    lay = Layout()
    lay.add("U", (cfg.r_m, cfg.d_z), "xavier")
    lay.add("Vu", (K, cfg.d_z, cfg.r_u), "xavier").add("Pu", (K, cfg.r_u, cfg.r_u), "xavier").add("bu", (K, cfg.r_u))
    lay.add("VJ", (K, cfg.d_z, cfg.r_u), "xavier").add("bJ", (K, cfg.r_u))
    return lay


def sinusoidal_embedding(K: int, d: int) -> np.ndarray:
    pos = np.arange(K)[:, None]
    i = np.arange(d)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


def _lano_features(p, beta_m, beta_u0, cfg: LanoConfig):
    a = beta_m @ p["enc.Wm"] + p["enc.bm"]
    c = jnp.einsum("r,krd->kd", beta_u0, p["enc.Wu0"]) + p["enc.bu0"]
    cat = jnp.concatenate([jnp.broadcast_to(a, c.shape), c], axis=-1)
    Z = jnp.tanh(jnp.einsum("kc,kcd->kd", cat, p["enc.Wz"]) + p["enc.bz"])
    Z = Z + sinusoidal_embedding(cfg.K, cfg.d_z)
    A = attention_block(p, "attn", Z, causal_mask(cfg.K))
    H = layer_norm(Z + A @ p["proj.W"], p["ln1.g"], p["ln1.b"])
    F = jax.nn.elu(H @ p["ffn.W1"] + p["ffn.b1"]) @ p["ffn.W2"] + p["ffn.b2"]
    return layer_norm(H + F, p["ln2.g"], p["ln2.b"])


def _step_mlp(p, name, L):
    h = jax.nn.elu(jnp.einsum("kd,kdh->kh", L, p[name + ".W1"]) + p[name + ".b1"])
    return jnp.einsum("kh,khr->kr", h, p[name + ".W2"]) + p[name + ".b2"]


def _apply_lano(p, beta_m, beta_u0, cfg: LanoConfig):
    L = _lano_features(p, beta_m, beta_u0, cfg)
    bu = beta_u0 + jnp.cumsum(_step_mlp(p, "dyn_u", L), axis=0)
    bJ = beta_u0 + jnp.cumsum(_step_mlp(p, "dyn_J", L), axis=0)
    return bu, bJ


def _apply_linear(p, beta_m, beta_u0, cfg: LanoConfig):
    h = beta_m @ p["U"]
    bu = beta_u0 + jnp.einsum("d,kdr->kr", h, p["Vu"]) + jnp.einsum("s,ksr->kr", beta_u0, p["Pu"]) + p["bu"]
    bJ = beta_u0 + jnp.einsum("d,kdr->kr", h, p["VJ"]) + p["bJ"]
    return bu, bJ


def _apply(p, beta_m, beta_u0, cfg: LanoConfig):
    s = cfg.state_scale
    bu, bJ = (_apply_lano if cfg.kind == "lano" else _apply_linear)(p, beta_m, beta_u0 / s, cfg)
    return s * bu, s * bJ


def _jac_J(p, beta_m, beta_u0, cfg):
    """``d beta_J / d beta_m`` with ``beta_u0`` held fixed, shape ``(K, r_u, r_m)``."""
    return jax.jacfwd(lambda b: _apply(p, b, beta_u0, cfg)[1])(beta_m)


def layout_for(cfg: LanoConfig) -> Layout:
    return lano_layout(cfg) if cfg.kind == "lano" else linear_layout(cfg)


def _check_inputs(cfg, beta_m, beta_u0):
    if np.shape(beta_m)[-1] != cfg.r_m or np.shape(beta_u0)[-1] != cfg.r_u:
        raise ContractError(f"surrogate expects beta_m of length {cfg.r_m} and beta_u0 of length {cfg.r_u}")


def lano_forward(params: NetParams, beta_m, beta_u0, cfg: LanoConfig) -> LanoOutput:
    _check_inputs(cfg, beta_m, beta_u0)
    bu, bJ = _forward_jit(params.tree(), jnp.asarray(beta_m, float), jnp.asarray(beta_u0, float), cfg)
    return LanoOutput(np.asarray(bu), np.asarray(bJ))


def lano_jacobian(params: NetParams, beta_m, beta_u0, cfg: LanoConfig, tangents=None) -> np.ndarray:
    """Directional derivatives of ``beta_J`` along the columns of ``tangents`` (identity by default)."""
    _check_inputs(cfg, beta_m, beta_u0)
    tree = params.tree()
    bm = jnp.asarray(beta_m, float)
    b0 = jnp.asarray(beta_u0, float)
    if tangents is None:
        return np.asarray(_jacobian_jit(tree, bm, b0, cfg))
    T = np.atleast_2d(np.asarray(tangents, float))
    if T.shape[0] != cfg.r_m:
        raise ContractError("tangents must have r_m rows")
    f = lambda b: _apply(tree, b, b0, cfg)[1]  # noqa: E731
    cols = [jax.jvp(f, (bm,), (jnp.asarray(T[:, j]),))[1] for j in range(T.shape[1])]
    return np.stack([np.asarray(c) for c in cols], axis=-1)


@partial(jax.jit, static_argnums=3)
def _forward_jit(p, beta_m, beta_u0, cfg):
    return _apply(p, beta_m, beta_u0, cfg)


@partial(jax.jit, static_argnums=3)
def _jacobian_jit(p, beta_m, beta_u0, cfg):
    return _jac_J(p, beta_m, beta_u0, cfg)


@partial(jax.jit, static_argnums=3)
def _batch_forward(p, BM, B0, cfg):
    return jax.vmap(lambda a, b: _apply(p, a, b, cfg))(BM, B0)


@partial(jax.jit, static_argnums=3)
def _batch_jacobian(p, BM, B0, cfg):
    return jax.vmap(lambda a, b: _jac_J(p, a, b, cfg))(BM, B0)


# -- training ---------------------------------------------------------------------
@dataclass
class TrainingSet:
    """Stacked reduced targets; ``state_scale`` gives a natural network scale."""

    beta_m: np.ndarray  # (n, r_m)
    beta_u0: np.ndarray  # (n, r_u)
    beta_u: np.ndarray  # (n, K, r_u)
    beta_J: np.ndarray  # (n, K, r_u, r_m)

    def __len__(self):
        return self.beta_m.shape[0]

    def subset(self, idx) -> "TrainingSet":
        return TrainingSet(self.beta_m[idx], self.beta_u0[idx], self.beta_u[idx], self.beta_J[idx])

    def state_scale(self) -> float:
        return float(np.sqrt(np.mean(self.beta_u**2)))

    @classmethod
    def stack(cls, samples) -> "TrainingSet":
        return cls(
            np.stack([s.beta_m for s in samples]),
            np.stack([s.beta_u0 for s in samples]),
            np.stack([s.beta_u for s in samples]),
            np.stack([s.beta_J for s in samples]),
        )


def _loss_terms(p, batch, cfg):
    bm, b0, tu, tJ = batch
    bu, _ = jax.vmap(lambda a, b: _apply(p, a, b, cfg))(bm, b0)
    J = jax.vmap(lambda a, b: _jac_J(p, a, b, cfg))(bm, b0)
    state = jnp.mean(jnp.sum((tu - bu) ** 2, axis=(1, 2)))
    jac = jnp.mean(jnp.sum((tJ - J) ** 2, axis=(1, 2, 3)))
    return state, jac


@partial(jax.jit, static_argnums=(2, 3))
def _loss_and_grad(flat, batch, cfg, layout_key):
    lay = _LAYOUTS[layout_key]

    def total(f):
        s, j = _loss_terms(lay.unpack(f), batch, cfg)
        return s + cfg.lambda_jac * j, (s, j)

    (val, parts), g = jax.value_and_grad(total, has_aux=True)(flat)
    return val, parts, g


_LAYOUTS: Dict[str, Layout] = {}


def _register_layout(cfg: LanoConfig) -> str:
    key = repr(cfg)
    _LAYOUTS.setdefault(key, layout_for(cfg))
    return key


def loss_decomposition(params: NetParams, data: TrainingSet, cfg: LanoConfig) -> dict:
    """State and Jacobian mismatch terms; ``total = state + lambda * jacobian``."""
    s, j = _loss_terms_jit(params.tree(), _as_batch(data), cfg)
    s, j = float(s), float(j)
    return {"state": s, "jacobian": j, "lambda_jacobian": cfg.lambda_jac * j, "total": s + cfg.lambda_jac * j}


@partial(jax.jit, static_argnums=2)
def _loss_terms_jit(p, batch, cfg):
    return _loss_terms(p, batch, cfg)


def _as_batch(d: TrainingSet):
    return tuple(jnp.asarray(a) for a in (d.beta_m, d.beta_u0, d.beta_u, d.beta_J))


@dataclass
class TrainResult:
    params: NetParams
    curves: List[dict] = field(default_factory=list)
    best_epoch: int = -1
    seconds: float = 0.0


def lano_train(
    train: TrainingSet,
    valid: Optional[TrainingSet],
    cfg: LanoConfig,
    epochs: int = 200,
    batch: int = 16,
    lr: float = 1e-3,
    seed: int = 0,
    patience: int = 10,
    init: Optional[NetParams] = None,
    log: Optional[Callable[[dict], None]] = None,
) -> TrainResult:
    """Adam on the derivative-informed loss with plateau halving.

    The learning rate is halved when the validation loss has not improved
    for ``patience`` epochs; the best-validation parameters are returned.
    """
    if len(train) == 0:
        raise ContractError("empty training set")
    key = _register_layout(cfg)
    params = init if init is not None else init_params(_LAYOUTS[key], seed)
    flat = jnp.asarray(params.flat)
    opt = Adam(lr)
    rng = np.random.default_rng(seed)
    n = len(train)
    valid = valid if valid is not None and len(valid) else train
    vbatch = _as_batch(valid)
    best, best_flat, best_epoch, stale = np.inf, np.asarray(flat), -1, 0
    curves = []
    t0 = time.perf_counter()
    for epoch in range(epochs):
        order = rng.permutation(n)
        tot = st = jt = 0.0
        for start in range(0, n, batch):
            idx = order[start : start + batch]
            b = _as_batch(train.subset(idx))
            val, (s, j), g = _loss_and_grad(flat, b, cfg, key)
            if not np.isfinite(float(val)):
                raise NumericFailure(f"surrogate loss became non-finite at epoch {epoch}")
            flat = jnp.asarray(opt.step(np.asarray(flat), np.asarray(g)))
            w = len(idx) / n
            tot, st, jt = tot + w * float(val), st + w * float(s), jt + w * float(j)
        vs, vj = _loss_terms_jit(_LAYOUTS[key].unpack(flat), vbatch, cfg)
        vloss = float(vs) + cfg.lambda_jac * float(vj)
        if vloss < best:
            best, best_flat, best_epoch, stale = vloss, np.asarray(flat), epoch, 0
        else:
            stale += 1
            if stale >= patience:
                opt.lr *= 0.5
                stale = 0
        row = {"epoch": epoch, "train_loss": tot, "train_state": st, "train_jacobian": jt, "valid_loss": vloss, "lr": opt.lr}
        curves.append(row)
        if log is not None:
            log(row)
    return TrainResult(NetParams(best_flat, _LAYOUTS[key]), curves, best_epoch, time.perf_counter() - t0)


# -- decoding ---------------------------------------------------------------------
def decode_state(bases: ReducedBases, beta_u) -> np.ndarray:
    """``u_bar + Psi_u beta_u`` (rows of a ``(K, r_u)`` array decode to ``(K, n)``)."""
    beta_u = np.asarray(beta_u, float)
    return bases.u_bar + beta_u @ bases.psi_u.T


def decode_jacobian(bases: ReducedBases, prior, reduced_jac, transpose: bool = False) -> LinearMap:
    """Matrix-free ``Psi_u (d beta_J / d beta_m) Psi_m^T C^{-1}`` or its transpose."""
    Jr = np.asarray(reduced_jac, float)
    if Jr.shape != (bases.r_u, bases.r_m):
        raise ContractError(f"reduced Jacobian must have shape {(bases.r_u, bases.r_m)}")
    n = bases.psi_u.shape[0]
    if transpose:
        return LinearMap(n, n, lambda v: prior.apply_prec(bases.psi_m @ (Jr.T @ (bases.psi_u.T @ v))))
    return LinearMap(n, n, lambda x: bases.psi_u @ (Jr @ (bases.psi_m.T @ prior.apply_prec(x))))


# -- bundled surrogate --------------------------------------------------------------
@dataclass
class Surrogate:
    """Trained network together with the bases and prior mean it was built on."""

    params: NetParams
    cfg: LanoConfig
    bases: ReducedBases
    prior_mean: np.ndarray

    def beta_u0(self, beta_m) -> np.ndarray:
        """Reduced initial state ``Psi_u^T ((m_prior + Psi_m beta)^2 - u_bar)``."""
        m = self.prior_mean + np.asarray(beta_m) @ self.bases.psi_m.T
        return (m**2 - self.bases.u_bar) @ self.bases.psi_u

    def forward(self, beta_m, beta_u0=None) -> LanoOutput:
        b0 = self.beta_u0(beta_m) if beta_u0 is None else beta_u0
        return lano_forward(self.params, beta_m, b0, self.cfg)

    def jacobian(self, beta_m, beta_u0=None) -> np.ndarray:
        b0 = self.beta_u0(beta_m) if beta_u0 is None else beta_u0
        return lano_jacobian(self.params, beta_m, b0, self.cfg)

    def batch(self, BM, B0=None):
        """States ``(n, K, r_u)`` and reduced Jacobians ``(n, K, r_u, r_m)`` for many inputs."""
        BM = np.atleast_2d(BM)
        B0 = self.beta_u0(BM) if B0 is None else np.atleast_2d(B0)
        tree = self.params.tree()
        bu, _ = _batch_forward(tree, jnp.asarray(BM), jnp.asarray(B0), self.cfg)
        J = _batch_jacobian(tree, jnp.asarray(BM), jnp.asarray(B0), self.cfg)
        return np.asarray(bu), np.asarray(J)

    def save(self, stem, **meta):
        return save_checkpoint(
            stem,
            self.params,
            config=asdict(self.cfg),
            bases_fingerprint=self.bases.fingerprint(),
            **meta,
        )

    @classmethod
    def load(cls, stem, bases: ReducedBases, prior_mean) -> "Surrogate":
        params, _, desc = load_checkpoint(stem)
        if desc.get("bases_fingerprint") != bases.fingerprint():
            raise ContractError("surrogate checkpoint was trained on different reduced bases")
        cfg = LanoConfig(**desc["config"])
        return cls(params, cfg, bases, np.asarray(prior_mean))


# -- accelerated inference ------------------------------------------------------------
@dataclass
class ReducedObservations:
    """Per-observation projected operators ``B Psi_u``, offsets ``B u_bar`` and data."""

    seq_index: np.ndarray  # (n_obs,) position in the surrogate sequence (step - 1)
    P: np.ndarray  # (n_obs, d_y, r_u)
    c: np.ndarray  # (n_obs, d_y)
    y: np.ndarray  # (n_obs, d_y)
    stage: np.ndarray  # (n_obs,)


def reduced_observations(bases: ReducedBases, grid, dt: float, hist: ExperimentHistory) -> ReducedObservations:
    seq, P, c, y, stage = [], [], [], [], []
    cache = {}
    for n, k, t, coords, obs in hist.entries():
        if n not in cache:
            B = observation_matrix(grid, coords)
            cache[n] = (np.asarray(B @ bases.psi_u), B @ bases.u_bar)
        step = int(round(t / dt))
        seq.append(step - 1)
        P.append(cache[n][0])
        c.append(cache[n][1])
        y.append(obs)
        stage.append(n)
    if not seq:
        return ReducedObservations(np.zeros(0, int), np.zeros((0, 0, bases.r_u)), np.zeros((0, 0)), np.zeros((0, 0)), np.zeros(0, int))
    return ReducedObservations(np.array(seq), np.stack(P), np.stack(c), np.stack(y), np.array(stage))


@dataclass
class MapEstimate:
    beta: np.ndarray
    objective: float
    objective_at_zero: float
    n_iter: int
    success: bool
    message: str


def surrogate_map(
    sur: Surrogate,
    obs: ReducedObservations,
    noise: NoiseModel,
    beta_u0=None,
    max_iter: int = 200,
    history: int = 200,
    gtol: float = 1e-10,
) -> MapEstimate:
    """Minimise the reduced misfit plus ``1/2 |beta|^2`` with L-BFGS from zero.

    When ``beta_u0`` is given it is held fixed; otherwise it follows
    ``beta_m`` through the squared initial condition.
    """
    r_m = sur.cfg.r_m
    if obs.seq_index.size == 0:
        return MapEstimate(np.zeros(r_m), 0.0, 0.0, 0, True, "no observations")
    tree = sur.params.tree()
    cfg = sur.cfg
    P, c, y = jnp.asarray(obs.P), jnp.asarray(obs.c), jnp.asarray(obs.y)
    seq = jnp.asarray(obs.seq_index)
    s2 = noise.sigma**2
    psi_m, psi_u = jnp.asarray(sur.bases.psi_m), jnp.asarray(sur.bases.psi_u)
    ubar, mp = jnp.asarray(sur.bases.u_bar), jnp.asarray(sur.prior_mean)
    fixed = None if beta_u0 is None else jnp.asarray(beta_u0, float)

    def objective(beta):
        b0 = fixed if fixed is not None else ((mp + psi_m @ beta) ** 2 - ubar) @ psi_u
        bu, _ = _apply(tree, beta, b0, cfg)
        pred = jnp.einsum("oyr,or->oy", P, bu[seq]) + c
        return 0.5 * jnp.sum((y - pred) ** 2) / s2 + 0.5 * jnp.dot(beta, beta)

    vg = jax.jit(jax.value_and_grad(objective))

    def fun(b):
        v, g = vg(jnp.asarray(b))
        return float(v), np.asarray(g, dtype=float)

    f0 = fun(np.zeros(r_m))[0]
    res = scipy.optimize.minimize(
        fun,
        np.zeros(r_m),
        jac=True,
        method="L-BFGS-B",
        options={"maxiter": max_iter, "maxcor": history, "gtol": gtol, "ftol": 1e-15},
    )
    beta, fval = res.x, float(res.fun)
    if fval > f0:  # descent guard
        beta, fval = np.zeros(r_m), f0
    return MapEstimate(beta, fval, f0, int(res.nit), bool(res.success), str(res.message))


def reduced_hessian(jacobians: np.ndarray, obs: ReducedObservations, noise: NoiseModel) -> np.ndarray:
    """``sum_obs J_k^T R J_k`` with ``R = (B Psi_u)^T (B Psi_u) / sigma^2``."""
    r_m = jacobians.shape[-1]
    H = np.zeros((r_m, r_m))
    for j, k in enumerate(obs.seq_index):
        BJ = obs.P[j] @ jacobians[k]
        H += BJ.T @ BJ
    H /= noise.sigma**2
    return 0.5 * (H + H.T)


def reduced_gn_eigs(sur: Surrogate, beta_point, obs: ReducedObservations, noise: NoiseModel, beta_u0=None) -> np.ndarray:
    """Eigenvalues of the reduced Gauss-Newton Hessian at ``beta_point``."""
    if obs.seq_index.size == 0:
        return np.zeros(sur.cfg.r_m)
    J = sur.jacobian(beta_point, beta_u0)
    return np.maximum(dense_sym_eig(reduced_hessian(J, obs, noise)).values, 0.0)


def efficient_reward(sur: Surrogate, beta_prior_sample, obs: ReducedObservations, noise: NoiseModel, beta_u0=None) -> float:
    """D-optimality at the generating prior sample (no MAP solve)."""
    return d_optimality(reduced_gn_eigs(sur, beta_prior_sample, obs, noise, beta_u0))
