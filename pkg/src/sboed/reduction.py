"""Parameter and state dimension reduction.

The parameter basis spans the dominant active subspace of the expected
cumulative Jacobian operator (in the prior-precision metric); the state basis
comes from a centred snapshot SVD.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import ContractError
from .forward import AdvectionDiffusion
from .io import array_hash, json_hash, load_array, save_array
from .linalg import LinearMap, randomized_gevp, truncated_svd
from .prior import PriorOperator

__all__ = [
    "ReducedBases",
    "ProjectedSample",
    "active_subspace",
    "pca_states",
    "retained_variance",
    "project_training_targets",
    "parameter_projection_error",
    "state_projection_error",
]


@dataclass
class ReducedBases:
    psi_m: np.ndarray  # (n, r_m), C^{-1}-orthonormal
    psi_u: np.ndarray  # (n, r_u), orthonormal
    u_bar: np.ndarray
    as_eigvals: np.ndarray
    pca_singulars: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.psi_m.shape[0] != self.psi_u.shape[0] or self.u_bar.shape != (self.psi_u.shape[0],):
            raise ContractError("basis row counts must match the field dimension")
        if np.any(np.diff(self.as_eigvals) > 1e-12 * max(1.0, abs(self.as_eigvals[0]) if self.as_eigvals.size else 1.0)):
            raise ContractError("active-subspace eigenvalues must be sorted descending")
        if np.any(np.diff(self.pca_singulars) > 0):
            raise ContractError("PCA singular values must be sorted descending")

    @property
    def r_m(self) -> int:
        return self.psi_m.shape[1]

    @property
    def r_u(self) -> int:
        return self.psi_u.shape[1]

    def check(self, prior: PriorOperator, tol_m: float = 1e-6, tol_u: float = 1e-8):
        Gm = self.psi_m.T @ prior.apply_prec(self.psi_m)
        Gu = self.psi_u.T @ self.psi_u
        if np.abs(Gm - np.eye(self.r_m)).max() > tol_m:
            raise ContractError("parameter basis lost prior-precision orthonormality")
        if np.abs(Gu - np.eye(self.r_u)).max() > tol_u:
            raise ContractError("state basis lost orthonormality")

    def fingerprint(self) -> str:
        return json_hash([array_hash(self.psi_m), array_hash(self.psi_u), array_hash(self.u_bar)])[:16]

    def save(self, directory, **extra) -> dict:
        d = Path(directory)
        meta = {"r_m": self.r_m, "r_u": self.r_u, **self.meta, **extra}
        hashes = {
            name: save_array(d / name, getattr(self, name), **meta)
            for name in ("psi_m", "psi_u", "u_bar", "as_eigvals", "pca_singulars")
        }
        return {"files": hashes, "fingerprint": self.fingerprint(), **meta}

    @classmethod
    def load(cls, directory, grid_hash: Optional[str] = None, prior_hash: Optional[str] = None) -> "ReducedBases":
        d = Path(directory)
        arrays, meta = {}, {}
        for name in ("psi_m", "psi_u", "u_bar", "as_eigvals", "pca_singulars"):
            arrays[name], meta = load_array(d / name)
        for key, want in (("grid_hash", grid_hash), ("prior_hash", prior_hash)):
            if want is not None and meta.get(key) != want:
                raise ContractError(f"bases were built for a different {key.split('_')[0]} ({meta.get(key)} != {want})")
        keep = {k: v for k, v in meta.items() if k not in ("shape", "dtype", "sha256", "r_m", "r_u")}
        return cls(meta=keep, **arrays)


@dataclass
class ProjectedSample:
    """Reduced training targets of one trajectory (``k = 1..K`` along axis 0)."""

    beta_m: np.ndarray  # (r_m,)
    beta_u0: np.ndarray  # (r_u,)
    beta_u: np.ndarray  # (K, r_u)
    beta_J: np.ndarray  # (K, r_u, r_m)


def _cumulative_jacobian_operator(model: AdvectionDiffusion, samples, steps):
    """``x -> mean_i sum_k J_ik^T M J_ik x`` in the Euclidean (dual) convention."""
    w = model.w
    kmax = max(steps)
    n = model.grid.n
    samples = [np.asarray(s, dtype=float) for s in samples]

    def apply(x):
        out = np.zeros_like(x)
        wcol = w if x.ndim == 1 else w[:, None]
        for m in samples:
            uhat = model.solve_sensitivity(m, x, kmax).states
            lam0 = model.adjoint_dual({k: wcol * uhat[k] for k in steps})
            out += model.initial_derivative_transpose(m, lam0)
        return out / len(samples)

    return LinearMap(n, n, apply)


def active_subspace(
    model: AdvectionDiffusion,
    prior: PriorOperator,
    samples: Sequence[np.ndarray],
    r_m: int,
    steps: Optional[Sequence[int]] = None,
    seed: int = 0,
    oversample: int = 5,
):
    """Dominant generalized eigenpairs of the expected cumulative Jacobian operator.

    Returns ``(psi_m, eigenvalues)`` with ``psi_m^T C^{-1} psi_m = I``.
    """
    if len(samples) == 0:
        raise ContractError("active subspace needs at least one prior sample")
    if not 1 <= r_m <= prior.grid.n - oversample:
        raise ContractError(f"r_m = {r_m} out of range")
    steps = list(range(1, model.cfg.n_steps + 1)) if steps is None else [int(s) for s in steps]
    H = _cumulative_jacobian_operator(model, samples, steps)
    eig = randomized_gevp(H, prior.cov_map, r_m, oversample, seed, prior_prec=prior.prec_map)
    return eig.vectors, np.maximum(eig.values, 0.0)


def pca_states(snapshots: Sequence[np.ndarray], r_u: int):
    """Centred snapshot SVD.

    ``snapshots`` is a list of arrays of shape ``(n_times, n)``; returns
    ``(psi_u, u_bar, singular_values)``.  All singular values are returned
    so retained-variance fractions can be reported.
    """
    if len(snapshots) < 2:
        raise ContractError("PCA needs at least two trajectories")
    X = np.concatenate([np.atleast_2d(s) for s in snapshots], axis=0).T  # (n, n_snap)
    if r_u > min(X.shape):
        raise ContractError(f"r_u = {r_u} exceeds the snapshot count {X.shape[1]}")
    u_bar = X.mean(axis=1)
    Xc = X - u_bar[:, None]
    full = truncated_svd(Xc, min(Xc.shape))
    return full.left[:, :r_u].copy(), u_bar, full.singular


def retained_variance(singulars: np.ndarray, r: int) -> float:
    s2 = np.asarray(singulars) ** 2
    total = s2.sum()
    return float(s2[:r].sum() / total) if total > 0 else 1.0


def project_training_targets(
    model: AdvectionDiffusion,
    prior: PriorOperator,
    bases: ReducedBases,
    m: np.ndarray,
    states: Optional[np.ndarray] = None,
) -> ProjectedSample:
    """Project parameter, states and the parameter-to-state Jacobians onto the bases."""
    if states is None:
        states = model.solve_forward(m).states
    beta_m = prior.whiten(bases, m)
    centred = states - bases.u_bar[None, :]
    beta_all = centred @ bases.psi_u
    # r_m sensitivity solves in one block, then left projection
    dU = model.solve_sensitivity(m, bases.psi_m).states[1:]  # (K, n, r_m)
    beta_J = np.einsum("nr,knj->krj", bases.psi_u, dU)
    return ProjectedSample(beta_m, beta_all[0], beta_all[1:], beta_J)


def parameter_projection_error(prior: PriorOperator, bases, m: np.ndarray) -> float:
    d = m - prior.mean
    proj = bases.psi_m @ prior.whiten(bases, m)
    r = d - proj
    return float(np.sqrt((r @ prior.apply_prec(r)) / (d @ prior.apply_prec(d))))


def state_projection_error(bases: ReducedBases, u: np.ndarray) -> float:
    c = np.atleast_2d(u) - bases.u_bar
    r = c - (c @ bases.psi_u) @ bases.psi_u.T
    return float(np.linalg.norm(r) / np.linalg.norm(c))
