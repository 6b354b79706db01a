"""Matern-class Gaussian prior with covariance ``A^{-1} M A^{-1}`` (alpha = 2)."""
from __future__ import annotations

import hashlib
from functools import cached_property
from typing import Optional

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import ContractError, NumericFailure
from .forward import Grid
from .linalg import LinearMap, cg_solve

__all__ = ["PriorOperator", "robin_coefficient"]


def robin_coefficient(gamma: float, delta: float) -> float:
    """Boundary-artifact-mitigating Robin coefficient ``gamma sqrt(delta/gamma) / 1.42``."""
    return gamma * np.sqrt(delta / gamma) / 1.42


class PriorOperator:
    """Discretised ``-gamma Lap + delta I`` with Robin boundary and its Gaussian measure.

    ``A`` is the assembled (weak-form) matrix; :meth:`apply_A` returns the
    nodal operator action ``M^{-1} A x``.
    """

    def __init__(
        self,
        grid: Grid,
        gamma: float = 0.1,
        delta: float = 0.8,
        mean=3.0,
        robin_beta: Optional[float] = None,
        solver: str = "direct",
    ):
        if gamma <= 0 or delta <= 0:
            raise ContractError("gamma and delta must be positive")
        if solver not in ("direct", "cg"):
            raise ContractError("solver must be 'direct' or 'cg'")
        self.grid = grid
        self.gamma, self.delta = float(gamma), float(delta)
        self.robin_beta = robin_coefficient(gamma, delta) if robin_beta is None else float(robin_beta)
        if self.robin_beta < 0:
            raise ContractError("robin_beta must be non-negative")
        self.mean = np.broadcast_to(np.asarray(mean, dtype=float), (grid.n,)).copy()
        self.solver = solver
        self.w = grid.weights
        self.sqrt_w = np.sqrt(self.w)
        self.A = (
            self.gamma * grid.stiffness
            + sp.diags(self.delta * self.w + self.robin_beta * grid.boundary_weights)
        ).tocsc()

    @cached_property
    def _lu(self):
        return spla.splu(self.A)

    def solve_A(self, b: np.ndarray, rel_tol: float = 1e-12) -> np.ndarray:
        b = np.asarray(b, dtype=float)
        if self.solver == "direct":
            x = self._lu.solve(b)
        else:
            cols = b.reshape(b.shape[0], -1)
            out = np.empty_like(cols)
            for j in range(cols.shape[1]):
                res = cg_solve(self.A, cols[:, j], rel_tol=rel_tol)
                if not res.converged:
                    raise NumericFailure("CG failed to converge on the prior operator")
                out[:, j] = res.x
            x = out.reshape(b.shape)
        if not np.all(np.isfinite(x)):
            raise NumericFailure("non-finite prior solve")
        return x

    def _w(self, x):
        return self.w if np.ndim(x) == 1 else self.w[:, None]

    # -- operator actions -------------------------------------------------
    def apply_A(self, x: np.ndarray) -> np.ndarray:
        """Nodal action of the elliptic operator, ``M^{-1} A x``."""
        return (self.A @ x) / self._w(x)

    def apply_prec(self, x: np.ndarray) -> np.ndarray:
        """Prior precision ``A M^{-1} A x``."""
        return self.A @ ((self.A @ x) / self._w(x))

    def apply_cov(self, x: np.ndarray, rel_tol: float = 1e-12) -> np.ndarray:
        """Prior covariance ``A^{-1} M A^{-1} x``."""
        return self.solve_A(self._w(x) * self.solve_A(x, rel_tol), rel_tol)

    def apply_sqrt(self, xi: np.ndarray) -> np.ndarray:
        """Covariance factor ``A^{-1} M^{1/2} xi`` (so ``S S^T = C``)."""
        sw = self.sqrt_w if np.ndim(xi) == 1 else self.sqrt_w[:, None]
        return self.solve_A(sw * xi)

    @property
    def cov_map(self) -> LinearMap:
        return LinearMap(self.grid.n, self.grid.n, self.apply_cov)

    @property
    def prec_map(self) -> LinearMap:
        return LinearMap(self.grid.n, self.grid.n, self.apply_prec)

    def dense_A(self) -> np.ndarray:
        return self.A.toarray()

    def dense_cov(self) -> np.ndarray:
        Ainv = np.linalg.inv(self.dense_A())
        return Ainv @ np.diag(self.w) @ Ainv

    # -- sampling and statistics -------------------------------------------
    def sample(self, rng_seed=None, n_samples: Optional[int] = None, rng=None) -> np.ndarray:
        """Draw ``m_prior + A^{-1} M^{1/2} xi``; shape ``(n,)`` or ``(n_samples, n)``."""
        rng = np.random.default_rng(rng_seed) if rng is None else rng
        if n_samples is None:
            return self.mean + self.apply_sqrt(rng.standard_normal(self.grid.n))
        xi = rng.standard_normal((n_samples, self.grid.n))
        return self.mean[None, :] + self.apply_sqrt(xi.T).T

    def pointwise_variance(self, nodes=None) -> np.ndarray:
        """Diagonal of the covariance at selected nodes (all nodes by default)."""
        nodes = np.arange(self.grid.n) if nodes is None else np.asarray(nodes, dtype=int)
        E = np.zeros((self.grid.n, nodes.size))
        E[nodes, np.arange(nodes.size)] = 1.0
        X = self.solve_A(E)
        return np.sum(self.w[:, None] * X**2, axis=0)

    def cost(self, m: np.ndarray) -> float:
        """Regularisation ``1/2 ||m - m_prior||^2_{C^{-1}}``."""
        d = m - self.mean
        Ad = self.A @ d
        return 0.5 * float(Ad @ (Ad / self.w))

    # -- reduced coordinates ------------------------------------------------
    def _psi(self, bases) -> np.ndarray:
        psi = getattr(bases, "psi_m", bases)
        psi = np.asarray(psi, dtype=float)
        G = psi.T @ self.apply_prec(psi)
        if np.max(np.abs(G - np.eye(psi.shape[1]))) > 1e-6:
            raise ContractError("parameter basis is not orthonormal in the prior-precision metric")
        return psi

    def whiten(self, bases, m: np.ndarray) -> np.ndarray:
        """Reduced coordinates ``Psi^T C^{-1} (m - m_prior)``."""
        psi = self._psi(bases)
        d = m - (self.mean if np.ndim(m) == 1 else self.mean[:, None])
        return psi.T @ self.apply_prec(d)

    def unwhiten(self, bases, beta: np.ndarray) -> np.ndarray:
        psi = self._psi(bases)
        out = psi @ beta
        return out + (self.mean if out.ndim == 1 else self.mean[:, None])

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(np.array([self.gamma, self.delta, self.robin_beta]).tobytes())
        h.update(self.mean.tobytes())
        h.update(repr(self.grid.describe()).encode())
        return h.hexdigest()[:16]
