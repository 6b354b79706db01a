"""Full-space Bayesian inversion with a low-rank Laplace posterior.

Gradients and Hessian actions are taken with respect to the nodal
coefficients of ``m`` (Euclidean/dual convention): the prior term is
``A M^{-1} A (m - m_prior)`` and data terms come from one adjoint sweep.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from .errors import ContractError
from .forward import AdvectionDiffusion, Grid, observation_matrix
from .linalg import EigPairs, LinearMap, cg_solve, randomized_gevp
from .prior import PriorOperator

__all__ = [
    "ExperimentHistory",
    "NoiseModel",
    "LowRankPosterior",
    "MapResult",
    "InverseProblem",
    "d_optimality",
    "incremental_rewards",
    "pointwise_variance",
    "EIG_TRUNCATION",
]

EIG_TRUNCATION = 1e-6


@dataclass
class NoiseModel:
    sigma: float

    def __post_init__(self):
        if not self.sigma > 0:
            raise ContractError("noise sigma must be positive")

    @classmethod
    def relative(cls, y_clean, fraction: float = 0.01) -> "NoiseModel":
        """sigma = fraction * max |y| over a noiseless trajectory."""
        ymax = float(np.max(np.abs(np.concatenate([np.ravel(y) for y in y_clean]))))
        if ymax == 0.0:
            raise ContractError("cannot derive a relative noise level from all-zero data")
        return cls(fraction * ymax)


@dataclass
class ExperimentHistory:
    """Designs, sensor positions and observations of the completed stages.

    ``obs_times[k-1]`` is the time of observation index ``k``;
    ``stage_sets[n]`` lists the 1-based indices observed in stage ``n``;
    ``observations[n]`` has shape ``(len(stage_sets[n]), n_sensors)``.
    """

    obs_times: List[float]
    stage_sets: List[List[int]]
    designs: List[np.ndarray] = field(default_factory=list)
    sensor_track: List[np.ndarray] = field(default_factory=list)
    observations: List[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        self.designs = [np.asarray(d, dtype=float) for d in self.designs]
        self.sensor_track = [np.atleast_2d(np.asarray(s, dtype=float)) for s in self.sensor_track]
        self.observations = [np.atleast_2d(np.asarray(y, dtype=float)) for y in self.observations]
        flat = [k for s in self.stage_sets for k in s]
        if flat != list(range(1, len(flat) + 1)):
            raise ContractError("stage sets must be disjoint, consecutive and start at index 1")
        if any(len(s) == 0 for s in self.stage_sets):
            raise ContractError("every stage needs at least one observation time")
        if len(flat) > len(self.obs_times):
            raise ContractError("stage sets reference more observation times than exist")
        n = len(self.observations)
        if not (len(self.designs) == len(self.sensor_track) == n) or n > len(self.stage_sets):
            raise ContractError("designs, sensor tracks and observations must cover the same stages")
        for s, y, pos in zip(self.stage_sets, self.observations, self.sensor_track):
            if y.shape != (len(s), pos.shape[0]):
                raise ContractError(f"observation block has shape {y.shape}, expected {(len(s), pos.shape[0])}")

    @property
    def n_stages(self) -> int:
        return len(self.observations)

    def truncated(self, n_stages: int) -> "ExperimentHistory":
        return ExperimentHistory(
            self.obs_times,
            self.stage_sets,
            self.designs[:n_stages],
            self.sensor_track[:n_stages],
            self.observations[:n_stages],
        )

    def entries(self):
        """Iterate ``(stage, k, time, sensor_coords, y)`` over recorded observations."""
        for n in range(self.n_stages):
            for row, k in enumerate(self.stage_sets[n]):
                yield n, k, self.obs_times[k - 1], self.sensor_track[n], self.observations[n][row]

    def to_json(self) -> str:
        return json.dumps(
            {
                "obs_times": list(map(float, self.obs_times)),
                "stage_sets": self.stage_sets,
                "designs": [d.tolist() for d in self.designs],
                "sensor_track": [s.tolist() for s in self.sensor_track],
                "observations": [y.tolist() for y in self.observations],
            }
        )

    @classmethod
    def from_json(cls, text: str) -> "ExperimentHistory":
        d = json.loads(text)
        return cls(d["obs_times"], d["stage_sets"], d["designs"], d["sensor_track"], d["observations"])


@dataclass
class LowRankPosterior:
    map_point: np.ndarray
    eig: EigPairs
    rank: int

    @property
    def values(self) -> np.ndarray:
        return self.eig.values

    def d_optimality(self) -> float:
        return d_optimality(self.values)


@dataclass
class MapResult:
    m: np.ndarray
    converged: bool
    n_iter: int
    grad_norm: float
    cost_history: list
    stalled: bool = False


def d_optimality(eig_values) -> float:
    """``1/2 sum log(1 + lam)``; eigenvalues below the truncation level are dropped."""
    lam = np.asarray(eig_values, dtype=float)
    if lam.size == 0:
        return 0.0
    if np.any(lam < -1e-10):
        raise ContractError(f"negative eigenvalue {lam.min():.3e} in D-optimality")
    lam = lam[lam >= EIG_TRUNCATION]
    return 0.5 * float(np.sum(np.log1p(lam)))


def incremental_rewards(stage_eigs: Sequence[Sequence[float]]) -> np.ndarray:
    """Per-stage D-optimality increments from the spectra after stages 1..N.

    The sum of the increments telescopes to the terminal value.
    """
    totals = np.array([0.0] + [d_optimality(v) for v in stage_eigs])
    return np.diff(totals)


class InverseProblem:
    """Data misfit + prior cost for one experiment history."""

    def __init__(self, model: AdvectionDiffusion, prior: PriorOperator, history: ExperimentHistory, noise: NoiseModel):
        self.model, self.prior, self.history, self.noise = model, prior, history, noise
        grid: Grid = model.grid
        self._terms = []  # (step, B, y)
        for n, k, t, coords, y in history.entries():
            self._terms.append((model.cfg.step_index(t), observation_matrix(grid, coords), y))
        self._max_step = max((s for s, _, _ in self._terms), default=0)

    @property
    def n(self) -> int:
        return self.model.grid.n

    def _forward(self, m):
        return self.model.propagate(self.model.initial_state(m), self._max_step).states

    def misfit(self, m: np.ndarray) -> float:
        if not self._terms:
            return 0.0
        u = self._forward(m)
        s2 = self.noise.sigma**2
        return 0.5 * sum(float(np.sum((B @ u[s] - y) ** 2)) for s, B, y in self._terms) / s2

    def cost(self, m: np.ndarray) -> float:
        return self.misfit(m) + self.prior.cost(m)

    def _residual_dual(self, m):
        """Adjoint state at t = 0 driven by the weighted residuals."""
        u = self._forward(m)
        s2 = self.noise.sigma**2
        src = {}
        for s, B, y in self._terms:
            v = B.T @ (B @ u[s] - y) / s2
            src[s] = src[s] + v if s in src else v
        return self.model.adjoint_dual(src)

    def gradient(self, m: np.ndarray) -> np.ndarray:
        """Prior term ``A M^{-1} A (m - m_prior)`` plus the adjoint data term."""
        g = self.prior.apply_prec(m - self.prior.mean)
        if self._terms:
            g = g + self.model.initial_derivative_transpose(m, self._residual_dual(m))
        return g

    def misfit_gn_apply(self, m: np.ndarray, mhat: np.ndarray) -> np.ndarray:
        """Gauss-Newton data-misfit Hessian action ``sum J^T B^T B J mhat / sigma^2``."""
        mhat = np.asarray(mhat, dtype=float)
        if not self._terms:
            return np.zeros_like(mhat)
        uhat = self.model.solve_sensitivity(m, mhat, self._max_step).states
        s2 = self.noise.sigma**2
        src = {}
        for s, B, _ in self._terms:
            v = B.T @ (B @ uhat[s]) / s2
            src[s] = src[s] + v if s in src else v
        return self.model.initial_derivative_transpose(m, self.model.adjoint_dual(src))

    def gn_hessian_apply(self, m, mhat) -> np.ndarray:
        return self.prior.apply_prec(mhat) + self.misfit_gn_apply(m, mhat)

    def hessian_apply(self, m, mhat) -> np.ndarray:
        """Full Hessian action: Gauss-Newton plus the second-order initial-condition term."""
        H = self.gn_hessian_apply(m, mhat)
        if self._terms and self.model.cfg.initial_condition == "square":
            lam0 = self._residual_dual(m)
            H = H + 2.0 * (lam0 if np.ndim(mhat) == 1 else lam0[:, None]) * mhat
        return H

    # -- MAP --------------------------------------------------------------
    def _prior_norm(self, g):
        return float(np.sqrt(max(g @ self.prior.apply_cov(g), 0.0)))

    def compute_map(
        self,
        init: Optional[np.ndarray] = None,
        rel_tol: float = 1e-12,
        abs_tol: float = 1e-6,
        max_newton: int = 50,
        gauss_newton: bool = True,
    ) -> MapResult:
        """Inexact Newton-CG with Eisenstat-Walker forcing and backtracking.

        CG runs in whitened coordinates ``m = S z`` (``S S^T = C``), where
        the Hessian is the identity plus the data term.
        """
        m = self.prior.mean.copy() if init is None else np.array(init, dtype=float)
        if not np.all(np.isfinite(m)):
            raise ContractError("initial guess has non-finite entries")
        prior = self.prior
        J = self.cost(m)
        history = [J]
        g = self.gradient(m)
        g0 = self._prior_norm(g)
        tol = max(abs_tol, rel_tol * g0)
        gnorm = g0
        it = 0
        stalled = False
        apply_H = self.gn_hessian_apply if gauss_newton else self.hessian_apply
        n = self.n

        def sqrt_T(x):  # S^T x = M^{1/2} A^{-1} x
            return prior.sqrt_w * prior.solve_A(x)

        while gnorm > tol and it < max_newton:
            eta = min(0.5, np.sqrt(gnorm / g0))
            Hw = LinearMap(n, n, lambda z, mm=m: sqrt_T(apply_H(mm, prior.apply_sqrt(z))))
            rhs = -sqrt_T(g)
            z = cg_solve(Hw, rhs, rel_tol=eta, max_iter=200).x
            step = prior.apply_sqrt(z)
            slope = float(g @ step)
            if slope >= 0:  # full Hessian can be indefinite away from the MAP
                step = -prior.apply_cov(g)
                slope = float(g @ step)
            alpha = 1.0
            for _ in range(20):
                m_try = m + alpha * step
                J_try = self.cost(m_try)
                if J_try <= J + 1e-4 * alpha * slope:
                    break
                alpha *= 0.5
            else:
                stalled = True
                break
            m, J = m_try, J_try
            history.append(J)
            g = self.gradient(m)
            gnorm = self._prior_norm(g)
            it += 1
        return MapResult(m, gnorm <= tol, it, gnorm, history, stalled)

    # -- Laplace ------------------------------------------------------------
    def laplace_eigs(self, map_point: np.ndarray, rank: int, oversample: int = 5, seed: int = 0) -> LowRankPosterior:
        """Dominant generalized eigenpairs of the data-misfit GN Hessian against ``C^{-1}``."""
        if rank < 1:
            raise ContractError("rank must be at least 1")
        H = LinearMap(self.n, self.n, lambda x: self.misfit_gn_apply(map_point, x))
        eig = randomized_gevp(H, self.prior.cov_map, rank, oversample, seed, prior_prec=self.prior.prec_map)
        eig.values = np.where(eig.values < 0, 0.0, eig.values)
        return LowRankPosterior(np.asarray(map_point), eig, rank)


def pointwise_variance(post: LowRankPosterior, prior: PriorOperator, probe_nodes=None) -> np.ndarray:
    """Posterior variance ``diag(C) - sum lam/(1+lam) w_j^2`` at the probe nodes."""
    nodes = np.arange(prior.grid.n) if probe_nodes is None else np.asarray(probe_nodes, dtype=int)
    var = prior.pointwise_variance(nodes)
    lam = post.values
    keep = lam >= EIG_TRUNCATION
    W = post.eig.vectors[nodes][:, keep]
    d = lam[keep] / (1.0 + lam[keep])
    return np.maximum(var - W**2 @ d, 0.0)
