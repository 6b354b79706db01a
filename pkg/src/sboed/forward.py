"""Advection-diffusion forward model on a regular grid.

Discretization: node-centred finite volumes assembled cell by cell.  Every
primal cell contributes a quarter of its area to the lumped mass of its four
corners, half-face conductances to the 5-point diffusion stencil, and
half-face volume fluxes taken as stream-function differences.  The latter
makes the discrete velocity exactly divergence free and the centred
advection operator exactly skew-symmetric, so mass is conserved and the
adjoint identities hold to round-off.

The parameter ``m`` enters only through the initial condition ``u(0) = m**2``
(or ``u(0) = m`` in the linearized variant used by the dense oracles).
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Iterable, Optional, Sequence

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy import ndimage

from .errors import ContractError, NumericFailure

__all__ = [
    "Grid",
    "VelocityField",
    "PdeConfig",
    "StateTrajectory",
    "AdvectionDiffusion",
    "make_velocity",
    "discrete_divergence",
    "observation_matrix",
]


class Grid:
    """Tensor grid of ``nx * ny`` nodes on ``[0, lx] x [0, ly]``.

    ``obstacle_mask`` has shape ``(ny - 1, nx - 1)`` and marks impenetrable
    cells.  Nodes surrounded only by obstacle cells are dropped from the
    unknown set; every field in the package lives on :attr:`active`.
    """

    def __init__(self, nx: int, ny: int, lx: float = 1.0, ly: float = 1.0, obstacle_mask=None):
        if nx < 3 or ny < 3:
            raise ContractError("grid needs at least 3 nodes per axis")
        if lx <= 0 or ly <= 0:
            raise ContractError("domain extents must be positive")
        self.nx, self.ny, self.lx, self.ly = int(nx), int(ny), float(lx), float(ly)
        if obstacle_mask is None:
            obstacle_mask = np.zeros((ny - 1, nx - 1), dtype=bool)
        obstacle_mask = np.asarray(obstacle_mask, dtype=bool)
        if obstacle_mask.shape != (ny - 1, nx - 1):
            raise ContractError("obstacle_mask must have shape (ny-1, nx-1)")
        _check_obstacles(obstacle_mask)
        self.obstacle_mask = obstacle_mask

    @classmethod
    def with_rectangles(cls, nx, ny, rects: Iterable[Sequence[float]], lx=1.0, ly=1.0):
        """Build a grid whose obstacles are the cells inside ``(x0, x1, y0, y1)`` boxes."""
        hx, hy = lx / (nx - 1), ly / (ny - 1)
        xc = (np.arange(nx - 1) + 0.5) * hx
        yc = (np.arange(ny - 1) + 0.5) * hy
        mask = np.zeros((ny - 1, nx - 1), dtype=bool)
        for x0, x1, y0, y1 in rects:
            mask |= ((yc[:, None] > y0) & (yc[:, None] < y1)) & ((xc[None, :] > x0) & (xc[None, :] < x1))
        return cls(nx, ny, lx, ly, mask)

    @property
    def hx(self) -> float:
        return self.lx / (self.nx - 1)

    @property
    def hy(self) -> float:
        return self.ly / (self.ny - 1)

    @cached_property
    def x(self) -> np.ndarray:
        return np.linspace(0.0, self.lx, self.nx)

    @cached_property
    def y(self) -> np.ndarray:
        return np.linspace(0.0, self.ly, self.ny)

    @cached_property
    def cell_active(self) -> np.ndarray:
        return ~self.obstacle_mask

    @cached_property
    def node_active(self) -> np.ndarray:
        ca = self.cell_active
        na = np.zeros((self.ny, self.nx), dtype=bool)
        na[:-1, :-1] |= ca
        na[1:, :-1] |= ca
        na[:-1, 1:] |= ca
        na[1:, 1:] |= ca
        return na

    @cached_property
    def active(self) -> np.ndarray:
        """Flat (row-major, ``j * nx + i``) indices of the unknown nodes."""
        return np.flatnonzero(self.node_active.ravel())

    @cached_property
    def full_to_active(self) -> np.ndarray:
        m = -np.ones(self.nx * self.ny, dtype=np.int64)
        m[self.active] = np.arange(self.active.size)
        return m

    @property
    def n(self) -> int:
        return int(self.active.size)

    @cached_property
    def coords(self) -> np.ndarray:
        X, Y = np.meshgrid(self.x, self.y)
        return np.column_stack([X.ravel(), Y.ravel()])[self.active]

    @cached_property
    def _cells(self):
        """Active cells as (i, j) index arrays plus their corner indices in the active numbering."""
        jj, ii = np.nonzero(self.cell_active)
        f2a = self.full_to_active
        nx = self.nx
        n00 = f2a[jj * nx + ii]
        n10 = f2a[jj * nx + ii + 1]
        n01 = f2a[(jj + 1) * nx + ii]
        n11 = f2a[(jj + 1) * nx + ii + 1]
        return ii, jj, n00, n10, n01, n11

    @cached_property
    def weights(self) -> np.ndarray:
        """Lumped mass (trapezoid quadrature) weights of the active nodes."""
        _, _, n00, n10, n01, n11 = self._cells
        q = 0.25 * self.hx * self.hy
        w = np.zeros(self.n)
        for idx in (n00, n10, n01, n11):
            np.add.at(w, idx, q)
        return w

    @cached_property
    def boundary_weights(self) -> np.ndarray:
        """Lumped boundary-measure weights: half of each adjacent boundary edge."""
        ii, jj, n00, n10, n01, n11 = self._cells
        ca = np.pad(self.cell_active, 1, constant_values=False)
        # neighbour activity of each active cell; padded index shift by one
        below = ~ca[jj, ii + 1]
        above = ~ca[jj + 2, ii + 1]
        left = ~ca[jj + 1, ii]
        right = ~ca[jj + 1, ii + 2]
        wb = np.zeros(self.n)
        for flag, (a, b), length in (
            (below, (n00, n10), self.hx),
            (above, (n01, n11), self.hx),
            (left, (n00, n01), self.hy),
            (right, (n10, n11), self.hy),
        ):
            np.add.at(wb, a[flag], 0.5 * length)
            np.add.at(wb, b[flag], 0.5 * length)
        return wb

    @cached_property
    def stiffness(self) -> sp.csr_matrix:
        """Symmetric positive semidefinite 5-point diffusion matrix (zero row sums)."""
        _, _, n00, n10, n01, n11 = self._cells
        cx = 0.5 * self.hy / self.hx
        cy = 0.5 * self.hx / self.hy
        pairs = [(n00, n10, cx), (n01, n11, cx), (n00, n01, cy), (n10, n11, cy)]
        return _pair_matrix(self.n, pairs)

    def full(self, field: np.ndarray, fill: float = np.nan) -> np.ndarray:
        """Scatter an active-node field onto the ``(ny, nx)`` array (obstacles filled)."""
        out = np.full(self.nx * self.ny, fill, dtype=float)
        out[self.active] = field
        return out.reshape(self.ny, self.nx)

    def locate(self, point) -> int:
        """Index of the active node closest to a physical point."""
        d = np.sum((self.coords - np.asarray(point, dtype=float)) ** 2, axis=1)
        return int(np.argmin(d))

    def describe(self) -> dict:
        return {
            "nx": self.nx,
            "ny": self.ny,
            "lx": self.lx,
            "ly": self.ly,
            "obstacle_cells": int(self.obstacle_mask.sum()),
        }


def _check_obstacles(mask: np.ndarray):
    if not mask.any():
        return
    if mask[0].any() or mask[-1].any() or mask[:, 0].any() or mask[:, -1].any():
        raise ContractError("obstacles must lie strictly inside the domain")
    labels, count = ndimage.label(mask)
    for sl in ndimage.find_objects(labels):
        if not mask[sl].all():
            raise ContractError("obstacle cells must form axis-aligned rectangles")


def _pair_matrix(n, pairs):
    """Sum of ``c (e_a - e_b)(e_a - e_b)^T`` over edge lists."""
    rows, cols, vals = [], [], []
    for a, b, c in pairs:
        c = np.broadcast_to(c, a.shape)
        rows += [a, b, a, b]
        cols += [a, b, b, a]
        vals += [c, c, -c, -c]
    return sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n)
    )


@dataclass
class VelocityField:
    """Divergence-free velocity built from a stream function.

    ``vx``/``vy`` are nodal values on the full ``(ny, nx)`` grid (for
    reporting and upstream directions); ``face_flux`` holds the exact
    half-face volume fluxes used by the advection operator, one row per
    active cell in the order (bottom, top, left, right) half faces.
    """

    vx: np.ndarray
    vy: np.ndarray
    face_flux: np.ndarray
    variant: str = "g1"
    strength: float = 1.0

    def at(self, grid: Grid, point) -> np.ndarray:
        """Bilinearly interpolated velocity at a physical point."""
        B = observation_matrix(grid, np.atleast_2d(point))
        return np.array([B @ self.vx.ravel()[grid.active], B @ self.vy.ravel()[grid.active]]).ravel()


def _cellular_psi(x, y, lx, ly, strength):
    # one clockwise recirculating cell: up along the left wall, down along the right
    return -strength * (lx / np.pi) * np.sin(np.pi * x / lx) * np.sin(np.pi * y / ly)


def _obstacle_damping(grid: Grid, x, y, ramp):
    """Factor vanishing on obstacle cells so the stream function is zero on their boundary."""
    phi = np.ones(np.broadcast(x, y).shape)
    if not grid.obstacle_mask.any():
        return phi
    labels, _ = ndimage.label(grid.obstacle_mask)
    for sl in ndimage.find_objects(labels):
        x0, x1 = sl[1].start * grid.hx, sl[1].stop * grid.hx
        y0, y1 = sl[0].start * grid.hy, sl[0].stop * grid.hy
        dx = np.maximum(np.maximum(x0 - x, x - x1), 0.0)
        dy = np.maximum(np.maximum(y0 - y, y - y1), 0.0)
        phi = phi * np.clip(np.hypot(dx, dy) / ramp, 0.0, 1.0)
    return phi


def make_velocity(grid: Grid, variant: str = "g1", strength: float = 1.0) -> VelocityField:
    """Prescribed recirculating flow; ``g2`` is the exact negation of ``g1``."""
    if variant not in ("g1", "g2"):
        raise ContractError(f"unknown velocity variant {variant!r}")
    sign = 1.0 if variant == "g1" else -1.0
    ramp = 2.0 * max(grid.hx, grid.hy)

    def psi(x, y):
        return sign * _cellular_psi(x, y, grid.lx, grid.ly, strength) * _obstacle_damping(grid, x, y, ramp)

    ii, jj = grid._cells[:2]
    x0, y0 = ii * grid.hx, jj * grid.hy
    xm, ym = x0 + 0.5 * grid.hx, y0 + 0.5 * grid.hy
    pc = psi(xm, ym)
    pb, pt = psi(xm, y0), psi(xm, y0 + grid.hy)
    pl, pr = psi(x0, ym), psi(x0 + grid.hx, ym)
    # flux from the first to the second node of each half face
    flux = np.column_stack([pc - pb, pt - pc, pl - pc, pc - pr])

    X, Y = np.meshgrid(grid.x, grid.y)
    eps = 1e-6 * min(grid.hx, grid.hy)
    vx = (psi(X, Y + eps) - psi(X, Y - eps)) / (2 * eps)
    vy = -(psi(X + eps, Y) - psi(X - eps, Y)) / (2 * eps)
    # exact zeros on the walls (the finite-difference probe can leave round-off)
    vx[:, 0] = vx[:, -1] = 0.0
    vy[0, :] = vy[-1, :] = 0.0
    return VelocityField(vx, vy, flux, variant, float(strength))


def discrete_divergence(grid: Grid, vel: VelocityField) -> np.ndarray:
    """Net outward half-face flux at every active node."""
    _, _, n00, n10, n01, n11 = grid._cells
    q = vel.face_flux
    div = np.zeros(grid.n)
    for k, (a, b) in enumerate(((n00, n10), (n01, n11), (n00, n01), (n10, n11))):
        np.add.at(div, a, q[:, k])
        np.add.at(div, b, -q[:, k])
    return div


def advection_matrix(grid: Grid, vel: VelocityField, upwind: bool = False) -> sp.csr_matrix:
    """Conservative advection operator: row ``a`` is the net outflow from node ``a``."""
    _, _, n00, n10, n01, n11 = grid._cells
    q = vel.face_flux
    rows, cols, vals = [], [], []
    for k, (a, b) in enumerate(((n00, n10), (n01, n11), (n00, n01), (n10, n11))):
        qk = q[:, k]
        if upwind:
            ca, cb = np.maximum(qk, 0.0), np.minimum(qk, 0.0)
        else:
            ca = cb = 0.5 * qk
        rows += [a, a, b, b]
        cols += [a, b, a, b]
        vals += [ca, cb, -ca, -cb]
    return sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(grid.n, grid.n)
    )


@dataclass(frozen=True)
class PdeConfig:
    kappa: float = 0.01
    t_final: float = 1.0
    n_steps: int = 10
    theta: float = 1.0
    initial_condition: str = "square"
    upwind: bool = False

    def __post_init__(self):
        if self.kappa <= 0:
            raise ContractError("kappa must be positive")
        if self.n_steps < 1 or self.t_final <= 0:
            raise ContractError("need t_final > 0 and n_steps >= 1")
        if not 0.0 <= self.theta <= 1.0:
            raise ContractError("theta must lie in [0, 1]")
        if self.initial_condition not in ("square", "identity"):
            raise ContractError("initial_condition must be 'square' or 'identity'")

    @property
    def dt(self) -> float:
        return self.t_final / self.n_steps

    @property
    def times(self) -> np.ndarray:
        return self.dt * np.arange(self.n_steps + 1)

    def step_index(self, t: float) -> int:
        k = int(round(t / self.dt))
        if not 0 <= k <= self.n_steps or abs(k * self.dt - t) > 1e-9 * max(1.0, self.t_final):
            raise ContractError(f"time {t} is not on the simulation grid")
        return k


@dataclass
class StateTrajectory:
    """States at ``times`` (index 0 is the initial condition)."""

    times: np.ndarray
    states: np.ndarray  # (n_times, n_nodes) or (n_times, n_nodes, batch)

    def at(self, t: float) -> np.ndarray:
        k = int(np.argmin(np.abs(self.times - t)))
        if abs(self.times[k] - t) > 1e-9:
            raise ContractError(f"time {t} not stored in trajectory")
        return self.states[k]


class AdvectionDiffusion:
    """theta-scheme propagator ``(M + theta dt S) u+ = (M - (1-theta) dt S) u``.

    ``S = kappa K + C``.  Both step matrices are factorised once; sparse LU
    is used because the advection part makes them nonsymmetric.
    """

    def __init__(self, grid: Grid, cfg: PdeConfig, vel: Optional[VelocityField] = None):
        self.grid, self.cfg = grid, cfg
        self.vel = vel
        w = grid.weights
        S = cfg.kappa * grid.stiffness
        if vel is not None:
            S = S + advection_matrix(grid, vel, cfg.upwind)
        M = sp.diags(w)
        dt, th = cfg.dt, cfg.theta
        self.S = S.tocsr()
        self.lhs = (M + th * dt * S).tocsc()
        self.rhs = (M - (1.0 - th) * dt * S).tocsr()
        self.rhs_T = self.rhs.T.tocsr()
        self._lu = spla.splu(self.lhs)
        self.w = w

    # -- primitive steps -------------------------------------------------
    def step(self, u: np.ndarray) -> np.ndarray:
        return self._lu.solve(np.asarray(self.rhs @ u))

    def step_transpose(self, lam: np.ndarray) -> np.ndarray:
        """Euclidean transpose of :meth:`step`, applied to a dual vector."""
        return self.rhs_T @ self._lu.solve(np.asarray(lam), trans="T")

    def initial_state(self, m: np.ndarray) -> np.ndarray:
        return m**2 if self.cfg.initial_condition == "square" else np.array(m, dtype=float)

    def initial_derivative(self, m: np.ndarray, mhat: np.ndarray) -> np.ndarray:
        if self.cfg.initial_condition == "square":
            m = m if mhat.ndim == 1 else m[:, None]
            return 2.0 * m * mhat
        return np.array(mhat, dtype=float)

    # -- trajectories ----------------------------------------------------
    def propagate(self, u0: np.ndarray, n_steps: Optional[int] = None) -> StateTrajectory:
        """Evolve an arbitrary initial field (or block of fields)."""
        n_steps = self.cfg.n_steps if n_steps is None else n_steps
        u0 = np.asarray(u0, dtype=float)
        states = np.empty((n_steps + 1,) + u0.shape)
        states[0] = u0
        for k in range(n_steps):
            states[k + 1] = self.step(states[k])
            if not np.all(np.isfinite(states[k + 1])):
                raise NumericFailure(f"non-finite state at step {k + 1}")
        return StateTrajectory(self.cfg.times[: n_steps + 1], states)

    def solve_forward(self, m: np.ndarray) -> StateTrajectory:
        m = np.asarray(m, dtype=float)
        if not np.all(np.isfinite(m)):
            raise ContractError("parameter field has non-finite entries")
        return self.propagate(self.initial_state(m))

    def solve_sensitivity(self, m: np.ndarray, mhat: np.ndarray, n_steps=None) -> StateTrajectory:
        """Directional derivative of the trajectory, ``d u(t) / d m`` applied to ``mhat``."""
        return self.propagate(self.initial_derivative(np.asarray(m, float), np.asarray(mhat, float)), n_steps)

    def adjoint_dual(self, dual_sources: dict) -> np.ndarray:
        """Euclidean adjoint sweep: ``sum_k (step^T)^k s_k`` for sources keyed by step index.

        Returns the dual variable at time zero; callers translate to the
        L2 adjoint by dividing by the quadrature weights.
        """
        if not dual_sources:
            return None
        kmax = max(dual_sources)
        lam = np.array(dual_sources[kmax], dtype=float)
        for k in range(kmax - 1, -1, -1):
            lam = self.step_transpose(lam)
            if k in dual_sources:
                lam = lam + dual_sources[k]
        if not np.all(np.isfinite(lam)):
            raise NumericFailure("non-finite adjoint state")
        return lam

    def solve_adjoint(self, sources) -> np.ndarray:
        """L2(M) adjoint solved backward in time; returns ``p(0)``.

        ``sources`` is a list of ``(t_k, field)``; each field is injected at
        its time, so ``<v, uhat(t_k)>_M = <p(0), uhat(0)>_M``.
        """
        dual = {}
        for t, v in sources:
            k = self.cfg.step_index(t)
            wv = self.w * np.asarray(v, dtype=float) if np.ndim(v) == 1 else self.w[:, None] * v
            dual[k] = dual[k] + wv if k in dual else wv
        if not dual:
            return np.zeros(self.grid.n)
        lam = self.adjoint_dual(dual)
        return lam / self.w if lam.ndim == 1 else lam / self.w[:, None]

    def initial_derivative_transpose(self, m: np.ndarray, p0: np.ndarray) -> np.ndarray:
        if self.cfg.initial_condition == "square":
            m = m if p0.ndim == 1 else m[:, None]
            return 2.0 * m * p0
        return np.array(p0, dtype=float)

    def jacobian_transpose_apply(self, m: np.ndarray, v: np.ndarray, t_k: float) -> np.ndarray:
        """L2 adjoint of ``mhat -> uhat(t_k)``: ``2 m p(0)``."""
        p0 = self.solve_adjoint([(t_k, v)])
        return self.initial_derivative_transpose(np.asarray(m, float), p0)

    def mass(self, t_traj: StateTrajectory) -> np.ndarray:
        return np.einsum("i,ti...->t...", self.w, t_traj.states)


def observation_matrix(grid: Grid, coords) -> sp.csr_matrix:
    """Bilinear point-evaluation operator (rows = sensors, cols = active nodes)."""
    coords = np.atleast_2d(np.asarray(coords, dtype=float))
    xs, ys = coords[:, 0], coords[:, 1]
    tol = 1e-12
    if np.any(xs < -tol) or np.any(xs > grid.lx + tol) or np.any(ys < -tol) or np.any(ys > grid.ly + tol):
        raise ContractError("sensor outside the domain")
    i = np.clip(np.floor(xs / grid.hx).astype(int), 0, grid.nx - 2)
    j = np.clip(np.floor(ys / grid.hy).astype(int), 0, grid.ny - 2)
    if not np.all(grid.cell_active[j, i]):
        raise ContractError("sensor located on an obstacle")
    a = np.clip(xs / grid.hx - i, 0.0, 1.0)
    b = np.clip(ys / grid.hy - j, 0.0, 1.0)
    nx, f2a = grid.nx, grid.full_to_active
    cols = np.stack([
        f2a[j * nx + i], f2a[j * nx + i + 1], f2a[(j + 1) * nx + i], f2a[(j + 1) * nx + i + 1]
    ], axis=1)
    vals = np.stack([(1 - a) * (1 - b), a * (1 - b), (1 - a) * b, a * b], axis=1)
    rows = np.repeat(np.arange(len(xs)), 4)
    return sp.csr_matrix((vals.ravel(), (rows, cols.ravel())), shape=(len(xs), grid.n))
