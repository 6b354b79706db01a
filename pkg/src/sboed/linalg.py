"""Matrix-free linear algebra used by the inverse-problem and reduction code.

All routines accept either 1-D vectors or 2-D blocks of column vectors, so a
single call can push several right-hand sides through a PDE-backed operator.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import scipy.linalg

from .errors import ContractError, NumericFailure

__all__ = [
    "LinearMap",
    "EigPairs",
    "SvdTriplet",
    "CGResult",
    "as_linear_map",
    "cg_solve",
    "randomized_gevp",
    "dense_gevp",
    "truncated_svd",
    "dense_sym_eig",
    "b_orthonormality_error",
]

DENSE_FALLBACK_DIM = 64


@dataclass(frozen=True)
class LinearMap:
    """Action ``y = A x`` on real vectors (or on the columns of a block)."""

    dim_in: int
    dim_out: int
    apply: Callable[[np.ndarray], np.ndarray]
    matrix: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.dim_in < 1 or self.dim_out < 1:
            raise ContractError("LinearMap dimensions must be positive")

    def __call__(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.shape[0] != self.dim_in:
            raise ContractError(
                f"LinearMap expects leading dimension {self.dim_in}, got {x.shape[0]}"
            )
        y = np.asarray(self.apply(x), dtype=float)
        if y.shape[0] != self.dim_out or y.shape[1:] != x.shape[1:]:
            raise ContractError(f"LinearMap returned shape {y.shape} for input {x.shape}")
        return y

    def to_dense(self) -> np.ndarray:
        if self.matrix is not None:
            return np.asarray(self.matrix, dtype=float)
        return self(np.eye(self.dim_in))


def as_linear_map(a) -> LinearMap:
    """Wrap a dense array or sparse matrix as a :class:`LinearMap`."""
    if isinstance(a, LinearMap):
        return a
    rows, cols = a.shape
    dense = a if isinstance(a, np.ndarray) else None
    return LinearMap(cols, rows, lambda x: a @ x, dense)


@dataclass
class EigPairs:
    values: np.ndarray
    vectors: np.ndarray
    metric: Optional[LinearMap] = None
    effective_rank: Optional[int] = None
    breakdown: bool = False

    def __len__(self):
        return len(self.values)


@dataclass
class SvdTriplet:
    left: np.ndarray
    singular: np.ndarray
    right: np.ndarray


@dataclass
class CGResult:
    x: np.ndarray
    converged: bool
    n_iter: int
    residual_norms: list = field(default_factory=list)


def _check_finite(a, what):
    if not np.all(np.isfinite(a)):
        raise NumericFailure(f"non-finite values in {what}")


def _fix_signs(vectors: np.ndarray) -> np.ndarray:
    """Make the first non-negligible entry of every column positive."""
    v = np.array(vectors, dtype=float, copy=True)
    if v.size == 0:
        return v
    scale = np.max(np.abs(v), axis=0)
    for j in range(v.shape[1]):
        if scale[j] == 0.0:
            continue
        idx = np.flatnonzero(np.abs(v[:, j]) > 1e-8 * scale[j])[0]
        if v[idx, j] < 0:
            v[:, j] = -v[:, j]
    return v


def cg_solve(A, b, rel_tol: float = 1e-10, max_iter: Optional[int] = None, x0=None) -> CGResult:
    """Conjugate gradients for a symmetric positive definite operator.

    Returns the iterate with the smallest residual seen, flagged as not
    converged when ``max_iter`` runs out first.
    """
    A = as_linear_map(A)
    b = np.asarray(b, dtype=float)
    if b.ndim != 1 or b.shape[0] != A.dim_out or A.dim_in != A.dim_out:
        raise ContractError("cg_solve needs a square operator and a matching 1-D right-hand side")
    if rel_tol <= 0:
        raise ContractError("rel_tol must be positive")
    _check_finite(b, "right-hand side")
    n = b.shape[0]
    max_iter = 10 * n if max_iter is None else max_iter
    bnorm = np.linalg.norm(b)
    x = np.zeros(n) if x0 is None else np.array(x0, dtype=float)
    if bnorm == 0.0:
        return CGResult(np.zeros(n), True, 0, [0.0])
    r = b - A(x) if x0 is not None else b.copy()
    _check_finite(r, "operator application")
    p = r.copy()
    rr = r @ r
    history = [np.sqrt(rr)]
    best_x, best_res = x.copy(), history[0]
    it = 0
    while it < max_iter and history[-1] > rel_tol * bnorm:
        Ap = A(p)
        _check_finite(Ap, "operator application")
        pAp = p @ Ap
        if pAp <= 0:
            raise NumericFailure("cg_solve: operator is not positive definite")
        alpha = rr / pAp
        x = x + alpha * p
        r = r - alpha * Ap
        rr_new = r @ r
        p = r + (rr_new / rr) * p
        rr = rr_new
        it += 1
        history.append(np.sqrt(rr))
        if history[-1] < best_res:
            best_x, best_res = x.copy(), history[-1]
    converged = best_res <= rel_tol * bnorm
    return CGResult(best_x, converged, it, history)


def _b_orthonormalize(Y, B, rel_tol=1e-12):
    """Columns spanning range(Y) with Q^T B Q = I; rank-deficient directions dropped."""
    Q = Y
    for _ in range(2):
        BQ = B(Q)
        G = Q.T @ BQ
        G = 0.5 * (G + G.T)
        s, V = np.linalg.eigh(G)
        smax = s.max() if s.size else 0.0
        if smax <= 0.0:
            return Q[:, :0]
        keep = s > rel_tol * smax
        # descending order keeps the dominant sample directions first
        order = np.argsort(-s[keep])
        V = V[:, keep][:, order]
        Q = Q @ (V / np.sqrt(s[keep][order]))
    return Q


def randomized_gevp(
    H,
    prior_cov,
    rank: int,
    oversample: int = 5,
    rng_seed: int = 0,
    prior_prec=None,
) -> EigPairs:
    """Dominant pairs of ``H w = lam C^{-1} w`` by the randomized double-pass method.

    ``prior_cov`` applies ``C``; ``prior_prec`` applies ``C^{-1}`` (needed for
    the ``C^{-1}``-orthonormalisation).  When ``prior_prec`` is omitted the
    covariance must be small enough to invert densely.
    """
    H = as_linear_map(H)
    C = as_linear_map(prior_cov)
    n = H.dim_in
    if C.dim_in != n or H.dim_out != n:
        raise ContractError("H and prior_cov must act on the same space")
    if rank < 1 or oversample < 0 or rank + oversample > n:
        raise ContractError(f"need 1 <= rank and rank + oversample <= {n}")
    if prior_prec is None:
        if n > DENSE_FALLBACK_DIM and C.matrix is None:
            raise ContractError("prior_prec is required for large operators")
        Cinv = np.linalg.inv(C.to_dense())
        B = as_linear_map(0.5 * (Cinv + Cinv.T))
    else:
        B = as_linear_map(prior_prec)

    ell = rank + oversample
    rng = np.random.default_rng(rng_seed)
    Omega = rng.standard_normal((n, ell))
    Y = C(H(Omega))
    _check_finite(Y, "randomized_gevp sample")
    Q = _b_orthonormalize(Y, B)
    effective = Q.shape[1]
    breakdown = effective < ell
    if breakdown:
        # pad with prior-shaped random directions, B-orthogonal to the captured range
        extra = C(rng.standard_normal((n, ell - effective)))
        if effective:
            extra = extra - Q @ (Q.T @ B(extra))
        Q = np.hstack([Q, _b_orthonormalize(extra, B)])
        if Q.shape[1] < ell:
            raise NumericFailure("randomized_gevp could not build a prior-orthonormal basis")
    HQ = H(Q)
    _check_finite(HQ, "randomized_gevp second pass")
    T = Q.T @ HQ
    T = 0.5 * (T + T.T)
    lam, V = np.linalg.eigh(T)
    order = np.argsort(-lam, kind="stable")[:rank]
    lam = lam[order]
    W = _fix_signs(Q @ V[:, order])
    return EigPairs(lam, W, metric=B, effective_rank=min(effective, rank), breakdown=breakdown)


def dense_gevp(H: np.ndarray, C: np.ndarray) -> EigPairs:
    """Full generalized spectrum of ``H w = lam C^{-1} w`` by Cholesky whitening."""
    H = np.asarray(H, dtype=float)
    C = np.asarray(C, dtype=float)
    L = np.linalg.cholesky(0.5 * (C + C.T))
    S = L.T @ H @ L
    lam, V = np.linalg.eigh(0.5 * (S + S.T))
    order = np.argsort(-lam, kind="stable")
    W = _fix_signs(L @ V[:, order])
    Cinv = np.linalg.inv(C)
    return EigPairs(lam[order], W, metric=as_linear_map(0.5 * (Cinv + Cinv.T)))


def b_orthonormality_error(pairs: EigPairs, B=None) -> float:
    B = pairs.metric if B is None else as_linear_map(B)
    W = pairs.vectors
    G = W.T @ B(W) if B is not None else W.T @ W
    return float(np.max(np.abs(G - np.eye(W.shape[1])))) if W.size else 0.0


def truncated_svd(X, rank: int) -> SvdTriplet:
    """Leading ``rank`` singular triplets of a dense matrix (LAPACK thin SVD)."""
    X = np.asarray(X, dtype=float)
    if X.ndim != 2:
        raise ContractError("truncated_svd expects a 2-D matrix")
    if not 0 <= rank <= min(X.shape):
        raise ContractError(f"rank {rank} outside [0, {min(X.shape)}]")
    _check_finite(X, "truncated_svd input")
    U, s, Vt = np.linalg.svd(X, full_matrices=False)
    U = U[:, :rank]
    Vt = Vt[:rank]
    s = s[:rank]
    # sign convention on the left vectors, mirrored on the right ones
    Uf = _fix_signs(U)
    flip = np.where(np.sum(Uf * U, axis=0) < 0, -1.0, 1.0) if rank else np.ones(0)
    return SvdTriplet(Uf, s, (Vt.T * flip))


def dense_sym_eig(S) -> EigPairs:
    """Full spectrum of a dense symmetric matrix, descending."""
    S = np.asarray(S, dtype=float)
    if S.ndim != 2 or S.shape[0] != S.shape[1]:
        raise ContractError("dense_sym_eig expects a square matrix")
    _check_finite(S, "dense_sym_eig input")
    asym = np.max(np.abs(S - S.T)) if S.size else 0.0
    if asym > 1e-10 * max(1.0, np.max(np.abs(S)) if S.size else 1.0):
        raise ContractError(f"matrix is not symmetric (max asymmetry {asym:.3e})")
    lam, V = np.linalg.eigh(0.5 * (S + S.T))
    order = np.argsort(-lam, kind="stable")
    return EigPairs(lam[order], _fix_signs(V[:, order]))
