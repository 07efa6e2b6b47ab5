"""Kernel ridge regression with a radial kernel, used as a rank contrast.

A kernel predictor has no notion of depth, and its Jacobian at a generic
point has full rank even when the data come from a low-rank function.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve
from scipy.spatial.distance import cdist, pdist

from .errors import IllConditioned, NoProbes, ShapeError
from .linalg import DEFAULT_REL_TOL, numerical_rank


@dataclass(frozen=True)
class GaussianKernel:
    """k(r) = exp(-r^2 / (2 l^2))."""

    length_scale: float

    def __call__(self, r):
        return np.exp(-0.5 * (np.asarray(r) / self.length_scale) ** 2)

    def deriv_over_r(self, r):
        """k'(r) / r, which stays finite (-1/l^2) at r = 0."""
        return -self(r) / self.length_scale**2


@dataclass(frozen=True)
class KrrModel:
    X: np.ndarray
    dual_coeffs: np.ndarray
    kernel: GaussianKernel
    ridge: float

    @property
    def input_dim(self) -> int:
        return self.X.shape[0]

    @property
    def output_dim(self) -> int:
        return self.dual_coeffs.shape[1]

    def predict(self, x) -> np.ndarray:
        """Predictions at the columns of ``x`` (shape d_out x M)."""
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 1:
            x = x[:, None]
        K = self.kernel(cdist(x.T, self.X.T))
        return (K @ self.dual_coeffs).T


def median_length_scale(X) -> float:
    d = pdist(np.asarray(X, dtype=np.float64).T)
    d = d[d > 0]
    return float(np.median(d)) if d.size else 1.0


def krr_fit(X, Y, kernel: GaussianKernel | None = None, lam: float = 1e-6,
            residual_tol: float = 1e-8) -> KrrModel:
    """Solve ``(K(X, X) + lam I) alpha = Y^T`` by Cholesky factorization."""
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if Y.ndim == 1:
        Y = Y[None, :]
    if X.shape[1] != Y.shape[1]:
        raise ShapeError(f"X has {X.shape[1]} columns but Y has {Y.shape[1]}")
    if not lam > 0:
        raise ValueError("ridge must be positive")
    if kernel is None:
        kernel = GaussianKernel(median_length_scale(X))
    A = kernel(cdist(X.T, X.T)) + lam * np.eye(X.shape[1])
    try:
        factor = cho_factor(A, lower=True)
    except LinAlgError as exc:
        raise IllConditioned(f"kernel system is not positive definite: {exc}") from exc
    alpha = cho_solve(factor, Y.T)
    resid = np.linalg.norm(A @ alpha - Y.T) / max(np.linalg.norm(Y), 1e-300)
    if not np.isfinite(resid) or resid > residual_tol:
        raise IllConditioned(f"kernel solve residual {resid:.3g} exceeds {residual_tol:g}")
    return KrrModel(X.copy(), alpha, kernel, float(lam))


def krr_jacobian(m: KrrModel, x) -> np.ndarray:
    """Jacobian (d_out x d_in) of the predictor at ``x``.

    Each kernel column contributes ``k'(r_i)/r_i (x - x_i)``, so
    ``J = alpha^T diag(k'(r)/r) (x - X)^T``.
    """
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    diff = x[:, None] - m.X                      # d_in x N
    r = np.sqrt(np.sum(diff * diff, axis=0))
    w = m.kernel.deriv_over_r(r)                 # N
    return m.dual_coeffs.T @ (w[:, None] * diff.T)


def krr_rank(m: KrrModel, probes, rel_tol: float = DEFAULT_REL_TOL) -> int:
    """Largest numerical Jacobian rank of the predictor over the probe columns."""
    P = np.asarray(probes, dtype=np.float64)
    if P.ndim == 1:
        P = P[:, None]
    if P.size == 0:
        raise NoProbes("krr_rank needs at least one probe")
    best = 0
    for x in P.T:
        s = np.linalg.svd(krr_jacobian(m, x), compute_uv=False)
        best = max(best, numerical_rank(s, rel_tol))
    return best
