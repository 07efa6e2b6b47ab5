"""Dense matrix kernels: SVD, Schatten quasi-norms and numerical rank.

Matrices are plain 2-D ``float64`` numpy arrays. The SVD itself is delegated
to LAPACK through :func:`numpy.linalg.svd`; this module adds validation, the
spectrum container and the derived quantities used by the analyzers.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidExponent, InvalidMatrix

DEFAULT_REL_TOL = 1e-3


def as_matrix(m, name="matrix") -> np.ndarray:
    """Return ``m`` as a finite 2-D float64 array (vectors become columns)."""
    a = np.asarray(m, dtype=np.float64)
    if a.ndim == 1:
        a = a[:, None]
    if a.ndim != 2 or a.shape[0] < 1 or a.shape[1] < 1:
        raise InvalidMatrix(f"{name} must be a non-empty 2-D array, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise InvalidMatrix(f"{name} contains non-finite entries")
    return a


@dataclass(frozen=True)
class SingularSpectrum:
    """Nonincreasing singular values of a matrix of shape ``source_shape``."""

    values: np.ndarray
    source_shape: tuple[int, int]

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 1 or len(v) != min(self.source_shape):
            raise ValueError("spectrum length must equal min(rows, cols)")
        if np.any(v < 0) or np.any(np.diff(v) > 0):
            raise ValueError("singular values must be nonnegative and nonincreasing")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    def __len__(self):
        return len(self.values)

    @property
    def top(self) -> float:
        return float(self.values[0])

    def ratio(self, k: int = 2) -> float:
        """s_k / s_1 (1-based ``k``); 0 when s_1 = 0 or the spectrum is shorter."""
        if k > len(self.values) or self.values[0] == 0:
            return 0.0
        return float(self.values[k - 1] / self.values[0])

    def rank(self, rel_tol: float = DEFAULT_REL_TOL) -> int:
        return numerical_rank(self, rel_tol)


def svd(m) -> tuple[np.ndarray, SingularSpectrum, np.ndarray]:
    """Thin SVD ``m = U @ diag(S) @ V.T``.

    Returns ``(U, S, V)`` with ``U`` of shape (rows, r), ``V`` of shape
    (cols, r) and r = min(rows, cols).
    """
    a = as_matrix(m)
    u, s, vt = np.linalg.svd(a, full_matrices=False)
    # LAPACK can return -0.0 or tiny ordering jitter on exactly repeated values
    s = np.maximum.accumulate(np.abs(s)[::-1])[::-1]
    return u, SingularSpectrum(s, a.shape), vt.T


def singular_values(m) -> SingularSpectrum:
    a = as_matrix(m)
    s = np.linalg.svd(a, compute_uv=False)
    s = np.maximum.accumulate(np.abs(s)[::-1])[::-1]
    return SingularSpectrum(s, a.shape)


def schatten_norm(m, p: float) -> float:
    """Sum of ``s_k(m) ** p`` over the nonzero singular values of ``m``.

    For ``p < 1`` this is the quasi-norm raised to the power ``p``; with
    ``p = 2`` it is the squared Frobenius norm.
    """
    if not p > 0:
        raise InvalidExponent(f"Schatten exponent must be positive, got {p}")
    s = singular_values(m).values
    s = s[s > 0]
    return float(np.sum(s**p))


def numerical_rank(s: SingularSpectrum | np.ndarray, rel_tol: float = DEFAULT_REL_TOL) -> int:
    """Number of singular values strictly above ``rel_tol * s_1``."""
    values = s.values if isinstance(s, SingularSpectrum) else np.asarray(s, dtype=np.float64)
    if len(values) == 0 or values[0] <= 0:
        return 0
    return int(np.count_nonzero(values > rel_tol * values[0]))
