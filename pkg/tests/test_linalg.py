import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from rankscope.errors import InvalidExponent, InvalidMatrix
from rankscope.linalg import SingularSpectrum, numerical_rank, schatten_norm, singular_values, svd


def gram_schmidt(A):
    """Orthonormalize the columns of A (classical Gram-Schmidt, applied twice)."""
    Q = np.array(A, dtype=np.float64)
    for _ in range(2):
        for j in range(Q.shape[1]):
            for i in range(j):
                Q[:, j] -= (Q[:, i] @ Q[:, j]) * Q[:, i]
            Q[:, j] /= np.linalg.norm(Q[:, j])
    return Q


def jacobi_singular_values(A, sweeps=30):
    """One-sided Jacobi SVD: rotate column pairs until mutually orthogonal."""
    U = np.array(A, dtype=np.float64)
    if U.shape[0] < U.shape[1]:
        U = U.T.copy()
    n = U.shape[1]
    for _ in range(sweeps):
        off = 0.0
        for i in range(n - 1):
            for j in range(i + 1, n):
                a = U[:, i] @ U[:, i]
                b = U[:, j] @ U[:, j]
                c = U[:, i] @ U[:, j]
                if abs(c) <= 1e-300:
                    continue
                off = max(off, abs(c) / math.sqrt(a * b))
                zeta = (b - a) / (2 * c)
                t = math.copysign(1.0, zeta) / (abs(zeta) + math.sqrt(1 + zeta * zeta))
                cs = 1 / math.sqrt(1 + t * t)
                sn = cs * t
                ui = U[:, i].copy()
                U[:, i] = cs * ui - sn * U[:, j]
                U[:, j] = sn * ui + cs * U[:, j]
        if off < 1e-15:
            break
    return np.sort(np.linalg.norm(U, axis=0))[::-1]


@pytest.fixture
def constructed():
    rng = np.random.default_rng(7)
    U0 = gram_schmidt(rng.standard_normal((5, 4)))
    V0 = gram_schmidt(rng.standard_normal((4, 4)))
    return U0 @ np.diag([4.0, 3.0, 2.0, 1.0]) @ V0.T


def test_identity_spectrum():
    np.testing.assert_allclose(singular_values(np.eye(3)).values, [1, 1, 1], atol=1e-15)


def test_diagonal_sign_absorbed():
    np.testing.assert_allclose(singular_values(np.diag([3.0, -2.0])).values, [3, 2], atol=1e-15)


def test_constructed_spectrum(constructed):
    _, S, _ = svd(constructed)
    np.testing.assert_allclose(S.values, [4, 3, 2, 1], atol=1e-9)


def test_matches_jacobi_oracle():
    rng = np.random.default_rng(3)
    for shape in [(6, 4), (3, 7), (9, 9), (1, 5)]:
        A = rng.standard_normal(shape)
        np.testing.assert_allclose(singular_values(A).values, jacobi_singular_values(A), rtol=1e-10, atol=1e-12)


def test_reconstruction_and_orthonormality():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        r, c = rng.integers(1, 65, size=2)
        m = rng.standard_normal((r, c)) * rng.uniform(0.01, 100)
        U, S, V = svd(m)
        tol = 1e-10 * (1 + np.linalg.norm(m))
        assert np.linalg.norm(U @ np.diag(S.values) @ V.T - m) <= tol
        assert np.abs(U.T @ U - np.eye(U.shape[1])).max() <= 1e-10
        assert np.abs(V.T @ V - np.eye(V.shape[1])).max() <= 1e-10
        assert np.all(np.diff(S.values) <= 0)


def test_orthogonal_invariance():
    rng = np.random.default_rng(1)
    for _ in range(50):
        m = rng.standard_normal((6, 4))
        Q1, _ = np.linalg.qr(rng.standard_normal((6, 6)))
        Q2, _ = np.linalg.qr(rng.standard_normal((4, 4)))
        np.testing.assert_allclose(singular_values(Q1 @ m @ Q2).values, singular_values(m).values, atol=1e-10)


def test_degenerate_shapes():
    assert len(singular_values(np.ones((1, 5)))) == 1
    assert len(singular_values(np.ones((5, 1)))) == 1
    np.testing.assert_allclose(singular_values(np.ones((1, 4))).top, 2.0)


@pytest.mark.parametrize("bad", [np.array([[1.0, np.nan]]), np.array([[np.inf]]), np.zeros((0, 3))])
def test_invalid_matrix(bad):
    with pytest.raises(InvalidMatrix):
        svd(bad)


def test_schatten_examples(constructed):
    assert schatten_norm(np.eye(3), 2 / 13) == pytest.approx(3.0, rel=1e-14)
    assert schatten_norm(np.diag([4.0, 0.0, 0.0]), 0.5) == pytest.approx(2.0, rel=1e-14)
    expected = 4 ** (2 / 3) + 3 ** (2 / 3) + 2 ** (2 / 3) + 1
    assert schatten_norm(constructed, 2 / 3) == pytest.approx(expected, abs=1e-8)


@pytest.mark.parametrize("p", [0.0, -1.0])
def test_schatten_rejects_nonpositive_exponent(p):
    with pytest.raises(InvalidExponent):
        schatten_norm(np.eye(2), p)


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 8), st.integers(1, 8)),
              elements=st.floats(-1e3, 1e3, allow_nan=False)))
def test_schatten_two_is_frobenius(m):
    fro = float(np.sum(m * m))
    assert schatten_norm(m, 2) == pytest.approx(fro, rel=1e-9, abs=1e-300)


def test_numerical_rank_examples():
    assert numerical_rank(np.array([1, 1e-9, 1e-12]), 1e-3) == 1
    assert numerical_rank(np.zeros(3), 1e-3) == 0
    assert numerical_rank(np.array([10, 5, 0.004, 1e-6]), 1e-3) == 2
    assert numerical_rank(np.array([10, 5, 0.011, 1e-6]), 1e-3) == 3


def test_spectrum_validation():
    with pytest.raises(ValueError):
        SingularSpectrum(np.array([1.0, 2.0]), (2, 2))
    with pytest.raises(ValueError):
        SingularSpectrum(np.array([1.0]), (2, 2))
    s = SingularSpectrum(np.array([2.0, 1.0]), (2, 3))
    assert s.ratio(2) == 0.5
    assert s.ratio(3) == 0.0
    assert s.rank() == 2
