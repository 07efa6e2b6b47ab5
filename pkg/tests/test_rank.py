import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rankscope import datagen as dg
from rankscope import network as nw
from rankscope import rank as rk
from rankscope import training as tr
from rankscope.errors import DegenerateBatch, DegenerateInputs, NoProbes, ProjectionError, TooFewPoints
from rankscope.network import NetworkParams, PiecewiseLinearFn

from conftest import random_network


def affine_fn(A, b):
    return PiecewiseLinearFn(lambda X: A @ X + b[:, None], lambda x: A, A.shape[1], A.shape[0])


def identity_chain(k, L):
    return NetworkParams([np.eye(k)] * L, [np.zeros(k)] * L, 0.0)


def brute_force_path(P):
    n = P.shape[1]
    D = np.linalg.norm(P[:, :, None] - P[:, None, :], axis=0)
    return min(sum(D[o[i], o[i + 1]] for i in range(n - 1)) for o in itertools.permutations(range(n)))


# -- Jacobian rank ----------------------------------------------------------------

def test_affine_rank():
    rng = np.random.default_rng(0)
    A = rng.standard_normal((5, 3)) @ rng.standard_normal((3, 6))
    rank, probe = rk.jacobian_rank(affine_fn(A, np.ones(5)), rng.standard_normal((6, 20)))
    assert rank == 3
    assert probe.shape == (6,)


def test_xcross_rank_one():
    probes = np.random.default_rng(1).uniform(-2, 2, (2, 1000))
    assert rk.jacobian_rank(dg.xcross_fixture(), probes)[0] == 1


def test_bottleneck_width_bounds_rank():
    rng = np.random.default_rng(2)
    for k in (1, 2, 3):
        p = nw.init((6, 10, k, 10, 5), 0.1, seed=k).replace(biases=[rng.standard_normal(n) for n in (10, k, 10, 5)])
        assert rk.jacobian_rank(p, rng.standard_normal((6, 300)))[0] <= k


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_bottleneck_ratio_decreases_with_depth(seed):
    # deeper ridge-regularized fits of rank-1 data concentrate their
    # representation on one direction in some hidden layer
    ds = dg.synth_lowrank(4, 4, 3, 1, 64, seed=seed)
    ratios = []
    for L in (2, 4, 8):
        p = nw.init((4,) + (16,) * (L - 1) + (4,), seed=seed, scale=0.5 if L > 4 else 1.0)
        cfg = tr.TrainConfig(lam=1e-2, steps=5000, weight_decay="coupled", seed=seed)
        p, _ = tr.train(p, (ds.X, ds.Y), cfg)
        ratios.append(rk.bottleneck_profile(p, ds.X).bottleneck_ratio)
    assert ratios[0] > ratios[1] > ratios[2]


def test_rank_invariant_under_bijections():
    rng = np.random.default_rng(3)
    p = nw.init((4, 12, 2, 12, 4), seed=2).replace(biases=[rng.standard_normal(n) for n in (12, 2, 12, 4)])
    A = rng.standard_normal((4, 4))
    B = rng.standard_normal((4, 4))
    f = nw.as_function(p)
    g = PiecewiseLinearFn(lambda X: B @ f(A @ X), lambda x: B @ f.jacobian(A @ x) @ A, 4, 4)
    X = rng.standard_normal((4, 200))
    for i in range(X.shape[1]):
        r1 = rk.jacobian_rank(f, X[:, i:i + 1])[0]
        r2 = rk.jacobian_rank(g, np.linalg.solve(A, X[:, i:i + 1]))[0]
        assert r1 == r2


def test_no_probes():
    with pytest.raises(NoProbes):
        rk.jacobian_rank(affine_fn(np.eye(2), np.zeros(2)), np.zeros((2, 0)))


# -- Schatten certificate -----------------------------------------------------------

def test_schatten_zero_network():
    p = NetworkParams([np.zeros((2, 2))] * 3, [np.zeros(2), np.zeros(2), np.array([1.0, 1.0])], 0.0)
    value, bound, slack = rk.schatten_certificate(p, np.ones((2, 5)))
    assert value == 0.0
    assert bound == pytest.approx(2.0 / 3)
    assert slack >= 0


@pytest.mark.parametrize("k,L", [(1, 2), (3, 5), (4, 13)])
def test_schatten_identity_chain_is_tight(k, L):
    value, bound, slack = rk.schatten_certificate(identity_chain(k, L), np.random.default_rng(0).random((k, 30)))
    assert value == pytest.approx(k, abs=1e-12)
    assert bound == k
    assert abs(slack) <= 1e-9


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31))
def test_schatten_bound_random_networks(seed):
    rng = np.random.default_rng(seed)
    p = random_network(rng, max_depth=6, max_width=12)
    _, _, slack = rk.schatten_certificate(p, rng.standard_normal((p.input_dim, 50)))
    assert slack >= -1e-9


# -- bottleneck profile and balancedness -------------------------------------------------

def test_rank_one_data_through_identity():
    X = np.outer([1.0, 2.0, 0.5], np.linspace(0.1, 1, 20))
    prof = rk.bottleneck_profile(identity_chain(3, 5), X)
    assert np.all(prof.ratios <= 1e-15)
    assert len(prof.spectra) == 4
    np.testing.assert_allclose(prof.nonlinearity_impact, 0.0)


def test_random_init_has_no_bottleneck():
    p = nw.init((10,) + (100,) * 5 + (10,), seed=0)
    X = np.random.default_rng(0).standard_normal((10, 200))
    prof = rk.bottleneck_profile(p, X)
    assert np.all(prof.ratios > 0.2)
    assert 0 <= prof.bottleneck_ratio <= 1
    assert 1 <= prof.bottleneck_layer <= 5


def test_constant_batch_is_degenerate():
    p = nw.init((2, 4, 1), seed=0)
    with pytest.raises(DegenerateBatch):
        rk.bottleneck_profile(p, np.ones((2, 5)))
    with pytest.raises(DegenerateBatch):
        rk.bottleneck_profile(p, np.ones((2, 1)))


def test_balanced_examples():
    assert np.all(rk.balancedness_residuals(identity_chain(3, 4)) == 0)
    p = NetworkParams([np.array([[1.0]]), np.array([[2.0]])], [np.zeros(1), np.zeros(1)], 0.0)
    np.testing.assert_allclose(rk.balancedness_residuals(p), [0.75])


# -- TSP ------------------------------------------------------------------------------

def test_tsp_collinear():
    length, order = rk.tsp_path(np.array([[0.0, 3.0, 1.0, 2.0]]))
    assert length == 3.0
    assert [0.0, 3.0, 1.0, 2.0][order[0]] in (0.0, 3.0)
    vals = np.array([0.0, 3.0, 1.0, 2.0])[order]
    assert np.all(np.diff(vals) > 0) or np.all(np.diff(vals) < 0)


def test_tsp_square_corners():
    sq = np.array([[0.0, 1.0, 1.0, 0.0], [0.0, 0.0, 1.0, 1.0]])
    assert rk.tsp_path(sq, "exact")[0] == 3.0
    assert rk.tsp_path(sq, "heuristic")[0] == 3.0


def test_tsp_exact_matches_brute_force():
    rng = np.random.default_rng(5)
    for n in range(2, 8):
        P = rng.random((2, n))
        assert rk.tsp_path(P, "exact")[0] == pytest.approx(brute_force_path(P), rel=1e-12)


def test_tsp_heuristic_close_on_small_instances():
    rng = np.random.default_rng(6)
    for _ in range(30):
        P = rng.random((2, 8))
        exact = rk.tsp_path(P, "exact")[0]
        heur = rk.tsp_path(P, "heuristic")[0]
        assert exact - 1e-12 <= heur <= 1.05 * exact


def test_tsp_order_is_a_permutation():
    P = np.random.default_rng(7).random((3, 40))
    length, order = rk.tsp_path(P)
    assert sorted(order) == list(range(40))
    assert length == pytest.approx(sum(np.linalg.norm(P[:, a] - P[:, b]) for a, b in zip(order, order[1:])))


def test_tsp_too_few_points():
    with pytest.raises(TooFewPoints):
        rk.tsp_path(np.zeros((2, 1)))


def test_lower_bound_examples():
    X = np.linspace(0, 1, 7)[None, :]
    b = rk.tsp_lower_bound(X, np.ones((2, 7)), 5)
    assert b.tsp_length == 0.0 and b.norm_lower_bound == 0.0
    b = rk.tsp_lower_bound(X, X, 5)
    assert b.tsp_length == pytest.approx(1.0) and b.diameter == 1.0
    assert b.norm_lower_bound == pytest.approx(5.0)
    assert b.mode == "exact"


def test_lower_bound_tsp_exceeds_output_diameter():
    rng = np.random.default_rng(8)
    X, Y = rng.standard_normal((3, 9)), rng.standard_normal((2, 9))
    b = rk.tsp_lower_bound(X, Y, 4)
    assert b.tsp_length >= rk.diameter(Y)


def test_lower_bound_degenerate():
    with pytest.raises(DegenerateInputs):
        rk.tsp_lower_bound(np.ones((2, 4)), np.random.default_rng(0).random((1, 4)), 3)


# -- rank-1 interpolator ---------------------------------------------------------------

def test_rank1_two_points():
    X = np.array([[0.0, 1.0], [1.0, 0.0]])
    Y = np.array([[1.0, -1.0]])
    p = rk.rank1_interpolator(X, Y, 3)
    np.testing.assert_allclose(nw.evaluate(p, X), Y, atol=1e-12)
    assert p.widths == (2, 1, 1, 1)


def test_rank1_fits_random_pairs():
    rng = np.random.default_rng(9)
    X, Y = rng.standard_normal((3, 10)), rng.standard_normal((2, 10))
    for L in (3, 4, 8):
        p = rk.rank1_interpolator(X, Y, L, seed=1)
        assert np.abs(nw.evaluate(p, X) - Y).max() <= 1e-8
        assert p.widths[1] == 1
        assert rk.jacobian_rank(p, 3 * rng.standard_normal((3, 500)))[0] == 1
        assert nw.param_norm(p) >= rk.tsp_lower_bound(X, Y, L).norm_lower_bound - 1e-6


def test_rank1_norm_shape():
    rng = np.random.default_rng(10)
    X, Y = rng.standard_normal((2, 6)), rng.standard_normal((1, 6))
    excess = [nw.param_norm(rk.rank1_interpolator(X, Y, L)) - L for L in (3, 5, 10, 40)]
    np.testing.assert_allclose(excess, excess[0], rtol=1e-12)


def test_rank1_leaky():
    rng = np.random.default_rng(11)
    X, Y = rng.standard_normal((3, 12)), rng.standard_normal((2, 12))
    p = rk.rank1_interpolator(X, Y, 6, a=0.3)
    assert p.leaky_slope == 0.3
    assert np.abs(nw.evaluate(p, X) - Y).max() <= 1e-8


def test_rank1_projection_collision():
    X = np.array([[1.0, 1.0, 2.0], [0.0, 0.0, 1.0]])
    with pytest.raises(ProjectionError):
        rk.rank1_interpolator(X, np.array([[0.0, 1.0, 2.0]]), 3)


# -- tripoints and denoising -----------------------------------------------------------

def wedges(P):
    angle = np.arctan2(P[1], P[0]) + np.pi
    return np.eye(3)[:, (angle // (2 * np.pi / 3)).astype(int) % 3]


def test_two_classes_have_no_tripoints():
    linear = lambda P: np.vstack([P[0] + 0.3 * P[1], -(P[0] + 0.3 * P[1])])
    assert rk.tripoints(linear, ([-1, -1], [1, 1], 60)).shape == (2, 0)


def test_three_wedges_one_cluster():
    count, centers = rk.tripoint_clusters(wedges, ([-1, -1], [1, 1], 81))
    assert count == 1
    assert np.linalg.norm(centers[:, 0]) < 0.05
    pts = rk.tripoints(wedges, ([-1, -1], [1, 1], 81))
    assert pts.shape[1] >= 1


class LineSampler:
    """Points on the x-axis segment [0, 1] in the plane."""

    def sample(self, n, seed=0):
        t = np.random.default_rng(seed).random(n)
        return np.vstack([t, np.zeros(n)])

    def distance(self, points, n=10_000):
        t = np.linspace(0, 1, n)
        P = np.asarray(points)
        dx = P[0][:, None] - t[None, :]
        return np.sqrt(np.min(dx**2, axis=1) + P[1] ** 2)


def test_denoising_identity_and_projection():
    ident = NetworkParams([np.eye(2)], [np.zeros(2)], 0.0)
    assert rk.denoising_score(ident, LineSampler(), 0.01, 100) == pytest.approx(1.0)
    project = lambda P: np.vstack([np.clip(P[0], 0, 1), np.zeros(P.shape[1])])
    # not exactly 0: distances are measured to a 10,000-point resampling
    assert rk.denoising_score(project, LineSampler(), 0.1, 100) <= 5e-3


# -- report ---------------------------------------------------------------------------

def test_report_round_trip():
    p = identity_chain(2, 4)
    report = rk.certify(p, np.random.default_rng(0).random((2, 10)), n_probes=50)
    assert report.jacobian_rank == 2
    assert abs(report.bound_slack) <= 1e-9
    assert rk.RankReport.from_text(report.to_text()) == report
    lines = report.to_csv().splitlines()
    assert lines[0].split(",") == list(rk.RankReport.FIELDS)
    assert len(lines) == 2
