import json
import struct

import numpy as np
import pytest
from scipy.optimize import linprog

from rankscope import datagen as dg
from rankscope import network as nw
from rankscope import rank as rk
from rankscope.errors import DimError, FormatError


def linearly_separable(A, B):
    """Feasibility of w.x + c >= 1 on A and <= -1 on B, as a linear program."""
    d = A.shape[0]
    rows = np.vstack([np.hstack([-A.T, -np.ones((A.shape[1], 1))]),
                      np.hstack([B.T, np.ones((B.shape[1], 1))])])
    res = linprog(np.zeros(d + 1), A_ub=rows, b_ub=-np.ones(rows.shape[0]), bounds=[(None, None)] * (d + 1))
    return res.status == 0


# -- low-rank regression data ----------------------------------------------------------

def test_reference_scale_shapes():
    ds = dg.synth_lowrank(50, 50, 15, 5, 64, seed=0)
    assert ds.X.shape == (50, 64) and ds.Y.shape == (50, 64)
    assert ds.meta["true_rank"] == 5 and ds.meta["latent_dim"] == 15


def test_lowrank_deterministic():
    a = dg.synth_lowrank(6, 4, 3, 2, 30, seed=5)
    b = dg.synth_lowrank(6, 4, 3, 2, 30, seed=5)
    np.testing.assert_array_equal(a.X, b.X)
    np.testing.assert_array_equal(a.Y, b.Y)
    assert a.to_csv() == b.to_csv()
    c = dg.synth_lowrank(6, 4, 3, 2, 30, seed=6)
    assert not np.array_equal(a.X, c.X)


def test_lowrank_rank_witness():
    ds = dg.synth_lowrank(10, 10, 5, 2, 200, seed=1)
    g, h = ds.generators["g"], ds.generators["h"]
    assert ds.meta["certified_rank"] == 2
    Z = np.random.default_rng(0).standard_normal((5, 1000))
    J, _ = nw.jacobians(h, Z[:2])
    full = np.concatenate([J, np.zeros((1000, 10, 3))], axis=2)
    assert max(np.linalg.matrix_rank(j, tol=1e-9) for j in full) <= 2
    np.testing.assert_allclose(ds.X, nw.evaluate(g, ds.Z))
    np.testing.assert_allclose(ds.Y, nw.evaluate(h, ds.Z[:2]))


def test_lowrank_full_latent_rank():
    ds = dg.synth_lowrank(6, 6, 3, 3, 50, seed=2)
    assert ds.meta["certified_rank"] == 3


def test_lowrank_noise():
    clean = dg.synth_lowrank(6, 4, 3, 2, 40, seed=3)
    noisy = dg.synth_lowrank(6, 4, 3, 2, 40, seed=3, noise=1e-3)
    diff = noisy.Y - clean.Y
    assert 0 < np.std(diff) < 2e-3


@pytest.mark.parametrize("args", [(4, 4, 3, 4, 10), (4, 4, 5, 2, 10), (4, 0, 3, 2, 10)])
def test_lowrank_dim_errors(args):
    with pytest.raises(DimError):
        dg.synth_lowrank(*args)


# -- S shapes --------------------------------------------------------------------------

def test_s_shape_class_means_increase():
    ds = dg.s_shape_classes(4, 50, seed=0)
    means = [ds.X[0, ds.labels == c].mean() for c in range(4)]
    assert np.all(np.diff(means) > 0)
    assert ds.labels.shape == (200,)


def test_s_shape_zero_jitter_on_curves():
    ds = dg.s_shape_classes(3, 40, seed=1, jitter=0.0, spacing=0.6)
    for c in range(3):
        pts = ds.X[:, ds.labels == c]
        shift = (c - 1) * 0.6
        np.testing.assert_allclose(pts[0] - shift, dg.s_curve(pts[1])[0], atol=1e-12)


def test_s_shape_adjacent_classes_not_linearly_separable():
    ds = dg.s_shape_classes(4, 50, seed=2)
    for c in range(3):
        assert not linearly_separable(ds.X[:, ds.labels == c], ds.X[:, ds.labels == c + 1])
    # sanity check of the oracle itself
    assert linearly_separable(np.zeros((2, 3)) - 1, np.ones((2, 3)))


def test_s_shape_needs_two_classes():
    with pytest.raises(DimError):
        dg.s_shape_classes(1, 10)


# -- curve in the plane -----------------------------------------------------------------

def test_curve1d_meta_and_generator():
    ds = dg.curve1d_in_plane(100, seed=0)
    assert ds.meta["true_rank"] == 1
    np.testing.assert_array_equal(ds.X, ds.Y)
    np.testing.assert_array_equal(ds.X, nw.evaluate(ds.generators["g"], ds.Z))


def test_curve1d_dense_resampling_converges():
    sampler = dg.curve1d_in_plane(50, seed=1).generators["sampler"]
    fresh = sampler.sample(200, seed=9)
    dists = [sampler.distance(fresh, n).max() for n in (100, 1000, 10_000)]
    assert dists[0] > dists[1] > dists[2]
    assert dists[2] < 1e-3


def test_curve1d_unit_extent():
    sampler = dg.curve1d_in_plane(50, seed=2).generators["sampler"]
    assert sampler.extent() == pytest.approx(1.0, rel=1e-2)


# -- x-cross ------------------------------------------------------------------------------

def test_xcross_values():
    f = dg.xcross_fixture()
    np.testing.assert_array_equal(f(np.array([[1.0], [0.5]]))[:, 0], [0.5, 0.5])
    np.testing.assert_array_equal(f(np.array([[-0.5], [2.0]]))[:, 0], [-0.5, 0.5])
    np.testing.assert_array_equal(f(np.array([[3.0], [0.0]]))[:, 0], [0.0, 0.0])


def test_xcross_continuous_across_boundaries():
    f = dg.xcross_fixture()
    t = np.random.default_rng(1).uniform(-2, 2, 500)
    eps = 1e-12
    # the diagonals |x0| = |x1| and both axes separate the linear regions
    for edge in (np.vstack([t, t]), np.vstack([t, -t]), np.vstack([t, 0 * t]), np.vstack([0 * t, t])):
        for step in np.eye(2):
            np.testing.assert_allclose(f(edge + eps * step[:, None]), f(edge - eps * step[:, None]), atol=1e-9)


def test_xcross_identity_on_cross():
    f = dg.xcross_fixture()
    t = np.linspace(-3, 3, 61)
    for X in (np.vstack([t, t]), np.vstack([t, -t])):
        np.testing.assert_array_equal(f(X), X)


def test_xcross_jacobian_matches_finite_differences():
    f = dg.xcross_fixture()
    rng = np.random.default_rng(0)
    for x in rng.uniform(-2, 2, (200, 2)):
        if abs(abs(x[0]) - abs(x[1])) < 1e-3 or min(abs(x)) < 1e-3:
            continue
        h = 1e-6
        fd = np.column_stack([(f((x + h * e)[:, None]) - f((x - h * e)[:, None]))[:, 0] / (2 * h) for e in np.eye(2)])
        np.testing.assert_allclose(f.jacobian(x), fd, atol=1e-8)
        assert np.linalg.matrix_rank(f.jacobian(x)) == 1


# -- dataset CSV ---------------------------------------------------------------------------

def test_dataset_csv_round_trip():
    ds = dg.synth_lowrank(4, 3, 2, 1, 20, seed=0)
    text = ds.to_csv()
    back = dg.Dataset.from_csv(text)
    np.testing.assert_array_equal(back.X, ds.X)
    np.testing.assert_array_equal(back.Y, ds.Y)
    assert back.meta == json.loads(json.dumps(ds.meta))
    assert back.to_csv() == text


def test_labeled_csv_round_trip():
    ds = dg.s_shape_classes(3, 5, seed=0)
    back = dg.Dataset.from_csv(ds.to_csv())
    np.testing.assert_array_equal(back.labels, ds.labels)
    assert back.Y is None


def test_dataset_csv_errors():
    with pytest.raises(FormatError):
        dg.Dataset.from_csv("x0,y0\n1,2\n")
    with pytest.raises(FormatError):
        dg.Dataset.from_csv('# rankscope-dataset v1 {}\nx0,y0\n1,abc\n')


def test_dataset_validation():
    with pytest.raises(DimError):
        dg.Dataset(np.ones((2, 3)), np.ones((1, 4)))
    with pytest.raises(DimError):
        dg.Dataset(np.ones((2, 3)), np.ones((1, 3)), meta={"true_rank": 2})


# -- IDX -------------------------------------------------------------------------------------

def authored_idx(tmp_path):
    pixels = bytes([0, 255, 128, 1, 2, 3, 4, 5, 6,
                    10, 20, 30, 40, 50, 60, 70, 80, 90])
    images = struct.pack(">IIII", 0x00000803, 2, 3, 3) + pixels
    labels = struct.pack(">II", 0x00000801, 2) + bytes([7, 3])
    (tmp_path / "img.idx").write_bytes(images)
    (tmp_path / "lab.idx").write_bytes(labels)
    return tmp_path / "img.idx", tmp_path / "lab.idx", pixels


def test_idx_authored_bytes(tmp_path):
    img, lab, pixels = authored_idx(tmp_path)
    ds = dg.load_idx(img, lab)
    assert ds.X.shape == (9, 2)
    np.testing.assert_array_equal(ds.X[:, 0], np.array(list(pixels[:9])) / 255.0)
    np.testing.assert_array_equal(ds.X[:, 1], np.array(list(pixels[9:])) / 255.0)
    assert ds.X[1, 0] == 1.0 and ds.X[0, 0] == 0.0
    np.testing.assert_array_equal(ds.labels, [7, 3])
    assert ds.meta["image_shape"] == [3, 3]


def test_idx_write_read_round_trip(tmp_path):
    arr = np.random.default_rng(0).integers(0, 256, (4, 2, 5)).astype(np.uint8)
    dg.write_idx(tmp_path / "a.idx", arr)
    np.testing.assert_array_equal(dg.load_idx(tmp_path / "a.idx").X * 255, arr.reshape(4, -1).T)


@pytest.mark.parametrize("blob", [
    b"",
    struct.pack(">I", 0x00000802) + struct.pack(">II", 1, 1) + b"\x00",
    struct.pack(">IIII", 0x00000803, 2, 3, 3) + bytes(10),
    struct.pack(">II", 0x00000803, 2),
])
def test_idx_format_errors(tmp_path, blob):
    (tmp_path / "bad.idx").write_bytes(blob)
    with pytest.raises(FormatError):
        dg.load_idx(tmp_path / "bad.idx")


def test_idx_count_mismatch(tmp_path):
    img, _, _ = authored_idx(tmp_path)
    (tmp_path / "lab3.idx").write_bytes(struct.pack(">II", 0x00000801, 3) + bytes([1, 2, 3]))
    with pytest.raises(FormatError):
        dg.load_idx(img, tmp_path / "lab3.idx")
