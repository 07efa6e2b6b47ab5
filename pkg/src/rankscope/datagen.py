"""Synthetic datasets, closed-form fixtures and an IDX (MNIST) reader.

Every generator is a pure function of its arguments and seed. Inputs and
outputs are stored column-wise: ``X`` has shape (d_in, N).
"""
from __future__ import annotations

import csv
import io
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import network as nw
from .errors import DimError, FormatError
from .linalg import numerical_rank, singular_values
from .network import NetworkParams, PiecewiseLinearFn

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
DATASET_MAGIC = "rankscope-dataset v1"


@dataclass
class Dataset:
    """Inputs ``X`` (d_in x N) with targets ``Y`` (d_out x N) and/or integer labels.

    ``meta`` holds JSON-serializable generation metadata (``true_rank``,
    ``latent_dim``, ``seed``, ``domain_box``, ...). ``Z`` keeps the latent
    samples of synthetic data and ``generators`` the maps that produced it;
    neither is serialized.
    """

    X: np.ndarray
    Y: np.ndarray | None = None
    labels: np.ndarray | None = None
    meta: dict = field(default_factory=dict)
    Z: np.ndarray | None = None
    generators: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        n = self.X.shape[1]
        if self.Y is not None:
            self.Y = np.asarray(self.Y, dtype=np.float64)
            if self.Y.shape[1] != n:
                raise DimError("X and Y have different column counts")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (n,):
                raise DimError("need exactly one label per column")
        k = self.meta.get("true_rank")
        if k is not None and self.Y is not None and k > min(self.X.shape[0], self.Y.shape[0]):
            raise DimError("true rank exceeds min(d_in, d_out)")

    @property
    def N(self) -> int:
        return self.X.shape[1]

    @property
    def d_in(self) -> int:
        return self.X.shape[0]

    @property
    def d_out(self) -> int:
        return self.Y.shape[0] if self.Y is not None else int(self.labels.max()) + 1

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(f"# {DATASET_MAGIC} {json.dumps(self.meta, sort_keys=True)}\n")
        w = csv.writer(buf, lineterminator="\n")
        head = [f"x{i}" for i in range(self.d_in)]
        if self.Y is not None:
            head += [f"y{i}" for i in range(self.Y.shape[0])]
        if self.labels is not None:
            head.append("label")
        w.writerow(head)
        for j in range(self.N):
            row = [format(v, ".17g") for v in self.X[:, j]]
            if self.Y is not None:
                row += [format(v, ".17g") for v in self.Y[:, j]]
            if self.labels is not None:
                row.append(str(int(self.labels[j])))
            w.writerow(row)
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "Dataset":
        first, _, rest = text.partition("\n")
        prefix = f"# {DATASET_MAGIC} "
        if not first.startswith(prefix):
            raise FormatError("missing rankscope-dataset v1 header")
        try:
            meta = json.loads(first[len(prefix):])
        except json.JSONDecodeError as exc:
            raise FormatError(f"bad metadata: {exc}") from exc
        rows = list(csv.reader(io.StringIO(rest)))
        if not rows:
            raise FormatError("missing column header")
        head, body = rows[0], [r for r in rows[1:] if r]
        xs = [i for i, h in enumerate(head) if h.startswith("x")]
        ys = [i for i, h in enumerate(head) if h.startswith("y")]
        lab = head.index("label") if "label" in head else None
        try:
            arr = np.array([[float(v) for v in r] for r in body]).reshape(len(body), len(head))
        except ValueError as exc:
            raise FormatError(f"bad numeric row: {exc}") from exc
        return cls(
            X=arr[:, xs].T.copy(),
            Y=arr[:, ys].T.copy() if ys else None,
            labels=arr[:, lab].astype(np.int64) if lab is not None else None,
            meta=meta,
        )


def _box(X):
    return [X.min(axis=1).tolist(), X.max(axis=1).tolist()]


def certify_rank(h: NetworkParams, k: int, latent_dim: int, Z, rel_tol=1e-3) -> int:
    """Max numerical rank of the Jacobian of ``z -> h(z[:k])`` over columns of ``Z``."""
    J, _ = nw.jacobians(h, Z[:k])
    full = np.zeros((J.shape[0], J.shape[1], latent_dim))
    full[:, :, :k] = J
    return max(numerical_rank(singular_values(j), rel_tol) for j in full)


def synth_lowrank(
    d_in: int,
    d_out: int,
    latent_dim: int,
    k: int,
    N: int,
    seed: int = 0,
    widths: int = 100,
    noise: float = 0.0,
    max_reseeds: int = 20,
) -> Dataset:
    """Rank-``k`` regression data ``x = g(z)``, ``y = h(z_1..z_k)``.

    ``z`` is standard normal in R^latent_dim; ``g`` and ``h`` are random
    shallow ReLU networks with ``widths`` hidden units drawn with
    :func:`rankscope.network.init` (scale 1, zero biases). ``noise`` adds
    i.i.d. Gaussian noise of that standard deviation to ``Y``.
    """
    if not (1 <= k <= latent_dim <= d_in) or d_out < 1 or N < 1:
        raise DimError(f"need 1 <= k <= latent_dim <= d_in, got k={k}, latent={latent_dim}, d_in={d_in}")
    for attempt in range(max_reseeds):
        ss = np.random.SeedSequence([seed, attempt])
        s_z, s_g, s_h, s_n = (int(c.generate_state(1)[0]) for c in ss.spawn(4))
        Z = np.random.default_rng(s_z).standard_normal((latent_dim, N))
        g = nw.init((latent_dim, widths, d_in), 0.0, seed=s_g)
        h = nw.init((k, widths, d_out), 0.0, seed=s_h)
        X = nw.evaluate(g, Z)
        if N > 1 and _min_pair_distance(X) <= 1e-9:
            continue
        Y = nw.evaluate(h, Z[:k])
        if noise:
            Y = Y + noise * np.random.default_rng(s_n).standard_normal(Y.shape)
        break
    else:
        raise DimError("could not draw an injective input map; increase width or d_in")
    probes = Z[:, : min(N, 1000)]
    certified = certify_rank(h, k, latent_dim, probes)
    meta = {
        "kind": "lowrank",
        "latent_dim": latent_dim,
        "true_rank": k,
        "certified_rank": certified,
        "seed": seed,
        "noise": noise,
        "domain_box": _box(X),
    }
    return Dataset(X, Y, meta=meta, Z=Z, generators={"g": g, "h": h})


def _min_pair_distance(X) -> float:
    from scipy.spatial import cKDTree

    d, _ = cKDTree(X.T).query(X.T, k=2)
    return float(d[:, 1].min())


def s_curve(t, amplitude=0.5):
    """Inverted S traced for t in [-1, 1]: x = -amplitude * sin(pi t), y = t."""
    t = np.asarray(t, dtype=np.float64)
    return np.vstack([-amplitude * np.sin(np.pi * t), t])


def s_shape_classes(
    n_classes: int = 4,
    N_per_class: int = 50,
    seed: int = 0,
    spacing: float = 0.6,
    jitter: float = 0.03,
) -> Dataset:
    """Identical inverted S curves translated along x, one per class.

    ``jitter`` is the standard deviation of the Gaussian noise relative to
    the vertical extent of one curve (2).
    """
    if n_classes < 2:
        raise DimError("need at least two classes")
    rng = np.random.default_rng(seed)
    xs, labels = [], []
    for c in range(n_classes):
        t = rng.uniform(-1.0, 1.0, N_per_class)
        pts = s_curve(t)
        pts[0] += c * spacing
        pts += jitter * 2.0 * rng.standard_normal(pts.shape)
        xs.append(pts)
        labels.append(np.full(N_per_class, c))
    X = np.hstack(xs)
    X[0] -= spacing * (n_classes - 1) / 2
    meta = {
        "kind": "s_shape",
        "n_classes": n_classes,
        "seed": seed,
        "spacing": spacing,
        "jitter": jitter,
        "domain_box": _box(X),
    }
    return Dataset(X, labels=np.concatenate(labels), meta=meta)


@dataclass(frozen=True)
class CurveSampler:
    """Dense resampling of a curve ``z -> g(z)`` for manifold-distance queries."""

    g: NetworkParams
    z_range: tuple

    def dense(self, n: int = 10_000) -> np.ndarray:
        z = np.linspace(self.z_range[0], self.z_range[1], n)[None, :]
        return nw.evaluate(self.g, z)

    def sample(self, n: int, seed: int = 0) -> np.ndarray:
        z = np.random.default_rng(seed).standard_normal((1, n))
        z = np.clip(z, *self.z_range)
        return nw.evaluate(self.g, z)

    def extent(self) -> float:
        pts = self.dense(2000)
        return float(np.max(pts.max(axis=1) - pts.min(axis=1)))

    def distance(self, points, n: int = 10_000) -> np.ndarray:
        """Distance from each column of ``points`` to the dense resampling."""
        from scipy.spatial import cKDTree

        d, _ = cKDTree(self.dense(n).T).query(np.asarray(points).T)
        return d


def curve1d_in_plane(N: int = 200, seed: int = 0, width: int = 16, z_clip: float = 3.0) -> Dataset:
    """Autoencoder data on a 1-D piecewise linear curve in R^2 (``Y = X``).

    ``g: R -> R^2`` is a random shallow ReLU network with Gaussian weights
    and biases, rescaled so the curve has unit extent. Latent samples are
    standard normal, clipped to ``[-z_clip, z_clip]``.
    """
    for attempt in range(20):
        rng = np.random.default_rng([seed, attempt])
        w1 = rng.standard_normal((width, 1))
        b1 = rng.standard_normal(width)
        w2 = rng.standard_normal((2, width)) / np.sqrt(width)
        g = NetworkParams([w1, w2], [b1, np.zeros(2)], 0.0)
        dense = nw.evaluate(g, np.linspace(-z_clip, z_clip, 4000)[None, :])
        ext = float(np.max(dense.max(axis=1) - dense.min(axis=1)))
        center = dense.mean(axis=1)
        g = NetworkParams([w1, w2 / ext], [b1, -center / ext], 0.0)
        Z = np.clip(rng.standard_normal((1, N)), -z_clip, z_clip)
        X = nw.evaluate(g, Z)
        dense = nw.evaluate(g, np.linspace(-z_clip, z_clip, 4000)[None, :])
        if _is_simple_curve(dense) and _min_pair_distance(X) > 1e-9:
            break
    else:
        raise DimError("could not draw a non-self-intersecting curve")
    sampler = CurveSampler(g, (-z_clip, z_clip))
    meta = {"kind": "curve1d", "latent_dim": 1, "true_rank": 1, "seed": seed, "domain_box": _box(X)}
    return Dataset(X, X.copy(), meta=meta, Z=Z, generators={"g": g, "sampler": sampler})


def _is_simple_curve(pts, min_gap=0.02) -> bool:
    """Reject curves whose far-apart arcs come within ``min_gap`` of each other."""
    from scipy.spatial import cKDTree

    seg = np.linalg.norm(np.diff(pts, axis=1), axis=0)
    s = np.concatenate([[0.0], np.cumsum(seg)])
    tree = cKDTree(pts.T)
    for i, j in tree.query_pairs(min_gap):
        if abs(s[i] - s[j]) > 3 * min_gap:
            return False
    return True


def _xcross_eval(X):
    X = np.asarray(X, dtype=np.float64)
    x0, x1 = X[0], X[1]
    first = np.abs(x0) <= np.abs(x1)
    out = np.empty_like(X)
    out[0] = np.where(first, x0, np.sign(x0) * np.abs(x1))
    out[1] = np.where(first, np.sign(x1) * np.abs(x0), x1)
    return out


def _xcross_jac(x):
    x0, x1 = float(x[0]), float(x[1])
    s = np.sign(x0) * np.sign(x1)
    if abs(x0) <= abs(x1):
        return np.array([[1.0, 0.0], [s, 0.0]])
    return np.array([[0.0, s], [0.0, 1.0]])


def xcross_fixture() -> PiecewiseLinearFn:
    """Map (x0, x1) to (x0, sign(x1)|x0|) if |x0| <= |x1|, else (sign(x0)|x1|, x1).

    Equivalently ``(sign(x0), sign(x1)) * min(|x0|, |x1|)``: every point is
    sent to the diagonal of its quadrant. The map is continuous, equal to
    the identity on the diagonals |x0| = |x1|, and has a rank-1 Jacobian
    inside every linear region. The branch with the larger coordinate kept
    as is would jump across the axes, so the smaller coordinate is kept.
    """
    return PiecewiseLinearFn(_xcross_eval, _xcross_jac, 2, 2, name="xcross")


def _read_idx(path, magic):
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise FormatError(f"{path}: file too short for an IDX header")
    (found,) = struct.unpack(">I", raw[:4])
    if found != magic:
        raise FormatError(f"{path}: bad magic 0x{found:08x}, expected 0x{magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise FormatError(f"{path}: truncated dimension header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    count = int(np.prod(dims))
    if len(raw) - header != count:
        raise FormatError(f"{path}: expected {count} data bytes, found {len(raw) - header}")
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)


def load_idx(images_path, labels_path=None) -> Dataset:
    """Read IDX unsigned-byte images (and optionally labels).

    Pixels are scaled to [0, 1] and each image becomes one column of ``X``;
    ``Y`` is set to ``X`` so the result can be used as autoencoder data.
    """
    images = _read_idx(images_path, IDX_IMAGES_MAGIC)
    n = images.shape[0]
    X = images.reshape(n, -1).T.astype(np.float64) / 255.0
    labels = None
    if labels_path is not None:
        labels = _read_idx(labels_path, IDX_LABELS_MAGIC).astype(np.int64)
        if labels.shape[0] != n:
            raise FormatError(f"{n} images but {labels.shape[0]} labels")
    meta = {"kind": "idx", "image_shape": list(images.shape[1:])}
    return Dataset(X, X.copy(), labels=labels, meta=meta)


def write_idx(path, array: np.ndarray) -> None:
    """Write a uint8 array as IDX (3-D arrays as images, 1-D as labels)."""
    a = np.asarray(array, dtype=np.uint8)
    magic = 0x00000800 | a.ndim
    with open(path, "wb") as fh:
        fh.write(struct.pack(">I", magic))
        fh.write(struct.pack(f">{a.ndim}I", *a.shape))
        fh.write(a.tobytes())
