"""Rank certificates and diagnostics for trained or constructed networks.

Everything here is probe-based: Jacobian ranks and Schatten values are
maxima over a finite set of input points, never certified over a
continuum.
"""
from __future__ import annotations

import csv
import io
import itertools
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import network as nw
from .errors import (
    DegenerateBatch,
    DegenerateInputs,
    NoProbes,
    ProjectionError,
    TooFewPoints,
)
from .linalg import DEFAULT_REL_TOL, SingularSpectrum, numerical_rank, singular_values
from .network import NetworkParams, PiecewiseLinearFn

EXACT_TSP_MAX = 10


def _as_fn(f) -> PiecewiseLinearFn:
    if isinstance(f, NetworkParams):
        return nw.as_function(f)
    return f


def _columns(points, dim=None) -> np.ndarray:
    P = np.asarray(points, dtype=np.float64)
    if P.ndim == 1:
        P = P[:, None]
    if dim is not None and P.shape[0] != dim and P.shape[1] == dim:
        P = P.T
    return P


def _batch_singular_values(J: np.ndarray) -> np.ndarray:
    """Singular values of a stack of matrices, shape (batch, min(m, n))."""
    return np.linalg.svd(J, compute_uv=False)


def default_probes(domain_box, X=None, n: int = 1000, seed: int = 0, perturb: float = 1e-3) -> np.ndarray:
    """Uniform samples from ``domain_box`` plus jittered copies of ``X``'s columns.

    The jitter has standard deviation ``perturb`` times the box size per
    coordinate, which moves training points off measure-zero region
    boundaries.
    """
    rng = np.random.default_rng(seed)
    lo = np.asarray(domain_box[0], dtype=np.float64).reshape(-1, 1)
    hi = np.asarray(domain_box[1], dtype=np.float64).reshape(-1, 1)
    probes = [lo + (hi - lo) * rng.random((lo.shape[0], n))]
    if X is not None:
        X = np.asarray(X, dtype=np.float64)
        scale = np.maximum(hi - lo, 1e-12)
        probes.append(X + perturb * scale * rng.standard_normal(X.shape))
    return np.hstack(probes)


def jacobian_rank(f, probes, rel_tol: float = DEFAULT_REL_TOL) -> tuple[int, np.ndarray]:
    """Largest numerical rank of the Jacobian over the probe columns.

    Returns ``(rank, probe)`` where ``probe`` attains the maximum.
    """
    f = _as_fn(f)
    P = _columns(probes, f.input_dim)
    if P.size == 0 or P.shape[1] == 0:
        raise NoProbes("jacobian_rank needs at least one probe")
    s = _batch_singular_values(f.batch_jacobians(P))
    ranks = [numerical_rank(row, rel_tol) for row in s]
    i = int(np.argmax(ranks))
    return ranks[i], P[:, i].copy()


def schatten_certificate(p: NetworkParams, probes) -> tuple[float, float, float]:
    """Check ``||Jf(x)||_{2/L}^{2/L} <= ||W||^2 / L`` at every probe.

    Returns ``(max_value, bound, slack)`` with ``slack = bound - max_value``.
    """
    P = _columns(probes, p.input_dim)
    bound = nw.param_norm(p) / p.depth
    if P.shape[1] == 0:
        return 0.0, bound, bound
    J, _ = nw.jacobians(p, P)
    s = _batch_singular_values(J)
    expo = 2.0 / p.depth
    values = np.sum(np.where(s > 0, s, 0.0) ** expo, axis=1)
    max_value = float(values.max())
    return max_value, bound, bound - max_value


@dataclass(frozen=True)
class BottleneckProfile:
    """Per-hidden-layer activation spectra; index ``i`` is layer ``i + 1``."""

    spectra: list
    ratios: np.ndarray
    nonlinearity_impact: np.ndarray
    weight_spectra: list

    @property
    def bottleneck_layer(self) -> int:
        """1-based hidden layer with the smallest s_2 / s_1."""
        return int(np.argmin(self.ratios)) + 1

    @property
    def bottleneck_ratio(self) -> float:
        return float(np.min(self.ratios))

    def ranks(self, rel_tol: float = DEFAULT_REL_TOL) -> list[int]:
        return [numerical_rank(s, rel_tol) for s in self.spectra]


def bottleneck_profile(p: NetworkParams, X) -> BottleneckProfile:
    """Spectra of the activation matrices ``Z_l`` (neurons x samples) of ``X``.

    Also returns ``||Z~_l - Z_l||_F / ||Z~_l||_F`` (how much the nonlinearity
    changes each layer) and the spectra of every weight matrix.
    """
    X = _columns(X, p.input_dim)
    if X.shape[1] < 2:
        raise DegenerateBatch("need at least two inputs")
    out, trace = nw.forward(p, X)
    if np.allclose(out, out[:, :1], rtol=0, atol=1e-12 * (1 + np.abs(out).max())):
        raise DegenerateBatch("network outputs are constant on this batch")
    spectra, ratios, impact = [], [], []
    for ell in range(1, p.depth):
        Z = trace.activations[ell]
        pre = trace.preactivations[ell - 1]
        s = singular_values(Z)
        spectra.append(s)
        ratios.append(s.ratio(2))
        denom = np.linalg.norm(pre)
        impact.append(float(np.linalg.norm(pre - Z) / denom) if denom > 0 else 0.0)
    return BottleneckProfile(
        spectra=spectra,
        ratios=np.array(ratios),
        nonlinearity_impact=np.array(impact),
        weight_spectra=[singular_values(w) for w in p.weights],
    )


def balancedness_residuals(p: NetworkParams, eps: float = 1e-12) -> np.ndarray:
    """``|(||W_l||^2 + ||b_l||^2) - ||W_{l+1}||^2| / max(||W_{l+1}||^2, eps)`` for l < L."""
    res = []
    for ell in range(p.depth - 1):
        lhs = float(np.sum(p.weights[ell] ** 2) + np.sum(p.biases[ell] ** 2))
        rhs = float(np.sum(p.weights[ell + 1] ** 2))
        res.append(abs(lhs - rhs) / max(rhs, eps))
    return np.array(res)


# -- traveling salesman paths --------------------------------------------------

def _distance_matrix(P):
    diff = P[:, :, None] - P[:, None, :]
    return np.sqrt(np.sum(diff * diff, axis=0))


def _path_length(D, order) -> float:
    order = np.asarray(order)
    return float(np.sum(D[order[:-1], order[1:]]))


def _exact_path(D):
    n = D.shape[0]
    if n == 2:
        return float(D[0, 1]), [0, 1]
    best, best_order = math.inf, None
    inner = np.array(list(itertools.permutations(range(n - 2))), dtype=np.intp)
    for first, last in itertools.combinations(range(n), 2):
        rest = np.array([i for i in range(n) if i != first and i != last], dtype=np.intp)
        mids = rest[inner]
        lengths = D[first, mids[:, 0]] + D[mids[:, -1], last]
        if n > 3:
            lengths = lengths + np.sum(D[mids[:, :-1], mids[:, 1:]], axis=1)
        j = int(np.argmin(lengths))
        if lengths[j] < best:
            best = float(lengths[j])
            best_order = [first, *mids[j].tolist(), last]
    return best, best_order


def _nearest_neighbor(D, start):
    n = D.shape[0]
    visited = np.zeros(n, dtype=bool)
    order = [start]
    visited[start] = True
    for _ in range(n - 1):
        d = np.where(visited, np.inf, D[order[-1]])
        nxt = int(np.argmin(d))
        order.append(nxt)
        visited[nxt] = True
    return np.array(order)


def _two_opt(D, order, tol=1e-12):
    """Best-improvement 2-opt on an open path (segment reversals)."""
    n = len(order)
    order = order.copy()
    upper = np.triu(np.ones((n, n), dtype=bool), k=1)
    while True:
        Do = D[np.ix_(order, order)]
        edge = np.diagonal(Do, offset=1)
        a = np.concatenate([[0.0], edge])   # edge entering position i
        b = np.concatenate([edge, [0.0]])   # edge leaving position j
        c = np.zeros((n, n))
        c[1:, :] = Do[:-1, :]                # d(o[i-1], o[j])
        e = np.zeros((n, n))
        e[:, :-1] = Do[:, 1:]                # d(o[i], o[j+1])
        delta = c + e - a[:, None] - b[None, :]
        delta[~upper] = 0.0
        i, j = np.unravel_index(int(np.argmin(delta)), delta.shape)
        if delta[i, j] >= -tol:
            return order
        order[i: j + 1] = order[i: j + 1][::-1]


def _heuristic_path(D, n_starts=None):
    n = D.shape[0]
    if n_starts is None:
        n_starts = n if n <= 30 else 8
    starts = np.unique(np.linspace(0, n - 1, min(n, n_starts)).round().astype(int))
    best, best_order = math.inf, None
    for s in starts:
        order = _two_opt(D, _nearest_neighbor(D, int(s)))
        length = _path_length(D, order)
        if length < best - 1e-15:
            best, best_order = length, order.tolist()
    return best, best_order


def tsp_path(points, mode: str = "auto") -> tuple[float, list[int]]:
    """Shortest open path through the columns of ``points``.

    ``mode="exact"`` enumerates permutations (N <= 10), ``"heuristic"``
    runs nearest neighbour followed by 2-opt from several starts, and
    ``"auto"`` picks exact up to N = 10.
    """
    P = _columns(points)
    n = P.shape[1]
    if n < 2:
        raise TooFewPoints(f"need at least 2 points, got {n}")
    if mode == "auto":
        mode = "exact" if n <= EXACT_TSP_MAX else "heuristic"
    D = _distance_matrix(P)
    if mode == "exact":
        if n > EXACT_TSP_MAX:
            raise ValueError(f"exact mode supports at most {EXACT_TSP_MAX} points")
        return _exact_path(D)
    if mode == "heuristic":
        return _heuristic_path(D)
    raise ValueError(f"unknown mode {mode!r}")


@dataclass(frozen=True)
class TspBound:
    tsp_length: float
    diameter: float
    L: int
    norm_lower_bound: float
    mode: str


def diameter(X) -> float:
    X = _columns(X)
    if X.shape[1] < 2:
        return 0.0
    from scipy.spatial.distance import pdist

    return float(pdist(X.T).max())


def tsp_lower_bound(X, Y, L: int, mode: str = "auto") -> TspBound:
    """Norm any rank-1 interpolator of (X, Y) must pay: L (TSP(Y) / diam(X))^(2/L)."""
    X = _columns(X)
    Y = _columns(Y)
    if Y.shape[1] != X.shape[1] and Y.shape[0] == X.shape[1]:
        Y = Y.T
    diam = diameter(X)
    if not diam > 0:
        raise DegenerateInputs("inputs have zero diameter")
    n = Y.shape[1]
    if mode == "auto":
        mode = "exact" if n <= EXACT_TSP_MAX else "heuristic"
    length, _ = tsp_path(Y, mode)
    bound = L * (length / diam) ** (2.0 / L)
    return TspBound(length, diam, int(L), bound, mode)


def _rank1_pieces(u, X, Y):
    """Sorted knots and slope increments of the 1-D interpolant along ``u``."""
    proj = u @ X
    order = np.argsort(proj, kind="stable")
    sp = proj[order]
    span = sp[-1] - sp[0]
    if not (span > 0 and np.min(np.diff(sp)) > 1e-9 * span):
        return None
    mu = sp[0]
    tau = sp - mu
    Ys = Y[:, order]
    slopes = np.diff(Ys, axis=1) / np.diff(tau)
    kinks = np.diff(np.hstack([np.zeros((Y.shape[0], 1)), slopes]), axis=1)
    knots = tau[:-1]
    a_cost = 1.0 + mu**2 + float(np.sum(knots**2))
    b_cost = float(np.sum(kinks**2))
    return mu, knots, kinks, Ys[:, 0].copy(), a_cost, b_cost


def rank1_interpolator(X, Y, L: int, seed: int = 0, a: float = 0.0, max_retries: int = 20,
                       n_directions: int = 16) -> NetworkParams:
    """Depth-``L`` network with a width-1 layer that interpolates (X, Y).

    Inputs are projected on a unit direction, shifted to start at 0, sent
    through ``L - 3`` width-1 identity layers, and mapped to the outputs by
    the piecewise linear interpolant of the sorted projections (one hidden
    layer of ``N - 1`` hinges). Among ``n_directions`` random directions
    the cheapest one is kept, and the projection scale is chosen to
    minimize the resulting parameter norm.
    """
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if Y.ndim == 1:
        Y = Y[None, :]
    d_in, n = X.shape
    if n < 2:
        raise TooFewPoints("need at least two points")
    if L < 3:
        raise ValueError("rank-1 interpolation needs depth >= 3")
    rng = np.random.default_rng(seed)
    best, best_cost, tries = None, math.inf, 0
    while tries < max_retries + n_directions and (best is None or tries < n_directions):
        tries += 1
        u = rng.standard_normal(d_in)
        u /= np.linalg.norm(u)
        pieces = _rank1_pieces(u, X, Y)
        if pieces is None:
            continue
        a_cost, b_cost = pieces[4], pieces[5]
        cost = 2.0 * math.sqrt(a_cost * b_cost) if b_cost > 0 else a_cost
        if cost < best_cost:
            best, best_cost = (u, pieces), cost
    if best is None:
        raise ProjectionError("could not find a projection separating all inputs")
    u, (mu, knots, kinks, y0, a_cost, b_cost) = best
    s = (b_cost / a_cost) ** 0.25 if b_cost > 0 else 1.0

    w1 = (s * u)[None, :]
    b1 = np.array([-s * mu])
    hid_w = np.ones((n - 1, 1))
    hid_b = -s * knots
    out_w = kinks / s
    if a != 0.0:
        c = 1.0 / (1.0 - a**2)
        hid_w = np.vstack([hid_w, -hid_w])
        hid_b = np.concatenate([hid_b, -hid_b])
        out_w = np.hstack([c * out_w, a * c * out_w])
    weights = [w1] + [np.ones((1, 1))] * (L - 3) + [hid_w, out_w]
    biases = [b1] + [np.zeros(1)] * (L - 3) + [hid_b, y0]
    return NetworkParams(weights, biases, a)


# -- classification topology -----------------------------------------------------

def _scores(classifier, P):
    if isinstance(classifier, NetworkParams):
        return nw.evaluate(classifier, P)
    return np.asarray(classifier(P))


def class_grid(classifier, grid):
    """Predicted class at each cell center of ``grid = (lo, hi, resolution)``."""
    lo, hi, res = grid
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    res = (int(res), int(res)) if np.isscalar(res) else tuple(int(r) for r in res)
    spacing = (hi - lo) / np.array(res)
    xs = lo[0] + spacing[0] * (np.arange(res[0]) + 0.5)
    ys = lo[1] + spacing[1] * (np.arange(res[1]) + 0.5)
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    centers = np.vstack([gx.ravel(), gy.ravel()])
    classes = np.argmax(_scores(classifier, centers), axis=0).reshape(res)
    return classes, gx, gy, spacing


def _tripoint_mask(classes, spacing, radius):
    n_classes = int(classes.max()) + 1
    rx = int(math.floor(radius / spacing[0]))
    ry = int(math.floor(radius / spacing[1]))
    present = np.zeros((n_classes,) + classes.shape, dtype=bool)
    onehot = classes[None] == np.arange(n_classes)[:, None, None]
    nx, ny = classes.shape
    for dx in range(-rx, rx + 1):
        for dy in range(-ry, ry + 1):
            if math.hypot(dx * spacing[0], dy * spacing[1]) > radius:
                continue
            src = onehot[:, max(0, dx): nx + min(0, dx), max(0, dy): ny + min(0, dy)]
            present[:, max(0, -dx): nx + min(0, -dx), max(0, -dy): ny + min(0, -dy)] |= src
    return present.sum(axis=0) >= 3


def tripoints(classifier, grid, radius: float | None = None) -> np.ndarray:
    """Grid cell centers whose radius-neighbourhood sees at least 3 classes.

    ``grid = (lo, hi, resolution)`` over a 2-D box; the class at a cell is
    the argmax of the classifier output at its center. ``radius`` defaults
    to 1.5 grid spacings. Returns a (2, M) array.
    """
    classes, gx, gy, spacing = class_grid(classifier, grid)
    if radius is None:
        radius = 1.5 * float(np.max(spacing))
    mask = _tripoint_mask(classes, spacing, radius)
    return np.vstack([gx[mask], gy[mask]])


def tripoint_clusters(classifier, grid, radius: float | None = None) -> tuple[int, np.ndarray]:
    """Number of connected groups of tripoint cells and their centroids (2, count)."""
    from scipy import ndimage

    classes, gx, gy, spacing = class_grid(classifier, grid)
    if radius is None:
        radius = 1.5 * float(np.max(spacing))
    mask = _tripoint_mask(classes, spacing, radius)
    labels, count = ndimage.label(mask, structure=np.ones((3, 3)))
    if count == 0:
        return 0, np.zeros((2, 0))
    idx = np.arange(1, count + 1)
    cx = ndimage.mean(gx, labels, idx)
    cy = ndimage.mean(gy, labels, idx)
    return int(count), np.vstack([cx, cy])


# -- autoencoders ----------------------------------------------------------------

def denoising_score(f, sampler, noise_scale: float, n_trials: int = 200, seed: int = 0,
                    dense: int = 10_000) -> float:
    """Mean of dist(f(x + noise), M) / dist(x + noise, M) over noisy on-manifold points.

    ``sampler`` provides ``sample(n, seed)`` (points on the manifold ``M``)
    and ``distance(points, n)`` (nearest-neighbour distance to a dense
    resampling of ``M``). ``f`` is a network or a callable on column batches.
    """
    rng = np.random.default_rng(seed)
    clean = sampler.sample(n_trials, seed=seed)
    noisy = clean + noise_scale * rng.standard_normal(clean.shape)
    out = nw.evaluate(f, noisy) if isinstance(f, NetworkParams) else np.asarray(f(noisy))
    before = sampler.distance(noisy, dense)
    after = sampler.distance(out, dense)
    keep = before > 0
    return float(np.mean(after[keep] / before[keep]))


# -- reports ---------------------------------------------------------------------

@dataclass
class RankReport:
    jacobian_rank: int
    rank_tolerance: float
    schatten_value: float
    norm_over_L: float
    bound_slack: float
    bottleneck_layer: int
    bottleneck_ratio: float
    balancedness_residuals: list = field(default_factory=list)
    probe_count: int = 0

    FIELDS = (
        "jacobian_rank",
        "rank_tolerance",
        "schatten_value",
        "norm_over_L",
        "bound_slack",
        "bottleneck_layer",
        "bottleneck_ratio",
        "balancedness_residuals",
        "probe_count",
    )

    def _items(self):
        d = asdict(self)
        for key in self.FIELDS:
            v = d[key]
            if isinstance(v, list):
                yield key, " ".join(format(float(x), ".17g") for x in v)
            elif isinstance(v, float):
                yield key, format(v, ".17g")
            else:
                yield key, str(v)

    def to_text(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in self._items())

    @classmethod
    def from_text(cls, text: str) -> "RankReport":
        kv = {}
        for line in text.splitlines():
            if "=" in line:
                k, _, v = line.partition("=")
                kv[k.strip()] = v.strip()
        return cls(
            jacobian_rank=int(kv["jacobian_rank"]),
            rank_tolerance=float(kv["rank_tolerance"]),
            schatten_value=float(kv["schatten_value"]),
            norm_over_L=float(kv["norm_over_L"]),
            bound_slack=float(kv["bound_slack"]),
            bottleneck_layer=int(kv["bottleneck_layer"]),
            bottleneck_ratio=float(kv["bottleneck_ratio"]),
            balancedness_residuals=[float(x) for x in kv["balancedness_residuals"].split()],
            probe_count=int(kv["probe_count"]),
        )

    def csv_row(self) -> list[str]:
        return [v for _, v in self._items()]

    @classmethod
    def csv_header(cls) -> list[str]:
        return list(cls.FIELDS)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.csv_header())
        w.writerow(self.csv_row())
        return buf.getvalue()


def certify(p: NetworkParams, X, probes=None, rel_tol: float = DEFAULT_REL_TOL,
            n_probes: int = 1000, seed: int = 0) -> RankReport:
    """Assemble a :class:`RankReport` for ``p`` on inputs ``X``."""
    X = _columns(X, p.input_dim)
    if probes is None:
        box = (X.min(axis=1), X.max(axis=1))
        probes = default_probes(box, X, n=n_probes, seed=seed)
    probes = _columns(probes, p.input_dim)
    rank, _ = jacobian_rank(p, probes, rel_tol)
    value, bound, slack = schatten_certificate(p, probes)
    if p.depth >= 2:
        try:
            prof = bottleneck_profile(p, X)
            layer, ratio = prof.bottleneck_layer, prof.bottleneck_ratio
        except DegenerateBatch:
            layer, ratio = 0, 0.0
    else:
        layer, ratio = 0, 0.0
    return RankReport(
        jacobian_rank=rank,
        rank_tolerance=rel_tol,
        schatten_value=value,
        norm_over_L=bound,
        bound_slack=slack,
        bottleneck_layer=layer,
        bottleneck_ratio=ratio,
        balancedness_residuals=balancedness_residuals(p).tolist(),
        probe_count=probes.shape[1],
    )
