"""Fully-connected networks with the homogeneous nonlinearity sigma_a.

``sigma_a(z) = z`` for ``z >= 0`` and ``a * z`` otherwise, with ``a`` in
(-1, 1); ``a = 0`` is the ReLU. A network of depth ``L`` maps an input
column ``x`` through ``L`` affine layers, applying ``sigma_a`` after every
layer except the last.

Batches are stored column-wise: an input batch has shape (n_0, batch).
"""
from __future__ import annotations

import math
import os
import tempfile
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import (
    CheckpointError,
    CompositionError,
    DepthError,
    InvalidArchitecture,
    NotReLU,
    ShapeError,
)

CHECKPOINT_MAGIC = "rankscope-net v1"


def sigma(z, a):
    return np.where(z >= 0, z, a * z)


def sigma_prime(z, a):
    # derivative at 0 is taken from the z >= 0 branch
    return np.where(z >= 0, 1.0, a)


def _frozen(x):
    x = np.array(x, dtype=np.float64)
    x.setflags(write=False)
    return x


@dataclass(frozen=True)
class NetworkParams:
    """Weights ``W_1..W_L`` (``W_l`` of shape n_l x n_{l-1}), biases and slope."""

    weights: tuple
    biases: tuple
    leaky_slope: float = 0.0

    def __post_init__(self):
        ws = tuple(_frozen(w) for w in self.weights)
        bs = tuple(_frozen(b).reshape(-1) for b in self.biases)
        if len(ws) < 1 or len(ws) != len(bs):
            raise InvalidArchitecture("need L >= 1 weight matrices and as many bias vectors")
        if not -1.0 < self.leaky_slope < 1.0:
            raise InvalidArchitecture(f"leaky slope must lie in (-1, 1), got {self.leaky_slope}")
        for i, (w, b) in enumerate(zip(ws, bs), start=1):
            if w.ndim != 2 or w.shape[0] != b.shape[0]:
                raise InvalidArchitecture(f"layer {i}: weight {w.shape} and bias {b.shape} disagree")
            if i > 1 and w.shape[1] != ws[i - 2].shape[0]:
                raise InvalidArchitecture(f"layer {i}: input width {w.shape[1]} != {ws[i - 2].shape[0]}")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise InvalidArchitecture(f"layer {i}: non-finite parameters")
        object.__setattr__(self, "weights", ws)
        object.__setattr__(self, "biases", bs)
        object.__setattr__(self, "leaky_slope", float(self.leaky_slope))

    @property
    def depth(self) -> int:
        return len(self.weights)

    @property
    def widths(self) -> tuple[int, ...]:
        return (self.weights[0].shape[1],) + tuple(w.shape[0] for w in self.weights)

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def output_dim(self) -> int:
        return self.weights[-1].shape[0]

    def replace(self, weights=None, biases=None, leaky_slope=None) -> "NetworkParams":
        return NetworkParams(
            self.weights if weights is None else weights,
            self.biases if biases is None else biases,
            self.leaky_slope if leaky_slope is None else leaky_slope,
        )

    def __eq__(self, other):
        if not isinstance(other, NetworkParams):
            return NotImplemented
        return (
            self.leaky_slope == other.leaky_slope
            and self.widths == other.widths
            and all(np.array_equal(a, b) for a, b in zip(self.weights, other.weights))
            and all(np.array_equal(a, b) for a, b in zip(self.biases, other.biases))
        )

    __hash__ = None


@dataclass(frozen=True)
class ActivationTrace:
    """Per-layer values for one batch.

    ``preactivations[l - 1]`` is the pre-activation matrix of layer ``l``
    (l = 1..L) and ``activations[l]`` the activation matrix of layer ``l``
    (l = 0..L-1, with ``activations[0]`` the input batch).
    """

    preactivations: list
    activations: list

    @property
    def batch(self) -> int:
        return self.activations[0].shape[1]


@dataclass
class PiecewiseLinearFn:
    """A finite piecewise linear map given by evaluation and Jacobian callables.

    ``evaluate`` maps an (input_dim, batch) array to (output_dim, batch);
    ``jacobian`` maps one input vector to an (output_dim, input_dim) matrix.
    """

    evaluate: Callable[[np.ndarray], np.ndarray]
    jacobian: Callable[[np.ndarray], np.ndarray]
    input_dim: int
    output_dim: int
    name: str = ""
    jacobians: Callable[[np.ndarray], np.ndarray] | None = field(default=None, repr=False)

    def __call__(self, X):
        return self.evaluate(np.asarray(X, dtype=np.float64))

    def batch_jacobians(self, X) -> np.ndarray:
        """Jacobians at the columns of ``X``, shape (batch, output_dim, input_dim)."""
        X = np.asarray(X, dtype=np.float64)
        if self.jacobians is not None:
            return self.jacobians(X)
        return np.stack([self.jacobian(X[:, i]) for i in range(X.shape[1])])


def _check_widths(widths):
    widths = tuple(int(n) for n in widths)
    if len(widths) < 2 or any(n < 1 for n in widths):
        raise InvalidArchitecture(f"widths must have length >= 2 and positive entries, got {widths}")
    return widths


def init(widths: Sequence[int], a: float = 0.0, seed: int = 0, scale: float = 1.0) -> NetworkParams:
    """Gaussian weights with std ``scale / sqrt(n_{l-1})`` and zero biases."""
    widths = _check_widths(widths)
    if not -1.0 < a < 1.0:
        raise InvalidArchitecture(f"leaky slope must lie in (-1, 1), got {a}")
    rng = np.random.default_rng(seed)
    weights = [
        rng.standard_normal((n_out, n_in)) * (scale / math.sqrt(n_in))
        for n_in, n_out in zip(widths[:-1], widths[1:])
    ]
    biases = [np.zeros(n) for n in widths[1:]]
    return NetworkParams(weights, biases, a)


def forward(p: NetworkParams, X) -> tuple[np.ndarray, ActivationTrace]:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    if X.ndim != 2 or X.shape[0] != p.input_dim:
        raise ShapeError(f"input of shape {X.shape} does not match input width {p.input_dim}")
    acts = [X]
    pres = []
    z = X
    for ell, (w, b) in enumerate(zip(p.weights, p.biases), start=1):
        pre = w @ z + b[:, None]
        pres.append(pre)
        if ell < p.depth:
            z = sigma(pre, p.leaky_slope)
            acts.append(z)
    return pres[-1], ActivationTrace(pres, acts)


def evaluate(p: NetworkParams, X) -> np.ndarray:
    return forward(p, X)[0]


def jacobians(p: NetworkParams, X) -> tuple[np.ndarray, np.ndarray]:
    """Exact Jacobians at every column of ``X``.

    Returns ``(J, margin)`` where ``J`` has shape (batch, n_L, n_0) and
    ``margin[i]`` is the smallest |pre-activation| over hidden neurons at
    column ``i`` divided by that layer's pre-activation RMS over the batch.
    A margin of 0 flags a point on a region boundary, where the
    ``sigma_a'(0) = 1`` convention was used.
    """
    _, trace = forward(p, X)
    batch = trace.batch
    J = np.broadcast_to(p.weights[0], (batch,) + p.weights[0].shape)
    margin = np.full(batch, np.inf)
    for ell in range(1, p.depth):
        pre = trace.preactivations[ell - 1]
        rms = math.sqrt(float(np.mean(pre**2))) or 1.0
        margin = np.minimum(margin, np.min(np.abs(pre), axis=0) / rms)
        d = sigma_prime(pre, p.leaky_slope).T  # (batch, n_l)
        J = d[:, :, None] * J
        J = np.einsum("ij,bjk->bik", p.weights[ell], J)
    return np.array(J), margin


def jacobian(p: NetworkParams, x) -> np.ndarray:
    """Jacobian ``W_L D_{L-1}(x) W_{L-1} ... D_1(x) W_1`` at a single input."""
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    if x.shape[0] != p.input_dim:
        raise ShapeError(f"input of length {x.shape[0]} does not match input width {p.input_dim}")
    return jacobians(p, x[:, None])[0][0]


def as_function(p: NetworkParams, name: str = "network") -> PiecewiseLinearFn:
    return PiecewiseLinearFn(
        evaluate=lambda X: evaluate(p, X),
        jacobian=lambda x: jacobian(p, x),
        input_dim=p.input_dim,
        output_dim=p.output_dim,
        name=name,
        jacobians=lambda X: jacobians(p, X)[0],
    )


def layer_norms(p: NetworkParams) -> list[float]:
    """``||W_l||_F^2 + ||b_l||^2`` for each layer, each summed with fsum."""
    return [
        math.fsum(np.concatenate([w.ravel(), b]) ** 2) for w, b in zip(p.weights, p.biases)
    ]


def _squares(p: NetworkParams) -> np.ndarray:
    return np.concatenate([np.concatenate([w.ravel(), b]) for w, b in zip(p.weights, p.biases)]) ** 2


def param_norm(p: NetworkParams) -> float:
    """Squared Euclidean norm of all weights and biases (correctly rounded sum)."""
    return math.fsum(_squares(p))


def output_bounds(p: NetworkParams, lo, hi) -> tuple[np.ndarray, np.ndarray]:
    """Sound elementwise bounds on the network output over the box [lo, hi]."""
    lo = np.asarray(lo, dtype=np.float64).reshape(-1)
    hi = np.asarray(hi, dtype=np.float64).reshape(-1)
    for ell, (w, b) in enumerate(zip(p.weights, p.biases), start=1):
        center = (lo + hi) / 2
        radius = (hi - lo) / 2
        c = w @ center + b
        r = np.abs(w) @ radius
        lo, hi = c - r, c + r
        if ell < p.depth:
            # sigma_a is not monotone for a < 0; its extremes over an
            # interval sit at the endpoints or at the kink z = 0
            a = p.leaky_slope
            kink = np.where((lo < 0) & (hi > 0), 0.0, sigma(lo, a))
            cands = np.stack([sigma(lo, a), sigma(hi, a), kink])
            lo, hi = cands.min(axis=0), cands.max(axis=0)
    return lo, hi


def convert_relu_to_leaky(p: NetworkParams, target_a: float) -> NetworkParams:
    """Represent a ReLU network with sigma_a by doubling every hidden layer.

    Uses ``max(0, z) = (sigma_a(z) + a * sigma_a(-z)) / (1 - a^2)``: each hidden
    neuron is split into a copy fed with ``z`` and one fed with ``-z``.
    """
    if p.leaky_slope != 0.0:
        raise NotReLU(f"network has leaky slope {p.leaky_slope}, expected a ReLU network")
    if not -1.0 < target_a < 1.0:
        raise InvalidArchitecture(f"target slope must lie in (-1, 1), got {target_a}")
    c = 1.0 / (1.0 - target_a**2)
    weights, biases = [], []
    for ell, (w, b) in enumerate(zip(p.weights, p.biases), start=1):
        if ell > 1:
            # the incoming activations are (sigma_a(z), sigma_a(-z)) pairs
            w = np.hstack([c * w, target_a * c * w])
        if ell < p.depth:
            w = np.vstack([w, -w])
            b = np.concatenate([b, -b])
        weights.append(w)
        biases.append(b)
    return NetworkParams(weights, biases, target_a)


@dataclass(frozen=True)
class SerialLedger:
    """Norm accounting of :func:`compose_serial`.

    ``total`` is the parameter norm of the composed network. ``terms`` keeps
    the squared entries behind each summand (the shift cost as new minus old
    squared biases), so :meth:`closed_form` sums exactly the same floats as
    ``total`` and agrees with it bit for bit.
    """

    g_norm: float
    middle: float
    h_norm: float
    shift_cost: float
    total: float
    k: int
    identity_layers: int
    shift: np.ndarray
    terms: tuple = field(default=(), repr=False, compare=False)

    def closed_form(self) -> float:
        if not self.terms:
            return math.fsum([self.g_norm, self.middle, self.h_norm, self.shift_cost])
        return math.fsum(np.concatenate(self.terms))


def compose_serial(
    g: NetworkParams, h: NetworkParams, total_L: int, domain_box=None
) -> tuple[NetworkParams, SerialLedger]:
    """Network of depth ``total_L`` computing ``h(g(x))`` through identity layers.

    ``domain_box = (lo, hi)`` bounds the outputs of ``g`` on the inputs of
    interest. Coordinates whose lower bound is negative are shifted up so
    every middle pre-activation is nonnegative; the shift is undone in the
    first layer of ``h``. ``None`` means the outputs of ``g`` are known to be
    nonnegative.
    """
    k = g.output_dim
    if h.input_dim != k:
        raise CompositionError(f"g outputs {k} dims but h expects {h.input_dim}")
    if g.leaky_slope != h.leaky_slope:
        raise CompositionError("g and h use different leaky slopes")
    m = int(total_L) - g.depth - h.depth
    if m < 0:
        raise DepthError(f"total depth {total_L} < depth(g) + depth(h) = {g.depth + h.depth}")
    if domain_box is None:
        shift = np.zeros(k)
    else:
        lo = np.broadcast_to(np.asarray(domain_box[0], dtype=np.float64), (k,))
        shift = np.maximum(0.0, -lo)
    g_last_b = g.biases[-1] + shift
    h_first_b = h.biases[0] - h.weights[0] @ shift
    eye = np.eye(k)
    weights = list(g.weights) + [eye] * m + list(h.weights)
    biases = list(g.biases[:-1]) + [g_last_b] + [np.zeros(k)] * m + [h_first_b] + list(h.biases[1:])
    composed = NetworkParams(weights, biases, g.leaky_slope)

    shift_terms = np.concatenate(
        [g_last_b**2, -(g.biases[-1] ** 2), h_first_b**2, -(h.biases[0] ** 2)]
    )
    middle_terms = np.ones(k * m)
    ledger = SerialLedger(
        g_norm=param_norm(g),
        middle=float(k * m),
        h_norm=param_norm(h),
        shift_cost=math.fsum(shift_terms),
        total=param_norm(composed),
        k=k,
        identity_layers=m,
        shift=shift,
        terms=(_squares(g), middle_terms, _squares(h), shift_terms),
    )
    return composed, ledger


def compose_parallel(f: NetworkParams, g: NetworkParams) -> NetworkParams:
    """Network computing ``f + g`` with block-diagonal hidden layers.

    The parameter norm is ``||f||^2 + ||g||^2 + 2 <b_L^f, b_L^g>``: the two
    output biases share one vector, every other parameter is disjoint.
    """
    if f.depth != g.depth:
        raise CompositionError(f"depths differ: {f.depth} vs {g.depth}")
    if f.depth < 2:
        raise CompositionError("parallel composition needs depth >= 2")
    if f.input_dim != g.input_dim or f.output_dim != g.output_dim:
        raise CompositionError("input or output widths differ")
    if f.leaky_slope != g.leaky_slope:
        raise CompositionError("leaky slopes differ")
    L = f.depth
    weights = [np.vstack([f.weights[0], g.weights[0]])]
    biases = [np.concatenate([f.biases[0], g.biases[0]])]
    for ell in range(1, L - 1):
        wf, wg = f.weights[ell], g.weights[ell]
        block = np.zeros((wf.shape[0] + wg.shape[0], wf.shape[1] + wg.shape[1]))
        block[: wf.shape[0], : wf.shape[1]] = wf
        block[wf.shape[0]:, wf.shape[1]:] = wg
        weights.append(block)
        biases.append(np.concatenate([f.biases[ell], g.biases[ell]]))
    weights.append(np.hstack([f.weights[-1], g.weights[-1]]))
    biases.append(f.biases[-1] + g.biases[-1])
    return NetworkParams(weights, biases, f.leaky_slope)


def parallel_norm_cross_term(f: NetworkParams, g: NetworkParams) -> float:
    """``2 <b_L^f, b_L^g>``, the only non-additive part of ``||f (+) g||^2``."""
    return 2.0 * float(f.biases[-1] @ g.biases[-1])


# -- checkpoints ---------------------------------------------------------------

def _fmt(x) -> str:
    return format(float(x), ".17g")


def dumps(p: NetworkParams) -> str:
    lines = [
        CHECKPOINT_MAGIC,
        "widths " + " ".join(str(n) for n in p.widths),
        "leaky_slope " + _fmt(p.leaky_slope),
    ]
    for ell, (w, b) in enumerate(zip(p.weights, p.biases), start=1):
        lines.append(f"W {ell} {w.shape[0]} {w.shape[1]}")
        lines.extend(" ".join(_fmt(v) for v in row) for row in w)
        lines.append(f"b {ell} {b.shape[0]}")
        lines.append(" ".join(_fmt(v) for v in b))
    return "\n".join(lines) + "\n"


def loads(text: str) -> NetworkParams:
    lines = [ln.strip() for ln in text.splitlines()]
    lines = [ln for ln in lines if ln and not ln.startswith("#")]
    if not lines or lines[0] != CHECKPOINT_MAGIC:
        found = lines[0] if lines else "<empty>"
        raise CheckpointError(f"unsupported checkpoint header {found!r}, expected {CHECKPOINT_MAGIC!r}")
    try:
        it = iter(lines[1:])
        key, *vals = next(it).split()
        if key != "widths":
            raise CheckpointError("expected 'widths' line")
        widths = _check_widths(vals)
        key, val = next(it).split()
        if key != "leaky_slope":
            raise CheckpointError("expected 'leaky_slope' line")
        a = float(val)
        weights, biases = [], []
        for ell in range(1, len(widths)):
            tag, idx, rows, cols = next(it).split()
            rows, cols = int(rows), int(cols)
            if tag != "W" or int(idx) != ell or (rows, cols) != (widths[ell], widths[ell - 1]):
                raise CheckpointError(f"bad weight header for layer {ell}")
            w = np.array([[float(v) for v in next(it).split()] for _ in range(rows)])
            if w.shape != (rows, cols):
                raise CheckpointError(f"layer {ell}: weight rows have wrong length")
            tag, idx, n = next(it).split()
            if tag != "b" or int(idx) != ell or int(n) != rows:
                raise CheckpointError(f"bad bias header for layer {ell}")
            b = np.array([float(v) for v in next(it).split()])
            if b.shape != (rows,):
                raise CheckpointError(f"layer {ell}: bias has wrong length")
            weights.append(w)
            biases.append(b)
        if next(it, None) is not None:
            raise CheckpointError("trailing content after last layer")
    except StopIteration:
        raise CheckpointError("truncated checkpoint") from None
    except (ValueError, InvalidArchitecture) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"malformed checkpoint: {exc}") from exc
    return NetworkParams(weights, biases, a)


def atomic_write_text(path, text: str) -> None:
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "w", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(p: NetworkParams, path) -> None:
    atomic_write_text(path, dumps(p))


def load_checkpoint(path) -> NetworkParams:
    with open(path) as fh:
        return loads(fh.read())
