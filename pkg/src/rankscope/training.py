"""L2-regularized training: losses, backprop, Adam followed by plain GD.

The regularized objective is

    total = data + (lam / L) * ||W||^2

where ``data`` is either the mean over samples of the squared error summed
over output coordinates, or the mean softmax cross-entropy.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import network as nw
from .errors import ConfigError, DivergenceError, LabelError, ShapeError, UnfitError
from .network import NetworkParams

LOSS_KINDS = ("mse", "ce")
WEIGHT_DECAY_MODES = ("decoupled", "coupled")


@dataclass(frozen=True)
class TrainConfig:
    """Optimizer settings.

    ``weight_decay`` selects how the ridge enters the Adam phase:
    ``"decoupled"`` shrinks parameters by ``lr * 2 * lam / L`` after the
    adaptive step, ``"coupled"`` adds the ridge gradient to the gradient
    before Adam's normalization. The GD phase always descends the full
    regularized objective.
    """

    lam: float = 0.0
    lr: float = 1e-3
    steps: int = 1000
    adam_betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    seed: int = 0
    gd_refine_steps: int = 0
    gd_lr: float = 1e-4
    batch: int | None = None
    loss: str = "mse"
    weight_decay: str = "decoupled"

    def __post_init__(self):
        b1, b2 = self.adam_betas
        object.__setattr__(self, "adam_betas", (float(b1), float(b2)))
        if not self.lam >= 0:
            raise ConfigError(f"lam must be >= 0, got {self.lam}")
        if not self.lr > 0 or not self.gd_lr > 0:
            raise ConfigError("learning rates must be positive")
        if not (0 <= b1 < 1 and 0 <= b2 < 1):
            raise ConfigError(f"Adam betas must lie in [0, 1), got {self.adam_betas}")
        if self.steps < 0 or self.gd_refine_steps < 0:
            raise ConfigError("step counts must be nonnegative")
        if self.batch is not None and self.batch < 1:
            raise ConfigError("batch must be positive or None for full batch")
        if self.loss not in LOSS_KINDS:
            raise ConfigError(f"loss must be one of {LOSS_KINDS}")
        if self.weight_decay not in WEIGHT_DECAY_MODES:
            raise ConfigError(f"weight_decay must be one of {WEIGHT_DECAY_MODES}")


@dataclass
class TrainHistory:
    """Loss trajectory; entry ``i`` describes the parameters after ``i`` updates."""

    total: list = field(default_factory=list)
    data: list = field(default_factory=list)
    norm_over_L: list = field(default_factory=list)
    phase: list = field(default_factory=list)

    def __len__(self):
        return len(self.total)

    def append(self, total, data, norm_over_L, phase):
        self.total.append(float(total))
        self.data.append(float(data))
        self.norm_over_L.append(float(norm_over_L))
        self.phase.append(phase)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["step", "total", "data", "norm_over_L"])
        for i, (t, d, n) in enumerate(zip(self.total, self.data, self.norm_over_L)):
            w.writerow([i, format(t, ".17g"), format(d, ".17g"), format(n, ".17g")])
        return buf.getvalue()


def _unpack(data):
    """Accept a Dataset-like object or an ``(X, target)`` pair."""
    if isinstance(data, tuple):
        return data
    target = data.Y if getattr(data, "Y", None) is not None else data.labels
    return data.X, target


def _check_mse(p, X, Y):
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if Y.ndim == 1:
        Y = Y[None, :]
    if X.ndim != 2 or X.shape[0] != p.input_dim:
        raise ShapeError(f"X of shape {X.shape} does not match input width {p.input_dim}")
    if Y.shape != (p.output_dim, X.shape[1]):
        raise ShapeError(f"Y of shape {Y.shape}, expected {(p.output_dim, X.shape[1])}")
    return X, Y


def _check_labels(p, X, labels):
    X = np.asarray(X, dtype=np.float64)
    labels = np.asarray(labels)
    if X.ndim != 2 or X.shape[0] != p.input_dim:
        raise ShapeError(f"X of shape {X.shape} does not match input width {p.input_dim}")
    if labels.shape != (X.shape[1],):
        raise ShapeError(f"need one label per column, got {labels.shape}")
    if not np.issubdtype(labels.dtype, np.integer):
        if not np.all(labels == np.round(labels)):
            raise LabelError("labels must be integers")
        labels = labels.astype(np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= p.output_dim):
        raise LabelError(f"labels must lie in 0..{p.output_dim - 1}")
    return X, labels


def _mse_data(out, Y):
    r = out - Y
    return float(np.sum(r * r)) / Y.shape[1], 2.0 * r / Y.shape[1]


def _ce_data(out, labels):
    n = out.shape[1]
    shifted = out - out.max(axis=0, keepdims=True)
    logz = np.log(np.sum(np.exp(shifted), axis=0))
    cols = np.arange(n)
    value = float(np.mean(logz - shifted[labels, cols]))
    probs = np.exp(shifted - logz)
    probs[labels, cols] -= 1.0
    return value, probs / n


def loss_mse_reg(p: NetworkParams, X, Y, lam: float) -> tuple[float, float, float]:
    """Return ``(total, data, reg)`` for the ridge-regularized squared loss."""
    X, Y = _check_mse(p, X, Y)
    data, _ = _mse_data(nw.evaluate(p, X), Y)
    reg = lam / p.depth * nw.param_norm(p)
    return data + reg, data, reg


def loss_cross_entropy(p: NetworkParams, X, labels) -> float:
    """Mean softmax cross-entropy of the outputs against 0-based labels."""
    X, labels = _check_labels(p, X, labels)
    return _ce_data(nw.evaluate(p, X), labels)[0]


def _backward(weights, a, trace, delta):
    L = len(weights)
    gw = [None] * L
    gb = [None] * L
    for ell in range(L - 1, -1, -1):
        gw[ell] = delta @ trace.activations[ell].T
        gb[ell] = delta.sum(axis=1)
        if ell > 0:
            delta = (weights[ell].T @ delta) * nw.sigma_prime(trace.preactivations[ell - 1], a)
    return gw, gb


def _data_and_delta(out, target, loss_kind):
    if loss_kind == "mse":
        return _mse_data(out, target)
    return _ce_data(out, target)


def grad(p: NetworkParams, X, target, lam: float = 0.0, loss_kind: str = "mse") -> NetworkParams:
    """Gradient of ``data + lam / L * ||W||^2``, packed like the parameters."""
    if loss_kind == "mse":
        X, target = _check_mse(p, X, target)
    elif loss_kind == "ce":
        X, target = _check_labels(p, X, target)
    else:
        raise ConfigError(f"unknown loss kind {loss_kind!r}")
    out, trace = nw.forward(p, X)
    _, delta = _data_and_delta(out, target, loss_kind)
    gw, gb = _backward(p.weights, p.leaky_slope, trace, delta)
    c = 2.0 * lam / p.depth
    gw = [g + c * w for g, w in zip(gw, p.weights)]
    gb = [g + c * b for g, b in zip(gb, p.biases)]
    return NetworkParams(gw, gb, p.leaky_slope)


class _FlatParams:
    """All weights and biases in one buffer, with per-layer views."""

    def __init__(self, p: NetworkParams):
        sizes = [w.size + b.size for w, b in zip(p.weights, p.biases)]
        self.theta = np.empty(sum(sizes))
        self.weights, self.biases = self.views(self.theta, p)
        for w, b, w0, b0 in zip(self.weights, self.biases, p.weights, p.biases):
            w[...] = w0
            b[...] = b0

    @staticmethod
    def views(buf, p):
        weights, biases = [], []
        off = 0
        for w, b in zip(p.weights, p.biases):
            weights.append(buf[off:off + w.size].reshape(w.shape))
            off += w.size
            biases.append(buf[off:off + b.size])
            off += b.size
        return weights, biases


class _Objective:
    """Loss and gradient of the regularized objective on a flat buffer."""

    def __init__(self, p, X, target, lam, loss_kind):
        self.a = p.leaky_slope
        self.L = p.depth
        self.X = X
        self.target = target
        self.lam = lam
        self.loss_kind = loss_kind
        self.flat = _FlatParams(p)
        self.grad = np.zeros_like(self.flat.theta)
        self.gw, self.gb = _FlatParams.views(self.grad, p)

    @np.errstate(over="ignore", invalid="ignore")
    def evaluate(self, cols=None):
        """Return ``(total, data, ||W||^2, state)`` at the current buffer."""
        X = self.X if cols is None else self.X[:, cols]
        target = self.target if cols is None else self.target[..., cols]
        weights, biases = self.flat.weights, self.flat.biases
        z = X
        acts, pres = [X], []
        for ell in range(self.L):
            pre = weights[ell] @ z
            pre += biases[ell][:, None]
            pres.append(pre)
            if ell < self.L - 1:
                z = nw.sigma(pre, self.a)
                acts.append(z)
        data, delta = _data_and_delta(pres[-1], target, self.loss_kind)
        theta = self.flat.theta
        sq = float(theta @ theta)
        return data + self.lam / self.L * sq, data, sq, (pres, acts, delta)

    def data_gradient(self, state):
        """Fill ``self.grad`` with the gradient of the data term."""
        pres, acts, delta = state
        weights = self.flat.weights
        for ell in range(self.L - 1, -1, -1):
            np.matmul(delta, acts[ell].T, out=self.gw[ell])
            np.sum(delta, axis=1, out=self.gb[ell])
            if ell > 0:
                delta = (weights[ell].T @ delta) * nw.sigma_prime(pres[ell - 1], self.a)
        return self.grad

    def params(self):
        return NetworkParams(
            [w.copy() for w in self.flat.weights], [b.copy() for b in self.flat.biases], self.a
        )


def train(p: NetworkParams, data, cfg: TrainConfig) -> tuple[NetworkParams, TrainHistory]:
    """Adam for ``cfg.steps`` updates, then ``cfg.gd_refine_steps`` of GD.

    The GD phase halves its step whenever a step would increase the
    regularized objective (and lets it grow back towards ``cfg.gd_lr``
    after accepted steps), so the recorded total is nonincreasing there.
    Raises :class:`DivergenceError` when the objective becomes non-finite.
    """
    X, target = _unpack(data)
    if cfg.loss == "mse":
        X, target = _check_mse(p, X, target)
    else:
        X, target = _check_labels(p, X, target)
    obj = _Objective(p, X, target, cfg.lam, cfg.loss)
    L = p.depth
    theta = obj.flat.theta
    hist = TrainHistory()
    rng = np.random.default_rng(cfg.seed)
    n = X.shape[1]
    ridge = 2.0 * cfg.lam / L
    b1, b2 = cfg.adam_betas
    m = np.zeros_like(theta)
    v = np.zeros_like(theta)
    last_good = p

    def diverged(step):
        raise DivergenceError(f"non-finite objective at step {step}", params=last_good, history=hist)

    for t in range(1, cfg.steps + 1):
        cols = None if cfg.batch is None or cfg.batch >= n else rng.choice(n, cfg.batch, replace=False)
        total, data_term, sq, state = obj.evaluate(cols)
        if not math.isfinite(total):
            diverged(t - 1)
        hist.append(total, data_term, sq / L, "adam")
        if t % 100 == 0:
            last_good = obj.params()
        g = obj.data_gradient(state)
        if cfg.weight_decay == "coupled":
            g += ridge * theta
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        step = np.sqrt(v / (1.0 - b2**t))
        step += cfg.adam_eps
        np.divide(m, step, out=step)
        step *= cfg.lr / (1.0 - b1**t)
        if cfg.weight_decay == "decoupled":
            step += (cfg.lr * ridge) * theta
        theta -= step

    total, data_term, sq, state = obj.evaluate()
    if not math.isfinite(total):
        diverged(cfg.steps)
    lr = cfg.gd_lr
    for _ in range(cfg.gd_refine_steps):
        hist.append(total, data_term, sq / L, "gd")
        g = obj.data_gradient(state) + ridge * theta
        old = theta.copy()
        for _halving in range(40):
            np.subtract(old, lr * g, out=theta)
            new = obj.evaluate()
            if math.isfinite(new[0]) and new[0] <= total:
                break
            lr *= 0.5
        else:
            theta[...] = old
            break
        total, data_term, sq, state = new
        lr = min(cfg.gd_lr, 2.0 * lr)
    hist.append(total, data_term, sq / L, "final")
    return obj.params(), hist


def fit_error(p: NetworkParams, X, Y) -> float:
    """Mean over samples of the squared error summed over outputs."""
    X, Y = _check_mse(p, X, Y)
    return _mse_data(nw.evaluate(p, X), Y)[0]


@dataclass(frozen=True)
class ReprCostEstimate:
    estimate: float
    params: NetworkParams
    data_term: float
    candidates: list

    def __iter__(self):
        return iter((self.estimate, self.params))


def estimate_repr_cost(
    target,
    L: int,
    widths: Sequence[int] | None,
    cfg_schedule: Sequence[tuple[float, int]],
    *,
    restarts: int = 3,
    fit_tol: float = 1e-4,
    seed: int = 0,
    base_cfg: TrainConfig | None = None,
    samples=None,
    domain_box=None,
    n_samples: int = 256,
    witnesses: Sequence[NetworkParams] = (),
    a: float = 0.0,
    init_scale: float = 1.0,
) -> ReprCostEstimate:
    """Upper-bound estimate of the depth-``L`` representation cost of ``target``.

    ``target`` is either a :class:`~rankscope.network.PiecewiseLinearFn`
    (fitted on ``samples`` or on ``n_samples`` uniform draws from
    ``domain_box``) or an ``(X, Y)`` pair. Each restart trains a freshly
    initialized network through the ``(lam, steps)`` schedule; depth-``L``
    ``witnesses`` are scored as they are and also used as warm starts.
    The estimate is the smallest ``||W||^2`` among networks whose data term
    is at most ``fit_tol``.
    """
    if not cfg_schedule:
        raise ConfigError("schedule must contain at least one (lam, steps) stage")
    lams = [lam for lam, _ in cfg_schedule]
    if any(l2 > l1 for l1, l2 in zip(lams, lams[1:])):
        raise ConfigError("schedule lambdas must be nonincreasing")
    if isinstance(target, tuple):
        X, Y = (np.asarray(t, dtype=np.float64) for t in target)
    else:
        if samples is None:
            if domain_box is None:
                raise ConfigError("need samples or domain_box to fit a function target")
            lo = np.asarray(domain_box[0], dtype=np.float64).reshape(-1, 1)
            hi = np.asarray(domain_box[1], dtype=np.float64).reshape(-1, 1)
            rng = np.random.default_rng(seed)
            lo = np.broadcast_to(lo, (target.input_dim, 1))
            hi = np.broadcast_to(hi, (target.input_dim, 1))
            samples = lo + (hi - lo) * rng.random((target.input_dim, n_samples))
        X = np.asarray(samples, dtype=np.float64)
        Y = target(X)
    if Y.ndim == 1:
        Y = Y[None, :]
    base = base_cfg or TrainConfig()

    starts = []
    for w in witnesses:
        if w.depth != L:
            raise ConfigError(f"witness has depth {w.depth}, expected {L}")
        starts.append(w)
    if widths is not None:
        widths = tuple(widths)
        if len(widths) != L + 1:
            raise ConfigError(f"widths must have L + 1 = {L + 1} entries")
        for r in range(restarts):
            starts.append(nw.init(widths, a, seed=seed + r, scale=init_scale))

    candidates = []
    for w in witnesses:
        candidates.append((nw.param_norm(w), fit_error(w, X, Y), w))
    for i, p in enumerate(starts):
        q = p
        for j, (lam, steps) in enumerate(cfg_schedule):
            cfg = replace(base, lam=lam, steps=steps, seed=seed + 1000 * i + j, loss="mse")
            try:
                q, _ = train(q, (X, Y), cfg)
            except DivergenceError:
                q = None
                break
        if q is not None:
            candidates.append((nw.param_norm(q), fit_error(q, X, Y), q))

    fitting = [c for c in candidates if c[1] <= fit_tol]
    if not fitting:
        best = min((c[1] for c in candidates), default=float("inf"))
        raise UnfitError(f"no run reached data term <= {fit_tol} (best {best:.3g})", best)
    norm, err, q = min(fitting, key=lambda c: c[0])
    return ReprCostEstimate(norm, q, err, [(c[0], c[1]) for c in candidates])
