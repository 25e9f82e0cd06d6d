"""Losses, reverse-mode gradients and training loops.

Two optimization problems are supported:

* transport: samples flow through a vector-field model and the terminal
  map ``softmax(W_FC x)`` is fit to class labels (this is ResNet training);
* field problems (``hj``, ``viscous_hj`` and Eulerian
  ``transport_manifold``): a field on the point cloud is marched by
  :mod:`resnet_pde.hj_solver` and ``u(x_i, 1)`` is fit to ``g(x_i)``.

Gradients come from reverse sweeps over the stored forward states; the
hard matching constraints of the control problem are relaxed to a loss.
"""
from __future__ import annotations

import copy
import csv
import io
import json
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .flows import FCTerminal, euler_flow
from .hj_solver import PDEProblem, Stepper, solve
from .velocity import VelocityModel

PROB_FLOOR = 1e-12


class DivergenceError(RuntimeError):
    def __init__(self, epoch, report):
        self.epoch, self.report = epoch, report
        super().__init__(f"training diverged at epoch {epoch}; last good checkpoint kept")


@dataclass(frozen=True)
class LossSpec:
    kind: str = "cross_entropy"
    reduction: str = "mean"

    def __post_init__(self):
        if self.kind not in ("cross_entropy", "squared_error"):
            raise ValueError(f"unknown loss {self.kind!r}")
        if self.reduction != "mean":
            raise ValueError("only mean reduction is supported")


def loss(spec: LossSpec, predictions, targets):
    """Return ``(value, d value / d predictions)``."""
    p = np.asarray(predictions, dtype=float)
    if spec.kind == "cross_entropy":
        t = np.asarray(targets)
        if p.ndim != 2 or t.shape != (p.shape[0],):
            raise ValueError("cross_entropy needs (B, C) probabilities and B class indices")
        if np.any(t < 0) or np.any(t >= p.shape[1]):
            raise ValueError("target class out of range")
        B = p.shape[0]
        pt = p[np.arange(B), t]
        clamped = np.maximum(pt, PROB_FLOOR)
        cot = np.zeros_like(p)
        cot[np.arange(B), t] = np.where(pt >= PROB_FLOOR, -1.0 / (B * clamped), 0.0)
        return float(-np.mean(np.log(clamped))), cot
    t = np.asarray(targets, dtype=float)
    if t.shape != p.shape:
        raise ValueError(f"prediction shape {p.shape} does not match targets {t.shape}")
    r = p - t
    return float(np.mean(r**2)), 2.0 * r / r.size


# ----------------------------------------------------------------------------
# gradients
# ----------------------------------------------------------------------------

def grad_transport(model: VelocityModel, terminal: FCTerminal, batch, targets,
                   spec: LossSpec = LossSpec()):
    """Backpropagate through the Euler flow and the FC terminal.

    Returns ``(loss, velocity gradient (flat), W_FC gradient)``.
    """
    traj = euler_flow(model, batch)
    out = terminal(traj.final)
    value, gout = loss(spec, out, targets)
    if not np.all(np.isfinite(gout)):
        raise FloatingPointError("non-finite loss cotangent")
    gW, gx = terminal.vjp(traj.final, out, gout)
    grads = model.zero_grads()
    for k in reversed(range(traj.grid.L)):
        gk, dx = model.vjp(traj.states[k], k, gx)
        for name, g in gk.items():
            grads[name][k] += g
        gx = gx + dx
    return value, model.flatten(grads), gW


def grad_hj(problem: PDEProblem, targets, target_idx, spec: LossSpec = LossSpec("squared_error")):
    """Backpropagate the field loss through the marching steps.

    Constrained entries of a viscous problem are overwritten every step
    and so pass no cotangent back. Returns ``(loss, flat gradient)``.
    """
    if spec.kind != "squared_error":
        raise ValueError("field problems are fit with squared_error")
    model = problem.velocity
    res = solve(problem, record=True)
    tape = res.diagnostics.pop("_tape")
    idx = np.asarray(target_idx, dtype=np.int64)
    value, gsel = loss(spec, res.final[idx], targets)
    ub = np.zeros_like(res.final)
    ub[idx] = gsel
    grads = model.zero_grads()
    stepper = Stepper(problem)
    for k in reversed(range(problem.grid.L)):
        ub = stepper.backward(k, tape[k], ub, grads)
    return value, model.flatten(grads)


def finite_diff_grad(fn, params, h: float = 1e-5, coords=None):
    """Central differences of ``fn`` at ``params`` (optionally on a coordinate subset)."""
    params = np.asarray(params, dtype=float)
    coords = np.arange(params.size) if coords is None else np.asarray(coords)
    out = np.zeros(len(coords))
    for j, i in enumerate(coords):
        e = params.copy()
        e[i] += h
        fp = fn(e)
        e[i] -= 2 * h
        fm = fn(e)
        out[j] = (fp - fm) / (2 * h)
    return out


def relative_error(a, b):
    a, b = np.ravel(a), np.ravel(b)
    den = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if den == 0 else float(np.linalg.norm(a - b) / den)


# ----------------------------------------------------------------------------
# closures used by gradient checks and training
# ----------------------------------------------------------------------------

def pack_transport(model, terminal):
    return np.concatenate([model.flatten(), terminal.W.ravel()])


def unpack_transport(model, terminal, vec):
    k = model.size
    return model.with_flat(vec[:k]), FCTerminal(vec[k:].reshape(terminal.W.shape),
                                                softmax=terminal.softmax)


def transport_objective(model, terminal, batch, targets, spec=LossSpec()):
    """``(loss_fn, grad_fn, theta0)`` over the packed velocity + W_FC vector."""

    def loss_fn(theta):
        m, t = unpack_transport(model, terminal, theta)
        return loss(spec, t(euler_flow(m, batch).final), targets)[0]

    def grad_fn(theta):
        m, t = unpack_transport(model, terminal, theta)
        value, gv, gW = grad_transport(m, t, batch, targets, spec)
        return value, np.concatenate([gv, gW.ravel()])

    return loss_fn, grad_fn, pack_transport(model, terminal)


def field_objective(problem: PDEProblem, targets, target_idx,
                    spec=LossSpec("squared_error")):
    idx = np.asarray(target_idx, dtype=np.int64)

    def with_params(theta):
        p = copy.copy(problem)
        p.velocity = problem.velocity.with_flat(theta)
        return p

    def loss_fn(theta):
        return loss(spec, solve(with_params(theta)).final[idx], targets)[0]

    def grad_fn(theta):
        return grad_hj(with_params(theta), targets, idx, spec)

    return loss_fn, grad_fn, problem.velocity.flatten()


# ----------------------------------------------------------------------------
# training loop
# ----------------------------------------------------------------------------

@dataclass
class TrainConfig:
    optimizer: str = "momentum"
    momentum: float = 0.9
    lr: float = 0.01
    lr_decay: float = 1.0
    decay_every: int = 0
    epochs: int = 500
    batch_size: int | None = None
    seed: int = 0
    gradcheck: bool = False
    gradcheck_tol: float = 1e-4
    gradcheck_coords: int = 32
    divergence_threshold: float = 1e6

    def __post_init__(self):
        if self.optimizer not in ("gd", "momentum"):
            raise ValueError("optimizer must be 'gd' or 'momentum'")
        if not self.lr >= 0:
            raise ValueError("learning rate must be non-negative")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")

    def lr_at(self, epoch):
        if self.decay_every > 0:
            return self.lr * self.lr_decay ** (epoch // self.decay_every)
        return self.lr


@dataclass
class TrainReport:
    loss_history: list = field(default_factory=list)
    accuracy_history: list = field(default_factory=list)
    gradcheck_max_rel_err: float | None = None
    epoch_seconds: list = field(default_factory=list)
    checkpoint: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)
    status: str = "ok"
    metrics: dict = field(default_factory=dict)

    def to_dict(self):
        return asdict(self)

    def to_json(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)

    def loss_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "loss", "accuracy"])
        for e, (l, a) in enumerate(zip(self.loss_history, self.accuracy_history)):
            w.writerow([e, repr(l), repr(a)])
        return buf.getvalue()


class Optimizer:
    def __init__(self, cfg: TrainConfig):
        self.cfg = cfg
        self.buf = None

    def step(self, theta, grad, lr):
        if self.cfg.optimizer == "gd":
            return theta - lr * grad
        if self.buf is None:
            self.buf = np.zeros_like(theta)
        self.buf = self.cfg.momentum * self.buf + grad
        return theta - lr * self.buf


def _gradcheck(loss_fn, grad_fn, theta, ncoords, rng):
    _, g = grad_fn(theta)
    coords = np.arange(theta.size) if theta.size <= ncoords else \
        np.sort(rng.choice(theta.size, ncoords, replace=False))
    fd = finite_diff_grad(loss_fn, theta, coords=coords)
    return relative_error(g[coords], fd)


def _run(loss_fn, grad_fn, theta, config: TrainConfig, accuracy, checkpoint, batches, rng):
    report = TrainReport(config=asdict(config))
    opt = Optimizer(config)
    last_good = theta.copy()
    if config.gradcheck:
        report.gradcheck_max_rel_err = _gradcheck(
            loss_fn, grad_fn, theta, config.gradcheck_coords, np.random.default_rng(config.seed))
    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        lr = config.lr_at(epoch)
        losses, sizes = [], []
        for batch in batches(rng):
            value, g = grad_fn(theta, batch)
            if not (math.isfinite(value) and value <= config.divergence_threshold
                    and np.all(np.isfinite(g))):
                report.status = "diverged"
                report.checkpoint = checkpoint(last_good)
                raise DivergenceError(epoch, report)
            losses.append(value)
            sizes.append(len(batch))
            last_good = theta.copy()
            theta = opt.step(theta, g, lr)
        report.loss_history.append(float(np.average(losses, weights=sizes)))
        report.accuracy_history.append(float(accuracy(last_good)))
        report.epoch_seconds.append(time.perf_counter() - t0)
    report.checkpoint = checkpoint(theta)
    return theta, report


def train_transport(dataset, model, terminal: FCTerminal, config: TrainConfig,
                    spec: LossSpec = LossSpec()):
    """Fit a residual flow plus softmax terminal on the training points.

    The loss and accuracy recorded for an epoch are those of the
    parameters at the start of the epoch (the epoch's first batch loss
    when training full-batch).
    """
    mask = dataset.train_mask
    X, y = dataset.cloud.points[mask], dataset.labels[mask]
    n = len(X)
    bs = n if not config.batch_size else min(config.batch_size, n)

    def batches(rng):
        if bs >= n:
            yield np.arange(n)
            return
        perm = rng.permutation(n)
        for s in range(0, n, bs):
            yield perm[s:s + bs]

    def grad_fn(theta, batch=None):
        b = np.arange(n) if batch is None else batch
        m, t = unpack_transport(model, terminal, theta)
        value, gv, gW = grad_transport(m, t, X[b], y[b], spec)
        return value, np.concatenate([gv, gW.ravel()])

    def loss_fn(theta):
        m, t = unpack_transport(model, terminal, theta)
        return loss(spec, t(euler_flow(m, X).final), y)[0]

    def accuracy(theta):
        m, t = unpack_transport(model, terminal, theta)
        return np.mean(np.argmax(t(euler_flow(m, X).final), axis=1) == y)

    def checkpoint(theta):
        m, t = unpack_transport(model, terminal, theta)
        return {"velocity": m.to_dict(), "terminal": t.to_dict()}

    rng = np.random.default_rng(config.seed)
    theta, report = _run(loss_fn, grad_fn, pack_transport(model, terminal), config,
                         accuracy, checkpoint, batches, rng)
    m, t = unpack_transport(model, terminal, theta)
    report.metrics["train_accuracy"] = float(accuracy(theta))
    allp = dataset.cloud.points
    report.metrics["all_accuracy"] = float(
        np.mean(np.argmax(t(euler_flow(m, allp).final), axis=1) == dataset.labels))
    return (m, t), report


def field_predictions(u):
    """Class predictions from an evolved field: sign for scalar, argmax for columns."""
    return (u > 0).astype(np.int64) if u.ndim == 1 else np.argmax(u, axis=1)


def train_field(problem: PDEProblem, labels, targets, target_idx, config: TrainConfig,
                spec: LossSpec = LossSpec("squared_error")):
    """Fit the speed model of a field problem; full batch over ``target_idx``."""
    idx = np.asarray(target_idx, dtype=np.int64)
    labels = np.asarray(labels)
    loss_fn, grad_full, theta0 = field_objective(problem, targets, idx, spec)

    def with_params(theta):
        p = copy.copy(problem)
        p.velocity = problem.velocity.with_flat(theta)
        return p

    def grad_fn(theta, batch=None):
        return grad_full(theta)

    def accuracy(theta):
        u = solve(with_params(theta)).final
        return np.mean(field_predictions(u)[idx] == labels[idx])

    def checkpoint(theta):
        return {"velocity": problem.velocity.with_flat(theta).to_dict()}

    theta, report = _run(loss_fn, grad_fn, theta0, config, accuracy, checkpoint,
                         lambda rng: [idx], np.random.default_rng(config.seed))
    final = with_params(theta)
    u = solve(final).final
    pred = field_predictions(u)
    report.metrics["train_accuracy"] = float(np.mean(pred[idx] == labels[idx]))
    report.metrics["all_accuracy"] = float(np.mean(pred == labels))
    return final, report
