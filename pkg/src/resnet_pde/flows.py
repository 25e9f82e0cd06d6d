"""Forward-Euler characteristics and terminal maps.

A batch of samples is flowed from pseudo-time 0 to 1 by
``X^{k+1} = X^k + disp(X^k, k)`` and the terminal map is applied at
``X^L``. With a :class:`~resnet_pde.velocity.ResBlockVelocity` this is
exactly the forward pass of an L-block residual network.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .pim import OperatorConfig, wnll_solve
from .point_cloud import KernelSpec, build_cloud


class FlowOverflowError(FloatingPointError):
    def __init__(self, step):
        self.step = step
        super().__init__(f"flow state became non-finite at step {step}")


@dataclass(frozen=True)
class TimeGrid:
    L: int

    def __post_init__(self):
        if int(self.L) != self.L or self.L < 1:
            raise ValueError("a time grid needs L >= 1 steps")

    @property
    def dt(self) -> float:
        return 1.0 / self.L

    @property
    def t(self) -> np.ndarray:
        return np.arange(self.L + 1) / self.L


@dataclass
class FlowTrajectory:
    states: np.ndarray     # (L+1, B, d)
    grid: TimeGrid

    @property
    def final(self):
        return self.states[-1]

    def to_csv(self, path):
        L1, B, d = self.states.shape
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "sample"] + [f"x{i}" for i in range(d)])
            for k in range(L1):
                for b in range(B):
                    w.writerow([k, b] + [repr(float(v)) for v in self.states[k, b]])


class FunctionVelocity:
    """Wrap a callable ``disp(x, k) -> (B, d)`` as a vector-field model."""

    kind = "vector"

    def __init__(self, fn, n_steps):
        self.fn = fn
        self.n_steps = n_steps

    def displacement(self, x, k):
        return self.fn(x, k)


def softmax(z):
    z = np.asarray(z, dtype=float)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def softmax_vjp(p, gbar):
    return p * (gbar - np.sum(gbar * p, axis=-1, keepdims=True))


def euler_flow(model, x0, grid: TimeGrid | None = None) -> FlowTrajectory:
    """Integrate the characteristics of a vector-field model."""
    if getattr(model, "kind", None) != "vector":
        raise TypeError("euler_flow needs a vector-field model; scalar speeds "
                        "are marched by the hj_solver module")
    grid = grid or TimeGrid(model.n_steps)
    if grid.L != model.n_steps:
        raise ValueError(f"model has {model.n_steps} steps but the grid has {grid.L}")
    x = np.atleast_2d(np.asarray(x0, dtype=float))
    states = np.empty((grid.L + 1,) + x.shape)
    states[0] = x
    for k in range(grid.L):
        x = x + model.displacement(x, k)
        if not np.all(np.isfinite(x)):
            raise FlowOverflowError(k)
        states[k + 1] = x
    return FlowTrajectory(states, grid)


# ----------------------------------------------------------------------------
# terminal maps
# ----------------------------------------------------------------------------

class FCTerminal:
    """``f(x) = softmax(W x)``, or the bare logits when ``softmax=False``."""

    def __init__(self, W, softmax=True):
        self.W = np.array(W, dtype=float)
        if self.W.ndim != 2 or (softmax and self.W.shape[0] < 2):
            raise ValueError("W_FC must be a C x d matrix with C >= 2")
        self.softmax = softmax

    @classmethod
    def init(cls, n_classes, d, rng, softmax=True):
        a = d**-0.5
        return cls(rng.uniform(-a, a, (n_classes, d)), softmax=softmax)

    def __call__(self, x):
        z = np.atleast_2d(x) @ self.W.T
        return softmax(z) if self.softmax else z

    def vjp(self, x, out, gbar):
        """Return ``(dW, dx)`` given the cotangent of the output."""
        x = np.atleast_2d(x)
        dz = softmax_vjp(out, gbar) if self.softmax else gbar
        return dz.T @ x, dz @ self.W

    def to_dict(self):
        return {"W": self.W.tolist(), "softmax": self.softmax}

    @classmethod
    def from_dict(cls, d):
        return cls(d["W"], d.get("softmax", True))


class WNLLTerminal:
    """Classify flowed samples by WNLL interpolation from flowed labeled points.

    The labeled points ride along the flow with their labels unchanged;
    the returned rows are per-class interpolated indicator values.
    """

    def __init__(self, labeled_points, labels, delta, kernel=None, cfg=None,
                 n_classes=None):
        self.labeled_points = np.atleast_2d(np.asarray(labeled_points, dtype=float))
        self.labels = np.asarray(labels, dtype=np.int64)
        self.n_classes = n_classes or int(self.labels.max()) + 1
        self.delta = delta
        self.kernel = kernel or KernelSpec()
        self.cfg = cfg or OperatorConfig()

    def predict(self, x_flowed, labeled_flowed=None):
        lp = self.labeled_points if labeled_flowed is None else labeled_flowed
        x = np.atleast_2d(x_flowed)
        cloud = build_cloud(np.concatenate([lp, x]), self.kernel, self.delta)
        mask = np.zeros(cloud.n, dtype=bool)
        mask[: len(lp)] = True
        g = np.eye(self.n_classes)[self.labels]
        return wnll_solve(cloud, mask, g)[len(lp):]


def transport_predict(model, terminal, x):
    """``u(x, 0) = f(X^L(x))``: flow the batch, then apply the terminal map."""
    traj = euler_flow(model, x)
    if isinstance(terminal, WNLLTerminal):
        labeled = euler_flow(model, terminal.labeled_points).final
        return terminal.predict(traj.final, labeled)
    return terminal(traj.final)
