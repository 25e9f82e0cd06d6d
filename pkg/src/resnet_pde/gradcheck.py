"""Seeded random instances for checking reverse sweeps against finite differences.

Every (velocity variant, problem kind) pair gets a small random instance:

* ``transport`` with ``resblock``: a random residual flow plus softmax
  terminal and cross-entropy on a random batch;
* ``transport`` with a scalar speed: Eulerian transport of a field on a
  random point cloud along its own gradient direction;
* ``hj`` / ``viscous_hj``: the field problems on a random cloud, with the
  residual block entering through its normal speed.

Instances whose activations land within ``kink_margin`` of a ReLU kink
are redrawn, so the finite differences see a smooth function.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .experiments import PROBLEMS, VARIANTS
from .flows import FCTerminal, TimeGrid, euler_flow
from .hj_solver import PDEProblem, heat_rate
from .point_cloud import build_cloud, IsolatedPointError
from .training import (LossSpec, field_objective, finite_diff_grad, relative_error,
                       transport_objective)
from .velocity import (LinearVelocity, MLPVelocity, RBFVelocity, ResBlockVelocity)


@dataclass
class CheckResult:
    variant: str
    kind: str
    rel_errors: list
    tol: float

    @property
    def max_rel_err(self):
        return max(self.rel_errors)

    @property
    def passed(self):
        return self.max_rel_err <= self.tol

    def to_dict(self):
        return {"variant": self.variant, "kind": self.kind, "instances": len(self.rel_errors),
                "max_rel_err": self.max_rel_err, "tol": self.tol, "passed": self.passed}


def _jitter(model, rng, scale=0.5):
    for k, v in model.params.items():
        model.params[k] = v + scale * rng.standard_normal(v.shape)
    return model


def _min_preactivation(model, xs_per_step):
    out = np.inf
    for k, x in enumerate(xs_per_step):
        if isinstance(model, ResBlockVelocity):
            s1, s2 = model.preactivations(x, k)
            out = min(out, np.abs(s1).min(), np.abs(s2).min())
        elif isinstance(model, MLPVelocity):
            out = min(out, np.abs(model.preactivations(x, k)).min())
    return out


def _scalar_model(variant, d, L, rng, points):
    if variant == "linear":
        return _jitter(LinearVelocity.init(d, L, rng), rng)
    if variant == "mlp":
        return _jitter(MLPVelocity.init(d, int(rng.integers(2, 6)), L, rng), rng)
    m = RBFVelocity.init(points, L)
    m.params["c"] = rng.standard_normal(m.params["c"].shape)
    return m


def _random_cloud(rng, n, d):
    while True:
        pts = rng.standard_normal((n, d))
        try:
            return build_cloud(pts, delta=float(rng.uniform(0.6, 1.2)))
        except IsolatedPointError:
            continue


def random_instance(variant, kind, rng, kink_margin=1e-3):
    """Return ``(loss_fn, grad_fn, theta)`` for one random instance."""
    if variant not in VARIANTS or kind not in PROBLEMS:
        raise ValueError(f"unknown combination {variant!r} x {kind!r}")
    for _ in range(100):
        L = int(rng.integers(1, 5))
        if kind == "transport" and variant == "resblock":
            d, h, B, C = (int(rng.integers(2, 5)), int(rng.integers(2, 6)),
                          int(rng.integers(3, 9)), int(rng.integers(2, 5)))
            m = _jitter(ResBlockVelocity.init(d, h, L, rng), rng)
            x = rng.standard_normal((B, d))
            y = rng.integers(0, C, B)
            t = FCTerminal.init(C, d, rng)
            traj = euler_flow(m, x)
            if _min_preactivation(m, traj.states[:-1]) < kink_margin:
                continue
            return transport_objective(m, t, x, y, LossSpec("cross_entropy"))

        n, d = int(rng.integers(10, 31)), 2
        cloud = _random_cloud(rng, n, d)
        pts = cloud.points
        if variant == "resblock":
            m = _jitter(ResBlockVelocity.init(d, int(rng.integers(2, 6)), L, rng), rng)
        else:
            m = _scalar_model(variant, d, L, rng, pts)
        if _min_preactivation(m, [pts] * L) < kink_margin:
            continue
        u0 = rng.standard_normal(n)
        pkind = "transport_manifold" if kind == "transport" else kind
        kw = {}
        if kind == "viscous_hj":
            nS = int(rng.integers(1, max(2, n // 3)))
            S = rng.choice(n, nS, replace=False)
            eps = 0.5 * L / heat_rate(cloud)
            kw = dict(dissipation=eps, constraint_idx=S,
                      constraint_values=rng.standard_normal(nS))
        problem = PDEProblem(pkind, cloud, u0, m, TimeGrid(L), **kw)
        free = np.setdiff1d(np.arange(n), kw.get("constraint_idx", []))
        targets = rng.standard_normal(len(free))
        return field_objective(problem, targets, free)
    raise RuntimeError("could not draw an instance away from activation kinks")


def check(variant, kind, instances=50, seed=0, h=1e-5, tol=1e-4, corrupt=False):
    """Compare reverse-mode and central-difference gradients on seeded instances.

    ``corrupt`` scales the reverse-mode gradient by 1.01 (a harness hook
    for confirming that failures are reported).
    """
    rng = np.random.default_rng([seed, VARIANTS.index(variant), PROBLEMS.index(kind)])
    errs = []
    for _ in range(instances):
        loss_fn, grad_fn, theta = random_instance(variant, kind, rng)
        _, g = grad_fn(theta)
        if corrupt:
            g = 1.01 * g
        errs.append(relative_error(g, finite_diff_grad(loss_fn, theta, h=h)))
    return CheckResult(variant, kind, errs, tol)
