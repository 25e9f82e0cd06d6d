"""Explicit time stepping of the point-cloud control PDEs.

Three problem kinds share one marching loop from ``u(., 0) = f`` to
``u(., 1)``:

``hj``
    ``u <- u + dt * vbar * |grad u|`` with the kernel gradient-norm estimator.
``viscous_hj``
    ``u <- u + dt * (vbar * |grad u| + eps * Lap u)``, then ``u = g`` on S.
``transport_manifold``
    a vector-field model moves the sample positions along characteristics
    and ``f`` is read off at the endpoints; a scalar speed ``vbar`` instead
    advects the field along its own normal using the PIM gradient,
    ``u <- u + dt * vbar * |G u|``.

For ``hj``/``viscous_hj`` a vector-field model is reduced to its normal
speed ``vbar = v . G u / |G u|``.

The homogeneous Neumann condition needs no treatment: the kernel-sum
Laplacian has no boundary flux term. There is no upwinding; stability is
left to the step size (see :func:`cfl_suggest`).
"""
from __future__ import annotations

import csv
import functools
import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .flows import TimeGrid, euler_flow
from .linalg import power_iteration
from .pim import OperatorConfig, operators
from .point_cloud import PointCloud, kernel_eval

KINDS = ("transport_manifold", "hj", "viscous_hj")


class StepSizeError(FloatingPointError):
    def __init__(self, dt, step=None):
        self.dt, self.step = dt, step
        where = "" if step is None else f" at step {step}"
        super().__init__(f"non-finite field{where} with dt={dt:g}; reduce the time step")


class CFLViolationError(ValueError):
    def __init__(self, dt, dt_max):
        self.dt, self.dt_max = dt, dt_max
        super().__init__(
            f"dt={dt:g} breaks the diffusion step bound {dt_max:g}; use a smaller dt "
            "(see cfl_suggest)")


@dataclass(eq=False)
class PDEProblem:
    kind: str
    cloud: PointCloud
    initial: object                      # (n,) / (n, C) array, or callable f(x) for transport
    velocity: object
    grid: TimeGrid
    dissipation: float = 0.0
    constraint_idx: np.ndarray | None = None
    constraint_values: np.ndarray | None = None
    cfg: OperatorConfig = field(default_factory=OperatorConfig)
    weights: object = None              # explicit gradient-norm weights (test hook)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown problem kind {self.kind!r}; choose from {KINDS}")
        idx = np.zeros(0, dtype=np.int64) if self.constraint_idx is None else \
            np.asarray(self.constraint_idx, dtype=np.int64).ravel()
        self.constraint_idx = idx
        if self.kind == "viscous_hj":
            if not self.dissipation > 0:
                raise ValueError("viscous_hj needs a positive dissipation")
            if idx.size == 0:
                raise ValueError("viscous_hj needs a nonempty constraint set S")
            if np.any(idx < 0) or np.any(idx >= self.cloud.n):
                raise ValueError("constraint index out of range")
            self.constraint_values = np.asarray(self.constraint_values, dtype=float)
            if self.constraint_values.shape[0] != idx.size:
                raise ValueError("need one constraint value per constrained point")
        else:
            if self.dissipation != 0:
                raise ValueError("dissipation is only allowed for viscous_hj")
            if idx.size:
                raise ValueError("constraints are only allowed for viscous_hj")
        if self.velocity.n_steps != self.grid.L:
            raise ValueError(f"velocity has {self.velocity.n_steps} steps, grid has {self.grid.L}")
        if not callable(self.initial):
            self.initial = self.cloud.check_field(self.initial, "initial")
        elif not (self.kind == "transport_manifold" and self.velocity.kind == "vector"):
            raise ValueError("a callable initial map is only used by Lagrangian transport")

    @property
    def lagrangian(self) -> bool:
        return self.kind == "transport_manifold" and self.velocity.kind == "vector"

    def initial_field(self):
        u = np.array(self.initial, dtype=float)
        if self.kind == "viscous_hj":
            u[self.constraint_idx] = self.constraint_values
        return u


@dataclass
class SolveResult:
    final: np.ndarray
    snapshots: list | None
    diagnostics: dict

    def write(self, prefix):
        """``<prefix>_snapshots.csv`` (or ``_final.csv``) plus ``<prefix>_diagnostics.json``."""
        fields = self.snapshots if self.snapshots is not None else [self.final]
        with open(f"{prefix}_snapshots.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            cols = 1 if self.final.ndim == 1 else self.final.shape[1]
            w.writerow(["step", "index"] + [f"u{j}" for j in range(cols)])
            first = 0 if self.snapshots is not None else len(self.diagnostics["max_update"])
            for k, u in enumerate(fields, start=first):
                u2 = u.reshape(len(u), -1)
                for i, row in enumerate(u2):
                    w.writerow([k, i] + [repr(float(v)) for v in row])
        with open(f"{prefix}_diagnostics.json", "w") as fh:
            json.dump(self.diagnostics, fh, indent=2)


# ----------------------------------------------------------------------------
# single steps
# ----------------------------------------------------------------------------

def _bcast(v, u):
    v = np.asarray(v, dtype=float)
    return v[:, None] if (u.ndim == 2 and v.ndim == 1) else v


def hj_step(cloud: PointCloud, u, vbar, dt, cfg: OperatorConfig | None = None, weights=None):
    """``u + dt * vbar * |grad u|``."""
    u = cloud.check_field(u)
    N = operators(cloud, cfg).gradnorm(u, weights)
    out = u + dt * _bcast(vbar, u) * N
    if not np.all(np.isfinite(out)):
        raise StepSizeError(dt)
    return out


def heat_rate(cloud: PointCloud, cfg: OperatorConfig | None = None) -> float:
    """Largest diagonal magnitude of the discrete Laplacian."""
    L = operators(cloud, cfg).laplacian_matrix
    return float(np.max(-L.diagonal()))


def viscous_hj_step(cloud: PointCloud, u, vbar, dt, eps, S, g, cfg: OperatorConfig | None = None,
                    weights=None, check_cfl=True):
    """``u + dt * (vbar |grad u| + eps Lap u)`` followed by ``u[S] = g``.

    Raises :class:`CFLViolationError` when the diffusion part would lose
    the discrete maximum principle (``dt * eps * max|L_xx| > 1``).
    """
    u = cloud.check_field(u)
    S = np.asarray(S, dtype=np.int64)
    if S.size == 0:
        raise ValueError("constraint set S is empty")
    ops = operators(cloud, cfg)
    if check_cfl and eps > 0:
        rate = heat_rate(cloud, cfg)
        if dt * eps * rate > 1.0:
            raise CFLViolationError(dt, 1.0 / (eps * rate))
    rhs = _bcast(vbar, u) * ops.gradnorm(u, weights)
    if eps:
        rhs = rhs + eps * (ops.laplacian_matrix @ u)
    out = u + dt * rhs
    out[S] = g
    if not np.all(np.isfinite(out)):
        raise StepSizeError(dt)
    return out


# ----------------------------------------------------------------------------
# marching with a reverse sweep
# ----------------------------------------------------------------------------

def _columns(u):
    return [u] if u.ndim == 1 else [u[:, j] for j in range(u.shape[1])]


def _stack(cols, like):
    return cols[0] if like.ndim == 1 else np.stack(cols, axis=1)


class Stepper:
    """One explicit step of an Eulerian problem and its vector-Jacobian product."""

    def __init__(self, problem: PDEProblem):
        if problem.lagrangian:
            raise ValueError("Lagrangian transport is marched by euler_flow")
        self.p = problem
        self.ops = operators(problem.cloud, problem.cfg)
        self.dt = problem.grid.dt
        self.points = problem.cloud.points

    def _speed(self, u, k):
        model = self.p.velocity
        if model.kind == "scalar":
            return model.value(self.points, k), None
        v = model.displacement(self.points, k) / self.dt
        normals, grads = [], []
        for col in _columns(u):
            gcol = self.ops.gradient(col)
            gn = np.linalg.norm(gcol, axis=1)
            nrm = np.divide(gcol, gn[:, None], out=np.zeros_like(gcol), where=gn[:, None] > 0)
            normals.append(nrm)
            grads.append(gn)
        vbar = _stack([np.einsum("nd,nd->n", v, nrm) for nrm in normals], u)
        return vbar, (v, normals, grads)

    def _norm(self, u):
        if self.p.kind == "transport_manifold":
            return _stack([np.linalg.norm(self.ops.gradient(c), axis=1) for c in _columns(u)], u)
        return self.ops.gradnorm(u, self.p.weights)

    def forward(self, u, k):
        vbar, vcache = self._speed(u, k)
        N = self._norm(u)
        rhs = _bcast(vbar, u) * N
        eps = self.p.dissipation
        if eps:
            rhs = rhs + eps * (self.ops.laplacian_matrix @ u)
        out = u + self.dt * rhs
        if self.p.kind == "viscous_hj":
            out[self.p.constraint_idx] = self.p.constraint_values
        if not np.all(np.isfinite(out)):
            raise StepSizeError(self.dt, k)
        return out, (u, vbar, vcache, N)

    def backward(self, k, cache, ubar_next, grads):
        """Accumulate parameter gradients into ``grads``; return the cotangent of ``u_k``."""
        u, vbar, vcache, N = cache
        dt, model = self.dt, self.p.velocity
        ub = np.array(ubar_next, dtype=float)
        if self.p.kind == "viscous_hj":
            ub[self.p.constraint_idx] = 0.0
        out = ub.copy()
        if self.p.dissipation:
            out += dt * self.p.dissipation * (self.ops.laplacian_matrix.T @ ub)

        gN = dt * ub * _bcast(vbar, u)
        if self.p.kind == "transport_manifold":
            cols = []
            for col, gcol in zip(_columns(u), _columns(gN)):
                G = self.ops.gradient(col)
                gn = np.linalg.norm(G, axis=1)
                s = np.divide(gcol, gn, out=np.zeros_like(gn), where=gn > 0)
                cols.append(self.ops.gradient_vjp(s[:, None] * G))
            out += _stack(cols, u)
        else:
            out += self.ops.gradnorm_vjp(u, N, gN, self.p.weights)

        gv = dt * ub * N
        if model.kind == "scalar":
            if gv.ndim == 2 and np.ndim(vbar) == 1:
                gv = gv.sum(axis=1)
            gk, _ = model.vjp(self.points, k, gv)
        else:
            v, normals, gnorms = vcache
            vcot = np.zeros_like(v)
            cols = []
            for gcol, nrm, gn in zip(_columns(gv), normals, gnorms):
                vcot += gcol[:, None] * nrm
                tang = v - np.einsum("nd,nd->n", v, nrm)[:, None] * nrm
                s = np.divide(gcol, gn, out=np.zeros_like(gn), where=gn > 0)
                cols.append(self.ops.gradient_vjp(s[:, None] * tang))
            out += _stack(cols, u)
            gk, _ = model.vjp(self.points, k, vcot / dt)
        for name, g in gk.items():
            grads[name][k] += g
        return out


def kernel_interpolate(cloud: PointCloud, values, x):
    """Kernel-weighted average of point values at new positions.

    Positions outside every kernel support take the nearest point's value.
    """
    values = np.asarray(values, dtype=float)
    x = np.atleast_2d(x)
    tree = cKDTree(cloud.points)
    radius = cloud.kernel.cutoff * cloud.delta
    out = np.empty((len(x),) + values.shape[1:])
    for i, xi in enumerate(x):
        idx = tree.query_ball_point(xi, radius)
        if idx:
            idx = np.asarray(idx)
            sq = np.sum((cloud.points[idx] - xi) ** 2, axis=1)
            w = kernel_eval(cloud.kernel, sq, cloud.delta) * cloud.volumes[idx]
            if w.sum() > 0:
                out[i] = np.tensordot(w, values[idx], axes=1) / w.sum()
                continue
        out[i] = values[tree.query(xi)[1]]
    return out


def solve(problem: PDEProblem, snapshots: bool = False, record: bool = False) -> SolveResult:
    """March ``problem`` over its time grid.

    ``record=True`` keeps the per-step caches in ``diagnostics["_tape"]``
    for a reverse sweep (used by training).
    """
    grid = problem.grid
    dt = grid.dt
    if problem.lagrangian:
        traj = euler_flow(problem.velocity, problem.cloud.points, grid)
        if callable(problem.initial):
            final = np.asarray(problem.initial(traj.final), dtype=float)
        else:
            final = kernel_interpolate(problem.cloud, problem.initial, traj.final)
        steps = np.linalg.norm(np.diff(traj.states, axis=0), axis=2).max(axis=1)
        diag = {"kind": problem.kind, "dt": dt, "steps": grid.L,
                "max_update": [float(s) for s in steps]}
        if record:
            diag["_tape"] = traj
        return SolveResult(final, None, diag)

    stepper = Stepper(problem)
    u = problem.initial_field()
    snaps = [u.copy()] if snapshots else None
    tape, max_update = [], []
    dt_max = cfl_suggest(problem)
    if problem.kind == "viscous_hj":
        rate = heat_rate(problem.cloud, problem.cfg)
        if dt * problem.dissipation * rate > 1.0:
            raise CFLViolationError(dt, 1.0 / (problem.dissipation * rate))
    for k in range(grid.L):
        u_next, cache = stepper.forward(u, k)
        max_update.append(float(np.max(np.abs(u_next - u))))
        if record:
            tape.append(cache)
        u = u_next
        if snapshots:
            snaps.append(u.copy())
    diag = {"kind": problem.kind, "dt": dt, "steps": grid.L, "cfl_dt": dt_max,
            "cfl_ratio": dt / dt_max if math.isfinite(dt_max) else 0.0,
            "max_update": max_update}
    if record:
        diag["_tape"] = tape
    return SolveResult(u, snaps, diag)


@functools.lru_cache(maxsize=16)
def laplacian_spectral_bound(cloud: PointCloud, cfg: OperatorConfig | None = None,
                             iters: int = 500) -> float:
    """Top eigenvalue of ``-delta^2 * Lap`` by power iteration.

    The random-walk Laplacian is symmetrized by its stationary weights
    ``V(x) wbar(x)``; the result is raised to the largest diagonal entry
    if the iteration has not reached it (a valid lower bound for the top
    eigenvalue of a symmetric matrix).
    """
    ops = operators(cloud, cfg)
    A = -cloud.delta**2 * ops.laplacian_matrix
    pi = cloud.volumes * cloud.wbar
    sq, isq = np.sqrt(pi), 1.0 / np.sqrt(pi)
    lam = power_iteration(lambda v: sq * (A @ (isq * v)), cloud.n, iters=iters)
    return max(lam, float(np.max(A.diagonal())))


def cfl_suggest(problem: PDEProblem, safety: float = 0.5) -> float:
    """``safety * min(delta^2 / (2 eps lam), delta / max|vbar|)``; ``inf`` if unconstrained."""
    cloud = problem.cloud
    bounds = []
    eps = problem.dissipation
    if eps > 0:
        lam = laplacian_spectral_bound(cloud, problem.cfg)
        bounds.append(cloud.delta**2 / (2.0 * eps * lam))
    model = problem.velocity
    if model.kind == "scalar":
        vmax = float(np.max(np.abs(model.value(cloud.points, 0))))
    else:
        vmax = float(np.max(np.linalg.norm(model.displacement(cloud.points, 0), axis=1))) \
            / problem.grid.dt
    if vmax > 0:
        bounds.append(cloud.delta / vmax)
    return safety * min(bounds) if bounds else math.inf
