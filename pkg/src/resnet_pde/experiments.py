"""Builders that turn a validated run configuration into models and problems."""
from __future__ import annotations

import numpy as np

from .flows import FCTerminal, TimeGrid
from .hj_solver import PDEProblem, cfl_suggest
from .pim import OperatorConfig, pim_gradient_field
from .point_cloud import (KernelSpec, LabeledDataset, analytic_gradient, gen_dataset,
                          restrict_linear)
from .velocity import LinearVelocity, MLPVelocity, RBFVelocity, ResBlockVelocity

VARIANTS = ("resblock", "linear", "mlp", "rbf")
PROBLEMS = ("transport", "hj", "viscous_hj")


def make_velocity(variant, d, n_steps, rng, hidden=16, centers=None, init_points=None):
    if variant == "resblock":
        m = ResBlockVelocity.init(d, hidden, n_steps, rng)
        if init_points is not None:
            m.freeze_statistics(init_points)
        return m
    if variant == "linear":
        return LinearVelocity.init(d, n_steps, rng)
    if variant == "mlp":
        return MLPVelocity.init(d, hidden, n_steps, rng)
    if variant == "rbf":
        if centers is None:
            raise ValueError("rbf velocity needs centers")
        return RBFVelocity.init(centers, n_steps)
    raise ValueError(f"unknown velocity variant {variant!r}; choose from {VARIANTS}")


def split_masks(n, train_fraction, constraint_ratio, rng, with_constraints):
    """Random training set T and constraint subset S of T."""
    train = np.zeros(n, dtype=bool)
    n_train = max(1, int(round(train_fraction * n)))
    train[np.sort(rng.choice(n, n_train, replace=False))] = True
    cons = np.zeros(n, dtype=bool)
    if with_constraints:
        T = np.flatnonzero(train)
        n_s = max(1, int(round(constraint_ratio * len(T))))
        cons[np.sort(rng.choice(T, n_s, replace=False))] = True
    return train, cons


def class_targets(labels, n_classes):
    """+-1 targets: a scalar for two classes, one column per class otherwise."""
    labels = np.asarray(labels)
    if n_classes == 2:
        return 2.0 * labels - 1.0
    return 2.0 * np.eye(n_classes)[labels] - 1.0


def linear_fit_initial(points, targets, mask):
    """Least-squares affine fit of the targets on the training points.

    This plays the role of the fully connected terminal layer: the initial
    field of a field problem is ``f(x) = A x + b`` fit once and kept fixed.
    """
    Xa = np.hstack([points, np.ones((len(points), 1))])
    coef, *_ = np.linalg.lstsq(Xa[mask], targets[mask], rcond=None)
    return Xa @ coef


def make_field_problem(dataset: LabeledDataset, kind, velocity, n_steps,
                       dissipation=1.0, cfg=None, initial="linear_fit"):
    """Problem for the HJ-type kinds using the dataset's train/constraint masks."""
    C = dataset.n_classes
    g = class_targets(dataset.labels, C)
    if initial == "linear_fit":
        u0 = linear_fit_initial(dataset.cloud.points, g, dataset.train_mask)
    elif initial == "coordinate":
        x = dataset.cloud.points[:, 0]
        u0 = (x - x.mean()) / (x.std() or 1.0)
        if g.ndim == 2:
            u0 = np.tile(u0[:, None], (1, C))
    else:
        raise ValueError(f"unknown initial map {initial!r}")
    kw = {}
    if kind == "transport":
        kind = "transport_manifold"
    if kind == "viscous_hj":
        S = np.flatnonzero(dataset.constraint_mask)
        kw = dict(dissipation=dissipation, constraint_idx=S, constraint_values=g[S])
    problem = PDEProblem(kind, dataset.cloud, u0, velocity, TimeGrid(n_steps),
                         cfg=cfg or OperatorConfig(), **kw)
    fit = dataset.train_mask & ~dataset.constraint_mask
    idx = np.flatnonzero(fit)
    return problem, g[idx], idx


_GEN_KEYS = {"two_moons": ("noise",), "two_blobs": ("separation",), "circle": ("radius",),
             "sphere": ("radius",), "flat_plane": ("side",)}


def build_dataset(cfg: dict, rng, with_constraints=True) -> LabeledDataset:
    """Dataset from a validated ``dataset`` config section.

    A ``path`` loads a dataset written by :func:`io.write_dataset` and
    keeps its masks; otherwise one is generated and the train and
    constraint masks are drawn from ``rng``.
    """
    if cfg.get("path"):
        from .io import read_dataset
        return read_dataset(cfg["path"])
    kind = cfg["kind"]
    extra = {k: cfg[k] for k in _GEN_KEYS[kind]}
    seed = int(rng.integers(2**31))
    ds = gen_dataset(kind, cfg["n"], seed, kernel=KernelSpec(cutoff=cfg["cutoff"]),
                     delta=cfg["delta"], volume_mode=cfg["volume_mode"], **extra)
    train, cons = split_masks(ds.cloud.n, cfg["train_fraction"], cfg["constraint_ratio"],
                              rng, with_constraints)
    return ds.with_masks(train, cons)


def steps_for_cfl(problem: PDEProblem, safety: float = 0.5) -> int:
    """Smallest step count at least ``problem.grid.L`` whose step obeys :func:`cfl_suggest`."""
    dt_max = cfl_suggest(problem, safety)
    if not np.isfinite(dt_max):
        return problem.grid.L
    return max(problem.grid.L, int(np.ceil(1.0 / dt_max)))


def manifold_spacing(kind, n, radius=1.0, side=1.0):
    """Mean sample spacing of the deterministic chart samplers."""
    if kind == "circle":
        return 2 * np.pi * radius / n
    if kind == "sphere":
        return np.sqrt(4 * np.pi * radius**2 / n)
    return side / np.sqrt(n)


def convergence_table(manifold, sizes, delta_rule="sqrt", constant=3.0, field="linear",
                      normalization="moment", radius=1.0, seed=0):
    """RMS error of the point-integral gradient against the analytic gradient.

    ``delta_rule`` picks the bandwidth from the mean spacing ``h``:
    ``sqrt`` gives ``constant * h**0.5``, ``linear`` gives
    ``constant * h`` and ``fixed`` uses ``constant`` itself. The test
    field is the first ambient coordinate (``linear``) or ``1``.
    Returns rows ``(n, delta, l2_error, rate)`` where ``rate`` is the
    observed order in ``h`` between consecutive rows (``None`` first).
    """
    cfg = OperatorConfig(normalization=normalization)
    rows = []
    for n in sizes:
        h = manifold_spacing(manifold, n, radius)
        delta = {"sqrt": constant * h**0.5, "linear": constant * h, "fixed": constant}[delta_rule]
        ds = gen_dataset(manifold, n, seed, delta=delta, radius=radius)
        a = np.zeros(ds.cloud.dim)
        if field == "linear":
            a[0] = 1.0
        U, dU = restrict_linear(ds.chart, a, 0.0 if field == "linear" else 1.0)
        exact = analytic_gradient(ds.chart, U, ds.theta, dU)
        approx = pim_gradient_field(ds.cloud, U(ds.theta), cfg)
        err = float(np.sqrt(np.mean(np.sum((approx - exact) ** 2, axis=1))))
        rate = None
        if rows and rows[-1][2] > 0 and err > 0:
            h0 = manifold_spacing(manifold, rows[-1][0], radius)
            rate = float(np.log(rows[-1][2] / err) / np.log(h0 / h))
        rows.append((n, float(delta), err, rate))
    return rows


def make_terminal(n_classes, d, rng):
    return FCTerminal.init(n_classes, d, rng)
