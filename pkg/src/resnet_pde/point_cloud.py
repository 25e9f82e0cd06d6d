"""Point clouds sampled from a manifold.

Holds the sample points together with everything the point integral
operators need: kernel bandwidth, neighbour lists, the kernel matrix
``R_delta(x, y)``, volume weights ``V(y)`` and the normalizer
``wbar(x) = sum_y R_delta(x, y) V(y)``.

Also provides closed-form charts for a few test manifolds (circle,
sphere, flat plane) so the discrete operators can be compared with the
exact tangential gradient, and small seeded dataset generators.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import integrate, sparse
from scipy.spatial import cKDTree


class IsolatedPointError(ValueError):
    """A point has no neighbour other than itself inside the kernel support."""

    def __init__(self, index):
        self.index = int(index)
        super().__init__(
            f"isolated point {self.index}: no other point within the kernel "
            "support; increase delta or the kernel cutoff"
        )


class SingularChartError(ValueError):
    pass


# ----------------------------------------------------------------------------
# kernels
# ----------------------------------------------------------------------------

KERNEL_PROFILES: dict[str, Callable[[np.ndarray], np.ndarray]] = {
    "gaussian": lambda r: np.exp(-r),
}


@dataclass(frozen=True)
class KernelSpec:
    """Kernel profile ``R(r)`` evaluated at ``r = |x - y|^2 / delta^2``.

    ``cutoff`` is the support radius in units of delta: ``R`` is set to
    zero once ``|x - y| > cutoff * delta``.
    """

    shape: str = "gaussian"
    cutoff: float = 4.0

    def __post_init__(self):
        if self.shape not in KERNEL_PROFILES:
            raise ValueError(f"unknown kernel shape {self.shape!r}")
        if not (self.cutoff > 0 and math.isfinite(self.cutoff)):
            raise ValueError("kernel cutoff must be a positive finite number")

    def profile(self, r):
        r = np.asarray(r, dtype=float)
        vals = KERNEL_PROFILES[self.shape](r)
        return np.where(r <= self.cutoff**2, vals, 0.0)

    def second_moment(self, m: int) -> float:
        """Ratio ``int |z|^2 R(|z|^2) dz / int R(|z|^2) dz`` over R^m.

        For the untruncated Gaussian this is ``m / 2``; the truncated value
        is computed by radial quadrature.
        """
        prof = KERNEL_PROFILES[self.shape]
        c = self.cutoff
        num = integrate.quad(lambda s: s ** (m + 1) * prof(s * s), 0.0, c)[0]
        den = integrate.quad(lambda s: s ** (m - 1) * prof(s * s), 0.0, c)[0]
        return num / den

    def to_dict(self):
        return {"shape": self.shape, "cutoff": self.cutoff}


def kernel_eval(kernel: KernelSpec, sq_dist, delta: float):
    """``R_delta`` for squared distances; zero beyond the cutoff."""
    return kernel.profile(np.asarray(sq_dist, dtype=float) / delta**2)


# ----------------------------------------------------------------------------
# point cloud
# ----------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class PointCloud:
    points: np.ndarray
    delta: float
    kernel: KernelSpec
    neighbors: tuple
    wbar: np.ndarray
    volumes: np.ndarray
    intrinsic_dim: int
    # CSR matrix with entries R_delta(x_i, x_j) on the neighbour pattern
    kernel_matrix: sparse.csr_matrix = field(repr=False)
    volume_mode: str = "uniform"

    @property
    def n(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    def check_field(self, u, name="u"):
        u = np.asarray(u, dtype=float)
        if u.shape[0] != self.n or u.ndim > 2:
            raise ValueError(
                f"{name} has shape {u.shape}; expected ({self.n},) or ({self.n}, C)"
            )
        if not np.all(np.isfinite(u)):
            raise ValueError(f"{name} contains non-finite values")
        return u

    def manifest(self) -> dict:
        return {
            "n": self.n,
            "dim": self.dim,
            "delta": self.delta,
            "kernel": self.kernel.to_dict(),
            "volume_mode": self.volume_mode,
            "intrinsic_dim": self.intrinsic_dim,
        }


def _as_points(points) -> np.ndarray:
    if isinstance(points, np.ndarray):
        pts = points.astype(float)
    else:
        rows = [np.atleast_1d(np.asarray(p, dtype=float)) for p in points]
        if len({r.shape for r in rows}) > 1:
            raise ValueError("dimension mismatch: points do not share one dimension")
        pts = np.array(rows, dtype=float)
    if pts.ndim == 1:
        pts = pts[:, None]
    if pts.ndim != 2:
        raise ValueError("dimension mismatch: points must form an (n, d) array")
    return pts


def _neighbor_pairs(points, radius, index):
    """Return (rows, cols, sq_dist) for all pairs within ``radius``."""
    n = points.shape[0]
    r2 = radius * radius
    if index == "kdtree":
        tree = cKDTree(points)
        pairs = tree.query_pairs(radius * (1 + 1e-12), output_type="ndarray")
        rows = np.concatenate([pairs[:, 0], pairs[:, 1], np.arange(n)])
        cols = np.concatenate([pairs[:, 1], pairs[:, 0], np.arange(n)])
        sq = np.sum((points[rows] - points[cols]) ** 2, axis=1)
        keep = sq <= r2
        rows, cols, sq = rows[keep], cols[keep], sq[keep]
    elif index == "brute":
        rows_l, cols_l, sq_l = [], [], []
        chunk = max(1, 2_000_000 // max(n, 1))
        for start in range(0, n, chunk):
            block = points[start:start + chunk]
            # exact differences keep self distances at 0
            diff = block[:, None, :] - points[None, :, :]
            sq = np.einsum("ijk,ijk->ij", diff, diff)
            i, j = np.nonzero(sq <= r2)
            rows_l.append(i + start)
            cols_l.append(j)
            sq_l.append(sq[i, j])
        rows, cols, sq = map(np.concatenate, (rows_l, cols_l, sq_l))
    else:
        raise ValueError(f"unknown neighbour index {index!r}")
    order = np.lexsort((cols, rows))
    return rows[order], cols[order], sq[order]


def knn_volumes(points, k: int, m: int) -> np.ndarray:
    """Volume weights proportional to ``r_k(x)^m`` (inverse kNN density)."""
    n = points.shape[0]
    k = min(k, n - 1)
    dist, _ = cKDTree(points).query(points, k=k + 1)
    rk = dist[:, -1]
    if np.all(rk == 0):
        return np.full(n, 1.0 / n)
    rk = np.where(rk > 0, rk, rk[rk > 0].min())
    v = rk**m
    return v / v.sum()


def build_cloud(points, kernel: KernelSpec | None = None, delta: float = 1.0,
                volume_mode: str = "uniform", *, intrinsic_dim: int | None = None,
                volumes=None, index: str = "brute", knn: int = 10) -> PointCloud:
    """Precompute neighbourhoods, kernel weights, volumes and ``wbar``.

    ``volumes`` overrides ``volume_mode`` with explicit weights.
    """
    kernel = kernel or KernelSpec()
    pts = _as_points(points)
    n, d = pts.shape
    if n < 2:
        raise ValueError("a point cloud needs at least 2 points")
    if not np.all(np.isfinite(pts)):
        raise ValueError("points must be finite")
    if not (delta > 0 and math.isfinite(delta)):
        raise ValueError(f"delta must be positive, got {delta}")
    m = d if intrinsic_dim is None else int(intrinsic_dim)
    if not 1 <= m <= d:
        raise ValueError(f"intrinsic_dim must lie in [1, {d}], got {m}")

    rows, cols, sq = _neighbor_pairs(pts, kernel.cutoff * delta, index)
    vals = kernel_eval(kernel, sq, delta)
    K = sparse.csr_matrix((vals, (rows, cols)), shape=(n, n))
    K.sort_indices()

    counts = np.diff(K.indptr)
    if np.any(counts < 2):
        raise IsolatedPointError(np.flatnonzero(counts < 2)[0])

    if volumes is not None:
        V = np.asarray(volumes, dtype=float).copy()
        if V.shape != (n,) or np.any(V < 0) or not np.all(np.isfinite(V)):
            raise ValueError("volumes must be n finite non-negative numbers")
        volume_mode = "explicit"
    elif volume_mode == "uniform":
        V = np.full(n, 1.0 / n)
    elif volume_mode == "knn_density":
        V = knn_volumes(pts, knn, m)
    else:
        raise ValueError(f"unknown volume mode {volume_mode!r}")

    wbar = K @ V
    if np.any(wbar <= 0):
        raise IsolatedPointError(np.flatnonzero(wbar <= 0)[0])

    neighbors = tuple(K.indices[K.indptr[i]:K.indptr[i + 1]].copy() for i in range(n))
    for arr in (pts, V, wbar):
        arr.setflags(write=False)
    return PointCloud(points=pts, delta=float(delta), kernel=kernel, neighbors=neighbors,
                      wbar=wbar, volumes=V, intrinsic_dim=m, kernel_matrix=K,
                      volume_mode=volume_mode)


def suggest_delta(points, k: int = 10) -> float:
    """Median distance to the k-th nearest neighbour."""
    pts = _as_points(points)
    k = min(k, pts.shape[0] - 1)
    dist, _ = cKDTree(pts).query(pts, k=k + 1)
    return float(np.median(dist[:, -1]))


# ----------------------------------------------------------------------------
# analytic charts
# ----------------------------------------------------------------------------

@dataclass(frozen=True)
class AnalyticChart:
    """Closed-form parametrization ``X(theta)`` of a test manifold.

    circle: theta = angle, X in R^2.  sphere: theta = (polar, azimuth),
    X in R^3.  flat_plane: X(theta) = (theta_1, theta_2, 0).
    """

    kind: str
    radius: float = 1.0

    def __post_init__(self):
        if self.kind not in ("circle", "sphere", "flat_plane"):
            raise ValueError(f"unknown chart kind {self.kind!r}")

    @property
    def dim(self) -> int:
        return 2 if self.kind == "circle" else 3

    @property
    def intrinsic_dim(self) -> int:
        return 1 if self.kind == "circle" else 2

    def embed(self, theta):
        th = np.atleast_2d(np.asarray(theta, dtype=float).reshape(-1, self.intrinsic_dim))
        r = self.radius
        if self.kind == "circle":
            t = th[:, 0]
            return np.stack([r * np.cos(t), r * np.sin(t)], axis=1)
        if self.kind == "sphere":
            p, a = th[:, 0], th[:, 1]
            return r * np.stack([np.sin(p) * np.cos(a), np.sin(p) * np.sin(a), np.cos(p)], axis=1)
        return np.stack([th[:, 0], th[:, 1], np.zeros(len(th))], axis=1)

    def jacobian(self, theta):
        """Partials ``dX_k / dtheta_i`` as an (N, d, m) array."""
        th = np.atleast_2d(np.asarray(theta, dtype=float).reshape(-1, self.intrinsic_dim))
        N, r = len(th), self.radius
        if self.kind == "circle":
            t = th[:, 0]
            return np.stack([-r * np.sin(t), r * np.cos(t)], axis=1)[:, :, None]
        if self.kind == "sphere":
            p, a = th[:, 0], th[:, 1]
            dp = r * np.stack([np.cos(p) * np.cos(a), np.cos(p) * np.sin(a), -np.sin(p)], axis=1)
            da = r * np.stack([-np.sin(p) * np.sin(a), np.sin(p) * np.cos(a), np.zeros(N)], axis=1)
            return np.stack([dp, da], axis=2)
        J = np.zeros((N, 3, 2))
        J[:, 0, 0] = 1.0
        J[:, 1, 1] = 1.0
        return J

    def first_fundamental_form(self, theta):
        J = self.jacobian(theta)
        return np.einsum("nki,nkj->nij", J, J)

    def normal(self, theta):
        if self.kind == "flat_plane":
            th = np.atleast_2d(np.asarray(theta, dtype=float).reshape(-1, 2))
            return np.tile([0.0, 0.0, 1.0], (len(th), 1))
        return self.embed(theta) / self.radius

    def chart_coords(self, points):
        x = np.atleast_2d(np.asarray(points, dtype=float))
        if self.kind == "circle":
            return np.arctan2(x[:, 1], x[:, 0])[:, None]
        if self.kind == "sphere":
            rr = np.linalg.norm(x, axis=1)
            return np.stack([np.arccos(np.clip(x[:, 2] / rr, -1, 1)),
                             np.arctan2(x[:, 1], x[:, 0])], axis=1)
        return x[:, :2].copy()


def restrict_linear(chart: AnalyticChart, a, b: float = 0.0):
    """Pull the ambient affine function ``a . x + b`` back to the chart.

    Returns ``(U, dU)`` with ``U(theta)`` and its exact theta-gradient.
    """
    a = np.asarray(a, dtype=float)

    def U(theta):
        return chart.embed(theta) @ a + b

    def dU(theta):
        return np.einsum("nki,k->ni", chart.jacobian(theta), a)

    return U, dU


def _central_diff(U, theta, h=1e-3):
    th = np.atleast_2d(theta)
    m = th.shape[1]
    out = np.empty_like(th)
    for i in range(m):
        e = np.zeros(m)
        e[i] = h
        # fourth-order stencil
        out[:, i] = (-U(th + 2 * e) + 8 * U(th + e) - 8 * U(th - e) + U(th - 2 * e)) / (12 * h)
    return out


def analytic_gradient(chart: AnalyticChart, U, theta, dU=None):
    """Tangential gradient ``D_k u = sum_ij g^ij dX_k/dtheta_i dU/dtheta_j``.

    ``U`` is the function expressed in chart coordinates. If its
    derivative ``dU`` is not supplied it is taken by a fourth-order
    central difference. Accepts one chart point or an (N, m) batch.
    """
    theta = np.asarray(theta, dtype=float)
    single = theta.ndim <= 1
    th = np.atleast_2d(theta.reshape(-1, chart.intrinsic_dim))
    J = chart.jacobian(th)
    G = np.einsum("nki,nkj->nij", J, J)
    cond = np.linalg.cond(G)
    if np.any(~np.isfinite(cond)) or np.any(cond > 1e12):
        bad = int(np.flatnonzero(~np.isfinite(cond) | (cond > 1e12))[0])
        raise SingularChartError(f"first fundamental form singular at chart point {th[bad]}")
    grad_theta = dU(th) if dU is not None else _central_diff(U, th)
    grad_theta = np.asarray(grad_theta, dtype=float).reshape(len(th), chart.intrinsic_dim)
    coef = np.linalg.solve(G, grad_theta[:, :, None])[:, :, 0]
    D = np.einsum("nki,ni->nk", J, coef)
    return D[0] if single else D


# ----------------------------------------------------------------------------
# datasets
# ----------------------------------------------------------------------------

@dataclass(eq=False)
class LabeledDataset:
    cloud: PointCloud
    labels: np.ndarray
    train_mask: np.ndarray
    constraint_mask: np.ndarray
    kind: str = "custom"
    seed: int | None = None
    chart: AnalyticChart | None = None
    theta: np.ndarray | None = None
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        n = self.cloud.n
        self.labels = np.asarray(self.labels)
        self.train_mask = np.asarray(self.train_mask, dtype=bool)
        self.constraint_mask = np.asarray(self.constraint_mask, dtype=bool)
        for name in ("labels", "train_mask", "constraint_mask"):
            if getattr(self, name).shape != (n,):
                raise ValueError(f"{name} must have length {n}")
        if np.any(self.constraint_mask & ~self.train_mask):
            raise ValueError("constraint set must be a subset of the training set")

    @property
    def is_classification(self) -> bool:
        return np.issubdtype(self.labels.dtype, np.integer)

    @property
    def n_classes(self) -> int:
        return int(self.labels.max()) + 1 if self.is_classification else 0

    def with_masks(self, train_mask=None, constraint_mask=None) -> "LabeledDataset":
        return LabeledDataset(
            cloud=self.cloud, labels=self.labels,
            train_mask=self.train_mask if train_mask is None else train_mask,
            constraint_mask=self.constraint_mask if constraint_mask is None else constraint_mask,
            kind=self.kind, seed=self.seed, chart=self.chart, theta=self.theta,
            params=dict(self.params))


def _two_moons(n, noise, rng):
    n_out = n // 2
    n_in = n - n_out
    t_out = np.linspace(0, np.pi, n_out)
    t_in = np.linspace(0, np.pi, n_in)
    outer = np.stack([np.cos(t_out), np.sin(t_out)], axis=1)
    inner = np.stack([1 - np.cos(t_in), 1 - np.sin(t_in) - 0.5], axis=1)
    X = np.concatenate([outer, inner])
    y = np.concatenate([np.zeros(n_out, dtype=np.int64), np.ones(n_in, dtype=np.int64)])
    X = X + noise * rng.standard_normal(X.shape)
    return X, y


def _fibonacci_sphere(n, radius):
    i = np.arange(n) + 0.5
    polar = np.arccos(1 - 2 * i / n)
    azim = np.mod(np.pi * (1 + 5**0.5) * i, 2 * np.pi)
    theta = np.stack([polar, azim], axis=1)
    return theta


DATASET_KINDS = ("two_moons", "circle", "sphere", "flat_plane", "two_blobs")


def gen_dataset(kind: str, n: int, seed: int = 0, *, noise: float = 0.1, radius: float = 1.0,
                side: float = 1.0, separation: float = 6.0, delta: float | None = None,
                kernel: KernelSpec | None = None, volume_mode: str = "uniform") -> LabeledDataset:
    """Seeded toy datasets.

    ``two_moons`` and ``two_blobs`` carry integer class labels; the chart
    kinds carry the first ambient coordinate as a real label field and the
    chart coordinates of every point. ``delta`` defaults to
    :func:`suggest_delta`.
    """
    if kind not in DATASET_KINDS:
        raise ValueError(f"unknown dataset kind {kind!r}; choose from {DATASET_KINDS}")
    if n < 4:
        raise ValueError(f"need n >= 4 points, got {n}")
    rng = np.random.default_rng(seed)
    chart = theta = None
    m = None
    params = {"n": n}
    if kind == "two_moons":
        X, y = _two_moons(n, noise, rng)
        params["noise"] = noise
    elif kind == "two_blobs":
        n0 = n // 2
        X = rng.standard_normal((n, 2))
        X[n0:, 0] += separation
        y = np.concatenate([np.zeros(n0, dtype=np.int64), np.ones(n - n0, dtype=np.int64)])
        params["separation"] = separation
    else:
        chart = AnalyticChart(kind, radius=radius if kind != "flat_plane" else 1.0)
        m = chart.intrinsic_dim
        if kind == "circle":
            theta = (2 * np.pi * np.arange(n) / n)[:, None]
            params["radius"] = radius
        elif kind == "sphere":
            theta = _fibonacci_sphere(n, radius)
            params["radius"] = radius
        else:
            theta = rng.uniform(0.0, side, size=(n, 2))
            params["side"] = side
        X = chart.embed(theta)
        y = X[:, 0].copy()
    if delta is None:
        delta = suggest_delta(X)
    cloud = build_cloud(X, kernel or KernelSpec(), delta, volume_mode, intrinsic_dim=m)
    return LabeledDataset(cloud=cloud, labels=y, train_mask=np.ones(n, dtype=bool),
                          constraint_mask=np.zeros(n, dtype=bool), kind=kind, seed=seed,
                          chart=chart, theta=theta, params=params)
