"""Point integral discretizations of manifold operators.

All operators act on per-point values ``u`` (an array of length
``cloud.n``, or ``(n, C)`` where noted) and are built once per
``(cloud, cfg)`` pair, then cached.

Gradient:
    raw(u)(x) = 1/wbar(x) * sum_y (u(x) - u(y)) (x - y) R_delta(x, y) V(y)

The raw sum is O(delta^2) times the tangential gradient. ``moment`` mode
rescales by ``m / (delta^2 * moment_constant)`` where the moment constant
is the second moment of the kernel profile (``m/2`` for a Gaussian);
``calibrated`` mode inverts the local second-moment matrix on an
estimated tangent space, which is exact on linear functions.
"""
from __future__ import annotations

import functools
import logging
from dataclasses import dataclass

import numpy as np
from scipy import sparse
from scipy.sparse.csgraph import connected_components

from .linalg import pcg
from .point_cloud import LabeledDataset, PointCloud

log = logging.getLogger(__name__)

NORMALIZATIONS = ("raw", "moment", "calibrated")


class SingularSystemError(ValueError):
    def __init__(self, index, msg=None):
        self.index = int(index)
        super().__init__(msg or (
            f"interpolation system is singular: the kernel-connected component "
            f"containing point {self.index} has no labeled point"))


@dataclass(frozen=True)
class OperatorConfig:
    """Scaling choices for the discrete operators.

    ``None`` constants are derived from the kernel: the moment constant
    is the kernel's second moment, the gradient-norm scale is
    ``m / moment`` and the Laplacian scale ``2 m / moment`` (so both are
    consistent with the continuous operators for any kernel).
    """

    normalization: str = "calibrated"
    moment_constant: float | None = None
    laplacian_scale: float | None = None
    gradnorm_scale: float | None = None
    cond_max: float = 1e8

    def __post_init__(self):
        if self.normalization not in NORMALIZATIONS:
            raise ValueError(f"normalization must be one of {NORMALIZATIONS}")
        for name in ("moment_constant", "laplacian_scale", "gradnorm_scale"):
            v = getattr(self, name)
            if v is not None and not v > 0:
                raise ValueError(f"{name} must be positive")

    def constants(self, cloud: PointCloud):
        m = cloud.intrinsic_dim
        moment = self.moment_constant or cloud.kernel.second_moment(m)
        gn = self.gradnorm_scale or m / moment
        lap = self.laplacian_scale or 2.0 * m / moment
        return moment, gn, lap

    def to_dict(self):
        return {"normalization": self.normalization, "moment_constant": self.moment_constant,
                "laplacian_scale": self.laplacian_scale, "gradnorm_scale": self.gradnorm_scale,
                "cond_max": self.cond_max}


def _segment_sum(idx, vals, n):
    if vals.ndim == 1:
        return np.bincount(idx, weights=vals, minlength=n)
    return np.stack([np.bincount(idx, weights=vals[:, j], minlength=n)
                     for j in range(vals.shape[1])], axis=1)


class PIMOperators:
    """Edge lists and matrices for one cloud and configuration."""

    def __init__(self, cloud: PointCloud, cfg: OperatorConfig):
        if cfg.normalization == "calibrated" and cloud.intrinsic_dim > cloud.dim:
            raise ValueError("calibrated mode needs intrinsic_dim <= ambient dimension")
        self.cloud, self.cfg = cloud, cfg
        n, d, m = cloud.n, cloud.dim, cloud.intrinsic_dim
        K = cloud.kernel_matrix
        rows = np.repeat(np.arange(n), np.diff(K.indptr))
        cols = K.indices
        V = cloud.volumes
        self.rows, self.cols = rows, cols
        self.w = K.data * V[cols]                      # R_delta(x, y) V(y)
        self.coef = self.w / cloud.wbar[rows]          # normalized by wbar(x)
        self.z = cloud.points[rows] - cloud.points[cols]
        delta2 = cloud.delta**2
        self.moment, gn_scale, lap_scale = cfg.constants(cloud)
        self.factor = m / (delta2 * self.moment)
        self.gn_w = gn_scale * self.coef / delta2
        self.lap_scale = lap_scale

        self.flagged = np.zeros(0, dtype=np.int64)
        eye = np.eye(d)
        if cfg.normalization == "raw":
            self.C = np.broadcast_to(eye, (n, d, d))
        elif cfg.normalization == "moment":
            self.C = np.broadcast_to(self.factor * eye, (n, d, d))
        else:
            self.C = self._calibration(n, d, m)

    def _calibration(self, n, d, m):
        M = np.empty((n, d, d))
        for i in range(d):
            for j in range(i, d):
                M[:, i, j] = M[:, j, i] = np.bincount(
                    self.rows, weights=self.coef * self.z[:, i] * self.z[:, j], minlength=n)
        lam, vec = np.linalg.eigh(M)
        lam_t, T = lam[:, ::-1][:, :m], vec[:, :, ::-1][:, :, :m]
        with np.errstate(divide="ignore", invalid="ignore"):
            cond = lam_t[:, 0] / lam_t[:, -1]
        bad = ~(lam_t[:, -1] > 0) | ~(cond <= self.cfg.cond_max)
        inv = np.where(bad[:, None], 0.0, 1.0 / np.where(bad[:, None], 1.0, lam_t))
        C = np.einsum("nim,nm,njm->nij", T, inv, T)
        if np.any(bad):
            self.flagged = np.flatnonzero(bad)
            C[bad] = self.factor * np.eye(d)
            log.warning("calibration singular at %d points; using moment scaling there",
                        bad.sum())
        return C

    # -- gradient ------------------------------------------------------------
    def raw_gradient(self, u):
        du = u[self.rows] - u[self.cols]
        return _segment_sum(self.rows, (self.coef * du)[:, None] * self.z, self.cloud.n)

    def gradient(self, u):
        return np.einsum("nij,nj->ni", self.C, self.raw_gradient(u))

    def gradient_vjp(self, gbar):
        rbar = np.einsum("nji,nj->ni", self.C, gbar)
        q = self.coef * np.einsum("ek,ek->e", self.z, rbar[self.rows])
        n = self.cloud.n
        return np.bincount(self.rows, q, minlength=n) - np.bincount(self.cols, q, minlength=n)

    # -- gradient norm ---------------------------------------------------------
    def _gn_edges(self, weights):
        if weights is None:
            return self.rows, self.cols, self.gn_w
        W = sparse.coo_matrix(weights)
        if W.shape != (self.cloud.n, self.cloud.n):
            raise ValueError("weight override must be an n x n matrix")
        return W.row, W.col, W.data.astype(float)

    def gradnorm(self, u, weights=None):
        rows, cols, w = self._gn_edges(weights)
        du = u[rows] - u[cols]
        wsq = w * du**2 if u.ndim == 1 else w[:, None] * du**2
        return np.sqrt(_segment_sum(rows, wsq, self.cloud.n))

    def gradnorm_vjp(self, u, N, gbar, weights=None):
        """Cotangent of ``u`` given the cotangent ``gbar`` of ``gradnorm(u)``.

        The subgradient at ``N(x) = 0`` is taken as 0.
        """
        rows, cols, w = self._gn_edges(weights)
        n = self.cloud.n
        scale = np.divide(gbar, N, out=np.zeros_like(N), where=N > 0)
        du = u[rows] - u[cols]
        s = (w * du * scale[rows]) if u.ndim == 1 else (w[:, None] * du * scale[rows])
        return _segment_sum(rows, s, n) - _segment_sum(cols, s, n)

    # -- Laplacian -----------------------------------------------------------
    @functools.cached_property
    def laplacian_matrix(self):
        n = self.cloud.n
        c = self.lap_scale / self.cloud.delta**2
        P = sparse.csr_matrix((self.coef, (self.rows, self.cols)), shape=(n, n))
        return (c * (P - sparse.diags(np.asarray(P.sum(axis=1)).ravel()))).tocsr()

    @functools.cached_property
    def symmetric_laplacian_matrix(self):
        n, V = self.cloud.n, self.cloud.volumes
        c = self.lap_scale / self.cloud.delta**2
        Ks = sparse.csr_matrix((self.w * V[self.rows], (self.rows, self.cols)), shape=(n, n))
        Ks = 0.5 * (Ks + Ks.T)
        return (c * (Ks - sparse.diags(np.asarray(Ks.sum(axis=1)).ravel()))).tocsr()


@functools.lru_cache(maxsize=16)
def operators(cloud: PointCloud, cfg: OperatorConfig | None = None) -> PIMOperators:
    return PIMOperators(cloud, cfg or OperatorConfig())


def pim_gradient(cloud: PointCloud, u, k: int, cfg: OperatorConfig | None = None):
    """Component ``k`` of the point-integral gradient of ``u``."""
    if not 0 <= k < cloud.dim:
        raise ValueError(f"axis {k} out of range for dimension {cloud.dim}")
    u = cloud.check_field(u)
    if u.ndim != 1:
        raise ValueError("pim_gradient takes a single scalar field")
    return operators(cloud, cfg).gradient(u)[:, k]


def pim_gradient_field(cloud: PointCloud, u, cfg: OperatorConfig | None = None):
    """All gradient components as an (n, d) array."""
    u = cloud.check_field(u)
    return operators(cloud, cfg).gradient(u)


def pim_gradient_norm(cloud: PointCloud, u, weight_mode: str = "kernel_over_wbar",
                      cfg: OperatorConfig | None = None, weights=None):
    """``(sum_y w(x, y) (u(x) - u(y))^2)^(1/2)``.

    With ``weight_mode="kernel_over_wbar"`` the weight is
    ``c R_delta(x, y) V(y) / (delta^2 wbar(x))``. ``weights`` replaces
    ``w`` by an explicit n x n matrix (used by tests).
    """
    if weight_mode != "kernel_over_wbar":
        raise ValueError(f"unknown weight mode {weight_mode!r}")
    u = cloud.check_field(u)
    return operators(cloud, cfg).gradnorm(u, weights)


def graph_laplacian(cloud: PointCloud, u, cfg: OperatorConfig | None = None,
                    symmetric: bool = False):
    """``(s/delta^2) (1/wbar(x)) sum_y R_delta(x, y) (u(y) - u(x)) V(y)``.

    ``symmetric=True`` uses weights ``V(x) R_delta(x, y) V(y)`` without the
    ``wbar`` division, giving a symmetric negative semidefinite matrix.
    """
    u = cloud.check_field(u)
    ops = operators(cloud, cfg)
    L = ops.symmetric_laplacian_matrix if symmetric else ops.laplacian_matrix
    return L @ u


# ----------------------------------------------------------------------------
# weighted nonlocal Laplacian
# ----------------------------------------------------------------------------

def wnll_system(cloud: PointCloud, labeled):
    """Symmetric weight matrix of the WNLL energy and the unlabeled index set.

    The energy is ``sum_x sum_y a(x, y) (u(x) - u(y))^2`` with
    ``a(x, y) = R_delta(x, y) V(y) (1 + |P|/|S| [x in S])``.
    """
    n = cloud.n
    labeled = np.asarray(labeled, dtype=bool)
    nS = int(labeled.sum())
    if nS == 0:
        raise ValueError("WNLL needs a nonempty labeled set")
    ops = operators(cloud, OperatorConfig(normalization="raw"))
    a = ops.w * (1.0 + (n / nS) * labeled[ops.rows])
    A = sparse.csr_matrix((a, (ops.rows, ops.cols)), shape=(n, n))
    B = (A + A.T).tocsr()
    B.setdiag(0.0)
    B.eliminate_zeros()
    return B, np.flatnonzero(~labeled)


def _check_connected(B, labeled):
    ncomp, comp = connected_components(B, directed=False)
    has_label = np.zeros(ncomp, dtype=bool)
    has_label[comp[labeled]] = True
    if not has_label.all():
        bad = np.flatnonzero(~has_label)[0]
        raise SingularSystemError(np.flatnonzero(comp == bad)[0])


def wnll_solve(cloud: PointCloud, labeled, g, solver: str = "auto", rtol: float = 1e-10):
    """Minimize the WNLL energy with ``u = g`` on the labeled set.

    ``g`` has one row per labeled point (any number of columns).
    ``solver`` is ``"cg"``, ``"dense"`` or ``"auto"`` (CG, dense
    elimination if CG stalls and n <= 2000).
    """
    labeled = np.asarray(labeled, dtype=bool)
    B, U = wnll_system(cloud, labeled)
    _check_connected(B, labeled)
    g = np.asarray(g, dtype=float)
    cols = g.reshape(len(g), -1)
    S = np.flatnonzero(labeled)
    deg = np.asarray(B.sum(axis=1)).ravel()
    L_UU = (sparse.diags(deg[U]) - B[U][:, U]).tocsr()
    # constants solve the system exactly, so solving for the offset from
    # a reference label keeps constant labels exact
    ref = cols[0].copy()
    rhs = B[U][:, S] @ (cols - ref)
    out = np.empty((cloud.n, cols.shape[1]))
    out[S] = cols
    if len(U):
        if solver == "dense":
            out[U] = np.linalg.solve(L_UU.toarray(), rhs)
        elif solver in ("cg", "auto"):
            for j in range(cols.shape[1]):
                x, info = pcg(L_UU, rhs[:, j], diag=deg[U], rtol=rtol)
                if not info.converged:
                    if solver == "auto" and cloud.n <= 2000:
                        x = np.linalg.solve(L_UU.toarray(), rhs[:, j])
                    else:
                        raise RuntimeError(
                            f"CG did not converge (relative residual {info.residual:.3g})")
                out[U, j] = x
        else:
            raise ValueError(f"unknown solver {solver!r}")
        out[U] += ref
    return out[:, 0] if g.ndim == 1 else out


def wnll_interpolate(dataset: LabeledDataset, cfg: OperatorConfig | None = None,
                     solver: str = "auto"):
    """WNLL interpolation of the labels on the constraint set.

    Integer labels give one indicator field per class, shape (n, C); use
    ``argmax(axis=1)`` for predictions. Real labels give a single field.
    ``cfg`` is accepted for interface symmetry; the WNLL weights do not
    depend on the gradient normalization.
    """
    S = dataset.constraint_mask
    if not S.any():
        raise ValueError("constraint set S is empty")
    if dataset.is_classification:
        C = dataset.n_classes
        g = np.eye(C)[dataset.labels[S]]
    else:
        g = dataset.labels[S].astype(float)
    return wnll_solve(dataset.cloud, S, g, solver=solver)
