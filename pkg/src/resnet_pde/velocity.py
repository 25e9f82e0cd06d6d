"""Velocity-field models.

Every model carries one parameter block per Euler step (parameters are
piecewise constant in time). ``ResBlockVelocity`` is a vector field whose
output is the full step displacement ``dt * v(x, t_k) = W2 s(W1 s(x))``
with ``s = ReLU o BN``. The scalar models give the normal speed used by
the Hamilton-Jacobi solvers; their output is the speed itself and the
time step is applied by the solver.

All models evaluate batches ``x`` of shape (B, d) (a single (d,) vector
is also accepted) and provide ``vjp`` for reverse-mode sweeps.
"""
from __future__ import annotations

import numpy as np
from scipy.spatial.distance import cdist, pdist


def _relu(x):
    return np.maximum(x, 0.0)


def _batch(x, d):
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    if x.shape[1] != d:
        raise ValueError(f"input has dimension {x.shape[1]}, model expects {d}")
    return x, single


class VelocityModel:
    """Shared parameter bookkeeping: flat views, index maps, checkpoints."""

    kind = "vector"
    trainable: tuple = ()
    fixed_names: tuple = ()

    def __init__(self, **arrays):
        self.params = {k: np.array(arrays[k], dtype=float) for k in self.trainable}
        self.fixed = {k: np.array(arrays[k], dtype=float) for k in self.fixed_names}
        L = {self.params[k].shape[0] for k in self.trainable}
        if len(L) != 1:
            raise ValueError("parameter blocks disagree on the number of steps")
        self._check()

    def _check(self):
        pass

    @property
    def n_steps(self) -> int:
        return self.params[self.trainable[0]].shape[0]

    def _step(self, k):
        if not 0 <= k < self.n_steps:
            raise ValueError(f"step {k} out of range for {self.n_steps} steps")

    # -- flat parameter views --------------------------------------------------
    def index_map(self):
        """List of (name, shape, start, stop) in flattening order."""
        out, start = [], 0
        for k in self.trainable:
            size = self.params[k].size
            out.append((k, self.params[k].shape, start, start + size))
            start += size
        return out

    @property
    def size(self) -> int:
        return sum(self.params[k].size for k in self.trainable)

    def flatten(self, params=None) -> np.ndarray:
        params = self.params if params is None else params
        return np.concatenate([np.ravel(params[k]) for k in self.trainable])

    def unflatten(self, vec) -> dict:
        vec = np.asarray(vec, dtype=float)
        if vec.shape != (self.size,):
            raise ValueError(f"expected a flat vector of length {self.size}")
        return {name: vec[a:b].reshape(shape).copy() for name, shape, a, b in self.index_map()}

    def with_flat(self, vec):
        new = self.copy()
        new.params = self.unflatten(vec)
        return new

    def copy(self):
        return type(self)(**self.params, **self.fixed)

    def zero_grads(self) -> dict:
        return {k: np.zeros_like(v) for k, v in self.params.items()}

    def to_dict(self) -> dict:
        return {
            "model": type(self).__name__,
            "n_steps": self.n_steps,
            "params": {k: {"shape": list(v.shape), "data": v.ravel().tolist()}
                       for k, v in self.params.items()},
            "fixed": {k: {"shape": list(v.shape), "data": v.ravel().tolist()}
                      for k, v in self.fixed.items()},
            "index_map": [{"name": n, "shape": list(s), "start": a, "stop": b}
                          for n, s, a, b in self.index_map()],
        }

    @staticmethod
    def from_dict(d: dict) -> "VelocityModel":
        cls = MODEL_TYPES[d["model"]]
        arrays = {k: np.array(v["data"], dtype=float).reshape(v["shape"])
                  for part in ("params", "fixed") for k, v in d[part].items()}
        return cls(**arrays)


class ResBlockVelocity(VelocityModel):
    """Residual-block displacement ``W2 s(W1 s(x))``, ``s = ReLU o BN``.

    Batch normalization uses frozen per-step statistics (``mu*``,
    ``var*``) with trainable scale and shift, so each input flows
    independently of the rest of the batch.
    """

    kind = "vector"
    trainable = ("W1", "W2", "gamma1", "beta1", "gamma2", "beta2")
    fixed_names = ("mu1", "var1", "mu2", "var2")

    def _check(self):
        L, h, d = self.params["W1"].shape
        expect = {"W2": (L, d, h), "gamma1": (L, d), "beta1": (L, d),
                  "gamma2": (L, h), "beta2": (L, h)}
        for k, s in expect.items():
            if self.params[k].shape != s:
                raise ValueError(f"{k} has shape {self.params[k].shape}, expected {s}")
        for k, s in {"mu1": (L, d), "var1": (L, d), "mu2": (L, h), "var2": (L, h)}.items():
            if self.fixed[k].shape != s:
                raise ValueError(f"{k} has shape {self.fixed[k].shape}, expected {s}")
        if np.any(self.fixed["var1"] <= 0) or np.any(self.fixed["var2"] <= 0):
            raise ValueError("batch-norm variances must be positive")

    @property
    def dim(self):
        return self.params["W1"].shape[2]

    @property
    def hidden(self):
        return self.params["W1"].shape[1]

    @classmethod
    def init(cls, d, hidden, n_steps, rng):
        a1, a2 = d**-0.5, hidden**-0.5
        L = n_steps
        return cls(
            W1=rng.uniform(-a1, a1, (L, hidden, d)), W2=rng.uniform(-a2, a2, (L, d, hidden)),
            gamma1=np.ones((L, d)), beta1=np.zeros((L, d)),
            gamma2=np.ones((L, hidden)), beta2=np.zeros((L, hidden)),
            mu1=np.zeros((L, d)), var1=np.ones((L, d)),
            mu2=np.zeros((L, hidden)), var2=np.ones((L, hidden)))

    def freeze_statistics(self, x0, eps=1e-5):
        """Set the BN statistics from one pass of ``x0`` through the flow."""
        x = np.atleast_2d(np.asarray(x0, dtype=float))
        for k in range(self.n_steps):
            self.fixed["mu1"][k] = x.mean(axis=0)
            self.fixed["var1"][k] = x.var(axis=0) + eps
            r1 = _relu(self._bn(x, k, 1))
            h = r1 @ self.params["W1"][k].T
            self.fixed["mu2"][k] = h.mean(axis=0)
            self.fixed["var2"][k] = h.var(axis=0) + eps
            x = x + self.displacement(x, k)
        return self

    def _bn(self, x, k, which):
        p, f = self.params, self.fixed
        a = (x - f[f"mu{which}"][k]) / np.sqrt(f[f"var{which}"][k])
        return p[f"gamma{which}"][k] * a + p[f"beta{which}"][k]

    def _forward(self, x, k):
        p, f = self.params, self.fixed
        a1 = (x - f["mu1"][k]) / np.sqrt(f["var1"][k])
        s1 = p["gamma1"][k] * a1 + p["beta1"][k]
        r1 = _relu(s1)
        h = r1 @ p["W1"][k].T
        a2 = (h - f["mu2"][k]) / np.sqrt(f["var2"][k])
        s2 = p["gamma2"][k] * a2 + p["beta2"][k]
        r2 = _relu(s2)
        return r2 @ p["W2"][k].T, (a1, s1, r1, a2, s2, r2)

    def preactivations(self, x, k):
        """The two BN outputs fed to ReLU (used to keep tests off kinks)."""
        x, _ = _batch(x, self.dim)
        _, (_, s1, _, _, s2, _) = self._forward(x, k)
        return s1, s2

    def displacement(self, x, k):
        self._step(k)
        x, single = _batch(x, self.dim)
        out, _ = self._forward(x, k)
        return out[0] if single else out

    def vjp(self, x, k, cot):
        """Return ``(grads, dx)`` for ``<cot, displacement(x, k)>``.

        ``grads`` maps each parameter name to the gradient of its step-k
        block, summed over the batch.
        """
        self._step(k)
        x, single = _batch(x, self.dim)
        cot = np.atleast_2d(np.asarray(cot, dtype=float))
        p, f = self.params, self.fixed
        _, (a1, s1, r1, a2, s2, r2) = self._forward(x, k)
        g = {"W2": cot.T @ r2}
        dr2 = cot @ p["W2"][k]
        ds2 = dr2 * (s2 > 0)
        g["gamma2"] = np.sum(ds2 * a2, axis=0)
        g["beta2"] = ds2.sum(axis=0)
        dh = ds2 * p["gamma2"][k] / np.sqrt(f["var2"][k])
        g["W1"] = dh.T @ r1
        dr1 = dh @ p["W1"][k]
        ds1 = dr1 * (s1 > 0)
        g["gamma1"] = np.sum(ds1 * a1, axis=0)
        g["beta1"] = ds1.sum(axis=0)
        dx = ds1 * p["gamma1"][k] / np.sqrt(f["var1"][k])
        return g, (dx[0] if single else dx)


class ScalarVelocity(VelocityModel):
    kind = "scalar"

    def value(self, x, k):
        self._step(k)
        x, single = _batch(x, self.dim)
        out = self._value(x, k)
        return out[0] if single else out


class LinearVelocity(ScalarVelocity):
    """``vbar(x, t_k) = w_k . x + b_k``."""

    trainable = ("w", "b")

    def _check(self):
        if self.params["b"].shape != (self.params["w"].shape[0],):
            raise ValueError("b must hold one offset per step")

    @property
    def dim(self):
        return self.params["w"].shape[1]

    @classmethod
    def init(cls, d, n_steps, rng):
        a = d**-0.5
        return cls(w=rng.uniform(-a, a, (n_steps, d)), b=np.zeros(n_steps))

    def _value(self, x, k):
        return x @ self.params["w"][k] + self.params["b"][k]

    def vjp(self, x, k, cot):
        self._step(k)
        x, single = _batch(x, self.dim)
        cot = np.atleast_1d(np.asarray(cot, dtype=float))
        g = {"w": cot @ x, "b": np.array(cot.sum())}
        dx = np.outer(cot, self.params["w"][k])
        return g, (dx[0] if single else dx)


class MLPVelocity(ScalarVelocity):
    """One hidden ReLU layer: ``w_o . ReLU(W_h x + b_h) + b_o``."""

    trainable = ("W_h", "b_h", "w_o", "b_o")

    def _check(self):
        L, H, d = self.params["W_h"].shape
        for k, s in {"b_h": (L, H), "w_o": (L, H), "b_o": (L,)}.items():
            if self.params[k].shape != s:
                raise ValueError(f"{k} has shape {self.params[k].shape}, expected {s}")

    @property
    def dim(self):
        return self.params["W_h"].shape[2]

    @classmethod
    def init(cls, d, hidden, n_steps, rng):
        a1, a2 = d**-0.5, hidden**-0.5
        L = n_steps
        return cls(W_h=rng.uniform(-a1, a1, (L, hidden, d)), b_h=np.zeros((L, hidden)),
                   w_o=rng.uniform(-a2, a2, (L, hidden)), b_o=np.zeros(L))

    def preactivations(self, x, k):
        x, _ = _batch(x, self.dim)
        return x @ self.params["W_h"][k].T + self.params["b_h"][k]

    def _value(self, x, k):
        p = self.params
        z = x @ p["W_h"][k].T + p["b_h"][k]
        return _relu(z) @ p["w_o"][k] + p["b_o"][k]

    def vjp(self, x, k, cot):
        self._step(k)
        x, single = _batch(x, self.dim)
        cot = np.atleast_1d(np.asarray(cot, dtype=float))
        p = self.params
        z = x @ p["W_h"][k].T + p["b_h"][k]
        r = _relu(z)
        g = {"w_o": cot @ r, "b_o": np.array(cot.sum())}
        dz = np.outer(cot, p["w_o"][k]) * (z > 0)
        g["W_h"] = dz.T @ x
        g["b_h"] = dz.sum(axis=0)
        dx = dz @ p["W_h"][k]
        return g, (dx[0] if single else dx)


class RBFVelocity(ScalarVelocity):
    """``vbar(x, t_k) = sum_j c_kj exp(-|x - x_j|^2 / sigma_j^2)``.

    Centers and widths are fixed; only the coefficients are trained.
    """

    trainable = ("c",)
    fixed_names = ("centers", "widths")

    def _check(self):
        P = self.fixed["centers"].shape[0]
        if self.params["c"].shape[1] != P or self.fixed["widths"].shape != (P,):
            raise ValueError("coefficients and widths need one entry per center")
        if np.any(self.fixed["widths"] <= 0):
            raise ValueError("RBF widths must be positive")

    @property
    def dim(self):
        return self.fixed["centers"].shape[1]

    @classmethod
    def init(cls, centers, n_steps, widths=None):
        centers = np.asarray(centers, dtype=float)
        if widths is None:
            widths = median_width(centers)
        widths = np.broadcast_to(np.asarray(widths, dtype=float), (len(centers),)).copy()
        return cls(c=np.zeros((n_steps, len(centers))), centers=centers, widths=widths)

    def copy(self):
        new = super().copy()
        # centers are fixed, so the basis cache stays valid
        new._basis_cache = getattr(self, "_basis_cache", None)
        return new

    def _basis(self, x):
        cached = getattr(self, "_basis_cache", None)
        if cached is not None and cached[0].shape == x.shape and np.array_equal(cached[0], x):
            return cached[1]
        sq = cdist(x, self.fixed["centers"], "sqeuclidean")
        phi = np.exp(-sq / self.fixed["widths"] ** 2)
        self._basis_cache = (x.copy(), phi)
        return phi

    def _value(self, x, k):
        return self._basis(x) @ self.params["c"][k]

    def vjp(self, x, k, cot):
        self._step(k)
        x, single = _batch(x, self.dim)
        cot = np.atleast_1d(np.asarray(cot, dtype=float))
        phi = self._basis(x)
        g = {"c": cot @ phi}
        s = phi * self.params["c"][k] * (-2.0 / self.fixed["widths"] ** 2)
        # sum_j s_bj (x_b - x_j)
        dx = cot[:, None] * (x * s.sum(axis=1)[:, None] - s @ self.fixed["centers"])
        return g, (dx[0] if single else dx)


def median_width(points) -> float:
    """Median pairwise distance of ``points`` (the default RBF width)."""
    d = pdist(np.asarray(points, dtype=float))
    med = float(np.median(d)) if d.size else 1.0
    return med if med > 0 else 1.0


MODEL_TYPES = {cls.__name__: cls for cls in
               (ResBlockVelocity, LinearVelocity, MLPVelocity, RBFVelocity)}


def eval_resblock(model: ResBlockVelocity, x, k: int):
    return model.displacement(x, k)


def eval_scalar(model: ScalarVelocity, x, k: int):
    return model.value(x, k)


def param_grad(model: VelocityModel, x, k: int, upstream):
    """Flat parameter gradient of ``<upstream, output(x, k)>`` and the input cotangent."""
    grads_k, dx = model.vjp(x, k, upstream)
    full = model.zero_grads()
    for name, g in grads_k.items():
        full[name][k] = g
    return model.flatten(full), dx
