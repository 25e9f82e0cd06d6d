import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from resnet_pde.pim import (
    OperatorConfig, SingularSystemError, graph_laplacian, operators, pim_gradient,
    pim_gradient_field, pim_gradient_norm, wnll_interpolate, wnll_solve,
)
from resnet_pde.point_cloud import (KernelSpec, analytic_gradient, build_cloud, gen_dataset,
                                    restrict_linear)

E = np.exp(-1.0)
LINE = dict(kernel=KernelSpec(cutoff=100.0), delta=1.0, volumes=np.ones(3))


def line_cloud():
    return build_cloud([[-1.0], [0.0], [1.0]], **LINE)


def random_cloud(seed, n=60, d=2, delta=0.6):
    rng = np.random.default_rng(seed)
    return build_cloud(rng.standard_normal((n, d)), delta=delta)


# -- gradient ----------------------------------------------------------------

def test_raw_gradient_hand_value():
    c = line_cloud()
    g = pim_gradient(c, c.points[:, 0], 0, OperatorConfig(normalization="raw"))
    assert g[1] == pytest.approx(2 * E / (1 + 2 * E), rel=1e-7)
    assert g[1] == pytest.approx(0.4239, abs=1e-4)


@pytest.mark.parametrize("mode", ["raw", "moment", "calibrated"])
def test_constant_gradient_zero(mode):
    c = random_cloud(0)
    G = pim_gradient_field(c, np.full(c.n, 3.5), OperatorConfig(normalization=mode))
    assert np.all(G == 0.0)


def test_moment_mode_is_global_rescale():
    c = random_cloud(1)
    u = np.sin(c.points[:, 0])
    raw = pim_gradient_field(c, u, OperatorConfig(normalization="raw"))
    mom = pim_gradient_field(c, u, OperatorConfig(normalization="moment", moment_constant=0.7))
    ratio = mom[raw != 0] / raw[raw != 0]
    np.testing.assert_allclose(ratio, c.intrinsic_dim / (c.delta**2 * 0.7), rtol=1e-12)


def test_calibrated_exact_on_linears_flat_plane():
    ds = gen_dataset("flat_plane", 400, seed=2)
    c = ds.cloud
    rng = np.random.default_rng(0)
    for _ in range(5):
        a = rng.standard_normal(3)
        a[2] = 0.0
        G = pim_gradient_field(c, c.points @ a + 0.3)
        np.testing.assert_allclose(G, np.broadcast_to(a, G.shape), atol=1e-10)


def test_calibrated_matches_chart_gradient_on_circle():
    ds = gen_dataset("circle", 200, seed=0, delta=0.2)
    U, dU = restrict_linear(ds.chart, [1.0, 0.0])
    exact = analytic_gradient(ds.chart, U, ds.theta, dU)
    G = pim_gradient_field(ds.cloud, U(ds.theta))
    assert np.max(np.abs(G - exact)) < 1e-9


def test_singular_calibration_flagged_and_falls_back():
    # collinear points in the plane have rank-one local covariance
    c = build_cloud([[0, 0], [1, 0], [2, 0], [3, 0]], KernelSpec(cutoff=2.0), delta=1.0)
    ops = operators(c)
    assert len(ops.flagged) > 0
    mom = operators(c, OperatorConfig(normalization="moment"))
    u = np.arange(4.0)
    for i in ops.flagged:
        np.testing.assert_allclose(ops.gradient(u)[i], mom.gradient(u)[i])


def test_axis_out_of_range():
    c = line_cloud()
    with pytest.raises(ValueError):
        pim_gradient(c, np.zeros(3), 1)
    with pytest.raises(ValueError):
        pim_gradient(c, np.zeros(4), 0)


def test_gradient_vjp_is_adjoint():
    c = random_cloud(3)
    ops = operators(c)
    rng = np.random.default_rng(0)
    u, Y = rng.standard_normal(c.n), rng.standard_normal((c.n, c.dim))
    assert np.sum(ops.gradient(u) * Y) == pytest.approx(u @ ops.gradient_vjp(Y), rel=1e-12)


def test_moment_error_decreases_on_circle():
    errs = []
    for n in (100, 400, 1600):
        ds = gen_dataset("circle", n, seed=0, delta=3 * (2 * np.pi / n) ** 0.5)
        U, dU = restrict_linear(ds.chart, [1.0, 0.0])
        exact = analytic_gradient(ds.chart, U, ds.theta, dU)
        G = pim_gradient_field(ds.cloud, U(ds.theta), OperatorConfig(normalization="moment"))
        errs.append(np.sqrt(np.mean(np.sum((G - exact) ** 2, 1))))
    assert errs[0] > errs[1] > errs[2]


# -- gradient norm -----------------------------------------------------------

def test_gradnorm_two_point_hand_value():
    c = build_cloud([[0.0], [1.0]], delta=1.0)
    N = pim_gradient_norm(c, np.array([0.0, 2.0]), weights=np.ones((2, 2)))
    np.testing.assert_array_equal(N, [2.0, 2.0])


def test_gradnorm_explicit_weights_formula():
    c = random_cloud(4, n=15, delta=1.0)
    rng = np.random.default_rng(1)
    W, u = rng.uniform(size=(15, 15)), rng.standard_normal(15)
    expect = np.sqrt(np.sum(W * (u[:, None] - u[None]) ** 2, axis=1))
    np.testing.assert_allclose(pim_gradient_norm(c, u, weights=W), expect, rtol=1e-13)


def test_gradnorm_kernel_weights_formula():
    c = random_cloud(5, n=30, delta=0.9)
    u = np.cos(c.points[:, 1])
    ops = operators(c)
    cfg = OperatorConfig()
    _, s, _ = cfg.constants(c)
    K = c.kernel_matrix.toarray()
    W = s * K * c.volumes[None] / (c.delta**2 * c.wbar[:, None])
    expect = np.sqrt(np.sum(W * (u[:, None] - u[None]) ** 2, axis=1))
    np.testing.assert_allclose(ops.gradnorm(u), expect, rtol=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000),
       st.one_of(st.just(0.0), st.floats(1e-6, 50), st.floats(-50, -1e-6)))
def test_gradnorm_homogeneous(seed, alpha):
    c = random_cloud(seed % 7, n=25, delta=1.0)
    u = np.random.default_rng(seed).standard_normal(c.n)
    a, b = pim_gradient_norm(c, alpha * u), abs(alpha) * pim_gradient_norm(c, u)
    np.testing.assert_allclose(a, b, rtol=1e-13)
    assert np.all(pim_gradient_norm(c, u) >= 0)


def test_gradnorm_zero_iff_componentwise_constant():
    pts = np.array([[0.0], [0.1], [0.2], [10.0], [10.1]])
    c = build_cloud(pts, delta=0.1)
    u = np.array([1.0, 1.0, 1.0, -4.0, -4.0])
    assert np.all(pim_gradient_norm(c, u) == 0.0)
    u[1] = 1.5
    assert np.all(pim_gradient_norm(c, u)[:3] > 0)


def test_gradnorm_recovers_gradient_magnitude():
    ds = gen_dataset("flat_plane", 2000, seed=0)
    c = ds.cloud
    u = c.points @ np.array([0.6, 0.8, 0.0])
    interior = np.all((ds.theta > 0.25) & (ds.theta < 0.75), axis=1)
    N = pim_gradient_norm(c, u)
    assert abs(np.median(N[interior]) - 1.0) < 0.1


# -- Laplacian ---------------------------------------------------------------

def test_laplacian_hand_value():
    c = line_cloud()
    Lu = graph_laplacian(c, np.array([0.0, 1.0, 0.0]), OperatorConfig(laplacian_scale=1.0))
    assert Lu[1] == pytest.approx(-2 * E / (1 + 2 * E), rel=1e-7)


def test_laplacian_annihilates_constants():
    c = random_cloud(6)
    assert np.max(np.abs(graph_laplacian(c, np.full(c.n, 7.0)))) <= 1e-12


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_symmetric_laplacian_negative_semidefinite(seed):
    c = random_cloud(seed % 5, n=40)
    u = np.random.default_rng(seed).standard_normal(c.n)
    assert u @ graph_laplacian(c, u, symmetric=True) <= 1e-14
    M = operators(c).symmetric_laplacian_matrix
    assert abs(M - M.T).max() == 0


# -- WNLL --------------------------------------------------------------------

def blobs(n=200, seed=0, labeled=(0, 150), separation=6.0):
    ds = gen_dataset("two_blobs", n, seed=seed, delta=1.0, separation=separation)
    mask = np.zeros(n, bool)
    mask[list(labeled)] = True
    return ds.with_masks(constraint_mask=mask)


def test_wnll_constants():
    ds = blobs()
    ds.labels[:] = 0
    u = wnll_solve(ds.cloud, ds.constraint_mask, np.full(2, 3.25))
    np.testing.assert_array_equal(u, 3.25)


def test_wnll_two_blobs_and_dense_oracle():
    ds = blobs()
    u = wnll_interpolate(ds)
    pred = u.argmax(1)
    assert np.mean(pred == ds.labels) >= 0.95
    dense = wnll_interpolate(ds, solver="dense")
    np.testing.assert_allclose(u, dense, atol=1e-8)
    S = ds.constraint_mask
    np.testing.assert_array_equal(u[S], np.eye(2)[ds.labels[S]])


def test_wnll_maximum_principle():
    ds = gen_dataset("two_moons", 200, seed=3, delta=0.3)
    rng = np.random.default_rng(0)
    S = np.zeros(200, bool)
    S[rng.choice(200, 20, replace=False)] = True
    g = rng.uniform(-2, 5, 20)
    u = wnll_solve(ds.cloud, S, g)
    assert g.min() - 1e-10 <= u.min() and u.max() <= g.max() + 1e-10


def test_wnll_errors():
    ds = blobs(labeled=(0,), separation=20.0)
    with pytest.raises(SingularSystemError, match="point"):
        wnll_interpolate(ds)
    with pytest.raises(ValueError):
        wnll_interpolate(ds.with_masks(constraint_mask=np.zeros(200, bool)))
