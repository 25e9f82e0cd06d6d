import numpy as np
import pytest

from resnet_pde.experiments import make_field_problem, split_masks
from resnet_pde.flows import FCTerminal, TimeGrid
from resnet_pde.hj_solver import PDEProblem
from resnet_pde.point_cloud import build_cloud, gen_dataset
from resnet_pde.pim import operators
from resnet_pde.training import (
    DivergenceError, LossSpec, TrainConfig, finite_diff_grad, grad_hj, grad_transport, loss,
    relative_error, train_field, train_transport, transport_objective,
)
from resnet_pde.velocity import LinearVelocity, RBFVelocity, ResBlockVelocity

CE, SE = LossSpec("cross_entropy"), LossSpec("squared_error")


# -- losses ------------------------------------------------------------------

def test_cross_entropy_values():
    assert loss(CE, np.eye(3), [0, 1, 2])[0] <= 1e-10
    assert loss(CE, np.full((4, 5), 0.2), [0, 1, 2, 3])[0] == pytest.approx(np.log(5), rel=1e-14)
    value, _ = loss(CE, np.array([[1.0, 0.0]]), [1])
    assert value == pytest.approx(-np.log(1e-12))


def test_squared_error_values():
    v, cot = loss(SE, np.array([1.0, 2.0]), np.array([1.0, 2.0]))
    assert v == 0 and np.all(cot == 0)


@pytest.mark.parametrize("spec", [CE, SE])
def test_loss_cotangent_exact(spec):
    rng = np.random.default_rng(0)
    p = rng.dirichlet(np.ones(3), size=4)
    t = np.array([0, 2, 1, 1]) if spec is CE else rng.standard_normal((4, 3))
    _, cot = loss(spec, p, t)
    fd = finite_diff_grad(lambda q: loss(spec, q.reshape(4, 3), t)[0], p.ravel(), h=1e-7)
    np.testing.assert_allclose(cot.ravel(), fd, rtol=1e-6, atol=1e-9)


def test_loss_errors():
    with pytest.raises(ValueError):
        loss(CE, np.full((2, 2), 0.5), [0, 2])
    with pytest.raises(ValueError):
        loss(SE, np.zeros(3), np.zeros(2))
    with pytest.raises(ValueError):
        LossSpec("hinge")


# -- finite differences ------------------------------------------------------

def test_finite_diff_examples():
    np.testing.assert_allclose(finite_diff_grad(lambda t: t @ t, np.array([1.0, 0.0])),
                               [2.0, 0.0], atol=1e-8)
    a = np.array([0.5, -3.0, 2.0])
    np.testing.assert_allclose(finite_diff_grad(lambda t: a @ t, np.zeros(3)), a, rtol=1e-9)
    assert relative_error([1.0, 0.0], [1.0, 0.0]) == 0.0


# -- transport gradients -----------------------------------------------------

def _one_block(rng, d=3, h=4):
    m = ResBlockVelocity.init(d, h, 1, rng)
    for k in m.params:
        m.params[k] = m.params[k] + 0.3 * rng.standard_normal(m.params[k].shape)
    return m


def test_zero_learning_signal():
    rng = np.random.default_rng(1)
    m = _one_block(rng)
    t = FCTerminal.init(2, 3, rng, softmax=False)
    x = rng.standard_normal((5, 3))
    y = t(x + m.displacement(x, 0))
    _, gv, gW = grad_transport(m, t, x, y, SE)
    assert np.all(gv == 0) and np.all(gW == 0)


def test_single_block_linear_terminal_closed_form():
    rng = np.random.default_rng(2)
    m = _one_block(rng)
    t = FCTerminal.init(2, 3, rng, softmax=False)
    x, Y = rng.standard_normal((6, 3)), rng.standard_normal((6, 2))
    _, gv, gW = grad_transport(m, t, x, Y, SE)
    p, f = m.params, m.fixed
    r1 = np.maximum(p["gamma1"][0] * (x - f["mu1"][0]) / np.sqrt(f["var1"][0]) + p["beta1"][0], 0)
    hid = r1 @ p["W1"][0].T
    r2 = np.maximum(p["gamma2"][0] * (hid - f["mu2"][0]) / np.sqrt(f["var2"][0]) + p["beta2"][0], 0)
    X1 = x + r2 @ p["W2"][0].T
    R = 2 * (X1 @ t.W.T - Y) / Y.size
    np.testing.assert_allclose(gW, R.T @ X1, rtol=1e-12)
    gW2 = m.unflatten(gv)["W2"][0]
    np.testing.assert_allclose(gW2, (R @ t.W).T @ r2, rtol=1e-12)


def test_grad_transport_matches_finite_differences_both_ways():
    rng = np.random.default_rng(3)
    m = ResBlockVelocity.init(2, 3, 3, rng)
    for k in m.params:
        m.params[k] = m.params[k] + 0.4 * rng.standard_normal(m.params[k].shape)
    x = rng.standard_normal((7, 2))
    m.freeze_statistics(x)
    t = FCTerminal.init(3, 2, rng)
    loss_fn, grad_fn, theta = transport_objective(m, t, x, rng.integers(0, 3, 7))
    _, g = grad_fn(theta)
    fd = finite_diff_grad(loss_fn, theta)
    assert relative_error(g, fd) <= 1e-5
    assert relative_error(fd, g) <= 1e-5


# -- field gradients ---------------------------------------------------------

def test_grad_hj_single_step_formula():
    c = build_cloud([[0.0], [1.0]], delta=1.0)
    u0 = np.array([0.3, 1.1])
    v = LinearVelocity(w=[[0.7]], b=[0.2])
    p = PDEProblem("hj", c, u0, v, TimeGrid(1))
    N0 = operators(c).gradnorm(u0)
    vb = v.value(c.points, 0)
    u1 = u0 + vb * N0
    g = np.array([0.5])
    value, grad = grad_hj(p, g, [1])
    assert value == pytest.approx((u1[1] - g[0]) ** 2)
    base = 2 * (u1[1] - g[0]) * 1.0 * N0[1]
    np.testing.assert_allclose(grad, [base * c.points[1, 0], base], rtol=1e-13)


def test_grad_hj_zero_when_field_is_flat():
    c = build_cloud(np.random.default_rng(4).standard_normal((10, 2)), delta=1.0)
    v = RBFVelocity.init(c.points, 3)
    v.params["c"][:] = 1.0
    _, g = grad_hj(PDEProblem("hj", c, np.full(10, 2.0), v, TimeGrid(3)),
                   np.zeros(10), np.arange(10))
    assert np.all(g == 0)


def test_viscous_constraints_block_cotangent():
    c = build_cloud(np.random.default_rng(5).standard_normal((12, 2)), delta=1.0)
    v = LinearVelocity(w=np.ones((2, 2)), b=np.ones(2))
    p = PDEProblem("viscous_hj", c, np.random.default_rng(5).standard_normal(12), v,
                   TimeGrid(2), dissipation=0.05, constraint_idx=[0, 1],
                   constraint_values=[1.0, -1.0])
    _, g = grad_hj(p, np.array([3.0, 4.0]), [0, 1])
    assert np.all(g == 0)


# -- training loops ----------------------------------------------------------

def _blobs(n=100, seed=0):
    return gen_dataset("two_blobs", n, seed=seed, delta=1.0, separation=4.0)


def _transport_setup(L=2, seed=0):
    ds = _blobs()
    rng = np.random.default_rng(seed)
    m = ResBlockVelocity.init(2, 8, L, rng).freeze_statistics(ds.cloud.points)
    return ds, m, FCTerminal.init(2, 2, rng)


def test_zero_learning_rate_constant_loss():
    ds, m, t = _transport_setup()
    _, rep = train_transport(ds, m, t, TrainConfig(lr=0.0, epochs=5))
    assert len(set(rep.loss_history)) == 1 and len(rep.loss_history) == 5
    assert len(rep.accuracy_history) == len(rep.epoch_seconds) == 5


def test_blobs_reach_99_percent():
    ds, m, t = _transport_setup()
    _, rep = train_transport(ds, m, t, TrainConfig(epochs=200))
    assert rep.metrics["train_accuracy"] >= 0.99


def test_training_deterministic():
    runs = []
    for _ in range(2):
        ds, m, t = _transport_setup()
        cfg = TrainConfig(epochs=20, batch_size=32, seed=3)
        runs.append(train_transport(ds, m, t, cfg)[1])
    assert runs[0].loss_csv() == runs[1].loss_csv()
    assert runs[0].checkpoint == runs[1].checkpoint


def test_descent_on_convex_probe():
    ds, m, t = _transport_setup()
    m.params["W2"][:] = 0
    t = FCTerminal(t.W, softmax=False)
    x = ds.cloud.points
    Y = np.eye(2)[ds.labels]
    _, grad_fn, theta = transport_objective(m, t, x, Y, SE)
    lr = 1.0
    value, g = grad_fn(theta)
    while grad_fn(theta - lr * g)[0] > value:
        lr /= 2
    values = [value]
    for _ in range(10):
        theta = theta - lr * g
        value, g = grad_fn(theta)
        values.append(value)
    assert all(b <= a for a, b in zip(values, values[1:]))


def test_divergence_keeps_last_good_checkpoint():
    ds, m, t = _transport_setup()
    with pytest.raises(DivergenceError) as exc:
        train_transport(ds, m, t, TrainConfig(lr=1e4, optimizer="gd", epochs=50,
                                              divergence_threshold=5.0))
    rep = exc.value.report
    assert rep.status == "diverged"
    assert "velocity" in rep.checkpoint and "terminal" in rep.checkpoint


def test_gradcheck_toggle_reports_residual():
    ds, m, t = _transport_setup()
    _, rep = train_transport(ds, m, t, TrainConfig(epochs=1, gradcheck=True))
    assert rep.gradcheck_max_rel_err is not None and rep.gradcheck_max_rel_err <= 1e-4


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(epochs=0)
    with pytest.raises(ValueError):
        TrainConfig(lr=-1.0)
    with pytest.raises(ValueError):
        TrainConfig(optimizer="adam")


def test_train_field_improves_hj_fit():
    ds = gen_dataset("two_moons", 120, seed=0, noise=0.1)
    v = RBFVelocity.init(ds.cloud.points, 2)
    problem, targets, idx = make_field_problem(ds, "hj", v, 2)
    _, rep = train_field(problem, ds.labels, targets, idx, TrainConfig(epochs=30))
    assert rep.loss_history[-1] < rep.loss_history[0]
    assert rep.metrics["train_accuracy"] >= rep.accuracy_history[0]


def test_split_masks():
    rng = np.random.default_rng(0)
    train, cons = split_masks(100, 0.8, 0.5, rng, True)
    assert train.sum() == 80 and cons.sum() == 40
    assert np.all(train[cons])
