import numpy as np
import pytest

from resnet_pde.flows import (
    FCTerminal, FlowOverflowError, FunctionVelocity, TimeGrid, WNLLTerminal, euler_flow,
    softmax, transport_predict,
)
from resnet_pde.point_cloud import gen_dataset
from resnet_pde.velocity import LinearVelocity, ResBlockVelocity


def test_time_grid():
    g = TimeGrid(4)
    assert g.dt == 0.25
    np.testing.assert_array_equal(g.t, [0, 0.25, 0.5, 0.75, 1.0])
    with pytest.raises(ValueError):
        TimeGrid(0)


def test_softmax_values():
    np.testing.assert_allclose(softmax(np.zeros(3)), 1 / 3, rtol=1e-15)
    np.testing.assert_allclose(softmax(np.array([0.0, np.log(3.0)])), [0.25, 0.75], rtol=1e-14)
    rng = np.random.default_rng(0)
    z = rng.standard_normal((20, 5)) * 30
    p = softmax(z)
    assert np.all(p > 0)
    np.testing.assert_allclose(p.sum(1), 1, atol=1e-12)
    np.testing.assert_allclose(softmax(z + 123.0), p, atol=1e-12)
    assert np.all(np.isfinite(softmax(np.array([1e4, -1e4]))))


def test_zero_model_is_identity_flow():
    rng = np.random.default_rng(1)
    m = ResBlockVelocity.init(3, 4, 5, rng)
    m.params["W2"][:] = 0
    x = rng.standard_normal((7, 3))
    traj = euler_flow(m, x)
    for s in traj.states:
        np.testing.assert_array_equal(s, x)


def test_linear_growth_closed_form():
    m = FunctionVelocity(lambda x, k: 0.5 * x, 2)
    traj = euler_flow(m, np.array([[1.0]]))
    np.testing.assert_allclose(traj.states[:, 0, 0], [1.0, 1.5, 2.25])


def test_constant_displacement_telescopes():
    c = np.array([0.1, -0.3])
    m = FunctionVelocity(lambda x, k: np.broadcast_to(c, x.shape), 6)
    x0 = np.array([[1.0, 2.0], [0.0, 0.0]])
    np.testing.assert_allclose(euler_flow(m, x0).final, x0 + 6 * c, atol=1e-15)


def test_flow_errors():
    m = FunctionVelocity(lambda x, k: x * 1e200, 3)
    with np.errstate(over="ignore"), pytest.raises(FlowOverflowError, match="step"):
        euler_flow(m, np.ones((1, 1)))
    with pytest.raises(TypeError):
        euler_flow(LinearVelocity.init(2, 1, np.random.default_rng(0)), np.zeros((1, 2)))
    with pytest.raises(ValueError):
        euler_flow(FunctionVelocity(lambda x, k: x, 3), np.ones((1, 1)), TimeGrid(2))


def test_predict_with_zero_flow_is_plain_softmax():
    rng = np.random.default_rng(2)
    m = ResBlockVelocity.init(4, 3, 2, rng)
    m.params["W1"][:] = 0
    t = FCTerminal.init(3, 4, rng)
    x = rng.standard_normal((10, 4))
    np.testing.assert_allclose(transport_predict(m, t, x), softmax(x @ t.W.T), rtol=1e-15)


def test_single_block_matches_hand_coded():
    rng = np.random.default_rng(3)
    m = ResBlockVelocity.init(3, 5, 1, rng)
    for k in m.params:
        m.params[k] = m.params[k] + 0.3 * rng.standard_normal(m.params[k].shape)
    x = rng.standard_normal((6, 3))
    m.freeze_statistics(x)
    t = FCTerminal.init(4, 3, rng)
    p, f = m.params, m.fixed
    a = np.maximum(p["gamma1"][0] * (x - f["mu1"][0]) / np.sqrt(f["var1"][0]) + p["beta1"][0], 0)
    h = a @ p["W1"][0].T
    b = np.maximum(p["gamma2"][0] * (h - f["mu2"][0]) / np.sqrt(f["var2"][0]) + p["beta2"][0], 0)
    y = x + b @ p["W2"][0].T
    z = y @ t.W.T
    e = np.exp(z - z.max(1, keepdims=True))
    np.testing.assert_allclose(transport_predict(m, t, x), e / e.sum(1, keepdims=True),
                               rtol=0, atol=1e-12)


def test_trajectory_determinism_and_csv(tmp_path):
    rng = np.random.default_rng(4)
    m = ResBlockVelocity.init(2, 3, 3, rng)
    x = rng.standard_normal((4, 2))
    a, b = euler_flow(m, x), euler_flow(m, x)
    assert a.states.tobytes() == b.states.tobytes()
    # each sample flows independently of the rest of the batch
    np.testing.assert_array_equal(euler_flow(m, x[2:3]).final[0], a.final[2])
    a.to_csv(tmp_path / "traj.csv")
    rows = (tmp_path / "traj.csv").read_text().strip().splitlines()
    assert rows[0] == "step,sample,x0,x1"
    assert len(rows) == 1 + 4 * 4


def test_terminal_roundtrip_and_validation():
    t = FCTerminal.init(3, 2, np.random.default_rng(0))
    np.testing.assert_array_equal(FCTerminal.from_dict(t.to_dict()).W, t.W)
    with pytest.raises(ValueError):
        FCTerminal(np.ones((1, 2)))


def test_wnll_terminal_classifies_blobs():
    ds = gen_dataset("two_blobs", 80, seed=0, delta=1.0)
    lab = np.array([0, 40])
    m = ResBlockVelocity.init(2, 3, 2, np.random.default_rng(0))
    m.params["W2"][:] = 0
    t = WNLLTerminal(ds.cloud.points[lab], ds.labels[lab], delta=1.0)
    p = transport_predict(m, t, ds.cloud.points)
    assert np.mean(p.argmax(1) == ds.labels) >= 0.95
