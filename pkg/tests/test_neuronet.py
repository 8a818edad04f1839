import numpy as np
import pytest

from fogplace.errors import CheckpointError, ShapeError, TapeError
from fogplace.neuronet import (Adam, NetShape, RecurrentNet, grad_check, load_checkpoint, log_softmax,
                               save_checkpoint)

import oracles


def _sig(x):
    return 1.0 / (1.0 + np.exp(-x))


def reference_forward(p, shape, xs, h0, c0):
    """Per-sample loop with the textbook LSTM cell (gate order i, f, g, o)."""
    T, B, _ = xs.shape
    out = np.zeros((T, B, shape.out_dim))
    for b in range(B):
        h, c = h0[b].copy(), c0[b].copy()
        for t in range(T):
            a = xs[t, b]
            for i in range(len(shape.fc)):
                a = np.tanh(p[f"fc{i}.W"] @ a + p[f"fc{i}.b"])
            if shape.recurrent:
                H = shape.hidden
                z = p["lstm.Wx"] @ a + p["lstm.Wh"] @ h + p["lstm.b"]
                i_, f_, g_, o_ = _sig(z[:H]), _sig(z[H:2 * H]), np.tanh(z[2 * H:3 * H]), _sig(z[3 * H:])
                c = f_ * c + i_ * g_
                h = o_ * np.tanh(c)
                a = h
            out[t, b] = p["head.W"] @ a + p["head.b"]
    return out


@pytest.mark.parametrize("recurrent", [True, False])
def test_forward_matches_reference(recurrent):
    shape = NetShape(5, 3, (6, 4), 7, recurrent)
    net = RecurrentNet(shape, seed=1)
    rng = np.random.default_rng(0)
    xs = rng.normal(size=(4, 3, 5))
    h0, c0 = rng.normal(size=(3, 7)), rng.normal(size=(3, 7))
    out, _, _ = net.forward(xs, h0, c0)
    np.testing.assert_allclose(out, reference_forward(net.params, shape, xs, h0, c0), rtol=0, atol=1e-12)


def test_step_equals_sequence_forward():
    net = RecurrentNet(NetShape(4, 3, (5,), 6), seed=2)
    xs = np.random.default_rng(1).normal(size=(6, 1, 4))
    full, _, _ = net.forward(xs)
    state = net.initial_state()
    for t in range(6):
        o, state = net.step(xs[t, 0], state)
        np.testing.assert_allclose(o, full[t, 0], atol=1e-14)


@pytest.mark.parametrize("seed", range(6))
def test_gradients_match_central_differences(seed):
    rng = np.random.default_rng(seed)
    shape = NetShape(int(rng.integers(2, 6)), int(rng.integers(2, 5)),
                     tuple(int(x) for x in rng.integers(2, 6, size=rng.integers(0, 3))),
                     int(rng.integers(1, 9)), bool(seed % 3))
    net = RecurrentNet(shape, seed=seed)
    T, B = int(rng.integers(1, 5)), int(rng.integers(1, 4))
    xs = rng.normal(size=(T, B, shape.obs_dim))
    h0, c0 = rng.normal(size=(B, shape.hidden)), rng.normal(size=(B, shape.hidden))
    target = rng.normal(size=(T, B, shape.out_dim))

    def loss():
        out = net.forward(xs, h0, c0, record=False)[0]
        return 0.5 * float(((out - target) ** 2).sum())

    out, tape, _ = net.forward(xs, h0, c0)
    grads, (dh0, dc0) = net.backward(tape, out - target)
    num = oracles.central_difference(loss, net.params)
    assert oracles.max_rel_error(grads, num) <= 1e-5
    if shape.recurrent:
        num0 = oracles.central_difference(loss, {"h0": h0, "c0": c0})
        assert oracles.max_rel_error({"h0": dh0, "c0": dc0}, num0) <= 1e-5


def test_builtin_grad_check_agrees():
    net = RecurrentNet(NetShape(3, 4, (5,), 4), seed=3)
    xs = np.random.default_rng(2).normal(size=(3, 2, 3))
    labels = np.array([[0, 1], [2, 3], [1, 1]])

    def ce(out):
        lp = log_softmax(out)
        onehot = np.eye(4)[labels]
        return -float((lp * onehot).sum()), np.exp(lp) - onehot

    rep = grad_check(net, ce, xs)
    assert rep.passed(1e-6)
    assert rep.checked == sum(p.size for p in net.params.values())


def test_shape_and_tape_errors():
    net = RecurrentNet(NetShape(3, 2, (4,), 3), seed=0)
    with pytest.raises(ShapeError):
        net.forward(np.zeros((2, 3)))
    with pytest.raises(ShapeError):
        net.forward(np.zeros((1, 1, 4)))
    _, tape, _ = net.forward(np.zeros((2, 1, 3)))
    with pytest.raises(ShapeError):
        net.backward(tape, np.zeros((2, 1, 5)))
    with pytest.raises(TapeError):
        net.backward(None, np.zeros((2, 1, 2)))
    with pytest.raises(ShapeError):
        RecurrentNet(NetShape(3, 2, (4,), 3), params={"head.W": np.zeros((2, 3))})


def test_adam_matches_hand_computation():
    p = {"w": np.array([1.0, -2.0])}
    g = {"w": np.array([0.5, 0.1])}
    opt = Adam(p, lr=0.1)
    opt.step(p, g)
    # first bias-corrected step moves each coordinate by lr * sign(g)
    np.testing.assert_allclose(p["w"], [0.9, -2.1], atol=1e-7)
    opt.step(p, g)
    m = 0.9 * 0.1 * g["w"] + 0.1 * g["w"]
    v = 0.999 * 0.001 * g["w"] ** 2 + 0.001 * g["w"] ** 2
    step = 0.1 * (m / (1 - 0.81)) / (np.sqrt(v / (1 - 0.999 ** 2)) + 1e-8)
    np.testing.assert_allclose(p["w"], np.array([0.9, -2.1]) - step, atol=1e-12)


def test_adam_descends_quadratic():
    p = {"x": np.array([3.0, -4.0])}
    opt = Adam(p, lr=0.1)
    for _ in range(500):
        opt.step(p, {"x": 2 * p["x"]})
    assert np.abs(p["x"]).max() < 1e-2


def test_checkpoint_roundtrip_and_bytes(tmp_path):
    a = RecurrentNet(NetShape(4, 2, (3,), 5), seed=4)
    c = RecurrentNet(NetShape(4, 1, (3,), 5), seed=5)
    save_checkpoint(tmp_path / "x.zip", {"actor": a, "critic": c}, {"iteration": 3})
    save_checkpoint(tmp_path / "y.zip", {"actor": a, "critic": c}, {"iteration": 3})
    assert (tmp_path / "x.zip").read_bytes() == (tmp_path / "y.zip").read_bytes()
    nets, meta = load_checkpoint(tmp_path / "x.zip")
    assert meta == {"iteration": 3}
    for k in a.params:
        assert np.array_equal(nets["actor"].params[k], a.params[k])
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "x.zip", expect={"actor": NetShape(4, 3, (3,), 5)})
    (tmp_path / "bad.zip").write_bytes(b"not a zip")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "bad.zip")
