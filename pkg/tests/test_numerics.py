import numpy as np
import pytest

from atisr import numerics as nx
from atisr.errors import DimensionError, OptimizerError, UsageError
from conftest import grad_check


def T(x, grad=False):
    return nx.Tensor(np.asarray(x, dtype=float), requires_grad=grad)


def test_matmul_identity_and_row():
    np.testing.assert_array_equal(nx.matmul(T([[1, 0], [0, 1]]), T([[3], [4]])).data, [[3], [4]])
    np.testing.assert_array_equal(nx.matmul(T([[1, 2]]), T([[3], [4]])).data, [[11]])


def test_matmul_matches_triple_loop(rng):
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
    expected = np.zeros((3, 2))
    for i in range(3):
        for j in range(2):
            for k in range(4):
                expected[i, j] += a[i, k] * b[k, j]
    np.testing.assert_allclose(nx.matmul(T(a), T(b)).data, expected, rtol=0, atol=1e-12)


def test_matmul_shape_mismatch():
    with pytest.raises(DimensionError):
        nx.matmul(T(np.ones((2, 3))), T(np.ones((2, 3))))


def test_softmax_examples(rng):
    np.testing.assert_allclose(nx.softmax(T([0.0, 0.0, 0.0])).data, [1 / 3] * 3, atol=1e-15)
    for c in (-50.0, 0.0, 7.3, 700.0):
        np.testing.assert_allclose(nx.softmax(T([c, c + np.log(2)])).data, [1 / 3, 2 / 3], atol=1e-12)
    v = rng.normal(size=5)
    e = np.exp(v)
    np.testing.assert_allclose(nx.softmax(T(v)).data, e / e.sum(), rtol=0, atol=1e-12)


def test_softmax_empty():
    with pytest.raises(DimensionError):
        nx.softmax(T(np.zeros(0)))


def test_softmax_sum_and_shift_invariance(rng):
    for _ in range(100):
        v = rng.normal(scale=10, size=rng.integers(1, 20))
        y = nx.softmax(T(v)).data
        assert abs(y.sum() - 1) < 1e-9 and np.all(y > 0)
        z = nx.softmax(T(v + rng.normal() * 100)).data
        np.testing.assert_allclose(y, z, atol=1e-9)
        assert np.argmax(y) == np.argmax(z)


def test_backward_sum_and_dot():
    x = T(np.arange(6.0).reshape(2, 3), grad=True)
    with nx.Tape() as tape:
        loss = nx.tensor_sum(x)
    tape.backward(loss)
    np.testing.assert_array_equal(x.grad, np.ones((2, 3)))

    x = T([1.0, 2.0], grad=True)
    with nx.Tape() as tape:
        loss = nx.dot(x, x)
    nx.backward(loss)
    np.testing.assert_array_equal(x.grad, [2.0, 4.0])


def test_backward_requires_scalar():
    x = T([1.0, 2.0], grad=True)
    with nx.Tape() as tape:
        y = x * 2.0
    with pytest.raises(UsageError):
        tape.backward(y)


def test_two_layer_tanh_net_finite_differences(rng):
    W1 = T(rng.normal(size=(2, 3)), grad=True)
    W2 = T(rng.normal(size=(3, 1)), grad=True)
    b1 = T(rng.normal(size=3), grad=True)
    x = T(rng.normal(size=(4, 2)))

    def loss():
        return nx.tensor_sum(nx.tanh(nx.matmul(nx.tanh(nx.matmul(x, W1) + b1), W2)))

    assert grad_check(loss, [W1, W2, b1], rng, n_coords=12) < 1e-6


def test_tape_replay_is_identical(rng):
    W = T(rng.normal(size=(3, 3)), grad=True)
    x = T(rng.normal(size=(2, 3)))
    with nx.Tape() as tape:
        loss = nx.tensor_sum(nx.sigmoid(nx.matmul(nx.tanh(nx.matmul(x, W)), W)))
    tape.backward(loss)
    g1 = W.grad.copy()
    tape.backward(loss)
    np.testing.assert_array_equal(g1, W.grad)


def test_shared_parameter_accumulates(rng):
    x = T(rng.normal(size=4), grad=True)
    with nx.Tape() as tape:
        loss = nx.dot(x, x) + nx.tensor_sum(x)
    tape.backward(loss)
    np.testing.assert_allclose(x.grad, 2 * x.data + 1)


@pytest.mark.parametrize("op", ["exp", "log", "sigmoid", "getitem", "concat", "stack", "softmax",
                                "transpose", "pick", "take_time", "gather_steps", "unstack", "bmm"])
def test_primitive_gradients(op, rng):
    x = T(rng.uniform(0.5, 2.0, size=(3, 4, 2)), grad=True)
    y = T(rng.normal(size=(3, 4, 2)), grad=True)
    R = rng.normal(size=(8, 8, 8, 8))

    def weighted(t):
        idx = tuple(slice(0, s) for s in t.shape) + (0,) * (4 - t.ndim)
        return nx.tensor_sum(t * T(R[idx]))

    fns = {
        "exp": lambda: weighted(nx.exp(x)),
        "log": lambda: weighted(nx.log(x, floor=1e-12)),
        "sigmoid": lambda: weighted(nx.sigmoid(y)),
        "getitem": lambda: weighted(x[1:, ::-1, 0]),
        "concat": lambda: weighted(nx.concat([x, y], axis=1)),
        "stack": lambda: weighted(nx.stack([x, y], axis=1)),
        "softmax": lambda: weighted(nx.softmax(y, axis=1)),
        "transpose": lambda: weighted(nx.transpose(x, (2, 0, 1))),
        "pick": lambda: weighted(nx.pick(x, np.array([[0, 1, 1, 0]] * 3))),
        "take_time": lambda: weighted(nx.take_time(x, np.array([[2, 1, 0, 0], [1, 0, 2, 2], [0, 2, 1, 1]]))),
        "gather_steps": lambda: weighted(nx.gather_steps(x, np.array([[3, 0, 1], [2, 2, 0]]))),
        "unstack": lambda: weighted(nx.unstack(x)[0]) + weighted(nx.unstack(x)[2] * y[0]),
        "bmm": lambda: weighted(nx.matmul(x, nx.transpose(y, (0, 2, 1)))),
    }
    assert grad_check(fns[op], [x, y] if op in ("concat", "stack", "bmm", "unstack") else
                      ([y] if op in ("sigmoid", "softmax") else [x]), rng, n_coords=24) < 1e-6


def test_lstm_scan_and_cell_gradients(rng):
    Tn, B, I, H = 5, 3, 4, 3
    xs = T(rng.normal(size=(Tn, B, I)), grad=True)
    h0 = T(rng.normal(size=(B, H)), grad=True)
    c0 = T(rng.normal(size=(B, H)), grad=True)
    W = T(rng.normal(scale=0.5, size=(I + H, 4 * H)), grad=True)
    b = T(rng.normal(size=4 * H), grad=True)
    R = T(rng.normal(size=(Tn, B, 2 * H)))
    worst = grad_check(lambda: nx.tensor_sum(nx.lstm_scan(xs, h0, c0, W, b) * R),
                       [xs, h0, c0, W, b], rng, n_coords=60)
    assert worst < 1e-6
    worst = grad_check(lambda: nx.tensor_sum(nx.lstm_cell(xs[0], h0, c0, W, b) * R[0]),
                       [xs, h0, c0, W, b], rng, n_coords=60)
    assert worst < 1e-6


def test_lstm_cell_matches_scan(rng):
    xs = rng.normal(size=(4, 2, 3))
    W, b = T(rng.normal(size=(5, 8))), T(rng.normal(size=8))
    h = c = T(np.zeros((2, 2)))
    seq = nx.lstm_scan(T(xs), h, c, W, b).data
    for t in range(4):
        hc = nx.lstm_cell(T(xs[t]), h, c, W, b)
        np.testing.assert_allclose(hc.data, seq[t], atol=1e-14)
        h, c = T(hc.data[:, :2]), T(hc.data[:, 2:])


def test_adam_zero_grads_keep_params():
    p = [np.array([1.0, -2.0])]
    state = {"t": 3, "m": [np.array([0.5, 0.5])], "v": [np.array([0.1, 0.1])]}
    new, st = nx.adam_step(p, [np.zeros(2)], state, lr=0.0)
    np.testing.assert_array_equal(new[0], p[0])
    np.testing.assert_allclose(st["m"][0], [0.45, 0.45])
    np.testing.assert_allclose(st["v"][0], 0.0999)
    new, st = nx.adam_step(p, [np.zeros(2)], None, lr=0.1)
    np.testing.assert_array_equal(new[0], p[0])


def test_adam_single_step_hand_value():
    # one step with g=1: m_hat = 1, v_hat = 1, update = lr * 1 / (1 + eps)
    new, _ = nx.adam_step([np.array(0.0)], [np.array(1.0)], None, lr=0.1, beta1=0.9, beta2=0.999, eps=1e-8)
    assert new[0] == pytest.approx(-0.1 / (1 + 1e-8), abs=1e-15)
    assert abs(float(new[0]) + 0.1) < 1e-8


def test_adam_rejects_non_finite():
    with pytest.raises(OptimizerError, match="enc.W"):
        nx.adam_step([np.zeros(2)], [np.array([np.nan, 0.0])], None, names=["enc.W"])
    p = T(np.zeros(2), grad=True)
    p.name = "dec.b"
    p.grad = np.array([np.inf, 0.0])
    with pytest.raises(OptimizerError, match="dec.b"):
        nx.Adam([p]).step()


def test_adam_deterministic(rng):
    def run():
        r = nx.make_rng(7)
        p = T(r.normal(size=(3, 3)), grad=True)
        opt = nx.Adam([p], lr=0.05)
        for _ in range(20):
            with nx.Tape() as tape:
                loss = nx.tensor_sum(nx.tanh(p) * p)
            tape.backward(loss)
            opt.step()
        return p.data.copy()

    assert run().tobytes() == run().tobytes()


def test_adam_object_matches_functional(rng):
    p = T(rng.normal(size=3), grad=True)
    opt = nx.Adam([p], lr=0.01)
    params, state = [p.data.copy()], None
    for _ in range(5):
        g = rng.normal(size=3)
        p.grad = g
        opt.step()
        params, state = nx.adam_step(params, [g], state, lr=0.01)
    np.testing.assert_allclose(p.data, params[0], atol=1e-15)


def test_clip_global_norm():
    a, b = T(np.zeros(2), grad=True), T(np.zeros(1), grad=True)
    a.grad, b.grad = np.array([3.0, 0.0]), np.array([4.0])
    assert nx.clip_global_norm([a, b], 5.0) == pytest.approx(5.0)
    np.testing.assert_allclose(a.grad, [3.0, 0.0])
    assert nx.clip_global_norm([a, b], 1.0) == pytest.approx(5.0)
    np.testing.assert_allclose(np.concatenate([a.grad, b.grad]), [0.6, 0.0, 0.8])


def test_no_grad_records_nothing(rng):
    W = T(rng.normal(size=(2, 2)), grad=True)
    with nx.Tape() as tape:
        with nx.no_grad():
            y = nx.matmul(W, W)
    assert tape.nodes == [] and not y.requires_grad
