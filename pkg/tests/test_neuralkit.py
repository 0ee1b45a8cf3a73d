"""Layer-level tests: forward semantics and hand-derived backward passes.

Every backward pass is checked against central finite differences in
float64; the checker itself is validated by corrupting a gradient and
watching it fail.
"""

import numpy as np
import pytest

from vocalscreen.neuralkit import (
    Conv1d,
    Dense,
    Dropout,
    EmptySequenceError,
    GRU,
    LSTM,
    GlobalMaxPool,
    ShapeMismatchError,
    glorot_uniform,
    grad_check,
    sigmoid,
)


def test_glorot_bound_dense_128():
    rng = np.random.default_rng(0)
    w = glorot_uniform(rng, 128, 128, (128, 128))
    bound = np.sqrt(6.0 / 256.0)
    assert round(bound, 4) == 0.1531
    assert np.max(np.abs(w)) <= bound
    assert np.max(np.abs(w)) > 0.9 * bound  # actually fills the interval


def test_init_deterministic_and_biases_zero():
    a = Conv1d(5, 16, 32, np.random.default_rng(7))
    b = Conv1d(5, 16, 32, np.random.default_rng(7))
    c = Conv1d(5, 16, 32, np.random.default_rng(8))
    np.testing.assert_array_equal(a.p["w"], b.p["w"])
    assert not np.array_equal(a.p["w"], c.p["w"])
    assert np.all(a.p["b"] == 0.0)
    g = GRU(12, 16, np.random.default_rng(1))
    l = LSTM(12, 16, np.random.default_rng(1))
    assert np.all(g.p["b"] == 0.0) and np.all(l.p["b"] == 0.0)


def test_conv1d_shapes_same_padding():
    rng = np.random.default_rng(3)
    conv = Conv1d(5, 16, 128, rng)
    y, _ = conv.forward(rng.standard_normal((2, 128, 16)).astype(np.float32))
    assert y.shape == (2, 128, 128)


def test_conv1d_k1_identity_embedding():
    rng = np.random.default_rng(4)
    conv = Conv1d(1, 16, 32, rng, relu=False)
    conv.p["w"][:] = 0.0
    for j in range(16):
        conv.p["w"][0, j, j] = 1.0
    x = rng.standard_normal((3, 20, 16)).astype(np.float32)
    y, _ = conv.forward(x)
    np.testing.assert_allclose(y[:, :, :16], x, rtol=1e-6)
    assert np.all(y[:, :, 16:] == 0.0)


def test_conv1d_rejects_bad_shape():
    conv = Conv1d(3, 16, 8, np.random.default_rng(0))
    with pytest.raises(ShapeMismatchError):
        conv.forward(np.zeros((2, 128, 12), dtype=np.float32))


def test_dense_identity_and_sigmoid_range():
    rng = np.random.default_rng(5)
    d = Dense(6, 6, None, rng)
    d.p["w"][:] = np.eye(6, dtype=np.float32)
    x = rng.standard_normal((4, 6)).astype(np.float32)
    y, _ = d.forward(x)
    np.testing.assert_allclose(y, x, rtol=1e-6)

    s = Dense(6, 3, "sigmoid", rng)
    y, _ = s.forward(5.0 * x)
    assert np.all(y > 0.0) and np.all(y < 1.0)
    y, _ = s.forward(1e6 * x)  # saturates but stays finite in [0, 1]
    assert np.all(np.isfinite(y)) and np.all(y >= 0.0) and np.all(y <= 1.0)


def test_gru_zero_input_zero_state():
    gru = GRU(8, 16, np.random.default_rng(6))
    gru.p["wx"][:] = 0.0
    gru.p["wh"][:] = 0.0
    x = np.zeros((2, 10, 8), dtype=np.float32)
    y, _ = gru.forward(x)
    assert np.all(y == 0.0)  # z = 0.5, candidate = tanh(0) = 0


def test_gru_hidden_bounded():
    rng = np.random.default_rng(7)
    gru = GRU(8, 16, rng)
    y, _ = gru.forward(5.0 * rng.standard_normal((2, 40, 8)).astype(np.float32))
    assert np.all(np.abs(y) < 1.0)


def test_lstm_zero_input_zero_state():
    lstm = LSTM(8, 16, np.random.default_rng(8))
    lstm.p["wx"][:] = 0.0
    lstm.p["wh"][:] = 0.0
    y, _ = lstm.forward(np.zeros((2, 10, 8), dtype=np.float32))
    assert np.all(y == 0.0)  # c = 0, h = o * tanh(0) = 0


def test_lstm_forget_gate_carries_gradient_16_steps():
    # Constant carousel: f ~ 1, recurrent weights 0, input only at t=0.
    # The gradient of h_t w.r.t. x_0 then shrinks only by f^(t) and
    # tanh curvature, so 16 steps preserve magnitude within 1%.
    H = 4
    lstm = LSTM(H, H, np.random.default_rng(9)).cast(np.float64)
    lstm.p["wx"][:] = 0.0
    lstm.p["wh"][:] = 0.0
    lstm.p["wx"][:, 2 * H : 3 * H] = 0.1 * np.eye(H)  # input feeds g only
    lstm.p["b"][H : 2 * H] = 12.0  # forget bias: f = sigmoid(12) ~ 1

    x = np.zeros((1, 16, H))
    x[0, 0] = 0.01

    def grad_at_step(step):
        y, cache = lstm.forward(x[:, : step + 1])
        dy = np.zeros_like(y)
        dy[0, step] = 1.0
        dx, _ = lstm.backward(dy, cache)
        return np.linalg.norm(dx[0, 0])

    g1 = grad_at_step(0)
    g16 = grad_at_step(15)
    assert abs(g16 - g1) / g1 < 0.01


def test_pool_constant_and_ties():
    pool = GlobalMaxPool()
    x = np.full((2, 9, 4), 0.7, dtype=np.float32)
    y, cache = pool.forward(x)
    assert np.all(y == np.float32(0.7))

    # tie at positions 3 and 7: gradient goes to position 3 only
    x = np.zeros((1, 10, 1), dtype=np.float32)
    x[0, 3, 0] = 1.0
    x[0, 7, 0] = 1.0
    y, cache = pool.forward(x)
    dx, _ = pool.backward(np.ones((1, 1), dtype=np.float32), cache)
    assert dx[0, 3, 0] == 1.0
    assert dx[0, 7, 0] == 0.0
    assert np.sum(dx != 0) == 1


def test_pool_backward_one_entry_per_channel():
    rng = np.random.default_rng(10)
    pool = GlobalMaxPool()
    x = rng.standard_normal((3, 12, 5)).astype(np.float32)
    y, cache = pool.forward(x)
    dx, _ = pool.backward(np.ones((3, 5), dtype=np.float32), cache)
    assert np.all((dx != 0).sum(axis=1) == 1)


def test_pool_empty_sequence():
    with pytest.raises(EmptySequenceError):
        GlobalMaxPool().forward(np.zeros((1, 0, 3), dtype=np.float32))


def test_dropout_modes():
    rng = np.random.default_rng(11)
    x = rng.standard_normal((50, 20)).astype(np.float32)
    d0 = Dropout(0.0)
    y, _ = d0.forward(x, "train", rng)
    np.testing.assert_array_equal(y, x)
    d = Dropout(0.1)
    y, _ = d.forward(x, "infer")
    np.testing.assert_array_equal(y, x)
    y, mask = d.forward(x, "train", rng)
    kept = mask > 0
    np.testing.assert_allclose(y[kept], x[kept] / 0.9, rtol=1e-6)
    assert np.all(y[~kept] == 0.0)


def test_dropout_expectation_within_1pct():
    rng = np.random.default_rng(12)
    x = np.full((100000, 8), 2.0, dtype=np.float64)
    d = Dropout(0.5)
    y, _ = d.forward(x, "train", rng)
    np.testing.assert_allclose(y.mean(axis=0), 2.0, rtol=0.01)


def test_no_nan_with_params_up_to_10():
    rng = np.random.default_rng(13)
    x = (10.0 * rng.standard_normal((2, 24, 8))).astype(np.float32)
    for layer in [Conv1d(3, 8, 8, rng), GRU(8, 8, rng), LSTM(8, 8, rng)]:
        for k in layer.p:
            layer.p[k][:] = 10.0 * np.sign(rng.standard_normal(layer.p[k].shape))
        y, _ = layer.forward(x)
        assert np.all(np.isfinite(y))


def test_layers_reentrant():
    rng = np.random.default_rng(14)
    gru = GRU(6, 8, rng)
    xa = rng.standard_normal((2, 7, 6)).astype(np.float32)
    xb = rng.standard_normal((2, 7, 6)).astype(np.float32)
    ya, ca = gru.forward(xa)
    yb, cb = gru.forward(xb)  # interleaved second forward
    dxa, _ = gru.backward(np.ones_like(ya), ca)
    dxb, _ = gru.backward(np.ones_like(yb), cb)
    ya2, ca2 = gru.forward(xa)
    dxa2, _ = gru.backward(np.ones_like(ya2), ca2)
    np.testing.assert_array_equal(dxa, dxa2)


# --- finite-difference gradient checks (the backward-pass oracle) ---


def _offset_relu_input(rng, shape, margin=0.05):
    """Random input nudged away from 0 so ReLU kinks stay out of reach."""
    x = rng.standard_normal(shape)
    return x + np.sign(x) * margin


def test_grad_check_linear_layer_near_machine_eps():
    rng = np.random.default_rng(20)
    d = Dense(6, 5, None, rng)
    x = rng.standard_normal((4, 6))
    report = grad_check(d, x, np.random.default_rng(21))
    assert report["max_rel_err"] < 1e-9


def test_grad_check_conv_relu():
    rng = np.random.default_rng(22)
    conv = Conv1d(5, 6, 8, rng)
    x = _offset_relu_input(rng, (2, 24, 6))
    report = grad_check(conv, x, np.random.default_rng(23), n_coords=300)
    assert report["max_rel_err"] < 1e-4
    assert report["n_checked"] >= 300


def test_grad_check_dense_activations():
    rng = np.random.default_rng(24)
    for act in ("relu", "sigmoid"):
        d = Dense(7, 6, act, rng)
        x = _offset_relu_input(rng, (3, 7))
        report = grad_check(d, x, np.random.default_rng(25))
        assert report["max_rel_err"] < 1e-4, act


def test_grad_check_gru():
    rng = np.random.default_rng(26)
    gru = GRU(6, 8, rng)
    x = rng.standard_normal((2, 9, 6))
    report = grad_check(gru, x, np.random.default_rng(27), n_coords=400)
    assert report["max_rel_err"] < 1e-4


def test_grad_check_lstm():
    rng = np.random.default_rng(28)
    lstm = LSTM(6, 8, rng)
    x = rng.standard_normal((2, 9, 6))
    report = grad_check(lstm, x, np.random.default_rng(29), n_coords=400)
    assert report["max_rel_err"] < 1e-4


def test_grad_check_pool():
    rng = np.random.default_rng(30)
    pool = GlobalMaxPool()
    x = rng.standard_normal((3, 11, 4))
    report = grad_check(pool, x, np.random.default_rng(31))
    assert report["max_rel_err"] < 1e-8  # piecewise linear away from ties


def test_grad_check_detects_corrupted_backward():
    class BrokenDense(Dense):
        def backward(self, dy, cache):
            dx, grads = super().backward(dy, cache)
            grads["w"] = 2.0 * grads["w"]  # deliberate corruption
            return dx, grads

    rng = np.random.default_rng(32)
    d = BrokenDense(6, 5, None, rng)
    x = rng.standard_normal((4, 6))
    report = grad_check(d, x, np.random.default_rng(33))
    # |2g - g| / max(|2g|, |g|) = 0.5 on every weight coordinate
    assert 0.3 < report["max_rel_err"] < 0.7


def test_grad_check_dropout_frozen_mask():
    rng = np.random.default_rng(34)
    d = Dropout(0.3)
    x = rng.standard_normal((5, 6))
    _, mask = d.forward(x, "train", np.random.default_rng(35))

    class Frozen:
        def __init__(self):
            self.p = {}

        def cast(self, dtype):
            return self

        def forward(self, xx):
            return xx * mask, mask

        def backward(self, dy, cache):
            return d.backward(dy, cache)

    report = grad_check(Frozen(), x, np.random.default_rng(36))
    assert report["max_rel_err"] < 1e-9


def test_sigmoid_stable_at_extremes():
    x = np.array([-1000.0, -30.0, 0.0, 30.0, 1000.0])
    y = sigmoid(x)
    assert np.all(np.isfinite(y))
    assert y[0] == 0.0 or y[0] < 1e-300
    assert y[2] == 0.5
    assert y[4] == 1.0 or y[4] > 1 - 1e-12
