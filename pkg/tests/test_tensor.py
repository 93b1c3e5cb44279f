"""Unit tests for the dense-tensor layers, optimizer and gradient checker."""

import numpy as np
import pytest

from twostream import tensor as T
from twostream.errors import EmptySequenceError, ShapeError

SEEDS = [0, 1, 2, 3, 4]


# ---------------------------------------------------------------------------
# matmul


def naive_matmul(a, b):
    m, k = a.shape
    k2, n = b.shape
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            for p in range(k):
                out[i, j] += a[i, p] * b[p, j]
    return out


def test_matmul_identity():
    b = np.array([[5.0], [7.0]])
    assert np.array_equal(T.matmul(np.eye(2), b), b)


def test_matmul_reference():
    a = np.array([[1.0, 2.0], [3.0, 4.0]])
    b = np.array([[1.0], [1.0]])
    expected = naive_matmul(a, b)
    assert np.allclose(expected, [[3.0], [7.0]])
    assert np.array_equal(T.matmul(a, b), expected)


def test_matmul_zeros():
    a = np.arange(6.0).reshape(2, 3)
    assert np.array_equal(T.matmul(a, np.zeros((3, 4))), np.zeros((2, 4)))


def test_matmul_shape_error_names_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 2\)"):
        T.matmul(np.zeros((2, 3)), np.zeros((2, 2)))


def test_matmul_associativity():
    rng = np.random.default_rng(7)
    for _ in range(10):
        a = rng.normal(size=(4, 5))
        b = rng.normal(size=(5, 6))
        c = rng.normal(size=(6, 3))
        left = T.matmul(T.matmul(a, b), c)
        right = T.matmul(a, T.matmul(b, c))
        rel = np.abs(left - right) / np.maximum(np.abs(left), 1e-9)
        assert rel.max() < 1e-9


# ---------------------------------------------------------------------------
# temporal conv


def test_temporal_conv_zero_input_gives_bias():
    x = np.zeros((2, 9))
    w = np.random.default_rng(0).normal(size=(3, 2, 4))
    b = np.array([1.0, -2.0, 0.5])
    y = T.temporal_conv(x, w, b)
    assert y.shape == (3, 6)
    for c in range(3):
        assert np.allclose(y[c], b[c])


def test_temporal_conv_hand_check():
    x = np.array([[1.0, 2.0, 3.0]])
    w = np.array([[[1.0, 0.0, -1.0]]])
    b = np.zeros(1)
    y = T.temporal_conv(x, w, b)
    assert np.allclose(y, [[-2.0]])  # 1*1 + 2*0 + 3*(-1)


def test_temporal_conv_identity_filter():
    x = np.random.default_rng(1).normal(size=(1, 5))
    w = np.ones((1, 1, 1))
    y = T.temporal_conv(x, w, np.zeros(1))
    assert np.allclose(y, x)


def test_temporal_conv_kernel_too_wide():
    with pytest.raises(ShapeError):
        T.temporal_conv(np.zeros((1, 3)), np.zeros((1, 1, 4)), np.zeros(1))


# ---------------------------------------------------------------------------
# temporal maxpool


def brute_temporal_maxpool(x, width, stride):
    c, length = x.shape
    n = (length - width) // stride + 1
    out = np.empty((c, n))
    for ci in range(c):
        for i in range(n):
            out[ci, i] = x[ci, i * stride : i * stride + width].max()
    return out


def test_temporal_maxpool_example():
    x = np.array([[1.0, 5.0, 2.0, 8.0]])
    expected = brute_temporal_maxpool(x, 2, 2)
    assert np.allclose(expected, [[5.0, 8.0]])
    assert np.array_equal(T.temporal_maxpool(x, 2, 2), expected)


def test_temporal_maxpool_constant():
    x = np.full((2, 7), 3.25)
    y = T.temporal_maxpool(x, 3, 2)
    assert np.all(y == 3.25)


def test_temporal_maxpool_full_window():
    x = np.array([[3.0, -1.0, 9.0, 2.0]])
    assert np.array_equal(T.temporal_maxpool(x, 4, 1), [[9.0]])


def test_temporal_maxpool_matches_bruteforce_random():
    rng = np.random.default_rng(3)
    for _ in range(20):
        x = rng.normal(size=(3, 17))
        width = int(rng.integers(1, 6))
        stride = int(rng.integers(1, 4))
        assert np.array_equal(
            T.temporal_maxpool(x, width, stride), brute_temporal_maxpool(x, width, stride)
        )


def test_temporal_maxpool_tie_routes_to_first():
    x = np.array([[2.0, 2.0, 1.0]])
    y, cache = T.temporal_maxpool_forward(x, 3, 1)
    dx = T.temporal_maxpool_backward(np.ones_like(y), cache)
    assert np.array_equal(dx, [[1.0, 0.0, 0.0]])


# ---------------------------------------------------------------------------
# conv2d


def test_conv2d_zero_input_gives_bias_planes():
    x = np.zeros((2, 5, 5))
    w = np.random.default_rng(2).normal(size=(3, 2, 2, 2))
    b = np.array([0.5, -1.0, 2.0])
    y = T.conv2d(x, w, b)
    assert y.shape == (3, 4, 4)
    for c in range(3):
        assert np.allclose(y[c], b[c])


def test_conv2d_scaling_case():
    x = np.ones((1, 3, 3))
    w = np.full((1, 1, 1, 1), 2.0)
    y = T.conv2d(x, w, np.ones(1))
    assert np.allclose(y, np.full((1, 3, 3), 3.0))


def test_conv2d_sum_filter():
    x = np.arange(1.0, 10.0).reshape(1, 3, 3)
    w = np.ones((1, 1, 2, 2))
    y = T.conv2d(x, w, np.zeros(1))
    assert np.allclose(y[0], [[12.0, 16.0], [24.0, 28.0]])


def test_conv2d_kernel_too_large():
    with pytest.raises(ShapeError):
        T.conv2d(np.zeros((1, 3, 3)), np.zeros((1, 1, 4, 4)), np.zeros(1))


# ---------------------------------------------------------------------------
# relu / maxpool2d


def test_relu_examples():
    assert np.array_equal(T.relu(np.array([-1.0, 0.0, 2.0])), [0.0, 0.0, 2.0])


def test_relu_dead_unit_gradient():
    y, cache = T.relu_forward(np.array([-1.0]))
    assert np.array_equal(T.relu_backward(np.array([5.0]), cache), [0.0])


def test_maxpool2d_constant_plane():
    x = np.full((1, 6, 6), 4.0)
    assert np.all(T.maxpool2d(x, 2, 2) == 4.0)


def test_maxpool2d_matches_bruteforce():
    rng = np.random.default_rng(9)
    x = rng.normal(size=(2, 7, 7))
    y = T.maxpool2d(x, 2, 2)
    for c in range(2):
        for i in range(3):
            for j in range(3):
                assert y[c, i, j] == x[c, 2 * i : 2 * i + 2, 2 * j : 2 * j + 2].max()


# ---------------------------------------------------------------------------
# rnn


def test_rnn_zero_weights():
    xs = np.random.default_rng(0).normal(size=(4, 3))
    hs, _ = T.rnn_forward(xs, np.zeros(2), np.zeros((2, 3)), np.zeros((2, 2)), np.zeros(2))
    assert np.all(hs == 0.0)


def test_rnn_zero_input_propagation():
    xs = np.zeros((5, 2))
    w_h = 0.1 * np.eye(3)
    hs, _ = T.rnn_forward(xs, np.zeros(3), np.zeros((3, 2)), w_h, np.zeros(3))
    assert np.all(hs == 0.0)


def test_rnn_scalar_hand_eval():
    h = T.rnn_step(np.array([0.5]), np.zeros(1), np.array([[1.0]]),
                   np.array([[0.0]]), np.zeros(1))
    assert abs(h[0] - np.tanh(0.5)) < 1e-12
    assert abs(h[0] - 0.46211715726000974) < 1e-9


def test_rnn_shape_error():
    with pytest.raises(ShapeError):
        T.rnn_step(np.zeros(2), np.zeros(3), np.zeros((3, 5)), np.zeros((3, 3)), np.zeros(3))


# ---------------------------------------------------------------------------
# mean over time


def test_mean_over_time_constant_rows():
    h = np.tile(np.array([1.0, -2.0, 0.5]), (6, 1))
    assert np.allclose(T.mean_over_time(h), [1.0, -2.0, 0.5])


def test_mean_over_time_symmetry():
    h = np.array([[1.0, 0.0], [0.0, 1.0]])
    assert np.allclose(T.mean_over_time(h), [0.5, 0.5])


def test_mean_over_time_direct_sum():
    h = np.array([[2.0], [4.0], [9.0]])
    assert np.allclose(T.mean_over_time(h), [5.0])


def test_mean_over_time_empty_errors():
    with pytest.raises(EmptySequenceError):
        T.mean_over_time(np.zeros((0, 3)))


def test_mean_over_time_permutation_invariance():
    rng = np.random.default_rng(11)
    h = rng.normal(size=(8, 4))
    perm = rng.permutation(8)
    assert np.allclose(T.mean_over_time(h), T.mean_over_time(h[perm]), atol=1e-15)


# ---------------------------------------------------------------------------
# softmax cross entropy


def test_softmax_ce_uniform():
    loss, _ = T.softmax_cross_entropy(np.zeros(4), 1)
    assert abs(loss - np.log(4.0)) < 1e-12


def test_softmax_ce_stabilized():
    loss, grad = T.softmax_cross_entropy(np.array([1000.0, 0.0]), 0)
    assert loss < 1e-12
    assert np.all(np.isfinite(grad))


def test_softmax_ce_direct_eval():
    logits = np.array([1.0, 2.0, 3.0])
    expected = -np.log(np.exp(3.0) / np.exp(logits).sum())
    loss, grad = T.softmax_cross_entropy(logits, 2)
    assert abs(loss - expected) < 1e-12
    assert abs(loss - 0.40760596444438) < 1e-9
    p = np.exp(logits) / np.exp(logits).sum()
    assert np.allclose(grad, p - np.array([0.0, 0.0, 1.0]))


def test_softmax_ce_label_out_of_range():
    with pytest.raises(IndexError):
        T.softmax_cross_entropy(np.zeros(3), 3)


# ---------------------------------------------------------------------------
# rmsprop


def test_rmsprop_zero_grad_is_identity():
    params = {"w": np.array([1.0, -2.0, 3.0])}
    grads = {"w": np.zeros(3)}
    state = T.RmspropState(learning_rate=0.01)
    new_params, _ = T.rmsprop_step(params, grads, state)
    assert np.array_equal(new_params["w"], params["w"])


def test_rmsprop_scalar_hand_eval():
    params = {"w": np.array([1.0])}
    grads = {"w": np.array([1.0])}
    state = T.RmspropState(learning_rate=0.0007, decay=0.9, epsilon=1e-8)
    new_params, new_state = T.rmsprop_step(params, grads, state)
    assert abs(new_state.mean_square["w"][0] - 0.1) < 1e-15
    expected = 1.0 - 0.0007 / np.sqrt(0.1 + 1e-8)
    assert abs(new_params["w"][0] - expected) < 1e-12
    assert abs(expected - 0.9977864) < 1e-6


def test_rmsprop_two_steps_mean_square_recurrence():
    g = 2.0
    params = {"w": np.array([0.0])}
    grads = {"w": np.array([g])}
    state = T.RmspropState(learning_rate=0.001, decay=0.9)
    # unrolled recurrence: ms2 = 0.9*(0.1 g^2) + 0.1 g^2 = 0.19 g^2
    params, state = T.rmsprop_step(params, grads, state)
    params, state = T.rmsprop_step(params, grads, state)
    assert abs(state.mean_square["w"][0] - 0.19 * g * g) < 1e-12


# ---------------------------------------------------------------------------
# gradient checks, all layers, 5 seeds each


def test_grad_check_quadratic_exact():
    def f(p):
        return 0.5 * float((p["x"] ** 2).sum()), {"x": p["x"].copy()}

    err = T.grad_check(f, {"x": np.array([0.3, -1.2, 2.0])}, h=1e-5)
    assert err < 1e-8


@pytest.mark.parametrize("seed", SEEDS)
def test_grad_temporal_conv(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(2, 9))
    target = rng.normal(size=(3, 6))

    def f(p):
        y, cache = T.temporal_conv_forward(p["x"], p["w"], p["b"])
        loss = 0.5 * float(((y - target) ** 2).sum())
        dx, dw, db = T.temporal_conv_backward(y - target, cache)
        return loss, {"x": dx, "w": dw, "b": db}

    params = {"x": x, "w": rng.normal(size=(3, 2, 4)), "b": rng.normal(size=3)}
    assert T.grad_check(f, params) < 1e-4


@pytest.mark.parametrize("seed", SEEDS)
def test_grad_conv2d(seed):
    rng = np.random.default_rng(seed)
    target = rng.normal(size=(2, 3, 3))

    def f(p):
        y, cache = T.conv2d_forward(p["x"], p["w"], p["b"])
        loss = 0.5 * float(((y - target) ** 2).sum())
        dx, dw, db = T.conv2d_backward(y - target, cache)
        return loss, {"x": dx, "w": dw, "b": db}

    params = {
        "x": rng.normal(size=(2, 5, 5)),
        "w": rng.normal(size=(2, 2, 3, 3)),
        "b": rng.normal(size=2),
    }
    assert T.grad_check(f, params) < 1e-4


@pytest.mark.parametrize("seed", SEEDS)
def test_grad_maxpools_and_relu(seed):
    rng = np.random.default_rng(seed)
    target1 = rng.normal(size=(2, 3))
    target2 = rng.normal(size=(1, 2, 2))

    def f(p):
        r, rc = T.relu_forward(p["x1"])
        y1, c1 = T.temporal_maxpool_forward(r, 3, 2)
        y2, c2 = T.maxpool2d_forward(p["x2"], 2, 2)
        loss = 0.5 * float(((y1 - target1) ** 2).sum()) + 0.5 * float(((y2 - target2) ** 2).sum())
        dx1 = T.relu_backward(T.temporal_maxpool_backward(y1 - target1, c1), rc)
        dx2 = T.maxpool2d_backward(y2 - target2, c2)
        return loss, {"x1": dx1, "x2": dx2}

    params = {"x1": rng.normal(size=(2, 7)), "x2": rng.normal(size=(1, 5, 5))}
    assert T.grad_check(f, params) < 1e-4


@pytest.mark.parametrize("seed", SEEDS)
def test_grad_rnn_bptt(seed):
    rng = np.random.default_rng(seed)
    target = rng.normal(size=(5, 3))

    def f(p):
        hs, cache = T.rnn_forward(p["xs"], np.zeros(3), p["wx"], p["wh"], p["b"])
        loss = 0.5 * float(((hs - target) ** 2).sum())
        dxs, _, dwx, dwh, db = T.rnn_backward(hs - target, cache)
        return loss, {"xs": dxs, "wx": dwx, "wh": dwh, "b": db}

    params = {
        "xs": rng.normal(size=(5, 2)),
        "wx": 0.5 * rng.normal(size=(3, 2)),
        "wh": 0.5 * rng.normal(size=(3, 3)),
        "b": rng.normal(size=3),
    }
    assert T.grad_check(f, params) < 1e-4


@pytest.mark.parametrize("seed", SEEDS)
def test_grad_mean_and_linear_and_ce(seed):
    rng = np.random.default_rng(seed)
    label = int(rng.integers(0, 4))

    def f(p):
        m, mc = T.mean_over_time_forward(p["h"])
        logits, lc = T.linear_forward(m, p["w"], p["b"])
        loss, dlogits = T.softmax_cross_entropy(logits, label)
        dm, dw, db = T.linear_backward(dlogits, lc)
        return loss, {"h": T.mean_over_time_backward(dm, mc), "w": dw, "b": db}

    params = {"h": rng.normal(size=(6, 3)), "w": rng.normal(size=(4, 3)), "b": rng.normal(size=4)}
    assert T.grad_check(f, params) < 1e-4


# ---------------------------------------------------------------------------
# determinism


def test_layer_determinism():
    rng = np.random.default_rng(42)
    x = rng.normal(size=(2, 6, 6))
    w = rng.normal(size=(3, 2, 3, 3))
    b = rng.normal(size=3)
    y1 = T.conv2d(x, w, b)
    y2 = T.conv2d(x.copy(), w.copy(), b.copy())
    assert np.array_equal(y1, y2)
