import math

import numpy as np
import pytest

from binsight import nn
from binsight.errors import DataError, NumericFault, ShapeError, UsageError

from gradcheck import check_layer, check_model, numeric_grad, rel_error


def rng(seed=0):
    return np.random.default_rng(seed)


# convolution ------------------------------------------------------------------

def test_conv_identity_kernel():
    x = rng().standard_normal((5, 4, 1))
    out, cache = nn.conv2d_forward(x, np.ones((1, 1, 1, 1)), np.zeros(1))
    assert np.array_equal(out, x)
    g = rng(1).standard_normal(out.shape)
    gx, _, _ = nn.conv2d_backward(g, cache)
    assert np.array_equal(gx, g)


def test_conv_zero_kernel_gives_bias():
    x = rng().standard_normal((2, 6, 6, 3))
    out, _ = nn.conv2d_forward(x, np.zeros((3, 3, 3, 2)), np.array([1.5, -2.0]))
    assert (out[..., 0] == 1.5).all() and (out[..., 1] == -2.0).all()


def test_conv_3x3_hand_oracle():
    x = np.arange(1, 10, dtype=float).reshape(3, 3, 1)
    out, _ = nn.conv2d_forward(x, np.ones((3, 3, 1, 1)), np.zeros(1))
    assert out[1, 1, 0] == 45
    assert out[0, 0, 0] == 1 + 2 + 4 + 5
    assert out[2, 2, 0] == 5 + 6 + 8 + 9


def test_conv_matches_direct_loops():
    r = rng(4)
    x = r.standard_normal((5, 6, 2))
    w = r.standard_normal((3, 3, 2, 4))
    b = r.standard_normal(4)
    out, _ = nn.conv2d_forward(x, w, b)
    ref = np.zeros((5, 6, 4))
    for y in range(5):
        for xx in range(6):
            for co in range(4):
                acc = b[co]
                for dy in range(3):
                    for dx in range(3):
                        yy, xs = y + dy - 1, xx + dx - 1
                        if 0 <= yy < 5 and 0 <= xs < 6:
                            acc += x[yy, xs] @ w[dy, dx, :, co]
                ref[y, xx, co] = acc
    assert np.allclose(out, ref, atol=1e-12)


def test_conv_zero_upstream():
    x = rng().standard_normal((1, 4, 4, 2))
    out, cache = nn.conv2d_forward(x, rng(1).standard_normal((3, 3, 2, 3)), np.ones(3))
    gx, gw, gb = nn.conv2d_backward(np.zeros_like(out), cache)
    assert not gx.any() and not gw.any() and not gb.any()


def test_conv_errors():
    with pytest.raises(ShapeError):
        nn.conv2d_forward(np.zeros((4, 4, 2)), np.zeros((1, 1, 3, 1)), np.zeros(1))
    with pytest.raises(ShapeError):
        nn.conv2d_forward(np.zeros((4, 4, 1)), np.zeros((1, 1, 1, 2)), np.zeros(3))
    with pytest.raises(UsageError):
        nn.conv2d_backward(np.zeros((4, 4, 1)), None)


# pooling ----------------------------------------------------------------------

def test_maxpool_examples():
    out, cache = nn.maxpool2_forward(np.array([[1.0, 2], [3, 4]]).reshape(2, 2, 1))
    assert out.reshape(-1).tolist() == [4.0]
    g = nn.maxpool2_backward(np.full((1, 1, 1), 7.0), cache)
    assert g.reshape(2, 2).tolist() == [[0, 0], [0, 7]]

    ramp = np.arange(16, dtype=float).reshape(4, 4, 1)
    out, _ = nn.maxpool2_forward(ramp)
    assert out[..., 0].tolist() == [[5, 7], [13, 15]]

    const = np.full((4, 6, 2), 3.5)
    assert (nn.maxpool2_forward(const)[0] == 3.5).all()


def test_maxpool_tie_goes_to_first_in_row_major():
    _, cache = nn.maxpool2_forward(np.full((2, 2, 1), 5.0))
    g = nn.maxpool2_backward(np.full((1, 1, 1), 2.0), cache)
    assert g.reshape(2, 2).tolist() == [[2, 0], [0, 0]]
    _, cache = nn.maxpool2_forward(np.array([[1.0, 5], [5, 5]]).reshape(2, 2, 1))
    g = nn.maxpool2_backward(np.ones((1, 1, 1)), cache)
    assert g.reshape(2, 2).tolist() == [[0, 1], [0, 0]]


def test_maxpool_zero_grad_and_errors():
    x = rng().standard_normal((4, 4, 3))
    out, cache = nn.maxpool2_forward(x)
    assert not nn.maxpool2_backward(np.zeros_like(out), cache).any()
    with pytest.raises(ShapeError):
        nn.maxpool2_forward(np.zeros((3, 4, 1)))
    with pytest.raises(UsageError):
        nn.maxpool2_backward(out, None)
    with pytest.raises(UsageError):
        nn.maxpool2_backward(np.zeros((1, 1, 3)), cache)


# dense ------------------------------------------------------------------------

def test_dense_examples():
    x = rng().standard_normal(4)
    out, _ = nn.dense_forward(x, np.eye(4), np.zeros(4))
    assert np.array_equal(out, x)
    b = np.array([1.0, 2, 3])
    out, _ = nn.dense_forward(np.zeros(5), rng().standard_normal((5, 3)), b)
    assert np.array_equal(out, b)
    with pytest.raises(ShapeError):
        nn.dense_forward(np.zeros(4), np.zeros((5, 3)), b)


def test_dense_5_to_3_finite_difference():
    r = rng(2)
    x, w, b = r.standard_normal(5), r.standard_normal((5, 3)), r.standard_normal(3)
    up = r.standard_normal(3)
    _, cache = nn.dense_forward(x, w, b)
    gx, gw, gb = nn.dense_backward(up, cache)

    def f():
        return float(nn.dense_forward(x, w, b)[0] @ up)

    assert rel_error(gx, numeric_grad(f, x)) < 1e-5
    assert rel_error(gw.ravel(), numeric_grad(f, w)) < 1e-5
    assert rel_error(gb, numeric_grad(f, b)) < 1e-5


# activations and loss ---------------------------------------------------------

def test_relu_examples():
    x = np.array([-1.0, 0.0, 2.0])
    assert nn.relu(x).tolist() == [0, 0, 2]
    assert nn.relu_backward(np.ones(3), x).tolist() == [0, 0, 1]
    pos = np.abs(rng().standard_normal(10))
    assert np.array_equal(nn.relu(pos), pos)
    neg = -pos
    assert not nn.relu(neg).any() and not nn.relu_backward(np.ones(10), neg).any()


def test_softmax_examples():
    assert np.allclose(nn.softmax(np.zeros(3)), 1 / 3)
    z = rng().standard_normal(5)
    assert np.allclose(nn.softmax(z), nn.softmax(z + 123.0), atol=1e-15)
    p = nn.softmax(np.array([0.0, math.log(2), math.log(4)]))
    assert np.allclose(p, [1 / 7, 2 / 7, 4 / 7], atol=1e-15)
    big = nn.softmax(np.array([1000.0, 0.0, -1000.0]))
    assert np.isfinite(big).all() and abs(big.sum() - 1) < 1e-12


def test_softmax_rows_sum_to_one():
    p = nn.softmax(rng(3).standard_normal((50, 4)).astype(np.float32) * 20)
    assert np.all(np.abs(p.sum(axis=1) - 1) < 1e-6)
    assert ((p >= 0) & (p <= 1)).all()


def test_sparse_cce_examples():
    loss, _ = nn.sparse_cce(np.eye(3), [0, 1, 2])
    assert loss == 0.0
    loss, _ = nn.sparse_cce(np.full((4, 3), 1 / 3), [0, 1, 2, 0])
    assert abs(loss - 1.098612) < 1e-6
    loss, grad = nn.sparse_cce(np.array([[0.7, 0.2, 0.1]]), [0])
    assert abs(loss - 0.356675) < 1e-6
    assert np.allclose(grad, [[-0.3, 0.2, 0.1]])


def test_sparse_cce_clips_and_validates():
    loss, _ = nn.sparse_cce(np.array([[1.0, 0.0]]), [1])
    assert abs(loss - (-math.log(1e-12))) < 1e-9
    with pytest.raises(DataError):
        nn.sparse_cce(np.full((1, 3), 1 / 3), [3])
    with pytest.raises(ShapeError):
        nn.sparse_cce(np.full((2, 3), 1 / 3), [0])


def test_softmax_cce_gradient_finite_difference():
    r = rng(7)
    z = r.standard_normal((4, 3))
    labels = np.array([0, 2, 1, 2])
    _, g = nn.sparse_cce(nn.softmax(z), labels)
    n = numeric_grad(lambda: nn.sparse_cce(nn.softmax(z), labels)[0], z)
    assert rel_error(g.ravel(), n) < 1e-8


# layers -----------------------------------------------------------------------

LAYERS = [
    (nn.Conv2D(3, 4, 1), (6, 6, 3)),
    (nn.Conv2D(2, 3, 3), (6, 5, 2)),
    (nn.Conv2D(3, 2, 3, "none"), (4, 4, 3)),
    (nn.MaxPool2(), (6, 6, 3)),
    (nn.Flatten(), (4, 4, 2)),
    (nn.Dense(12, 5, "relu"), (12,)),
    (nn.Dense(12, 5, "none"), (12,)),
    (nn.Dense(8, 3, "softmax"), (8,)),
]


@pytest.mark.parametrize("layer,shape", LAYERS, ids=lambda v: getattr(v, "kind", str(v)))
def test_layer_gradients_float64(layer, shape):
    assert check_layer(layer, shape, rng(11)) < 1e-5


@pytest.mark.parametrize("layer,shape", LAYERS[:1] + LAYERS[5:6], ids=["conv", "dense"])
def test_layer_gradients_float32(layer, shape):
    r = rng(12)
    params = layer.init_params(r, np.float32)
    x = r.standard_normal((2,) + shape).astype(np.float32)
    out, cache = layer.forward(params, x)
    up = r.standard_normal(out.shape).astype(np.float32)
    gx, _ = layer.backward(params, cache, up)
    x64 = x.astype(np.float64)
    p64 = [p.astype(np.float64) for p in params]
    n = numeric_grad(lambda: float(np.sum(layer.forward(p64, x64)[0] * up)), x64)
    assert rel_error(gx.ravel(), n) < 1e-3


@pytest.mark.parametrize("k", [1, 3])
def test_composed_model_gradients(k):
    worst, compared, skipped = check_model(rng(21 + k), k)
    assert worst < 1e-5
    assert skipped < compared // 4


def test_param_counts():
    assert nn.param_count(nn.Conv2D(1, 64, 1)) == 128
    assert nn.param_count(nn.Dense(32768, 128)) == 4194432
    assert nn.param_count(nn.Conv2D(64, 128, 1)) == 8320
    assert nn.param_count(nn.MaxPool2()) == 0 and nn.param_count(nn.Flatten()) == 0


def test_glorot_limits():
    w = nn.glorot_uniform(rng(), (200, 100), 200, 100)
    assert np.abs(w).max() <= math.sqrt(6 / 300)
    assert nn.Dense(3, 2).init_params(rng())[1].tolist() == [0, 0]


def test_training_loss_strictly_decreases_on_toy_problem():
    r = rng(5)
    x = np.concatenate([r.normal(-2, 0.5, (20, 2)), r.normal(2, 0.5, (20, 2))])
    y = np.array([0] * 20 + [1] * 20)
    layer = nn.Dense(2, 2, "softmax")
    params = layer.init_params(r, np.float64)
    state = nn.AdamState.fresh(params, lr=0.05)
    losses = []
    for _ in range(20):
        probs, cache = layer.forward(params, x)
        loss, g = nn.sparse_cce(probs, y)
        losses.append(loss)
        _, grads = layer.backward(params, cache, g)
        nn.adam_step(params, grads, state)
    assert all(b < a for a, b in zip(losses, losses[1:]))


# Adam -------------------------------------------------------------------------

def adam_oracle(theta, grads, lr=1e-3, b1=0.9, b2=0.999, eps=1e-7):
    m = v = 0.0
    out = []
    for t, g in enumerate(grads, 1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mhat = m / (1 - b1 ** t)
        vhat = v / (1 - b2 ** t)
        theta = theta - lr * mhat / (math.sqrt(vhat) + eps)
        out.append(theta)
    return out


def test_adam_zero_gradient_is_noop():
    p = [rng().standard_normal((3, 2))]
    before = p[0].copy()
    nn.adam_step(p, [np.zeros((3, 2))], nn.AdamState())
    assert np.array_equal(p[0], before)


def test_adam_first_step():
    p = [np.array([0.0])]
    state = nn.AdamState()
    nn.adam_step(p, [np.array([1.0])], state)
    assert state.t == 1
    assert abs(p[0][0] - (-0.001 / (1 + 1e-7))) < 1e-15


def test_adam_matches_scalar_oracle():
    p = [np.array([0.5])]
    state = nn.AdamState()
    got = []
    for _ in range(10):
        nn.adam_step(p, [np.array([1.0])], state)
        got.append(p[0][0])
    want = adam_oracle(0.5, [1.0] * 10)
    assert all(abs(a - b) < 1e-12 for a, b in zip(got, want))
    assert all(b < a for a, b in zip(got, got[1:]))
    gs = list(rng(9).standard_normal(25))
    p = [np.array([0.1])]
    state = nn.AdamState(lr=0.01)
    traj = []
    for g in gs:
        nn.adam_step(p, [np.array([g])], state)
        traj.append(p[0][0])
    assert max(abs(a - b) for a, b in zip(traj, adam_oracle(0.1, gs, lr=0.01))) < 1e-12


def test_adam_lr_zero_is_identity():
    p = [rng().standard_normal(4)]
    before = p[0].copy()
    state = nn.AdamState(lr=0.0)
    for _ in range(3):
        nn.adam_step(p, [rng(1).standard_normal(4)], state)
    assert np.array_equal(p[0], before) and state.t == 3


def test_adam_rejects_non_finite():
    with pytest.raises(NumericFault):
        nn.adam_step([np.zeros(2)], [np.array([1.0, np.nan])], nn.AdamState())
    with pytest.raises(ShapeError):
        nn.adam_step([np.zeros(2)], [np.zeros(3)], nn.AdamState())
