import zlib

import numpy as np
import pytest

from osuda import tensor as T
from osuda.errors import ShapeError

from fdcheck import numeric_grads, rel_error
from primitives import CASES, check_case


def test_relu_values():
    assert T.relu(T.Tensor([-1.0, 0.0, 2.0])).data.tolist() == [0.0, 0.0, 2.0]


def test_softmax_of_equal_logits_is_uniform():
    x = T.Tensor(np.full((1, 4, 1, 1), 3.7))
    np.testing.assert_array_equal(T.softmax(x).data.ravel(), [0.25] * 4)


def test_grad_of_sum_of_squares():
    x = T.Tensor([1.0, 2.0, 3.0], requires_grad=True)
    T.tsum(x * x).backward()
    np.testing.assert_allclose(x.grad, [2.0, 4.0, 6.0])
    arr = np.array([1.0, 2.0, 3.0])
    (num,) = numeric_grads(lambda: float((arr ** 2).sum()), [arr])
    np.testing.assert_allclose(num, [2.0, 4.0, 6.0], rtol=1e-8)


def test_mean_grad_is_uniform():
    x = T.Tensor(np.arange(4.0), requires_grad=True)
    T.tmean(x).backward()
    np.testing.assert_array_equal(x.grad, [0.25] * 4)


def test_relu_mask_grad():
    x = T.Tensor([-1.0, 2.0], requires_grad=True)
    T.tsum(T.relu(x)).backward()
    np.testing.assert_array_equal(x.grad, [0.0, 1.0])


def test_backward_needs_scalar():
    x = T.Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ShapeError):
        (x * 2.0).backward()


def test_second_backward_on_same_graph_fails():
    x = T.Tensor(np.ones(3), requires_grad=True)
    loss = T.tsum(x * x)
    loss.backward()
    x.grad = None
    with pytest.raises(RuntimeError):
        loss.backward()


def test_backward_refuses_stale_leaf_grad():
    x = T.Tensor(np.ones(3), requires_grad=True)
    T.tsum(x).backward()
    with pytest.raises(RuntimeError, match="zero_grad"):
        T.tsum(x * 3.0).backward()
    T.zero_grad([x])
    T.tsum(x * 3.0).backward()
    np.testing.assert_array_equal(x.grad, [3.0] * 3)


def test_reused_node_accumulates():
    x = T.Tensor([1.5, -2.0], requires_grad=True)
    y = x * x
    T.tsum(y + y * 2.0).backward()
    np.testing.assert_allclose(x.grad, 6 * x.data)


@pytest.mark.parametrize(
    "a_shape,b_shape",
    [((1, 2, 3, 3), (1, 2, 3, 4)), ((2, 3), (3,)), ((1, 2, 3, 3), (1, 3, 1, 1)), ((1, 2, 1, 3), (1, 2, 1, 2))],
)
def test_shape_mismatch_names_both_shapes(a_shape, b_shape):
    with pytest.raises(ShapeError) as err:
        T.mul(T.Tensor(np.ones(a_shape)), T.Tensor(np.ones(b_shape)))
    assert str(a_shape) in str(err.value) and str(b_shape) in str(err.value)


def test_channel_vector_broadcast():
    x = T.Tensor(np.arange(8.0).reshape(1, 2, 2, 2))
    v = T.Tensor(np.array([10.0, 20.0]).reshape(1, 2, 1, 1))
    out = (x + v).data
    np.testing.assert_array_equal(out[0, 0], x.data[0, 0] + 10)
    np.testing.assert_array_equal(out[0, 1], x.data[0, 1] + 20)


def test_conv_matches_direct_loop(rng):
    x = rng.normal(size=(2, 3, 7, 6))
    w = rng.normal(size=(4, 3, 3, 3))
    b = rng.normal(size=4)
    for stride, pad in [(1, 0), (1, 1), (2, 1), (2, 0)]:
        got = T.conv2d(T.Tensor(x), T.Tensor(w), T.Tensor(b), stride=stride, padding=pad).data
        xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
        ho = (x.shape[2] + 2 * pad - 3) // stride + 1
        wo = (x.shape[3] + 2 * pad - 3) // stride + 1
        want = np.zeros((2, 4, ho, wo))
        for n in range(2):
            for o in range(4):
                for i in range(ho):
                    for j in range(wo):
                        win = xp[n, :, i * stride:i * stride + 3, j * stride:j * stride + 3]
                        want[n, o, i, j] = (win * w[o]).sum() + b[o]
        np.testing.assert_allclose(got, want, atol=1e-12)


def test_conv_channel_mismatch():
    with pytest.raises(ShapeError):
        T.conv2d(T.Tensor(np.ones((1, 3, 4, 4))), T.Tensor(np.ones((2, 2, 3, 3))))


def test_no_grad_records_nothing():
    x = T.Tensor(np.ones(3), requires_grad=True)
    with T.no_grad():
        y = x * 2.0
    assert not y.requires_grad and y.is_leaf
    assert T.is_grad_enabled()


def test_upsample_nearest_is_forward_only():
    x = T.Tensor(np.arange(4.0).reshape(1, 1, 2, 2), requires_grad=True)
    up = T.upsample_nearest(x, 2)
    assert up.shape == (1, 1, 4, 4) and not up.requires_grad
    np.testing.assert_array_equal(up.data[0, 0, :2, :2], 0.0)


def test_determinism_bitwise():
    def run():
        r = np.random.default_rng(7)
        x = T.Tensor(r.normal(size=(1, 3, 9, 9)), requires_grad=True)
        w = T.Tensor(r.normal(size=(4, 3, 3, 3)), requires_grad=True)
        y = T.softmax(T.relu(T.conv2d(x, w, stride=2, padding=1)))
        loss = T.tsum(T.log(y))
        loss.backward()
        return y.data.tobytes() + x.grad.tobytes() + w.grad.tobytes()

    assert run() == run()


@pytest.mark.parametrize("name", sorted(CASES))
def test_primitive_gradients_match_finite_differences(name):
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    worst = max(check_case(CASES[name], rng) for _ in range(20))
    assert worst < 1e-4


def test_composite_gradient():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(1, 2, 5, 5))
    w = rng.normal(size=(3, 2, 3, 3))

    def build(xt, wt):
        h = T.conv2d(xt, wt, stride=1, padding=1)
        mu, sd = T.channel_mean(h), T.channel_std(h)
        z = (h - mu) / sd
        return T.tsum(T.log(T.clip_min(T.softmax(z), 1e-12)))

    leaves = [T.Tensor(x, requires_grad=True), T.Tensor(w, requires_grad=True)]
    build(*leaves).backward()
    num = numeric_grads(lambda: build(T.Tensor(x), T.Tensor(w)).item(), [x, w])
    assert rel_error(leaves[0].grad, num[0]) < 1e-4
    assert rel_error(leaves[1].grad, num[1]) < 1e-4
