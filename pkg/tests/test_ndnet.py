import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from denoiserlab import ndnet
from denoiserlab.ndnet import Tape, Tensor


def loop_conv(x, w, b=None):
    """Direct zero-padded 'same' cross-correlation by nested loops."""
    B, C, H, W = x.shape
    O, _, K, _ = w.shape
    p = K // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    out = np.zeros((B, O, H, W))
    for n in range(B):
        for o in range(O):
            for i in range(H):
                for j in range(W):
                    out[n, o, i, j] = (xp[n, :, i:i + K, j:j + K] * w[o]).sum()
    if b is not None:
        out += b.reshape(1, -1, 1, 1)
    return out


def test_backward_visits_reverse_execution_order():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    with Tape() as tape:
        y = ndnet.square(x)
        z = ndnet.mul(y, 3.0)
        s = ndnet.sum(z)
    visited = tape.backward(s)
    assert visited == ["sum", "mul", "square"]
    assert [n.op for n in tape.nodes] == ["square", "mul", "sum"]
    np.testing.assert_allclose(x.grad, 6 * x.data)


def test_backward_overwrites_previous_grad():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    for _ in range(2):
        with Tape() as tape:
            s = ndnet.sum(ndnet.square(x))
        tape.backward(s)
    np.testing.assert_allclose(x.grad, 2 * x.data)


def test_no_tape_no_record():
    x = Tensor(np.ones(3), requires_grad=True)
    y = ndnet.square(x)
    with Tape() as tape:
        pass
    assert tape.nodes == [] and y.requires_grad


def test_nonscalar_backward_needs_seed():
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        y = ndnet.square(x)
    with pytest.raises(ndnet.ContractError):
        tape.backward(y)
    tape.backward(y, seed_grad=np.array([1.0, 0.0, 2.0]))
    np.testing.assert_allclose(x.grad, [2.0, 0.0, 4.0])


def test_broadcast_add_grad_reduces():
    a = Tensor(np.ones((2, 3)), requires_grad=True)
    b = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        s = ndnet.sum(ndnet.mul(ndnet.add(a, b), 2.0))
    tape.backward(s)
    np.testing.assert_allclose(b.grad, [4.0, 4.0, 4.0])
    np.testing.assert_allclose(a.grad, np.full((2, 3), 2.0))


def test_conv_matches_loop_reference():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((2, 3, 6, 5))
    w = rng.standard_normal((4, 3, 3, 3))
    b = rng.standard_normal(4)
    with ndnet.precision(np.float64):
        out = ndnet.conv2d(Tensor(x), Tensor(w), Tensor(b)).data
    np.testing.assert_allclose(out, loop_conv(x, w, b), atol=1e-12)


def test_single_3x3_impulse_response_is_flipped_kernel():
    w = np.arange(9, dtype=np.float64).reshape(1, 1, 3, 3)
    x = np.zeros((1, 1, 5, 5))
    x[0, 0, 2, 2] = 1
    out = ndnet.conv2d(Tensor(x), Tensor(w)).data[0, 0]
    np.testing.assert_array_equal(out[1:4, 1:4], w[0, 0, ::-1, ::-1])
    assert np.count_nonzero(out) == 8  # weight 0 sits at one corner


def test_conv_shape_errors():
    with pytest.raises(ndnet.ShapeError):
        ndnet.conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))))
    with pytest.raises(ndnet.ShapeError):
        ndnet.conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 2, 2, 2))))


@pytest.mark.parametrize("op", ["conv", "layer_norm", "pool", "upsample", "concat", "mean"])
def test_grad_check_primitives(op):
    rng = np.random.default_rng(1)
    with ndnet.precision(np.float64):
        w = Tensor(rng.standard_normal((2, 2, 3, 3)))
        g = Tensor(rng.uniform(0.5, 1.5, 2))
        b = Tensor(rng.standard_normal(2))
        other = Tensor(rng.standard_normal((1, 1, 4, 4)))
        coef = rng.standard_normal((1, 3, 4, 4))
        coef8 = rng.standard_normal((1, 2, 8, 8))
        fns = {
            "conv": lambda x: ndnet.sum(ndnet.square(ndnet.conv2d(x, w, b))),
            "layer_norm": lambda x: ndnet.sum(ndnet.mul(ndnet.layer_norm(x, g, b), coef[:, :2])),
            "pool": lambda x: ndnet.sum(ndnet.square(ndnet.avg_pool2(x))),
            "upsample": lambda x: ndnet.sum(ndnet.mul(ndnet.upsample_nearest2(x), coef8)),
            "concat": lambda x: ndnet.sum(ndnet.mul(ndnet.concat([x, other]), coef[:, :3])),
            "mean": lambda x: ndnet.sum(ndnet.square(ndnet.spatial_mean(x))),
        }
        shape = (1, 2, 4, 4)
        res = ndnet.grad_check(fns[op], rng.standard_normal(shape), step=1e-6)
    assert res.n_kinks == 0
    assert res.max_rel_error < 1e-6


def test_grad_check_counts_relu_kinks():
    x = np.array([[-1e-8, 0.5, -0.3, 2e-7]])
    with ndnet.precision(np.float64):
        res = ndnet.grad_check(lambda t: ndnet.sum(ndnet.square(ndnet.relu(t))), x, step=1e-6)
    assert res.n_kinks == 2 and res.n_checked == 2
    assert res.max_rel_error < 1e-8


def test_grad_check_requires_float64_and_step_range():
    with pytest.raises(ndnet.ContractError):
        ndnet.grad_check(lambda t: ndnet.sum(t), np.ones(2))
    with ndnet.precision(np.float64):
        with pytest.raises(ndnet.ContractError):
            ndnet.grad_check(lambda t: ndnet.sum(t), np.ones(2), step=1e-2)


def test_layer_norm_statistics():
    rng = np.random.default_rng(2)
    x = Tensor(rng.standard_normal((3, 4, 5, 5)) * 7 + 2)
    y = ndnet.layer_norm(x, Tensor(np.ones(4)), Tensor(np.zeros(4))).data
    np.testing.assert_allclose(y.reshape(3, -1).mean(1), 0, atol=1e-5)
    np.testing.assert_allclose(y.reshape(3, -1).std(1), 1, atol=1e-3)


def test_precision_context_restores_dtype():
    assert ndnet.default_dtype() is np.float32
    with ndnet.precision(np.float64):
        assert ndnet.as_tensor([1.0]).dtype == np.float64
    assert ndnet.as_tensor([1.0]).dtype == np.float32


@settings(max_examples=25, deadline=None)
@given(arrays(np.float64, (2, 3), elements=st.floats(-5, 5)),
       arrays(np.float64, (2, 3), elements=st.floats(-5, 5)))
def test_sub_mul_gradients_property(a, b):
    ta, tb = Tensor(a, requires_grad=True), Tensor(b, requires_grad=True)
    with Tape() as tape:
        s = ndnet.sum(ndnet.mul(ndnet.sub(ta, tb), tb))
    tape.backward(s)
    np.testing.assert_allclose(ta.grad, b)
    np.testing.assert_allclose(tb.grad, a - 2 * b)


@settings(max_examples=20, deadline=None)
@given(arrays(np.float64, (1, 2, 4, 4), elements=st.floats(-3, 3)))
def test_relu_nonnegative_and_pool_preserves_mean(x):
    r = ndnet.relu(Tensor(x)).data
    assert (r >= 0).all()
    p = ndnet.avg_pool2(Tensor(x)).data
    np.testing.assert_allclose(p.mean(axis=(2, 3)), x.mean(axis=(2, 3)), atol=1e-12)
