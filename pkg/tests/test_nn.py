import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import central_difference, rel_err
from twrmcae.core import make_rng
from twrmcae.nn import (
    conv2d_backward,
    conv2d_forward,
    conv_transpose2d_backward,
    conv_transpose2d_forward,
    identity_kernel,
    linear_backward,
    linear_forward,
    maxpool_backward,
    maxpool_forward,
    resize2d,
    resize2d_backward,
    sigmoid,
    softplus,
)


def conv_loops(x, w, b, stride, pad):
    B, C, H, W = x.shape
    O, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    Ho = (H + 2 * pad - kh) // stride + 1
    Wo = (W + 2 * pad - kw) // stride + 1
    out = np.zeros((B, O, Ho, Wo))
    for n in range(B):
        for o in range(O):
            for i in range(Ho):
                for j in range(Wo):
                    patch = xp[n, :, i * stride : i * stride + kh, j * stride : j * stride + kw]
                    out[n, o, i, j] = np.sum(patch * w[o]) + b[o]
    return out


@pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 0), (2, 2)])
def test_conv_matches_loops(stride, pad):
    rng = make_rng(stride, pad)
    x = rng.standard_normal((2, 3, 9, 8))
    w = rng.standard_normal((4, 3, 3, 3))
    b = rng.standard_normal(4)
    out, _ = conv2d_forward(x, w, b, stride, pad)
    np.testing.assert_allclose(out, conv_loops(x, w, b, stride, pad), atol=1e-12)


def test_conv_backward_fd():
    rng = make_rng(5)
    x = rng.standard_normal((2, 2, 6, 6))
    w = rng.standard_normal((3, 2, 3, 3))
    b = rng.standard_normal(3)
    up = rng.standard_normal((2, 3, 3, 3))
    out, cache = conv2d_forward(x, w, b, 2, 1)
    dx, dw, db = conv2d_backward(up, cache)
    f = lambda xx, ww, bb: float(np.sum(conv2d_forward(xx, ww, bb, 2, 1)[0] * up))
    assert rel_err(dx, central_difference(lambda v: f(v, w, b), x)) < 1e-7
    assert rel_err(dw, central_difference(lambda v: f(x, v, b), w)) < 1e-7
    assert rel_err(db, central_difference(lambda v: f(x, w, v), b)) < 1e-7


def test_conv_transpose_is_adjoint_of_conv():
    rng = make_rng(6)
    x = rng.standard_normal((1, 3, 5, 5))
    y = rng.standard_normal((1, 3, 5, 5))
    w = rng.standard_normal((3, 3, 3, 3))
    zero = np.zeros(3)
    cy, _ = conv2d_forward(y, w, zero, 1, 1)
    tx, _ = conv_transpose2d_forward(x, w, zero, 1)
    assert abs(np.sum(cy * x) - np.sum(y * tx)) < 1e-10


def test_conv_transpose_backward_fd():
    rng = make_rng(7)
    x = rng.standard_normal((2, 2, 4, 4))
    w = rng.standard_normal((2, 2, 3, 3))
    b = rng.standard_normal(2)
    up = rng.standard_normal((2, 2, 4, 4))
    _, cache = conv_transpose2d_forward(x, w, b, 1)
    dx, dw, db = conv_transpose2d_backward(up, cache)
    f = lambda xx, ww, bb: float(np.sum(conv_transpose2d_forward(xx, ww, bb, 1)[0] * up))
    assert rel_err(dx, central_difference(lambda v: f(v, w, b), x)) < 1e-7
    assert rel_err(dw, central_difference(lambda v: f(x, v, b), w)) < 1e-7
    assert rel_err(db, central_difference(lambda v: f(x, w, v), b)) < 1e-7


def test_identity_kernels_pass_through():
    x = make_rng(8).standard_normal((2, 3, 6, 5))
    k = identity_kernel(3)
    np.testing.assert_array_equal(conv2d_forward(x, k, np.zeros(3), 1, 1)[0], x)
    np.testing.assert_array_equal(conv_transpose2d_forward(x, k, np.zeros(3), 1)[0], x)


def test_maxpool_values_and_first_max_routing():
    x = np.arange(25.0).reshape(1, 1, 5, 5)
    out, cache = maxpool_forward(x, 3, 2)
    np.testing.assert_array_equal(out[0, 0], [[12, 14], [22, 24]])
    tie = np.zeros((1, 1, 3, 3))
    _, c = maxpool_forward(tie, 3, 2)
    d = maxpool_backward(np.ones((1, 1, 1, 1)), c)
    assert d[0, 0, 0, 0] == 1.0 and d.sum() == 1.0


def test_maxpool_backward_fd():
    x = make_rng(9).standard_normal((2, 2, 7, 7))
    up = make_rng(10).standard_normal((2, 2, 3, 3))
    _, cache = maxpool_forward(x, 3, 2)
    dx = maxpool_backward(up, cache)
    num = central_difference(lambda v: float(np.sum(maxpool_forward(v, 3, 2)[0] * up)), x)
    assert rel_err(dx, num) < 1e-7


def test_linear_backward_fd():
    rng = make_rng(11)
    x, w, b = rng.standard_normal((3, 5)), rng.standard_normal((4, 5)), rng.standard_normal(4)
    up = rng.standard_normal((3, 4))
    _, cache = linear_forward(x, w, b)
    dx, dw, db = linear_backward(up, cache)
    f = lambda xx, ww, bb: float(np.sum(linear_forward(xx, ww, bb)[0] * up))
    assert rel_err(dx, central_difference(lambda v: f(v, w, b), x)) < 1e-7
    assert rel_err(dw, central_difference(lambda v: f(x, v, b), w)) < 1e-7


@given(st.integers(1, 40), st.integers(1, 40), st.integers(1, 40), st.integers(1, 40))
def test_resize_preserves_constants_and_is_adjoint(h0, w0, h1, w1):
    c = np.full((1, h0, w0), 0.37)
    np.testing.assert_allclose(resize2d(c, h1, w1), 0.37, atol=1e-14)
    rng = make_rng(h0, w0, h1, w1)
    x = rng.standard_normal((1, h0, w0))
    y = rng.standard_normal((1, h1, w1))
    assert abs(np.sum(resize2d(x, h1, w1) * y) - np.sum(x * resize2d_backward(y, (h0, w0)))) < 1e-10


def test_sigmoid_and_softplus_stable():
    x = np.array([-800.0, -40.0, 0.0, 40.0, 800.0])
    s = sigmoid(x)
    assert np.all(np.isfinite(s)) and s[2] == 0.5 and s[-1] == 1.0
    assert sigmoid(np.array(40.0)) == 1.0
    sp = softplus(x)
    assert sp[2] == np.log(2.0) and sp[-1] == 800.0 and np.all(sp >= 0)
