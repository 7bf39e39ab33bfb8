"""Dense kernels against scipy and loop oracles."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import signal, special

from fusiondet.numerics import (
    LinearParams,
    MlpParams,
    OracleError,
    ShapeError,
    conv2d,
    conv_transpose2d,
    finite_diff_grad,
    init_linear,
    init_mlp,
    linear_backward,
    linear_forward,
    matmul,
    mlp_backward,
    mlp_forward,
    relative_error,
    relu,
    sigmoid,
    softmax,
    stable_softmax,
    zeros_mlp,
)
from oracles import naive_conv2d, naive_conv_transpose2d


def test_matmul_hand_value():
    out = matmul([[1.0, 2.0], [3.0, 4.0]], [[5.0, 6.0], [7.0, 8.0]])
    assert np.array_equal(out, [[19.0, 22.0], [43.0, 50.0]])


def test_matmul_rejects_bad_shapes():
    with pytest.raises(ShapeError):
        matmul(np.ones((2, 3)), np.ones((2, 3)))
    with pytest.raises(ShapeError):
        matmul(np.ones(3), np.ones((3, 2)))


def test_matmul_rejects_nonfinite():
    with pytest.raises(ValueError):
        matmul(np.array([[np.nan, 1.0]]), np.ones((2, 1)))


def test_softmax_matches_scipy():
    rng = np.random.default_rng(0)
    for _ in range(20):
        v = rng.normal(scale=5.0, size=rng.integers(1, 12))
        temp = float(rng.uniform(0.05, 3.0))
        assert np.allclose(softmax(v, temp), special.softmax(v / temp), atol=1e-12)


def test_softmax_extreme_logits_stay_finite():
    out = softmax(np.array([1e4, 0.0, -1e4]))
    assert np.all(np.isfinite(out)) and abs(out.sum() - 1.0) < 1e-12


def test_softmax_validation():
    with pytest.raises(ShapeError):
        softmax(np.ones((2, 2)))
    with pytest.raises(ValueError):
        softmax(np.ones(3), temperature=0.0)


def test_stable_softmax_matches_scipy_on_axes():
    rng = np.random.default_rng(1)
    x = rng.normal(scale=50.0, size=(4, 5, 6))
    for axis in (0, 1, 2, -1):
        assert np.allclose(stable_softmax(x, axis=axis), special.softmax(x, axis=axis))


def test_relu_and_sigmoid():
    x = np.array([-2.0, 0.0, 3.0, -800.0, 800.0])
    assert np.array_equal(relu(x), [0.0, 0.0, 3.0, 0.0, 800.0])
    s = sigmoid(x)
    assert np.all(np.isfinite(s))
    assert np.allclose(s[:3], special.expit(x[:3]), atol=1e-15)
    assert s[3] == pytest.approx(0.0, abs=1e-300) and s[4] == pytest.approx(1.0)


def test_linear_params_validation():
    with pytest.raises(ShapeError):
        LinearParams(np.ones((2, 3)), np.ones(3))
    with pytest.raises(ShapeError):
        MlpParams(
            LinearParams(np.ones((2, 3)), np.ones(2)),
            LinearParams(np.ones((4, 3)), np.ones(4)),
        )


def test_linear_forward_broadcasts_leading_axes():
    p = LinearParams(np.array([[1.0, 2.0], [0.0, -1.0]]), np.array([0.5, 0.0]))
    x = np.arange(12, dtype=np.float64).reshape(2, 3, 2)
    out = linear_forward(p, x)
    assert out.shape == (2, 3, 2)
    assert np.allclose(out[1, 2], p.weight @ x[1, 2] + p.bias)


def test_linear_backward_matches_finite_differences():
    rng = np.random.default_rng(2)
    p = init_linear(rng, 3, 4)
    x = rng.normal(size=(5, 4))
    dout = rng.normal(size=(5, 3))
    dw, db, dx = linear_backward(p, x, dout)

    def loss_wrt_x(flat):
        return float(np.sum(linear_forward(p, flat.reshape(5, 4)) * dout))

    assert relative_error(dx, finite_diff_grad(loss_wrt_x, x.ravel()).reshape(5, 4)) < 1e-6

    def loss_wrt_w(flat):
        q = LinearParams(flat.reshape(3, 4), p.bias)
        return float(np.sum(linear_forward(q, x) * dout))

    assert relative_error(dw, finite_diff_grad(loss_wrt_w, p.weight.ravel()).reshape(3, 4)) < 1e-6
    assert np.allclose(db, dout.sum(axis=0))


def test_mlp_backward_matches_finite_differences():
    rng = np.random.default_rng(3)
    p = init_mlp(rng, 4, 6, 2)
    x = rng.normal(size=(3, 4))
    dout = rng.normal(size=(3, 2))
    (dw1, db1), (dw2, db2), dx = mlp_backward(p, x, dout)

    def loss(flat):
        return float(np.sum(mlp_forward(p, flat.reshape(3, 4)) * dout))

    assert relative_error(dx, finite_diff_grad(loss, x.ravel()).reshape(3, 4)) < 1e-5
    assert dw1.shape == p.first.weight.shape and dw2.shape == p.second.weight.shape
    assert db1.shape == p.first.bias.shape and db2.shape == p.second.bias.shape


def test_zeros_mlp_is_identically_zero():
    p = zeros_mlp(3, 5, 2)
    assert np.array_equal(mlp_forward(p, np.ones((4, 3))), np.zeros((4, 2)))


@settings(max_examples=30, deadline=None)
@given(
    c=st.integers(1, 3),
    c_out=st.integers(1, 3),
    h=st.integers(3, 8),
    w=st.integers(3, 8),
    k=st.integers(1, 3),
    stride=st.integers(1, 2),
    padding=st.integers(0, 1),
    seed=st.integers(0, 10_000),
)
def test_conv2d_matches_loop_oracle(c, c_out, h, w, k, stride, padding, seed):
    if h + 2 * padding < k or w + 2 * padding < k:
        return
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(c, h, w))
    kern = rng.normal(size=(c_out, c, k, k))
    assert np.allclose(
        conv2d(x, kern, stride=stride, padding=padding),
        naive_conv2d(x, kern, stride=stride, padding=padding),
        atol=1e-10,
    )


def test_conv2d_matches_scipy_correlate():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(2, 9, 7))
    kern = rng.normal(size=(3, 2, 3, 3))
    out = conv2d(x, kern, stride=1, padding=0)
    for o in range(3):
        ref = sum(signal.correlate2d(x[ci], kern[o, ci], mode="valid") for ci in range(2))
        assert np.allclose(out[o], ref, atol=1e-10)


def test_conv2d_validation():
    with pytest.raises(ShapeError):
        conv2d(np.ones((2, 4, 4)), np.ones((1, 3, 2, 2)))
    with pytest.raises(ShapeError):
        conv2d(np.ones((1, 2, 2)), np.ones((1, 1, 4, 4)))


@settings(max_examples=30, deadline=None)
@given(
    c=st.integers(1, 3),
    c_out=st.integers(1, 3),
    h=st.integers(1, 5),
    w=st.integers(1, 5),
    k=st.integers(1, 3),
    stride=st.integers(1, 3),
    seed=st.integers(0, 10_000),
)
def test_conv_transpose2d_matches_loop_oracle(c, c_out, h, w, k, stride, seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(c, h, w))
    kern = rng.normal(size=(c, c_out, k, k))
    assert np.allclose(
        conv_transpose2d(x, kern, stride),
        naive_conv_transpose2d(x, kern, stride),
        atol=1e-10,
    )


def test_conv_transpose2d_is_adjoint_of_conv2d():
    # <conv(x), y> == <x, conv_T(y)> pins both layouts to each other
    rng = np.random.default_rng(5)
    x = rng.normal(size=(2, 6, 8))
    kern = rng.normal(size=(3, 2, 2, 2))  # conv layout [C',C,kh,kw]
    y = rng.normal(size=conv2d(x, kern, stride=2).shape)
    lhs = float(np.sum(conv2d(x, kern, stride=2) * y))
    rhs = float(np.sum(x * conv_transpose2d(y, kern, stride=2)))
    assert lhs == pytest.approx(rhs, rel=1e-12)


def test_conv_transpose2d_kernel_equal_stride_upsamples_blockwise():
    x = np.array([[[1.0, 2.0], [3.0, 4.0]]])
    kern = np.ones((1, 1, 2, 2))
    out = conv_transpose2d(x, kern, stride=2)
    assert out.shape == (1, 4, 4)
    assert np.array_equal(out[0], np.kron(x[0], np.ones((2, 2))))


def test_finite_diff_grad_on_cubic():
    x = np.array([0.5, -1.2, 2.0])
    grad = finite_diff_grad(lambda v: float(np.sum(v**3)), x)
    assert relative_error(3.0 * x**2, grad) < 1e-7


def test_finite_diff_grad_step_bounds():
    f = lambda v: float(np.sum(v))
    with pytest.raises(ValueError):
        finite_diff_grad(f, np.ones(2), h=1e-8)
    with pytest.raises(ValueError):
        finite_diff_grad(f, np.ones(2), h=1e-2)


def test_finite_diff_grad_rejects_nonfinite_probe():
    with pytest.raises(OracleError):
        finite_diff_grad(lambda v: float(np.log(v[0])), np.array([1e-9]))


def test_relative_error_denominator_floor():
    # both magnitudes below the floor: |0 - 1e-9| / 1e-8
    assert relative_error(np.zeros(1), np.array([1e-9])) == pytest.approx(0.1)
    assert relative_error(np.ones(3), np.ones(3)) == 0.0
    with pytest.raises(ShapeError):
        relative_error(np.ones(2), np.ones(3))
