import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pap import tensor as T

from conftest import central_diff, rel_err

N_INSTANCES = 20
OP_TOL = 1e-6


def naive_conv(x, k, stride, padding):
    b, c, h, w = x.shape
    o, _, kh, kw = k.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    out = np.zeros((b, o, ho, wo))
    for n in range(b):
        for oc in range(o):
            for i in range(ho):
                for j in range(wo):
                    s = 0.0
                    for ic in range(c):
                        for u in range(kh):
                            for v in range(kw):
                                s += xp[n, ic, i * stride + u, j * stride + v] * k[oc, ic, u, v]
                    out[n, oc, i, j] = s
    return out


# -- conv2d forward --------------------------------------------------------


def test_conv_ones():
    out = T.conv2d(np.ones((1, 1, 3, 3)), np.ones((1, 1, 2, 2)))
    assert out.shape == (1, 1, 2, 2)
    assert np.all(out == 4.0)


def test_conv_identity_kernel(rng):
    x = rng.standard_normal((2, 1, 5, 4))
    assert np.array_equal(T.conv2d(x, np.ones((1, 1, 1, 1))), x)


@pytest.mark.parametrize("stride,padding", [(1, 0), (2, 1), (1, 2), (3, 0), (2, 2)])
def test_conv_matches_loop_oracle(rng, stride, padding):
    x = rng.standard_normal((2, 3, 8, 8))
    k = rng.standard_normal((4, 3, 3, 3))
    assert np.abs(T.conv2d(x, k, stride, padding) - naive_conv(x, k, stride, padding)).max() < 1e-10


@settings(max_examples=25, deadline=None)
@given(
    b=st.integers(1, 2),
    c=st.integers(1, 3),
    o=st.integers(1, 3),
    h=st.integers(3, 7),
    w=st.integers(3, 7),
    kh=st.integers(1, 3),
    kw=st.integers(1, 3),
    stride=st.integers(1, 3),
    padding=st.integers(0, 2),
    seed=st.integers(0, 2**16),
)
def test_conv_oracle_property(b, c, o, h, w, kh, kw, stride, padding, seed):
    r = np.random.default_rng(seed)
    x = r.standard_normal((b, c, h, w))
    k = r.standard_normal((o, c, kh, kw))
    assert np.abs(T.conv2d(x, k, stride, padding) - naive_conv(x, k, stride, padding)).max() < 1e-10


def test_conv_bias_and_shape_errors(rng):
    x = rng.standard_normal((1, 2, 4, 4))
    k = rng.standard_normal((3, 2, 3, 3))
    bias = np.array([1.0, 2.0, 3.0])
    assert np.allclose(T.conv2d(x, k, bias=bias) - T.conv2d(x, k), bias[None, :, None, None])
    with pytest.raises(T.DimensionError, match="channel"):
        T.conv2d(x, rng.standard_normal((3, 5, 3, 3)))
    with pytest.raises(T.DimensionError, match="larger"):
        T.conv2d(x, rng.standard_normal((1, 2, 6, 6)))
    with pytest.raises(T.DimensionError):
        T.conv2d(x[0], k)
    with pytest.raises(T.DimensionError, match="output_grad"):
        T.conv2d_backward(np.zeros((1, 3, 3, 3)), x, k)


def test_im2col_col2im_adjoint(rng):
    x = rng.standard_normal((2, 3, 7, 6))
    cols = T.im2col(x, 3, 2, 2, 1)
    c = rng.standard_normal(cols.shape)
    assert math.isclose(np.vdot(cols, c), np.vdot(x, T.col2im(c, x.shape, 3, 2, 2, 1)), rel_tol=1e-12)


def test_conv_dtype_preserved(rng):
    x = rng.standard_normal((1, 2, 5, 5)).astype(np.float32)
    k = rng.standard_normal((2, 2, 3, 3)).astype(np.float32)
    assert T.conv2d(x, k).dtype == np.float32
    assert T.conv2d(x.astype(np.float64), k.astype(np.float64)).dtype == np.float64


# -- conv2d backward ---------------------------------------------------------


def test_conv_backward_zero_grad(rng):
    x = rng.standard_normal((2, 2, 5, 5))
    k = rng.standard_normal((3, 2, 3, 3))
    g = T.conv2d_backward(np.zeros((2, 3, 3, 3)), x, k)
    assert not g.input_grad.any() and not g.param_grads["weight"].any()


def test_conv_backward_identity(rng):
    x = rng.standard_normal((2, 1, 4, 4))
    dout = rng.standard_normal((2, 1, 4, 4))
    assert np.array_equal(T.conv2d_backward(dout, x, np.ones((1, 1, 1, 1))).input_grad, dout)


@pytest.mark.parametrize("seed", range(N_INSTANCES))
def test_conv_backward_finite_differences(seed):
    r = np.random.default_rng(seed)
    stride, padding = [(1, 0), (2, 1), (1, 1), (2, 0)][seed % 4]
    x = r.standard_normal((2, 2, 5, 5))
    k = r.standard_normal((3, 2, 3, 3))

    def loss_x(xx):
        return 0.5 * np.sum(T.conv2d(xx, k, stride, padding) ** 2)

    def loss_k(kk):
        return 0.5 * np.sum(T.conv2d(x, kk, stride, padding) ** 2)

    out = T.conv2d(x, k, stride, padding)
    g = T.conv2d_backward(out, x, k, stride, padding)
    assert g.input_grad.shape == x.shape and g.param_grads["weight"].shape == k.shape
    assert rel_err(g.input_grad, central_diff(loss_x, x)) < OP_TOL
    assert rel_err(g.param_grads["weight"], central_diff(loss_k, k)) < OP_TOL


# -- elementwise / dense ops -------------------------------------------------


def test_relu_values():
    assert np.array_equal(T.relu(np.array([-1.0, 0.0, 2.0])), [0.0, 0.0, 2.0])


def _away_from_zero(r, shape, margin=1e-2):
    x = r.standard_normal(shape)
    return np.where(np.abs(x) < margin, margin * np.sign(x + 1e-30) * 2, x)


@pytest.mark.parametrize("seed", range(N_INSTANCES))
def test_relu_backward_fd(seed):
    r = np.random.default_rng(seed)
    x = _away_from_zero(r, (2, 3, 4))
    w = r.standard_normal(x.shape)
    assert rel_err(T.relu_backward(w, x), central_diff(lambda z: np.sum(w * T.relu(z)), x)) < OP_TOL


@pytest.mark.parametrize("seed", range(N_INSTANCES))
def test_linear_backward_fd(seed):
    r = np.random.default_rng(seed)
    x = r.standard_normal((4, 5))
    w = r.standard_normal((3, 5))
    b = r.standard_normal(3)
    up = r.standard_normal((4, 3))
    g = T.linear_backward(up, x, w)
    assert rel_err(g.input_grad, central_diff(lambda z: np.sum(up * T.linear(z, w, b)), x)) < OP_TOL
    assert rel_err(g.param_grads["weight"], central_diff(lambda z: np.sum(up * T.linear(x, z, b)), w)) < OP_TOL
    assert rel_err(g.param_grads["bias"], central_diff(lambda z: np.sum(up * T.linear(x, w, z)), b)) < OP_TOL


def test_linear_shape_error():
    with pytest.raises(T.DimensionError):
        T.linear(np.zeros((2, 3)), np.zeros((4, 5)))


@pytest.mark.parametrize("seed", range(N_INSTANCES))
def test_maxpool_backward_fd(seed):
    r = np.random.default_rng(seed)
    # distinct values keep every window's argmax stable under the FD step
    x = r.permutation(2 * 2 * 4 * 6).reshape(2, 2, 4, 6) * 0.1 + r.uniform(0, 0.01, (2, 2, 4, 6))
    up = r.standard_normal((2, 2, 2, 3))
    assert rel_err(T.maxpool2d_backward(up, x), central_diff(lambda z: np.sum(up * T.maxpool2d(z)), x)) < OP_TOL


def test_maxpool_values_and_ties():
    x = np.arange(16.0).reshape(1, 1, 4, 4)
    assert np.array_equal(T.maxpool2d(x), [[[[5.0, 7.0], [13.0, 15.0]]]])
    tie = np.ones((1, 1, 2, 2))
    g = T.maxpool2d_backward(np.ones((1, 1, 1, 1)), tie)
    assert np.array_equal(g, [[[[1.0, 0.0], [0.0, 0.0]]]])
    with pytest.raises(T.DimensionError):
        T.maxpool2d(np.zeros((1, 1, 3, 4)))


@pytest.mark.parametrize("seed", range(N_INSTANCES))
def test_global_avgpool_backward_fd(seed):
    r = np.random.default_rng(seed)
    x = r.standard_normal((2, 3, 3, 4))
    up = r.standard_normal((2, 3))
    g = T.global_avgpool_backward(up, x.shape)
    assert rel_err(g, central_diff(lambda z: np.sum(up * T.global_avgpool(z)), x)) < OP_TOL


@pytest.mark.parametrize("seed", range(N_INSTANCES))
@pytest.mark.parametrize("train", [True, False])
def test_batchnorm_backward_fd(seed, train):
    r = np.random.default_rng(seed)
    x = r.standard_normal((3, 2, 3, 3)) * 2 + 0.5
    gamma = r.uniform(0.5, 1.5, 2)
    beta = r.standard_normal(2)
    rm, rv = r.standard_normal(2) * 0.1, r.uniform(0.5, 1.5, 2)
    up = r.standard_normal(x.shape)

    def f(xx, gg=gamma, bb=beta):
        return np.sum(up * T.batchnorm2d(xx, gg, bb, rm, rv, train)[0])

    _, cache, _, _ = T.batchnorm2d(x, gamma, beta, rm, rv, train)
    g = T.batchnorm2d_backward(up, cache)
    assert rel_err(g.input_grad, central_diff(f, x)) < OP_TOL
    assert rel_err(g.param_grads["gamma"], central_diff(lambda z: f(x, gg=z), gamma)) < OP_TOL
    assert rel_err(g.param_grads["beta"], central_diff(lambda z: f(x, bb=z), beta)) < OP_TOL


def test_batchnorm_train_statistics(rng):
    x = rng.standard_normal((8, 3, 5, 5)) * 3 + 2
    gamma = np.array([0.5, -2.0, 1.5])
    beta = np.array([0.1, 0.2, -0.3])
    out, _, rm, rv = T.batchnorm2d(x, gamma, beta, np.zeros(3), np.ones(3), train=True, eps=0.0)
    assert np.allclose(out.mean(axis=(0, 2, 3)), beta, atol=1e-6)
    assert np.allclose(out.std(axis=(0, 2, 3)), np.abs(gamma), atol=1e-6)
    n = x.size // 3
    assert np.allclose(rm, 0.1 * x.mean(axis=(0, 2, 3)))
    assert np.allclose(rv, 0.9 + 0.1 * x.var(axis=(0, 2, 3)) * n / (n - 1))


def test_batchnorm_eval_uses_initial_stats(rng):
    x = rng.standard_normal((2, 2, 3, 3))
    out, _, rm, rv = T.batchnorm2d(x, np.ones(2), np.zeros(2), np.zeros(2), np.ones(2), train=False, eps=0.0)
    assert np.allclose(out, x)
    assert np.array_equal(rm, np.zeros(2)) and np.array_equal(rv, np.ones(2))


@pytest.mark.parametrize("seed", range(N_INSTANCES))
def test_softmax_ce_fd(seed):
    r = np.random.default_rng(seed)
    logits = r.standard_normal((4, 5)) * 3
    labels = r.integers(0, 5, 4)
    _, g = T.softmax_cross_entropy(logits, labels)
    assert rel_err(g, central_diff(lambda z: T.softmax_cross_entropy(z, labels)[0], logits)) < OP_TOL


def test_softmax_ce_uniform_and_errors():
    loss, _ = T.softmax_cross_entropy(np.zeros((3, 7)), np.array([0, 3, 6]))
    assert math.isclose(loss, math.log(7), rel_tol=1e-12)
    with pytest.raises(IndexError):
        T.softmax_cross_entropy(np.zeros((2, 3)), np.array([0, 3]))
    with pytest.raises(IndexError):
        T.softmax_cross_entropy(np.zeros((2, 3)), np.array([-1, 0]))
    with pytest.raises(T.DimensionError):
        T.softmax_cross_entropy(np.zeros((2, 3)), np.array([0]))


def test_softmax_ce_large_logits_stable():
    loss, g = T.softmax_cross_entropy(np.array([[1000.0, -1000.0]]), np.array([1]))
    assert math.isfinite(loss) and np.all(np.isfinite(g))


# -- frobenius -----------------------------------------------------------------


def test_frobenius_examples():
    assert T.frobenius_sq(np.zeros((3, 2))) == 0.0
    assert T.frobenius_sq(np.array([3.0, 4.0])) == 25.0


@pytest.mark.parametrize("seed", range(N_INSTANCES))
def test_frobenius_loop_oracle_and_fd(seed):
    r = np.random.default_rng(seed)
    t = r.standard_normal((2, 3, 4))
    s = 0.0
    for v in t.ravel():
        s += v * v
    assert math.isclose(T.frobenius_sq(t), s, rel_tol=1e-12)
    assert rel_err(T.frobenius_sq_grad(t), central_diff(T.frobenius_sq, t)) < OP_TOL


def test_ops_deterministic(rng):
    x = rng.standard_normal((2, 3, 6, 6))
    k = rng.standard_normal((4, 3, 3, 3))
    assert np.array_equal(T.conv2d(x, k, 1, 1), T.conv2d(x.copy(), k.copy(), 1, 1))
