import numpy as np
import pytest

from setfeat.gradcheck import grad_check
from setfeat.nn import (
    batchnorm2d,
    conv2d,
    cross_entropy_logits,
    kaiming_uniform,
    l2_normalize,
    linear,
    maxpool2,
    softmax,
)
from setfeat.rng import Rng
from setfeat.tensor import ShapeError, Tensor, backward, mul, tsum


def leaf(data):
    return Tensor(data, requires_grad=True)


def naive_conv3x3(x, w, b):
    """Direct 6-loop convolution with zero padding of 1."""
    n, c, h, ww = x.shape
    o = w.shape[0]
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    out = np.zeros((n, o, h, ww))
    for ni in range(n):
        for oi in range(o):
            for yi in range(h):
                for xi in range(ww):
                    acc = 0.0
                    for ci in range(c):
                        for ky in range(3):
                            for kx in range(3):
                                acc += xp[ni, ci, yi + ky, xi + kx] * w[oi, ci, ky, kx]
                    out[ni, oi, yi, xi] = acc + (b[oi] if b is not None else 0.0)
    return out


# -------------------------------------------------------------------- conv2d


def test_conv1x1_identity_kernel(f64):
    rng = Rng(0)
    x = Tensor(rng.uniform(-1, 1, (2, 3, 4, 4)))
    w = Tensor(np.eye(3).reshape(3, 3, 1, 1))
    out = conv2d(x, w, Tensor(np.zeros(3)))
    assert np.allclose(out.data, x.data)


def test_conv3x3_zero_weight_gives_bias(f64):
    x = Tensor(Rng(1).uniform(-1, 1, (2, 2, 5, 5)))
    w = Tensor(np.zeros((4, 2, 3, 3)))
    b = Tensor([1.0, -2.0, 0.5, 3.0])
    out = conv2d(x, w, b)
    assert out.shape == (2, 4, 5, 5)
    for o in range(4):
        assert np.all(out.data[:, o] == b.data[o])


def test_conv3x3_matches_naive_loops(f64):
    rng = Rng(2)
    x = rng.uniform(-1, 1, (2, 3, 5, 5))
    w = rng.uniform(-1, 1, (4, 3, 3, 3))
    b = rng.uniform(-1, 1, (4,))
    out = conv2d(Tensor(x), Tensor(w), Tensor(b))
    assert np.allclose(out.data, naive_conv3x3(x, w, b), atol=1e-12)


def test_conv_shape_errors(f64):
    x = Tensor(np.zeros((1, 3, 4, 4)))
    with pytest.raises(ShapeError, match="input channels"):
        conv2d(x, Tensor(np.zeros((2, 4, 3, 3))))
    with pytest.raises(ShapeError, match="kernel"):
        conv2d(x, Tensor(np.zeros((2, 3, 5, 5))))
    with pytest.raises(ShapeError, match="bias"):
        conv2d(x, Tensor(np.zeros((2, 3, 3, 3))), Tensor(np.zeros(3)))
    with pytest.raises(ShapeError):
        conv2d(Tensor(np.zeros((3, 4, 4))), Tensor(np.zeros((2, 3, 3, 3))))


def test_conv_gradients_vs_finite_differences(f64):
    # random 3-channel 8x8 input, central differences at step 1e-3
    rng = Rng(3)
    x = Tensor(rng.uniform(-1, 1, (1, 3, 8, 8)))
    w0 = rng.uniform(-0.5, 0.5, (4, 3, 3, 3))
    b0 = rng.uniform(-0.5, 0.5, (4,))

    def loss_of_w(w):
        y = conv2d(x, w, Tensor(b0))
        return tsum(mul(y, y))

    rep = grad_check(loss_of_w, leaf(w0), step=1e-3, tol=1e-4)
    assert rep.passed, rep

    w = Tensor(w0)

    def loss_of_x(xt):
        y = conv2d(xt, w, Tensor(b0))
        return tsum(mul(y, y))

    rep = grad_check(loss_of_x, leaf(rng.uniform(-1, 1, (1, 3, 8, 8))), step=1e-3, tol=1e-4)
    assert rep.passed, rep

    def loss_of_b(bt):
        y = conv2d(x, w, bt)
        return tsum(mul(y, y))

    rep = grad_check(loss_of_b, leaf(b0), step=1e-3, tol=1e-4)
    assert rep.passed, rep


def test_conv1x1_grad_check(f64):
    rng = Rng(4)
    x = Tensor(rng.uniform(-1, 1, (2, 3, 4, 4)))

    def loss(w):
        y = conv2d(x, w)
        return tsum(mul(y, y))

    assert grad_check(loss, leaf(rng.uniform(-1, 1, (5, 3, 1, 1))), step=1e-3).passed


# ------------------------------------------------------------------ maxpool2


def test_maxpool_single_window(f64):
    out = maxpool2(Tensor([[[[1.0, 2.0], [3.0, 4.0]]]]))
    assert out.shape == (1, 1, 1, 1)
    assert out.item() == 4.0


def test_maxpool_constant_ties_to_first_element(f64):
    x = leaf(np.full((1, 1, 4, 4), 7.0))
    out = maxpool2(x)
    assert np.all(out.data == 7.0)
    backward(tsum(out))
    expect = np.zeros((1, 1, 4, 4))
    expect[0, 0, 0::2, 0::2] = 1.0  # top-left corner of each window
    assert np.array_equal(x.grad, expect)


def test_maxpool_matches_bruteforce(f64):
    rng = Rng(5)
    x = rng.uniform(-1, 1, (2, 3, 4, 6))
    out = maxpool2(Tensor(x))
    for n in range(2):
        for c in range(3):
            for i in range(2):
                for j in range(3):
                    win = x[n, c, 2 * i : 2 * i + 2, 2 * j : 2 * j + 2]
                    assert out.data[n, c, i, j] == win.max()


def test_maxpool_odd_extent_error(f64):
    with pytest.raises(ShapeError, match="even"):
        maxpool2(Tensor(np.zeros((1, 1, 3, 4))))


def test_maxpool_grad_check(f64):
    # distinct values so the argmax is stable under fd perturbation
    base = np.arange(32.0).reshape(1, 2, 4, 4) + Rng(6).uniform(0, 0.3, (1, 2, 4, 4))

    def loss(x):
        y = maxpool2(x)
        return tsum(mul(y, y))

    assert grad_check(loss, leaf(base), step=1e-4).passed


# --------------------------------------------------------------- batchnorm2d


def test_batchnorm_train_normalizes(f64):
    rng = Rng(7)
    x = Tensor(3.0 * rng.uniform(-1, 1, (4, 3, 5, 5)) + 2.0)
    out = batchnorm2d(
        x, Tensor(np.ones(3)), Tensor(np.zeros(3)), np.zeros(3), np.ones(3), "train"
    )
    mean = out.data.mean(axis=(0, 2, 3))
    var = out.data.var(axis=(0, 2, 3))
    assert np.all(np.abs(mean) < 1e-5)
    assert np.all(np.abs(var - 1.0) < 1e-5)


def test_batchnorm_running_statistics_update(f64):
    rng = Rng(8)
    x = rng.uniform(-2, 2, (3, 2, 4, 4))
    rm, rv = np.array([1.0, -1.0]), np.array([2.0, 3.0])
    batchnorm2d(
        Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), rm, rv, "train", momentum=0.1
    )
    bm = x.mean(axis=(0, 2, 3))
    bv = x.var(axis=(0, 2, 3))  # biased
    assert np.allclose(rm, 0.9 * np.array([1.0, -1.0]) + 0.1 * bm)
    assert np.allclose(rv, 0.9 * np.array([2.0, 3.0]) + 0.1 * bv)


def test_batchnorm_gamma_zero_gives_beta(f64):
    x = Tensor(Rng(9).uniform(-1, 1, (2, 3, 4, 4)))
    beta = Tensor([1.0, -2.0, 0.0])
    out = batchnorm2d(x, Tensor(np.zeros(3)), beta, np.zeros(3), np.ones(3), "train")
    for c in range(3):
        assert np.all(out.data[:, c] == beta.data[c])


def test_batchnorm_eval_uses_running_buffers(f64):
    x = np.full((1, 1, 2, 2), 5.0)
    rm, rv = np.array([3.0]), np.array([4.0])
    out = batchnorm2d(
        Tensor(x), Tensor([2.0]), Tensor([1.0]), rm, rv, "eval", eps=0.0
    )
    # (5-3)/2 * 2 + 1 = 3, buffers untouched
    assert np.allclose(out.data, 3.0)
    assert rm[0] == 3.0 and rv[0] == 4.0


def test_batchnorm_errors(f64):
    x1 = Tensor(np.zeros((1, 2, 1, 1)))
    with pytest.raises(ValueError, match="degenerate"):
        batchnorm2d(x1, Tensor(np.ones(2)), Tensor(np.zeros(2)), np.zeros(2), np.ones(2), "train")
    x = Tensor(np.zeros((2, 2, 2, 2)))
    with pytest.raises(ValueError, match="mode"):
        batchnorm2d(x, Tensor(np.ones(2)), Tensor(np.zeros(2)), np.zeros(2), np.ones(2), "test")
    with pytest.raises(ShapeError, match="gamma"):
        batchnorm2d(x, Tensor(np.ones(3)), Tensor(np.zeros(2)), np.zeros(2), np.ones(2), "train")
    with pytest.raises(ShapeError, match="NCHW"):
        batchnorm2d(Tensor(np.zeros((2, 2))), Tensor(np.ones(2)), Tensor(np.zeros(2)), np.zeros(2), np.ones(2), "train")


def test_batchnorm_grad_check_train_mode(f64):
    rng = Rng(10)
    x0 = rng.uniform(-1, 1, (3, 2, 4, 4))
    g0, b0 = rng.uniform(0.5, 1.5, (2,)), rng.uniform(-0.5, 0.5, (2,))

    # step 1e-3: input grads are ~1e-4 against a loss of ~50, so smaller
    # steps drown the fd quotient in cancellation noise
    def loss_of_x(x):
        y = batchnorm2d(x, Tensor(g0), Tensor(b0), np.zeros(2), np.ones(2), "train")
        return tsum(mul(y, y))

    assert grad_check(loss_of_x, leaf(x0), step=1e-3, tol=1e-4).passed

    def loss_of_gamma(g):
        y = batchnorm2d(Tensor(x0), g, Tensor(b0), np.zeros(2), np.ones(2), "train")
        return tsum(mul(y, y))

    assert grad_check(loss_of_gamma, leaf(g0), step=1e-3, tol=1e-4).passed

    def loss_of_beta(b):
        y = batchnorm2d(Tensor(x0), Tensor(g0), b, np.zeros(2), np.ones(2), "train")
        return tsum(mul(y, y))

    assert grad_check(loss_of_beta, leaf(b0), step=1e-3, tol=1e-4).passed


def test_batchnorm_grad_check_eval_mode(f64):
    rng = Rng(11)
    x0 = rng.uniform(-1, 1, (2, 2, 3, 3))
    rm, rv = np.array([0.2, -0.1]), np.array([1.5, 0.7])

    def loss(x):
        y = batchnorm2d(x, Tensor([1.0, 2.0]), Tensor([0.0, 1.0]), rm.copy(), rv.copy(), "eval")
        return tsum(mul(y, y))

    assert grad_check(loss, leaf(x0), step=1e-5, tol=1e-4).passed


# ------------------------------------------------------- softmax and losses


def test_softmax_anchors(f64):
    assert np.allclose(softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5])
    assert np.allclose(softmax(Tensor([1000.0, 1000.0])).data, [0.5, 0.5])


def test_softmax_rows_sum_to_one_and_shift_invariant(f64):
    rng = Rng(12)
    x = rng.uniform(-5, 5, (6, 9))
    y = softmax(Tensor(x), axis=1)
    assert np.all(np.abs(y.data.sum(axis=1) - 1.0) < 1e-6)
    assert np.all(y.data > 0)
    c = 3.7
    y2 = softmax(Tensor(x + c), axis=1)
    assert np.allclose(y.data, y2.data, atol=1e-12)


def test_softmax_grad_check(f64):
    rng = Rng(13)

    def loss(x):
        y = softmax(x, axis=1)
        return tsum(mul(y, y))

    assert grad_check(loss, leaf(rng.uniform(-2, 2, (3, 5))), step=1e-5, tol=1e-5).passed


def test_cross_entropy_uniform_logits(f64):
    loss = cross_entropy_logits(Tensor(np.zeros((4, 64))), np.array([0, 5, 17, 63]))
    assert abs(loss.item() - np.log(64.0)) < 1e-12
    loss_c = cross_entropy_logits(Tensor(np.full((2, 64), 3.3)), np.array([1, 2]))
    assert abs(loss_c.item() - np.log(64.0)) < 1e-12


def test_cross_entropy_huge_margin(f64):
    logits = np.zeros((3, 5))
    t = np.array([0, 2, 4])
    logits[np.arange(3), t] = 1000.0
    assert cross_entropy_logits(Tensor(logits), t).item() < 1e-9


def test_cross_entropy_matches_naive(f64):
    rng = Rng(14)
    x = rng.uniform(-3, 3, (4, 5))
    t = np.array([1, 0, 4, 2])
    p = np.exp(x) / np.exp(x).sum(axis=1, keepdims=True)
    expect = -np.log(p[np.arange(4), t]).mean()
    got = cross_entropy_logits(Tensor(x), t).item()
    assert abs(got - expect) < 1e-10


def test_cross_entropy_errors(f64):
    with pytest.raises(IndexError, match="out of range"):
        cross_entropy_logits(Tensor(np.zeros((2, 3))), np.array([0, 3]))
    with pytest.raises(IndexError):
        cross_entropy_logits(Tensor(np.zeros((2, 3))), np.array([-1, 0]))
    with pytest.raises(ShapeError):
        cross_entropy_logits(Tensor(np.zeros((2, 3))), np.array([0]))
    with pytest.raises(ShapeError):
        cross_entropy_logits(Tensor(np.zeros(3)), np.array([0]))


def test_cross_entropy_grad_formula(f64):
    rng = Rng(15)
    x = leaf(rng.uniform(-2, 2, (4, 5)))
    t = np.array([0, 3, 1, 2])
    backward(cross_entropy_logits(x, t))
    p = np.exp(x.data) / np.exp(x.data).sum(axis=1, keepdims=True)
    onehot = np.eye(5)[t]
    assert np.allclose(x.grad, (p - onehot) / 4.0, atol=1e-12)


def test_softmax_ce_chain_grad_check(f64):
    rng = Rng(16)
    x = Tensor(rng.uniform(-1, 1, (6, 4)))
    t = np.array([0, 1, 2, 0, 1, 2])

    def loss(w):
        return cross_entropy_logits(linear(x, w), t)

    assert grad_check(loss, leaf(rng.uniform(-1, 1, (3, 4))), step=1e-5, tol=1e-5).passed


def test_linear_matches_formula(f64):
    rng = Rng(17)
    x = rng.uniform(-1, 1, (5, 4))
    w = rng.uniform(-1, 1, (2, 4))
    b = rng.uniform(-1, 1, (2,))
    out = linear(Tensor(x), Tensor(w), Tensor(b))
    assert np.allclose(out.data, x @ w.T + b, atol=1e-12)


# -------------------------------------------------------------- l2_normalize


def test_l2_normalize_unit_rows(f64):
    rng = Rng(18)
    x = rng.uniform(-4, 4, (7, 5))
    y = l2_normalize(Tensor(x))
    assert np.allclose(np.linalg.norm(y.data, axis=1), 1.0, atol=1e-12)


def test_l2_normalize_zero_row_stays_zero(f64):
    x = np.array([[0.0, 0.0, 0.0], [3.0, 4.0, 0.0]])
    y = l2_normalize(Tensor(x))
    assert np.array_equal(y.data[0], [0.0, 0.0, 0.0])
    assert np.allclose(y.data[1], [0.6, 0.8, 0.0])


def test_l2_normalize_scale_invariant(f64):
    x = Rng(19).uniform(-1, 1, (3, 6))
    a = l2_normalize(Tensor(x)).data
    b = l2_normalize(Tensor(17.0 * x)).data
    assert np.allclose(a, b, atol=1e-12)


def test_l2_normalize_grad_check(f64):
    # fixed cotangent keeps f deterministic across grad_check's re-evaluations
    cot = Rng(21).uniform(-1, 1, (4, 5))

    def loss(x):
        return tsum(mul(l2_normalize(x), Tensor(cot)))

    assert grad_check(loss, leaf(Rng(20).uniform(0.5, 2.0, (4, 5))), step=1e-6, tol=1e-4).passed


# ------------------------------------------------------------------- kaiming


def test_kaiming_uniform_bounds_and_determinism():
    w1 = kaiming_uniform(Rng(22), (64, 3, 3, 3), fan_in=27)
    w2 = kaiming_uniform(Rng(22), (64, 3, 3, 3), fan_in=27)
    bound = np.sqrt(6.0 / 27.0)
    assert np.array_equal(w1, w2)
    assert w1.shape == (64, 3, 3, 3)
    assert w1.min() >= -bound and w1.max() < bound
    # bound should actually be approached for this many draws
    assert w1.max() > 0.9 * bound and w1.min() < -0.9 * bound
