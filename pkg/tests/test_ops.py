import math

import numpy as np
import pytest
from conftest import direct_conv, rel
from scipy.special import erf

from mlore import ops
from mlore.gradcheck import finite_difference_check
from mlore.tensor import ShapeError, Tensor


def leaf(a):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


# -- conv2d -------------------------------------------------------------------


def test_conv_identity_1x1(rng):
    x = rng.standard_normal((2, 1, 5, 5))
    out = ops.conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1))), Tensor(np.zeros(1)))
    np.testing.assert_array_equal(out.data, x)


def test_conv_zero_kernel_gives_bias_map(rng):
    x = Tensor(rng.standard_normal((1, 2, 4, 4)))
    out = ops.conv2d(x, Tensor(np.zeros((3, 3, 2, 3))), Tensor(np.full(3, 0.5)))
    np.testing.assert_array_equal(out.data, np.full((1, 3, 4, 4), 0.5))


@pytest.mark.parametrize("k", [1, 3])
def test_conv_matches_nested_loop_oracle(rng, k):
    x = rng.standard_normal((1, 2, 4, 4))
    w = rng.standard_normal((k, k, 2, 3))
    b = rng.standard_normal(3)
    out = ops.conv2d(Tensor(x), Tensor(w), Tensor(b)).data
    assert out.shape == (1, 3, 4, 4)
    assert rel(out, direct_conv(x, w, b)) < 1e-12


def test_conv_is_linear(rng):
    x, y = rng.standard_normal((2, 2, 2, 5, 4))
    w = Tensor(rng.standard_normal((3, 3, 2, 4)))
    lhs = ops.conv2d(Tensor(1.5 * x - 0.25 * y), w).data
    rhs = 1.5 * ops.conv2d(Tensor(x), w).data - 0.25 * ops.conv2d(Tensor(y), w).data
    assert rel(lhs, rhs) < 1e-10


def test_conv_then_1x1_equals_composed_kernel(rng):
    x = Tensor(rng.standard_normal((2, 6, 5, 5)))
    a = rng.standard_normal((3, 3, 6, 4))
    b = rng.standard_normal((1, 1, 4, 7))
    seq = ops.conv2d(ops.conv2d(x, Tensor(a)), Tensor(b)).data
    one = ops.conv2d(x, Tensor(a @ b[0, 0])).data
    assert rel(one, seq) < 1e-10


def test_conv_shape_errors_name_both_shapes(rng):
    x = Tensor(rng.standard_normal((1, 2, 4, 4)))
    with pytest.raises(ShapeError, match=r"\(1, 2, 4, 4\).*\(3, 3, 5, 1\)"):
        ops.conv2d(x, Tensor(np.zeros((3, 3, 5, 1))))
    with pytest.raises(ShapeError):
        ops.conv2d(x, Tensor(np.zeros((5, 5, 2, 1))))
    with pytest.raises(ShapeError):
        ops.conv2d(Tensor(np.zeros((2, 4, 4))), Tensor(np.zeros((1, 1, 2, 1))))


@pytest.mark.parametrize("k", [1, 3])
def test_conv_gradients(rng, k):
    x = leaf(rng.standard_normal((2, 3, 4, 5)))
    w = leaf(rng.standard_normal((k, k, 3, 2)))
    b = leaf(rng.standard_normal(2))
    target = rng.standard_normal((2, 2, 4, 5))
    report = finite_difference_check(lambda: ((ops.conv2d(x, w, b) - target) ** 2).sum(), [x, w, b], rng=rng)
    assert report.max_rel_error < 1e-6


# -- batch norm ---------------------------------------------------------------


def _bn_args(c, rng):
    return (
        leaf(rng.uniform(0.5, 1.5, c)),
        leaf(rng.standard_normal(c)),
        np.zeros(c),
        np.ones(c),
    )


def test_bn_eval_identity(rng):
    x = rng.standard_normal((2, 3, 4, 4))
    out = ops.batch_norm(Tensor(x), Tensor(np.ones(3)), Tensor(np.zeros(3)), np.zeros(3), np.ones(3), training=False, eps=0.0)
    np.testing.assert_array_equal(out.data, x)


def test_bn_train_constant_input_gives_beta(rng):
    x = np.broadcast_to(np.array([1.0, -2.0, 7.0]).reshape(1, 3, 1, 1), (4, 3, 2, 2)).copy()
    gamma, beta, mean, var = _bn_args(3, rng)
    out = ops.batch_norm(Tensor(x), gamma, beta, mean, var, training=True)
    np.testing.assert_allclose(out.data, np.broadcast_to(beta.data.reshape(1, 3, 1, 1), x.shape), atol=1e-12)


def test_bn_train_matches_explicit_statistics(rng):
    x = rng.standard_normal((4, 3, 5, 5)) * 3 + 1
    gamma, beta, mean, var = _bn_args(3, rng)
    out = ops.batch_norm(Tensor(x), gamma, beta, mean, var, training=True, eps=1e-5, momentum=0.1)
    for c in range(3):
        vals = x[:, c].ravel()
        mu = sum(vals) / len(vals)
        v = sum((vals - mu) ** 2) / len(vals)
        expect = (x[:, c] - mu) / math.sqrt(v + 1e-5) * gamma.data[c] + beta.data[c]
        assert rel(out.data[:, c], expect) < 1e-10
        assert abs(mean[c] - 0.1 * mu) < 1e-12
        unbiased = v * len(vals) / (len(vals) - 1)
        assert abs(var[c] - (0.9 + 0.1 * unbiased)) < 1e-12


def test_bn_rejects_bad_eps_and_channels(rng):
    gamma, beta, mean, var = _bn_args(3, rng)
    x = Tensor(rng.standard_normal((2, 3, 2, 2)))
    with pytest.raises(ValueError):
        ops.batch_norm(x, gamma, beta, mean, var, training=True, eps=0.0)
    with pytest.raises(ValueError):
        ops.batch_norm(x, gamma, beta, mean, var, training=False, eps=-1.0)
    with pytest.raises(ShapeError):
        ops.batch_norm(Tensor(np.zeros((2, 4, 2, 2))), gamma, beta, mean, var, training=False)


@pytest.mark.parametrize("training", [True, False])
def test_bn_gradients(rng, training):
    x = leaf(rng.standard_normal((3, 2, 3, 3)))
    gamma, beta, _, _ = _bn_args(2, rng)
    target = rng.standard_normal((3, 2, 3, 3))

    def loss():
        out = ops.batch_norm(x, gamma, beta, np.full(2, 0.3), np.full(2, 1.7), training=training)
        return ((out - target) ** 2).sum()

    assert finite_difference_check(loss, [x, gamma, beta], rng=rng).max_rel_error < 1e-6


# -- pooling and spatial reductions ---------------------------------------------


def test_global_avg_pool(rng):
    np.testing.assert_allclose(ops.global_avg_pool(Tensor(np.full((2, 3, 4, 4), 2.5))).data, np.full((2, 3), 2.5))
    x = rng.standard_normal((2, 3, 1, 1))
    np.testing.assert_array_equal(ops.global_avg_pool(Tensor(x)).data, x[:, :, 0, 0])
    x = rng.standard_normal((2, 3, 4, 5))
    expect = np.array([[sum(x[b, c].ravel()) / 20 for c in range(3)] for b in range(2)])
    np.testing.assert_allclose(ops.global_avg_pool(Tensor(x)).data, expect, rtol=1e-12)


def test_spatial_linear(rng):
    x = rng.standard_normal((2, 3, 4, 5))
    uniform = ops.spatial_linear(Tensor(x), Tensor(np.full((20, 1), 1 / 20))).data
    np.testing.assert_allclose(uniform, ops.global_avg_pool(Tensor(x)).data, rtol=1e-12)
    onehot = np.zeros((20, 1))
    onehot[7] = 1.0
    np.testing.assert_array_equal(ops.spatial_linear(Tensor(x), Tensor(onehot)).data, x[:, :, 1, 2])
    w = rng.standard_normal((20, 1))
    np.testing.assert_allclose(ops.spatial_linear(Tensor(x), Tensor(w)).data, x.reshape(2, 3, 20) @ w[:, 0], rtol=1e-12)
    with pytest.raises(ShapeError):
        ops.spatial_linear(Tensor(x), Tensor(np.ones((16, 1))))


def test_dense_and_reductions_gradients(rng):
    x = leaf(rng.standard_normal((2, 3, 4, 4)))
    w = leaf(rng.standard_normal((16, 1)))
    dw = leaf(rng.standard_normal((3, 5)))
    db = leaf(rng.standard_normal(5))

    def loss():
        v = ops.spatial_linear(x, w) + ops.global_avg_pool(x)
        return (ops.dense(v, dw, db) ** 2).sum()

    assert finite_difference_check(loss, [x, w, dw, db], rng=rng).max_rel_error < 1e-6


# -- activations and gating ---------------------------------------------------


def test_softmax_examples(rng):
    np.testing.assert_allclose(ops.softmax(Tensor(np.zeros((1, 15)))).data, np.full((1, 15), 1 / 15))
    np.testing.assert_allclose(ops.softmax(Tensor(np.array([[0.0, math.log(3.0)]]))).data, [[0.25, 0.75]], atol=1e-15)
    v = rng.standard_normal((4, 7)) * 10
    p = ops.softmax(Tensor(v)).data
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)
    assert (np.argsort(p, axis=1) == np.argsort(v, axis=1)).all()
    assert (p > 0).all()


def test_softmax_survives_huge_logits():
    p = ops.softmax(Tensor(np.array([[1000.0, 0.0, -1000.0]]))).data
    assert np.isfinite(p).all()
    np.testing.assert_allclose(p, [[1.0, 0.0, 0.0]], atol=1e-300)


def test_gelu_is_exact_erf_form(rng):
    x = rng.standard_normal(50) * 3
    np.testing.assert_allclose(ops.gelu(Tensor(x)).data, 0.5 * x * (1 + erf(x / math.sqrt(2))), rtol=1e-14)


def test_activation_gradients(rng):
    x = leaf(rng.standard_normal((3, 4)) * 2)

    def loss():
        return (ops.gelu(x) + ops.softplus(x) * ops.sigmoid(x) + ops.normal_cdf(x) + ops.softmax(x) ** 2).sum()

    assert finite_difference_check(loss, [x], rng=rng).max_rel_error < 1e-6


def test_topk_mask_tie_break_lower_index_wins():
    mask = ops.topk_mask(np.array([[1.0, 2.0, 2.0, 2.0, 0.0]]), 2)
    np.testing.assert_array_equal(mask, [[False, True, True, False, False]])


def test_topk_mask_errors():
    with pytest.raises(ValueError):
        ops.topk_mask(np.zeros((1, 3)), 4)
    with pytest.raises(ValueError):
        ops.topk_mask(np.zeros((1, 3)), 0)
    with pytest.raises(FloatingPointError):
        ops.topk_mask(np.array([[0.0, np.nan, 1.0]]), 1)


def test_topk_softmax_gradient(rng):
    logits = leaf(rng.standard_normal((3, 6)))
    weights = rng.standard_normal((3, 6))

    def loss():
        g, _ = ops.topk_softmax(logits, 3)
        return (g * weights).sum()

    assert finite_difference_check(loss, [logits], rng=rng).max_rel_error < 1e-6


# -- resampling ---------------------------------------------------------------


def test_space_to_depth_round_values(rng):
    x = rng.standard_normal((1, 2, 4, 4))
    y = ops.space_to_depth(Tensor(x), 2).data
    assert y.shape == (1, 8, 2, 2)
    assert sorted(y.ravel()) == sorted(x.ravel())
    with pytest.raises(ShapeError):
        ops.space_to_depth(Tensor(np.zeros((1, 1, 5, 4))), 2)


def test_upsampling(rng):
    x = rng.standard_normal((1, 2, 3, 3))
    up = ops.upsample_nearest(Tensor(x), 2).data
    np.testing.assert_array_equal(up[:, :, ::2, ::2], x)
    np.testing.assert_array_equal(up[:, :, 1::2, 1::2], x)
    const = ops.upsample_bilinear(Tensor(np.full((1, 1, 4, 4), 3.0)), (16, 16)).data
    np.testing.assert_allclose(const, 3.0)
    same = ops.upsample_bilinear(Tensor(x), (3, 3)).data
    np.testing.assert_allclose(same, x, atol=1e-14)


def test_resampling_gradients(rng):
    x = leaf(rng.standard_normal((1, 4, 4, 4)))
    w = rng.standard_normal((1, 1, 16, 16))

    def loss():
        y = ops.upsample_bilinear(ops.space_to_depth(x, 2), (16, 16))
        return (y.sum(axis=1, keepdims=True) * w).sum() + (ops.upsample_nearest(x, 2) ** 2).sum()

    assert finite_difference_check(loss, [x], rng=rng).max_rel_error < 1e-6


# -- losses -------------------------------------------------------------------


def test_cross_entropy_oracle_and_perfect_prediction(rng):
    logits = rng.standard_normal((2, 4, 3, 3))
    target = rng.integers(0, 4, (2, 3, 3))
    got = ops.cross_entropy(Tensor(logits), target).item()
    lse = np.log(np.exp(logits).sum(axis=1))
    picked = np.take_along_axis(logits, target[:, None], axis=1)[:, 0]
    assert abs(got - (lse - picked).mean()) < 1e-12
    onehot = np.moveaxis(np.eye(4)[target], -1, 1) * 50.0
    assert ops.cross_entropy(Tensor(onehot), target).item() < 1e-12


def test_balanced_bce_oracle(rng):
    z = rng.standard_normal((2, 1, 4, 4))
    t = (rng.random((2, 1, 4, 4)) < 0.3).astype(np.float64)
    got = ops.balanced_bce_with_logits(Tensor(z), t).item()
    beta = t.mean()
    p = 1 / (1 + np.exp(-z))
    per = -((1 - beta) * t * np.log(p) + beta * (1 - t) * np.log(1 - p))
    assert abs(got - per.mean()) < 1e-12


def test_masked_l1_oracle_and_zero_case(rng):
    pred = rng.standard_normal((2, 2, 3, 3))
    target = rng.standard_normal((2, 2, 3, 3))
    mask = (rng.random((2, 1, 3, 3)) < 0.5).astype(np.float64)
    got = ops.masked_l1(Tensor(pred), target, mask).item()
    m = np.broadcast_to(mask, pred.shape)
    assert abs(got - (np.abs(pred - target) * m).sum() / m.sum()) < 1e-12
    assert ops.masked_l1(Tensor(target), target).item() == 0.0


def test_loss_gradients(rng):
    z = leaf(rng.standard_normal((2, 3, 4, 4)))
    seg = rng.integers(0, 3, (2, 4, 4))
    edge = (rng.random((2, 1, 4, 4)) < 0.3).astype(np.float64)
    target = rng.standard_normal((2, 3, 4, 4))

    def loss():
        return ops.cross_entropy(z, seg) + ops.balanced_bce_with_logits(z[:, :1], edge) + ops.masked_l1(z, target)

    assert finite_difference_check(loss, [z], rng=rng).max_rel_error < 1e-5
