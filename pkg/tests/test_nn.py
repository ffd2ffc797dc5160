import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from poredet import nn
from poredet.nn import BatchNormState, ConvParams, OptimizerState, ShapeError

from conftest import numeric_grad, rel_error


def conv_params(rng, k, cin, cout):
    return ConvParams(rng.standard_normal((k, k, cin, cout)), rng.standard_normal(cout))


# -- conv -------------------------------------------------------------------


def test_conv_output_shape(rng):
    x = rng.random((2, 17, 17, 1))
    out = nn.conv2d_valid(x, conv_params(rng, 3, 1, 32))
    assert out.shape == (2, 15, 15, 32)


def test_conv_zero_input_gives_bias(rng):
    p = conv_params(rng, 3, 2, 4)
    out = nn.conv2d_valid(np.zeros((1, 6, 7, 2)), p)
    np.testing.assert_allclose(out, np.broadcast_to(p.bias, out.shape))


def test_conv_rejects_small_or_mismatched_input(rng):
    with pytest.raises(ShapeError):
        nn.conv2d_valid(np.zeros((1, 1, 1, 1)), conv_params(rng, 3, 1, 1))
    with pytest.raises(ShapeError):
        nn.conv2d_valid(np.zeros((1, 5, 5, 2)), conv_params(rng, 3, 1, 1))


def test_conv_matches_direct_loop(rng):
    x = rng.standard_normal((2, 6, 5, 3))
    p = conv_params(rng, 3, 3, 2)
    out = nn.conv2d_valid(x, p)
    ref = np.zeros_like(out)
    for n in range(2):
        for i in range(4):
            for j in range(3):
                for o in range(2):
                    ref[n, i, j, o] = np.sum(x[n, i:i + 3, j:j + 3, :] * p.weights[..., o]) + p.bias[o]
    np.testing.assert_allclose(out, ref, rtol=1e-12, atol=1e-12)


def test_conv_backward_zero_grad(rng):
    x = rng.standard_normal((1, 5, 5, 2))
    p = conv_params(rng, 3, 2, 3)
    gx, gp = nn.conv2d_backward(x, p, np.zeros((1, 3, 3, 3)))
    assert not gx.any() and not gp.weights.any() and not gp.bias.any()


def test_conv_backward_scalar_identity():
    x = np.full((1, 1, 1, 1), 3.0)
    p = ConvParams(np.ones((1, 1, 1, 1)), np.zeros(1))
    _, gp = nn.conv2d_backward(x, p, np.full((1, 1, 1, 1), 2.0))
    assert gp.weights.item() == 6.0
    assert gp.bias.item() == 2.0


def test_conv_backward_rejects_bad_grad_shape(rng):
    with pytest.raises(ShapeError):
        nn.conv2d_backward(rng.random((1, 5, 5, 2)), conv_params(rng, 3, 2, 3), np.zeros((1, 2, 3, 3)))


@pytest.mark.parametrize("seed", range(5))
def test_conv_backward_finite_differences(seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((1, 5, 5, 2))
    p = conv_params(rng, 3, 2, 3)
    upstream = rng.standard_normal((1, 3, 3, 3))

    def loss():
        return float(np.sum(nn.conv2d_valid(x, p) * upstream))

    gx, gp = nn.conv2d_backward(x, p, upstream)
    assert rel_error(gx, numeric_grad(loss, x)) < 1e-3
    assert rel_error(gp.weights, numeric_grad(loss, p.weights)) < 1e-3
    assert rel_error(gp.bias, numeric_grad(loss, p.bias)) < 1e-3


# -- relu / sigmoid / bce -----------------------------------------------------


def test_relu_values_and_gradient():
    x = np.array([-1.0, 0.0, 2.0])
    np.testing.assert_array_equal(nn.relu(x), [0, 0, 2])
    np.testing.assert_array_equal(nn.relu_backward(x, np.ones(3)), [0, 0, 1])
    assert not nn.relu(-np.arange(1, 5.0)).any()


def test_sigmoid_is_stable_at_extremes():
    p = nn.sigmoid(np.array([-1000.0, 0.0, 1000.0]))
    np.testing.assert_allclose(p, [0.0, 0.5, 1.0])
    assert np.all(np.isfinite(p))


def test_bce_at_zero_logit():
    for y in (0, 1):
        loss, g = nn.bce_loss(np.array([0.0]), np.array([y]))
        assert loss[0] == pytest.approx(np.log(2))
    _, g = nn.bce_loss(np.array([0.0]), np.array([1]))
    assert g[0] == pytest.approx(-0.5)


def test_bce_confident_correct_is_near_zero():
    loss, _ = nn.bce_loss(np.array([50.0, -800.0]), np.array([1, 0]))
    assert np.all(loss < 1e-20)
    loss, _ = nn.bce_loss(np.array([-800.0]), np.array([1]))
    assert np.isfinite(loss[0]) and loss[0] == pytest.approx(800.0)


def test_bce_rejects_soft_labels():
    with pytest.raises(ValueError):
        nn.bce_loss(np.zeros(2), np.array([0.5, 1.0]))


@given(st.floats(-30, 30), st.sampled_from([0, 1]))
def test_bce_gradient_matches_finite_difference(z, y):
    eps = 1e-5
    hi, _ = nn.bce_loss(np.array([z + eps]), np.array([y]))
    lo, _ = nn.bce_loss(np.array([z - eps]), np.array([y]))
    _, g = nn.bce_loss(np.array([z]), np.array([y]))
    assert g[0] == pytest.approx((hi[0] - lo[0]) / (2 * eps), abs=1e-6)


# -- pooling ------------------------------------------------------------------


def test_pool_shape(rng):
    out, idx = nn.maxpool3x3_s1(rng.random((1, 15, 15, 32)))
    assert out.shape == idx.shape == (1, 13, 13, 32)


def test_pool_constant_and_ramp():
    out, _ = nn.maxpool3x3_s1(np.full((1, 5, 6, 2), 0.25))
    assert np.all(out == 0.25)
    ramp = np.arange(6 * 7, dtype=float).reshape(1, 6, 7, 1)
    out, _ = nn.maxpool3x3_s1(ramp)
    np.testing.assert_array_equal(out[0, :, :, 0], ramp[0, 2:, 2:, 0])


def test_pool_rejects_small_input():
    with pytest.raises(ShapeError):
        nn.maxpool3x3_s1(np.zeros((1, 2, 5, 1)))


@pytest.mark.parametrize("seed", range(5))
def test_pool_backward_finite_differences(seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((2, 5, 6, 2))
    upstream = rng.standard_normal((2, 3, 4, 2))

    def loss():
        return float(np.sum(nn.maxpool3x3_s1(x)[0] * upstream))

    _, idx = nn.maxpool3x3_s1(x)
    g = nn.maxpool3x3_s1_backward(x.shape, idx, upstream)
    assert rel_error(g, numeric_grad(loss, x)) < 1e-3


# -- batch norm ---------------------------------------------------------------


def test_batchnorm_train_normalizes(rng):
    x = rng.standard_normal((8, 4, 5, 3)) * 3 + 7
    state = BatchNormState.init(3, dtype=np.float64, epsilon=1e-12)
    out, _ = nn.batchnorm_forward(x, state, "train")
    np.testing.assert_allclose(out.mean(axis=(0, 1, 2)), 0, atol=1e-5)
    np.testing.assert_allclose(out.var(axis=(0, 1, 2)), 1, atol=1e-3)


def test_batchnorm_infer_identity_and_deterministic(rng):
    x = rng.standard_normal((2, 3, 3, 4))
    state = BatchNormState.init(4, dtype=np.float64)
    out1, _ = nn.batchnorm_forward(x, state, "infer")
    out2, _ = nn.batchnorm_forward(x, state, "infer")
    np.testing.assert_allclose(out1, x / np.sqrt(1 + state.epsilon))
    np.testing.assert_array_equal(out1, out2)


def test_batchnorm_rejects_empty_batch_and_bad_channels():
    state = BatchNormState.init(2, dtype=np.float64)
    with pytest.raises(ShapeError):
        nn.batchnorm_forward(np.zeros((0, 2, 2, 2)), state, "train")
    with pytest.raises(ShapeError):
        nn.batchnorm_forward(np.zeros((1, 2, 2, 3)), state, "train")


def test_batchnorm_running_stats_converge(rng):
    x = rng.standard_normal((4, 3, 3, 2)) * 2 + 5
    state = BatchNormState.init(2, dtype=np.float64, momentum=0.9)
    for _ in range(300):
        nn.batchnorm_forward(x, state, "train")
    # gap shrinks as momentum**steps: 0.9**300 ~ 2e-14
    np.testing.assert_allclose(state.running_mean, x.mean(axis=(0, 1, 2)), atol=1e-9)
    np.testing.assert_allclose(state.running_var, x.var(axis=(0, 1, 2)), atol=1e-9)


def test_batchnorm_backward_simple_terms(rng):
    x = rng.standard_normal((3, 2, 2, 2))
    state = BatchNormState.init(2, dtype=np.float64)
    _, cache = nn.batchnorm_forward(x, state, "train")
    _, gg, gb = nn.batchnorm_backward(cache, state, np.zeros_like(x))
    assert not gg.any() and not gb.any()
    up = rng.standard_normal(x.shape)
    _, _, gb = nn.batchnorm_backward(cache, state, up)
    np.testing.assert_allclose(gb, up.sum(axis=(0, 1, 2)))


@pytest.mark.parametrize("seed", range(5))
def test_batchnorm_backward_finite_differences(seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((3, 2, 3, 2))
    state = BatchNormState(rng.standard_normal(2), rng.standard_normal(2), np.zeros(2), np.ones(2))
    upstream = rng.standard_normal(x.shape)

    def loss():
        s = BatchNormState(state.gamma, state.beta, np.zeros(2), np.ones(2), state.epsilon)
        return float(np.sum(nn.batchnorm_forward(x, s, "train")[0] * upstream))

    _, cache = nn.batchnorm_forward(x, BatchNormState(state.gamma, state.beta, np.zeros(2), np.ones(2)), "train")
    gx, gg, gb = nn.batchnorm_backward(cache, state, upstream)
    assert rel_error(gx, numeric_grad(loss, x)) < 1e-3
    assert rel_error(gg, numeric_grad(loss, state.gamma)) < 1e-3
    assert rel_error(gb, numeric_grad(loss, state.beta)) < 1e-3


# -- dropout ------------------------------------------------------------------


def test_dropout_identity_cases(rng):
    x = rng.random((2, 3, 3, 4))
    assert nn.dropout(x, 0.0, "train", rng)[0] is x
    assert nn.dropout(x, 0.7, "infer")[0] is x


def test_dropout_rejects_rate_one():
    with pytest.raises(ValueError):
        nn.dropout(np.ones((1, 1, 1, 1)), 1.0, "train", np.random.default_rng(0))


def test_dropout_survivor_fraction_and_expectation():
    rng = np.random.default_rng(7)
    x = np.ones((1, 1000, 1000, 1))
    out, mask = nn.dropout(x, 0.2, "train", rng)
    assert abs(np.count_nonzero(out) / x.size - 0.8) < 0.01
    assert abs(out.mean() - 1.0) < 0.01
    np.testing.assert_allclose(out[out > 0], 1 / 0.8)
    np.testing.assert_array_equal(nn.dropout_backward(mask, np.ones_like(x)), mask)


# -- sgd ----------------------------------------------------------------------


def test_effective_lr_schedule():
    opt = OptimizerState()
    assert opt.effective_lr == pytest.approx(0.1)
    opt.step_count = 1999
    assert opt.effective_lr == pytest.approx(0.1)
    opt.step_count = 2000
    assert opt.effective_lr == pytest.approx(0.096)
    opt.step_count = 4000
    assert opt.effective_lr == pytest.approx(0.1 * 0.96 ** 2)


def test_sgd_step_updates_in_place():
    p = np.array([1.0, 2.0])
    opt = OptimizerState(base_lr=0.5, weight_decay=0.1)
    nn.sgd_step([p], [np.array([1.0, 0.0])], opt)
    np.testing.assert_allclose(p, [1.0 - 0.5 * 1.1, 2.0 - 0.5 * 0.2])
    assert opt.step_count == 1


def test_sgd_zero_gradient_is_noop():
    p = np.array([1.0, -3.0])
    nn.sgd_step([p], [np.zeros(2)], OptimizerState())
    np.testing.assert_array_equal(p, [1.0, -3.0])


def test_sgd_shape_mismatch():
    with pytest.raises(ShapeError):
        nn.sgd_step([np.zeros(2)], [np.zeros(3)], OptimizerState())


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 100_000))
def test_effective_lr_positive_and_staircase(step):
    opt = OptimizerState(step_count=step)
    assert opt.effective_lr > 0
    assert opt.effective_lr == pytest.approx(0.1 * 0.96 ** (step // 2000))
