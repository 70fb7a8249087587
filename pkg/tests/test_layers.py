"""Layer vocabulary: forward values against naive oracles, gradients against
finite differences."""
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hqseg.layers import (
    BatchNormState,
    Conv2dParams,
    adaptive_average_pool,
    batch_norm,
    concat_channels,
    conv2d,
    depthwise_separable_conv,
    linear,
    max_pool_2x2,
    softmax_cross_entropy,
    transposed_conv_2x2_stride2,
)
from hqseg.tensor import Tensor

from oracles import assert_close_rel, block_mean_pool, conv2d_loops, finite_diff


def _conv_params(rng, cout, cin, k, groups=1, stride=1, padding=0, bias=True):
    return Conv2dParams(
        kernel=Tensor(rng.normal(size=(cout, cin // groups, k, k)), requires_grad=True),
        bias=Tensor(rng.normal(size=cout), requires_grad=True) if bias else None,
        stride=stride,
        padding=padding,
        groups=groups,
    )


# -------------------------------------------------------------- conv2d ---


def test_conv_1x1_identity_single_channel(rng):
    x = Tensor(rng.normal(size=(1, 1, 5, 5)))
    p = Conv2dParams(kernel=Tensor(np.ones((1, 1, 1, 1))))
    assert np.array_equal(conv2d(x, p).data, x.data)


def test_depthwise_box_sum_on_one_hot():
    x = np.zeros((1, 1, 3, 3))
    x[0, 0, 1, 1] = 1.0
    p = Conv2dParams(kernel=Tensor(np.ones((1, 1, 3, 3))), padding=1, groups=1)
    out = conv2d(Tensor(x), p).data
    # box sum of a centered one-hot: every window containing the hot pixel
    assert np.array_equal(out[0, 0], np.ones((3, 3)))


@pytest.mark.parametrize(
    "cin,cout,groups,stride,padding",
    [(3, 4, 1, 1, 1), (4, 4, 4, 1, 1), (4, 6, 2, 1, 0), (3, 2, 1, 2, 1)],
)
def test_conv_matches_sliding_window_oracle(rng, cin, cout, groups, stride, padding):
    x = rng.normal(size=(2, cin, 6, 6))
    p = _conv_params(rng, cout, cin, 3, groups, stride, padding)
    got = conv2d(Tensor(x), p).data
    want = conv2d_loops(x, p.kernel.data, p.bias.data, stride, padding, groups)
    assert np.allclose(got, want, atol=1e-12)


def test_conv_gradients_match_finite_differences(rng):
    x = Tensor(rng.normal(size=(2, 3, 5, 5)), requires_grad=True)
    p = _conv_params(rng, 4, 3, 3, padding=1)
    w = Tensor(rng.normal(size=(2, 4, 5, 5)))

    def forward():
        return (conv2d(x, p) * w).sum()

    forward().backward()
    for t in (x, p.kernel, p.bias):
        assert_close_rel(t.grad, finite_diff(lambda: forward().item(), t.data))


def test_conv_shape_errors(rng):
    x = Tensor(rng.normal(size=(1, 3, 4, 4)))
    with pytest.raises(ValueError, match="groups"):
        conv2d(x, _conv_params(rng, 4, 4, 3, groups=3))
    with pytest.raises(ValueError, match="smaller than kernel"):
        conv2d(x, _conv_params(rng, 2, 3, 5, padding=0))


# ------------------------------------------------- depthwise separable ---


def test_separable_identity_kernels(rng):
    cin = 3
    dw_kernel = np.zeros((cin, 1, 3, 3))
    dw_kernel[:, 0, 1, 1] = 1.0  # center-one depthwise
    pw_kernel = np.eye(cin).reshape(cin, cin, 1, 1)
    dw = Conv2dParams(kernel=Tensor(dw_kernel), padding=1, groups=cin)
    pw = Conv2dParams(kernel=Tensor(pw_kernel))
    x = Tensor(rng.normal(size=(2, cin, 4, 4)))
    assert np.allclose(depthwise_separable_conv(x, dw, pw).data, x.data, atol=1e-15)


def test_separable_parameter_count_formula():
    cin, cout = 16, 32
    dw = _conv_params(np.random.default_rng(0), cin, cin, 3, groups=cin, padding=1)
    pw = _conv_params(np.random.default_rng(1), cout, cin, 1)
    total = sum(t.size for t in (dw.kernel, dw.bias, pw.kernel, pw.bias))
    assert total == 16 * 9 + 16 + 16 * 32 + 32 == 704


def test_separable_equals_two_stage_oracle(rng):
    cin, cout = 3, 5
    dw = _conv_params(rng, cin, cin, 3, groups=cin, padding=1)
    pw = _conv_params(rng, cout, cin, 1)
    x = rng.normal(size=(2, cin, 4, 4))
    got = depthwise_separable_conv(Tensor(x), dw, pw).data
    stage1 = conv2d_loops(x, dw.kernel.data, dw.bias.data, 1, 1, cin)
    stage2 = conv2d_loops(stage1, pw.kernel.data, pw.bias.data, 1, 0, 1)
    assert np.allclose(got, stage2, atol=1e-12)


def test_separable_rejects_bad_stages(rng):
    x = Tensor(rng.normal(size=(1, 4, 4, 4)))
    with pytest.raises(ValueError, match="groups == Cin"):
        depthwise_separable_conv(x, _conv_params(rng, 4, 4, 3, padding=1), _conv_params(rng, 4, 4, 1))


# ------------------------------------------------------------- pooling ---


def test_max_pool_constant_and_simple():
    assert np.array_equal(max_pool_2x2(Tensor(np.full((1, 1, 4, 4), 7.0))).data, np.full((1, 1, 2, 2), 7.0))
    assert max_pool_2x2(Tensor([[[[1.0, 2.0], [3.0, 4.0]]]])).data[0, 0, 0, 0] == 4.0


def test_max_pool_rejects_odd_extent():
    with pytest.raises(ValueError, match="even"):
        max_pool_2x2(Tensor(np.zeros((1, 1, 3, 4))))


def test_max_pool_gradient_is_one_hot_at_argmax(rng):
    x = Tensor(rng.normal(size=(2, 3, 4, 4)), requires_grad=True)
    max_pool_2x2(x).sum().backward()
    fd = finite_diff(lambda: max_pool_2x2(x).sum().item(), x.data, h=1e-6)
    assert_close_rel(x.grad, fd)
    assert np.array_equal(np.unique(x.grad), [0.0, 1.0])


def test_max_pool_tie_routes_to_first_row_major():
    x = Tensor(np.full((1, 1, 2, 2), 5.0), requires_grad=True)
    max_pool_2x2(x).sum().backward()
    assert np.array_equal(x.grad[0, 0], [[1.0, 0.0], [0.0, 0.0]])


# ------------------------------------------------------ transposed conv --


def test_transposed_conv_single_pixel_block():
    x = np.zeros((1, 1, 2, 2))
    x[0, 0, 0, 0] = 3.0
    out = transposed_conv_2x2_stride2(Tensor(x), Tensor(np.ones((1, 1, 2, 2)))).data
    assert np.array_equal(out[0, 0, :2, :2], np.full((2, 2), 3.0))
    assert out.sum() == 3.0 * 4


def test_transposed_conv_is_adjoint_of_strided_conv(rng):
    # <conv(y), x> == <y, up(x)> with the same kernel read both ways:
    # up maps Cin->Cout via K[Cin,Cout,2,2]; the adjoint conv maps the Cout
    # space back with kernel [Cout_conv=Cin, Cin_conv=Cout, 2, 2] == K.
    cin, cout = 3, 2
    kernel = rng.normal(size=(cin, cout, 2, 2))
    x = rng.normal(size=(2, cin, 3, 3))
    y = rng.normal(size=(2, cout, 6, 6))
    up = transposed_conv_2x2_stride2(Tensor(x), Tensor(kernel)).data
    down = conv2d(Tensor(y), Conv2dParams(kernel=Tensor(kernel), stride=2)).data
    lhs = float((down * x).sum())
    rhs = float((y * up).sum())
    assert abs(lhs - rhs) <= 1e-10 * max(1.0, abs(rhs))


def test_transposed_conv_gradients(rng):
    x = Tensor(rng.normal(size=(2, 3, 3, 3)), requires_grad=True)
    k = Tensor(rng.normal(size=(3, 2, 2, 2)), requires_grad=True)
    b = Tensor(rng.normal(size=2), requires_grad=True)
    w = Tensor(rng.normal(size=(2, 2, 6, 6)))

    def forward():
        return (transposed_conv_2x2_stride2(x, k, b) * w).sum()

    forward().backward()
    for t in (x, k, b):
        assert_close_rel(t.grad, finite_diff(lambda: forward().item(), t.data))


# ------------------------------------------------------- adaptive pool ---


def test_adaptive_pool_identity_at_target_size(rng):
    x = Tensor(rng.normal(size=(1, 2, 4, 4)))
    assert np.array_equal(adaptive_average_pool(x, 4, 4).data, x.data)


def test_adaptive_pool_disjoint_block_means(rng):
    x = rng.normal(size=(2, 3, 8, 8))
    got = adaptive_average_pool(Tensor(x), 4, 4).data
    assert np.allclose(got, block_mean_pool(x, 4, 4), atol=1e-14)


def test_adaptive_pool_constant_input(rng):
    for h, w in ((5, 9), (7, 4), (16, 16)):
        x = Tensor(np.full((1, 1, h, w), 2.5))
        assert np.allclose(adaptive_average_pool(x, 4, 4).data, 2.5, atol=1e-14)


def test_adaptive_pool_rejects_upsampling():
    with pytest.raises(ValueError, match="upsample"):
        adaptive_average_pool(Tensor(np.zeros((1, 1, 3, 5))), 4, 4)


def test_adaptive_pool_gradients(rng):
    x = Tensor(rng.normal(size=(1, 2, 7, 5)), requires_grad=True)
    w = Tensor(rng.normal(size=(1, 2, 4, 4)))

    def forward():
        return (adaptive_average_pool(x, 4, 4) * w).sum()

    forward().backward()
    assert_close_rel(x.grad, finite_diff(lambda: forward().item(), x.data))


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(0, 2**31 - 1))
def test_adaptive_pool_preserves_global_mean_when_partition_exact(mult_h, mult_w, seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(1, 1, 4 * mult_h, 4 * mult_w))
    pooled = adaptive_average_pool(Tensor(x), 4, 4).data
    assert abs(pooled.mean() - x.mean()) < 1e-12


# ------------------------------------------------------------ batchnorm --


def test_batch_norm_identity_on_standardized_batch(rng):
    eps = 1e-5
    x = rng.normal(size=(4, 3, 5, 5))
    x -= x.mean(axis=(0, 2, 3), keepdims=True)
    # variance 1 - eps makes var + eps == 1, so the op is an exact identity
    x *= np.sqrt((1.0 - eps) / x.var(axis=(0, 2, 3), keepdims=True))
    state = BatchNormState.create(3)
    out = batch_norm(Tensor(x), state, training=True)
    assert np.allclose(out.data, x, atol=1e-6)


def test_batch_norm_requires_batch_of_two():
    with pytest.raises(ValueError, match="batch >= 2"):
        batch_norm(Tensor(np.zeros((1, 2, 4, 4))), BatchNormState.create(2), training=True)


def test_batch_norm_running_stats_updated_and_used(rng):
    state = BatchNormState.create(2)
    x = rng.normal(loc=3.0, scale=2.0, size=(8, 2, 4, 4))
    batch_norm(Tensor(x), state, training=True)
    assert np.all(state.running_var > 0)
    assert not np.allclose(state.running_mean, 0.0)
    frozen_mean = state.running_mean.copy()
    out_eval = batch_norm(Tensor(x), state, training=False)
    assert np.array_equal(state.running_mean, frozen_mean)  # eval never mutates
    want = (x - frozen_mean[None, :, None, None]) / np.sqrt(
        state.running_var[None, :, None, None] + state.eps
    )
    assert np.allclose(out_eval.data, want, atol=1e-12)


def test_batch_norm_gradients_training_and_eval(rng):
    for training in (True, False):
        state = BatchNormState.create(3)
        state.running_mean[:] = rng.normal(size=3)
        state.running_var[:] = rng.uniform(0.5, 2.0, size=3)
        x = Tensor(rng.normal(size=(3, 3, 4, 4)), requires_grad=True)
        w = Tensor(rng.normal(size=(3, 3, 4, 4)))

        def forward():
            return (batch_norm(x, state, training=training, update_stats=False) * w).sum()

        forward().backward()
        for t in (x, state.gamma, state.beta):
            assert_close_rel(t.grad, finite_diff(lambda: forward().item(), t.data))


# ------------------------------------------------- the simple remainder --


def test_tanh_at_zero():
    assert Tensor([0.0]).tanh().data[0] == 0.0


def test_linear_matches_matmul(rng):
    x = rng.normal(size=(3, 4))
    w = rng.normal(size=(4, 2))
    b = rng.normal(size=2)
    got = linear(Tensor(x), Tensor(w), Tensor(b)).data
    assert np.allclose(got, x @ w + b, atol=1e-14)


def test_concat_channels_backward_splits_exactly(rng):
    a = Tensor(rng.normal(size=(2, 2, 3, 3)), requires_grad=True)
    b = Tensor(rng.normal(size=(2, 3, 3, 3)), requires_grad=True)
    w = Tensor(rng.normal(size=(2, 5, 3, 3)))
    (concat_channels([a, b]) * w).sum().backward()
    assert np.array_equal(a.grad, w.data[:, :2])
    assert np.array_equal(b.grad, w.data[:, 2:])


def test_concat_channels_shape_error(rng):
    with pytest.raises(ValueError, match="incompatible"):
        concat_channels([Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 2, 5, 4)))])


def test_cross_entropy_uniform_logits_is_log_k():
    logits = Tensor(np.zeros((1, 5, 1, 1)))
    targets = np.zeros((1, 1, 1), dtype=np.int64)
    loss = softmax_cross_entropy(logits, targets)
    assert abs(loss.item() - np.log(5)) < 1e-12


def test_cross_entropy_rejects_bad_class_id():
    logits = Tensor(np.zeros((1, 3, 2, 2)))
    bad = np.full((1, 2, 2), 3, dtype=np.int64)
    with pytest.raises(ValueError, match=r"outside \[0,3\)"):
        softmax_cross_entropy(logits, bad)


def test_cross_entropy_gradients(rng):
    logits = Tensor(rng.normal(size=(2, 4, 3, 3)), requires_grad=True)
    targets = rng.integers(0, 4, size=(2, 3, 3))

    def forward():
        return softmax_cross_entropy(logits, targets)

    forward().backward()
    assert_close_rel(logits.grad, finite_diff(lambda: forward().item(), logits.data))
