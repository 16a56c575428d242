import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from avcompress.numkernel import (
    DimensionError,
    Linear,
    LrSchedule,
    MultiHeadAttention,
    OptimizerState,
    Parameter,
    adam_step,
    cross_entropy,
    finite_diff_check,
    layer_norm,
    lr_at,
    matmul,
    mse_loss,
    multi_head_attention,
    softmax,
    tensor,
)


def rand(rng, *shape):
    return tensor(rng.standard_normal(shape), requires_grad=True)


# -- matmul ----------------------------------------------------------------------------


def test_matmul_identity():
    b = np.arange(6.0).reshape(3, 2)
    assert np.array_equal(matmul(tensor(np.eye(3)), tensor(b)).data, b)


def test_matmul_hand_example():
    out = matmul(tensor([[1.0, 2.0], [3.0, 4.0]]), tensor([[1.0], [1.0]]))
    assert out.data.tolist() == [[3.0], [7.0]]


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        matmul(tensor(np.zeros((2, 3))), tensor(np.zeros((2, 3))))


def test_matmul_grad_of_sum_is_ones_times_bT():
    rng = np.random.default_rng(0)
    a, b = rand(rng, 4, 5), rand(rng, 5, 3)
    matmul(a, b).sum().backward()
    assert np.allclose(a.grad, np.ones((4, 3)) @ b.data.T)
    rep = finite_diff_check(lambda x, y: matmul(x, y), [a, b])
    assert rep.max_rel_error < 1e-6


# -- softmax ---------------------------------------------------------------------------


def test_softmax_uniform_and_hand_example():
    assert np.allclose(softmax(tensor(np.zeros((1, 4)))).data, 0.25)
    assert np.allclose(softmax(tensor([0.0, math.log(3.0)])).data, [0.25, 0.75])


def test_softmax_rows_sum_to_one_and_gradcheck():
    rng = np.random.default_rng(1)
    x = rand(rng, 3, 7)
    s = softmax(x, axis=1).data
    assert np.all(s >= 0)
    assert np.allclose(s.sum(axis=1), 1.0, atol=1e-12)
    assert finite_diff_check(lambda t: softmax(t, axis=1), [x]).max_rel_error < 1e-5


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=12), st.floats(-1e3, 1e3))
def test_softmax_sums_to_one_and_is_shift_invariant(values, shift):
    x = np.array(values)
    s = softmax(tensor(x)).data
    assert abs(s.sum() - 1.0) < 1e-12
    assert np.allclose(softmax(tensor(x + shift)).data, s, atol=1e-12)


# -- layer norm ------------------------------------------------------------------------


def test_layer_norm_constant_row_is_zero():
    out = layer_norm(tensor(np.full((1, 5), 3.0)), tensor(np.ones(5)), tensor(np.zeros(5)))
    assert np.all(np.isfinite(out.data))
    assert np.allclose(out.data, 0.0)


def test_layer_norm_hand_example():
    out = layer_norm(tensor([[1.0, 3.0]]), tensor(np.ones(2)), tensor(np.zeros(2)))
    assert np.allclose(out.data, [[-1.0, 1.0]], atol=1e-5)


def test_layer_norm_unit_variance():
    rng = np.random.default_rng(2)
    out = layer_norm(tensor(rng.standard_normal((5, 8)) * 3 + 1), tensor(np.ones(8)), tensor(np.zeros(8)), eps=1e-12)
    assert np.allclose(out.data.var(axis=1), 1.0, atol=1e-6)
    assert np.allclose(out.data.mean(axis=1), 0.0, atol=1e-12)


def test_layer_norm_d1_is_guarded():
    out = layer_norm(tensor([[2.0], [5.0]]), tensor([1.0]), tensor([0.0]))
    assert np.all(np.isfinite(out.data))


# -- attention -------------------------------------------------------------------------


def identity_attention(d, heads):
    mha = MultiHeadAttention(d, heads, np.random.default_rng(0))
    for lin in (mha.w_q, mha.w_k, mha.w_v, mha.w_o):
        lin.set_identity()
    return mha


def test_single_key_attention_returns_value():
    mha = identity_attention(4, 1)
    rng = np.random.default_rng(3)
    q, k, v = tensor(rng.standard_normal((3, 4))), tensor(rng.standard_normal((1, 4))), tensor(rng.standard_normal((1, 4)))
    out = multi_head_attention(q, k, v, 1, params=mha)
    assert np.allclose(out.data, np.repeat(v.data, 3, axis=0))


def test_causal_row_zero_ignores_later_positions():
    mha = MultiHeadAttention(8, 2, np.random.default_rng(4))
    rng = np.random.default_rng(5)
    x = rng.standard_normal((4, 8))
    base = multi_head_attention(tensor(x), tensor(x), tensor(x), 2, causal_mask=True, params=mha).data
    y = x.copy()
    y[1:] += rng.standard_normal((3, 8))
    pert = multi_head_attention(tensor(x), tensor(y), tensor(y), 2, causal_mask=True, params=mha).data
    assert np.array_equal(base[0], pert[0])


def test_heads_must_divide_width():
    with pytest.raises(ValueError):
        MultiHeadAttention(6, 4, np.random.default_rng(0))


def test_attention_gradcheck_all_projections():
    rng = np.random.default_rng(6)
    mha = MultiHeadAttention(8, 2, rng)
    x = rand(rng, 3, 8)
    params = [p for _, p in mha.named_parameters()]

    def fn(xx, *_):
        return mha(xx, xx)

    assert finite_diff_check(fn, [x] + params).max_rel_error < 1e-5


# -- losses ----------------------------------------------------------------------------


def test_cross_entropy_saturated_and_uniform():
    logits = np.zeros((3, 5))
    targets = np.array([0, 4, 2])
    logits[np.arange(3), targets] = 1e6
    assert cross_entropy(tensor(logits), targets).data < 1e-9
    assert math.isclose(float(cross_entropy(tensor(np.zeros((2, 4))), [1, 3]).data), math.log(4))


def test_cross_entropy_out_of_range_target():
    with pytest.raises(IndexError):
        cross_entropy(tensor(np.zeros((2, 4))), [0, 4])


def test_cross_entropy_gradcheck():
    rng = np.random.default_rng(7)
    x = rand(rng, 6, 10)
    t = rng.integers(0, 10, 6)
    assert finite_diff_check(lambda z: cross_entropy(z, t), [x]).max_rel_error < 1e-5


def test_mse_examples():
    assert float(mse_loss(tensor([1.0, 2.0]), [1.0, 2.0]).data) == 0.0
    assert float(mse_loss(tensor([1.0, 3.0]), [0.0, 0.0]).data) == 5.0
    rng = np.random.default_rng(8)
    p, q = rng.standard_normal(10), rng.standard_normal(10)
    oracle = 0.0
    for a, b in zip(p, q):
        oracle += (a - b) ** 2
    assert math.isclose(float(mse_loss(tensor(p), q).data), oracle / 10, rel_tol=1e-12)
    with pytest.raises(DimensionError):
        mse_loss(tensor([1.0, 2.0]), [1.0])


# -- optimizer and schedule ------------------------------------------------------------


def test_adam_zero_gradient_leaves_parameter():
    p = Parameter(np.array([1.5, -2.0]))
    state = OptimizerState()
    adam_step([p], state, 0.1)
    assert np.array_equal(p.data, [1.5, -2.0])
    assert state.step == 1


def test_adam_first_step_moves_by_lr():
    p = Parameter(np.array([0.0]))
    p.grad[:] = 1.0
    adam_step([p], OptimizerState(), 1e-3)
    assert math.isclose(abs(p.data[0]), 1e-3, rel_tol=1e-4)


def test_adam_quadratic_against_reference_recurrence():
    p = Parameter(np.array([1.0]))
    state = OptimizerState()
    x, m, v = 1.0, 0.0, 0.0
    for t in range(1, 101):
        p.grad[:] = 2 * p.data
        adam_step([p], state, 0.05)
        g = 2 * x
        m = 0.9 * m + 0.1 * g
        v = 0.98 * v + 0.02 * g * g
        x -= 0.05 * (m / (1 - 0.9**t)) / (math.sqrt(v / (1 - 0.98**t)) + 1e-8)
    assert abs(p.data[0]) < 0.5
    assert math.isclose(p.data[0], x, rel_tol=1e-9, abs_tol=1e-12)
    assert state.step == 100
    assert state.m[0].shape == state.v[0].shape == p.shape


def test_adam_skips_frozen_parameters():
    p = Parameter(np.array([1.0]), trainable=False)
    p.grad[:] = 5.0
    adam_step([p], OptimizerState(), 0.1)
    assert p.data[0] == 1.0


def test_zero_grad():
    p = Parameter(np.ones((2, 3)))
    p.grad += 4
    p.zero_grad()
    assert p.grad.shape == p.shape and not p.grad.any()


def test_lr_schedule_examples():
    s = LrSchedule()
    assert math.isclose(lr_at(s, 500), 1e-4)
    assert math.isclose(lr_at(s, 250), 5e-5)
    assert math.isclose(lr_at(s, 30000), 1e-5)
    assert lr_at(s, 0) > 0


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 40000), st.integers(0, 40000))
def test_lr_positive_and_non_increasing_after_warmup(a, b):
    s = LrSchedule()
    assert lr_at(s, a) > 0
    lo, hi = sorted((a, b))
    if lo >= s.warmup_steps:
        assert lr_at(s, hi) <= lr_at(s, lo)


def test_lr_continuous_at_warmup():
    s = LrSchedule()
    assert abs(lr_at(s, 499) - lr_at(s, 500)) < 1e-6
    assert abs(lr_at(s, 501) - lr_at(s, 500)) < 1e-9


# -- gradcheck harness and determinism -------------------------------------------------


def test_linear_layer_gradcheck_tight():
    rng = np.random.default_rng(9)
    lin = Linear(5, 4, rng)
    x = rand(rng, 3, 5)
    rep = finite_diff_check(lambda z, w, b: lin(z), [x, lin.weight, lin.bias])
    assert rep.max_rel_error < 1e-7


def test_operations_are_bitwise_deterministic():
    rng = np.random.default_rng(10)
    mha = MultiHeadAttention(8, 2, rng)
    x = rng.standard_normal((5, 8))
    a = mha(tensor(x), causal=True).data
    b = mha(tensor(x), causal=True).data
    assert a.tobytes() == b.tobytes()
