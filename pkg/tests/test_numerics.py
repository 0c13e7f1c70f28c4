import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from helpers import check_grads
from maskpredict import numerics as nx
from maskpredict.numerics import Tensor


def leaf(x, dtype=np.float64):
    return Tensor(np.array(x, dtype=dtype), requires_grad=True, dtype=dtype)


# -- forward values ---------------------------------------------------------


def test_matmul_examples():
    eye = Tensor([[1.0, 0.0], [0.0, 1.0]])
    m = Tensor([[2.0, 3.0], [4.0, 5.0]])
    np.testing.assert_array_equal(nx.matmul(eye, m).data, m.data)
    assert nx.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]])).data.tolist() == [[11.0]]
    with pytest.raises(ValueError):
        nx.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_matmul_sum_gradient_is_ones_times_b_transpose():
    rng = np.random.default_rng(0)
    a, b = leaf(rng.normal(size=(4, 5))), leaf(rng.normal(size=(5, 3)))
    nx.backward(nx.tsum(nx.matmul(a, b)))
    np.testing.assert_allclose(a.grad, np.ones((4, 3)) @ b.data.T, rtol=1e-12)
    worst, _ = check_grads(lambda: nx.tsum(nx.matmul(a, b)), {"a": a, "b": b}, rng, 20, h=1e-3)
    assert worst < 1e-6


def test_softmax_examples():
    np.testing.assert_allclose(nx.softmax(Tensor([0.0, 0.0, 0.0])).data, [1 / 3] * 3, rtol=1e-6)
    big = nx.softmax(Tensor([1000.0, 0.0])).data
    assert np.isfinite(big).all() and big[0] == pytest.approx(1.0) and big[1] == pytest.approx(0.0, abs=1e-30)
    np.testing.assert_allclose(nx.softmax(Tensor([1.0, 2.0, 3.0])).data, [0.0900, 0.2447, 0.6652], atol=1e-4)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 7)),
              elements=st.floats(-1e4, 1e4, allow_nan=False)))
def test_softmax_rows_sum_to_one(x):
    y = nx.softmax(Tensor(x, dtype=np.float64), axis=-1).data
    assert (y >= 0).all()
    np.testing.assert_allclose(y.sum(axis=-1), 1.0, atol=1e-6)


@settings(max_examples=30, deadline=None)
@given(arrays(np.float32, (3, 5), elements=st.floats(-50, 50, width=32)))
def test_forward_ops_are_bit_deterministic(x):
    g, b = Tensor(np.ones(5)), Tensor(np.zeros(5))
    for op in (lambda t: nx.softmax(t), lambda t: nx.log_softmax(t), lambda t: nx.layer_norm(t, g, b)):
        assert np.array_equal(op(Tensor(x)).data, op(Tensor(x)).data)


def test_layer_norm_examples():
    one, zero = Tensor(np.ones(4)), Tensor(np.zeros(4))
    np.testing.assert_array_equal(nx.layer_norm(Tensor([5.0] * 4), one, zero).data, np.zeros(4))
    out = nx.layer_norm(Tensor([1.0, 3.0]), Tensor(np.ones(2)), Tensor(np.zeros(2))).data
    np.testing.assert_allclose(out, [-1.0, 1.0], atol=1e-5)
    rng = np.random.default_rng(1)
    y = nx.layer_norm(Tensor(rng.normal(3, 4, size=(6, 16))), Tensor(np.ones(16)), Tensor(np.zeros(16))).data
    np.testing.assert_allclose(y.mean(-1), 0.0, atol=1e-5)
    np.testing.assert_allclose(y.var(-1), 1.0, atol=1e-5)


def test_smoothed_cross_entropy_examples():
    # uniform logits give ln V whatever the smoothing
    assert nx.smoothed_cross_entropy(Tensor(np.zeros((2, 4))), [1, 3], 0.1).item() == pytest.approx(math.log(4), rel=1e-6)
    logits = np.array([[2.0, 0.0, 0.0]])
    logp = logits[0] - math.log(np.exp(logits[0]).sum())
    want = -(0.9 * logp[0] + 0.05 * logp[1] + 0.05 * logp[2])
    got = nx.smoothed_cross_entropy(Tensor(logits, dtype=np.float64), [0], 0.1).item()
    assert got == pytest.approx(want, rel=1e-12)
    # epsilon 0 with a dominant target logit approaches zero
    assert nx.smoothed_cross_entropy(Tensor([[60.0, 0.0, 0.0]]), [0], 0.0).item() < 1e-20
    with pytest.raises(IndexError):
        nx.smoothed_cross_entropy(Tensor(np.zeros((1, 3))), [3])
    with pytest.raises(ValueError):
        nx.smoothed_cross_entropy(Tensor(np.zeros((0, 3))), [])


# -- backward ---------------------------------------------------------------


def test_backward_examples_and_accumulation():
    x = leaf([1.0, -2.0, 3.0])
    nx.backward(nx.tsum(x))
    np.testing.assert_array_equal(x.grad, np.ones(3))
    x.grad = None
    nx.backward(nx.tsum(nx.mul(x, x)))
    np.testing.assert_array_equal(x.grad, 2 * x.data)
    nx.backward(nx.tsum(nx.mul(x, x)))
    np.testing.assert_array_equal(x.grad, 4 * x.data)
    with pytest.raises(ValueError):
        nx.backward(nx.mul(x, 2.0))


def test_no_grad_records_nothing():
    x = leaf([1.0, 2.0])
    with nx.no_grad():
        y = nx.mul(x, x)
    assert not y.requires_grad and y._parents == ()


OPS = {
    "add_broadcast": lambda a, b: nx.tsum(nx.mul(nx.add(a, b[0]), a)),
    "mul": lambda a, b: nx.tsum(nx.mul(a, b)),
    "relu": lambda a, b: nx.tsum(nx.mul(nx.relu(a), b)),
    "log": lambda a, b: nx.tsum(nx.mul(nx.log(nx.add(nx.mul(a, a), 1.0)), b)),
    "softmax": lambda a, b: nx.tsum(nx.mul(nx.softmax(a, -1), b)),
    "log_softmax": lambda a, b: nx.tsum(nx.mul(nx.log_softmax(a, 0), b)),
    "layer_norm": lambda a, b: nx.tsum(nx.mul(nx.layer_norm(a, b[0], b[1]), a)),
    "transpose_reshape": lambda a, b: nx.tsum(nx.mul(nx.reshape(nx.transpose(a), (4, 3)), nx.reshape(b, (4, 3)))),
    "take": lambda a, b: nx.tsum(nx.mul(nx.take(a, (np.array([0, 0, 2]), np.array([1, 1, 3]))), 3.0)),
    "concat": lambda a, b: nx.tsum(nx.mul(nx.concat([a, b], 0), nx.concat([b, a], 0))),
    "mean": lambda a, b: nx.mean(nx.mul(nx.mean(a, axis=1, keepdims=True), b)),
    "matmul_batched": lambda a, b: nx.tsum(nx.matmul(nx.reshape(a, (1, 3, 4)), nx.transpose(b))),
    "cross_entropy": lambda a, b: nx.smoothed_cross_entropy(nx.mul(a, b), [1, 0, 3], 0.1),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_op_gradients_match_finite_differences_float64(name):
    rng = np.random.default_rng(7)
    a = leaf(rng.normal(size=(3, 4)))
    b = leaf(rng.normal(size=(3, 4)))
    worst, n = check_grads(lambda: OPS[name](a, b), {"a": a, "b": b}, rng, 24, h=1e-6)
    assert worst < 1e-4, f"{name}: worst relative error {worst:.2e} over {n} coordinates"


@pytest.mark.parametrize("name", sorted(OPS))
def test_op_gradients_match_finite_differences_float32(name):
    rng = np.random.default_rng(8)
    with nx.precision(np.float32):
        a = leaf(rng.normal(size=(3, 4)), np.float32)
        b = leaf(rng.normal(size=(3, 4)), np.float32)
        worst, n = check_grads(lambda: OPS[name](a, b), {"a": a, "b": b}, rng, 24, h=1e-2, floor=1e-2)
    assert worst < 1e-2, f"{name}: worst relative error {worst:.2e} over {n} coordinates"


def test_embedding_gradient_scatters_repeats():
    w = leaf(np.arange(12.0).reshape(4, 3))
    out = nx.embedding(w, np.array([[1, 1, 3]]))
    nx.backward(nx.tsum(out))
    np.testing.assert_array_equal(w.grad, [[0, 0, 0], [2, 2, 2], [0, 0, 0], [1, 1, 1]])


def test_dropout_is_identity_without_rng_and_rescales_with_it():
    x = Tensor(np.ones((64, 64)))
    assert nx.dropout(x, 0.3, None) is x
    y = nx.dropout(x, 0.25, np.random.default_rng(0)).data
    kept = y[y > 0]
    np.testing.assert_allclose(kept, 256 / (256 - 64))
    assert abs((y == 0).mean() - 0.25) < 0.03


def test_check_finite():
    nx.check_finite(Tensor([1.0]))
    with pytest.raises(AssertionError):
        nx.check_finite(Tensor([np.nan]))


# -- Adam -------------------------------------------------------------------


def test_adam_first_step_is_minus_lr_sign():
    p = {"w": leaf([1.0, -1.0, 0.5])}
    g = {"w": np.array([0.3, -2.0, 5.0])}
    state = nx.AdamState(weight_decay=0.0)
    nx.adam_step(p, g, state, 0.1)
    np.testing.assert_allclose(p["w"].data, [0.9, -0.9, 0.4], atol=1e-5)
    assert state.step == 1


def test_adam_zero_gradient_and_zero_lr_leave_params():
    p = {"w": leaf([1.0, 2.0])}
    nx.adam_step(p, {"w": np.zeros(2)}, nx.AdamState(weight_decay=0.0), 0.1)
    np.testing.assert_array_equal(p["w"].data, [1.0, 2.0])
    state = nx.AdamState()
    for _ in range(3):
        nx.adam_step(p, {"w": np.array([4.0, -1.0])}, state, 0.0)
    np.testing.assert_array_equal(p["w"].data, [1.0, 2.0])
    assert state.step == 3


def test_adam_quadratic_bowl_converges():
    w = {"w": leaf([1.0])}
    state = nx.AdamState(weight_decay=0.0)
    for _ in range(200):
        nx.adam_step(w, {"w": 2 * w["w"].data}, state, 1e-2)
    assert abs(w["w"].data[0]) < 0.1


def test_adam_weight_decay_is_added_to_gradient_and_skips_no_decay():
    p = {"w": leaf([2.0]), "b": leaf([2.0])}
    state = nx.AdamState(weight_decay=0.5)
    nx.adam_step(p, {"w": np.array([0.0]), "b": np.array([0.0])}, state, 0.1, frozenset({"b"}))
    # decay-only gradient on w moves it by lr * sign; b has zero gradient and stays
    assert p["w"].data[0] == pytest.approx(1.9, abs=1e-6)
    assert p["b"].data[0] == 2.0
    assert state.m["w"].shape == p["w"].shape


def test_adam_rejects_shape_mismatch():
    with pytest.raises(ValueError):
        nx.adam_step({"w": leaf([1.0, 2.0])}, {"w": np.zeros(3)}, nx.AdamState(), 0.1)


def test_clip_grad_norm():
    g = {"a": np.array([3.0, 0.0]), "b": np.array([4.0])}
    total = nx.clip_grad_norm(g, 1.0)
    assert total == pytest.approx(5.0)
    assert math.sqrt(sum((x ** 2).sum() for x in g.values())) == pytest.approx(1.0)
    g = {"a": np.array([0.3])}
    nx.clip_grad_norm(g, 1.0)
    assert g["a"][0] == 0.3
