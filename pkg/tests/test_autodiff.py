import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from thsg import autodiff as ad
from thsg.autodiff import AdamState, Tensor, adam_step, backward
from thsg.errors import ContractError

from support import finite_difference, relative_error


def naive_matmul(a, b):
    out = np.zeros((a.shape[0], b.shape[1]))
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            acc = 0.0
            for k in range(a.shape[1]):
                acc += a[i, k] * b[k, j]
            out[i, j] = acc
    return out


def param(x):
    return Tensor(np.asarray(x, dtype=np.float64), requires_grad=True)


# -- affine / matmul ---------------------------------------------------------

def test_affine_identity_weights():
    out = ad.affine_forward([[1.0, 2.0]], [[1.0, 0.0], [0.0, 1.0]], [[0.0, 0.0]])
    assert out.data.tolist() == [[1.0, 2.0]]


def test_affine_direct_substitution():
    out = ad.affine_forward([[1.0, 1.0]], [[2.0, 0.0], [0.0, 3.0]], [[1.0, 1.0]])
    assert out.data.tolist() == [[3.0, 4.0]]


def test_affine_random_matches_naive_loop_exactly():
    rng = np.random.default_rng(3)
    x, W, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2)), rng.normal(size=(1, 2))
    expected = naive_matmul(x, W) + b
    assert np.array_equal(ad.affine_forward(x, W, b).data, expected)


def test_affine_shape_mismatch():
    with pytest.raises(ContractError):
        ad.affine_forward(np.ones((2, 3)), np.ones((4, 2)), np.zeros((1, 2)))
    with pytest.raises(ContractError):
        ad.affine_forward(np.ones((2, 3)), np.ones((3, 2)), np.zeros((1, 3)))


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 8), st.integers(1, 8), st.integers(1, 8), st.integers(0, 2**32 - 1))
def test_matmul_bitwise_equals_triple_loop(n, k, m, seed):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(n, k)) * rng.uniform(0.1, 100)
    b = rng.normal(size=(k, m)) * rng.uniform(0.1, 100)
    assert np.array_equal(ad.ordered_matmul(a, b), naive_matmul(a, b))


def test_matmul_gradient_matches_finite_differences():
    rng = np.random.default_rng(0)
    a, b = param(rng.normal(size=(3, 20))), param(rng.normal(size=(20, 4)))
    w = rng.normal(size=(3, 4))

    def f():
        return ad.total(ad.matmul(a, b) * w)

    backward(f())
    num = finite_difference(lambda: f().item(), [a, b])
    assert relative_error(a.grad, num[0]).max() < 1e-7
    assert relative_error(b.grad, num[1]).max() < 1e-7


# -- relu ------------------------------------------------------------------------

def test_relu_values():
    assert ad.relu([-1.0, 0.0, 2.0]).data.tolist() == [[0.0, 0.0, 2.0]]
    assert not ad.relu(-np.ones((3, 2))).data.any()


def test_relu_subgradient():
    x = param([[-1.0, 2.0]])
    backward(ad.total(ad.relu(x)))
    assert x.grad.tolist() == [[0.0, 1.0]]
    z = param([[0.0]])
    backward(ad.total(ad.relu(z)))
    assert z.grad.tolist() == [[0.0]]


# -- l2_normalize ------------------------------------------------------------------

def test_l2_normalize_examples():
    assert np.allclose(ad.l2_normalize([[3.0, 4.0]]).data, [[0.6, 0.8]], atol=1e-15)
    u = np.array([[0.0, 1.0, 0.0]])
    assert np.array_equal(ad.l2_normalize(u).data, u)


def test_l2_normalize_gradient():
    rng = np.random.default_rng(1)
    x = param(rng.normal(size=(2, 5)))
    w = rng.normal(size=(2, 5))

    def f():
        return ad.total(ad.l2_normalize(x) * w)

    backward(f())
    num = finite_difference(lambda: f().item(), [x])[0]
    assert relative_error(x.grad, num).max() <= 1e-6


def test_l2_normalize_degenerate_row_passes_through(caplog):
    x = param([[0.0, 0.0], [3.0, 4.0]])
    out = ad.l2_normalize(x)
    assert out.data[0].tolist() == [0.0, 0.0]
    assert out.flags["degenerate_rows"].tolist() == [0]
    assert "degenerate" in caplog.text
    backward(ad.total(out * np.array([[2.0, 5.0], [0.0, 0.0]])))
    assert x.grad[0].tolist() == [2.0, 5.0]


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 8)),
              elements=st.floats(-1e3, 1e3, allow_nan=False)))
def test_l2_normalize_unit_and_idempotent(x):
    norms = np.linalg.norm(x, axis=1)
    out = ad.l2_normalize(x).data
    ok = norms >= 1e-6
    assert np.all(np.abs(np.linalg.norm(out[ok], axis=1) - 1.0) <= 1e-12)
    again = ad.l2_normalize(out).data
    assert np.allclose(again[ok], out[ok], atol=1e-15, rtol=0)


# -- backward ------------------------------------------------------------------------

def test_backward_sum():
    x = param([1.0, 2.0, 3.0])
    backward(ad.total(x))
    assert x.grad.tolist() == [[1.0, 1.0, 1.0]]


def test_backward_squared_norm():
    x = param([1.0, 2.0])
    backward(ad.total(ad.row_sqnorm(x)))
    assert x.grad.tolist() == [[2.0, 4.0]]


def test_backward_rejects_non_scalar_root():
    with pytest.raises(ContractError):
        backward(param([1.0, 2.0]) * 2.0)


def test_tape_is_topological_and_root_adjoint_is_one():
    x = param([[1.0, -2.0]])
    y = ad.relu(x * 3.0 + x)
    root = ad.total(y * y)
    tape = backward(root)
    position = {id(node): i for i, node in enumerate(tape.nodes)}
    for node in tape.nodes:
        for parent in node._parents:
            if id(parent) in position:
                assert position[id(parent)] < position[id(node)]
    assert tape.nodes[-1] is root
    assert root.grad.tolist() == [[1.0]]


def test_shared_subexpression_accumulates():
    x = param([[2.0]])
    y = x * x
    backward(y + y)
    assert x.grad.tolist() == [[8.0]]


def test_rows_gather_accumulates_repeats():
    x = param([[1.0], [2.0]])
    backward(ad.total(ad.rows(x, [0, 0, 1])))
    assert x.grad.tolist() == [[2.0], [1.0]]


def test_softmax_ce_examples():
    assert math.isclose(ad.softmax_ce(np.zeros((1, 4)), [2]).item(), math.log(4), abs_tol=1e-15)
    assert ad.softmax_ce([[30.0, 0.0, 0.0]], [0]).item() < 1e-12
    expected = math.log(1 + math.exp(-1) + math.exp(-2))
    assert math.isclose(ad.softmax_ce([[1.0, 2.0, 3.0]], [2]).item(), expected, abs_tol=1e-15)
    with pytest.raises(ContractError):
        ad.softmax_ce(np.zeros((1, 3)), [3])


def test_non_finite_values_are_rejected():
    with pytest.raises(FloatingPointError):
        Tensor([[np.nan]])
    with np.errstate(over="ignore"), pytest.raises(FloatingPointError):
        param([[1e300]]) * 1e300


# -- adam --------------------------------------------------------------------------

def test_adam_first_step_is_learning_rate():
    p = param([[0.5]])
    state = AdamState([p], lr=1e-3, weight_decay=0.0)
    adam_step(state, [np.array([[1.0]])])
    assert state.t == 1
    assert math.isclose(p.data[0, 0] - 0.5, -1e-3, rel_tol=1e-6)


def test_adam_zero_gradient_no_decay_is_noop():
    p = param([[0.5, -2.0]])
    state = AdamState([p], lr=1e-3, weight_decay=0.0)
    adam_step(state, [np.zeros((1, 2))])
    assert p.data.tolist() == [[0.5, -2.0]]


def test_adam_decoupled_decay_only():
    p = param([[1.0]])
    state = AdamState([p], lr=1e-3, weight_decay=4e-4)
    adam_step(state, [np.zeros((1, 1))])
    assert math.isclose(p.data[0, 0], 1.0 - 4e-7, rel_tol=0, abs_tol=1e-15)


def test_adam_moment_shapes_follow_parameters():
    ps = [param(np.ones((2, 3))), param(np.ones((1, 3)))]
    state = AdamState(ps, lr=1e-2)
    adam_step(state, [np.ones((2, 3)), np.ones((1, 3))])
    assert [m.shape for m in state.m] == [(2, 3), (1, 3)]
    assert [v.shape for v in state.v] == [(2, 3), (1, 3)]


def test_clip_grad_norm():
    grads = [np.array([[3.0]]), np.array([[4.0]])]
    clipped, norm = ad.clip_grad_norm(grads, 1.0)
    assert norm == 5.0
    assert np.isclose(np.sqrt(sum(float(np.sum(g * g)) for g in clipped)), 1.0)
