import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dmjd import autodiff as ad
from dmjd.autodiff import Tensor
from dmjd.errors import ContractError, DimensionError, NumericError, TapeError


@pytest.fixture(autouse=True)
def float64():
    with ad.precision(np.float64):
        yield


def leaf(rng, *shape, scale=1.0):
    return Tensor(rng.normal(size=shape) * scale, requires_grad=True)


def naive_matmul(a, b):
    m, k = a.shape
    p = b.shape[1]
    out = np.zeros((m, p))
    for i in range(m):
        for j in range(p):
            for t in range(k):
                out[i, j] += a[i, t] * b[t, j]
    return out


# -- forward values -----------------------------------------------------------------

def test_matmul_identity_and_zero():
    b = np.arange(15.0).reshape(3, 5)
    assert np.array_equal((Tensor(np.eye(3)) @ Tensor(b)).data, b)
    assert np.array_equal((Tensor(np.zeros((2, 3))) @ Tensor(b)).data, np.zeros((2, 5)))


def test_matmul_matches_triple_loop():
    rng = np.random.default_rng(3)
    a, b = rng.normal(size=(4, 3)), rng.normal(size=(3, 5))
    np.testing.assert_allclose((Tensor(a) @ Tensor(b)).data, naive_matmul(a, b), rtol=1e-12, atol=1e-12)


def test_matmul_shape_mismatch():
    with pytest.raises(DimensionError):
        Tensor(np.ones((2, 3))) @ Tensor(np.ones((4, 2)))


def test_layer_norm_constant_row_is_zero():
    out = ad.layer_norm(Tensor(np.full((1, 6), 3.5)), Tensor(np.ones(6)), Tensor(np.zeros(6)))
    assert np.array_equal(out.data, np.zeros((1, 6)))


def test_layer_norm_standardized_row_unchanged():
    out = ad.layer_norm(Tensor([[1.0, -1.0]]), Tensor(np.ones(2)), Tensor(np.zeros(2)), eps=1e-15)
    np.testing.assert_allclose(out.data, [[1.0, -1.0]], atol=1e-12)


def test_layer_norm_rows_standardized():
    x = np.random.default_rng(0).normal(2.0, 3.0, size=(5, 16))
    out = ad.layer_norm(Tensor(x)).data
    np.testing.assert_allclose(out.mean(axis=-1), 0.0, atol=1e-12)
    np.testing.assert_allclose(out.var(axis=-1), 1.0, atol=1e-5)


def test_softmax_uniform():
    np.testing.assert_allclose(ad.softmax(Tensor([0.0, 0.0, 0.0])).data, [1 / 3] * 3, rtol=0, atol=1e-15)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=12))
def test_softmax_is_a_distribution(row):
    p = ad.softmax(Tensor(np.array(row))).data
    assert (p >= 0).all()
    assert abs(p.sum() - 1.0) <= 1e-6


def test_gelu_fixed_point_and_exact_form():
    assert ad.gelu(Tensor([0.0])).data[0] == 0.0
    x = np.linspace(-4, 4, 17)
    ref = [0.5 * v * (1 + math.erf(v / math.sqrt(2))) for v in x]
    np.testing.assert_allclose(ad.gelu(Tensor(x)).data, ref, rtol=1e-14, atol=1e-15)


def test_gather_rows_identity_and_range():
    x = Tensor(np.arange(12.0).reshape(4, 3))
    assert np.array_equal(ad.gather_rows(x, np.arange(4)).data, x.data)
    with pytest.raises(IndexError):
        ad.gather_rows(x, np.array([0, 4]))
    with pytest.raises(IndexError):
        ad.gather_rows(x, np.array([-1]))


def test_broadcast_mismatch_is_dimension_error():
    with pytest.raises(DimensionError):
        Tensor(np.ones((2, 3))) + Tensor(np.ones((4,)))


def test_non_finite_forward_raises():
    with pytest.raises(NumericError):
        Tensor([1.0, 2.0]) * Tensor([np.inf, 1.0])


def test_float32_default_outside_checks():
    with ad.precision(np.float32):
        assert Tensor([1.0]).dtype == np.float32


def test_forward_is_deterministic():
    def run():
        rng = np.random.default_rng(11)
        x, w = Tensor(rng.normal(size=(3, 8, 16))), Tensor(rng.normal(size=(16, 16)))
        return ad.softmax(ad.layer_norm(ad.gelu(x @ w))).data
    assert np.array_equal(run(), run())


# -- backward ------------------------------------------------------------------------

def test_backward_of_sum_is_ones():
    x = leaf(np.random.default_rng(0), 3, 4)
    ad.backward(x.sum())
    assert np.array_equal(x.grad, np.ones((3, 4)))


def test_backward_accumulates_reuse():
    x = leaf(np.random.default_rng(0), 5)
    ad.backward(x.sum() + x.sum())
    assert np.array_equal(x.grad, np.full(5, 2.0))


def test_backward_rejects_non_scalar():
    x = leaf(np.random.default_rng(0), 2, 2)
    with pytest.raises(ContractError):
        ad.backward(x * 2.0)


def test_second_backward_is_lifecycle_error():
    x = leaf(np.random.default_rng(0), 3)
    loss = (x * x).sum()
    ad.backward(loss)
    with pytest.raises(TapeError):
        ad.backward(loss)


def test_tape_is_topological():
    rng = np.random.default_rng(1)
    a, b = leaf(rng, 2, 3), leaf(rng, 3, 2)
    h = ad.gelu(a @ b)
    loss = (h * h + h).sum()
    tape = ad.Tape.record(loss)
    pos = {id(n): i for i, n in enumerate(tape.nodes)}
    for node in tape.nodes:
        for p in node._parents:
            if p.requires_grad:
                assert pos[id(p)] < pos[id(node)]


def test_independent_subgraphs_backward_separately():
    rng = np.random.default_rng(2)
    xa, xb = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))

    def part_a(t):
        return (ad.gelu(t) * t).sum()

    def part_b(t):
        return ad.softmax(t).mean()

    a, b = Tensor(xa, requires_grad=True), Tensor(xb, requires_grad=True)
    ad.backward(part_a(a) + part_b(b))
    a2, b2 = Tensor(xa, requires_grad=True), Tensor(xb, requires_grad=True)
    ad.backward(part_a(a2))
    ad.backward(part_b(b2))
    np.testing.assert_allclose(a.grad, a2.grad, rtol=0, atol=1e-15)
    np.testing.assert_allclose(b.grad, b2.grad, rtol=0, atol=1e-15)


def test_matmul_sum_gradient_finite_difference():
    rng = np.random.default_rng(4)
    a, b = leaf(rng, 4, 3), leaf(rng, 3, 5)
    report = ad.grad_check(lambda: (a @ b).sum(), [a, b], tol=1e-5)
    assert report.passed, report


def test_no_grad_builds_no_graph():
    x = leaf(np.random.default_rng(0), 3)
    with ad.no_grad():
        y = (x * x).sum()
    assert not y.requires_grad


# -- finite-difference checks per op ----------------------------------------------------

def _op_cases(rng):
    x3 = leaf(rng, 2, 3, 4)
    w = leaf(rng, 4, 5)
    y3 = leaf(rng, 2, 3, 4)
    g, bias = leaf(rng, 4), leaf(rng, 4)
    row_bias = leaf(rng, 4)
    idx = rng.integers(0, 3, size=(2, 5))
    weights = rng.normal(size=(2, 3, 4))
    return {
        "add_broadcast": (lambda: ((x3 + row_bias) * weights).sum(), [x3, row_bias]),
        "sub": (lambda: ((x3 - y3) * weights).sum(), [x3, y3]),
        "mul": (lambda: (x3 * y3).sum(), [x3, y3]),
        "scale": (lambda: (ad.scale(x3, -2.5) * weights).sum(), [x3]),
        "gelu": (lambda: (ad.gelu(x3) * weights).sum(), [x3]),
        "softmax": (lambda: (ad.softmax(x3) * weights).sum(), [x3]),
        "mean": (lambda: ad.mean(x3 * y3, axis=1).sum() + ad.mean(x3), [x3, y3]),
        "matmul_batched": (lambda: ((x3 @ w) * (x3 @ w)).mean(), [x3, w]),
        "layer_norm": (lambda: (ad.layer_norm(x3, g, bias) * weights).sum(), [x3, g, bias]),
        "gather_rows": (lambda: (ad.gather_rows(x3, idx) * ad.gather_rows(y3, idx)).sum(), [x3, y3]),
        "transpose_reshape": (lambda: (x3.transpose(0, 2, 1).reshape(2, 12)
                                       @ w.reshape(4, 5)[:, :3].reshape(12, 1)).sum(), [x3, w]),
        "concat_index": (lambda: (ad.concat([x3, y3], axis=1)[:, 1:5]
                                  * ad.concat([weights, weights], axis=1)[:, 1:5]).sum(), [x3, y3]),
        "smooth_l1": (lambda: ad.smooth_l1(ad.scale(x3 - y3, 2.0), 2.0).sum(), [x3, y3]),
    }


@pytest.mark.parametrize("op", list(_op_cases(np.random.default_rng(0))))
def test_op_gradients_match_finite_differences(op):
    for trial in range(50):
        f, inputs = _op_cases(np.random.default_rng(1000 + trial))[op]
        report = ad.grad_check(f, inputs, tol=1e-4)
        assert report.passed, f"{op} trial {trial}: {report}"


def test_grad_check_identity_sum_is_exact():
    x = leaf(np.random.default_rng(0), 4, 4)
    assert ad.grad_check(lambda: x.sum(), x, tol=1e-12).max_rel_error < 1e-9


def test_grad_check_detects_wrong_adjoint():
    x = leaf(np.random.default_rng(0), 6)

    def bad_square(t):
        return ad.make_op(t.data ** 2, (t,), lambda g: (g * t.data,), "bad_square")  # missing factor 2

    report = ad.grad_check(lambda: bad_square(x).sum(), x, tol=1e-4)
    assert not report.passed
    assert report.max_rel_error > 0.1


def test_grad_check_requires_float64():
    with ad.precision(np.float32):
        x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ValueError):
        ad.grad_check(lambda: x.sum(), x)


def test_grad_check_non_finite_objective():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)

    def explode():
        return ad.make_op(np.array(np.inf), (x,), lambda g: (np.zeros(2),), "explode")

    with pytest.raises(NumericError):
        ad.grad_check(explode, x)
