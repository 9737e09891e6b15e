"""Tensor/autodiff contracts: oracles, analytic cases, and fail-fast checks."""

import numpy as np
import pytest

from hstgmatch.errors import DimensionError, NumericError
from hstgmatch.tensor import (Tensor, concat, cross_entropy, gather_rows, getitem,
                              grad_check, layernorm, log_softmax, matmul, relu,
                              softmax, tanh, texp, tlog, transpose, tsqrt)


def naive_matmul(a, b):
    m, k = a.shape
    k2, n = b.shape
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            for p in range(k):
                out[i, j] += a[i, p] * b[p, j]
    return out


class TestMatmul:
    def test_identity(self):
        a = Tensor([[1.0, 2.0], [3.0, 4.0]])
        out = matmul(Tensor(np.eye(2)), a)
        np.testing.assert_array_equal(out.data, a.data)

    def test_worked_example(self):
        out = matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[5.0, 6.0], [7.0, 8.0]]))
        np.testing.assert_array_equal(out.data, [[19.0, 22.0], [43.0, 50.0]])

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))

    def test_against_triple_loop_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(10):
            m, k, n = rng.integers(1, 33, size=3)
            a = rng.normal(size=(m, k))
            b = rng.normal(size=(k, n))
            got = matmul(Tensor(a), Tensor(b)).data
            np.testing.assert_allclose(got, naive_matmul(a, b), atol=1e-12)

    def test_gradients_flow_to_both_inputs(self):
        rng = np.random.default_rng(1)
        a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        b = Tensor(rng.normal(size=(4, 2)), requires_grad=True)
        err = grad_check(lambda: (matmul(a, b) * matmul(a, b)).sum(), [a, b])
        assert err < 1e-6

    def test_batched(self):
        rng = np.random.default_rng(2)
        a = rng.normal(size=(2, 3, 4))
        b = rng.normal(size=(2, 4, 5))
        got = matmul(Tensor(a), Tensor(b)).data
        np.testing.assert_allclose(got, np.einsum("bik,bkj->bij", a, b), atol=1e-12)


class TestSoftmax:
    def test_symmetry(self):
        out = softmax(Tensor([0.0, 0.0]), axis=0)
        np.testing.assert_allclose(out.data, [0.5, 0.5], atol=1e-15)

    def test_analytic(self):
        out = softmax(Tensor([np.log(2.0), 0.0]), axis=0)
        np.testing.assert_allclose(out.data, [2 / 3, 1 / 3], atol=1e-15)

    def test_sums_to_one_and_positive(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            x = rng.normal(scale=5.0, size=7)
            out = softmax(Tensor(x), axis=0).data
            assert abs(out.sum() - 1.0) < 1e-12
            assert (out > 0).all()

    def test_empty_axis_rejected(self):
        with pytest.raises(DimensionError):
            softmax(Tensor(np.zeros((2, 0))), axis=-1)

    def test_gradient(self):
        rng = np.random.default_rng(4)
        x = Tensor(rng.normal(size=(2, 5)), requires_grad=True)
        w = rng.normal(size=(2, 5))
        err = grad_check(lambda: (softmax(x, axis=-1) * w).sum(), [x])
        assert err < 1e-6


class TestCrossEntropy:
    def test_uniform_logits(self):
        loss = cross_entropy(Tensor(np.zeros((1, 4))), [1])
        assert abs(loss.item() - np.log(4.0)) < 1e-12

    def test_margin_limit(self):
        logits = np.zeros((1, 3))
        logits[0, 2] = 60.0
        loss = cross_entropy(Tensor(logits), [2])
        assert loss.item() < 1e-20

    def test_direct_formula_oracle(self):
        rng = np.random.default_rng(5)
        z = rng.normal(size=(3, 5))
        t = rng.integers(0, 5, size=3)
        p = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
        expected = -np.log(p[np.arange(3), t]).sum()
        got = cross_entropy(Tensor(z), t).item()
        assert abs(got - expected) < 1e-12

    def test_nonnegative(self):
        rng = np.random.default_rng(6)
        for _ in range(20):
            z = rng.normal(scale=3.0, size=(4, 6))
            t = rng.integers(0, 6, size=4)
            assert cross_entropy(Tensor(z), t).item() >= 0.0

    def test_out_of_range_target(self):
        with pytest.raises(IndexError):
            cross_entropy(Tensor(np.zeros((2, 3))), [0, 3])

    def test_gradient(self):
        rng = np.random.default_rng(7)
        z = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
        t = np.array([2, 0])
        err = grad_check(lambda: cross_entropy(z, t), [z])
        assert err < 1e-6


class TestGradCheck:
    def test_square(self):
        x = Tensor([3.0], requires_grad=True)
        err = grad_check(lambda: (x * x).sum(), [x])
        assert err < 1e-8
        x.grad = None
        loss = (x * x).sum()
        loss.backward()
        assert abs(x.grad[0] - 6.0) < 1e-12

    def test_softmax_cross_entropy(self):
        rng = np.random.default_rng(8)
        z = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
        err = grad_check(lambda: cross_entropy(z, [1, 2]), [z])
        assert err < 1e-6

    def test_composite_ops(self):
        rng = np.random.default_rng(9)
        x = Tensor(rng.uniform(0.5, 2.0, size=(3, 4)), requires_grad=True)
        g = Tensor(np.ones(4), requires_grad=True)
        b = Tensor(np.zeros(4), requires_grad=True)

        def f():
            y = layernorm(tanh(x) + tsqrt(x), g, b)
            return (texp(y * 0.3) + tlog(x) + relu(y)).sum()

        assert grad_check(f, [x, g, b]) < 1e-6

    def test_gather_and_getitem(self):
        rng = np.random.default_rng(10)
        table = Tensor(rng.normal(size=(5, 3)), requires_grad=True)
        idx = np.array([[0, 2], [4, 2]])

        def f():
            picked = gather_rows(table, idx)
            sliced = getitem(picked, (np.array([0, 1, 1]), np.array([1, 0, 1])))
            return (picked * picked).sum() + (sliced * 2.0).sum()

        assert grad_check(f, [table]) < 1e-6

    def test_concat_transpose(self):
        rng = np.random.default_rng(11)
        a = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
        b = Tensor(rng.normal(size=(2, 2)), requires_grad=True)

        def f():
            c = concat([a, b], axis=1)
            return (transpose(c) * transpose(c)).sum()

        assert grad_check(f, [a, b]) < 1e-6


class TestFailFast:
    def test_log_of_negative(self):
        with pytest.raises(NumericError):
            tlog(Tensor([-1.0]))

    def test_nan_input(self):
        with pytest.raises(NumericError):
            Tensor([np.nan])

    def test_exp_overflow(self):
        with pytest.raises(NumericError):
            texp(Tensor([1e6]))

    def test_div_by_zero(self):
        with pytest.raises(NumericError):
            Tensor([1.0]) / Tensor([0.0])


class TestLogSoftmax:
    def test_matches_log_of_softmax(self):
        rng = np.random.default_rng(12)
        x = rng.normal(size=(3, 4))
        np.testing.assert_allclose(log_softmax(Tensor(x)).data,
                                   np.log(softmax(Tensor(x)).data), atol=1e-12)


class TestBackwardMechanics:
    def test_scalar_root_required(self):
        x = Tensor(np.ones((2, 2)), requires_grad=True)
        with pytest.raises(DimensionError):
            (x * 2.0).backward()

    def test_grad_accumulates_over_reuse(self):
        x = Tensor([2.0], requires_grad=True)
        y = x * 3.0 + x * 4.0
        y.sum().backward()
        assert abs(x.grad[0] - 7.0) < 1e-12

    def test_no_graph_without_requires_grad(self):
        x = Tensor([1.0])
        y = x * 2.0
        assert y._parents == () and y._backward is None
