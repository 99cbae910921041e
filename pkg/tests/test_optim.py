"""AdamW update rule, RNG determinism, and the finite-difference checker."""

import numpy as np
import pytest

from mmrag.errors import ContractError
from mmrag.optim import AdamW, Parameter, Rng, gradient_check
from mmrag.tensor import Tensor, cross_entropy


class TestAdamW:
    def test_zero_grad_zero_decay_is_noop(self):
        p = Parameter("p", np.array([1.0, 2.0]))
        p.tensor.grad = np.zeros(2)
        opt = AdamW([p], lr=0.1, weight_decay=0.0)
        opt.step()
        assert np.array_equal(p.data, [1.0, 2.0])

    def test_single_step_closed_form(self):
        # p=1, g=1, lr=0.1, b1=0.9, b2=0.99, decay=0:
        #   m = 0.1, v = 0.01, mhat = 1, vhat = 1
        #   p' = 1 - 0.1 * 1 / (sqrt(1) + eps)
        eps = 1e-8
        p = Parameter("p", np.array([1.0]))
        p.tensor.grad = np.array([1.0])
        opt = AdamW([p], lr=0.1, beta1=0.9, beta2=0.99, weight_decay=0.0, eps=eps)
        opt.step()
        expect = 1.0 - 0.1 * 1.0 / (1.0 + eps)
        assert abs(float(p.data[0]) - expect) < 1e-15

    def test_frozen_parameter_untouched(self):
        p = Parameter("p", np.array([3.0]), frozen=True)
        p.tensor.grad = np.array([5.0])  # even with a stray grad
        opt = AdamW([p], lr=0.5)
        opt.step()
        assert float(p.data[0]) == 3.0

    def test_all_frozen_noop(self):
        ps = [Parameter(f"p{i}", np.full(3, float(i)), frozen=True) for i in range(3)]
        before = [p.data.copy() for p in ps]
        AdamW(ps, lr=1.0).step()
        for p, b in zip(ps, before):
            assert np.array_equal(p.data, b)

    def test_missing_grad_raises(self):
        p = Parameter("p", np.ones(2))
        with pytest.raises(ContractError):
            AdamW([p]).step()

    def test_grads_untouched_by_step(self):
        p = Parameter("p", np.ones(2))
        p.tensor.grad = np.array([1.0, -1.0])
        AdamW([p], lr=0.1).step()
        assert np.array_equal(p.tensor.grad, [1.0, -1.0])

    def test_decoupled_decay_applies_to_parameter(self):
        # zero gradient, nonzero decay: parameter shrinks multiplicatively
        p = Parameter("p", np.array([2.0]))
        p.tensor.grad = np.array([0.0])
        AdamW([p], lr=0.1, weight_decay=0.5).step()
        assert abs(float(p.data[0]) - 2.0 * (1 - 0.1 * 0.5)) < 1e-15

    def test_step_counter_increases(self):
        p = Parameter("p", np.ones(1))
        opt = AdamW([p], lr=0.0, weight_decay=0.0)
        for k in range(3):
            p.tensor.grad = np.ones(1)
            opt.step()
            assert opt.state.step == k + 1


class TestRng:
    def test_equal_seeds_bit_identical(self):
        a = Rng(123).normal((100,))
        b = Rng(123).normal((100,))
        assert np.array_equal(a, b)

    def test_different_seeds_differ(self):
        assert not np.array_equal(Rng(1).normal((10,)), Rng(2).normal((10,)))

    def test_split_is_deterministic_and_independent(self):
        r = Rng(9)
        c1 = r.split("child").normal((5,))
        c2 = Rng(9).split("child").normal((5,))
        other = Rng(9).split("other").normal((5,))
        assert np.array_equal(c1, c2)
        assert not np.array_equal(c1, other)

    def test_split_does_not_consume_parent_stream(self):
        a = Rng(4)
        a.split("x")
        b = Rng(4)
        assert np.array_equal(a.normal((8,)), b.normal((8,)))


class TestGradientCheck:
    def test_linear_function_exact(self):
        p = Parameter("w", np.array([1.0, -2.0, 0.5]))
        c = Tensor(np.array([3.0, 1.0, -1.0]))

        def f():
            return (p.tensor * c).sum()

        assert gradient_check(f, [p], eps=1e-5) < 1e-10

    def test_softmax_cross_entropy(self):
        rng = Rng(2)
        p = Parameter("logits", rng.normal((2, 3)))

        def f():
            return cross_entropy(p.tensor, [0, 2])

        assert gradient_check(f, [p], eps=1e-5) < 1e-6

    def test_eps_contract(self):
        p = Parameter("w", np.ones(1))
        with pytest.raises(ContractError):
            gradient_check(lambda: p.tensor.sum(), [p], eps=1e-2)

    def test_frozen_params_skipped(self):
        p = Parameter("w", np.ones(2))
        q = Parameter("frozen", np.ones(2), frozen=True)

        def f():
            return (p.tensor * q.tensor).sum()

        assert gradient_check(f, [p, q], eps=1e-5) < 1e-10
