"""Core tensor ops against trivial identities and straight-line oracles."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mmrag.errors import ContractError, ShapeError
from mmrag.optim import Rng
from mmrag.tensor import (Tensor, concat, cross_entropy, layer_norm, matmul,
                          no_grad, softmax, take_rows)


def naive_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Independent triple-loop oracle."""
    m, k = a.shape
    k2, n = b.shape
    assert k == k2
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for t in range(k):
                acc += a[i, t] * b[t, j]
            out[i, j] = acc
    return out


class TestMatmul:
    def test_identity(self):
        eye = Tensor(np.eye(2))
        out = matmul(eye, Tensor(np.eye(2)))
        assert np.array_equal(out.data, np.eye(2))

    def test_forced_values(self):
        a = Tensor([[1.0, 2.0], [3.0, 4.0]])
        b = Tensor([[0.0], [1.0]])
        assert np.array_equal(matmul(a, b).data, [[2.0], [4.0]])

    def test_seeded_against_triple_loop(self):
        rng = Rng(7)
        a = rng.normal((3, 4))
        b = rng.normal((4, 2))
        got = matmul(Tensor(a), Tensor(b)).data
        assert np.allclose(got, naive_matmul(a, b), atol=1e-14, rtol=0)

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(ShapeError) as exc:
            matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))))
        assert "(2, 3)" in str(exc.value) and "(4, 2)" in str(exc.value)

    def test_gradient_flows_to_both_operands(self):
        a = Tensor(np.ones((2, 3)), requires_grad=True)
        b = Tensor(np.ones((3, 2)), requires_grad=True)
        matmul(a, b).sum().backward()
        assert a.grad is not None and b.grad is not None
        assert np.allclose(a.grad, 2.0)
        assert np.allclose(b.grad, 2.0)


class TestSoftmax:
    def test_uniform_logits(self):
        out = softmax(Tensor([0.0, 0.0, 0.0, 0.0]))
        assert np.allclose(out.data, 0.25, atol=1e-15)

    def test_forced_quarter_three_quarters(self):
        out = softmax(Tensor([0.0, np.log(3.0)]))
        assert np.allclose(out.data, [0.25, 0.75], atol=1e-12)

    def test_large_logits_stay_finite(self):
        out = softmax(Tensor([1000.0, 1001.0]))
        # oracle: shift by the max, then plain softmax
        z = np.array([1000.0, 1001.0]) - 1001.0
        expect = np.exp(z) / np.exp(z).sum()
        assert np.all(np.isfinite(out.data))
        assert np.allclose(out.data, expect, atol=1e-12)
        assert np.allclose(out.data, [0.26894142137, 0.73105857863], atol=1e-9)

    @given(st.lists(st.floats(-50, 50), min_size=1, max_size=8),
           st.floats(-30, 30))
    @settings(max_examples=100, deadline=None)
    def test_rows_sum_to_one_and_shift_invariant(self, xs, c):
        x = np.array(xs)
        out = softmax(Tensor(x)).data
        assert abs(out.sum() - 1.0) < 1e-12
        shifted = softmax(Tensor(x + c)).data
        assert np.allclose(out, shifted, atol=1e-12)
        assert np.all(out > 0)


class TestCrossEntropy:
    def test_zero_logits_two_classes(self):
        loss = cross_entropy(Tensor(np.zeros((1, 2))), [0])
        assert abs(loss.item() - np.log(2.0)) < 1e-12

    def test_saturated_logit(self):
        loss = cross_entropy(Tensor([[50.0, 0.0]]), [0])
        assert loss.item() < 1e-9

    def test_seeded_against_direct_oracle(self):
        rng = Rng(11)
        logits = rng.normal((2, 3))
        targets = [2, 0]
        # oracle: explicit shifted softmax + log, per row
        expect = 0.0
        for r, t in enumerate(targets):
            z = logits[r] - logits[r].max()
            p = np.exp(z) / np.exp(z).sum()
            expect -= np.log(p[t])
        expect /= 2
        loss = cross_entropy(Tensor(logits), targets)
        assert abs(loss.item() - expect) < 1e-12

    def test_out_of_range_target(self):
        with pytest.raises(IndexError):
            cross_entropy(Tensor(np.zeros((1, 3))), [3])

    def test_nonnegative(self):
        rng = Rng(3)
        loss = cross_entropy(Tensor(rng.normal((4, 5))), [0, 1, 2, 3])
        assert loss.item() >= 0.0


class TestBackward:
    def test_sum_gives_ones(self):
        p = Tensor(np.arange(6, dtype=float).reshape(2, 3), requires_grad=True)
        p.sum().backward()
        assert np.array_equal(p.grad, np.ones((2, 3)))

    def test_quadratic_gives_parameter(self):
        data = np.array([1.5, -2.0, 0.25])
        p = Tensor(data, requires_grad=True)
        ((p * p).sum() * 0.5).backward()
        assert np.allclose(p.grad, data, atol=1e-15)

    def test_non_scalar_loss_rejected(self):
        p = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ContractError):
            (p * 2.0).backward()

    def test_repeated_backward_accumulates(self):
        p = Tensor(np.ones(2), requires_grad=True)
        loss = p.sum()
        loss.backward()
        loss.backward()
        assert np.allclose(p.grad, 2.0)

    def test_shared_subgraph(self):
        x = Tensor(2.0, requires_grad=True)
        y = Tensor(-4.0, requires_grad=True)
        q = (x + y) * (x + 1.0)
        q.backward()
        assert abs(float(x.grad) - 1.0) < 1e-14
        assert abs(float(y.grad) - 3.0) < 1e-14

    def test_no_grad_suppresses_tape(self):
        p = Tensor(np.ones(2), requires_grad=True)
        with no_grad():
            out = (p * 3.0).sum()
        assert out._backward is None and not out.requires_grad

    def test_frozen_leaf_receives_no_grad(self):
        frozen = Tensor(np.ones(3), requires_grad=False)
        live = Tensor(np.ones(3), requires_grad=True)
        (frozen * live).sum().backward()
        assert frozen.grad is None
        assert np.allclose(live.grad, 1.0)


class TestShapeOps:
    def test_concat_backward_splits(self):
        a = Tensor(np.ones((2, 2)), requires_grad=True)
        b = Tensor(np.ones((3, 2)), requires_grad=True)
        concat([a, b], axis=0).sum().backward()
        assert a.grad.shape == (2, 2) and b.grad.shape == (3, 2)

    def test_take_rows_scatters_gradient(self):
        w = Tensor(np.arange(12, dtype=float).reshape(4, 3), requires_grad=True)
        take_rows(w, [1, 1, 3]).sum().backward()
        expect = np.zeros((4, 3))
        expect[1] = 2.0
        expect[3] = 1.0
        assert np.array_equal(w.grad, expect)

    def test_getitem_backward(self):
        x = Tensor(np.arange(6, dtype=float).reshape(2, 3), requires_grad=True)
        x[0].sum().backward()
        assert np.array_equal(x.grad, [[1, 1, 1], [0, 0, 0]])

    def test_broadcast_add_unbroadcasts(self):
        a = Tensor(np.ones((2, 3)), requires_grad=True)
        b = Tensor(np.ones(3), requires_grad=True)
        (a + b).sum().backward()
        assert a.grad.shape == (2, 3)
        assert np.array_equal(b.grad, [2.0, 2.0, 2.0])

    def test_layer_norm_normalizes(self):
        rng = Rng(5)
        x = Tensor(rng.normal((4, 8)))
        out = layer_norm(x, Tensor(np.ones(8)), Tensor(np.zeros(8)))
        assert np.allclose(out.data.mean(axis=-1), 0.0, atol=1e-12)
        assert np.allclose(out.data.std(axis=-1), 1.0, atol=1e-3)
