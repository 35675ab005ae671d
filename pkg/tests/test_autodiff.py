import numpy as np
import pytest
from helpers import check_param_grads

from milliflow import autodiff as ad
from milliflow.autodiff import Tensor, no_grad
from milliflow.errors import ShapeMismatch


def leaf(rng, *shape):
    return Tensor(rng.normal(size=shape), requires_grad=True)


class TestBasics:
    def test_scalar_chain(self):
        x = Tensor(3.0, requires_grad=True)
        y = (x * x) * 2.0 + x
        y.backward()
        assert y.item() == pytest.approx(21.0)
        assert x.grad == pytest.approx(13.0)  # 4x + 1

    def test_backward_requires_scalar(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ShapeMismatch):
            (x * 2.0).backward()

    def test_grad_accumulates_over_reuse(self):
        x = Tensor(2.0, requires_grad=True)
        y = x * x + x * 3.0  # x used twice
        y.backward()
        assert x.grad == pytest.approx(7.0)

    def test_no_grad_blocks_tape(self):
        x = Tensor(2.0, requires_grad=True)
        with no_grad():
            y = x * x
        assert not y.requires_grad
        assert y._backward is None

    def test_detach(self):
        x = Tensor(np.arange(3.0), requires_grad=True)
        d = x.detach()
        assert not d.requires_grad
        assert np.shares_memory(d.data, x.data)

    def test_broadcasting_unbroadcast(self):
        a = Tensor(np.ones((4, 3)), requires_grad=True)
        b = Tensor(np.ones(3), requires_grad=True)
        (a + b).sum().backward()
        assert a.grad.shape == (4, 3)
        assert b.grad.shape == (3,)
        np.testing.assert_array_equal(b.grad, [4.0, 4.0, 4.0])

    def test_dtype_preserved_float32(self):
        a = Tensor(np.ones((2, 2), dtype=np.float32), requires_grad=True)
        out = ad.relu(a * 2.0 + 0.5)
        assert out.dtype == np.float32
        out.sum().backward()
        assert a.grad.dtype == np.float32


class TestOpGradients:
    def test_elementwise_ops(self):
        rng = np.random.default_rng(0)
        a = leaf(rng, 4, 3)
        b = leaf(rng, 4, 3)
        both = {"a": a, "b": b}
        only_a = {"a": a}
        cases = [
            (lambda: (a + b).sum(), both),
            (lambda: (a * b).sum(), both),
            (lambda: (a - b).sum(), both),
            (lambda: (a**2.0).sum(), only_a),
            (lambda: ad.relu(a).sum(), only_a),
            (lambda: ad.exp(a * 0.3).sum(), only_a),
            (lambda: ad.tanh(a).sum(), only_a),
            (lambda: ad.sigmoid(a).sum(), only_a),
            (lambda: (a * b).mean(), both),
            (lambda: (a / ad.exp(b)).sum(), both),
        ]
        for i, (fn, tensors) in enumerate(cases):
            check_param_grads(fn, tensors, seed=i)

    def test_log_grad(self):
        rng = np.random.default_rng(1)
        a = Tensor(rng.uniform(0.5, 2.0, size=(5,)), requires_grad=True)
        check_param_grads(lambda: ad.log(a).sum(), {"a": a})

    def test_matmul_grad(self):
        rng = np.random.default_rng(2)
        a = leaf(rng, 4, 5)
        b = leaf(rng, 5, 3)
        check_param_grads(lambda: (a @ b).sum(), {"a": a, "b": b})

    def test_batched_matmul_grad(self):
        rng = np.random.default_rng(3)
        a = leaf(rng, 2, 4, 5)
        b = leaf(rng, 5, 3)  # broadcast over batch
        check_param_grads(lambda: ((a @ b) * (a @ b)).sum(), {"a": a, "b": b})

    def test_linear_grad(self):
        rng = np.random.default_rng(4)
        x = leaf(rng, 7, 4)
        w = leaf(rng, 4, 3)
        b = leaf(rng, 3)
        check_param_grads(
            lambda: ad.relu(ad.linear(x, w, b)).sum(), {"x": x, "w": w, "b": b}
        )

    def test_linear_shape_error(self):
        rng = np.random.default_rng(5)
        with pytest.raises(ShapeMismatch):
            ad.linear(leaf(rng, 3, 4), leaf(rng, 5, 2), leaf(rng, 2))

    def test_reductions_and_reshape(self):
        rng = np.random.default_rng(6)
        a = leaf(rng, 3, 4, 2)
        cases = [
            lambda: a.sum(axis=1).mean(),
            lambda: a.max(axis=2).sum(),
            lambda: a.reshape(6, 4).sum(axis=0).max(),
            lambda: a.transpose(2, 0, 1).sum(),
        ]
        for i, fn in enumerate(cases):
            check_param_grads(fn, {"a": a}, seed=i)

    def test_max_tie_gradient_splits(self):
        a = Tensor(np.array([1.0, 1.0, 0.0]), requires_grad=True)
        ad.tmax(a).backward()
        np.testing.assert_allclose(a.grad, [0.5, 0.5, 0.0])

    def test_concat_grad(self):
        rng = np.random.default_rng(7)
        a = leaf(rng, 3, 2)
        b = leaf(rng, 3, 5)
        check_param_grads(
            lambda: (ad.concat([a, b], axis=1) ** 2.0).sum(), {"a": a, "b": b}
        )

    def test_concat_same_tensor_twice(self):
        a = Tensor(np.ones(3), requires_grad=True)
        ad.concat([a, a], axis=0).sum().backward()
        np.testing.assert_array_equal(a.grad, [2.0, 2.0, 2.0])

    def test_take_gather_grad(self):
        rng = np.random.default_rng(8)
        a = leaf(rng, 6, 3)
        idx = np.array([[0, 2], [2, 2], [5, 1]])
        check_param_grads(lambda: (ad.take(a, idx) ** 2.0).sum(), {"a": a})
        a.zero_grad()
        ad.take(a, np.array([2, 2, 2])).sum().backward()
        assert a.grad[2, 0] == pytest.approx(3.0)  # repeated rows accumulate

    def test_clamp_grad_and_values(self):
        a = Tensor(np.array([-2.0, 0.05, 2.0]), requires_grad=True)
        out = ad.clamp(a, -0.1, 0.1)
        np.testing.assert_allclose(out.data, [-0.1, 0.05, 0.1])
        out.sum().backward()
        np.testing.assert_allclose(a.grad, [0.0, 1.0, 0.0])

    def test_softmax_properties_and_grad(self):
        rng = np.random.default_rng(9)
        a = leaf(rng, 5, 4)
        s = ad.softmax(a, axis=0)
        assert np.all(s.data > 0)
        np.testing.assert_allclose(s.data.sum(axis=0), np.ones(4), atol=1e-12)
        # large logits remain finite
        big = ad.softmax(Tensor(np.array([1e4, 0.0, -1e4])), axis=0)
        assert np.all(np.isfinite(big.data))
        check_param_grads(lambda: (ad.softmax(a, axis=0) * ad.tanh(a)).sum(), {"a": a})

    def test_norm_guard_at_zero(self):
        a = Tensor(np.zeros((2, 3)), requires_grad=True)
        n = ad.norm(a, axis=1)
        assert np.all(np.isfinite(n.data))
        n.sum().backward()
        assert np.all(np.isfinite(a.grad))

    def test_norm_grad(self):
        rng = np.random.default_rng(10)
        a = leaf(rng, 4, 3)
        check_param_grads(lambda: ad.norm(a, axis=1).sum(), {"a": a})

    def test_maximum_minimum_grad(self):
        rng = np.random.default_rng(11)
        a = leaf(rng, 8)
        b = leaf(rng, 8)
        check_param_grads(lambda: ad.maximum(a, b).sum(), {"a": a, "b": b})
        check_param_grads(lambda: ad.minimum(a, b).sum(), {"a": a, "b": b}, seed=1)


class TestGraph:
    def test_deep_chain_no_recursion_limit(self):
        x = Tensor(1.0, requires_grad=True)
        y = x
        for _ in range(3000):
            y = y * 1.0001
        y.backward()
        assert np.isfinite(x.grad)

    def test_diamond_graph(self):
        x = Tensor(2.0, requires_grad=True)
        a = x * 3.0
        b = x * 4.0
        y = a * b  # dy/dx = 2 * 12 * x = 48
        y.backward()
        assert x.grad == pytest.approx(48.0)
