"""Tensor arithmetic and reverse-mode gradients."""

import math
import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.signal import correlate2d
from scipy.stats import norm

from cxrvit import tensor as T
from cxrvit.errors import ContractError, DimensionError, NonFiniteError
from cxrvit.tensor import Tensor, gradcheck

from gradcases import OPS, _case, random_cases


def leaf(data):
    return Tensor(np.asarray(data, dtype=np.float64), requires_grad=True)


class TestMatmul:
    def test_identity(self):
        a = Tensor([[1.0, 2.0], [3.0, 4.0]])
        np.testing.assert_array_equal(T.matmul(Tensor(np.eye(2)), a).data, a.data)

    def test_against_loops(self):
        a = [[1.0, 2.0], [3.0, 4.0]]
        b = [[5.0], [6.0]]
        expected = [[sum(a[i][k] * b[k][j] for k in range(2)) for j in range(1)] for i in range(2)]
        np.testing.assert_array_equal((Tensor(a) @ Tensor(b)).data, expected)
        assert expected == [[17.0], [39.0]]

    def test_zero_matrix(self):
        a = Tensor(np.random.default_rng(0).standard_normal((3, 4)))
        assert not (a @ Tensor(np.zeros((4, 2)))).data.any()

    def test_shape_mismatch_names_shapes(self):
        with pytest.raises(DimensionError, match=r"\(2, 3\).*\(4, 2\)"):
            T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))

    def test_identity_associativity_bitwise(self):
        rng = np.random.default_rng(1)
        a, b = Tensor(rng.standard_normal((3, 4))), Tensor(rng.standard_normal((4, 2)))
        left = (a @ Tensor(np.eye(4))) @ b
        assert np.array_equal(left.data, (a @ b).data)

    def test_backward_rule(self):
        rng = np.random.default_rng(2)
        a, b = leaf(rng.standard_normal((3, 4))), leaf(rng.standard_normal((4, 2)))
        g = rng.standard_normal((3, 2))
        T.backward(T.tsum((a @ b) * Tensor(g)))
        np.testing.assert_allclose(a.grad, g @ b.data.T)
        np.testing.assert_allclose(b.grad, a.data.T @ g)


class TestSoftmax:
    def test_uniform(self):
        np.testing.assert_allclose(T.softmax(Tensor([0.0, 0.0, 0.0])).data, [1 / 3] * 3)

    def test_shift_invariance(self):
        x = np.array([0.3, -1.2, 2.0])
        np.testing.assert_allclose(T.softmax(Tensor(x + 50.0)).data, T.softmax(Tensor(x)).data, atol=1e-15)

    def test_exp_normalize_oracle(self):
        e = np.exp([1.0, 2.0, 3.0])
        np.testing.assert_allclose(T.softmax(Tensor([1.0, 2.0, 3.0])).data, e / e.sum(), atol=1e-12)

    def test_large_logits_stay_finite(self):
        out = T.softmax(Tensor([1000.0, 1000.0, -1000.0])).data
        np.testing.assert_allclose(out, [0.5, 0.5, 0.0])

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(-30, 30), min_size=1, max_size=8))
    def test_rows_sum_to_one(self, values):
        out = T.softmax(Tensor(np.array([values, values[::-1]])), axis=-1).data
        assert (out >= 0).all()
        np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-9)


class TestLayerNorm:
    def test_constant_vector(self):
        out = T.layer_norm(Tensor(np.full(4, 3.0)), Tensor(np.ones(4)), Tensor(np.zeros(4)))
        assert not out.data.any()

    def test_zero_gamma(self):
        x = Tensor(np.random.default_rng(0).standard_normal((2, 3)))
        out = T.layer_norm(x, Tensor(np.zeros(3)), Tensor([0.5, -1.0, 2.0]))
        np.testing.assert_array_equal(out.data, np.tile([0.5, -1.0, 2.0], (2, 1)))

    def test_direct_formula(self):
        x = np.array([1.0, 2.0, 3.0])
        expected = (x - x.mean()) / np.sqrt(x.var() + 1e-6)
        out = T.layer_norm(Tensor(x), Tensor(np.ones(3)), Tensor(np.zeros(3)))
        np.testing.assert_allclose(out.data, expected, atol=1e-12)


class TestGelu:
    def test_zero(self):
        assert T.gelu(Tensor([0.0])).data[0] == 0.0

    def test_large_input(self):
        np.testing.assert_allclose(T.gelu(Tensor([12.0])).data, [12.0])

    def test_matches_exact_cdf(self):
        assert abs(T.gelu(Tensor([1.0])).data[0] - 1.0 * norm.cdf(1.0)) < 1e-3


class TestConv2d:
    def test_identity_kernel(self):
        x = np.random.default_rng(0).standard_normal((1, 1, 4, 4))
        out = T.conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1))))
        np.testing.assert_array_equal(out.data, x)

    def test_ones_kernel_on_constant(self):
        out = T.conv2d(Tensor(np.full((1, 1, 5, 5), 2.0)), Tensor(np.ones((1, 1, 3, 3))), pad=1)
        np.testing.assert_allclose(out.data[0, 0, 1:-1, 1:-1], 18.0)

    def test_against_sliding_window(self):
        rng = np.random.default_rng(3)
        x, w = rng.standard_normal((5, 5)), rng.standard_normal((3, 3))
        out = T.conv2d(Tensor(x[None, None]), Tensor(w[None, None])).data[0, 0]
        np.testing.assert_allclose(out, correlate2d(x, w, mode="valid"), atol=1e-12)

    def test_multi_channel_stride_pad_shape(self):
        rng = np.random.default_rng(4)
        x, w = rng.standard_normal((2, 3, 7, 6)), rng.standard_normal((4, 3, 3, 3))
        out = T.conv2d(Tensor(x), Tensor(w), stride=2, pad=1).data
        assert out.shape == (2, 4, 4, 3)
        xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
        ref = sum(correlate2d(xp[1, c], w[2, c], mode="valid") for c in range(3))[::2, ::2]
        np.testing.assert_allclose(out[1, 2], ref, atol=1e-12)

    def test_kernel_too_large(self):
        with pytest.raises(DimensionError):
            T.conv2d(Tensor(np.ones((1, 1, 2, 2))), Tensor(np.ones((1, 1, 5, 5))))


class TestPool:
    def test_constant_avg(self):
        out = T.pool(Tensor(np.full((1, 2, 4, 4), 1.5)), "avg", k=2)
        np.testing.assert_array_equal(out.data, 1.5)

    def test_max_of_ramp(self):
        x = np.arange(16.0).reshape(1, 1, 4, 4)
        out = T.pool(Tensor(x), "max", k=2).data[0, 0]
        naive = [[x[0, 0, i:i + 2, j:j + 2].max() for j in (0, 2)] for i in (0, 2)]
        np.testing.assert_array_equal(out, naive)

    def test_global_avg(self):
        out = T.pool(Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]])), "global_avg")
        assert out.shape == (1, 1, 1, 1)
        assert out.data.item() == 2.5

    def test_max_with_padding_ignores_pad(self):
        x = -np.ones((1, 1, 3, 3))
        out = T.pool(Tensor(x), "max", k=3, stride=2, pad=1)
        np.testing.assert_array_equal(out.data, -1.0)


class TestBackward:
    def test_sum_gives_ones(self):
        x = leaf(np.random.default_rng(0).standard_normal((2, 3)))
        T.backward(x.sum())
        np.testing.assert_array_equal(x.grad, np.ones((2, 3)))

    def test_product_gives_other(self):
        rng = np.random.default_rng(1)
        x, y = leaf(rng.standard_normal(4)), Tensor(rng.standard_normal(4))
        T.backward((x * y).sum())
        np.testing.assert_array_equal(x.grad, y.data)

    def test_reuse_accumulates(self):
        x1, x2 = leaf([1.0, -2.0]), leaf([1.0, -2.0])
        T.backward((x1 + x1).sum())
        T.backward((2.0 * x2).sum())
        np.testing.assert_array_equal(x1.grad, x2.grad)

    def test_diamond_graph_visits_once(self):
        x = leaf([0.5])
        y = T.exp(x)
        T.backward((y * y + y).sum())
        e = math.exp(0.5)
        np.testing.assert_allclose(x.grad, [2 * e * e + e])

    def test_non_scalar_loss(self):
        with pytest.raises(ContractError):
            T.backward(leaf([1.0, 2.0]) * 2.0)

    def test_every_reachable_leaf_gets_grad(self):
        a, b, c = leaf([1.0]), leaf([2.0]), leaf([3.0])
        T.backward((a * b).sum())
        assert a.grad is not None and b.grad is not None and c.grad is None

    def test_no_grad_records_nothing(self):
        x = leaf([1.0])
        with T.no_grad():
            y = x * 2.0
        assert not y.requires_grad

    def test_deep_chain_is_iterative(self):
        x = leaf([1.0])
        y = x
        for _ in range(5000):
            y = y + 0.0
        T.backward(y.sum())
        assert x.grad[0] == 1.0

    def test_check_finite(self):
        with pytest.raises(NonFiniteError):
            T.check_finite(Tensor([1.0, np.inf]), "loss")


class TestGradients:
    @pytest.mark.parametrize("name", sorted(OPS))
    def test_op(self, name):
        rng = np.random.default_rng(zlib.crc32(name.encode()))
        for _ in range(4):
            leaves, fn = _case(rng, OPS[name])
            assert gradcheck(fn, leaves) < 1e-4

    def test_random_sweep(self):
        worst = max(gradcheck(fn, leaves) for _, leaves, fn in random_cases(100, seed=7))
        assert worst < 1e-4

    def test_grad_shape_matches_data(self):
        for _, leaves, fn in random_cases(len(OPS), seed=3):
            T.backward(fn())
            for t in leaves:
                assert t.grad is None or t.grad.shape == t.data.shape
