import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from tagnnpp import autograd as ag
from tagnnpp.autograd import Rng, Tensor
from tagnnpp.errors import ConfigError, ContractError, DimensionError, NumericError
from tagnnpp.gradcheck import OP_TOL, check_function, op_cases


def t(x, grad=False):
    return Tensor(np.asarray(x, dtype=np.float64), requires_grad=grad)


def triple_loop_matmul(a, b):
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for p in range(k):
                acc += a[i, p] * b[p, j]
            out[i, j] = acc
    return out


class TestMatmul:
    def test_identity(self):
        b = [[1.0, 2.0], [3.0, 4.0]]
        np.testing.assert_array_equal(ag.matmul(t(np.eye(2)), t(b)).data, b)

    def test_projector_selects_row(self):
        out = ag.matmul(t([[1, 0], [0, 0]]), t([[5, 6], [7, 8]]))
        np.testing.assert_array_equal(out.data, [[5, 6], [0, 0]])

    def test_against_triple_loop(self):
        rng = np.random.default_rng(3)
        a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
        np.testing.assert_allclose(ag.matmul(t(a), t(b)).data, triple_loop_matmul(a, b), rtol=0, atol=1e-14)

    def test_shape_mismatch_reports_both_shapes(self):
        with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
            ag.matmul(t(np.ones((2, 3))), t(np.ones((2, 3))))

    def test_backward_rules(self):
        rng = np.random.default_rng(0)
        a, b = t(rng.normal(size=(3, 4)), True), t(rng.normal(size=(4, 2)), True)
        ag.backward(ag.tensor_sum(ag.matmul(a, b)))
        dc = np.ones((3, 2))
        np.testing.assert_allclose(a.grad, dc @ b.data.T)
        np.testing.assert_allclose(b.grad, a.data.T @ dc)


class TestSoftmax:
    @pytest.mark.parametrize("c", [-50.0, 0.0, 3.7, 1e4])
    def test_uniform(self, c):
        np.testing.assert_allclose(ag.softmax(t([c] * 4)).data, [0.25] * 4, rtol=0, atol=1e-15)

    def test_analytic(self):
        np.testing.assert_allclose(ag.softmax(t([0.0, math.log(3.0)])).data, [0.25, 0.75], atol=1e-15)

    def test_shift_invariance(self):
        x = np.random.default_rng(1).normal(size=(3, 6))
        np.testing.assert_allclose(ag.softmax(t(x + 10)).data, ag.softmax(t(x)).data, rtol=0, atol=1e-12)

    def test_nan_input(self):
        with pytest.raises(NumericError):
            ag.softmax(t([0.0, np.nan]))

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, (3, 5), elements=st.floats(-300, 300)))
    def test_rows_sum_to_one(self, x):
        y = ag.softmax(t(x), axis=-1).data
        assert np.all(y >= 0)
        np.testing.assert_allclose(y.sum(axis=-1), 1.0, rtol=0, atol=1e-9)

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, (2, 4), elements=st.floats(-50, 50)), st.floats(-100, 100))
    def test_shift_property(self, x, shift):
        np.testing.assert_allclose(ag.softmax(t(x + shift)).data, ag.softmax(t(x)).data, rtol=0, atol=1e-12)


class TestLayerNorm:
    def test_constant_row_is_zero(self):
        out = ag.layer_norm(t([[4.0, 4.0, 4.0]]), t(np.ones(3)), t(np.zeros(3)), 1e-5)
        np.testing.assert_array_equal(out.data, [[0.0, 0.0, 0.0]])

    def test_two_values(self):
        out = ag.layer_norm(t([[1.0, 3.0]]), t(np.ones(2)), t(np.zeros(2)), 1e-12)
        np.testing.assert_allclose(out.data, [[-1.0, 1.0]], atol=1e-10)

    def test_row_statistics(self):
        x = np.random.default_rng(2).normal(3.0, 5.0, size=(20, 16))
        y = ag.layer_norm(t(x), t(np.ones(16)), t(np.zeros(16)), 1e-5).data
        assert np.abs(y.mean(axis=-1)).max() <= 1e-9
        np.testing.assert_allclose(y.var(axis=-1), 1.0, atol=1e-6)

    def test_affine(self):
        x = np.random.default_rng(4).normal(size=(2, 3))
        g, b = np.array([2.0, -1.0, 0.5]), np.array([0.1, 0.2, 0.3])
        y = ag.layer_norm(t(x), t(g), t(b), 1e-5).data
        mu, var = x.mean(-1, keepdims=True), x.var(-1, keepdims=True)
        np.testing.assert_allclose(y, g * (x - mu) / np.sqrt(var + 1e-5) + b, atol=1e-14)

    def test_bad_gamma(self):
        with pytest.raises(DimensionError):
            ag.layer_norm(t(np.ones((2, 3))), t(np.ones(2)), t(np.zeros(3)))


class TestDropout:
    def test_p_zero_identity(self):
        x = t(np.arange(6.0))
        assert ag.dropout(x, 0.0, True, Rng(0)) is x

    def test_inference_identity(self):
        x = t(np.arange(6.0))
        assert ag.dropout(x, 0.9, False) is x

    def test_rate_one_rejected(self):
        with pytest.raises(ConfigError):
            ag.dropout(t(np.ones(3)), 1.0, True, Rng(0))

    def test_statistics(self):
        x = t(np.ones(1_000_000))
        y = ag.dropout(x, 0.1, True, Rng(123)).data
        survivors = np.count_nonzero(y) / y.size
        assert abs(survivors - 0.9) <= 0.005
        assert abs(y.mean() - 1.0) <= 0.01
        np.testing.assert_allclose(y[y != 0], 1.0 / 0.9)

    def test_deterministic_mask(self):
        x = t(np.ones((50, 50)))
        a = ag.dropout(x, 0.3, True, Rng(7)).data
        b = ag.dropout(x, 0.3, True, Rng(7)).data
        np.testing.assert_array_equal(a, b)


class TestEmbedding:
    def test_first_row(self):
        table = np.arange(12.0).reshape(4, 3)
        np.testing.assert_array_equal(ag.embedding_lookup(t(table), [0]).data, [table[0]])

    def test_duplicate_ids_accumulate(self):
        table = t(np.random.default_rng(0).normal(size=(4, 3)), True)
        ag.backward(ag.tensor_sum(ag.embedding_lookup(table, np.array([2, 2]))))
        np.testing.assert_array_equal(table.grad[2], [2.0, 2.0, 2.0])
        np.testing.assert_array_equal(table.grad[[0, 1, 3]], 0.0)

    def test_against_loop_gather(self):
        rng = np.random.default_rng(5)
        table = rng.normal(size=(10, 4))
        ids = rng.integers(0, 10, size=7)
        expected = np.stack([table[i].copy() for i in ids])
        np.testing.assert_array_equal(ag.embedding_lookup(t(table), ids).data, expected)

    def test_out_of_range_names_id(self):
        with pytest.raises(IndexError, match="17"):
            ag.embedding_lookup(t(np.zeros((5, 2))), np.array([1, 17]))


class TestElementwise:
    def test_values_at_zero(self):
        assert ag.sigmoid(t([0.0])).data[0] == 0.5
        assert ag.tanh(t([0.0])).data[0] == 0.0

    def test_identity_elements(self):
        x = np.random.default_rng(0).normal(size=(3, 2))
        np.testing.assert_array_equal(ag.add(t(x), t(np.zeros((3, 2)))).data, x)
        np.testing.assert_array_equal(ag.mul(t(x), t(np.ones((3, 2)))).data, x)

    def test_concat(self):
        a, b = np.ones((2, 3)), np.full((2, 5), 2.0)
        out = ag.concat([t(a), t(b)], -1).data
        assert out.shape == (2, 8)
        np.testing.assert_array_equal(out[:, :3], a)
        np.testing.assert_array_equal(out[:, 3:], b)

    def test_incompatible_shapes(self):
        with pytest.raises(DimensionError):
            ag.add(t(np.ones((2, 3))), t(np.ones((4,))))
        with pytest.raises(DimensionError):
            ag.concat([t(np.ones((2, 3))), t(np.ones((3, 3)))], -1)

    def test_sigmoid_extreme_inputs_finite(self):
        y = ag.sigmoid(t([-800.0, 800.0])).data
        assert np.all(np.isfinite(y))
        np.testing.assert_array_equal(y, [0.0, 1.0])


class TestBackward:
    def test_sum(self):
        x = t(np.random.default_rng(0).normal(size=(3, 4)), True)
        ag.backward(ag.tensor_sum(x))
        np.testing.assert_array_equal(x.grad, np.ones((3, 4)))

    def test_square(self):
        x = t(np.random.default_rng(0).normal(size=(5,)), True)
        ag.backward(ag.tensor_sum(x * x))
        np.testing.assert_allclose(x.grad, 2 * x.data)

    def test_non_scalar_loss(self):
        x = t(np.ones(3), True)
        with pytest.raises(ContractError):
            ag.backward(x * 2.0)

    def test_diamond_graph_visits_each_node_once(self):
        x = t([1.5], True)
        y = x * x
        z = y + y  # y feeds two edges
        ag.backward(ag.tensor_sum(z * y))  # 2y^2 = 2x^4 -> 8x^3
        np.testing.assert_allclose(x.grad, [8 * 1.5**3])

    def test_unreached_leaf_untouched(self):
        x, unused = t([1.0], True), t([2.0], True)
        unused.zero_grad()
        ag.backward(ag.tensor_sum(x * 3.0))
        np.testing.assert_array_equal(unused.grad, [0.0])

    def test_no_grad_builds_no_graph(self):
        x = t([1.0], True)
        with ag.no_grad():
            y = x * 2.0
        assert not y.requires_grad

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_non_finite_forward_is_an_error(self):
        with pytest.raises(NumericError):
            ag.exp(t([1000.0]))


@pytest.mark.parametrize("name,fn,inputs", op_cases(seed=0), ids=lambda v: v if isinstance(v, str) else "")
def test_gradcheck(name, fn, inputs):
    assert check_function(fn, inputs) < OP_TOL


def test_forward_backward_bit_identical_across_runs():
    def run():
        rng = Rng(11)
        w = t(rng.uniform(-1, 1, (4, 3)), True)
        x = t(rng.uniform(-1, 1, (5, 4)))
        h = ag.dropout(ag.tanh(x @ w), 0.2, True, rng.child(1))
        loss = ag.tensor_sum(ag.softmax(h, -1) * h)
        ag.backward(loss)
        return loss.data.tobytes(), w.grad.tobytes()

    assert run() == run()


def test_float32_preserved_through_ops():
    x = Tensor(np.ones((2, 3), dtype=np.float32), requires_grad=True)
    w = Tensor(np.ones((3, 3), dtype=np.float32), requires_grad=True)
    y = ag.layer_norm(ag.sigmoid(1.0 - x @ w) * 2.0, Tensor(np.ones(3, np.float32)), Tensor(np.zeros(3, np.float32)))
    assert y.dtype == np.float32
    ag.backward(ag.tensor_sum(y))
    assert w.grad.dtype == np.float32
