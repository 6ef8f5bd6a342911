import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from crossdistill import tensor as T
from crossdistill.tensor import ContractError, DegenerateInputError, DimensionError, Tape, Tensor

from conftest import FD_TOL, gradcheck, leaf


def loop_matmul(a, b):
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            for r in range(k):
                out[i, j] += a[i, r] * b[r, j]
    return out


class TestMatmul:
    def test_identity(self):
        b = Tensor([[1.0, 2.0], [3.0, 4.0]])
        assert T.matmul(Tensor(np.eye(2)), b).data.tolist() == [[1, 2], [3, 4]]

    def test_projector_selects_row(self):
        out = T.matmul(Tensor([[1.0, 0.0], [0.0, 0.0]]), Tensor([[5.0, 6.0], [7.0, 8.0]]))
        assert out.data.tolist() == [[5, 6], [0, 0]]

    def test_matches_triple_loop(self, rng):
        a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
        got = T.matmul(Tensor(a, dtype=np.float64), Tensor(b, dtype=np.float64)).data
        np.testing.assert_allclose(got, loop_matmul(a, b), rtol=0, atol=1e-12)

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
            T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))

    def test_gradients(self, rng):
        a, b = leaf(rng, 3, 4), leaf(rng, 4, 2)
        assert gradcheck(lambda: T.sum_all(T.mul(T.matmul(a, b), T.matmul(a, b))), [a, b]) < FD_TOL

    def test_batched_with_shared_rhs(self, rng):
        a, b = leaf(rng, 2, 3, 4), leaf(rng, 4, 5)
        assert gradcheck(lambda: T.sum_all(T.gelu(T.matmul(a, b))), [a, b]) < FD_TOL


class TestElementwise:
    def test_examples(self):
        assert T.add(Tensor([1.0, 2.0]), Tensor([0.0, 0.0])).data.tolist() == [1, 2]
        assert T.mul(Tensor([2.0, 3.0]), Tensor([4.0, 5.0])).data.tolist() == [8, 15]
        assert T.elementwise(Tensor([2.0]), Tensor([5.0]), "sub").data.tolist() == [-3]

    def test_bias_broadcast_matches_loop(self, rng):
        x, bias = rng.normal(size=(4, 3)), rng.normal(size=(1, 3))
        expected = np.array([[x[i, j] + bias[0, j] for j in range(3)] for i in range(4)])
        np.testing.assert_array_equal(T.add(Tensor(x), Tensor(bias)).data, expected)

    def test_broadcast_gradients_sum(self, rng):
        x, bias = leaf(rng, 4, 3), leaf(rng, 1, 3)
        for kind in ("add", "sub", "mul"):
            assert gradcheck(lambda: T.sum_all(T.gelu(T.elementwise(x, bias, kind))), [x, bias]) < FD_TOL

    def test_incompatible(self):
        with pytest.raises(DimensionError):
            T.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4,))))


class TestSoftmax:
    def test_symmetric(self):
        np.testing.assert_allclose(T.softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5])

    def test_no_overflow(self):
        out = T.softmax(Tensor([1000.0, 0.0], dtype=np.float64)).data
        np.testing.assert_allclose(out, [1.0, 0.0], atol=1e-12)

    def test_matches_formula(self, rng):
        x = rng.normal(size=7)
        e = np.exp(x)
        np.testing.assert_allclose(T.softmax(Tensor(x, dtype=np.float64)).data, e / e.sum(), rtol=0, atol=1e-12)

    def test_gradient(self, rng):
        x, w = leaf(rng, 3, 5), rng.normal(size=(3, 5))
        assert gradcheck(lambda: T.sum_all(T.mul(T.softmax(x, axis=-1), Tensor(w))), [x]) < FD_TOL
        assert gradcheck(lambda: T.sum_all(T.mul(T.log_softmax(x, axis=0), Tensor(w))), [x]) < FD_TOL

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 8)),
                  elements=st.floats(-50, 50)))
    def test_rows_are_distributions(self, x):
        y = T.softmax(Tensor(x)).data
        assert np.all(y >= 0)
        np.testing.assert_allclose(y.sum(axis=-1), 1.0, atol=1e-9)


class TestLayernorm:
    def test_constant_row(self):
        out = T.layernorm(Tensor([[3.0, 3.0, 3.0]]), Tensor(np.ones(3)), Tensor(np.zeros(3)))
        np.testing.assert_array_equal(out.data, np.zeros((1, 3)))

    def test_two_points(self):
        out = T.layernorm(Tensor([1.0, 3.0], dtype=np.float64), Tensor(np.ones(2)), Tensor(np.zeros(2)), eps=0.0)
        np.testing.assert_allclose(out.data, [-1.0, 1.0])

    def test_gradient(self, rng):
        x, g, b = leaf(rng, 2, 3, 6), leaf(rng, 6), leaf(rng, 6)
        w = Tensor(rng.normal(size=(2, 3, 6)))
        assert gradcheck(lambda: T.sum_all(T.mul(T.layernorm(x, g, b), w)), [x, g, b]) < FD_TOL

    def test_shape_validation(self):
        with pytest.raises(DimensionError):
            T.layernorm(Tensor(np.zeros((2, 3))), Tensor(np.ones(4)), Tensor(np.zeros(4)))


class TestMaskedMeanPool:
    def test_examples(self):
        h = Tensor([[1.0, 2.0], [3.0, 4.0]])
        assert T.masked_mean_pool(h, [1, 0]).data.tolist() == [1, 2]
        assert T.masked_mean_pool(h, [1, 1]).data.tolist() == [2, 3]

    def test_matches_loop(self, rng):
        h = rng.normal(size=(7, 4))
        mask = np.array([1, 0, 1, 1, 0, 1, 0])
        expected = sum(h[i] for i in range(7) if mask[i]) / mask.sum()
        got = T.masked_mean_pool(Tensor(h, dtype=np.float64), mask).data
        np.testing.assert_allclose(got, expected, rtol=0, atol=1e-12)

    def test_empty_mask(self):
        with pytest.raises(DegenerateInputError):
            T.masked_mean_pool(Tensor(np.ones((2, 2))), [0, 0])

    def test_gradient_splits_evenly(self):
        h = Tensor(np.ones((4, 2)), requires_grad=True, dtype=np.float64)
        with Tape():
            T.backward(T.sum_all(T.masked_mean_pool(h, [1, 0, 1, 1])))
        np.testing.assert_allclose(h.grad[:, 0], [1 / 3, 0, 1 / 3, 1 / 3])

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.floats(-1e6, 1e6))
    def test_masked_positions_ignored(self, seed, value):
        r = np.random.default_rng(seed)
        h = r.normal(size=(2, 5, 3))
        mask = np.array([[1, 1, 0, 1, 0], [0, 1, 1, 1, 1]])
        before = T.masked_mean_pool(Tensor(h), mask).data.copy()
        h[0, 2] = value
        h[1, 0] = value
        after = T.masked_mean_pool(Tensor(h), mask).data
        assert np.array_equal(before, after)


class TestMse:
    def test_examples(self):
        assert float(T.mse(Tensor([1.0, 2.0]), Tensor([1.0, 2.0])).data) == 0.0
        assert float(T.mse(Tensor([1.0, 1.0]), Tensor([0.0, 0.0])).data) == 1.0

    def test_gradient(self, rng):
        a, b = leaf(rng, 3, 4), leaf(rng, 3, 4)
        assert gradcheck(lambda: T.mse(a, b), [a, b]) < FD_TOL

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            T.mse(Tensor([1.0]), Tensor([1.0, 2.0]))


class TestBackward:
    def test_square_sum(self):
        x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
        with Tape():
            T.backward(T.sum_all(T.mul(x, x)))
        assert x.grad.tolist() == [2, 4, 6]

    def test_reused_leaf_accumulates(self):
        x = Tensor([1.0], requires_grad=True)
        with Tape():
            T.backward(T.sum_all(T.add(x, x)))
        assert x.grad.tolist() == [2.0]

    def test_non_scalar_loss(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with Tape(), pytest.raises(ContractError):
            T.backward(T.scale(x, 2.0))

    def test_constant_never_gets_grad(self, rng):
        x, c = leaf(rng, 3), Tensor(rng.normal(size=3))
        with Tape():
            T.backward(T.sum_all(T.mul(x, c)))
        assert c.grad is None and x.grad is not None

    def test_no_recording_without_tape(self, rng):
        x = leaf(rng, 3)
        y = T.mul(x, x)
        assert y.node is None and not y.requires_grad

    def test_reverse_order_and_determinism(self, rng):
        x, w = leaf(rng, 4, 3), leaf(rng, 3, 3)
        with Tape() as tape:
            loss = T.sum_all(T.gelu(T.matmul(T.softmax(T.matmul(x, w)), w)))
            T.backward(loss)
            first = (x.grad.copy(), w.grad.copy())
            T.backward(loss)
        assert np.array_equal(first[0], x.grad) and np.array_equal(first[1], w.grad)
        # every node's inputs were produced earlier on the tape (or are leaves)
        seen = set()
        for node in tape.nodes:
            assert all(inp.node is None or id(inp.node) in seen for inp in node.inputs)
            seen.add(id(node))


class TestOtherOps:
    def test_gelu_gradient(self, rng):
        x = leaf(rng, 4, 5)
        assert gradcheck(lambda: T.sum_all(T.gelu(x)), [x]) < FD_TOL

    def test_dropout_inference_identity(self, rng):
        x = leaf(rng, 4)
        assert T.dropout(x, 0.5, None, training=False) is x

    def test_dropout_train_mode(self):
        x = Tensor(np.ones((200, 50)), dtype=np.float64)
        y = T.dropout(x, 0.2, T.counter_rng(0, 1, 2), training=True).data
        assert set(np.unique(y)) <= {0.0, 1.25}
        assert abs((y == 0).mean() - 0.2) < 0.02
        again = T.dropout(x, 0.2, T.counter_rng(0, 1, 2), training=True).data
        assert np.array_equal(y, again)

    def test_dropout_gradient(self, rng):
        x = leaf(rng, 3, 4)
        assert gradcheck(lambda: T.sum_all(T.gelu(T.dropout(x, 0.3, T.counter_rng(5, 0), True))), [x]) < FD_TOL

    def test_embedding_gather_scatter_adds(self):
        table = Tensor(np.arange(6.0).reshape(3, 2), requires_grad=True)
        with Tape():
            out = T.embedding_gather(table, [2, 0, 2])
            T.backward(T.sum_all(out))
        assert out.data.tolist() == [[4, 5], [0, 1], [4, 5]]
        assert table.grad.tolist() == [[1, 1], [0, 0], [2, 2]]

    def test_concat_and_gather_positions(self, rng):
        a, b = leaf(rng, 2, 3, 4), leaf(rng, 2, 1, 4)
        index = np.array([[0, 3, 1, 2], [3, 0, 0, 2]])
        w = Tensor(rng.normal(size=(2, 4, 4)))
        fn = lambda: T.sum_all(T.mul(T.gather_positions(T.concat([a, b], axis=1), index), w))
        assert gradcheck(fn, [a, b]) < FD_TOL

    def test_masked_fill_blocks_gradient(self, rng):
        x = leaf(rng, 2, 3)
        mask = np.array([[False, True, False], [True, False, False]])
        with Tape():
            T.backward(T.sum_all(T.softmax(T.masked_fill(x, mask, -np.inf))))
        assert np.all(x.grad[mask] == 0)

    def test_l2_normalize_gradient(self, rng):
        x, w = leaf(rng, 3, 4), Tensor(rng.normal(size=(3, 4)))
        assert gradcheck(lambda: T.sum_all(T.mul(T.l2_normalize(x), w)), [x]) < FD_TOL

    def test_reshape_transpose_sum_axis(self, rng):
        x, w = leaf(rng, 2, 6), Tensor(rng.normal(size=(3, 2)))
        fn = lambda: T.sum_all(T.mul(T.sum_axis(T.transpose(T.reshape(x, (2, 2, 3)), (2, 0, 1)), 2), w))
        assert gradcheck(fn, [x]) < FD_TOL
