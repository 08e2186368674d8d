import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hiresvlm.errors import ContractError, DimensionError, NumericError
from hiresvlm.tensor import (
    MulLedger,
    Rng,
    Tensor,
    backward,
    concat,
    finite_difference_grad,
    gelu,
    layer_norm,
    log_softmax_rows,
    matmul,
    select,
    softmax_rows,
    sum_,
)


def loop_matmul(a, b):
    n, d = a.shape
    o = b.shape[1]
    out = np.zeros((n, o))
    for i in range(n):
        for j in range(o):
            s = 0.0
            for k in range(d):
                s += a[i, k] * b[k, j]
            out[i, j] = s
    return out


def rel_err(a, b):
    a, b = np.asarray(a), np.asarray(b)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-300)
    return np.linalg.norm(a - b) / denom


class TestMatmul:
    def test_ones(self):
        led = MulLedger()
        out = matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 4))), "projection", led)
        assert out.shape == (2, 4)
        assert np.all(out.data == 3.0)
        assert led["projection"] == 24
        assert led.total() == 24

    def test_identity(self):
        led = MulLedger()
        b = np.arange(6.0).reshape(3, 2)
        out = matmul(Tensor(np.eye(3)), Tensor(b), "other", led)
        np.testing.assert_array_equal(out.data, b)
        assert led.total() == 18

    def test_small_against_loop(self):
        a = np.array([[1.0, 2.0], [3.0, 4.0]])
        b = np.array([[5.0], [6.0]])
        led = MulLedger()
        out = matmul(Tensor(a), Tensor(b), "feedforward", led)
        np.testing.assert_array_equal(out.data, loop_matmul(a, b))
        np.testing.assert_array_equal(out.data, [[17.0], [39.0]])
        assert led["feedforward"] == 4

    def test_shape_mismatch_names_shapes(self):
        with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
            matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_unknown_category(self):
        with pytest.raises(ValueError):
            matmul(Tensor(np.ones((1, 1))), Tensor(np.ones((1, 1))), "bogus")

    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.tuples(st.integers(1, 6), st.integers(1, 6), st.integers(1, 6)), min_size=1, max_size=8))
    def test_ledger_exactness(self, shapes):
        led = MulLedger()
        expected = 0
        for i, (n, d, o) in enumerate(shapes):
            cat = ("projection", "attention_scores", "feedforward")[i % 3]
            matmul(Tensor(np.ones((n, d))), Tensor(np.ones((d, o))), cat, led)
            expected += n * o * d
        assert led.total() == expected
        assert led.total() == sum(led.as_dict().values())

    @settings(max_examples=25, deadline=None)
    @given(st.integers(1, 5), st.integers(1, 5), st.integers(1, 5), st.integers(0, 2**32))
    def test_matches_loop(self, n, d, o, seed):
        rng = Rng(seed)
        a, b = rng.normal((n, d)), rng.normal((d, o))
        np.testing.assert_allclose(matmul(Tensor(a), Tensor(b)).data, loop_matmul(a, b), rtol=1e-12, atol=1e-12)


class TestLedger:
    def test_merge_sums(self):
        a = MulLedger({"projection": 3})
        b = MulLedger({"projection": 4, "other": 1})
        c = a + b
        assert c["projection"] == 7 and c["other"] == 1
        assert a["projection"] == 3

    def test_negative_rejected(self):
        with pytest.raises(ValueError):
            MulLedger().add("other", -1)


class TestSoftmax:
    def test_symmetric(self):
        np.testing.assert_allclose(softmax_rows(Tensor([[0.0, 0.0]])).data, [[0.5, 0.5]])

    def test_no_overflow(self):
        out = softmax_rows(Tensor([[1000.0, 1000.0]])).data
        np.testing.assert_allclose(out, [[0.5, 0.5]])

    def test_closed_form(self):
        out = softmax_rows(Tensor([[0.0, math.log(3.0)]])).data
        np.testing.assert_allclose(out, [[0.25, 0.75]], rtol=0, atol=1e-15)

    def test_nan(self):
        with pytest.raises(NumericError):
            softmax_rows(Tensor([[0.0, float("nan")]]))

    def test_mask(self):
        out = softmax_rows(Tensor([[1.0, 2.0, 3.0]]), mask=np.array([[True, True, False]])).data
        assert out[0, 2] == 0.0
        np.testing.assert_allclose(out[0, :2], np.exp([1.0, 2.0]) / np.exp([1.0, 2.0]).sum())

    def test_fully_masked_row(self):
        with pytest.raises(ContractError):
            softmax_rows(Tensor([[1.0, 2.0]]), mask=np.array([[False, False]]))

    @settings(max_examples=60, deadline=None)
    @given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=12))
    def test_rows_sum_to_one(self, row):
        out = softmax_rows(Tensor([row])).data
        assert np.all(out >= 0)
        assert abs(out.sum() - 1.0) <= 1e-12


class TestLayerNorm:
    def test_constant_vector(self):
        out = layer_norm(Tensor([1.0, 1.0, 1.0]), Tensor(np.ones(3)), Tensor(np.zeros(3)))
        np.testing.assert_array_equal(out.data, [0.0, 0.0, 0.0])

    def test_already_normalized(self):
        out = layer_norm(Tensor([-1.0, 1.0]), Tensor(np.ones(2)), Tensor(np.zeros(2)), eps=0.0)
        np.testing.assert_allclose(out.data, [-1.0, 1.0], rtol=0, atol=1e-15)

    def test_scalar_reference(self):
        x = [0.0, 2.0, 4.0]
        eps = 1e-5
        mean = sum(x) / 3
        var = sum((v - mean) ** 2 for v in x) / 3
        expected = [2.0 * (v - mean) / math.sqrt(var + eps) + 1.0 for v in x]
        out = layer_norm(Tensor(x), Tensor(np.full(3, 2.0)), Tensor(np.ones(3)), eps=eps)
        np.testing.assert_allclose(out.data, expected, rtol=1e-14)

    def test_empty_axis(self):
        with pytest.raises(DimensionError):
            layer_norm(Tensor(np.zeros((2, 0))), Tensor(np.zeros(0)), Tensor(np.zeros(0)))


class TestBackward:
    def test_linear_map(self):
        x = np.array([[1.0], [2.0], [3.0]])
        W = Tensor(np.ones((2, 3)), requires_grad=True)
        backward(sum_(matmul(W, Tensor(x))))
        np.testing.assert_array_equal(W.grad, np.ones((2, 1)) @ x.T)

    def test_independent_parameter(self):
        p = Tensor(np.ones(3), requires_grad=True)
        q = Tensor(np.ones(3), requires_grad=True)
        backward(sum_(q * 2.0) + sum_(p * 0.0))
        np.testing.assert_array_equal(p.grad, np.zeros(3))

    def test_non_scalar(self):
        with pytest.raises(ContractError):
            backward(Tensor(np.ones(2), requires_grad=True) * 2.0)

    def test_graph_consumed(self):
        p = Tensor(np.ones(2), requires_grad=True)
        loss = sum_(p * 3.0)
        backward(loss)
        with pytest.raises(ContractError):
            backward(loss)

    def test_accumulation_is_additive(self):
        p = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        backward(sum_(p * p))
        first = p.grad.copy()
        backward(sum_(p * p))
        np.testing.assert_array_equal(p.grad, 2 * first)

    @pytest.mark.parametrize("seed", range(5))
    def test_three_layer_composition(self, seed):
        rng = Rng(seed)
        x = Tensor(rng.normal((4, 5)))
        W1 = Tensor(rng.normal((5, 6)) * 0.5, requires_grad=True)
        W2 = Tensor(rng.normal((6, 6)) * 0.5, requires_grad=True)
        W3 = Tensor(rng.normal((6, 3)) * 0.5, requires_grad=True)
        g = Tensor(rng.normal(6) + 1.0, requires_grad=True)
        b = Tensor(rng.normal(6), requires_grad=True)
        targets = rng.integers(0, 3, size=4)

        def f(_=None):
            h = gelu(matmul(x, W1))
            h = layer_norm(matmul(h, W2), g, b)
            logp = log_softmax_rows(matmul(softmax_rows(h), W3))
            return -sum_(select(logp, range(4), targets))

        backward(f())
        for p in (W1, W2, W3, g, b):
            fd = finite_difference_grad(f, p, 1e-5)
            assert rel_err(p.grad, fd) < 1e-6

    @settings(max_examples=15, deadline=None)
    @given(st.integers(1, 5), st.integers(0, 2**31))
    def test_random_depth_graphs(self, depth, seed):
        rng = Rng(seed)
        ws = [Tensor(rng.normal((3, 3)) * 0.7, requires_grad=True) for _ in range(depth)]
        x = Tensor(rng.normal((2, 3)))

        def f(_=None):
            h = x
            for i, w in enumerate(ws):
                h = matmul(h, w)
                h = gelu(h) if i % 2 == 0 else softmax_rows(h) + h
            return sum_(h * h)

        backward(f())
        for w in ws:
            assert rel_err(w.grad, finite_difference_grad(f, w, 1e-5)) < 1e-6

    def test_concat_and_index_gradients(self):
        a = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
        b = Tensor(np.ones((1, 3)), requires_grad=True)

        def f(_=None):
            c = concat([a, b], axis=0)
            return sum_(c[1:, :2] * c[1:, :2])

        backward(f())
        np.testing.assert_allclose(a.grad, finite_difference_grad(f, a), atol=1e-8)
        np.testing.assert_allclose(b.grad, finite_difference_grad(f, b), atol=1e-8)


class TestFiniteDifference:
    def test_square(self):
        p = Tensor([3.0])
        fd = finite_difference_grad(lambda t: t.data[0] ** 2, p, 1e-5)
        assert abs(fd[0] - 6.0) < 1e-8

    def test_constant(self):
        p = Tensor(np.ones(4))
        np.testing.assert_array_equal(finite_difference_grad(lambda t: 7.0, p), np.zeros(4))

    def test_softmax_cross_entropy(self):
        logits = np.array([0.3, -1.2, 2.0, 0.5])
        target = 2
        p = Tensor(logits.copy())

        def f(t):
            z = t.data
            return -(z[target] - math.log(np.exp(z).sum()))

        analytic = np.exp(logits) / np.exp(logits).sum()
        analytic[target] -= 1.0
        np.testing.assert_allclose(finite_difference_grad(f, p, 1e-5), analytic, atol=1e-9)

    def test_restores_parameter(self):
        p = Tensor(np.array([1.0, 2.0]))
        finite_difference_grad(lambda t: float(t.data.sum()), p)
        np.testing.assert_array_equal(p.data, [1.0, 2.0])


class TestRng:
    def test_bit_identical(self):
        a, b = Rng(42), Rng(42)
        assert a.normal((50,)).tobytes() == b.normal((50,)).tobytes()
        assert a.uniform(5).tobytes() == b.uniform(5).tobytes()

    def test_box_muller_definition(self):
        seed = 7
        u = np.random.Generator(np.random.PCG64(seed)).random(4)
        r0 = math.sqrt(-2 * math.log(1 - u[0]))
        expected = [r0 * math.cos(2 * math.pi * u[1]), r0 * math.sin(2 * math.pi * u[1])]
        np.testing.assert_allclose(Rng(seed).normal((2,)), expected, rtol=1e-15)

    def test_moments(self):
        z = Rng(3).normal((200_000,))
        assert abs(z.mean()) < 0.01 and abs(z.std() - 1) < 0.01


def test_data_is_read_only():
    t = Tensor(np.ones(3))
    with pytest.raises(ValueError):
        t.data[0] = 5.0
