import math
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from laganet import checkpoint
from laganet import tensor as T
from laganet.errors import ConfigError, FormatError, NumericInputError, ShapeError, UsageError
from laganet.tensor import Tensor, grad_check


def leaf(a):
    return Tensor(a, requires_grad=True)


def naive_matmul(a, b):
    m, k = a.shape
    _, n = b.shape
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for t in range(k):
                s += a[i, t] * b[t, j]
            out[i, j] = s
    return out


class TestMatmul:
    def test_identity(self, rng):
        b = rng.normal(size=(3, 4))
        np.testing.assert_array_equal(T.matmul(Tensor(np.eye(3)), Tensor(b)).data, b)

    def test_scalar_case(self):
        assert T.matmul(Tensor([[2.0]]), Tensor([[3.0]])).data.tolist() == [[6.0]]

    def test_against_triple_loop(self, rng):
        a, b = rng.normal(size=(4, 5)), rng.normal(size=(5, 3))
        np.testing.assert_allclose(T.matmul(Tensor(a), Tensor(b)).data, naive_matmul(a, b), atol=1e-12)

    def test_mismatch_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
            T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 5))))

    def test_backward_formula(self, rng):
        a, b = leaf(rng.normal(size=(4, 5))), leaf(rng.normal(size=(5, 3)))
        g = rng.normal(size=(4, 3))
        T.matmul(a, b).backward(g)
        np.testing.assert_allclose(a.grad, g @ b.data.T, atol=1e-12)
        np.testing.assert_allclose(b.grad, a.data.T @ g, atol=1e-12)

    def test_batched_grad(self, rng):
        a, b = leaf(rng.normal(size=(2, 3, 4))), leaf(rng.normal(size=(4, 2)))
        assert grad_check(lambda: T.tsum(T.matmul(a, b) * T.matmul(a, b)), [a, b]) < 1e-6


class TestSoftmax:
    def test_zero_row(self):
        np.testing.assert_allclose(T.softmax_rows(Tensor(np.zeros((1, 4)))).data, [[0.25] * 4])

    def test_single_column(self, rng):
        np.testing.assert_array_equal(T.softmax_rows(Tensor(rng.normal(size=(5, 1)))).data, np.ones((5, 1)))

    def test_closed_form(self):
        np.testing.assert_allclose(T.softmax_rows(Tensor([[0.0, math.log(2)]])).data, [[1 / 3, 2 / 3]], atol=1e-15)

    def test_rejects_non_finite(self):
        with pytest.raises(NumericInputError):
            T.softmax_rows(Tensor([[0.0, np.inf]]))

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 6), st.integers(1, 9), st.integers(0, 2**31))
    def test_rows_sum_to_one_on_wide_range(self, r, c, seed):
        x = np.random.default_rng(seed).uniform(-700, 700, size=(r, c))
        np.testing.assert_allclose(T.softmax_rows(Tensor(x)).data.sum(axis=1), 1.0, atol=1e-9)

    def test_sum_of_softmax_has_zero_gradient(self, rng):
        m = leaf(rng.normal(size=(3, 4)))
        T.tsum(T.softmax_rows(m)).backward()
        assert np.abs(m.grad).max() < 1e-12


class TestBatchNorm:
    def bn(self, x, gain, bias, rm, rv, training):
        return T.batch_norm(Tensor(x), Tensor(gain), Tensor(bias), rm, rv, training)

    def test_eval_identity(self, rng):
        x = rng.normal(size=(4, 3, 2, 2))
        out = self.bn(x, np.ones(3), np.zeros(3), np.zeros(3), np.ones(3), False)
        np.testing.assert_allclose(out.data, x / np.sqrt(1 + 1e-5), rtol=1e-15)
        np.testing.assert_allclose(out.data, x, atol=1e-5 * np.abs(x).max())

    def test_constant_input_gives_bias(self):
        x = np.full((5, 2), 3.7)
        bias = np.array([0.3, -1.2])
        out = self.bn(x, np.array([2.0, 5.0]), bias, np.zeros(2), np.ones(2), True)
        np.testing.assert_allclose(out.data, np.tile(bias, (5, 1)), atol=1e-15)

    def test_output_moments(self, rng):
        # variance ~100 keeps the eps-induced shrinkage of the std below 1e-6 relative
        x = rng.normal(2.0, 10.0, size=(64, 3, 4, 4))
        gain, bias = np.array([0.5, 2.0, 1.5]), np.array([1.0, -3.0, 0.25])
        out = self.bn(x, gain, bias, np.zeros(3), np.ones(3), True).data
        np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), bias, atol=1e-6)
        np.testing.assert_allclose(out.std(axis=(0, 2, 3)), gain, atol=1e-6)

    def test_running_stats_momentum(self, rng):
        x = rng.normal(size=(10, 2))
        rm, rv = np.zeros(2), np.ones(2)
        self.bn(x, np.ones(2), np.zeros(2), rm, rv, True)
        np.testing.assert_allclose(rm, 0.1 * x.mean(axis=0))
        np.testing.assert_allclose(rv, 0.9 + 0.1 * x.var(axis=0, ddof=1))

    def test_channel_mismatch(self):
        with pytest.raises(ShapeError):
            self.bn(np.ones((2, 3)), np.ones(2), np.zeros(2), np.zeros(2), np.ones(2), True)

    @pytest.mark.parametrize("training", [True, False])
    def test_grad(self, rng, training):
        x = leaf(rng.normal(size=(4, 3, 2, 2)))
        gain, bias = leaf(rng.uniform(0.5, 1.5, 3)), leaf(rng.normal(size=3))
        w = rng.normal(size=(4, 3, 2, 2))
        rm, rv = rng.normal(size=3), rng.uniform(0.5, 2, 3)

        def f():
            return T.tsum(T.batch_norm(x, gain, bias, rm.copy(), rv.copy(), training) * w)

        assert grad_check(f, [x, gain, bias]) < 1e-5


class TestPointwiseConv:
    def test_identity(self, rng):
        e = rng.normal(size=(3, 2, 4))
        np.testing.assert_array_equal(T.pointwise_conv(Tensor(e), Tensor(np.eye(3)), Tensor(np.zeros(3))).data, e)

    def test_sum_of_channels(self):
        e = np.zeros((2, 1, 1))
        e[:, 0, 0] = (3.0, 4.0)
        out = T.pointwise_conv(Tensor(e), Tensor([[1.0, 1.0]]), Tensor([0.0]))
        assert out.shape == (1, 1, 1) and out.data[0, 0, 0] == 7.0

    def test_against_flatten_matmul(self, rng):
        e, w, b = rng.normal(size=(5, 3, 4)), rng.normal(size=(2, 5)), rng.normal(size=2)
        want = (w @ e.reshape(5, 12) + b[:, None]).reshape(2, 3, 4)
        np.testing.assert_allclose(T.pointwise_conv(Tensor(e), Tensor(w), Tensor(b)).data, want, atol=1e-12)

    def test_mismatch(self):
        with pytest.raises(ShapeError):
            T.pointwise_conv(Tensor(np.ones((3, 2, 2))), Tensor(np.ones((2, 4))))

    def test_grad(self, rng):
        e, w, b = leaf(rng.normal(size=(2, 4, 3, 2))), leaf(rng.normal(size=(3, 4))), leaf(rng.normal(size=3))
        c = rng.normal(size=(2, 3, 3, 2))
        assert grad_check(lambda: T.tsum(T.pointwise_conv(e, w, b) * c), [e, w, b]) < 1e-6


def naive_conv(x, w, stride, pad):
    n, c, h, wd = x.shape
    co, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho, wo = (h + 2 * pad - kh) // stride + 1, (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((n, co, ho, wo))
    for a in range(n):
        for o in range(co):
            for i in range(ho):
                for j in range(wo):
                    out[a, o, i, j] = np.sum(xp[a, :, i * stride : i * stride + kh, j * stride : j * stride + kw] * w[o])
    return out


class TestConv2d:
    @pytest.mark.parametrize("stride", [1, 2])
    def test_against_loops(self, rng, stride):
        x, w = rng.normal(size=(2, 3, 7, 5)), rng.normal(size=(4, 3, 3, 3))
        np.testing.assert_allclose(T.conv2d(Tensor(x), Tensor(w), stride=stride, padding=1).data,
                                   naive_conv(x, w, stride, 1), atol=1e-12)

    @pytest.mark.parametrize("stride", [1, 2])
    def test_grad(self, rng, stride):
        x, w, b = leaf(rng.normal(size=(2, 2, 5, 4))), leaf(rng.normal(size=(3, 2, 3, 3))), leaf(rng.normal(size=3))
        out_shape = T.conv2d(x, w, b, stride=stride, padding=1).shape
        c = rng.normal(size=out_shape)
        assert grad_check(lambda: T.tsum(T.conv2d(x, w, b, stride=stride, padding=1) * c), [x, w, b]) < 1e-6


class TestActivationDropout:
    def test_leaky(self):
        assert T.leaky_relu(Tensor([-1.0]), 0.01).data[0] == -0.01
        assert T.activation(Tensor([-1.0, 2.0]), "relu").data.tolist() == [0.0, 2.0]

    def test_unknown_activation(self):
        with pytest.raises(ConfigError):
            T.activation(Tensor([1.0]), "gelu")

    @pytest.mark.parametrize("training", [True, False])
    def test_p_zero_identity(self, rng, training):
        x = rng.normal(size=(4, 4))
        np.testing.assert_array_equal(T.dropout(Tensor(x), 0.0, training, rng).data, x)

    def test_eval_identity(self, rng):
        x = rng.normal(size=(3, 3))
        np.testing.assert_array_equal(T.dropout(Tensor(x), 0.5, False, None).data, x)

    def test_mean_concentration(self):
        n, p = 10**5, 0.5
        out = T.dropout(Tensor(np.ones(n)), p, True, np.random.default_rng(0)).data
        sigma = math.sqrt(p / (1 - p) / n)  # std of the mean of n scaled Bernoulli draws
        assert abs(out.mean() - 1.0) < 3 * sigma
        assert set(np.unique(out)) <= {0.0, 2.0}

    @pytest.mark.parametrize("p", [-0.1, 1.0, 1.5])
    def test_bad_p(self, p, rng):
        with pytest.raises(ConfigError):
            T.dropout(Tensor([1.0]), p, True, rng)

    def test_seeded_replay_is_bit_identical(self):
        x = Tensor(np.arange(100.0))
        a = T.dropout(x, 0.3, True, np.random.default_rng(5)).data
        b = T.dropout(x, 0.3, True, np.random.default_rng(5)).data
        assert a.tobytes() == b.tobytes()

    def test_dropout_grad_uses_same_mask(self, rng):
        x = leaf(rng.normal(size=20))
        out = T.dropout(x, 0.5, True, np.random.default_rng(2))
        T.tsum(out).backward()
        np.testing.assert_array_equal(x.grad, out.data / x.data)


class TestGradCheck:
    def test_square(self):
        x = leaf(3.0)
        assert grad_check(lambda: x * x, [x]) < 1e-7
        np.testing.assert_allclose(x.grad, 6.0)

    def test_non_scalar_rejected(self):
        x = leaf(np.ones(3))
        with pytest.raises(UsageError):
            grad_check(lambda: x * 2.0, [x])

    @pytest.mark.parametrize(
        "op",
        [
            lambda a: T.exp(a),
            lambda a: T.log(T.exp(a) + 1.0),
            lambda a: T.sqrt(a * a + 1.0),
            lambda a: T.log_softmax(a),
            lambda a: T.softmax_rows(a),
            lambda a: T.leaky_relu(a, 0.1),
            lambda a: T.relu(a),
            lambda a: T.transpose(a, (1, 0)) * 2.0,
            lambda a: T.concat([a, a * 3.0], axis=1),
            lambda a: a[1:, ::2],
            lambda a: T.flip(a, 1),
            lambda a: T.mean(a, axis=0, keepdims=True),
            lambda a: a / (a * a + 2.0),
            lambda a: 1.0 - a,
        ],
    )
    def test_elementary_ops(self, rng, op):
        a = leaf(rng.normal(size=(3, 4)))
        # keep kinks of relu/leaky away from the probe step
        a.data[np.abs(a.data) < 1e-3] = 0.5
        c = rng.normal(size=op(a).shape)
        assert grad_check(lambda: T.tsum(op(a) * c), [a]) < 1e-4


class TestGraph:
    def test_detached_receives_no_grad(self, rng):
        x = leaf(rng.normal(size=3))
        y = x.detach()
        T.tsum(x * y).backward()
        assert y.grad is None and x.grad is not None

    def test_no_grad_block(self):
        x = leaf([1.0])
        with T.no_grad():
            y = x * 2.0
        assert not y.requires_grad

    def test_reused_node_accumulates(self):
        x = leaf(2.0)
        y = x * x
        (y + y).backward()
        assert float(x.grad) == 8.0

    def test_backward_needs_scalar(self):
        with pytest.raises(UsageError):
            (leaf(np.ones(2)) * 1.0).backward()


class TestCheckpoint:
    def test_round_trip(self, rng, tmp_path):
        arrays = {"a.w": rng.normal(size=(2, 3)), "gamma": np.array(0.5), "v": np.arange(4.0)}
        checkpoint.save(tmp_path / "x.laga", arrays)
        back = checkpoint.load(tmp_path / "x.laga")
        assert list(back) == list(arrays)
        for k in arrays:
            assert back[k].shape == arrays[k].shape
            np.testing.assert_array_equal(back[k], arrays[k])

    def test_byte_layout(self):
        raw = checkpoint.dumps({"ab": np.array([[1.5, -2.0]])})
        expect = b"LAGA1" + struct.pack("<I", 2) + b"ab" + struct.pack("<III", 2, 1, 2) + struct.pack("<2d", 1.5, -2.0)
        assert raw == expect

    def test_bad_magic(self):
        with pytest.raises(FormatError):
            checkpoint.loads(b"NOPE!")

    def test_truncated(self):
        raw = checkpoint.dumps({"x": np.ones(3)})
        with pytest.raises(FormatError, match="offset"):
            checkpoint.loads(raw[:-4])
