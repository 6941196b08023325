import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dsthcn import numcore as nc
from dsthcn.numcore import DimensionError, InputError


def loss_and_grad(fn, *arrays, rng):
    """Random linear functional of fn's output, for gradient checks."""
    out = fn(*arrays)
    r = rng.normal(size=out.shape)
    return (lambda: float((fn(*arrays) * r).sum())), r


class TestContractAxis:
    def test_identity(self, rng):
        x = rng.normal(size=(2, 3, 4))
        assert np.array_equal(nc.contract_axis(x, np.eye(4)), x)
        assert np.array_equal(nc.contract_axis(x, np.eye(3), "time"), x)

    def test_swap(self):
        out = nc.contract_axis(np.ones((1, 1, 2)), np.array([[0.0, 1.0], [1.0, 0.0]]))
        assert np.array_equal(out, np.ones((1, 1, 2)))

    def test_hand_sum(self):
        out = nc.contract_axis(np.array([[[1.0, 2.0]]]), np.array([[1.0, 1.0], [0.0, 1.0]]))
        assert out.tolist() == [[[1.0, 3.0]]]

    def test_time_axis_matches_loops(self, rng):
        x = rng.normal(size=(2, 5, 3))
        m = rng.normal(size=(5, 5))
        expected = np.zeros_like(x)
        for c in range(2):
            for t in range(5):
                for v in range(3):
                    expected[c, t, v] = sum(x[c, s, v] * m[s, t] for s in range(5))
        np.testing.assert_allclose(nc.contract_axis(x, m, "time"), expected, atol=1e-12)

    def test_batched_operator(self, rng):
        x = rng.normal(size=(3, 2, 4, 5))
        m = rng.normal(size=(3, 5, 5))
        out = nc.contract_axis(x, m)
        for b in range(3):
            np.testing.assert_allclose(out[b], x[b] @ m[b], atol=1e-12)

    def test_shape_mismatch(self, rng):
        with pytest.raises(DimensionError):
            nc.contract_axis(rng.normal(size=(1, 2, 3)), np.eye(4))
        with pytest.raises(DimensionError):
            nc.contract_axis(rng.normal(size=(1, 2, 3)), np.ones((3, 2)))

    @pytest.mark.parametrize("axis", ["vertex", "time"])
    def test_gradients(self, rng, axis):
        x = rng.normal(size=(2, 3, 4, 4))
        m = rng.normal(size=(2, 4, 4))
        out = nc.contract_axis(x, m, axis)
        r = rng.normal(size=out.shape)
        dx, dm = nc.contract_backward(x, m, r, axis, need_op=True)
        rep = nc.grad_check(lambda: float((nc.contract_axis(x, m, axis) * r).sum()),
                            {"x": x, "m": m}, {"x": dx, "m": dm})
        assert rep.max_error < 1e-8, rep


class TestChannelMap:
    def test_identity(self, rng):
        x = rng.normal(size=(3, 2, 2))
        assert np.allclose(nc.channel_map(x, np.eye(3), np.zeros(3)), x)

    def test_hand_value(self):
        out = nc.channel_map(np.ones((2, 1, 1)), np.array([[1.0], [1.0]]), np.array([1.0]))
        assert out.item() == 3.0

    def test_bias_only(self, rng):
        x = rng.normal(size=(2, 3, 4))
        out = nc.channel_map(x, np.zeros((2, 3)), np.array([1.0, 2.0, 3.0]))
        assert np.array_equal(out, np.broadcast_to(np.array([1.0, 2.0, 3.0])[:, None, None], out.shape))

    def test_row_mismatch(self, rng):
        with pytest.raises(DimensionError):
            nc.channel_map(rng.normal(size=(2, 3, 4)), np.zeros((3, 1)))

    def test_linear_gradient_exact(self, rng):
        x = rng.normal(size=(2, 3, 4, 5))
        w = rng.normal(size=(3, 2))
        b = rng.normal(size=2)
        r = rng.normal(size=(2, 2, 4, 5))
        dx, dw, db = nc.channel_map_backward(x, w, r)
        rep = nc.grad_check(lambda: float((nc.channel_map(x, w, b) * r).sum()),
                            {"x": x, "w": w, "b": b}, {"x": dx, "w": dw, "b": db})
        assert rep.max_error < 1e-8, rep


class TestTemporalConv:
    def test_identity_kernel(self, rng):
        x = rng.normal(size=(1, 6, 2))
        out, _ = nc.temporal_conv(x, np.ones((1, 1, 1)))
        assert np.array_equal(out, x)

    def test_hand_convolution(self):
        x = np.array([1.0, 2.0, 3.0]).reshape(1, 3, 1)
        out, _ = nc.temporal_conv(x, np.ones((1, 1, 3)))
        assert out.ravel().tolist() == [3.0, 6.0, 5.0]

    @pytest.mark.parametrize("t,stride,expected", [(4, 2, 2), (20, 2, 10), (7, 2, 4), (5, 1, 5)])
    def test_output_frames(self, rng, t, stride, expected):
        out, _ = nc.temporal_conv(rng.normal(size=(2, t, 3)), rng.normal(size=(2, 2, 5)),
                                  dilation=2, stride=stride)
        assert out.shape == (2, expected, 3)

    def test_even_kernel_rejected(self, rng):
        with pytest.raises(InputError):
            nc.temporal_conv(rng.normal(size=(1, 4, 1)), np.ones((1, 1, 2)))

    def test_matches_direct_sum(self, rng):
        x = rng.normal(size=(2, 7, 3))
        w = rng.normal(size=(3, 2, 5))
        b = rng.normal(size=3)
        d, s = 2, 2
        out, _ = nc.temporal_conv(x, w, b, dilation=d, stride=s)
        pad = d * 2
        xp = np.pad(x, ((0, 0), (pad, pad), (0, 0)))
        for o in range(3):
            for ti, t in enumerate(range(0, 7, s)):
                expect = b[o] + sum(w[o, i, j] * xp[i, t + j * d] for i in range(2) for j in range(5))
                np.testing.assert_allclose(out[o, ti], expect, atol=1e-12)

    @pytest.mark.parametrize("dilation,stride", [(1, 1), (2, 1), (1, 2), (2, 2)])
    def test_gradients(self, rng, dilation, stride):
        x = rng.normal(size=(2, 3, 7, 2))
        w = rng.normal(size=(2, 3, 5))
        b = rng.normal(size=2)
        out, cache = nc.temporal_conv(x, w, b, dilation, stride)
        r = rng.normal(size=out.shape)
        dx, dw, db = nc.temporal_conv_backward(cache, w, r, dilation, stride)
        rep = nc.grad_check(
            lambda: float((nc.temporal_conv(x, w, b, dilation, stride)[0] * r).sum()),
            {"x": x, "w": w, "b": b}, {"x": dx, "w": dw, "b": db})
        assert rep.max_error < 1e-8, rep


class TestMaxPool:
    def test_values(self):
        x = np.array([1.0, 5.0, 2.0, 0.0, 3.0]).reshape(1, 5, 1)
        out, _ = nc.max_pool_time(x, 3, 1)
        assert out.ravel().tolist() == [5.0, 5.0, 5.0, 3.0, 3.0]
        out, _ = nc.max_pool_time(x, 3, 2)
        assert out.ravel().tolist() == [5.0, 5.0, 3.0]

    @pytest.mark.parametrize("stride", [1, 2])
    def test_gradient(self, rng, stride):
        x = rng.normal(size=(2, 2, 6, 3))
        out, cache = nc.max_pool_time(x, 3, stride)
        r = rng.normal(size=out.shape)
        dx = nc.max_pool_time_backward(cache, r, stride)
        rep = nc.grad_check(lambda: float((nc.max_pool_time(x, 3, stride)[0] * r).sum()),
                            {"x": x}, {"x": dx})
        assert rep.max_error < 1e-6, rep


class TestBatchNorm:
    def _bn(self, c):
        return np.ones(c), np.zeros(c), np.zeros(c), np.ones(c)

    def test_constant_input_is_zero(self):
        g, b, rm, rv = self._bn(2)
        out, _ = nc.batch_norm(np.full((3, 2, 4, 5), 7.0), g, b, rm, rv, True)
        assert np.allclose(out, 0)

    def test_two_values(self):
        g, b, rm, rv = self._bn(1)
        x = np.array([-1.0, 1.0]).reshape(2, 1, 1, 1)
        out, _ = nc.batch_norm(x, g, b, rm, rv, True)
        np.testing.assert_allclose(out.ravel(), [-1 / math.sqrt(1 + 1e-5), 1 / math.sqrt(1 + 1e-5)])

    def test_eval_identity(self, rng):
        g, b, rm, rv = self._bn(3)
        x = rng.normal(size=(2, 3, 4, 2))
        out, _ = nc.batch_norm(x, g, b, rm, rv, False)
        np.testing.assert_allclose(out, x / math.sqrt(1 + 1e-5))

    def test_running_stats_update(self, rng):
        g, b, rm, rv = self._bn(2)
        x = rng.normal(loc=3.0, size=(4, 2, 5, 3))
        nc.batch_norm(x, g, b, rm, rv, True)
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3), ddof=1)
        np.testing.assert_allclose(rm, 0.1 * mean)
        np.testing.assert_allclose(rv, 0.9 + 0.1 * var)

    def test_empty_batch(self):
        g, b, rm, rv = self._bn(2)
        with pytest.raises(DimensionError):
            nc.batch_norm(np.zeros((0, 2, 3, 3)), g, b, rm, rv, True)

    @pytest.mark.parametrize("training", [True, False])
    def test_gradients(self, rng, training):
        x = rng.normal(size=(3, 2, 4, 3))
        gamma, beta = rng.normal(size=2), rng.normal(size=2)
        rm, rv = rng.normal(size=2), rng.uniform(0.5, 2, size=2)

        def f():
            return nc.batch_norm(x, gamma, beta, rm.copy(), rv.copy(), training)

        out, cache = f()
        r = rng.normal(size=out.shape)
        dx, dg, db = nc.batch_norm_backward(cache, gamma, r)
        rep = nc.grad_check(lambda: float((f()[0] * r).sum()),
                            {"x": x, "gamma": gamma, "beta": beta}, {"x": dx, "gamma": dg, "beta": db})
        assert rep.max_error < 1e-6, rep


class TestActivations:
    def test_points(self):
        assert nc.activation(np.array(0.0), "tanh") == 0.0
        assert nc.activation(np.array(0.0), "sigmoid") == 0.5
        assert nc.activation(np.array([-3.0, 2.0]), "relu").tolist() == [0.0, 2.0]

    @given(st.lists(st.floats(-50, 50), min_size=1, max_size=20))
    def test_ranges(self, values):
        x = np.array(values)
        assert np.all(np.abs(nc.tanh(x)) <= 1)
        s = nc.sigmoid(x)
        assert np.all((s >= 0) & (s <= 1))
        assert np.all(nc.relu(x) >= 0)

    @pytest.mark.parametrize("kind", ["relu", "sigmoid", "tanh"])
    def test_gradients(self, rng, kind):
        x = rng.normal(size=(3, 4))
        y = nc.activation(x, kind)
        r = rng.normal(size=x.shape)
        dx = nc.activation_backward(x, y, r, kind)
        rep = nc.grad_check(lambda: float((nc.activation(x, kind) * r).sum()), {"x": x}, {"x": dx})
        assert rep.max_error < 1e-6, rep

    def test_unknown(self):
        with pytest.raises(InputError):
            nc.activation(np.zeros(1), "gelu")


class TestCrossEntropy:
    def test_uniform(self):
        loss, _ = nc.softmax_cross_entropy(np.zeros((3, 4)), [0, 1, 3])
        assert loss == pytest.approx(math.log(4), abs=1e-12)

    def test_margin_limit(self):
        loss, _ = nc.softmax_cross_entropy(np.array([[60.0, 0.0, 0.0]]), [0])
        assert loss < 1e-20

    def test_closed_form(self):
        loss, _ = nc.softmax_cross_entropy(np.array([[1.0, 0.0]]), [0])
        assert loss == pytest.approx(math.log(1 + math.exp(-1)), abs=1e-12)
        assert loss == pytest.approx(0.313262, abs=1e-6)

    def test_label_range(self):
        with pytest.raises(InputError):
            nc.softmax_cross_entropy(np.zeros((1, 3)), [3])

    @given(st.integers(1, 5), st.integers(2, 6), st.integers(0, 10_000))
    @settings(max_examples=30)
    def test_gradient_rows_sum_to_zero(self, b, k, seed):
        r = np.random.default_rng(seed)
        logits = r.normal(scale=5, size=(b, k))
        _, grad = nc.softmax_cross_entropy(logits, r.integers(k, size=b))
        assert np.all(np.abs(grad.sum(axis=1)) < 1e-10)

    def test_gradient(self, rng):
        logits = rng.normal(size=(4, 3))
        labels = [0, 2, 1, 2]
        _, g = nc.softmax_cross_entropy(logits, labels)
        rep = nc.grad_check(lambda: nc.softmax_cross_entropy(logits, labels)[0],
                            {"logits": logits}, {"logits": g})
        assert rep.max_error < 1e-8, rep


class TestGradCheck:
    def test_tanh_composite(self, rng):
        x = rng.normal(size=(3, 2, 4))
        w = rng.normal(size=(3, 3))

        def f():
            return float(np.tanh(nc.channel_map(x, w)).sum())

        y = np.tanh(nc.channel_map(x, w))
        dz = 1 - y ** 2
        dx, dw, _ = nc.channel_map_backward(x, w, dz)
        assert nc.grad_check(f, {"x": x, "w": w}, {"x": dx, "w": dw}).max_error < 1e-4

    def test_detects_wrong_gradient(self, rng):
        x = rng.normal(size=5)
        rep = nc.grad_check(lambda: float((x ** 2).sum()), {"x": x}, {"x": 3 * x})
        assert not rep.ok

    def test_non_finite(self):
        x = np.array([0.0])
        with np.errstate(invalid="ignore"), pytest.raises(nc.NumericError):
            nc.grad_check(lambda: float(np.log(x - 1).sum()),
                          {"x": x}, {"x": x})

    def test_requires_float64(self):
        with pytest.raises(InputError):
            nc.grad_check(lambda: 0.0, {"x": np.zeros(2, np.float32)}, {"x": np.zeros(2)})


def test_determinism(rng):
    x = rng.normal(size=(2, 3, 6, 4))
    w = rng.normal(size=(3, 3, 5))
    a = nc.temporal_conv(x, w, dilation=2, stride=2)[0]
    b = nc.temporal_conv(x.copy(), w.copy(), dilation=2, stride=2)[0]
    assert a.tobytes() == b.tobytes()
