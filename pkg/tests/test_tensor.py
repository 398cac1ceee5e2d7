import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from strpm import tensor as T
from strpm.tensor import Tape, Tensor, grad_check, make_tensor


def naive_conv2d(x, w, b, stride, padding):
    """Nested-loop cross-correlation."""
    n, c, h, wd = x.shape
    oc, _, kh, kw = w.shape
    xp = np.zeros((n, c, h + 2 * padding, wd + 2 * padding))
    xp[:, :, padding:padding + h, padding:padding + wd] = x
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (wd + 2 * padding - kw) // stride + 1
    out = np.zeros((n, oc, oh, ow))
    for i in range(n):
        for o in range(oc):
            for r in range(oh):
                for s in range(ow):
                    acc = b[o]
                    for ci in range(c):
                        for p in range(kh):
                            for q in range(kw):
                                acc += xp[i, ci, r * stride + p, s * stride + q] * w[o, ci, p, q]
                    out[i, o, r, s] = acc
    return out


def scatter_conv_transpose2d(x, w, stride, padding):
    """Each input value scatters its kernel-weighted copy into the output."""
    n, ic, h, wd = x.shape
    _, oc, kh, kw = w.shape
    full = np.zeros((n, oc, (h - 1) * stride + kh, (wd - 1) * stride + kw))
    for i in range(n):
        for ci in range(ic):
            for r in range(h):
                for s in range(wd):
                    full[i, :, r * stride:r * stride + kh, s * stride:s * stride + kw] += x[i, ci, r, s] * w[ci]
    oh = (h - 1) * stride - 2 * padding + kh
    ow = (wd - 1) * stride - 2 * padding + kw
    return full[:, :, padding:padding + oh, padding:padding + ow]


class TestMakeTensor:
    def test_zero_fill(self):
        t = make_tensor((1, 1, 2, 2), 0)
        assert t.shape == (1, 1, 2, 2)
        assert np.all(t.data == 0) and t.size == 4

    def test_from_data(self):
        t = make_tensor((1, 2, 1, 1), [3, 4])
        assert t.data[0, 0, 0, 0] == 3 and t.data[0, 1, 0, 0] == 4

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            make_tensor((1, 1, 2, 2), [1, 2, 3])

    @pytest.mark.parametrize("shape", [(1, 1, 2), (0, 1, 2, 2), (1, -1, 2, 2)])
    def test_bad_shape(self, shape):
        with pytest.raises(ValueError):
            make_tensor(shape)


class TestConv2d:
    def test_zero_kernel(self, rng):
        x = Tensor(rng.standard_normal((2, 3, 5, 5)))
        out = T.conv2d(x, Tensor(np.zeros((4, 3, 3, 3))), Tensor(np.zeros(4)), 1, 1)
        assert np.all(out.data == 0)

    def test_center_of_ones_kernel(self):
        x = make_tensor((1, 1, 3, 3), np.arange(1, 10))
        w = Tensor(np.ones((1, 1, 3, 3)))
        out = T.conv2d(x, w, Tensor(np.zeros(1)), 1, 1)
        oracle = naive_conv2d(x.data, w.data, np.zeros(1), 1, 1)
        assert oracle[0, 0, 1, 1] == 45
        assert out.data[0, 0, 1, 1] == 45
        np.testing.assert_allclose(out.data, oracle, rtol=0, atol=1e-12)

    def test_identity_kernel(self, rng):
        x = Tensor(rng.standard_normal((2, 1, 4, 5)))
        out = T.conv2d(x, Tensor(np.ones((1, 1, 1, 1))), Tensor(np.zeros(1)), 1, 0)
        np.testing.assert_array_equal(out.data, x.data)

    @settings(max_examples=25, deadline=None)
    @given(stride=st.integers(1, 3), padding=st.integers(0, 2), k=st.integers(1, 4),
           h=st.integers(4, 7), seed=st.integers(0, 10_000))
    def test_matches_nested_loops(self, stride, padding, k, h, seed):
        r = np.random.default_rng(seed)
        x = r.standard_normal((2, 2, h, h + 1))
        w = r.standard_normal((3, 2, k, k))
        b = r.standard_normal(3)
        out = T.conv2d(Tensor(x), Tensor(w), Tensor(b), stride, padding)
        np.testing.assert_allclose(out.data, naive_conv2d(x, w, b, stride, padding), atol=1e-12)

    def test_channel_mismatch(self, rng):
        with pytest.raises(ValueError, match="channels"):
            T.conv2d(Tensor(rng.random((1, 2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))))

    def test_output_too_small(self, rng):
        with pytest.raises(ValueError, match="output size"):
            T.conv2d(Tensor(rng.random((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 5, 5))))


class TestConvTranspose2d:
    def test_disjoint_block_copy(self):
        x = make_tensor((1, 1, 2, 2), [1, 2, 3, 4])
        out = T.conv_transpose2d(x, Tensor(np.ones((1, 1, 2, 2))), Tensor(np.zeros(1)), stride=2, padding=0)
        expected = scatter_conv_transpose2d(x.data, np.ones((1, 1, 2, 2)), 2, 0)
        np.testing.assert_array_equal(expected[0, 0], [[1, 1, 2, 2], [1, 1, 2, 2], [3, 3, 4, 4], [3, 3, 4, 4]])
        np.testing.assert_array_equal(out.data, expected)

    def test_zero_weights(self, rng):
        out = T.conv_transpose2d(Tensor(rng.random((1, 2, 3, 3))), Tensor(np.zeros((2, 3, 4, 4))), stride=2, padding=1)
        assert out.shape == (1, 3, 6, 6)
        assert np.all(out.data == 0)

    @settings(max_examples=25, deadline=None)
    @given(stride=st.integers(1, 3), padding=st.integers(0, 1), k=st.integers(2, 4), seed=st.integers(0, 10_000))
    def test_matches_scatter_oracle(self, stride, padding, k, seed):
        r = np.random.default_rng(seed)
        x = r.standard_normal((2, 3, 3, 4))
        w = r.standard_normal((3, 2, k, k))
        out = T.conv_transpose2d(Tensor(x), Tensor(w), None, stride, padding)
        np.testing.assert_allclose(out.data, scatter_conv_transpose2d(x, w, stride, padding), atol=1e-12)

    @settings(max_examples=25, deadline=None)
    @given(stride=st.integers(1, 3), padding=st.integers(0, 1), m=st.integers(1, 4), seed=st.integers(0, 10_000))
    def test_adjoint_identity(self, stride, padding, m, seed):
        r = np.random.default_rng(seed)
        k = 3
        size = stride * m + k - 2 * padding  # sizes where the strided windows tile exactly
        w = r.standard_normal((4, 3, k, k))
        x = r.standard_normal((2, 3, size, size))
        y_shape = T.conv2d(Tensor(x), Tensor(w), None, stride, padding).shape
        y = r.standard_normal(y_shape)
        lhs = np.sum(T.conv2d(Tensor(x), Tensor(w), None, stride, padding).data * y)
        back = T.conv_transpose2d(Tensor(y), Tensor(w), None, stride, padding).data
        assert back.shape == x.shape
        assert abs(lhs - np.sum(x * back)) < 1e-10

    def test_channel_mismatch(self):
        with pytest.raises(ValueError):
            T.conv_transpose2d(Tensor(np.zeros((1, 2, 2, 2))), Tensor(np.zeros((3, 1, 2, 2))))


class TestActivations:
    def test_sigmoid_zero(self):
        assert T.sigmoid(Tensor(np.zeros((1, 1, 1, 1)))).data.item() == 0.5

    def test_tanh_zero(self):
        assert T.tanh(Tensor(np.zeros((1, 1, 1, 1)))).data.item() == 0.0

    def test_sigmoid_ln3(self):
        # 1 / (1 + 1/3) = 3/4
        assert abs(T.activation(Tensor(np.full((1, 1, 1, 1), math.log(3))), "sigmoid").data.item() - 0.75) < 1e-15

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(-30, 30), min_size=1, max_size=20))
    def test_open_ranges(self, values):
        x = Tensor(np.array(values).reshape(1, 1, 1, -1))
        s = T.sigmoid(x).data
        t = T.tanh(x).data
        assert np.all((s > 0) & (s < 1))
        # tanh rounds to +-1 in float64 beyond |x| ~ 19
        small = np.abs(x.data) < 18
        assert np.all((t[small] > -1) & (t[small] < 1))

    def test_sigmoid_stable_for_large_negative(self):
        s = T.sigmoid(Tensor(np.array([-800.0, 800.0]).reshape(1, 1, 1, 2))).data
        assert np.all(np.isfinite(s))

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            T.activation(Tensor(np.zeros((1, 1, 1, 1))), "relu")


class TestElementwise:
    def test_identities(self, rng):
        x = Tensor(rng.standard_normal((1, 2, 3, 3)))
        np.testing.assert_array_equal(T.elementwise(x, Tensor(np.ones(x.shape)), "hadamard").data, x.data)
        np.testing.assert_array_equal(T.elementwise(x, Tensor(np.zeros(x.shape)), "add").data, x.data)

    def test_hadamard_values(self):
        a = make_tensor((1, 1, 1, 2), [2, 3])
        b = make_tensor((1, 1, 1, 2), [4, 5])
        np.testing.assert_array_equal(T.hadamard(a, b).data.ravel(), [8, 15])

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            T.add(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 2, 3))))


class TestConcat:
    def test_shapes_and_order(self, rng):
        a = Tensor(rng.random((1, 2, 4, 4)))
        b = Tensor(rng.random((1, 3, 4, 4)))
        out = T.concat_channels([a, b])
        assert out.shape == (1, 5, 4, 4)
        np.testing.assert_array_equal(out.data[:, 0], a.data[:, 0])
        np.testing.assert_array_equal(out.data[:, 2:], b.data)

    def test_single(self, rng):
        a = Tensor(rng.random((1, 2, 4, 4)))
        np.testing.assert_array_equal(T.concat_channels([a]).data, a.data)

    def test_mismatch(self):
        with pytest.raises(ValueError):
            T.concat_channels([Tensor(np.zeros((1, 1, 4, 4))), Tensor(np.zeros((1, 1, 4, 5)))])


class TestMse:
    def test_values(self, rng):
        x = Tensor(rng.random((1, 1, 3, 3)))
        assert T.mse(x, x).item() == 0.0
        assert T.mse(make_tensor((1, 1, 1, 1), [0]), make_tensor((1, 1, 1, 1), [1])).item() == 1.0
        assert T.mse(make_tensor((1, 1, 1, 2), [1, 2]), make_tensor((1, 1, 1, 2), [3, 5])).item() == 6.5

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            T.mse(Tensor(np.zeros((1, 1, 1, 2))), Tensor(np.zeros((1, 1, 2, 1))))


class TestBackward:
    def test_mse_against_zero(self, rng):
        x = Tensor(rng.standard_normal((1, 2, 3, 3)), requires_grad=True)
        with Tape():
            loss = T.mse(x, Tensor(np.zeros(x.shape)))
        T.backward(loss)
        np.testing.assert_allclose(x.grad, 2 * x.data / x.size, rtol=1e-14)

    def test_scale_linear(self, rng):
        x = Tensor(rng.standard_normal((1, 1, 2, 2)), requires_grad=True)
        with Tape():
            loss = T.sum(T.scale(x, 3))
        T.backward(loss)
        np.testing.assert_array_equal(x.grad, np.full(x.shape, 3.0))

    def test_accumulates_reuse(self, rng):
        x = Tensor(rng.standard_normal((1, 1, 2, 2)), requires_grad=True)
        with Tape():
            loss = T.sum(T.add(x, x))
        T.backward(loss)
        np.testing.assert_array_equal(x.grad, np.full(x.shape, 2.0))

    def test_shared_subexpression_matches_paths(self, rng):
        # f = sum(u * u) with u = tanh(x): df/dx = 2 tanh(x) (1 - tanh^2 x)
        x = Tensor(rng.standard_normal((1, 1, 3, 3)), requires_grad=True)
        with Tape():
            u = T.tanh(x)
            loss = T.sum(T.hadamard(u, u))
        T.backward(loss)
        t = np.tanh(x.data)
        np.testing.assert_allclose(x.grad, 2 * t * (1 - t * t), rtol=1e-12)

    def test_non_scalar(self):
        x = Tensor(np.ones((1, 1, 2, 2)), requires_grad=True)
        with Tape():
            y = T.scale(x, 2)
        with pytest.raises(ValueError, match="scalar"):
            T.backward(y)

    def test_not_on_tape(self):
        x = Tensor(np.ones((1, 1, 1, 1)), requires_grad=True)
        y = T.sum(x)
        with pytest.raises(ValueError, match="tape"):
            T.backward(y)

    def test_no_graph_outside_tape(self):
        x = Tensor(np.ones((1, 1, 1, 1)), requires_grad=True)
        assert not T.tanh(x).requires_grad

    def test_each_node_visited_once(self, rng):
        x = Tensor(rng.standard_normal((1, 1, 2, 2)), requires_grad=True)
        calls = []
        with Tape() as tape:
            y = T.tanh(x)
            z = T.add(y, y)
            loss = T.sum(z)
        out, inputs, fn = tape.records[0]

        def spy(g):
            calls.append(1)
            return fn(g)

        tape.records[0] = (out, inputs, spy)
        tape.backward(loss)
        assert len(calls) == 1

    def test_deterministic(self, rng):
        x = rng.standard_normal((2, 3, 6, 6))
        w = rng.standard_normal((4, 3, 3, 3))
        a = T.conv2d(Tensor(x), Tensor(w), None, 1, 1).data
        b = T.conv2d(Tensor(x), Tensor(w), None, 1, 1).data
        assert a.tobytes() == b.tobytes()


class TestGradCheck:
    def test_linear(self, rng):
        x = Tensor(rng.standard_normal((1, 2, 3, 3)))
        assert grad_check(lambda v: T.sum(v), x, 1e-5) < 1e-10

    def test_conv_mse(self, rng):
        w = Tensor(rng.standard_normal((2, 2, 3, 3)) * 0.5)
        b = Tensor(rng.standard_normal(2) * 0.1)
        x = Tensor(rng.standard_normal((1, 2, 5, 5)) * 0.1)
        zero = Tensor(np.zeros((1, 2, 5, 5)))
        assert grad_check(lambda v: T.mse(T.conv2d(v, w, b, 1, 1), zero), x, 1e-5) < 1e-4

    def test_sigmoid_mse(self, rng):
        x = Tensor(rng.standard_normal((1, 1, 4, 4)))
        zero = Tensor(np.zeros(x.shape))
        assert grad_check(lambda v: T.mse(T.activation(v, "sigmoid"), zero), x, 1e-5) < 1e-4

    def test_rejects_non_scalar(self, rng):
        with pytest.raises(ValueError):
            grad_check(lambda v: T.tanh(v), Tensor(rng.random((1, 1, 2, 2))), 1e-5)

    def test_detects_wrong_gradient(self, rng):
        x = Tensor(rng.standard_normal((1, 1, 2, 2)))

        def bad_square(v):
            out = T._emit(v.data ** 2, (v,), lambda g: (g * v.data,))  # missing factor 2
            return T.sum(out)

        assert grad_check(bad_square, x, 1e-5) > 0.1
