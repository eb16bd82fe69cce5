import numpy as np
import pytest
from hypothesis import given, strategies as st
from numpy.testing import assert_allclose, assert_array_equal

from convdpm import tensorcore as tc
from oracles import loop_correlate, loop_maxpool


def central_diff(f, x, eps=1e-5):
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        old = x[idx]
        x[idx] = old + eps
        fp = f()
        x[idx] = old - eps
        fm = f()
        x[idx] = old
        g[idx] = (fp - fm) / (2 * eps)
    return g


class TestCorrelate:
    def test_scalar_product(self):
        out = tc.correlate2d_array(np.array([[[5.0]]]), np.array([[[[3.0]]]]))
        assert_array_equal(out, [[[15.0]]])

    def test_ones_sum(self):
        out = tc.correlate2d_array(np.ones((1, 3, 3)), np.ones((1, 1, 3, 3)))
        assert_array_equal(out, [[[9.0]]])

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_loop_oracle(self, seed):
        r = np.random.default_rng(seed)
        x = r.normal(size=(2, 8, 8))
        w = r.normal(size=(3, 2, 3, 3))
        assert_allclose(tc.correlate2d_array(x, w, 2), loop_correlate(x, w, 2), atol=1e-12)

    def test_no_kernel_flip(self):
        x = np.zeros((1, 3, 3))
        x[0, 0, 0] = 1.0
        w = np.arange(9.0).reshape(1, 1, 3, 3)
        assert tc.correlate2d_array(x, w)[0, 0, 0] == 0.0

    def test_channel_mismatch_names_dimensions(self):
        with pytest.raises(tc.ShapeError, match="C_in=2.*C=3"):
            tc.correlate2d_array(np.zeros((3, 5, 5)), np.zeros((1, 2, 3, 3)))

    def test_filter_larger_than_input(self):
        with pytest.raises(tc.ShapeError, match="larger"):
            tc.correlate2d_array(np.zeros((1, 2, 2)), np.zeros((1, 1, 3, 3)))

    @pytest.mark.parametrize("stride", [0, -1])
    def test_bad_stride(self, stride):
        with pytest.raises(tc.ShapeError):
            tc.correlate2d_array(np.zeros((1, 4, 4)), np.zeros((1, 1, 2, 2)), stride)

    @given(a=st.floats(-3, 3), b=st.floats(-3, 3), seed=st.integers(0, 2**16))
    def test_linear_in_input(self, a, b, seed):
        r = np.random.default_rng(seed)
        x, y = r.normal(size=(2, 2, 6, 6))
        w = r.normal(size=(2, 2, 3, 3))
        lhs = tc.correlate2d_array(a * x + b * y, w)
        rhs = a * tc.correlate2d_array(x, w) + b * tc.correlate2d_array(y, w)
        assert_allclose(lhs, rhs, atol=1e-12 * max(1.0, np.abs(rhs).max()) * 10)

    @given(a=st.floats(-3, 3), b=st.floats(-3, 3), seed=st.integers(0, 2**16))
    def test_linear_in_filter(self, a, b, seed):
        r = np.random.default_rng(seed)
        x = r.normal(size=(2, 6, 6))
        u, v = r.normal(size=(2, 2, 2, 3, 3))
        lhs = tc.correlate2d_array(x, a * u + b * v)
        rhs = a * tc.correlate2d_array(x, u) + b * tc.correlate2d_array(x, v)
        assert_allclose(lhs, rhs, atol=1e-12 * max(1.0, np.abs(rhs).max()) * 10)


class TestMaxPool:
    def test_small_example(self):
        out, arg = tc.maxpool2d_array(np.array([[[1.0, 2.0], [3.0, 4.0]]]), 2, 2)
        assert_array_equal(out, [[[4.0]]])
        assert_array_equal(arg[0, 0, 0], (1, 1))

    def test_constant_input_takes_first_index(self):
        out, arg = tc.maxpool2d_array(np.full((1, 4, 4), 7.0), 2, 2)
        assert_array_equal(out, np.full((1, 2, 2), 7.0))
        assert_array_equal(arg[0, 1, 1], (2, 2))
        assert_array_equal(arg[0, 0, 1], (0, 2))

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_loop_oracle(self, seed):
        x = np.random.default_rng(seed).normal(size=(1, 6, 6))
        out, arg = tc.maxpool2d_array(x, 2, 2)
        ref, ref_arg = loop_maxpool(x, 2, 2)
        assert_array_equal(out, ref)
        assert_array_equal(arg, ref_arg)

    def test_overlapping_windows(self):
        x = np.random.default_rng(3).normal(size=(2, 7, 7))
        out, arg = tc.maxpool2d_array(x, 3, 2)
        ref, ref_arg = loop_maxpool(x, 3, 2)
        assert_array_equal(out, ref)
        assert_array_equal(arg, ref_arg)

    @pytest.mark.parametrize("k,s", [(0, 1), (2, 0), (-1, 1)])
    def test_nonpositive_rejected(self, k, s):
        with pytest.raises(tc.ShapeError):
            tc.maxpool2d_array(np.zeros((1, 4, 4)), k, s)


class TestBackward:
    def test_square(self):
        w = tc.parameter(3.0)
        f = tc.mul(w, w)
        tc.backward(f)
        assert float(w.grad) == 6.0

    def test_non_scalar_root_rejected(self):
        w = tc.parameter(np.ones(3))
        with pytest.raises(tc.ShapeError, match="scalar"):
            tc.backward(tc.mul(w, w))

    def test_every_parameter_gets_same_shaped_grad(self):
        x = tc.parameter(np.random.default_rng(0).normal(size=(2, 5, 5)))
        w = tc.parameter(np.random.default_rng(1).normal(size=(3, 2, 3, 3)))
        b = tc.parameter(np.zeros(3))
        unused = tc.parameter(np.ones(4))
        out = tc.total(tc.relu(tc.add_bias(tc.correlate2d(x, w), b)))
        leaves = tc.backward(out)
        for p in (x, w, b):
            assert p.grad.shape == p.value.shape
            assert any(p is leaf for leaf in leaves)
        assert unused.grad is None

    @pytest.mark.parametrize("seed", range(4))
    def test_filter_gradient_finite_difference(self, seed):
        r = np.random.default_rng(seed)
        x = r.normal(size=(1, 5, 5))
        wv = r.normal(size=(2, 1, 3, 3))
        weights = r.normal(size=(2, 3, 3))
        w = tc.parameter(wv)
        tc.backward(tc.dot_const(tc.correlate2d(x, w), weights))
        num = central_diff(lambda: float(np.sum(tc.correlate2d_array(x, wv) * weights)), wv)
        err = np.abs(w.grad - num).max() / max(np.abs(num).max(), 1e-12)
        assert err < 1e-4

    @pytest.mark.parametrize("stride", [1, 2])
    def test_input_gradient_finite_difference(self, stride):
        r = np.random.default_rng(stride)
        xv = r.normal(size=(2, 7, 7))
        wv = r.normal(size=(3, 2, 3, 3))
        out_shape = tc.correlate2d_array(xv, wv, stride).shape
        weights = r.normal(size=out_shape)
        x = tc.parameter(xv)
        tc.backward(tc.dot_const(tc.correlate2d(x, wv, stride), weights))
        num = central_diff(lambda: float(np.sum(tc.correlate2d_array(xv, wv, stride) * weights)), xv)
        assert_allclose(x.grad, num, rtol=1e-6, atol=1e-8)

    def test_maxpool_routes_only_to_argmax(self):
        xv = np.random.default_rng(5).normal(size=(1, 4, 4))
        x = tc.parameter(xv)
        node, arg = tc.maxpool2d(x, 2, 2)
        tc.backward(tc.total(node))
        mask = np.zeros((4, 4), dtype=bool)
        for i in range(2):
            for j in range(2):
                mask[tuple(arg[0, i, j])] = True
        assert np.all(x.grad[0][~mask] == 0.0)
        assert np.all(x.grad[0][mask] == 1.0)

    @given(seed=st.integers(0, 2**16))
    def test_maxpool_conserves_gradient_mass(self, seed):
        r = np.random.default_rng(seed)
        x = tc.parameter(r.normal(size=(2, 6, 6)))
        node, _ = tc.maxpool2d(x, 2, 2)
        g = r.normal(size=node.value.shape)
        tc.backward(tc.dot_const(node, g))
        assert_allclose(x.grad.sum(), g.sum(), atol=1e-12)

    def test_shared_node_accumulates(self):
        w = tc.parameter(np.array([2.0]))
        tc.backward(tc.total(tc.add(w, w)))
        assert_array_equal(w.grad, [2.0])

    def test_constants_carry_no_graph(self):
        node = tc.relu(tc.constant(np.ones(3)))
        assert not node.requires_grad
        assert node.parents == ()

    def test_add_shape_mismatch(self):
        with pytest.raises(tc.ShapeError, match=r"\(2,\).*\(3,\)"):
            tc.add(np.zeros(2), np.zeros(3))

    def test_bias_shape_checked(self):
        with pytest.raises(tc.ShapeError):
            tc.add_bias(np.zeros((2, 3, 3)), np.zeros(3))

    def test_dot_const_ignores_inf_at_zero_weight(self):
        v = np.array([1.0, -np.inf, 2.0])
        x = tc.parameter(v)
        out = tc.dot_const(x, np.array([1.0, 0.0, 3.0]))
        assert float(out.value) == 7.0
        tc.backward(out)
        assert_array_equal(x.grad, [1.0, 0.0, 3.0])

    @given(seed=st.integers(0, 2**16))
    def test_outputs_finite_for_finite_inputs(self, seed):
        r = np.random.default_rng(seed)
        x = tc.constant(r.normal(size=(2, 6, 6)))
        y = tc.relu(tc.add_bias(tc.correlate2d(x, r.normal(size=(2, 2, 3, 3))), np.ones(2)))
        y, _ = tc.maxpool2d(y, 2, 2)
        assert np.all(np.isfinite(y.value))
