import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mmichat.errors import InputError
from mmichat.tensor import Tape, eager, log_softmax, matmul, sigmoid, tanh


class TestMatmul:
    def test_identity(self):
        np.testing.assert_array_equal(matmul([[1, 0], [0, 1]], [[3], [4]]), [[3], [4]])

    def test_hand_product(self):
        np.testing.assert_array_equal(matmul([[1, 2], [3, 4]], [[5], [6]]), [[17], [39]])

    def test_one_by_one(self):
        assert matmul([[2.0]], [[0.5]])[0, 0] == 1.0

    def test_shape_mismatch_rejected(self):
        with pytest.raises(InputError):
            matmul(np.ones((2, 3)), np.ones((2, 3)))


class TestElementwise:
    def test_sigmoid_values(self):
        assert sigmoid(np.array([0.0]))[0] == 0.5
        assert sigmoid(np.array([1.0]))[0] == pytest.approx(0.7310585786, abs=1e-10)

    def test_sigmoid_saturates_without_nan(self):
        out = sigmoid(np.array([-1e4, -50.0, 50.0, 1e4]))
        assert np.all(np.isfinite(out))
        assert np.all(np.diff(out) >= 0)
        assert out[-1] == pytest.approx(1.0)

    def test_tanh_values(self):
        assert tanh(np.array([0.0]))[0] == 0.0
        assert tanh(np.array([1.0]))[0] == pytest.approx(0.76159415, abs=1e-8)

    @given(arrays(np.float64, 5, elements=st.floats(-30, 30)))
    def test_tanh_odd(self, x):
        np.testing.assert_array_equal(tanh(-x), -tanh(x))


class TestLogSoftmax:
    def test_uniform(self):
        np.testing.assert_allclose(log_softmax(np.array([[7.0, 7.0, 7.0]])),
                                   [[math.log(1 / 3)] * 3], atol=1e-15)

    def test_closed_form(self):
        out = log_softmax(np.array([[0.0, math.log(3.0)]]))
        np.testing.assert_allclose(out, [[math.log(0.25), math.log(0.75)]], atol=1e-15)

    @settings(max_examples=50)
    @given(arrays(np.float64, (3, 6), elements=st.floats(-500, 500)), st.floats(-1e3, 1e3))
    def test_normalised_and_shift_invariant(self, x, k):
        out = log_softmax(x)
        np.testing.assert_allclose(np.exp(out).sum(axis=1), 1.0, atol=1e-12)
        np.testing.assert_allclose(log_softmax(x + k), out, atol=1e-9)


class TestTape:
    def test_square(self):
        tape = Tape()
        x = tape.param(np.array([[3.0]]))
        (g,) = tape.backward(tape.mul(x, x))
        assert g[0, 0] == 6.0

    def test_constant_has_zero_gradient(self):
        tape = Tape()
        x = tape.param(np.array([[3.0]]))
        y = tape.param(np.array([[2.0]]))
        gx, gy = tape.backward(tape.mul(y, y))
        assert gx[0, 0] == 0.0 and gy[0, 0] == 4.0

    def test_non_scalar_loss_rejected(self):
        tape = Tape()
        x = tape.param(np.ones((2, 2)))
        with pytest.raises(InputError):
            tape.backward(tape.tanh(x))

    def test_ops_against_finite_differences(self):
        rng = np.random.default_rng(3)
        a0, b0 = rng.normal(size=(3, 4)), rng.normal(size=(4, 5))
        ids = np.array([0, 2, 4])

        def build(ops, a, b):
            z = ops.add(ops.matmul(ops.tanh(a), b), ops.sigmoid(ops.cols(ops.concat([a, a], 1), 2, 7)))
            lp = ops.log_softmax(ops.mul(z, z))
            return lp

        tape = Tape()
        a, b = tape.param(a0), tape.param(b0)
        loss = tape.pick_sum(build(tape, a, b), ids, np.ones(3))
        ga, gb = tape.backward(loss)

        def f(a, b):
            lp = build(eager, a, b)
            return lp[np.arange(3), ids].sum()

        eps = 1e-6
        for arr, grad, which in ((a0, ga, 0), (b0, gb, 1)):
            num = np.zeros_like(arr)
            for idx in np.ndindex(arr.shape):
                plus, minus = arr.copy(), arr.copy()
                plus[idx] += eps
                minus[idx] -= eps
                args_p = (plus, b0) if which == 0 else (a0, plus)
                args_m = (minus, b0) if which == 0 else (a0, minus)
                num[idx] = (f(*args_p) - f(*args_m)) / (2 * eps)
            np.testing.assert_allclose(grad, num, rtol=1e-6, atol=1e-8)

    def test_deterministic(self):
        x = np.linspace(-2, 2, 12).reshape(3, 4)
        assert np.array_equal(log_softmax(x), log_softmax(x.copy()))
