"""Tape, elementwise ops, matmul, loss, and the straight-through node.

Analytic gradients are checked against central finite differences with
h = 1e-5; differentiable ops must match within 1e-5 relative error on
random inputs in [-2, 2].
"""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dqa.autodiff import (DimensionError, Tape, ValidationError, add, bias_add,
                          conv2d, flatten_batch, matmul, mix, mul, relu, scale,
                          softmax_cross_entropy, softmax_with_temperature,
                          ste_node, sub, tensor_sum)

from _helpers import central_difference, relative_error

RNG = np.random.default_rng(12345)


def grad_of(build, x0):
    """Gradient of a scalar tape function at x0, via backward."""
    tape = Tape()
    x = tape.leaf(x0, requires_grad=True)
    loss = build(tape, x)
    tape.backward(loss)
    return x.grad


def value_of(build, x0):
    tape = Tape()
    x = tape.leaf(x0)
    return build(tape, x).item()


class TestMatmul:
    def test_identity(self):
        tape = Tape()
        a = tape.leaf(np.eye(2))
        b = tape.leaf([[1.0, 2.0], [3.0, 4.0]])
        assert np.array_equal(matmul(a, b).data, [[1.0, 2.0], [3.0, 4.0]])

    def test_hand_product(self):
        tape = Tape()
        out = matmul(tape.leaf([[1.0, 2.0]]), tape.leaf([[3.0], [4.0]]))
        assert np.array_equal(out.data, [[11.0]])

    def test_shape_error_reports_both_shapes(self):
        tape = Tape()
        with pytest.raises(DimensionError) as err:
            matmul(tape.leaf(np.zeros((3, 4))), tape.leaf(np.zeros((5, 2))))
        assert "(3, 4)" in str(err.value) and "(5, 2)" in str(err.value)

    def test_gradients_match_finite_differences(self):
        a0 = RNG.uniform(-2, 2, (3, 4))
        b0 = RNG.uniform(-2, 2, (4, 2))
        c = RNG.uniform(-1, 1, (3, 2))

        def loss_a(a):
            return float(np.sum((a @ b0) * c))

        def loss_b(b):
            return float(np.sum((a0 @ b) * c))

        tape = Tape()
        at = tape.leaf(a0, requires_grad=True)
        bt = tape.leaf(b0, requires_grad=True)
        loss = tensor_sum(mul(matmul(at, bt), tape.leaf(c)))
        tape.backward(loss)
        assert relative_error(at.grad, central_difference(loss_a, a0)) < 1e-6
        assert relative_error(bt.grad, central_difference(loss_b, b0)) < 1e-6


class TestElementwise:
    def test_relu_sign_cases(self):
        tape = Tape()
        assert np.array_equal(relu(tape.leaf([-1.0, 0.0, 2.0])).data, [0.0, 0.0, 2.0])

    def test_additive_identity(self):
        x0 = RNG.uniform(-2, 2, 5)
        tape = Tape()
        x = tape.leaf(x0)
        assert np.array_equal(add(x, 0.0).data, x0)

    def test_mul_product_rule(self):
        tape = Tape()
        x = tape.leaf([2.0], requires_grad=True)
        y = tape.leaf([3.0], requires_grad=True)
        tape.backward(tensor_sum(mul(x, y)))
        assert np.array_equal(x.grad, [3.0])
        assert np.array_equal(y.grad, [2.0])

    def test_incompatible_shapes(self):
        tape = Tape()
        with pytest.raises(DimensionError):
            add(tape.leaf(np.zeros(3)), tape.leaf(np.zeros(4)))

    def test_scalar_broadcast_gradient_sums(self):
        tape = Tape()
        c = tape.leaf([2.0], requires_grad=True)
        x = tape.leaf(np.arange(4.0))
        tape.backward(tensor_sum(mul(x, c)))
        assert np.array_equal(c.grad, [0.0 + 1 + 2 + 3])

    @pytest.mark.parametrize("op,f", [
        (add, lambda a, b: a + b),
        (sub, lambda a, b: a - b),
        (mul, lambda a, b: a * b),
    ])
    def test_binary_gradients(self, op, f):
        a0 = RNG.uniform(-2, 2, (2, 3))
        b0 = RNG.uniform(-2, 2, (2, 3))
        tape = Tape()
        a = tape.leaf(a0, requires_grad=True)
        b = tape.leaf(b0, requires_grad=True)
        tape.backward(tensor_sum(op(a, b)))
        assert relative_error(a.grad, central_difference(
            lambda v: float(np.sum(f(v, b0))), a0)) < 1e-5
        assert relative_error(b.grad, central_difference(
            lambda v: float(np.sum(f(a0, v))), b0)) < 1e-5

    def test_relu_and_scale_gradients(self):
        # keep samples away from the relu kink so the difference quotient is valid
        x0 = RNG.uniform(-2, 2, 40)
        x0[np.abs(x0) < 0.01] = 0.5
        g = grad_of(lambda tape, x: tensor_sum(relu(x)), x0)
        assert relative_error(g, central_difference(
            lambda v: float(np.sum(v * (v > 0))), x0)) < 1e-5
        g = grad_of(lambda tape, x: tensor_sum(scale(x, -1.7)), x0)
        assert np.allclose(g, -1.7)


class TestSoftmaxCrossEntropy:
    def test_uniform_logits(self):
        tape = Tape()
        loss = softmax_cross_entropy(tape.leaf([[0.0, 0.0]]), np.array([0]))
        assert loss.item() == pytest.approx(np.log(2.0), rel=1e-12)

    def test_confident_logits(self):
        # direct formula: -log softmax = log(1 + exp(-20))
        tape = Tape()
        loss = softmax_cross_entropy(tape.leaf([[10.0, -10.0]]), np.array([0]))
        assert loss.item() == pytest.approx(float(np.log1p(np.exp(-20.0))), rel=1e-9)

    def test_label_out_of_range(self):
        tape = Tape()
        with pytest.raises(ValidationError):
            softmax_cross_entropy(tape.leaf([[0.0, 0.0]]), np.array([2]))

    def test_gradient_matches_finite_differences(self):
        logits0 = RNG.uniform(-2, 2, (4, 3))
        labels = np.array([0, 2, 1, 2])

        def f(v):
            shifted = v - v.max(axis=1, keepdims=True)
            logz = np.log(np.exp(shifted).sum(axis=1))
            return float(np.mean(logz - shifted[np.arange(4), labels]))

        g = grad_of(lambda tape, x: softmax_cross_entropy(x, labels), logits0)
        assert relative_error(g, central_difference(f, logits0)) < 1e-6


class TestSteNode:
    def test_pass_through(self):
        g = grad_of(lambda tape, w: tensor_sum(ste_node(w, [0.333], [1.0])), np.array([0.3]))
        assert np.array_equal(g, [1.0])

    def test_clipped_region(self):
        g = grad_of(lambda tape, w: tensor_sum(ste_node(w, [0.333], [0.0])), np.array([0.3]))
        assert np.array_equal(g, [0.0])

    def test_forward_returns_value(self):
        tape = Tape()
        out = ste_node(tape.leaf([0.3, -0.4]), [0.25, -0.5], [1.0, 1.0])
        assert np.array_equal(out.data, [0.25, -0.5])

    def test_mask_must_be_binary(self):
        tape = Tape()
        with pytest.raises(ValidationError):
            ste_node(tape.leaf([0.3]), [0.25], [0.5])

    def test_composite_mixture_chains_masks(self):
        # hand chain rule: d(sum(q))/dw for q = sum_k a_k * ste(w, v_k, m_k)
        w0 = RNG.uniform(-1, 1, 6)
        values = [RNG.uniform(-1, 1, 6) for _ in range(3)]
        masks = [RNG.integers(0, 2, 6).astype(float) for _ in range(3)]
        a0 = np.array([0.5, 0.3, 0.2])
        tape = Tape()
        w = tape.leaf(w0, requires_grad=True)
        a = tape.leaf(a0)
        rows = [ste_node(w, v, m) for v, m in zip(values, masks)]
        tape.backward(tensor_sum(mix(rows, a)))
        expected = sum(ak * mk for ak, mk in zip(a0, masks))
        assert np.allclose(w.grad, expected, atol=1e-15)


class TestBackward:
    def test_linear_case(self):
        g = grad_of(lambda tape, w: tensor_sum(w), np.array([3.0, -1.0, 7.0]))
        assert np.array_equal(g, [1.0, 1.0, 1.0])

    def test_quadratic(self):
        g = grad_of(lambda tape, w: scale(tensor_sum(mul(w, w)), 0.5), np.array([1.0, 2.0]))
        assert np.array_equal(g, [1.0, 2.0])

    def test_each_rule_runs_exactly_once(self):
        tape = Tape()
        x = tape.leaf(RNG.uniform(-1, 1, 4), requires_grad=True)
        y = relu(add(mul(x, x), 1.0))
        loss = tensor_sum(mul(y, y))
        tape.backward(loss)
        assert tape.backward_calls == tape.num_ops

    def test_non_scalar_loss_rejected(self):
        tape = Tape()
        x = tape.leaf(np.zeros(3), requires_grad=True)
        with pytest.raises(ValidationError):
            tape.backward(add(x, 1.0))

    def test_unreached_leaf_gets_zeros(self):
        tape = Tape()
        x = tape.leaf(np.ones(2), requires_grad=True)
        y = tape.leaf(np.ones(2), requires_grad=True)
        tape.backward(tensor_sum(x))
        assert np.array_equal(y.grad, [0.0, 0.0])

    def test_mixed_tapes_rejected(self):
        a = Tape().leaf(np.ones(2))
        tape = Tape()
        with pytest.raises(ValidationError):
            add(tape.leaf(np.ones(2)), a)

    def test_forward_determinism(self):
        x0 = RNG.uniform(-2, 2, (5, 3))
        w0 = RNG.uniform(-2, 2, (3, 2))

        def run():
            tape = Tape()
            out = matmul(relu(tape.leaf(x0)), tape.leaf(w0))
            return softmax_cross_entropy(out, np.array([0, 1, 0, 1, 0])).item()

        assert run() == run()


class TestStructuredOps:
    def test_softmax_with_temperature_jacobian(self):
        z0 = RNG.uniform(-2, 2, 4)
        g_out = RNG.uniform(-1, 1, 4)
        for temperature in (0.5, 1.0, 7.0):
            tape = Tape()
            z = tape.leaf(z0, requires_grad=True)
            a = softmax_with_temperature(z, temperature)
            tape.backward(tensor_sum(mul(a, tape.leaf(g_out))))

            def f(v):
                e = np.exp(v / temperature - (v / temperature).max())
                return float(np.dot(e / e.sum(), g_out))

            assert relative_error(z.grad, central_difference(f, z0)) < 1e-5

    def test_softmax_rejects_nonpositive_temperature(self):
        tape = Tape()
        with pytest.raises(ValidationError):
            softmax_with_temperature(tape.leaf(np.zeros(3)), 0.0)

    def test_bias_add_dense_and_conv(self):
        x0 = RNG.uniform(-1, 1, (4, 3))
        b0 = RNG.uniform(-1, 1, 3)
        tape = Tape()
        x = tape.leaf(x0, requires_grad=True)
        b = tape.leaf(b0, requires_grad=True)
        tape.backward(tensor_sum(bias_add(x, b)))
        assert np.array_equal(b.grad, np.full(3, 4.0))

        x0 = RNG.uniform(-1, 1, (2, 3, 4, 4))
        tape = Tape()
        x = tape.leaf(x0, requires_grad=True)
        b = tape.leaf(np.arange(3.0), requires_grad=True)
        out = bias_add(x, b)
        assert np.allclose(out.data[:, 1], x0[:, 1] + 1.0)
        tape.backward(tensor_sum(out))
        assert np.array_equal(b.grad, np.full(3, 2.0 * 16))

    def test_mix_selects_with_onehot(self):
        rows0 = [RNG.uniform(-1, 1, (2, 3)) for _ in range(3)]
        tape = Tape()
        rows = [tape.leaf(r) for r in rows0]
        out = mix(rows, tape.leaf([0.0, 1.0, 0.0]))
        assert np.array_equal(out.data, rows0[1])

    def test_mix_gradient_wrt_weights(self):
        rows0 = [RNG.uniform(-1, 1, 5) for _ in range(3)]
        c = RNG.uniform(-1, 1, 5)
        a0 = np.array([0.2, 0.5, 0.3])

        def f(a):
            return float(np.dot(c, sum(ak * rk for ak, rk in zip(a, rows0))))

        tape = Tape()
        rows = [tape.leaf(r) for r in rows0]
        a = tape.leaf(a0, requires_grad=True)
        tape.backward(tensor_sum(mul(mix(rows, a), tape.leaf(c))))
        assert relative_error(a.grad, central_difference(f, a0)) < 1e-6
        # closed form: d/da_k = c . row_k
        assert np.allclose(a.grad, [np.dot(c, r) for r in rows0], atol=1e-12)

    def test_flatten_roundtrip_gradient(self):
        x0 = RNG.uniform(-1, 1, (2, 3, 2, 2))
        tape = Tape()
        x = tape.leaf(x0, requires_grad=True)
        tape.backward(tensor_sum(flatten_batch(x)))
        assert np.array_equal(x.grad, np.ones_like(x0))


def conv_reference(x, w):
    """Direct quadruple-loop convolution (independent oracle)."""
    b, c, h, wd = x.shape
    o, _, k, _ = w.shape
    out = np.zeros((b, o, h - k + 1, wd - k + 1))
    for bi in range(b):
        for oi in range(o):
            for i in range(h - k + 1):
                for j in range(wd - k + 1):
                    out[bi, oi, i, j] = np.sum(x[bi, :, i:i + k, j:j + k] * w[oi])
    return out


class TestConv2d:
    def test_matches_direct_convolution(self):
        x0 = RNG.uniform(-1, 1, (2, 3, 5, 6))
        w0 = RNG.uniform(-1, 1, (4, 3, 3, 3))
        tape = Tape()
        out = conv2d(tape.leaf(x0), tape.leaf(w0))
        assert np.allclose(out.data, conv_reference(x0, w0), atol=1e-12)

    def test_gradients_match_finite_differences(self):
        x0 = RNG.uniform(-1, 1, (2, 2, 4, 4))
        w0 = RNG.uniform(-1, 1, (3, 2, 2, 2))
        c = RNG.uniform(-1, 1, (2, 3, 3, 3))

        tape = Tape()
        x = tape.leaf(x0, requires_grad=True)
        w = tape.leaf(w0, requires_grad=True)
        out = conv2d(x, w)
        tape.backward(tensor_sum(mul(flatten_batch(out), tape.leaf(c.reshape(2, -1)))))
        assert relative_error(x.grad, central_difference(
            lambda v: float(np.sum(conv_reference(v, w0) * c)), x0)) < 1e-6
        assert relative_error(w.grad, central_difference(
            lambda v: float(np.sum(conv_reference(x0, v) * c)), w0)) < 1e-6

    def test_kernel_mismatch(self):
        tape = Tape()
        with pytest.raises(DimensionError):
            conv2d(tape.leaf(np.zeros((1, 2, 4, 4))), tape.leaf(np.zeros((3, 1, 2, 2))))


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 5), st.integers(1, 5), st.integers(0, 2 ** 31 - 1))
def test_elementwise_gradients_property(rows, cols, seed):
    rng = np.random.default_rng(seed)
    a0 = rng.uniform(-2, 2, (rows, cols))
    b0 = rng.uniform(-2, 2, (rows, cols))
    tape = Tape()
    a = tape.leaf(a0, requires_grad=True)
    b = tape.leaf(b0, requires_grad=True)
    tape.backward(tensor_sum(mul(add(a, b), sub(a, b))))  # sum(a^2 - b^2)
    assert relative_error(a.grad, 2 * a0) < 1e-10
    assert relative_error(b.grad, -2 * b0) < 1e-10
