"""Engine tests: conv2d, pixel shuffle, elementwise ops, gradient checking."""

import numpy as np
import pytest

from vqnerv import autograd as ag
from vqnerv.autograd import Tensor, grad_check
from vqnerv.errors import ContractError, DimensionError


def conv2d_reference(x, w, stride, pad):
    """Direct-summation oracle, independent of the im2col path."""
    c, h, wd = x.shape
    k, _, kh, kw = w.shape
    xp = np.zeros((c, h + 2 * pad, wd + 2 * pad), dtype=np.float64)
    xp[:, pad:pad + h, pad:pad + wd] = x
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((k, ho, wo))
    for o in range(k):
        for i in range(ho):
            for j in range(wo):
                patch = xp[:, i * stride:i * stride + kh, j * stride:j * stride + kw]
                out[o, i, j] = np.sum(patch * w[o])
    return out


class TestConv2d:
    def test_identity_kernel(self):
        x = Tensor(np.ones((1, 2, 2), dtype=np.float32))
        w = Tensor(np.ones((1, 1, 1, 1), dtype=np.float32))
        out = ag.conv2d(x, w, stride=1, padding=0)
        np.testing.assert_array_equal(out.data, np.ones((1, 2, 2), dtype=np.float32))

    def test_block_means(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(1, 4, 4)).astype(np.float32)
        w = np.full((1, 1, 2, 2), 0.25, dtype=np.float32)
        out = ag.conv2d(Tensor(x), Tensor(w), stride=2, padding=0)
        expect = conv2d_reference(x, w, 2, 0)
        assert out.data.shape == (1, 2, 2)
        np.testing.assert_allclose(out.data, expect, atol=1e-6)

    def test_zero_weight(self):
        rng = np.random.default_rng(1)
        x = Tensor(rng.normal(size=(3, 5, 7)).astype(np.float32))
        w = Tensor(np.zeros((2, 3, 3, 3), dtype=np.float32))
        out = ag.conv2d(x, w, stride=1, padding=1)
        assert np.all(out.data == 0.0)

    def test_matches_reference_random(self):
        rng = np.random.default_rng(2)
        for stride, pad, kh in [(1, 0, 3), (2, 1, 3), (2, 0, 2), (4, 0, 4)]:
            x = rng.normal(size=(3, 8, 8)).astype(np.float32)
            w = rng.normal(size=(5, 3, kh, kh)).astype(np.float32)
            out = ag.conv2d(Tensor(x), Tensor(w), stride=stride, padding=pad)
            np.testing.assert_allclose(out.data, conv2d_reference(x, w, stride, pad),
                                       rtol=1e-4, atol=1e-5)

    def test_linearity(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(2, 6, 6)).astype(np.float32)
        y = rng.normal(size=(2, 6, 6)).astype(np.float32)
        w = Tensor(rng.normal(size=(4, 2, 3, 3)).astype(np.float32))
        a, b = 1.7, -0.6
        lhs = ag.conv2d(Tensor(a * x + b * y), w, stride=1, padding=1).data
        rhs = (a * ag.conv2d(Tensor(x), w, stride=1, padding=1).data
               + b * ag.conv2d(Tensor(y), w, stride=1, padding=1).data)
        np.testing.assert_allclose(lhs, rhs, atol=1e-5)

    def test_channel_mismatch(self):
        with pytest.raises(DimensionError):
            ag.conv2d(Tensor(np.zeros((2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))))

    def test_kernel_too_large(self):
        with pytest.raises(DimensionError):
            ag.conv2d(Tensor(np.zeros((1, 2, 2))), Tensor(np.zeros((1, 1, 3, 3))),
                      stride=1, padding=0)

    def test_gradients(self):
        rng = np.random.default_rng(4)
        x = Tensor(rng.normal(size=(2, 6, 6)).astype(np.float32), requires_grad=True)
        w = Tensor(rng.normal(size=(3, 2, 3, 3)).astype(np.float32) * 0.3, requires_grad=True)

        def loss():
            return (ag.conv2d(x, w, stride=2, padding=1) ** 2).sum()

        err = grad_check({"x": x, "w": w}, loss, eps=1e-3, samples=40, seed=0)
        assert err < 1e-2


class TestPixelShuffle:
    def test_defining_layout(self):
        x = Tensor(np.array([1.0, 2.0, 3.0, 4.0], dtype=np.float32).reshape(4, 1, 1))
        out = ag.pixel_shuffle(x, 2)
        np.testing.assert_array_equal(out.data, [[[1.0, 2.0], [3.0, 4.0]]])

    def test_r1_identity(self):
        x = np.random.default_rng(0).normal(size=(3, 4, 5)).astype(np.float32)
        np.testing.assert_array_equal(ag.pixel_shuffle(Tensor(x), 1).data, x)

    def test_multiset_preserved(self):
        x = np.random.default_rng(1).normal(size=(8, 2, 3)).astype(np.float32)
        out = ag.pixel_shuffle(Tensor(x), 2)
        np.testing.assert_array_equal(np.sort(out.data.ravel()), np.sort(x.ravel()))

    def test_inverse_bit_exact(self):
        x = np.random.default_rng(2).normal(size=(12, 4, 6)).astype(np.float32)
        back = ag.pixel_unshuffle(ag.pixel_shuffle(Tensor(x), 2), 2)
        np.testing.assert_array_equal(back.data, x)
        fwd = ag.pixel_shuffle(ag.pixel_unshuffle(Tensor(x), 2), 2)
        np.testing.assert_array_equal(fwd.data, x)

    def test_indivisible_channels(self):
        with pytest.raises(DimensionError):
            ag.pixel_shuffle(Tensor(np.zeros((3, 2, 2))), 2)

    def test_gradient_is_rearrangement(self):
        x = Tensor(np.random.default_rng(3).normal(size=(4, 2, 2)).astype(np.float32),
                   requires_grad=True)
        out = ag.pixel_shuffle(x, 2)
        (out * out).sum().backward()
        np.testing.assert_allclose(x.grad, 2 * x.data, rtol=1e-6)


class TestElementwise:
    def test_finite_difference_suite(self):
        rng = np.random.default_rng(5)
        x = Tensor(rng.uniform(0.2, 1.5, size=(3, 4)).astype(np.float32), requires_grad=True)
        y = Tensor(rng.uniform(0.2, 1.5, size=(3, 4)).astype(np.float32), requires_grad=True)
        cases = {
            "add": lambda: (x + y).sum(),
            "mul": lambda: (x * y).mean(),
            "div": lambda: (x / y).sum(),
            "pow": lambda: (x ** 3).sum(),
            "exp": lambda: ag.texp(x * 0.5).sum(),
            "tanh": lambda: ag.tanh(x).sum(),
            "sigmoid": lambda: ag.sigmoid(x).sum(),
            "gelu": lambda: ag.gelu(x - 0.8).sum(),
            "abs": lambda: ag.tabs(x - 0.7).sum(),
        }
        for name, fn in cases.items():
            err = grad_check({"x": x, "y": y}, fn, eps=1e-3, samples=24, seed=1)
            assert err < 1e-2, f"{name}: {err}"

    def test_broadcast_bias(self):
        x = Tensor(np.ones((3, 2, 2), dtype=np.float32), requires_grad=True)
        b = Tensor(np.arange(3, dtype=np.float32).reshape(3, 1, 1), requires_grad=True)
        (x + b).sum().backward()
        np.testing.assert_array_equal(b.grad, np.full((3, 1, 1), 4.0))

    def test_concat_narrow_roundtrip(self):
        rng = np.random.default_rng(6)
        a = Tensor(rng.normal(size=(2, 3, 3)).astype(np.float32), requires_grad=True)
        b = Tensor(rng.normal(size=(4, 3, 3)).astype(np.float32), requires_grad=True)
        cat = ag.concat([a, b], axis=0)
        back_a = cat.narrow(0, 0, 2)
        back_b = cat.narrow(0, 2, 4)
        np.testing.assert_array_equal(back_a.data, a.data)
        np.testing.assert_array_equal(back_b.data, b.data)
        ((back_a * back_a).sum() + back_b.sum()).backward()
        np.testing.assert_allclose(a.grad, 2 * a.data, rtol=1e-6)
        np.testing.assert_array_equal(b.grad, np.ones_like(b.data))

    def test_reductions_with_axis(self):
        x = Tensor(np.arange(24, dtype=np.float32).reshape(2, 3, 4), requires_grad=True)
        s = x.sum(axis=(1, 2))
        np.testing.assert_allclose(s.data, x.data.sum(axis=(1, 2)))
        m = x.mean(axis=0, keepdims=True)
        np.testing.assert_allclose(m.data, x.data.mean(axis=0, keepdims=True))


class TestStraightThrough:
    def test_forward_value(self):
        x = Tensor(np.zeros((2, 2), dtype=np.float32), requires_grad=True)
        z = np.full((2, 2), 3.0, dtype=np.float32)
        out = ag.straight_through(x, z)
        np.testing.assert_array_equal(out.data, z)

    def test_gradient_identity(self):
        rng = np.random.default_rng(7)
        x = Tensor(rng.normal(size=(3, 3)).astype(np.float32), requires_grad=True)
        z = rng.normal(size=(3, 3)).astype(np.float32)
        w = Tensor(rng.normal(size=(3, 3)).astype(np.float32))
        (ag.straight_through(x, z) * w).sum().backward()
        np.testing.assert_allclose(x.grad, w.data, rtol=1e-6)

    def test_identity_when_equal(self):
        x = Tensor(np.ones((2,), dtype=np.float32), requires_grad=True)
        out = ag.straight_through(x, x.data.copy())
        out.sum().backward()
        np.testing.assert_array_equal(out.data, x.data)
        np.testing.assert_array_equal(x.grad, np.ones(2, dtype=np.float32))

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            ag.straight_through(Tensor(np.zeros((2, 2))), np.zeros((3, 3), dtype=np.float32))


class TestGradCheck:
    def test_linear_loss(self):
        w = Tensor(np.array([1.5, -2.0, 0.5], dtype=np.float32), requires_grad=True)
        x = Tensor(np.array([0.3, 0.7, -1.1], dtype=np.float32))

        def loss():
            return (w * x).sum()

        assert grad_check({"w": w}, loss, eps=1e-3, samples=32) < 1e-4

    def test_unused_parameter_gets_zero(self):
        w = Tensor(np.ones(4, dtype=np.float32), requires_grad=True)
        u = Tensor(np.ones(4, dtype=np.float32), requires_grad=True)

        def loss():
            return (w * w).sum()

        assert grad_check({"w": w, "u": u}, loss, eps=1e-3, samples=32) < 1e-3
        loss().backward()
        assert u.grad is None  # unused: analytic gradient is zero

    def test_non_scalar_loss_rejected(self):
        w = Tensor(np.ones(4, dtype=np.float32), requires_grad=True)
        with pytest.raises(ContractError):
            grad_check({"w": w}, lambda: w * 2.0)


class TestNoGrad:
    def test_no_graph_recorded(self):
        x = Tensor(np.ones(3, dtype=np.float32), requires_grad=True)
        with ag.no_grad():
            out = (x * 2.0).sum()
        assert not out.requires_grad
        assert out._parents == ()
