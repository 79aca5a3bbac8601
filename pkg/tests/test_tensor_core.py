"""Unit tests for the autodiff tensor core."""

import inspect
import threading
import unittest

import numpy as np

from errors import ConfigurationError, DimensionError, InputError
from tensor_core import (
    RunningStats,
    Tensor,
    batchnorm2d,
    conv2d,
    cross_entropy,
    gelu,
    grad_check,
    is_grad_enabled,
    layernorm,
    no_grad,
    softmax,
)
from vitstem_cli import GRADCHECK_TOLERANCE, gradcheck_suite


def naive_conv2d(x: np.ndarray, w: np.ndarray, stride: int, padding: int) -> np.ndarray:
    """Cross-correlation by explicit loops over output positions."""
    x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    batch, _, height, width = x.shape
    out_channels, _, k, _ = w.shape
    out_h = (height - k) // stride + 1
    out_w = (width - k) // stride + 1
    out = np.zeros((batch, out_channels, out_h, out_w))
    for i in range(out_h):
        for j in range(out_w):
            window = x[:, :, i * stride : i * stride + k, j * stride : j * stride + k]
            out[:, :, i, j] = np.tensordot(window, w, axes=([1, 2, 3], [1, 2, 3]))
    return out


class TestTensorArithmetic(unittest.TestCase):
    """Forward values and gradients of the elementwise and shape ops."""

    def test_broadcast_add_sums_gradient_back(self) -> None:
        """Test summing a broadcast gradient back."""
        a = Tensor(np.ones((2, 3)), requires_grad=True)
        b = Tensor(np.ones(3), requires_grad=True)
        (a + b).sum().backward()
        np.testing.assert_array_equal(a.grad, np.ones((2, 3)))
        np.testing.assert_array_equal(b.grad, np.full(3, 2.0))

    def test_integer_input_is_promoted(self) -> None:
        """Test promoting integer input to float."""
        assert Tensor([1, 2, 3]).dtype == np.float32

    def test_unsupported_dtype_raises(self) -> None:
        """Test rejecting an unsupported dtype."""
        with self.assertRaises(InputError):
            Tensor(np.ones(2, dtype=np.float16), dtype=np.float16)

    def test_matmul_shape_mismatch_names_both_shapes(self) -> None:
        """Test that a matmul mismatch names both shapes."""
        with self.assertRaises(DimensionError) as ctx:
            Tensor(np.ones((2, 3))) @ Tensor(np.ones((4, 5)))
        assert "(2, 3)" in str(ctx.exception)
        assert "(4, 5)" in str(ctx.exception)

    def test_matmul_gradients(self) -> None:
        """Test the matmul gradients."""
        a = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
        b = Tensor(np.arange(12.0).reshape(3, 4), requires_grad=True)
        (a @ b).sum().backward()
        np.testing.assert_allclose(a.grad, np.ones((2, 4)) @ b.data.T)
        np.testing.assert_allclose(b.grad, a.data.T @ np.ones((2, 4)))

    def test_shared_node_accumulates(self) -> None:
        """Test accumulating gradients of a shared node."""
        x = Tensor(np.array([3.0]), requires_grad=True)
        (x * x + x).sum().backward()
        np.testing.assert_allclose(x.grad, [7.0])

    def test_backward_needs_gradient_for_non_scalar(self) -> None:
        """Test that backward on a non-scalar needs a gradient."""
        x = Tensor(np.ones(3), requires_grad=True)
        with self.assertRaises(InputError):
            (x * 2.0).backward()


class TestNoGrad(unittest.TestCase):
    """Graph recording can be switched off per thread."""

    def test_no_grad_restores_previous_state(self) -> None:
        """Test that no_grad restores the previous state."""
        assert is_grad_enabled()
        with no_grad():
            assert not is_grad_enabled()
        assert is_grad_enabled()

    def test_no_grad_is_thread_local(self) -> None:
        """Test that no_grad is local to its thread."""
        seen = []
        with no_grad():
            worker = threading.Thread(target=lambda: seen.append(is_grad_enabled()))
            worker.start()
            worker.join()
        assert seen == [True]


class TestConvolution(unittest.TestCase):
    """conv2d against a direct loop implementation."""

    def test_matches_naive_loop(self) -> None:
        """Test conv2d against a direct loop."""
        rng = np.random.default_rng(0)
        x = rng.standard_normal((2, 3, 7, 7))
        w = rng.standard_normal((4, 3, 3, 3))
        for stride, padding in ((1, 0), (2, 1), (1, 1)):
            out = conv2d(Tensor(x), Tensor(w), stride=stride, padding=padding)
            np.testing.assert_allclose(out.data, naive_conv2d(x, w, stride, padding), atol=1e-12)

    def test_patchify_output_shape(self) -> None:
        """Test the patchify output shape."""
        x = Tensor(np.zeros((1, 3, 32, 32)))
        w = Tensor(np.zeros((8, 3, 4, 4)))
        assert conv2d(x, w, stride=4).shape == (1, 8, 8, 8)

    def test_non_positive_extent_raises(self) -> None:
        """Test rejecting a kernel larger than the input."""
        with self.assertRaises(ConfigurationError):
            conv2d(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 3, 3))))

    def test_channel_mismatch_raises(self) -> None:
        """Test rejecting a channel mismatch."""
        with self.assertRaises(DimensionError):
            conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))))


class TestNormalization(unittest.TestCase):
    """Batch and layer normalization."""

    def test_batchnorm_updates_running_stats(self) -> None:
        """Test updating batch-norm running stats."""
        rng = np.random.default_rng(1)
        x = rng.standard_normal((4, 2, 3, 3)) * 2.0 + 1.0
        stats = RunningStats.initial(2, np.float64)
        gain, bias = Tensor(np.ones(2)), Tensor(np.zeros(2))
        out = batchnorm2d(x=Tensor(x), gain=gain, bias=bias, running_stats=stats)
        np.testing.assert_allclose(out.data.mean(axis=(0, 2, 3)), 0.0, atol=1e-12)
        batch_mean = x.mean(axis=(0, 2, 3))
        batch_var = x.var(axis=(0, 2, 3), ddof=1)
        np.testing.assert_allclose(stats.mean, 0.1 * batch_mean)
        np.testing.assert_allclose(stats.var, 0.9 + 0.1 * batch_var)
        assert stats.updates == 1

    def test_batchnorm_eval_uses_running_stats(self) -> None:
        """Test batch norm in eval mode."""
        stats = RunningStats(np.array([1.0]), np.array([4.0]))
        x = Tensor(np.full((2, 1, 2, 2), 5.0))
        out = batchnorm2d(x, Tensor(np.ones(1)), Tensor(np.zeros(1)), stats, mode="eval", eps=0.0)
        np.testing.assert_allclose(out.data, 2.0)
        assert stats.updates == 0

    def test_layernorm_normalizes_last_axis(self) -> None:
        """Test normalizing the last axis."""
        x = Tensor(np.random.default_rng(2).standard_normal((3, 5)))
        out = layernorm(x, Tensor(np.ones(5)), Tensor(np.zeros(5)))
        np.testing.assert_allclose(out.data.mean(axis=-1), 0.0, atol=1e-12)
        np.testing.assert_allclose(out.data.var(axis=-1), 1.0, atol=1e-4)


class TestActivationsAndLoss(unittest.TestCase):
    """Softmax, GELU and cross-entropy."""

    def test_softmax_rows_sum_to_one(self) -> None:
        """Test that softmax rows sum to one."""
        out = softmax(Tensor(np.array([[1000.0, 1000.0], [0.0, np.log(3.0)]])))
        np.testing.assert_allclose(out.data, [[0.5, 0.5], [0.25, 0.75]])

    def test_gelu_at_zero_and_large_input(self) -> None:
        """Test GELU at zero and at a large input."""
        out = gelu(Tensor(np.array([0.0, 10.0])))
        np.testing.assert_allclose(out.data, [0.0, 10.0], atol=1e-12)

    def test_cross_entropy_of_uniform_logits(self) -> None:
        """Test cross-entropy of uniform logits."""
        logits = Tensor(np.zeros((2, 4)), requires_grad=True)
        targets = np.eye(4)[[0, 3]]
        loss = cross_entropy(logits, targets)
        self.assertAlmostEqual(loss.item(), np.log(4.0), places=12)
        loss.backward()
        np.testing.assert_allclose(logits.grad, (0.25 - targets) / 2)

    def test_cross_entropy_rejects_unnormalized_targets(self) -> None:
        """Test rejecting unnormalized targets."""
        with self.assertRaises(InputError):
            cross_entropy(Tensor(np.zeros((1, 3))), np.array([[0.5, 0.5, 0.5]]))

    def test_cross_entropy_shape_mismatch(self) -> None:
        """Test rejecting targets of the wrong shape."""
        with self.assertRaises(DimensionError):
            cross_entropy(Tensor(np.zeros((2, 3))), np.ones((2, 4)) / 4)


class TestGradCheck(unittest.TestCase):
    """Central-difference checks of every differentiable op."""

    def test_grad_check_requires_float64(self) -> None:
        """Test rejecting float32 inputs."""
        x = Tensor(np.ones(2, dtype=np.float32), requires_grad=True)
        with self.assertRaises(InputError):
            grad_check(lambda t: t * 2.0, [x])

    def test_suite_passes_on_twenty_draws(self) -> None:
        """Test the suite over twenty draws."""
        summary = gradcheck_suite(tuple(range(20)))
        for name, entry in summary.items():
            assert entry["max_rel_error"] < GRADCHECK_TOLERANCE, name
            assert entry["passed"]
        assert {"conv2d", "batchnorm2d", "layernorm", "softmax", "cross_entropy", "gelu"} <= set(summary)

    def test_relative_error_uses_a_tiny_floor(self) -> None:
        """Test that the relative error denominator defaults to 1e-12."""
        assert inspect.signature(grad_check).parameters["floor"].default == 1e-12

    def test_layernorm_on_wide_rows(self) -> None:
        """Test layernorm gradients under the default floor over several draws."""
        for seed in range(5):
            rng = np.random.default_rng(seed)
            x = Tensor(rng.standard_normal((3, 4, 12)), requires_grad=True)
            gain = Tensor(rng.uniform(0.5, 1.5, size=12), requires_grad=True)
            bias = Tensor(rng.standard_normal(12), requires_grad=True)
            assert grad_check(lambda a, g, c: layernorm(a, g, c), [x, gain, bias], seed=seed) < 1e-4


if __name__ == "__main__":
    unittest.main()
