"""
Minimal reverse-mode automatic differentiation on numpy arrays.

Every differentiable operation records its inputs and a backward closure on the
output tensor. Calling ``backward`` on a scalar walks the recorded graph in
reverse topological order, accumulates gradients into every tensor that
requires them, and then releases the graph.
"""

from __future__ import annotations

import threading
from collections.abc import Callable, Iterator, Sequence
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Any

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

from errors import ConfigurationError, DimensionError, InputError

DEFAULT_EPS = 1e-5
SUPPORTED_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))

BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]

_grad_state = threading.local()


def is_grad_enabled() -> bool:
    """Return whether operations on this thread record a graph."""
    return getattr(_grad_state, "enabled", True)


@contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording on the current thread."""
    previous = is_grad_enabled()
    _grad_state.enabled = False
    try:
        yield
    finally:
        _grad_state.enabled = previous


class Tensor:
    """An n-dimensional float array with optional gradient tracking."""

    def __init__(
        self,
        data: Any,
        *,
        requires_grad: bool = False,
        dtype: Any = None,
    ) -> None:
        """
        Wrap array-like data.

        Args:
            data: Array-like values. Integer input is promoted to float32.
            requires_grad: Whether backward should populate ``grad``.
            dtype: Optional float32/float64 override.

        """
        array = np.asarray(data, dtype=dtype)
        if dtype is None and not np.issubdtype(array.dtype, np.floating):
            array = array.astype(np.float32)
        if array.dtype not in SUPPORTED_DTYPES:
            msg = f"Unsupported dtype {array.dtype}; expected float32 or float64"
            raise InputError(msg)
        self.data: np.ndarray = array
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.op = ""
        self._prev: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None

    def __repr__(self) -> str:
        return (
            f"Tensor(shape={self.shape}, dtype={self.dtype}, "
            f"requires_grad={self.requires_grad}, op={self.op or 'leaf'})"
        )

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return int(self.data.size)

    def numpy(self) -> np.ndarray:
        """Return the underlying array."""
        return self.data

    def item(self) -> float:
        """Return the value of a single-element tensor."""
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, grad: np.ndarray) -> None:
        grad = np.asarray(grad, dtype=self.dtype)
        if grad.shape != self.shape:
            grad = _unbroadcast(grad, self.shape)
        self.grad = grad.copy() if self.grad is None else self.grad + grad

    def backward(self, grad: np.ndarray | None = None) -> None:
        """
        Back-propagate from this tensor through the recorded graph.

        Args:
            grad: Upstream gradient. Defaults to ones for single-element tensors.

        """
        if grad is None:
            if self.size != 1:
                msg = f"backward needs an explicit gradient for shape {self.shape}"
                raise InputError(msg)
            grad = np.ones_like(self.data)
        order = self._topological_order()
        self._accumulate(grad)
        for node in reversed(order):
            if node._backward is None or node.grad is None:
                continue
            parent_grads = node._backward(node.grad)
            for parent, parent_grad in zip(node._prev, parent_grads):
                if parent_grad is not None and parent.requires_grad:
                    parent._accumulate(parent_grad)
        # The graph is single-use.
        for node in order:
            node._backward = None
            node._prev = ()

    def _topological_order(self) -> list[Tensor]:
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            stack.extend((parent, False) for parent in node._prev if id(parent) not in seen)
        return order

    # Arithmetic

    def __add__(self, other: Any) -> Tensor:
        other = self._coerce(other)
        return _record(
            self.data + other.data,
            (self, other),
            lambda g: (g, g),
            "add",
        )

    __radd__ = __add__

    def __sub__(self, other: Any) -> Tensor:
        other = self._coerce(other)
        return _record(
            self.data - other.data,
            (self, other),
            lambda g: (g, -g),
            "sub",
        )

    def __rsub__(self, other: Any) -> Tensor:
        return self._coerce(other) - self

    def __mul__(self, other: Any) -> Tensor:
        other = self._coerce(other)
        a, b = self.data, other.data
        return _record(a * b, (self, other), lambda g: (g * b, g * a), "mul")

    __rmul__ = __mul__

    def __truediv__(self, other: Any) -> Tensor:
        other = self._coerce(other)
        a, b = self.data, other.data
        return _record(
            a / b,
            (self, other),
            lambda g: (g / b, -g * a / (b * b)),
            "div",
        )

    def __rtruediv__(self, other: Any) -> Tensor:
        return self._coerce(other) / self

    def __neg__(self) -> Tensor:
        return _record(-self.data, (self,), lambda g: (-g,), "neg")

    def __pow__(self, exponent: float) -> Tensor:
        if not isinstance(exponent, (int, float)):
            msg = "Only scalar exponents are supported"
            raise InputError(msg)
        a = self.data
        return _record(
            a**exponent,
            (self,),
            lambda g: (g * exponent * a ** (exponent - 1),),
            "pow",
        )

    def __matmul__(self, other: Tensor) -> Tensor:
        return matmul(self, other)

    def __getitem__(self, index: Any) -> Tensor:
        shape, dtype = self.shape, self.dtype

        def backward(g: np.ndarray) -> tuple[np.ndarray]:
            full = np.zeros(shape, dtype=dtype)
            np.add.at(full, index, g)
            return (full,)

        return _record(self.data[index], (self,), backward, "getitem")

    # Shape and reductions

    def reshape(self, *shape: int | Sequence[int]) -> Tensor:
        """Return a view with a new shape."""
        new_shape = tuple(shape[0]) if len(shape) == 1 and not isinstance(shape[0], int) else shape
        original = self.shape
        return _record(
            self.data.reshape(new_shape),
            (self,),
            lambda g: (g.reshape(original),),
            "reshape",
        )

    def transpose(self, *axes: int) -> Tensor:
        """Permute dimensions; with no axes, reverse them."""
        perm = tuple(axes) if axes else tuple(reversed(range(self.ndim)))
        inverse = tuple(np.argsort(perm))
        return _record(
            self.data.transpose(perm),
            (self,),
            lambda g: (g.transpose(inverse),),
            "transpose",
        )

    def sum(self, axis: int | tuple[int, ...] | None = None, *, keepdims: bool = False) -> Tensor:
        shape = self.shape

        def backward(g: np.ndarray) -> tuple[np.ndarray]:
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape),)

        return _record(
            self.data.sum(axis=axis, keepdims=keepdims),
            (self,),
            backward,
            "sum",
        )

    def mean(self, axis: int | tuple[int, ...] | None = None, *, keepdims: bool = False) -> Tensor:
        count = self.size if axis is None else int(np.prod([self.shape[a] for a in np.atleast_1d(axis)]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    def _coerce(self, other: Any) -> Tensor:
        if isinstance(other, Tensor):
            return other
        return Tensor(np.asarray(other, dtype=self.dtype))


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _record(
    data: np.ndarray,
    parents: tuple[Tensor, ...],
    backward: BackwardFn,
    op: str,
) -> Tensor:
    out = Tensor(data)
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.op = op
        out._prev = parents
        out._backward = backward
    return out


def as_tensor(value: Any, dtype: Any = None) -> Tensor:
    """Return ``value`` unchanged if it is a Tensor, else wrap it."""
    if isinstance(value, Tensor):
        return value
    return Tensor(value, dtype=dtype)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    """Concatenate tensors along ``axis``."""
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g: np.ndarray) -> list[np.ndarray]:
        return np.split(g, splits, axis=axis)

    return _record(
        np.concatenate([t.data for t in tensors], axis=axis),
        tuple(tensors),
        backward,
        "concat",
    )


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """
    Matrix product with numpy broadcasting over leading dimensions.

    Args:
        a: Tensor of shape (..., m, k).
        b: Tensor of shape (..., k, n).

    Returns:
        Tensor of shape (..., m, n).

    Raises:
        DimensionError: If either operand is below 2-D or inner extents differ.

    """
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        msg = f"matmul shape mismatch: {a.shape} and {b.shape}"
        raise DimensionError(msg)
    x, y = a.data, b.data

    def backward(g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        grad_a = _unbroadcast(g @ np.swapaxes(y, -1, -2), x.shape)
        grad_b = _unbroadcast(np.swapaxes(x, -1, -2) @ g, y.shape)
        return grad_a, grad_b

    return _record(x @ y, (a, b), backward, "matmul")


def _pair(value: int | Sequence[int]) -> tuple[int, int]:
    if isinstance(value, (int, np.integer)):
        return int(value), int(value)
    first, second = value
    return int(first), int(second)


def conv_output_extent(size: int, kernel: int, stride: int, padding: int) -> int:
    """Spatial extent after a convolution, floor((size + 2p - k) / s) + 1."""
    return (size + 2 * padding - kernel) // stride + 1


def conv2d(
    x: Tensor,
    w: Tensor,
    bias: Tensor | None = None,
    stride: int | Sequence[int] = 1,
    padding: int | Sequence[int] = 0,
) -> Tensor:
    """
    2-D cross-correlation of a (B, C, H, W) batch with (O, C, kh, kw) kernels.

    Args:
        x: Input batch.
        w: Kernel bank.
        bias: Optional per-output-channel bias of shape (O,).
        stride: Stride as an int or (sh, sw).
        padding: Zero padding as an int or (ph, pw).

    Returns:
        Tensor of shape (B, O, H', W').

    Raises:
        DimensionError: If ranks or channel extents disagree.
        ConfigurationError: If an output extent would be non-positive.

    """
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        msg = f"conv2d shape mismatch: input {x.shape}, kernel {w.shape}"
        raise DimensionError(msg)
    if bias is not None and bias.shape != (w.shape[0],):
        msg = f"conv2d bias shape {bias.shape} does not match kernel {w.shape}"
        raise DimensionError(msg)
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    batch, channels, height, width = x.shape
    _, _, kh, kw = w.shape
    out_h = conv_output_extent(height, kh, sh, ph)
    out_w = conv_output_extent(width, kw, sw, pw)
    if out_h <= 0 or out_w <= 0 or sh <= 0 or sw <= 0:
        msg = (
            f"conv2d output extent ({out_h}, {out_w}) is not positive for input "
            f"{x.shape}, kernel {w.shape}, stride {(sh, sw)}, padding {(ph, pw)}"
        )
        raise ConfigurationError(msg)

    padded = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    windows = sliding_window_view(padded, (kh, kw), axis=(2, 3))
    windows = windows[:, :, ::sh, ::sw][:, :, :out_h, :out_w]
    # (B, oh, ow, O) -> (B, O, oh, ow)
    out = np.tensordot(windows, w.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    kernel = w.data

    def backward(g: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray | None]:
        grad_w = np.tensordot(g, windows, axes=([0, 2, 3], [0, 2, 3]))
        # (B, oh, ow, C, kh, kw)
        cols = np.tensordot(g, kernel, axes=([1], [0])).transpose(0, 3, 1, 2, 4, 5)
        grad_padded = np.zeros(padded.shape, dtype=padded.dtype)
        for i in range(kh):
            for j in range(kw):
                grad_padded[:, :, i : i + sh * out_h : sh, j : j + sw * out_w : sw] += cols[..., i, j]
        grad_x = grad_padded[:, :, ph : ph + height, pw : pw + width]
        grad_b = g.sum(axis=(0, 2, 3)) if bias is not None else None
        return grad_x, grad_w, grad_b

    parents = (x, w) if bias is None else (x, w, bias)
    return _record(out.astype(x.dtype, copy=False), parents, backward, "conv2d")


@dataclass
class RunningStats:
    """Per-channel running mean and variance of a batch-norm layer."""

    mean: np.ndarray
    var: np.ndarray
    updates: int = 0

    @classmethod
    def initial(cls, channels: int, dtype: Any = np.float32) -> RunningStats:
        return cls(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype))


def batchnorm2d(
    x: Tensor,
    gain: Tensor,
    bias: Tensor,
    running_stats: RunningStats,
    mode: str = "train",
    momentum: float = 0.1,
    eps: float = DEFAULT_EPS,
) -> Tensor:
    """
    Batch normalization over (B, H, W) for each channel of a (B, C, H, W) input.

    In train mode the batch statistics normalize the input and are folded into
    ``running_stats`` (unbiased variance). In eval mode the running statistics
    are used; a never-updated ``RunningStats`` is mean 0, variance 1.
    """
    if x.ndim != 4 or gain.shape != (x.shape[1],) or bias.shape != (x.shape[1],):
        msg = f"batchnorm2d shape mismatch: input {x.shape}, gain {gain.shape}, bias {bias.shape}"
        raise DimensionError(msg)
    if mode not in ("train", "eval"):
        msg = f"Unknown batchnorm mode: {mode}"
        raise InputError(msg)
    data = x.data
    axes = (0, 2, 3)
    if mode == "train":
        mean = data.mean(axis=axes)
        var = data.var(axis=axes)
        count = data.size // data.shape[1]
        unbiased = var * count / (count - 1) if count > 1 else var
        running_stats.mean = ((1 - momentum) * running_stats.mean + momentum * mean).astype(
            running_stats.mean.dtype,
        )
        running_stats.var = ((1 - momentum) * running_stats.var + momentum * unbiased).astype(
            running_stats.var.dtype,
        )
        running_stats.updates += 1
    else:
        mean = running_stats.mean.astype(data.dtype)
        var = running_stats.var.astype(data.dtype)
    inv_std = 1.0 / np.sqrt(var + eps)
    x_hat = (data - mean[None, :, None, None]) * inv_std[None, :, None, None]
    g_data = gain.data
    out = x_hat * g_data[None, :, None, None] + bias.data[None, :, None, None]

    def backward(g: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        grad_gain = (g * x_hat).sum(axis=axes)
        grad_bias = g.sum(axis=axes)
        d_hat = g * g_data[None, :, None, None]
        if mode == "eval":
            return d_hat * inv_std[None, :, None, None], grad_gain, grad_bias
        n = data.size // data.shape[1]
        grad_x = (
            inv_std[None, :, None, None]
            / n
            * (
                n * d_hat
                - d_hat.sum(axis=axes, keepdims=True)
                - x_hat * (d_hat * x_hat).sum(axis=axes, keepdims=True)
            )
        )
        return grad_x, grad_gain, grad_bias

    return _record(out.astype(data.dtype, copy=False), (x, gain, bias), backward, "batchnorm2d")


def layernorm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = DEFAULT_EPS) -> Tensor:
    """Normalize over the last dimension, then scale by ``gain`` and shift by ``bias``."""
    dim = x.shape[-1]
    if gain.shape != (dim,) or bias.shape != (dim,):
        msg = f"layernorm shape mismatch: input {x.shape}, gain {gain.shape}, bias {bias.shape}"
        raise DimensionError(msg)
    data = x.data
    mean = data.mean(axis=-1, keepdims=True)
    var = data.var(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    x_hat = (data - mean) * inv_std
    g_data = gain.data
    reduce_axes = tuple(range(data.ndim - 1))

    def backward(g: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        d_hat = g * g_data
        grad_x = (
            inv_std
            / dim
            * (
                dim * d_hat
                - d_hat.sum(axis=-1, keepdims=True)
                - x_hat * (d_hat * x_hat).sum(axis=-1, keepdims=True)
            )
        )
        return grad_x, (g * x_hat).sum(axis=reduce_axes), g.sum(axis=reduce_axes)

    out = x_hat * g_data + bias.data
    return _record(out.astype(data.dtype, copy=False), (x, gain, bias), backward, "layernorm")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _record(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,), "relu")


_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, x * Phi(x)."""
    data = x.data
    cdf = 0.5 * (1.0 + erf(data * _INV_SQRT2))

    def backward(g: np.ndarray) -> tuple[np.ndarray]:
        pdf = np.exp(-0.5 * data * data) * _INV_SQRT_2PI
        return (g * (cdf + data * pdf),)

    return _record((data * cdf).astype(x.dtype, copy=False), (x,), backward, "gelu")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    exp = np.exp(shifted)
    probs = exp / exp.sum(axis=axis, keepdims=True)

    def backward(g: np.ndarray) -> tuple[np.ndarray]:
        return (probs * (g - (g * probs).sum(axis=axis, keepdims=True)),)

    return _record(probs, (x,), backward, "softmax")


def log_softmax(values: np.ndarray, axis: int = -1) -> np.ndarray:
    """Numerically stable log-softmax of a plain array."""
    shifted = values - values.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def cross_entropy(logits: Tensor, target_dist: Tensor | np.ndarray, tol: float = 1e-6) -> Tensor:
    """
    Mean over the batch of -sum(target * log_softmax(logits)).

    Args:
        logits: Tensor of shape (B, K).
        target_dist: Target distributions of shape (B, K); rows must sum to 1.
        tol: Allowed deviation of each row sum from 1.

    Returns:
        Scalar tensor.

    Raises:
        DimensionError: If shapes differ.
        InputError: If a target row does not sum to 1.

    """
    target = as_tensor(target_dist, dtype=logits.dtype)
    if logits.ndim != 2 or target.shape != logits.shape:
        msg = f"cross_entropy shape mismatch: logits {logits.shape}, targets {target.shape}"
        raise DimensionError(msg)
    row_sums = target.data.sum(axis=1)
    if not np.all(np.abs(row_sums - 1.0) <= tol):
        worst = float(np.max(np.abs(row_sums - 1.0)))
        msg = f"Target rows must sum to 1 (worst deviation {worst:.3g})"
        raise InputError(msg)
    batch = logits.shape[0]
    log_probs = log_softmax(logits.data, axis=1)
    t = target.data
    loss = -(t * log_probs).sum() / batch

    def backward(g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        probs = np.exp(log_probs)
        grad_logits = (probs * t.sum(axis=1, keepdims=True) - t) * (g / batch)
        return grad_logits, -log_probs * (g / batch)

    return _record(np.asarray(loss, dtype=logits.dtype), (logits, target), backward, "cross_entropy")


def grad_check(
    f: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    h: float = 1e-5,
    seed: int = 0,
    floor: float = 1e-12,
) -> float:
    """
    Compare backward gradients of ``f`` against central differences.

    Non-scalar outputs are reduced with a fixed random projection so every
    output element contributes to the checked objective.

    Args:
        f: Function of the input tensors returning a Tensor.
        inputs: Float64 input tensors; those with requires_grad are checked.
        h: Finite-difference step.
        seed: Seed of the output projection.
        floor: Smallest denominator of the relative error.

    Returns:
        Max over all checked entries of |a - n| / max(|a|, |n|, floor).

    """
    for tensor in inputs:
        if tensor.dtype != np.float64:
            msg = "grad_check requires float64 inputs"
            raise InputError(msg)
        tensor.data = np.ascontiguousarray(tensor.data)
        tensor.grad = None

    output = f(*inputs)
    projection = np.random.default_rng(seed).standard_normal(output.shape)

    def objective() -> Tensor:
        return (f(*inputs) * projection).sum()

    objective().backward()
    worst = 0.0
    for tensor in inputs:
        if not tensor.requires_grad:
            continue
        analytic = tensor.grad if tensor.grad is not None else np.zeros_like(tensor.data)
        flat = tensor.data.reshape(-1)
        for index in range(flat.size):
            original = flat[index]
            with no_grad():
                flat[index] = original + h
                plus = objective().item()
                flat[index] = original - h
                minus = objective().item()
            flat[index] = original
            numeric = (plus - minus) / (2 * h)
            exact = analytic.reshape(-1)[index]
            scale = max(abs(exact), abs(numeric), floor)
            worst = max(worst, abs(exact - numeric) / scale)
    return worst
