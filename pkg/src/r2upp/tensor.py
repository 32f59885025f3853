"""Reverse-mode differentiable NCHW tensors and the primitive ops the network uses.

A :class:`Tensor` wraps a float64 ndarray. Ops applied while gradient
recording is on (the default) remember their parents and a closure that maps
the upstream gradient to one gradient per parent. ``loss.backward()`` walks
that tape in reverse topological order and accumulates into ``.grad`` of
every leaf that has ``requires_grad`` set.
"""
from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterator, Sequence

import numpy as np

from . import _kernels
from .errors import ShapeError

__all__ = [
    "Tensor",
    "Parameter",
    "no_grad",
    "is_grad_enabled",
    "trace_ops",
    "conv2d",
    "maxpool_2x2",
    "upsample_2x",
    "batchnorm",
    "relu",
    "sigmoid",
    "concat_channels",
    "slice_channels",
    "add",
    "scale",
    "mean_of",
]

# per-thread so concurrent inference workers do not toggle each other's mode
_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "grad", True)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Run ops without recording the tape (inference, finite differences)."""
    prev = is_grad_enabled()
    _state.grad = False
    try:
        yield
    finally:
        _state.grad = prev


@contextlib.contextmanager
def trace_ops() -> Iterator[list[str]]:
    """Collect the name of every primitive op executed inside the block."""
    prev = getattr(_state, "trace", None)
    _state.trace = []
    try:
        yield _state.trace
    finally:
        _state.trace = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op})"

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad: np.ndarray | None = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(f"backward() without a gradient needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)

        # iterative post-order DFS; recursion would overflow on deep unrolled graphs
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
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))

        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


class Parameter(Tensor):
    """A named trainable tensor with its gradient and Adam moment buffers."""

    __slots__ = ("name", "m", "v", "step")

    def __init__(self, name: str, data):
        super().__init__(data, requires_grad=True)
        self.name = name
        self.grad = np.zeros_like(self.data)
        self.m = np.zeros_like(self.data)
        self.v = np.zeros_like(self.data)
        self.step = 0

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


def _result(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    trace = getattr(_state, "trace", None)
    if trace is not None:
        trace.append(op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_rank4(x: Tensor, what: str) -> None:
    if x.ndim != 4:
        raise ShapeError(f"{what} must be rank-4 NCHW, got shape {x.shape}")


# ---------------------------------------------------------------------------
# convolution family
# ---------------------------------------------------------------------------

def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation of ``x`` [N,C,H,W] with ``weight`` [O,C,kh,kw]."""
    x, weight = _as_tensor(x), _as_tensor(weight)
    _check_rank4(x, "conv2d input")
    _check_rank4(weight, "conv2d weight")
    if stride < 1 or padding < 0:
        raise ShapeError(f"conv2d needs stride >= 1 and padding >= 0, got stride={stride} padding={padding}")
    n, c, h, w = x.shape
    o, ci, kh, kw = weight.shape
    if c != ci:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape} vs weight {weight.shape}")
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (w + 2 * padding - kw) // stride + 1
    if oh <= 0 or ow <= 0:
        raise ShapeError(f"conv2d output would be empty: input {x.shape}, weight {weight.shape}, padding {padding}")
    if bias is not None:
        bias = _as_tensor(bias)
        if bias.shape != (o,):
            raise ShapeError(f"conv2d bias shape {bias.shape} does not match {o} output channels")

    pointwise = kh == 1 and kw == 1 and stride == 1 and padding == 0
    if pointwise:
        cols = x.data.reshape(n, c, h * w)
        padded_shape = x.shape
    else:
        xp = x.data
        if padding:
            xp = np.pad(xp, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
        padded_shape = xp.shape
        cols = _kernels.im2col(xp, kh, kw, stride)
    wm = weight.data.reshape(o, c * kh * kw)
    out = np.matmul(wm, cols)
    if bias is not None:
        out += bias.data[None, :, None]
    out = out.reshape(n, o, oh, ow)

    def backward(g):
        g2 = g.reshape(n, o, oh * ow)
        dw = None
        if weight.requires_grad:
            dw = np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0).reshape(weight.shape)
        dx = None
        if x.requires_grad:
            dcols = np.matmul(wm.T, g2)
            if pointwise:
                dx = dcols.reshape(x.shape)
            else:
                dxp = _kernels.col2im(dcols, padded_shape, kh, kw, stride)
                dx = dxp[:, :, padding : padding + h, padding : padding + w] if padding else dxp
        grads = [dx, dw]
        if bias is not None:
            grads.append(g2.sum(axis=(0, 2)))
        return grads

    parents = [x, weight] if bias is None else [x, weight, bias]
    return _result(out, parents, backward, "conv2d")


def upsample_2x(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Learned 2x up-sampling: transposed convolution, 2x2 kernel, stride 2.

    ``weight`` is laid out [in, out, 2, 2]. The kernel footprints never
    overlap, so the whole op is one matrix product plus a pixel shuffle.
    """
    x, weight = _as_tensor(x), _as_tensor(weight)
    _check_rank4(x, "upsample input")
    _check_rank4(weight, "upsample weight")
    n, c, h, w = x.shape
    ci, o, kh, kw = weight.shape
    if ci != c or (kh, kw) != (2, 2):
        raise ShapeError(f"upsample channel mismatch: input {x.shape} vs weight {weight.shape}")
    if bias is not None:
        bias = _as_tensor(bias)
        if bias.shape != (o,):
            raise ShapeError(f"upsample bias shape {bias.shape} does not match {o} output channels")

    xm = x.data.transpose(0, 2, 3, 1).reshape(n * h * w, c)
    wm = weight.data.reshape(c, o * 4)
    y = (xm @ wm).reshape(n, h, w, o, 2, 2).transpose(0, 3, 1, 4, 2, 5).reshape(n, o, 2 * h, 2 * w)
    if bias is not None:
        y += bias.data[None, :, None, None]

    def backward(g):
        gm = g.reshape(n, o, h, 2, w, 2).transpose(0, 2, 4, 1, 3, 5).reshape(n * h * w, o * 4)
        dx = (gm @ wm.T).reshape(n, h, w, c).transpose(0, 3, 1, 2) if x.requires_grad else None
        dw = (xm.T @ gm).reshape(weight.shape) if weight.requires_grad else None
        grads = [dx, dw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    parents = [x, weight] if bias is None else [x, weight, bias]
    return _result(np.ascontiguousarray(y), parents, backward, "upsample_2x")


def maxpool_2x2(x: Tensor) -> tuple[Tensor, np.ndarray]:
    """2x2 / stride-2 max-pooling. Returns the pooled tensor and winner indices.

    Index k in 0..3 addresses the window in row-major order; ties go to the
    lowest k.
    """
    x = _as_tensor(x)
    _check_rank4(x, "maxpool input")
    if x.shape[2] % 2 or x.shape[3] % 2:
        raise ShapeError(f"maxpool_2x2 needs even height and width, got {x.shape}")
    out, idx = _kernels.maxpool2x2(x.data)

    def backward(g):
        return [_kernels.maxpool2x2_backward(np.ascontiguousarray(g), idx)]

    return _result(out, [x], backward, "maxpool_2x2"), idx


# ---------------------------------------------------------------------------
# normalisation and activations
# ---------------------------------------------------------------------------

def batchnorm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray | None = None,
    running_var: np.ndarray | None = None,
    train: bool = True,
    momentum: float = 0.9,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel batch normalisation over N, H, W.

    In train mode the batch statistics are used and, when running buffers are
    given, they are updated in place as ``r = momentum*r + (1-momentum)*batch``.
    In inference mode the running buffers are required.
    """
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    _check_rank4(x, "batchnorm input")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batchnorm affine shapes {gamma.shape}/{beta.shape} do not match {c} channels")
    axes = (0, 2, 3)
    if train:
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        if running_mean is not None:
            running_mean *= momentum
            running_mean += (1.0 - momentum) * mean
        if running_var is not None:
            running_var *= momentum
            running_var += (1.0 - momentum) * var
    else:
        if running_mean is None or running_var is None:
            raise ShapeError("batchnorm in inference mode needs running statistics")
        mean, var = running_mean.copy(), running_var.copy()
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean[None, :, None, None]) * inv_std[None, :, None, None]
    y = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]
    count = x.shape[0] * x.shape[2] * x.shape[3]

    def backward(g):
        dgamma = (g * xhat).sum(axis=axes)
        dbeta = g.sum(axis=axes)
        dx = None
        if x.requires_grad:
            dxhat = g * gamma.data[None, :, None, None]
            if train:
                dx = (inv_std / count)[None, :, None, None] * (
                    count * dxhat
                    - dxhat.sum(axis=axes)[None, :, None, None]
                    - xhat * (dxhat * xhat).sum(axis=axes)[None, :, None, None]
                )
            else:
                dx = dxhat * inv_std[None, :, None, None]
        return [dx, dgamma, dbeta]

    return _result(y, [x, gamma, beta], backward, "batchnorm")


def relu(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    mask = x.data > 0
    return _result(np.where(mask, x.data, 0.0), [x], lambda g: [g * mask], "relu")


def sigmoid(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    # exp of a non-positive argument only: no overflow, no cancellation for x < 0
    e = np.exp(-np.abs(x.data))
    s = np.where(x.data >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _result(s, [x], lambda g: [g * s * (1.0 - s)], "sigmoid")


# ---------------------------------------------------------------------------
# structural ops
# ---------------------------------------------------------------------------

def concat_channels(inputs: Sequence[Tensor]) -> Tensor:
    """Concatenate along the channel axis, in argument order."""
    inputs = [_as_tensor(t) for t in inputs]
    if not inputs:
        raise ShapeError("concat_channels needs at least one input")
    ref = inputs[0].shape
    for i, t in enumerate(inputs):
        _check_rank4(t, f"concat input {i}")
        if (t.shape[0], t.shape[2], t.shape[3]) != (ref[0], ref[2], ref[3]):
            raise ShapeError(f"concat_channels: input {i} has shape {t.shape}, expected N,H,W of {ref}")
    if len(inputs) == 1:
        return _result(inputs[0].data.copy(), inputs, lambda g: [g], "concat")
    offsets = np.cumsum([0] + [t.shape[1] for t in inputs])
    out = np.concatenate([t.data for t in inputs], axis=1)

    def backward(g):
        return [g[:, offsets[i] : offsets[i + 1]] for i in range(len(inputs))]

    return _result(out, inputs, backward, "concat")


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    x = _as_tensor(x)
    _check_rank4(x, "slice input")
    if not 0 <= start < stop <= x.shape[1]:
        raise ShapeError(f"channel slice [{start}:{stop}] out of range for {x.shape}")

    def backward(g):
        dx = np.zeros_like(x.data)
        dx[:, start:stop] = g
        return [dx]

    return _result(x.data[:, start:stop].copy(), [x], backward, "slice")


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"add shape mismatch: {a.shape} vs {b.shape}")
    return _result(a.data + b.data, [a, b], lambda g: [g, g], "add")


def scale(x: Tensor, factor: float) -> Tensor:
    x = _as_tensor(x)
    return _result(x.data * factor, [x], lambda g: [g * factor], "scale")


def mean_of(inputs: Sequence[Tensor]) -> Tensor:
    """Elementwise arithmetic mean of equally shaped tensors."""
    inputs = [_as_tensor(t) for t in inputs]
    if not inputs:
        raise ShapeError("mean_of needs at least one tensor")
    for i, t in enumerate(inputs):
        if t.shape != inputs[0].shape:
            raise ShapeError(f"mean_of: input {i} has shape {t.shape}, expected {inputs[0].shape}")
    k = len(inputs)
    acc = inputs[0].data.copy()
    for t in inputs[1:]:
        acc += t.data
    out = acc / k
    return _result(out, inputs, lambda g: [g / k] * k, "mean")
