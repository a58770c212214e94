"""Reverse-mode automatic differentiation over dense float64 arrays.

Every differentiable operation returns a :class:`Tensor` that remembers its
parents and a closure mapping the upstream gradient to parent gradients.
Nodes are stamped with a per-thread sequence number at creation, so sorting
the reachable nodes by descending stamp yields the exact reverse order of the
forward pass (see :class:`Tape`).

Broadcasting is deliberately narrow: elementwise binary ops accept identical
shapes or a scalar on either side. Per-channel affine terms live inside
``conv2d`` and ``batchnorm2d``. Anything else raises :class:`ShapeError`.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

DTYPE = np.float64

_state = threading.local()


def _seq() -> int:
    n = getattr(_state, "seq", 0) + 1
    _state.seq = n
    return n


def grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    """Run the enclosed block without recording the graph."""
    prev = grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class ShapeError(ValueError):
    """Operand shapes do not conform to an op's algebra."""

    def __init__(self, op: str, *shapes: tuple):
        self.op = op
        self.shapes = shapes
        shown = ", ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {shown}")


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op", "seq")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"
        self.seq = _seq()

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> Tensor:
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # -- operators --------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, p: float):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def make(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    """Wrap ``data`` as the output of an op.

    ``backward_fn(g)`` must return one gradient (or ``None``) per parent.
    Library code outside this module uses this hook to define custom ops
    such as fake quantization.
    """
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    out.seq = _seq()
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


class Tape:
    """Nodes reachable from a loss, in reverse order of their creation."""

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def from_loss(cls, loss: Tensor) -> Tape:
        seen: set[int] = set()
        nodes: list[Tensor] = []
        stack = [loss]
        while stack:
            t = stack.pop()
            if id(t) in seen or not t.requires_grad:
                continue
            seen.add(id(t))
            nodes.append(t)
            stack.extend(t._parents)
        nodes.sort(key=lambda t: t.seq, reverse=True)
        return cls(nodes)

    def __len__(self) -> int:
        return len(self.nodes)

    def __iter__(self):
        return iter(self.nodes)


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
    if loss.data.size != 1:
        raise ShapeError("backward (loss must be scalar)", loss.shape)
    if not loss.requires_grad:
        raise RuntimeError("backward: loss does not depend on any tensor requiring grad")
    tape = Tape.from_loss(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in tape:
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def _binary_operands(a, b, op: str) -> tuple[Tensor, Tensor]:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape and a.ndim != 0 and b.ndim != 0:
        raise ShapeError(op, a.shape, b.shape)
    return a, b


def _reduce_to(g: np.ndarray, shape: tuple) -> np.ndarray:
    return np.asarray(g.sum()) if shape == () and g.shape != () else g


def add(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "add")
    return make(a.data + b.data, (a, b),
                lambda g: (_reduce_to(g, a.shape), _reduce_to(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "sub")
    return make(a.data - b.data, (a, b),
                lambda g: (_reduce_to(g, a.shape), _reduce_to(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "mul")
    return make(a.data * b.data, (a, b),
                lambda g: (_reduce_to(g * b.data, a.shape), _reduce_to(g * a.data, b.shape)), "mul")


def div(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "div")
    out = a.data / b.data
    return make(out, (a, b),
                lambda g: (_reduce_to(g / b.data, a.shape),
                           _reduce_to(-g * out / b.data, b.shape)), "div")


def minimum(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "minimum")
    pick_a = a.data <= b.data
    return make(np.where(pick_a, a.data, b.data), (a, b),
                lambda g: (_reduce_to(g * pick_a, a.shape), _reduce_to(g * ~pick_a, b.shape)),
                "minimum")


def maximum(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "maximum")
    pick_a = a.data >= b.data
    return make(np.where(pick_a, a.data, b.data), (a, b),
                lambda g: (_reduce_to(g * pick_a, a.shape), _reduce_to(g * ~pick_a, b.shape)),
                "maximum")


def power(a: Tensor, p: float) -> Tensor:
    a = as_tensor(a)
    return make(a.data ** p, (a,), lambda g: (g * p * a.data ** (p - 1),), "power")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return make(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    return make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return make(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return make(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def leaky_relu(a: Tensor, slope: float = 0.1) -> Tensor:
    mask = a.data > 0
    scale = np.where(mask, 1.0, slope)
    return make(a.data * scale, (a,), lambda g: (g * scale,), "leaky_relu")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return expit(x)


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid(a.data)
    return make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def silu(a: Tensor) -> Tensor:
    s = _sigmoid(a.data)
    return make(a.data * s, (a,), lambda g: (g * s * (1.0 + a.data * (1.0 - s)),), "silu")


def softplus(a: Tensor) -> Tensor:
    """log(1 + exp(x)), stable for large |x|."""
    x = a.data
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    return make(out, (a,), lambda g: (g * _sigmoid(x),), "softplus")


def softmax(a: Tensor, axis: int) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make(out, (a,), bw, "softmax")


def log_softmax(a: Tensor, axis: int) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)
    return make(out, (a,), lambda g: (g - p * g.sum(axis=axis, keepdims=True),), "log_softmax")


# ---------------------------------------------------------------------------
# reductions and shape manipulation
# ---------------------------------------------------------------------------

def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes) if axes else g
        return (np.broadcast_to(g, a.shape).copy(),)

    return make(np.asarray(out), (a,), bw, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return tsum(a, axis, keepdims) * (1.0 / count)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", a.shape, shape) from None
    return make(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def getitem(a: Tensor, idx) -> Tensor:
    """Basic or advanced indexing; gradients scatter-add back."""
    out = np.array(a.data[idx], dtype=DTYPE)

    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return make(out, (a,), bw, "slice")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise ShapeError("concat", *(t.shape for t in tensors))
    out = np.concatenate([t.data for t in tensors], axis=ax)
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=ax))

    return make(out, tensors, bw, "concat")


def l2norm(a: Tensor) -> Tensor:
    """Euclidean norm of all entries; the gradient at the origin is taken as 0."""
    n = float(np.sqrt((a.data ** 2).sum()))

    def bw(g):
        if n == 0.0:
            return (np.zeros_like(a.data),)
        return (g * a.data / n,)

    return make(np.asarray(n), (a,), bw, "l2norm")


# ---------------------------------------------------------------------------
# linear algebra and convolution
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    return make(a.data @ b.data, (a, b),
                lambda g: (g @ b.data.T, a.data.T @ g), "matmul")


def _pair(v) -> tuple[int, int]:
    return (v, v) if isinstance(v, int) else tuple(v)


def conv2d(x: Tensor, w: Tensor, bias: Tensor | None = None, stride: int = 1,
           padding: int = 0) -> Tensor:
    """2-D cross-correlation, NCHW input and OIHW weights, via im2col + matmul."""
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError("conv2d", x.shape, w.shape)
    if bias is not None and bias.shape != (w.shape[0],):
        raise ShapeError("conv2d(bias)", w.shape, bias.shape)
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    p = padding
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    oh = (h + 2 * p - kh) // stride + 1
    ow = (wd + 2 * p - kw) // stride + 1
    if oh <= 0 or ow <= 0:
        raise ShapeError("conv2d(kernel larger than input)", x.shape, w.shape)
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :oh, :ow]
    # rows ordered (c, kh, kw) to match w.reshape(o, -1)
    cols = win.transpose(1, 4, 5, 0, 2, 3).reshape(c * kh * kw, n * oh * ow)
    wm = w.data.reshape(o, -1)
    out = (wm @ cols).reshape(o, n, oh, ow).transpose(1, 0, 2, 3)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out)

    def bw(g):
        gm = g.transpose(1, 0, 2, 3).reshape(o, -1)
        gw = (gm @ cols.T).reshape(w.shape) if w.requires_grad else None
        gb = gm.sum(axis=1) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = (wm.T @ gm).reshape(c, kh, kw, n, oh, ow)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += \
                        dcols[:, i, j].transpose(1, 0, 2, 3)
            gx = gxp[:, :, p:p + h, p:p + wd] if p else gxp
        return (gx, gw, gb) if bias is not None else (gx, gw)

    parents = (x, w, bias) if bias is not None else (x, w)
    return make(out, parents, bw, "conv2d")


def maxpool2d(x: Tensor, kernel: int = 2) -> Tensor:
    """Non-overlapping max pooling (stride == kernel); ties route to the first max."""
    n, c, h, w = x.shape
    k = kernel
    if h % k or w % k:
        raise ShapeError("maxpool2d", x.shape, (k, k))
    blocks = x.data.reshape(n, c, h // k, k, w // k, k).transpose(0, 1, 2, 4, 3, 5)
    flat = blocks.reshape(n, c, h // k, w // k, k * k)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def bw(g):
        gflat = np.zeros_like(flat)
        np.put_along_axis(gflat, arg[..., None], g[..., None], axis=-1)
        gx = gflat.reshape(n, c, h // k, w // k, k, k).transpose(0, 1, 2, 4, 3, 5)
        return (gx.reshape(n, c, h, w),)

    return make(out, (x,), bw, "maxpool2d")


def upsample_nearest2d(x: Tensor, scale: int = 2) -> Tensor:
    n, c, h, w = x.shape
    out = x.data.repeat(scale, axis=2).repeat(scale, axis=3)

    def bw(g):
        return (g.reshape(n, c, h, scale, w, scale).sum(axis=(3, 5)),)

    return make(out, (x,), bw, "upsample_nearest2d")


# ---------------------------------------------------------------------------
# batch normalization
# ---------------------------------------------------------------------------

BN_MOMENTUM = 0.1
BN_EPS = 1e-5


def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
                running_var: np.ndarray, train: bool, momentum: float = BN_MOMENTUM,
                eps: float = BN_EPS) -> Tensor:
    """Per-channel normalization of an NCHW tensor.

    In train mode the batch mean/variance (biased) normalize the input and the
    running buffers are updated in place with ``momentum``. Otherwise the
    running buffers are used and left untouched.
    """
    if x.ndim != 4 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise ShapeError("batchnorm2d", x.shape, gamma.shape, beta.shape)
    axes = (0, 2, 3)
    m = x.shape[0] * x.shape[2] * x.shape[3]
    if train:
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * var
    else:
        mu, var = running_mean.copy(), running_var.copy()
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu[None, :, None, None]) * inv[None, :, None, None]
    out = xhat * gamma.data[None, :, None, None] + beta.data[None, :, None, None]

    def bw(g):
        gg = (g * xhat).sum(axis=axes)
        gb = g.sum(axis=axes)
        gxhat = g * gamma.data[None, :, None, None]
        if train:
            gx = (inv[None, :, None, None] / m) * (
                m * gxhat - gxhat.sum(axis=axes)[None, :, None, None]
                - xhat * (gxhat * xhat).sum(axis=axes)[None, :, None, None])
        else:
            gx = gxhat * inv[None, :, None, None]
        return gx, gg, gb

    return make(out, (x, gamma, beta), bw, "batchnorm2d")


def channel_mean(x: Tensor) -> Tensor:
    """Mean over N, H, W of an NCHW tensor -> shape (C,)."""
    m = x.shape[0] * x.shape[2] * x.shape[3]
    out = x.data.mean(axis=(0, 2, 3))
    return make(out, (x,), lambda g: (np.broadcast_to(g[None, :, None, None] / m, x.shape).copy(),),
                "channel_mean")


def channel_var(x: Tensor) -> Tensor:
    """Biased variance over N, H, W of an NCHW tensor -> shape (C,)."""
    m = x.shape[0] * x.shape[2] * x.shape[3]
    centered = x.data - x.data.mean(axis=(0, 2, 3))[None, :, None, None]
    out = (centered ** 2).mean(axis=(0, 2, 3))
    return make(out, (x,), lambda g: (g[None, :, None, None] * 2.0 * centered / m,), "channel_var")


def parameters_of(tensors: Iterable[Tensor]) -> list[Tensor]:
    return [t for t in tensors if t.requires_grad]
