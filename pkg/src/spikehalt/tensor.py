"""Dense numpy tensors with tape-based reverse-mode differentiation.

Every operation whose inputs require gradients appends its output to the
active :class:`Graph`. ``Tensor.backward`` walks that record in exact reverse
order, so gradient accumulation for fan-out is a plain ``+=`` on each parent.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DimensionError

_DEFAULT_DTYPE = np.float32
_GRAD_ENABLED = True


def get_default_dtype():
    return _DEFAULT_DTYPE


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _DEFAULT_DTYPE = dtype


@contextlib.contextmanager
def default_dtype(dtype):
    """Temporarily switch the dtype used for new tensors (float64 for gradient checks)."""
    old = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(old)


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    old = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = old


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


class Graph:
    """Ordered record of differentiable operations from one forward pass."""

    def __init__(self):
        self.nodes: list[Tensor] = []

    def record(self, node: "Tensor") -> None:
        self.nodes.append(node)

    def clear(self) -> None:
        self.nodes.clear()

    def __len__(self):
        return len(self.nodes)


_GRAPH = Graph()


def current_graph() -> Graph:
    return _GRAPH


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
            self.data = data
        else:
            self.data = np.asarray(data, dtype=_DEFAULT_DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[], None] | None = None
        self.name = name

    # -- construction helpers -------------------------------------------------
    @staticmethod
    def _result(data: np.ndarray, parents: Sequence["Tensor"], backward) -> "Tensor":
        out = Tensor(data)
        if _GRAD_ENABLED and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
            _GRAPH.record(out)
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def _accum(self, g: np.ndarray, fresh: bool = False) -> None:
        """Add ``g`` into ``.grad``; ``fresh`` arrays are owned by nobody else and kept as is."""
        if not self.requires_grad:
            return
        if self.grad is None:
            if fresh and g.dtype == self.data.dtype and g.shape == self.data.shape \
                    and g.flags.writeable and g.base is None:
                self.grad = g
            else:
                self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Back-propagate from this tensor through the recorded graph, then clear it."""
        if not self.requires_grad:
            raise RuntimeError("tensor does not require grad")
        if grad is None:
            if self.data.size != 1:
                raise DimensionError("backward() without grad needs a scalar output")
            grad = np.ones_like(self.data)
        self._accum(np.asarray(grad, dtype=self.data.dtype))
        nodes = _GRAPH.nodes
        for node in reversed(nodes):
            if node.grad is not None and node._backward is not None:
                node._backward()
        for node in nodes:
            # free intermediates; leaves keep their gradients
            node.grad = None
            node._backward = None
            node._parents = ()
        _GRAPH.clear()

    # -- operators ------------------------------------------------------------
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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=_DEFAULT_DTYPE))


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    ndim_extra = g.ndim - len(shape)
    if ndim_extra > 0:
        g = g.sum(axis=tuple(range(ndim_extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _const(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.data.dtype))


def _pair(a, b, op: str) -> tuple[Tensor, Tensor]:
    a = a if isinstance(a, Tensor) else _const(a, b)
    b = _const(b, a)
    if a.shape != b.shape:
        try:
            np.broadcast_shapes(a.shape, b.shape)
        except ValueError:
            raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None
    return a, b


def add(a, b) -> Tensor:
    a, b = _pair(a, b, "add")

    def backward():
        a._accum(_unbroadcast(out.grad, a.shape))
        b._accum(_unbroadcast(out.grad, b.shape))

    out = Tensor._result(a.data + b.data, (a, b), backward)
    return out


def sub(a, b) -> Tensor:
    a, b = _pair(a, b, "sub")

    def backward():
        a._accum(_unbroadcast(out.grad, a.shape))
        b._accum(_unbroadcast(-out.grad, b.shape))

    out = Tensor._result(a.data - b.data, (a, b), backward)
    return out


def mul(a, b) -> Tensor:
    a, b = _pair(a, b, "mul")

    def backward():
        if a.requires_grad:
            a._accum(_unbroadcast(out.grad * b.data, a.shape), fresh=True)
        if b.requires_grad:
            b._accum(_unbroadcast(out.grad * a.data, b.shape), fresh=True)

    out = Tensor._result(a.data * b.data, (a, b), backward)
    return out


def div(a, b) -> Tensor:
    a, b = _pair(a, b, "div")

    def backward():
        if a.requires_grad:
            a._accum(_unbroadcast(out.grad / b.data, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(-out.grad * a.data / (b.data * b.data), b.shape))

    out = Tensor._result(a.data / b.data, (a, b), backward)
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy batching rules; a 2-D ``b`` is shared across batch dims."""
    if a.ndim < 1 or b.ndim < 1 or a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError("matmul expects at least 2-D operands")

    def backward():
        g = out.grad
        if a.requires_grad:
            a._accum(_unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape), fresh=True)
        if b.requires_grad:
            if b.ndim == 2 and a.ndim > 2:
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
            b._accum(gb, fresh=True)

    out = Tensor._result(a.data @ b.data, (a, b), backward)
    return out


def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    def backward():
        g = out.grad
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._accum(np.broadcast_to(g, a.shape))

    out = Tensor._result(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), backward)
    return out


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([a.shape[i] for i in axes]))
    return tsum(a, axis, keepdims) * (1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    def backward():
        a._accum(out.grad.reshape(a.shape))

    out = Tensor._result(a.data.reshape(shape), (a,), backward)
    return out


def transpose(a: Tensor, axes=None) -> Tensor:
    inv = None if axes is None else tuple(np.argsort(axes))

    def backward():
        a._accum(np.transpose(out.grad, inv))

    out = Tensor._result(np.transpose(a.data, axes), (a,), backward)
    return out


def getitem(a: Tensor, idx) -> Tensor:
    def backward():
        g = np.zeros_like(a.data)
        np.add.at(g, idx, out.grad)
        a._accum(g)

    out = Tensor._result(np.array(a.data[idx]), (a,), backward)
    return out


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)

    def backward():
        for i, t in enumerate(tensors):
            if t.requires_grad:
                t._accum(np.take(out.grad, i, axis=axis))

    out = Tensor._result(np.stack([t.data for t in tensors], axis=axis), tensors, backward)
    return out


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def backward():
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                sl = [slice(None)] * out.ndim
                sl[axis] = slice(lo, hi)
                t._accum(out.grad[tuple(sl)])

    out = Tensor._result(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)
    return out


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    # tanh form never overflows
    return 0.5 + 0.5 * np.tanh(0.5 * x)


def sigmoid(a: Tensor) -> Tensor:
    y = _sigmoid_np(a.data)

    def backward():
        a._accum(out.grad * y * (1.0 - y), fresh=True)

    out = Tensor._result(y, (a,), backward)
    return out


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)

    def backward():
        a._accum(out.grad * y)

    out = Tensor._result(y, (a,), backward)
    return out


def log(a: Tensor) -> Tensor:
    def backward():
        a._accum(out.grad / a.data)

    out = Tensor._result(np.log(a.data), (a,), backward)
    return out


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp values; gradient passes only where the input is strictly inside the range."""
    inside = (a.data > lo) & (a.data < hi)

    def backward():
        a._accum(out.grad * inside)

    out = Tensor._result(np.clip(a.data, lo, hi), (a,), backward)
    return out


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` with ``weight`` stored as (in, out)."""
    if x.shape[-1] != weight.shape[0]:
        raise DimensionError(f"linear expects last dim {weight.shape[0]}, got {x.shape}")
    y = matmul(x, weight)
    return y if bias is None else add(y, bias)


def _pad2d(x: np.ndarray, padding: int) -> np.ndarray:
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation on NCHW input with an (O, C, kh, kw) kernel."""
    if x.ndim != 4 or weight.ndim != 4:
        raise DimensionError("conv2d expects NCHW input and OCkk weight")
    n, c, h, w = x.shape
    o, cw, kh, kw = weight.shape
    if c != cw:
        raise DimensionError(f"conv2d channel mismatch: input {c}, weight {cw}")
    if stride < 1 or padding < 0:
        raise DimensionError(f"invalid stride={stride} / padding={padding}")
    hp, wp = h + 2 * padding, w + 2 * padding
    if hp < kh or wp < kw:
        raise DimensionError("kernel larger than padded input")
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1

    xp = _pad2d(x.data, padding)
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    # (n, ho, wo, c*kh*kw) column matrix
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, c * kh * kw)
    wmat = weight.data.reshape(o, -1)
    y = (cols @ wmat.T).reshape(n, ho, wo, o).transpose(0, 3, 1, 2)
    if bias is not None:
        y = y + bias.data.reshape(1, o, 1, 1)
    y = np.ascontiguousarray(y)

    def backward():
        g = out.grad.transpose(0, 2, 3, 1).reshape(n * ho * wo, o)
        if weight.requires_grad:
            weight._accum((g.T @ cols).reshape(weight.shape))
        if bias is not None and bias.requires_grad:
            bias._accum(g.sum(axis=0))
        if x.requires_grad:
            gcols = (g @ wmat).reshape(n, ho, wo, c, kh, kw)
            gx = np.zeros((n, c, hp, wp), dtype=x.data.dtype)
            for i in range(kh):
                for j in range(kw):
                    gx[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                        gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            if padding:
                gx = gx[:, :, padding:-padding, padding:-padding]
            x._accum(gx)

    parents = (x, weight) if bias is None else (x, weight, bias)
    out = Tensor._result(y, parents, backward)
    return out


def max_pool2d(x: Tensor, kernel: int = 2) -> Tensor:
    """Non-overlapping max pooling; ties route the gradient to the first maximum."""
    n, c, h, w = x.shape
    if h % kernel or w % kernel:
        raise DimensionError(f"max_pool2d needs spatial dims divisible by {kernel}, got {h}x{w}")
    ho, wo = h // kernel, w // kernel
    blocks = x.data.reshape(n, c, ho, kernel, wo, kernel).transpose(0, 1, 2, 4, 3, 5)
    blocks = blocks.reshape(n, c, ho, wo, kernel * kernel)
    arg = blocks.argmax(axis=-1)
    y = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def backward():
        g = np.zeros((n, c, ho, wo, kernel * kernel), dtype=x.data.dtype)
        np.put_along_axis(g, arg[..., None], out.grad[..., None], axis=-1)
        g = g.reshape(n, c, ho, wo, kernel, kernel).transpose(0, 1, 2, 4, 3, 5)
        x._accum(g.reshape(n, c, h, w))

    out = Tensor._result(y, (x,), backward)
    return out


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, axes: tuple[int, ...],
               mask: np.ndarray | None = None, eps: float = 1e-5,
               stats: tuple[np.ndarray, np.ndarray] | None = None):
    """Normalise ``x`` over ``axes`` with per-feature scale/shift.

    ``mask`` (broadcastable to ``x``, 0/1) restricts the statistics to selected
    entries. With ``stats=(mean, var)`` the given statistics are used as constants
    (inference mode). Returns ``(out, batch_mean, batch_var)``.
    """
    feat_shape = [1] * x.ndim
    for i, n in enumerate(x.shape):
        if i not in axes:
            feat_shape[i] = n
    if gamma.size != int(np.prod(feat_shape)):
        raise DimensionError(f"batch_norm params of size {gamma.size} do not match input {x.shape}")
    g_ = gamma.data.reshape(feat_shape)
    b_ = beta.data.reshape(feat_shape)

    if stats is not None:
        mu = stats[0].reshape(feat_shape).astype(x.data.dtype)
        var = stats[1].reshape(feat_shape).astype(x.data.dtype)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = (x.data - mu) * inv
        y = xhat * g_ + b_

        def backward_eval():
            g = out.grad
            if x.requires_grad:
                x._accum(g * g_ * inv)
            if gamma.requires_grad:
                gamma._accum((g * xhat).sum(axis=axes).reshape(gamma.shape))
            if beta.requires_grad:
                beta._accum(g.sum(axis=axes).reshape(beta.shape))

        out = Tensor._result(y, (x, gamma, beta), backward_eval)
        return out, mu.reshape(-1), var.reshape(-1)

    if mask is None:
        cnt = float(np.prod([x.shape[i] for i in axes]))
        mu = x.data.mean(axis=axes, keepdims=True)
        xc = x.data - mu
        var = (xc * xc).mean(axis=axes, keepdims=True)
        m = None
    else:
        m = np.broadcast_to(mask, x.shape).astype(x.data.dtype)
        cnt = m.sum(axis=axes, keepdims=True)
        if cnt.max() == 0:
            # nothing selected: pass through the shift only, no statistics
            y = np.broadcast_to(b_, x.shape).copy()

            def backward_empty():
                if beta.requires_grad:
                    beta._accum(out.grad.sum(axis=axes).reshape(beta.shape))

            out = Tensor._result(y, (x, gamma, beta), backward_empty)
            return out, None, None
        cnt = np.maximum(cnt, 1.0)
        mu = (x.data * m).sum(axis=axes, keepdims=True) / cnt
        xc = x.data - mu
        var = (xc * xc * m).sum(axis=axes, keepdims=True) / cnt
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    y = xhat * g_ + b_

    def backward():
        g = out.grad
        if gamma.requires_grad:
            gamma._accum((g * xhat).sum(axis=axes).reshape(gamma.shape))
        if beta.requires_grad:
            beta._accum(g.sum(axis=axes).reshape(beta.shape))
        if x.requires_grad:
            dxhat = g * g_
            s1 = dxhat.sum(axis=axes, keepdims=True)
            s2 = (dxhat * xhat).sum(axis=axes, keepdims=True)
            corr = (s1 + xhat * s2) / cnt
            # only selected entries move the statistics
            x._accum(inv * (dxhat - (corr if m is None else corr * m)), fresh=True)

    out = Tensor._result(y, (x, gamma, beta), backward)
    return out, mu.reshape(-1), var.reshape(-1)


def log_softmax(logits: Tensor, axis: int = -1) -> Tensor:
    z = logits.data - logits.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse
    sm = np.exp(y)

    def backward():
        g = out.grad
        logits._accum(g - sm * g.sum(axis=axis, keepdims=True))

    out = Tensor._result(y, (logits,), backward)
    return out


def parameters_grad_norm(params: Iterable[Tensor]) -> float:
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float((p.grad.astype(np.float64) ** 2).sum())
    return float(np.sqrt(total))
