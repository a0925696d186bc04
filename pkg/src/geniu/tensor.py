"""Dense tensors with reverse-mode automatic differentiation.

Single-threaded, numpy-backed. Supported primitives: matmul, 2-D convolution,
nearest-neighbour 2x upsampling, relu, sigmoid, reshape, elementwise
add/mul/sub/div/log/exp/square, sum/mean reductions, softmax-cross-entropy
and mean-squared-error. Training code uses float32; gradient-check tests run
the same graph in float64.
"""

from __future__ import annotations

import struct
from typing import Iterable, Sequence

import numpy as np

from .errors import NonScalarLoss, ShapeMismatch

__all__ = [
    "Tensor",
    "conv2d",
    "upsample2x",
    "relu",
    "sigmoid",
    "softmax_cross_entropy",
    "mse",
    "forward_backward",
    "write_tensor",
    "read_tensor",
]


def _as_array(data, dtype=None) -> np.ndarray:
    arr = np.asarray(data)
    if dtype is not None:
        return arr.astype(dtype, copy=False)
    if not np.issubdtype(arr.dtype, np.floating):
        return arr.astype(np.float32)
    return arr


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` back down to `shape` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    """A numpy array plus the bookkeeping needed for backpropagation."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 _parents: tuple = (), _backward=None):
        self.data = _as_array(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad) or any(p.requires_grad for p in _parents)
        self._parents = _parents
        self._backward = _backward
        self.name = name

    # -- introspection -------------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_scalar(self)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad}{tag})"

    # -- autodiff ------------------------------------------------------------

    def backward(self) -> None:
        """Reverse-mode sweep from this scalar; accumulates into `.grad`."""
        if self.data.size != 1:
            raise NonScalarLoss(self.shape)
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if id(node) in seen:
                continue
            if expanded:
                seen.add(id(node))
                topo.append(node)
                continue
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None:
                node._backward()

    def _accum(self, grad: np.ndarray) -> None:
        if self.grad is None:
            self.grad = grad.astype(self.data.dtype, copy=True)
        else:
            self.grad += grad

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    # -- elementwise arithmetic ----------------------------------------------

    def _lift(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return other
        if isinstance(other, (int, float)):
            return Tensor(np.asarray(other, dtype=self.data.dtype))
        return Tensor(other)

    def __add__(self, other):
        other = self._lift(other)
        out = Tensor(self.data + other.data, _parents=(self, other))

        def _back():
            if self.requires_grad:
                self._accum(_unbroadcast(out.grad, self.data.shape))
            if other.requires_grad:
                other._accum(_unbroadcast(out.grad, other.data.shape))
        out._backward = _back
        return out

    __radd__ = __add__

    def __sub__(self, other):
        other = self._lift(other)
        out = Tensor(self.data - other.data, _parents=(self, other))

        def _back():
            if self.requires_grad:
                self._accum(_unbroadcast(out.grad, self.data.shape))
            if other.requires_grad:
                other._accum(_unbroadcast(-out.grad, other.data.shape))
        out._backward = _back
        return out

    def __rsub__(self, other):
        return Tensor(np.asarray(other, dtype=self.data.dtype)) - self if isinstance(other, (int, float)) else Tensor(other) - self

    def __mul__(self, other):
        other = self._lift(other)
        out = Tensor(self.data * other.data, _parents=(self, other))

        def _back():
            if self.requires_grad:
                self._accum(_unbroadcast(out.grad * other.data, self.data.shape))
            if other.requires_grad:
                other._accum(_unbroadcast(out.grad * self.data, other.data.shape))
        out._backward = _back
        return out

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = self._lift(other)
        out = Tensor(self.data / other.data, _parents=(self, other))

        def _back():
            if self.requires_grad:
                self._accum(_unbroadcast(out.grad / other.data, self.data.shape))
            if other.requires_grad:
                other._accum(_unbroadcast(-out.grad * self.data / (other.data * other.data),
                                          other.data.shape))
        out._backward = _back
        return out

    def __rtruediv__(self, other):
        return Tensor(np.asarray(other, dtype=self.data.dtype)) / self if isinstance(other, (int, float)) else Tensor(other) / self

    def __neg__(self):
        out = Tensor(-self.data, _parents=(self,))

        def _back():
            if self.requires_grad:
                self._accum(-out.grad)
        out._backward = _back
        return out

    def log(self):
        out = Tensor(np.log(self.data), _parents=(self,))

        def _back():
            if self.requires_grad:
                self._accum(out.grad / self.data)
        out._backward = _back
        return out

    def exp(self):
        out = Tensor(np.exp(self.data), _parents=(self,))

        def _back():
            if self.requires_grad:
                self._accum(out.grad * out.data)
        out._backward = _back
        return out

    def square(self):
        out = Tensor(self.data * self.data, _parents=(self,))

        def _back():
            if self.requires_grad:
                self._accum(out.grad * 2.0 * self.data)
        out._backward = _back
        return out

    # -- structure -----------------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        new = np.reshape(self.data, shape)
        out = Tensor(new, _parents=(self,))

        def _back():
            if self.requires_grad:
                self._accum(out.grad.reshape(self.data.shape))
        out._backward = _back
        return out

    def flatten(self):
        """Collapse all but the leading (batch) axis."""
        return self.reshape(self.data.shape[0], -1)

    # -- matmul --------------------------------------------------------------

    def __matmul__(self, other):
        other = self._lift(other)
        a, b = self.data, other.data
        if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
            raise ShapeMismatch("matmul", a.shape, b.shape)
        out = Tensor(a @ b, _parents=(self, other))

        def _back():
            if self.requires_grad:
                self._accum(out.grad @ b.T)
            if other.requires_grad:
                other._accum(a.T @ out.grad)
        out._backward = _back
        return out

    # -- reductions ----------------------------------------------------------

    def sum(self, axis=None):
        out = Tensor(self.data.sum(axis=axis), _parents=(self,))

        def _back():
            if self.requires_grad:
                g = out.grad
                if axis is not None:
                    g = np.expand_dims(g, axis)
                self._accum(np.broadcast_to(g, self.data.shape).copy())
        out._backward = _back
        return out

    def mean(self, axis=None):
        count = self.data.size if axis is None else np.prod(
            [self.data.shape[a] for a in (axis if isinstance(axis, tuple) else (axis,))])
        out = Tensor(self.data.mean(axis=axis), _parents=(self,))

        def _back():
            if self.requires_grad:
                g = out.grad
                if axis is not None:
                    g = np.expand_dims(g, axis)
                self._accum(np.broadcast_to(g, self.data.shape) / count)
        out._backward = _back
        return out


def _raise_scalar(t: Tensor):
    raise NonScalarLoss(t.shape)


# -- nonlinearities -----------------------------------------------------------

def relu(x: Tensor) -> Tensor:
    out = Tensor(np.maximum(x.data, 0.0), _parents=(x,))

    def _back():
        if x.requires_grad:
            x._accum(out.grad * (x.data > 0))
    out._backward = _back
    return out


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    s = np.where(d >= 0, 1.0 / (1.0 + np.exp(-np.abs(d))),
                 np.exp(-np.abs(d)) / (1.0 + np.exp(-np.abs(d))))
    out = Tensor(s.astype(d.dtype, copy=False), _parents=(x,))

    def _back():
        if x.requires_grad:
            x._accum(out.grad * out.data * (1.0 - out.data))
    out._backward = _back
    return out


# -- convolution ---------------------------------------------------------------

def _conv_out_hw(h, w, kh, kw, stride, padding):
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (w + 2 * padding - kw) // stride + 1
    return oh, ow


def _im2col(x: np.ndarray, kh, kw, stride, padding):
    n, c, h, w = x.shape
    oh, ow = _conv_out_hw(h, w, kh, kw, stride, padding)
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = np.empty((n, c, kh, kw, oh, ow), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = x[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride]
    return cols.reshape(n, c * kh * kw, oh * ow), oh, ow


def _col2im(cols: np.ndarray, xshape, kh, kw, stride, padding):
    n, c, h, w = xshape
    oh, ow = _conv_out_hw(h, w, kh, kw, stride, padding)
    cols6 = cols.reshape(n, c, kh, kw, oh, ow)
    out = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += cols6[:, :, i, j]
    if padding:
        out = out[:, :, padding:padding + h, padding:padding + w]
    return out


def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D convolution, x [n,C,H,W] * w [F,C,kh,kw] -> [n,F,OH,OW]. No dilation."""
    if x.data.ndim != 4 or w.data.ndim != 4 or x.data.shape[1] != w.data.shape[1]:
        raise ShapeMismatch("conv2d", x.data.shape, w.data.shape)
    n = x.data.shape[0]
    f, _, kh, kw = w.data.shape
    cols, oh, ow = _im2col(x.data, kh, kw, stride, padding)
    w2d = w.data.reshape(f, -1)
    out_data = np.einsum("fk,nkp->nfp", w2d, cols, optimize=True).reshape(n, f, oh, ow)
    out = Tensor(out_data, _parents=(x, w))

    def _back():
        g2d = out.grad.reshape(n, f, oh * ow)
        if w.requires_grad:
            gw = np.einsum("nfp,nkp->fk", g2d, cols, optimize=True)
            w._accum(gw.reshape(w.data.shape))
        if x.requires_grad:
            gcols = np.einsum("fk,nfp->nkp", w2d, g2d, optimize=True)
            x._accum(_col2im(gcols, x.data.shape, kh, kw, stride, padding))
    out._backward = _back
    return out


def upsample2x(x: Tensor) -> Tensor:
    """Nearest-neighbour spatial upsampling by a factor of 2 on [n,C,H,W]."""
    if x.data.ndim != 4:
        raise ShapeMismatch("upsample2x", x.data.shape)
    out = Tensor(x.data.repeat(2, axis=2).repeat(2, axis=3), _parents=(x,))

    def _back():
        if x.requires_grad:
            n, c, h2, w2 = out.grad.shape
            g = out.grad.reshape(n, c, h2 // 2, 2, w2 // 2, 2).sum(axis=(3, 5))
            x._accum(g)
    out._backward = _back
    return out


# -- fused losses ---------------------------------------------------------------

def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Per-sample cross-entropy of softmax(logits) against integer labels.

    Returns a [n] tensor; gradient at the logits of sample i is
    upstream_i * (softmax(logits_i) - onehot(labels_i)).
    """
    if logits.data.ndim != 2:
        raise ShapeMismatch("softmax_cross_entropy", logits.data.shape)
    labels = np.asarray(labels)
    if labels.ndim != 1 or labels.shape[0] != logits.data.shape[0]:
        raise ShapeMismatch("softmax_cross_entropy", logits.data.shape, labels.shape)
    z = logits.data
    zmax = z.max(axis=1, keepdims=True)
    shifted = z - zmax
    lse = np.log(np.exp(shifted).sum(axis=1)) + zmax[:, 0]
    ce = lse - z[np.arange(z.shape[0]), labels]
    out = Tensor(ce, _parents=(logits,))

    def _back():
        if logits.requires_grad:
            p = np.exp(shifted)
            p /= p.sum(axis=1, keepdims=True)
            p[np.arange(z.shape[0]), labels] -= 1.0
            logits._accum(p * out.grad[:, None])
    out._backward = _back
    return out


def mse(pred: Tensor, target: Tensor) -> Tensor:
    """Mean over all elements of the squared difference."""
    target = pred._lift(target)
    if pred.data.shape != target.data.shape:
        raise ShapeMismatch("mse", pred.data.shape, target.data.shape)
    diff = pred.data - target.data
    out = Tensor(np.asarray((diff * diff).mean(), dtype=pred.data.dtype),
                 _parents=(pred, target))

    def _back():
        scale = 2.0 / diff.size
        if pred.requires_grad:
            pred._accum(out.grad * scale * diff)
        if target.requires_grad:
            target._accum(out.grad * (-scale) * diff)
    out._backward = _back
    return out


# -- driver ----------------------------------------------------------------------

def forward_backward(loss_fn, params: dict[str, Tensor]) -> tuple[float, dict[str, np.ndarray]]:
    """Evaluate `loss_fn()` and return (loss value, gradient per parameter).

    `loss_fn` must build a scalar Tensor from the given parameters using the
    supported primitives. Parameter gradients are zeroed first, so the result
    reflects exactly this evaluation.
    """
    for p in params.values():
        p.zero_grad()
    loss = loss_fn()
    if not isinstance(loss, Tensor):
        raise TypeError("loss_fn must return a Tensor")
    if loss.data.size != 1:
        raise NonScalarLoss(loss.shape)
    loss.backward()
    grads = {}
    for name, p in params.items():
        grads[name] = np.zeros_like(p.data) if p.grad is None else p.grad
    return loss.item(), grads


# -- serialization -----------------------------------------------------------------

def write_tensor(path, array) -> None:
    """Raw tensor file: little-endian u32 rank, u32 dims, then f32 values."""
    arr = array.data if isinstance(array, Tensor) else np.asarray(array)
    arr = np.asarray(arr, dtype="<f4")  # ascontiguousarray would promote rank-0 to rank-1
    with open(path, "wb") as fh:
        fh.write(struct.pack("<I", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(arr.tobytes())


def read_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise ValueError(f"{path}: truncated tensor header")
    rank = struct.unpack_from("<I", raw, 0)[0]
    dims = struct.unpack_from(f"<{rank}I", raw, 4)
    offset = 4 + 4 * rank
    n = int(np.prod(dims)) if dims else 1
    data = np.frombuffer(raw, dtype="<f4", count=n, offset=offset)
    if data.size != n:
        raise ValueError(f"{path}: truncated tensor payload")
    return data.reshape(dims).copy()
