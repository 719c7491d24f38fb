"""Dense float tensors with reverse-mode differentiation.

Storage is a row-major numpy array (float64 by default, float32 behind
``set_default_dtype``). Every operation that participates in training
records a backward closure; ``Tensor.backward()`` walks the graph in
reverse topological order. Broadcasting is deliberately restricted to
scalar operands and bias addition; all other binary ops require exact
shape equality so that failures surface as loud DimensionErrors instead
of silently broadcast results.

Reductions rely on numpy's fixed (pairwise) summation order, which is
deterministic run to run for a given shape, so repeated runs with the
same seed are bitwise identical.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ConfigError, ContractError, DimensionError, NumericError

_DTYPE = np.float64


def set_default_dtype(name: str) -> None:
    """Select "float64" (default, used by all tests) or "float32" storage."""
    global _DTYPE
    if name not in ("float32", "float64"):
        raise ConfigError(f"unsupported dtype {name!r}")
    _DTYPE = np.float32 if name == "float32" else np.float64


def default_dtype():
    return _DTYPE


class Tensor:
    """A node in the computation graph.

    ``data`` is always a C-contiguous numpy array. ``grad`` is filled in
    (same shape as ``data``) for every requires_grad tensor reachable
    from the scalar on which ``backward()`` was called.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=_DTYPE)
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward_fn = None

    # -- construction helpers -------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        """Stop-gradient view: same values, no graph edge."""
        out = Tensor.__new__(Tensor)
        out.data = self.data
        out.grad = None
        out.requires_grad = False
        out._parents = ()
        out._backward_fn = None
        return out

    def copy(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=self.requires_grad)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- autodiff core ---------------------------------------------------------

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype)
        else:
            self.grad += g

    def backward(self) -> None:
        """Reverse pass from a scalar. Populates .grad on every reachable
        requires_grad tensor. Iterative postorder, so graph depth is not
        limited by the Python recursion limit."""
        if self.data.size != 1:
            raise ContractError(
                f"backward() requires a scalar output, got shape {self.shape}"
            )
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward_fn is not None:
                node._backward_fn()

    # -- operator sugar ----------------------------------------------------------

    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return add_scalar(self, float(other))

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return sub(self, other)
        return add_scalar(self, -float(other))

    def __rsub__(self, other):
        return add_scalar(neg(self), float(other))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise ContractError("elementwise division is not part of the op set")
        return scale(self, 1.0 / float(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return tmean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=_DTYPE), requires_grad=requires_grad)


def ones(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape, dtype=_DTYPE), requires_grad=requires_grad)


def full(shape, value: float, requires_grad: bool = False) -> Tensor:
    return Tensor(np.full(shape, value, dtype=_DTYPE), requires_grad=requires_grad)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable | None) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data if data.flags.c_contiguous else np.ascontiguousarray(data)
    out.grad = None
    needed = any(p.requires_grad for p in parents)
    out.requires_grad = needed
    if needed:
        out._parents = tuple(parents)
        out._backward_fn = backward
    else:
        out._parents = ()
        out._backward_fn = None
    return out


def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ")


# -- elementwise ---------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "add")
    out = _make(a.data + b.data, (a, b), None)

    def backward():
        if a.requires_grad:
            a._accumulate(out.grad)
        if b.requires_grad:
            b._accumulate(out.grad)

    out._backward_fn = backward if out.requires_grad else None
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "sub")
    out = _make(a.data - b.data, (a, b), None)

    def backward():
        if a.requires_grad:
            a._accumulate(out.grad)
        if b.requires_grad:
            b._accumulate(-out.grad)

    out._backward_fn = backward if out.requires_grad else None
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "mul")
    out = _make(a.data * b.data, (a, b), None)

    def backward():
        if a.requires_grad:
            a._accumulate(out.grad * b.data)
        if b.requires_grad:
            b._accumulate(out.grad * a.data)

    out._backward_fn = backward if out.requires_grad else None
    return out


def neg(a: Tensor) -> Tensor:
    out = _make(-a.data, (a,), None)

    def backward():
        a._accumulate(-out.grad)

    out._backward_fn = backward if out.requires_grad else None
    return out


def scale(a: Tensor, c: float) -> Tensor:
    out = _make(a.data * c, (a,), None)

    def backward():
        a._accumulate(out.grad * c)

    out._backward_fn = backward if out.requires_grad else None
    return out


def add_scalar(a: Tensor, c: float) -> Tensor:
    out = _make(a.data + c, (a,), None)

    def backward():
        a._accumulate(out.grad)

    out._backward_fn = backward if out.requires_grad else None
    return out


def pow_scalar(a: Tensor, p: float) -> Tensor:
    out = _make(a.data ** p, (a,), None)

    def backward():
        a._accumulate(out.grad * p * a.data ** (p - 1.0))

    out._backward_fn = backward if out.requires_grad else None
    return out


def square(a: Tensor) -> Tensor:
    out = _make(a.data * a.data, (a,), None)

    def backward():
        a._accumulate(out.grad * 2.0 * a.data)

    out._backward_fn = backward if out.requires_grad else None
    return out


def texp(a: Tensor) -> Tensor:
    out = _make(np.exp(a.data), (a,), None)

    def backward():
        a._accumulate(out.grad * out.data)

    out._backward_fn = backward if out.requires_grad else None
    return out


def tlog(a: Tensor) -> Tensor:
    out = _make(np.log(a.data), (a,), None)

    def backward():
        a._accumulate(out.grad / a.data)

    out._backward_fn = backward if out.requires_grad else None
    return out


def relu(a: Tensor) -> Tensor:
    out = _make(np.maximum(a.data, 0.0), (a,), None)

    def backward():
        a._accumulate(out.grad * (a.data > 0.0))

    out._backward_fn = backward if out.requires_grad else None
    return out


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    # tanh form; smooth everywhere, exact derivative below
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(inner)
    out = _make(0.5 * x * (1.0 + t), (a,), None)

    def backward():
        sech2 = 1.0 - t * t
        dinner = _GELU_C * (1.0 + 3.0 * 0.044715 * x ** 2)
        da = 0.5 * (1.0 + t) + 0.5 * x * sech2 * dinner
        a._accumulate(out.grad * da)

    out._backward_fn = backward if out.requires_grad else None
    return out


def _sigmoid(x: np.ndarray) -> np.ndarray:
    pos = x >= 0
    z = np.empty_like(x)
    z[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    z[~pos] = ex / (1.0 + ex)
    return z


def sigmoid(a: Tensor) -> Tensor:
    s = _sigmoid(a.data)
    out = _make(s, (a,), None)

    def backward():
        a._accumulate(out.grad * s * (1.0 - s))

    out._backward_fn = backward if out.requires_grad else None
    return out


def logsigmoid(a: Tensor) -> Tensor:
    # log sigmoid(x) = -softplus(-x), computed without overflow
    x = a.data
    out_data = np.minimum(x, 0.0) - np.log1p(np.exp(-np.abs(x)))
    out = _make(out_data, (a,), None)

    def backward():
        a._accumulate(out.grad * _sigmoid(-x))

    out._backward_fn = backward if out.requires_grad else None
    return out


# -- reductions -----------------------------------------------------------------


def tsum(a: Tensor, axis=None) -> Tensor:
    out = _make(np.asarray(np.sum(a.data, axis=axis)), (a,), None)

    def backward():
        if axis is None:
            a._accumulate(np.broadcast_to(out.grad, a.shape).copy())
        else:
            a._accumulate(np.broadcast_to(np.expand_dims(out.grad, axis), a.shape).copy())

    out._backward_fn = backward if out.requires_grad else None
    return out


def tmean(a: Tensor, axis=None) -> Tensor:
    n = a.size if axis is None else a.shape[axis]
    out = _make(np.asarray(np.mean(a.data, axis=axis)), (a,), None)

    def backward():
        if axis is None:
            a._accumulate(np.broadcast_to(out.grad / n, a.shape).copy())
        else:
            a._accumulate(
                np.broadcast_to(np.expand_dims(out.grad, axis) / n, a.shape).copy()
            )

    out._backward_fn = backward if out.requires_grad else None
    return out


# -- shape ops -------------------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    out = _make(a.data.reshape(shape), (a,), None)

    def backward():
        a._accumulate(out.grad.reshape(a.shape))

    out._backward_fn = backward if out.requires_grad else None
    return out


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    out = _make(np.ascontiguousarray(np.transpose(a.data, axes)), (a,), None)
    inverse = tuple(np.argsort(axes))

    def backward():
        a._accumulate(np.transpose(out.grad, inverse))

    out._backward_fn = backward if out.requires_grad else None
    return out


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    ts = list(tensors)
    if not ts:
        raise ContractError("concat of an empty sequence")
    out = _make(np.concatenate([t.data for t in ts], axis=axis), ts, None)
    sizes = [t.shape[axis] for t in ts]

    def backward():
        offset = 0
        for t, n in zip(ts, sizes):
            if t.requires_grad:
                sl = [slice(None)] * out.grad.ndim
                sl[axis] = slice(offset, offset + n)
                t._accumulate(out.grad[tuple(sl)])
            offset += n

    out._backward_fn = backward if out.requires_grad else None
    return out


def slice_axis(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    sl = [slice(None)] * a.ndim
    sl[axis] = slice(start, stop)
    sl = tuple(sl)
    out = _make(a.data[sl].copy(), (a,), None)

    def backward():
        g = np.zeros_like(a.data)
        g[sl] = out.grad
        a._accumulate(g)

    out._backward_fn = backward if out.requires_grad else None
    return out


# -- linear algebra ----------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(
            f"matmul expects 2-D operands, got {a.shape} and {b.shape}"
        )
    if a.shape[1] != b.shape[0]:
        raise DimensionError(
            f"matmul: inner dimensions disagree for shapes {a.shape} and {b.shape}"
        )
    out = _make(a.data @ b.data, (a, b), None)

    def backward():
        if a.requires_grad:
            a._accumulate(out.grad @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ out.grad)

    out._backward_fn = backward if out.requires_grad else None
    return out


def bias_add(x: Tensor, b: Tensor) -> Tensor:
    """Add a vector over the last axis of x (the one sanctioned broadcast)."""
    if b.ndim != 1 or x.shape[-1] != b.shape[0]:
        raise DimensionError(f"bias_add: bias {b.shape} does not match input {x.shape}")
    out = _make(x.data + b.data, (x, b), None)

    def backward():
        if x.requires_grad:
            x._accumulate(out.grad)
        if b.requires_grad:
            lead = tuple(range(out.grad.ndim - 1))
            b._accumulate(out.grad.sum(axis=lead))

    out._backward_fn = backward if out.requires_grad else None
    return out


def gather_rows(table: Tensor, indices: np.ndarray) -> Tensor:
    """Select rows of a (K, d) table by an integer index array.

    Gradients flow to the table (scatter-add); indices are constants.
    """
    if table.ndim != 2:
        raise DimensionError(f"gather_rows expects a 2-D table, got {table.shape}")
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ContractError("gather_rows: index out of range")
    out = _make(table.data[idx], (table,), None)

    def backward():
        g = np.zeros_like(table.data)
        np.add.at(g, idx.reshape(-1), out.grad.reshape(-1, table.shape[1]))
        table._accumulate(g)

    out._backward_fn = backward if out.requires_grad else None
    return out


# -- normalization and attention-side ops --------------------------------------------


def softmax(x: Tensor, axis: int) -> Tensor:
    if axis >= x.ndim or axis < -x.ndim:
        raise DimensionError(f"softmax axis {axis} out of range for shape {x.shape}")
    if np.isnan(x.data).any():
        raise NumericError("softmax received NaN input")
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / np.sum(e, axis=axis, keepdims=True)
    out = _make(y, (x,), None)

    def backward():
        g = out.grad
        dot = np.sum(g * y, axis=axis, keepdims=True)
        x._accumulate(y * (g - dot))

    out._backward_fn = backward if out.requires_grad else None
    return out


def log_softmax(x: Tensor, axis: int) -> Tensor:
    if np.isnan(x.data).any():
        raise NumericError("log_softmax received NaN input")
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    lse = np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))
    out_data = shifted - lse
    out = _make(out_data, (x,), None)

    def backward():
        g = out.grad
        soft = np.exp(out_data)
        x._accumulate(g - soft * np.sum(g, axis=axis, keepdims=True))

    out._backward_fn = backward if out.requires_grad else None
    return out


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    if eps <= 0.0:
        raise ConfigError(f"layer_norm eps must be positive, got {eps}")
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(
            f"layer_norm affine shapes {gamma.shape}/{beta.shape} do not match last axis {d}"
        )
    mu = np.mean(x.data, axis=-1, keepdims=True)
    var = np.mean((x.data - mu) ** 2, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = _make(xhat * gamma.data + beta.data, (x, gamma, beta), None)

    def backward():
        g = out.grad
        if gamma.requires_grad:
            lead = tuple(range(g.ndim - 1))
            gamma._accumulate(np.sum(g * xhat, axis=lead))
        if beta.requires_grad:
            lead = tuple(range(g.ndim - 1))
            beta._accumulate(np.sum(g, axis=lead))
        if x.requires_grad:
            gx = g * gamma.data
            mean_gx = np.mean(gx, axis=-1, keepdims=True)
            mean_gxxhat = np.mean(gx * xhat, axis=-1, keepdims=True)
            x._accumulate(inv * (gx - mean_gx - xhat * mean_gxxhat))

    out._backward_fn = backward if out.requires_grad else None
    return out


# -- convolutions ------------------------------------------------------------------


def _conv_out_size(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    b, c, _, _ = xp.shape
    sb, sc, sh, sw = xp.strides
    windows = np.lib.stride_tricks.as_strided(
        xp,
        shape=(b, c, ho, wo, kh, kw),
        strides=(sb, sc, sh * stride, sw * stride, sh, sw),
        writeable=False,
    )
    # (b, ho, wo, c, kh, kw) -> (b*ho*wo, c*kh*kw)
    return np.ascontiguousarray(windows.transpose(0, 2, 3, 1, 4, 5)).reshape(
        b * ho * wo, c * kh * kw
    )


def _col2im(cols: np.ndarray, xshape, kh, kw, stride, pad, ho, wo) -> np.ndarray:
    b, c, h, w = xshape
    xp = np.zeros((b, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    cols6 = cols.reshape(b, ho, wo, c, kh, kw).transpose(0, 3, 1, 2, 4, 5)
    for i in range(kh):
        for j in range(kw):
            xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += cols6[
                :, :, :, :, i, j
            ]
    if pad:
        return xp[:, :, pad : pad + h, pad : pad + w]
    return xp


def conv2d(x: Tensor, w: Tensor, b: Tensor | None, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation over NCHW input with OIHW weights."""
    if x.ndim != 4 or w.ndim != 4:
        raise DimensionError(f"conv2d expects 4-D input/weights, got {x.shape}, {w.shape}")
    bs, c, h, wdt = x.shape
    o, ci, kh, kw = w.shape
    if ci != c:
        raise DimensionError(
            f"conv2d: input has {c} channels but weights expect {ci}"
        )
    if kh > h + 2 * pad or kw > wdt + 2 * pad:
        raise DimensionError("conv2d: kernel larger than padded input")
    ho = _conv_out_size(h, kh, stride, pad)
    wo = _conv_out_size(wdt, kw, stride, pad)
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    cols = _im2col(xp, kh, kw, stride, ho, wo)
    wmat = w.data.reshape(o, c * kh * kw)
    out_data = (cols @ wmat.T).reshape(bs, ho, wo, o).transpose(0, 3, 1, 2)
    if b is not None:
        if b.shape != (o,):
            raise DimensionError(f"conv2d bias {b.shape} does not match {o} filters")
        out_data = out_data + b.data[None, :, None, None]
    parents = (x, w) if b is None else (x, w, b)
    out = _make(np.ascontiguousarray(out_data), parents, None)

    def backward():
        g = out.grad  # (bs, o, ho, wo)
        gcols = g.transpose(0, 2, 3, 1).reshape(bs * ho * wo, o)
        if w.requires_grad:
            w._accumulate((gcols.T @ cols).reshape(w.shape))
        if b is not None and b.requires_grad:
            b._accumulate(g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            dcols = gcols @ wmat
            x._accumulate(_col2im(dcols, x.shape, kh, kw, stride, pad, ho, wo))

    out._backward_fn = backward if out.requires_grad else None
    return out


def conv2d_transpose(
    x: Tensor, w: Tensor, b: Tensor | None, stride: int = 1, pad: int = 0
) -> Tensor:
    """Adjoint of conv2d. Weights are (C_in, C_out, kh, kw); output spatial
    size is (n - 1) * stride - 2 * pad + k."""
    if x.ndim != 4 or w.ndim != 4:
        raise DimensionError(
            f"conv2d_transpose expects 4-D input/weights, got {x.shape}, {w.shape}"
        )
    bs, c, h, wdt = x.shape
    ci, co, kh, kw = w.shape
    if ci != c:
        raise DimensionError(
            f"conv2d_transpose: input has {c} channels but weights expect {ci}"
        )
    ho = (h - 1) * stride - 2 * pad + kh
    wo = (wdt - 1) * stride - 2 * pad + kw
    if ho <= 0 or wo <= 0:
        raise DimensionError("conv2d_transpose: non-positive output size")
    # dual of conv2d: scatter x (as if it were an output gradient) through w
    wmat = w.data.reshape(c, co * kh * kw)
    x_rows = x.data.transpose(0, 2, 3, 1).reshape(bs * h * wdt, c)
    out_data = _col2im(x_rows @ wmat, (bs, co, ho, wo), kh, kw, stride, pad, h, wdt)
    if b is not None:
        if b.shape != (co,):
            raise DimensionError(
                f"conv2d_transpose bias {b.shape} does not match {co} channels"
            )
        out_data = out_data + b.data[None, :, None, None]
    parents = (x, w) if b is None else (x, w, b)
    out = _make(np.ascontiguousarray(out_data), parents, None)

    def backward():
        g = out.grad
        gp = np.pad(g, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else g
        gcols = _im2col(np.ascontiguousarray(gp), kh, kw, stride, h, wdt)
        if x.requires_grad:
            dx = (gcols @ wmat.T).reshape(bs, h, wdt, c).transpose(0, 3, 1, 2)
            x._accumulate(np.ascontiguousarray(dx))
        if w.requires_grad:
            w._accumulate((x_rows.T @ gcols).reshape(w.shape))
        if b is not None and b.requires_grad:
            b._accumulate(g.sum(axis=(0, 2, 3)))

    out._backward_fn = backward if out.requires_grad else None
    return out


def avg_pool2d(x: Tensor, k: int) -> Tensor:
    """Non-overlapping k x k mean pooling over NCHW input."""
    bs, c, h, w = x.shape
    if h % k or w % k:
        raise DimensionError(f"avg_pool2d: spatial dims {h}x{w} not divisible by {k}")
    hk, wk = h // k, w // k
    view = x.data.reshape(bs, c, hk, k, wk, k)
    out = _make(view.mean(axis=(3, 5)), (x,), None)

    def backward():
        g = out.grad / (k * k)
        x._accumulate(
            np.broadcast_to(g[:, :, :, None, :, None], (bs, c, hk, k, wk, k)).reshape(x.shape)
        )

    out._backward_fn = backward if out.requires_grad else None
    return out


# -- gradient checking ----------------------------------------------------------------


@dataclass
class GradReport:
    """Worst-coordinate comparison between analytic and central-difference grads."""

    max_rel_err: float
    worst_index: int
    analytic: float
    numeric: float

    def ok(self, tol: float) -> bool:
        return self.max_rel_err <= tol


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5) -> GradReport:
    """Compare backward() against central finite differences, coordinate by
    coordinate. Relative error uses a unit floor in the denominator so
    near-zero gradients are judged on absolute error. f must be deterministic
    and scalar-valued."""
    if eps <= 0:
        raise ConfigError(f"grad_check eps must be positive, got {eps}")
    if not x.requires_grad:
        raise ContractError("grad_check input must have requires_grad=True")
    out = f(x)
    if not isinstance(out, Tensor) or out.data.size != 1:
        raise ContractError("grad_check needs a scalar-valued function")
    x.grad = None
    out.backward()
    analytic = x.grad.copy() if x.grad is not None else np.zeros_like(x.data)

    numeric = np.empty_like(x.data)
    flat = x.data.reshape(-1)
    nflat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f(x).item()
        flat[i] = orig - eps
        fm = f(x).item()
        flat[i] = orig
        nflat[i] = (fp - fm) / (2.0 * eps)

    a = analytic.reshape(-1)
    n = numeric.reshape(-1)
    denom = np.maximum(1.0, np.maximum(np.abs(a), np.abs(n)))
    rel = np.abs(a - n) / denom
    worst = int(np.argmax(rel)) if rel.size else 0
    return GradReport(
        max_rel_err=float(rel[worst]) if rel.size else 0.0,
        worst_index=worst,
        analytic=float(a[worst]) if rel.size else 0.0,
        numeric=float(n[worst]) if rel.size else 0.0,
    )
