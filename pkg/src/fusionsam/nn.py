"""Parameter containers built on the numerics tensors.

A Module is a plain object whose Tensor attributes (and nested Modules,
including ones held in lists) are its parameters. Names follow attribute
paths, which is also the naming scheme used by checkpoints.
"""

from __future__ import annotations

import numpy as np

from . import numerics as nm
from .numerics import Tensor


class Module:
    def named_parameters(self, prefix: str = ""):
        for name, val in vars(self).items():
            if isinstance(val, Tensor):
                yield prefix + name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(prefix + name + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Tensor):
                        yield f"{prefix}{name}.{i}", item
                    elif isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}.{i}.")

    def parameters(self):
        for _, p in self.named_parameters():
            yield p

    def freeze(self):
        for p in self.parameters():
            p.requires_grad = False
        return self


def param(rng: np.random.Generator, shape, scale: float) -> Tensor:
    return nm.tensor(rng.standard_normal(shape) * scale, requires_grad=True)


class Linear(Module):
    """y = x @ w + b with w of shape (in_dim, out_dim)."""

    def __init__(self, rng: np.random.Generator, in_dim: int, out_dim: int, bias: bool = True):
        self.w = param(rng, (in_dim, out_dim), scale=1.0 / np.sqrt(in_dim))
        self.b = nm.zeros((out_dim,), requires_grad=True) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        if x.ndim == 2:
            y = nm.matmul(x, self.w)
        else:
            flat = nm.reshape(x, (-1, x.shape[-1]))
            y = nm.reshape(nm.matmul(flat, self.w), x.shape[:-1] + (self.w.shape[1],))
        return nm.bias_add(y, self.b) if self.b is not None else y


class Conv2d(Module):
    def __init__(
        self,
        rng: np.random.Generator,
        c_in: int,
        c_out: int,
        k: int,
        stride: int = 1,
        pad: int = 0,
        bias: bool = True,
    ):
        self.stride = stride
        self.pad = pad
        self.w = param(rng, (c_out, c_in, k, k), scale=1.0 / np.sqrt(c_in * k * k))
        self.b = nm.zeros((c_out,), requires_grad=True) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return nm.conv2d(x, self.w, self.b, stride=self.stride, pad=self.pad)


class ConvTranspose2d(Module):
    def __init__(
        self,
        rng: np.random.Generator,
        c_in: int,
        c_out: int,
        k: int,
        stride: int = 1,
        pad: int = 0,
        bias: bool = True,
    ):
        self.stride = stride
        self.pad = pad
        self.w = param(rng, (c_in, c_out, k, k), scale=1.0 / np.sqrt(c_in * k * k))
        self.b = nm.zeros((c_out,), requires_grad=True) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return nm.conv2d_transpose(x, self.w, self.b, stride=self.stride, pad=self.pad)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-6):
        self.eps = eps
        self.gamma = nm.ones((dim,), requires_grad=True)
        self.beta = nm.zeros((dim,), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return nm.layer_norm(x, self.gamma, self.beta, self.eps)


class Mlp(Module):
    """Two linear layers with a GELU between."""

    def __init__(self, rng: np.random.Generator, dim: int, hidden: int, out_dim: int | None = None):
        self.fc1 = Linear(rng, dim, hidden)
        self.fc2 = Linear(rng, hidden, out_dim if out_dim is not None else dim)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(nm.gelu(self.fc1(x)))
