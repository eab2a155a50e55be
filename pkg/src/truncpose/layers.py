"""Parameter containers and the small set of layers the models are built from.

Modules declare parameter *shapes* at construction time and only allocate
arrays in :meth:`Module.init_weights`. That lets the cost model walk a
631M-parameter ViT-H without touching memory.

Every module also reports its own multiply-accumulate count for a given
input shape via ``macs(shape) -> (macs, out_shape)``; the cost model sums
these and the tests check them against :func:`truncpose.tensor.count_macs`.
"""

from __future__ import annotations

from collections import OrderedDict
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor


class ConfigError(ValueError):
    """Invalid or unresolved model configuration."""


class Parameter:
    """A named weight slot: shape + init rule, with the array attached after init."""

    __slots__ = ("shape", "init", "tensor")

    def __init__(self, shape, init: str = "trunc_normal"):
        self.shape = tuple(int(s) for s in shape)
        if any(s < 1 for s in self.shape):
            raise ConfigError(f"parameter shape {self.shape} has non-positive dims")
        self.init = init
        self.tensor: Tensor | None = None

    @property
    def size(self) -> int:
        return int(np.prod(self.shape, dtype=np.int64))

    @property
    def value(self) -> Tensor:
        if self.tensor is None:
            raise ConfigError("parameter used before init_weights()")
        return self.tensor


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02, bound: float = 2.0) -> np.ndarray:
    """Normal(0, std) truncated to +-bound*std by resampling."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > bound
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > bound
    return out * std


class Module:
    def __init__(self):
        object.__setattr__(self, "_params", OrderedDict())
        object.__setattr__(self, "_children", OrderedDict())

    def __setattr__(self, name, value):
        if isinstance(value, Parameter):
            self._params[name] = value
        elif isinstance(value, Module):
            self._children[name] = value
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for name, child in self._children.items():
            yield from child.named_parameters(f"{prefix}{name}.")

    def named_children(self):
        return self._children.items()

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def num_params(self) -> int:
        return sum(p.size for p in self.parameters())

    def init_weights(self, rng: np.random.Generator, requires_grad: bool = True) -> "Module":
        """Allocate every parameter in declaration order (deterministic given ``rng``)."""
        for _, p in self.named_parameters():
            if p.init == "trunc_normal":
                data = trunc_normal(rng, p.shape)
            elif p.init == "zeros":
                data = np.zeros(p.shape)
            elif p.init == "ones":
                data = np.ones(p.shape)
            else:
                raise ConfigError(f"unknown init rule {p.init!r}")
            p.tensor = Tensor(data, requires_grad=requires_grad)
        return self

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((name, p.value.data) for name, p in self.named_parameters())

    def load_state_dict(self, state, requires_grad: bool = True) -> None:
        names = [n for n, _ in self.named_parameters()]
        missing = [n for n in names if n not in state]
        extra = [n for n in state if n not in set(names)]
        if missing or extra:
            raise ConfigError(f"state mismatch: missing={missing[:5]} unexpected={extra[:5]}")
        for name, p in self.named_parameters():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise ConfigError(f"{name}: stored shape {arr.shape} != expected {p.shape}")
            p.tensor = Tensor(arr.copy(), requires_grad=requires_grad)

    def zero_grad(self) -> None:
        for p in self.parameters():
            if p.tensor is not None:
                p.tensor.grad = None

    def macs(self, shape):
        raise NotImplementedError(type(self).__name__)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, bias: bool = True, init: str = "trunc_normal"):
        super().__init__()
        self.d_in, self.d_out = d_in, d_out
        self.weight = Parameter((d_in, d_out), init)
        self.bias = Parameter((d_out,), "zeros") if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return T.linear(x, self.weight.value, self.bias.value if self.bias is not None else None)

    def macs(self, shape):
        rows = int(np.prod(shape[:-1]))
        return rows * self.d_in * self.d_out, tuple(shape[:-1]) + (self.d_out,)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        super().__init__()
        self.eps = eps
        self.weight = Parameter((dim,), "ones")
        self.bias = Parameter((dim,), "zeros")

    def forward(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.weight.value, self.bias.value, self.eps)

    def macs(self, shape):
        return 0, tuple(shape)


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, kernel: int, stride: int = 1, padding: int = 0, bias: bool = True):
        super().__init__()
        self.c_in, self.c_out, self.kernel, self.stride, self.padding = c_in, c_out, kernel, stride, padding
        self.weight = Parameter((c_out, c_in, kernel, kernel))
        self.bias = Parameter((c_out,), "zeros") if bias else None

    def out_hw(self, h: int, w: int) -> tuple[int, int]:
        k, s, p = self.kernel, self.stride, self.padding
        return (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1

    def forward(self, x: Tensor) -> Tensor:
        b = self.bias.value if self.bias is not None else None
        return T.conv2d(x, self.weight.value, b, self.stride, self.padding)

    def macs(self, shape):
        b, _, h, w = shape
        ho, wo = self.out_hw(h, w)
        return b * ho * wo * self.c_in * self.c_out * self.kernel**2, (b, self.c_out, ho, wo)


class ConvTranspose2d(Module):
    def __init__(self, c_in: int, c_out: int, kernel: int, stride: int = 1, padding: int = 0, bias: bool = True):
        super().__init__()
        self.c_in, self.c_out, self.kernel, self.stride, self.padding = c_in, c_out, kernel, stride, padding
        self.weight = Parameter((c_in, c_out, kernel, kernel))
        self.bias = Parameter((c_out,), "zeros") if bias else None

    def out_hw(self, h: int, w: int) -> tuple[int, int]:
        k, s, p = self.kernel, self.stride, self.padding
        return (h - 1) * s - 2 * p + k, (w - 1) * s - 2 * p + k

    def forward(self, x: Tensor) -> Tensor:
        b = self.bias.value if self.bias is not None else None
        return T.transposed_conv2d(x, self.weight.value, b, self.stride, self.padding)

    def macs(self, shape):
        b, _, h, w = shape
        ho, wo = self.out_hw(h, w)
        return b * h * w * self.c_in * self.c_out * self.kernel**2, (b, self.c_out, ho, wo)


class Mlp(Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = Linear(dim, hidden)
        self.fc2 = Linear(hidden, dim)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(T.gelu(self.fc1(x)))

    def macs(self, shape):
        m1, s1 = self.fc1.macs(shape)
        m2, s2 = self.fc2.macs(s1)
        return m1 + m2, s2


def split_heads(x: Tensor, heads: int) -> Tensor:
    """(B, N, C) -> (B*heads, N, C/heads)."""
    b, n, c = x.shape
    x = T.reshape(x, (b, n, heads, c // heads))
    return T.reshape(T.transpose(x, (0, 2, 1, 3)), (b * heads, n, c // heads))


def merge_heads(x: Tensor, heads: int) -> Tensor:
    """(B*heads, N, d) -> (B, N, heads*d)."""
    bh, n, d = x.shape
    x = T.reshape(x, (bh // heads, heads, n, d))
    return T.reshape(T.transpose(x, (0, 2, 1, 3)), (bh // heads, n, heads * d))


def attention_core(q: Tensor, k: Tensor, v: Tensor, bias: Tensor | None = None, mask: np.ndarray | None = None) -> Tensor:
    """softmax(q k^T / sqrt(d) + bias + mask) v for (B', N, d) operands."""
    d = q.shape[-1]
    logits = T.matmul(T.scale(q, d**-0.5), T.transpose(k, (0, 2, 1)))
    if bias is not None:
        logits = T.add(logits, bias)
    if mask is not None:
        logits = T.add_const(logits, mask)
    return T.matmul(T.softmax_lastdim(logits), v)


class MultiHeadAttention(Module):
    """Global multi-head attention with a fused qkv projection (self-attention)."""

    def __init__(self, dim: int, heads: int):
        super().__init__()
        if dim % heads:
            raise ConfigError(f"dim {dim} not divisible by {heads} heads")
        self.dim, self.heads = dim, heads
        self.qkv = Linear(dim, 3 * dim)
        self.proj = Linear(dim, dim)

    def forward(self, x: Tensor) -> Tensor:
        b, n, c = x.shape
        q, k, v = T.split(self.qkv(x), [c, c, c], axis=-1)
        h = self.heads
        out = attention_core(split_heads(q, h), split_heads(k, h), split_heads(v, h))
        return self.proj(merge_heads(out, h))

    def macs(self, shape):
        b, n, c = shape
        m_qkv, _ = self.qkv.macs(shape)
        m_proj, _ = self.proj.macs(shape)
        return m_qkv + m_proj + 2 * b * n * n * c, tuple(shape)


class CrossAttention(Module):
    """Queries from ``x``, keys/values from ``context``; projections of width ``inner = heads * head_dim``."""

    def __init__(self, dim: int, context_dim: int, heads: int, head_dim: int):
        super().__init__()
        inner = heads * head_dim
        self.heads, self.inner = heads, inner
        self.q = Linear(dim, inner)
        self.kv = Linear(context_dim, 2 * inner)
        self.proj = Linear(inner, dim)

    def forward(self, x: Tensor, context: Tensor) -> Tensor:
        k, v = T.split(self.kv(context), [self.inner, self.inner], axis=-1)
        h = self.heads
        out = attention_core(split_heads(self.q(x), h), split_heads(k, h), split_heads(v, h))
        return self.proj(merge_heads(out, h))

    def macs(self, shape, context_shape):
        b, n, _ = shape
        m = self.q.macs(shape)[0] + self.kv.macs(context_shape)[0] + self.proj.macs((b, n, self.inner))[0]
        m += 2 * b * n * context_shape[1] * self.inner
        return m, tuple(shape)
