"""Dense float64 tensors with reverse-mode gradient propagation.

Every primitive records a node (parents + a closure mapping the output
gradient to input gradients) when grad mode is on and any input requires a
gradient. ``backward`` walks the recorded graph once in reverse topological
order and frees it afterwards.

Binary elementwise ops only broadcast over a single leading batch dimension
(``(T, C) + (B, T, C)`` is fine, ``(C,) + (B, T, C)`` is not). Use
:func:`expand` or :func:`reshape` to make anything else explicit.
"""

from __future__ import annotations

import builtins
import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Tensor", "ShapeError", "GraphError", "NonFiniteError",
    "no_grad", "is_grad_enabled", "count_macs", "backward", "custom_op",
    "add", "sub", "mul", "div", "neg", "scale", "add_scalar", "add_const", "mul_const",
    "matmul", "linear", "transpose", "reshape", "expand", "take", "slice_axis",
    "split", "concat", "stack", "roll", "pad", "flip",
    "relu", "gelu", "sigmoid", "softplus", "exp", "sqrt", "abs", "square", "tanh",
    "sum", "mean", "softmax_lastdim", "layer_norm",
    "conv2d", "transposed_conv2d", "depthwise_conv2d", "linear_scan",
]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class GraphError(RuntimeError):
    """Raised on misuse of the compute graph (non-scalar loss, reused graph)."""


class NonFiniteError(ArithmeticError):
    """Raised when a forward op produces NaN or Inf from finite inputs."""


_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording in the current thread."""
    prev = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class _MacCounter:
    def __init__(self):
        self.total = 0
        self.by_op: dict[str, int] = {}

    def add(self, op: str, n: int) -> None:
        self.total += int(n)
        self.by_op[op] = self.by_op.get(op, 0) + int(n)


@contextlib.contextmanager
def count_macs():
    """Count multiply-accumulates of matmul/conv/scan primitives run inside the block.

    Elementwise ops, normalization and softmax are not counted.
    """
    counter = _MacCounter()
    prev = getattr(_state, "counter", None)
    _state.counter = counter
    try:
        yield counter
    finally:
        _state.counter = prev


def _tally(op: str, n: int) -> None:
    counter = getattr(_state, "counter", None)
    if counter is not None:
        counter.add(op, n)


class Tensor:
    """A float64 array plus the bookkeeping needed for backpropagation."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op", "__weakref__")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._op = "leaf"

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
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return add_scalar(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return sub(self, other)
        return add_scalar(self, -other)

    def __rsub__(self, other):
        return add_scalar(neg(self), other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return div(self, other)
        return scale(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    """Wrap op output; record the node only if some parent needs a gradient."""
    if not np.all(np.isfinite(data)):
        if all(np.all(np.isfinite(p.data)) for p in parents):
            raise NonFiniteError(f"{op} produced non-finite values from finite inputs")
        raise NonFiniteError(f"{op} received non-finite inputs")
    out = Tensor(data)
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
        out._op = op
    return out


def custom_op(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    """Register a fused primitive defined outside this module.

    ``backward_fn`` maps the output gradient to a tuple of input gradients
    (one per parent, ``None`` allowed). The output goes through the same
    finiteness check as built-in ops.
    """
    return _make(np.asarray(data, dtype=np.float64), tuple(parents), backward_fn, op)


_FREED = "<freed>"


def backward(loss: Tensor) -> None:
    """Propagate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    The graph is released afterwards; a second call on the same loss raises
    :class:`GraphError`.
    """
    if loss.data.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._op == _FREED:
        raise GraphError("graph already consumed by an earlier backward pass")
    if loss._backward is None:
        if loss.requires_grad:
            loss.grad = np.ones_like(loss.data) if loss.grad is None else loss.grad + 1.0
            return
        raise GraphError("loss has no recorded graph (already consumed, or built under no_grad)")

    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        in_grads = node._backward(g)
        for p, pg in zip(node._parents, in_grads):
            if pg is None or not p.requires_grad:
                continue
            if pg.shape != p.shape:
                raise ShapeError(f"internal: gradient shape {pg.shape} != input shape {p.shape} in {node._op}")
            key = id(p)
            grads[key] = grads[key] + pg if key in grads else pg
    for node in order:
        if node._backward is not None:
            node._parents = ()
            node._backward = None
            node._op = _FREED


# ---------------------------------------------------------------------------
# elementwise arithmetic


def _binary_shapes(a: Tensor, b: Tensor, op: str):
    """Return reducers mapping an output-shaped gradient back to each operand."""
    sa, sb = a.shape, b.shape
    if sa == sb:
        return (lambda g: g), (lambda g: g)
    if len(sa) == len(sb) + 1 and sa[1:] == sb:
        return (lambda g: g), (lambda g: g.sum(axis=0))
    if len(sb) == len(sa) + 1 and sb[1:] == sa:
        return (lambda g: g.sum(axis=0)), (lambda g: g)
    if len(sa) == len(sb) and sa[1:] == sb[1:] and (sa[0] == 1 or sb[0] == 1):
        ra = (lambda g: g.sum(axis=0, keepdims=True)) if sa[0] == 1 and sb[0] != 1 else (lambda g: g)
        rb = (lambda g: g.sum(axis=0, keepdims=True)) if sb[0] == 1 and sa[0] != 1 else (lambda g: g)
        return ra, rb
    raise ShapeError(f"{op}: incompatible shapes {sa} and {sb} (only a leading batch dim broadcasts)")


def add(a: Tensor, b: Tensor) -> Tensor:
    ra, rb = _binary_shapes(a, b, "add")
    return _make(a.data + b.data, (a, b), lambda g: (ra(g), rb(g)), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    ra, rb = _binary_shapes(a, b, "sub")
    return _make(a.data - b.data, (a, b), lambda g: (ra(g), rb(-g)), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    ra, rb = _binary_shapes(a, b, "mul")
    return _make(a.data * b.data, (a, b), lambda g: (ra(g * b.data), rb(g * a.data)), "mul")


def div(a: Tensor, b: Tensor) -> Tensor:
    ra, rb = _binary_shapes(a, b, "div")
    out = a.data / b.data
    return _make(out, (a, b), lambda g: (ra(g / b.data), rb(-g * out / b.data)), "div")


def neg(x: Tensor) -> Tensor:
    return _make(-x.data, (x,), lambda g: (-g,), "neg")


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(x.data * c, (x,), lambda g: (g * c,), "scale")


def add_scalar(x: Tensor, c: float) -> Tensor:
    return _make(x.data + float(c), (x,), lambda g: (g,), "add_scalar")


def add_const(x: Tensor, c: np.ndarray) -> Tensor:
    """Add a constant array (e.g. an attention mask); numpy broadcasting applies to ``c`` only."""
    c = np.asarray(c, dtype=np.float64)
    out = x.data + c
    if out.shape != x.shape:
        raise ShapeError(f"add_const: constant {c.shape} would change shape {x.shape}")
    return _make(out, (x,), lambda g: (g,), "add_const")


def mul_const(x: Tensor, c: np.ndarray) -> Tensor:
    c = np.asarray(c, dtype=np.float64)
    out = x.data * c
    if out.shape != x.shape:
        raise ShapeError(f"mul_const: constant {c.shape} would change shape {x.shape}")
    return _make(out, (x,), lambda g: (g * c,), "mul_const")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(x.data * mask, (x,), lambda g: (g * mask,), "relu")


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    v = x.data
    inner = _GELU_C * (v + 0.044715 * v**3)
    t = np.tanh(inner)
    out = 0.5 * v * (1.0 + t)

    def bw(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * v**2)
        return (g * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t**2) * dinner),)

    return _make(out, (x,), bw, "gelu")


def _sigmoid_np(v: np.ndarray) -> np.ndarray:
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    e = np.exp(v[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid_np(x.data)
    return _make(s, (x,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def softplus(x: Tensor) -> Tensor:
    v = x.data
    out = np.logaddexp(0.0, v)
    return _make(out, (x,), lambda g: (g * _sigmoid_np(v),), "softplus")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,), "exp")


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return _make(out, (x,), lambda g: (g * 0.5 / out,), "sqrt")


def abs(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    sgn = np.sign(x.data)
    return _make(np.abs(x.data), (x,), lambda g: (g * sgn,), "abs")


def square(x: Tensor) -> Tensor:
    v = x.data
    return _make(v * v, (x,), lambda g: (2.0 * g * v,), "square")


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return _make(out, (x,), lambda g: (g * (1.0 - out**2),), "tanh")


# ---------------------------------------------------------------------------
# reductions


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(np.asarray(out), (x,), bw, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.data.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return scale(sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def softmax_lastdim(x: Tensor) -> Tensor:
    if x.shape[-1] < 1:
        raise ShapeError("softmax over an empty last dimension")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _make(s, (x,), bw, "softmax")


def layer_norm(x: Tensor, gamma: Tensor | None, beta: Tensor | None, eps: float = 1e-5) -> Tensor:
    """Normalize over the last dimension; a zero-variance row maps to ``beta``."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    c = x.shape[-1]
    for p in (gamma, beta):
        if p is not None and p.shape != (c,):
            raise ShapeError(f"layer_norm: affine shape {p.shape} != ({c},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    g_data = gamma.data if gamma is not None else 1.0
    out = xhat * g_data + (beta.data if beta is not None else 0.0)
    lead = tuple(range(x.ndim - 1))

    def bw(g):
        gx = g * g_data
        dx = rstd * (gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        dg = (g * xhat).sum(axis=lead) if gamma is not None else None
        db = g.sum(axis=lead) if beta is not None else None
        return dx, dg, db

    parents = (x, gamma if gamma is not None else Tensor(0.0), beta if beta is not None else Tensor(0.0))
    return _make(out, parents, bw, "layer_norm")


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b`` for 2-D operands, or N-D operands with identical leading dims.

    ``b`` may also be 2-D while ``a`` is N-D (a shared right factor).
    """
    sa, sb = a.shape, b.shape
    ok = a.ndim >= 2 and b.ndim >= 2 and sa[-1] == sb[-2]
    if ok and b.ndim > 2:
        ok = sa[:-2] == sb[:-2]
    if not ok:
        raise ShapeError(f"matmul: cannot multiply shapes {sa} and {sb}")
    out = a.data @ b.data
    _tally("matmul", int(np.prod(sa)) * sb[-1])

    def bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        if b.ndim == 2 and a.ndim > 2:
            gb = a.data.reshape(-1, sa[-1]).T @ g.reshape(-1, sb[-1])
        else:
            gb = np.swapaxes(a.data, -1, -2) @ g
        return ga, gb

    return _make(out, (a, b), bw, "matmul")


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w + b`` over the last axis of ``x``; ``w`` is ``(in, out)``."""
    if w.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear: input {x.shape} does not match weight {w.shape}")
    if b is not None and b.shape != (w.shape[1],):
        raise ShapeError(f"linear: bias {b.shape} does not match weight {w.shape}")
    x2 = x.data.reshape(-1, w.shape[0])
    out2 = x2 @ w.data
    if b is not None:
        out2 = out2 + b.data
    _tally("linear", x2.shape[0] * w.shape[0] * w.shape[1])
    out_shape = x.shape[:-1] + (w.shape[1],)

    def bw(g):
        g2 = g.reshape(-1, w.shape[1])
        gx = (g2 @ w.data.T).reshape(x.shape)
        gw = x2.T @ g2
        gb = g2.sum(axis=0) if b is not None else None
        return gx, gw, gb

    parents = (x, w, b if b is not None else Tensor(0.0))
    return _make(out2.reshape(out_shape), parents, bw, "linear")


# ---------------------------------------------------------------------------
# shape manipulation


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.ascontiguousarray(x.data.transpose(axes)), (x,), lambda g: (g.transpose(inv),), "transpose")


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        out = x.data.reshape(tuple(shape))
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot view {x.shape} as {tuple(shape)}") from exc
    return _make(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def expand(x: Tensor, shape: Sequence[int]) -> Tensor:
    """Explicitly repeat size-1 axes of ``x`` up to ``shape`` (same ndim)."""
    shape = tuple(shape)
    if len(shape) != x.ndim or any(s != t and s != 1 for s, t in zip(x.shape, shape)):
        raise ShapeError(f"expand: cannot expand {x.shape} to {shape}")
    axes = tuple(i for i, (s, t) in enumerate(zip(x.shape, shape)) if s == 1 and t != 1)
    out = np.broadcast_to(x.data, shape).copy()
    return _make(out, (x,), lambda g: (g.sum(axis=axes, keepdims=True),), "expand")


def take(x: Tensor, indices, axis: int = 0) -> Tensor:
    """Gather along ``axis``; repeated indices accumulate in the backward pass."""
    idx = np.asarray(indices, dtype=np.intp)
    out = np.take(x.data, idx, axis=axis)

    def bw(g):
        gx = np.zeros_like(x.data)
        ax = axis % x.ndim
        gm = np.moveaxis(gx, ax, 0)
        np.add.at(gm, idx.reshape(-1), np.moveaxis(g, list(range(ax, ax + idx.ndim)), list(range(idx.ndim))).reshape((-1,) + gm.shape[1:]))
        return (gx,)

    return _make(out, (x,), bw, "take")


def slice_axis(x: Tensor, start: int, stop: int, axis: int = -1) -> Tensor:
    ax = axis % x.ndim
    sl = [slice(None)] * x.ndim
    sl[ax] = slice(start, stop)
    sl = tuple(sl)
    out = x.data[sl].copy()

    def bw(g):
        gx = np.zeros_like(x.data)
        gx[sl] = g
        return (gx,)

    return _make(out, (x,), bw, "slice")


def split(x: Tensor, sizes: Sequence[int], axis: int = -1) -> list[Tensor]:
    if builtins.sum(sizes) != x.shape[axis]:
        raise ShapeError(f"split: sizes {list(sizes)} do not cover axis of length {x.shape[axis]}")
    out, start = [], 0
    for s in sizes:
        out.append(slice_axis(x, start, start + s, axis))
        start += s
    return out


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    xs = list(xs)
    ax = axis % xs[0].ndim
    try:
        out = np.concatenate([t.data for t in xs], axis=ax)
    except ValueError as exc:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in xs]}") from exc
    bounds = np.cumsum([0] + [t.shape[ax] for t in xs])

    def bw(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax) for i in range(len(xs)))

    return _make(out, xs, bw, "concat")


def stack(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = list(xs)
    shapes = {t.shape for t in xs}
    if len(shapes) != 1:
        raise ShapeError(f"stack: shapes differ {sorted(shapes)}")
    out = np.stack([t.data for t in xs], axis=axis)
    ax = axis % out.ndim

    def bw(g):
        return tuple(np.take(g, i, axis=ax) for i in range(len(xs)))

    return _make(out, xs, bw, "stack")


def roll(x: Tensor, shifts: Sequence[int], axes: Sequence[int]) -> Tensor:
    shifts, axes = tuple(shifts), tuple(axes)
    out = np.roll(x.data, shifts, axes)
    return _make(out, (x,), lambda g: (np.roll(g, tuple(-s for s in shifts), axes),), "roll")


def flip(x: Tensor, axis: int) -> Tensor:
    return _make(np.flip(x.data, axis).copy(), (x,), lambda g: (np.flip(g, axis).copy(),), "flip")


def pad(x: Tensor, widths: Sequence[tuple[int, int]], mode: str = "constant") -> Tensor:
    """Pad with zeros (``constant``) or by replicating the border (``edge``)."""
    widths = tuple((int(lo), int(hi)) for lo, hi in widths)
    if len(widths) != x.ndim or any(lo < 0 or hi < 0 for lo, hi in widths):
        raise ShapeError(f"pad: widths {widths} invalid for shape {x.shape}")
    if mode not in ("constant", "edge"):
        raise ValueError(f"unsupported pad mode {mode!r}")
    out = np.pad(x.data, widths, mode=mode)

    def bw(g):
        for ax, (lo, hi) in enumerate(widths):
            if lo == 0 and hi == 0:
                continue
            n = x.shape[ax]
            core = np.take(g, np.arange(lo, lo + n), axis=ax)
            if mode == "edge":
                core = core.copy()
                first = [slice(None)] * g.ndim
                last = [slice(None)] * g.ndim
                first[ax] = slice(0, 1)
                last[ax] = slice(n - 1, n)
                if lo:
                    core[tuple(first)] += np.take(g, np.arange(0, lo), axis=ax).sum(axis=ax, keepdims=True)
                if hi:
                    core[tuple(last)] += np.take(g, np.arange(lo + n, lo + n + hi), axis=ax).sum(axis=ax, keepdims=True)
            g = core
        return (g,)

    return _make(out, (x,), bw, "pad")



# ---------------------------------------------------------------------------
# convolutions (NCHW)


def _out_size(n: int, k: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - k) // stride + 1


def _im2col(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """(B, C, Hp, Wp) -> (B*ho*wo, C*k*k)."""
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, : stride * (ho - 1) + 1 : stride, : stride * (wo - 1) + 1 : stride]
    b, c = xp.shape[:2]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(b * ho * wo, c * k * k)


def _col2im(cols: np.ndarray, shape: tuple[int, int, int, int], k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """Adjoint of :func:`_im2col`: scatter-add (B*ho*wo, C*k*k) into (B, C, Hp, Wp)."""
    b, c, hp, wp = shape
    cols = cols.reshape(b, ho, wo, c, k, k)
    out = np.zeros(shape)
    for i in range(k):
        for j in range(k):
            out[:, :, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride] += cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    return out


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation. ``x``: (B, C_in, H, W); ``w``: (C_out, C_in, k, k)."""
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1] or w.shape[2] != w.shape[3]:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with weight {w.shape}")
    bsz, cin, h, wd = x.shape
    cout, _, k, _ = w.shape
    ho, wo = _out_size(h, k, stride, padding), _out_size(wd, k, stride, padding)
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: non-positive output size {ho}x{wo} for input {h}x{wd}, k={k}, stride={stride}, pad={padding}")
    p = padding
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    cols = _im2col(xp, k, stride, ho, wo)
    wm = w.data.reshape(cout, -1)
    out = cols @ wm.T
    if b is not None:
        out = out + b.data
    _tally("conv2d", cols.shape[0] * cols.shape[1] * cout)
    out = out.reshape(bsz, ho, wo, cout).transpose(0, 3, 1, 2)

    def bw(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, cout)
        gw = (g2.T @ cols).reshape(w.shape)
        gb = g2.sum(axis=0) if b is not None else None
        gxp = _col2im(g2 @ wm, xp.shape, k, stride, ho, wo)
        gx = gxp[:, :, p : p + h, p : p + wd] if p else gxp
        return gx, gw, gb

    parents = (x, w, b if b is not None else Tensor(0.0))
    return _make(np.ascontiguousarray(out), parents, bw, "conv2d")


def transposed_conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Adjoint of :func:`conv2d` w.r.t. its input. ``w``: (C_in, C_out, k, k).

    Output size is ``(H - 1) * stride - 2 * padding + k``.
    """
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[0] or w.shape[2] != w.shape[3]:
        raise ShapeError(f"transposed_conv2d: input {x.shape} incompatible with weight {w.shape}")
    bsz, cin, h, wd = x.shape
    _, cout, k, _ = w.shape
    ho, wo = (h - 1) * stride - 2 * padding + k, (wd - 1) * stride - 2 * padding + k
    if ho < 1 or wo < 1:
        raise ShapeError(f"transposed_conv2d: non-positive output size {ho}x{wo}")
    p = padding
    hp, wp = ho + 2 * p, wo + 2 * p
    x2 = x.data.transpose(0, 2, 3, 1).reshape(-1, cin)
    wm = w.data.reshape(cin, cout * k * k)
    cols = x2 @ wm
    _tally("transposed_conv2d", x2.shape[0] * cin * cout * k * k)
    outp = _col2im(cols, (bsz, cout, hp, wp), k, stride, h, wd)
    out = outp[:, :, p : p + ho, p : p + wo] if p else outp
    if b is not None:
        out = out + b.data[None, :, None, None]

    def bw(g):
        gp = np.pad(g, ((0, 0), (0, 0), (p, p), (p, p))) if p else g
        gcols = _im2col(gp, k, stride, h, wd)
        gx = (gcols @ wm.T).reshape(bsz, h, wd, cin).transpose(0, 3, 1, 2)
        gw = (x2.T @ gcols).reshape(w.shape)
        gb = g.sum(axis=(0, 2, 3)) if b is not None else None
        return np.ascontiguousarray(gx), gw, gb

    parents = (x, w, b if b is not None else Tensor(0.0))
    return _make(np.ascontiguousarray(out), parents, bw, "transposed_conv2d")


def depthwise_conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, padding: int = 0) -> Tensor:
    """Per-channel stride-1 cross-correlation. ``w``: (C, k, k)."""
    if x.ndim != 4 or w.ndim != 3 or x.shape[1] != w.shape[0] or w.shape[1] != w.shape[2]:
        raise ShapeError(f"depthwise_conv2d: input {x.shape} incompatible with weight {w.shape}")
    bsz, c, h, wd = x.shape
    k = w.shape[1]
    ho, wo = _out_size(h, k, 1, padding), _out_size(wd, k, 1, padding)
    if ho < 1 or wo < 1:
        raise ShapeError(f"depthwise_conv2d: kernel {k} exceeds padded input {h}x{wd}")
    p = padding
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    out = np.zeros((bsz, c, ho, wo))
    for i in range(k):
        for j in range(k):
            out += xp[:, :, i : i + ho, j : j + wo] * w.data[None, :, i, j, None, None]
    if b is not None:
        out += b.data[None, :, None, None]
    _tally("depthwise_conv2d", bsz * c * ho * wo * k * k)

    def bw(g):
        gxp = np.zeros_like(xp)
        gw = np.zeros_like(w.data)
        for i in range(k):
            for j in range(k):
                gxp[:, :, i : i + ho, j : j + wo] += g * w.data[None, :, i, j, None, None]
                gw[:, i, j] = (g * xp[:, :, i : i + ho, j : j + wo]).sum(axis=(0, 2, 3))
        gx = gxp[:, :, p : p + h, p : p + wd] if p else gxp
        gb = g.sum(axis=(0, 2, 3)) if b is not None else None
        return gx, gw, gb

    parents = (x, w, b if b is not None else Tensor(0.0))
    return _make(out, parents, bw, "depthwise_conv2d")


# ---------------------------------------------------------------------------
# recurrences


def linear_scan(a: Tensor, u: Tensor, axis: int, reverse: bool = False) -> Tensor:
    """First-order recurrence ``h_t = a_t * h_{t-1} + u_t`` along ``axis`` with ``h_{-1} = 0``.

    With ``reverse=True`` the recurrence runs from the last index to the first.
    """
    if a.shape != u.shape:
        raise ShapeError(f"linear_scan: gate {a.shape} and input {u.shape} differ")
    ax = axis % a.ndim
    av = np.moveaxis(a.data, ax, 0)
    uv = np.moveaxis(u.data, ax, 0)
    if reverse:
        av, uv = av[::-1], uv[::-1]
    n = av.shape[0]
    h = np.empty_like(uv)
    h[0] = uv[0]
    for t in range(1, n):
        h[t] = av[t] * h[t - 1] + uv[t]
    _tally("linear_scan", h.size)
    out = h[::-1] if reverse else h
    out = np.ascontiguousarray(np.moveaxis(out, 0, ax))

    def bw(g):
        gv = np.moveaxis(g, ax, 0)
        if reverse:
            gv = gv[::-1]
        gh = np.empty_like(gv)
        gh[n - 1] = gv[n - 1]
        for t in range(n - 2, -1, -1):
            gh[t] = gv[t] + av[t + 1] * gh[t + 1]
        ga = np.zeros_like(gh)
        ga[1:] = gh[1:] * h[:-1]
        if reverse:
            gh, ga = gh[::-1], ga[::-1]
        return np.ascontiguousarray(np.moveaxis(ga, 0, ax)), np.ascontiguousarray(np.moveaxis(gh, 0, ax))

    return _make(out, (a, u), bw, "linear_scan")
