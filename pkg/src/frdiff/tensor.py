"""Dense tensors with tape-based reverse-mode differentiation.

Values are numpy arrays. A :class:`Tensor` only participates in
differentiation when it carries a ``grad_id`` issued by the active
:class:`Tape`; everything else is a plain immutable value. Element-wise
binary ops accept identical shapes or a size-1 operand (scalar broadcast).
Any other broadcast has to go through :func:`broadcast_to`, which records
its own reduction rule.
"""
from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

__all__ = [
    "DimensionError",
    "ContractError",
    "Tensor",
    "Tape",
    "as_tensor",
    "active_tape",
    "backward",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "exp",
    "tanh",
    "sigmoid",
    "relu",
    "square",
    "sqrt",
    "tsum",
    "tmean",
    "reshape",
    "transpose",
    "swap_last",
    "broadcast_to",
    "concat",
    "take",
    "stopgrad",
    "round_ste",
    "softmax",
    "normalize",
    "conv2d",
]


class DimensionError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class ContractError(RuntimeError):
    """A caller broke an operation's precondition."""


VJP = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


@dataclass
class _Node:
    inputs: tuple[Optional[int], ...]
    vjp: Optional[VJP]
    shape: tuple[int, ...]


@dataclass
class Tape:
    """Append-only record of differentiable operations.

    Use as a context manager; tensors created by :meth:`watch` inside the
    block become leaves and every op touching them is recorded in order.
    """

    nodes: list[_Node] = field(default_factory=list)

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if not stack or stack[-1] is not self:
            raise ContractError("tape stack corrupted")
        stack.pop()

    def watch(self, value, name: str | None = None) -> "Tensor":
        data = value.data if isinstance(value, Tensor) else np.asarray(value)
        gid = len(self.nodes)
        self.nodes.append(_Node((), None, data.shape))
        return Tensor(data, grad_id=gid, name=name)

    def record(self, out: np.ndarray, inputs: Sequence["Tensor"], vjp: VJP) -> "Tensor":
        gid = len(self.nodes)
        self.nodes.append(_Node(tuple(t.grad_id for t in inputs), vjp, out.shape))
        return Tensor(out, grad_id=gid)

    def backward(self, loss: "Tensor") -> dict[int, np.ndarray]:
        """Gradients of a scalar ``loss`` for every leaf it depends on."""
        if loss.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss.grad_id is None:
            raise ContractError("loss was not produced under this tape")
        grads: dict[int, np.ndarray] = {loss.grad_id: np.ones(loss.shape, dtype=loss.data.dtype)}
        leaves: dict[int, np.ndarray] = {}
        for gid in range(loss.grad_id, -1, -1):
            g = grads.pop(gid, None)
            if g is None:
                continue
            node = self.nodes[gid]
            if node.vjp is None:
                leaves[gid] = g
                continue
            for src, gi in zip(node.inputs, node.vjp(g)):
                if src is None or gi is None:
                    continue
                if src in grads:
                    grads[src] = grads[src] + gi
                else:
                    grads[src] = gi
        return leaves

    def gradient(self, loss: "Tensor", wrt: Sequence["Tensor"]) -> list[np.ndarray]:
        leaves = self.backward(loss)
        out = []
        for t in wrt:
            g = leaves.get(t.grad_id) if t.grad_id is not None else None
            out.append(np.zeros_like(t.data) if g is None else g)
        return out


_local = threading.local()


def _tape_stack() -> list[Tape]:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape() -> Tape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


def backward(loss: "Tensor") -> dict[int, np.ndarray]:
    tape = active_tape()
    if tape is None:
        raise ContractError("backward called without an active tape")
    return tape.backward(loss)


class Tensor:
    __slots__ = ("data", "grad_id", "name")
    __array_priority__ = 100.0

    def __init__(self, data, grad_id: int | None = None, name: str | None = None):
        self.data = data if isinstance(data, np.ndarray) else np.asarray(data, dtype=np.float64)
        self.grad_id = grad_id
        self.name = name

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
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        tag = "" if self.grad_id is None else f", grad_id={self.grad_id}"
        return f"Tensor(shape={self.shape}{tag})"

    def __len__(self) -> int:
        return self.shape[0]

    __add__ = lambda self, o: add(self, o)
    __radd__ = lambda self, o: add(o, self)
    __sub__ = lambda self, o: sub(self, o)
    __rsub__ = lambda self, o: sub(o, self)
    __mul__ = lambda self, o: mul(self, o)
    __rmul__ = lambda self, o: mul(o, self)
    __truediv__ = lambda self, o: div(self, o)
    __neg__ = lambda self: neg(self)
    __matmul__ = lambda self, o: matmul(self, o)

    def __getitem__(self, index) -> "Tensor":
        return take(self, index)

    def sum(self, axis=None) -> "Tensor":
        return tsum(self, axis)

    def mean(self, axis=None) -> "Tensor":
        return tmean(self, axis)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def as_tensor(value, dtype=None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype or np.float64))


def _emit(out: np.ndarray, inputs: Sequence[Tensor], vjp: VJP) -> Tensor:
    tape = active_tape()
    if tape is None or all(t.grad_id is None for t in inputs):
        return Tensor(out)
    return tape.record(out, inputs, vjp)


def _coerce_pair(a, b) -> tuple[Tensor, Tensor]:
    if not isinstance(a, Tensor):
        ref = b.data.dtype
        a = Tensor(np.asarray(a, dtype=ref))
    if not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.data.dtype))
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise DimensionError(f"shape mismatch {a.shape} vs {b.shape} (only scalar broadcast allowed)")
    return a, b


def _fit(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.asarray(g.sum()).reshape(shape)


def add(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    return _emit(a.data + b.data, (a, b), lambda g: (_fit(g, a.shape), _fit(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    return _emit(a.data - b.data, (a, b), lambda g: (_fit(g, a.shape), _fit(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    ad, bd = a.data, b.data
    return _emit(ad * bd, (a, b), lambda g: (_fit(g * bd, a.shape), _fit(g * ad, b.shape)))


def div(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    ad, bd = a.data, b.data
    out = ad / bd
    return _emit(out, (a, b), lambda g: (_fit(g / bd, a.shape), _fit(-g * out / bd, b.shape)))


def neg(a: Tensor) -> Tensor:
    return _emit(-a.data, (a,), lambda g: (-g,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b``. ``b`` may be 2-D and shared across ``a``'s leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul batch extents differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    out = ad @ bd

    def vjp(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        if bd.ndim == 2:
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return _emit(out, (a, b), vjp)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _emit(out, (a,), lambda g: (g * out,))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _emit(out, (a,), lambda g: (g * (1.0 - out * out),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid(a.data)
    return _emit(out, (a,), lambda g: (g * out * (1.0 - out),))


def relu(a: Tensor) -> Tensor:
    # subgradient 0 at the kink
    mask = a.data > 0
    return _emit(a.data * mask, (a,), lambda g: (g * mask,))


def square(a: Tensor) -> Tensor:
    ad = a.data
    return _emit(ad * ad, (a,), lambda g: (2.0 * g * ad,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _emit(out, (a,), lambda g: (0.5 * g / out,))


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tsum(a: Tensor, axis=None) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes)
    kept = tuple(1 if i in axes else n for i, n in enumerate(a.shape))
    return _emit(out, (a,), lambda g: (np.broadcast_to(g.reshape(kept), a.shape).copy(),))


def tmean(a: Tensor, axis=None) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return tsum(a, axes) * (1.0 / count)


def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    return _emit(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),))


def transpose(a: Tensor, axes=None) -> Tensor:
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return _emit(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def swap_last(a: Tensor) -> Tensor:
    return _emit(np.swapaxes(a.data, -1, -2), (a,), lambda g: (np.swapaxes(g, -1, -2),))


def broadcast_to(a: Tensor, shape) -> Tensor:
    """Explicit numpy-style broadcast; the gradient sums over expanded axes."""
    shape = tuple(shape)
    src = a.shape
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError as exc:
        raise DimensionError(f"cannot broadcast {src} to {shape}") from exc
    lead = len(shape) - len(src)

    def vjp(g):
        if lead:
            g = g.sum(axis=tuple(range(lead)))
        axes = tuple(i for i, n in enumerate(src) if n == 1 and g.shape[i] != 1)
        if axes:
            g = g.sum(axis=axes, keepdims=True)
        return (g,)

    return _emit(out, (a,), vjp)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _emit(out, tensors, lambda g: tuple(np.split(g, bounds, axis=axis)))


def take(a: Tensor, index) -> Tensor:
    """Basic (slice/int) indexing."""
    out = a.data[index]
    src, dtype = a.shape, a.data.dtype

    def vjp(g):
        full = np.zeros(src, dtype=dtype)
        full[index] = g
        return (full,)

    return _emit(np.array(out), (a,), vjp)


def stopgrad(a: Tensor) -> Tensor:
    return Tensor(a.data)


def round_ste(alpha: Tensor) -> Tensor:
    """Hard 0/1 rounding with an identity backward pass.

    Forward is 1 where ``alpha >= 0.5`` else 0, i.e. the value of
    ``round(alpha) + alpha - stopgrad(alpha)``.
    """
    out = (alpha.data >= 0.5).astype(alpha.data.dtype)
    return _emit(out, (alpha,), lambda g: (g,))


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _emit(out, (a,), vjp)


def normalize(a: Tensor, axes, eps: float = 1e-5) -> Tensor:
    """Zero-mean, unit-variance over ``axes`` (biased variance)."""
    axes = _norm_axes(axes, a.ndim)
    x = a.data
    mu = x.mean(axis=axes, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = xc * inv

    def vjp(g):
        gm = g.mean(axis=axes, keepdims=True)
        gy = (g * y).mean(axis=axes, keepdims=True)
        return (inv * (g - gm - y * gy),)

    return _emit(y, (a,), vjp)


def _correlate(x: np.ndarray, k: np.ndarray) -> np.ndarray:
    kh, kw = k.shape[-2:]
    p = kh // 2
    if p:
        x = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    cols = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    out = np.tensordot(cols, k, axes=([1, 4, 5], [1, 2, 3]))
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))  # layout-independent downstream reductions


def conv2d(x: Tensor, k: Tensor) -> Tensor:
    """Same-padded stride-1 cross-correlation with a 1x1 or 3x3 kernel.

    ``x`` is ``c_in x h x w`` or batched ``b x c_in x h x w``; ``k`` is
    ``c_out x c_in x kh x kw``.
    """
    batched = x.ndim == 4
    if x.ndim not in (3, 4) or k.ndim != 4:
        raise DimensionError(f"conv2d expects (b,)c,h,w input and 4-d kernel, got {x.shape}, {k.shape}")
    if k.shape[2:] not in ((1, 1), (3, 3)):
        raise DimensionError(f"only 1x1 and 3x3 kernels are supported, got {k.shape[2:]}")
    xd = x.data if batched else x.data[None]
    if xd.shape[1] != k.shape[1]:
        raise DimensionError(f"conv2d channel mismatch: input {xd.shape[1]}, kernel {k.shape[1]}")
    kd = k.data
    out = _correlate(xd, kd)
    p = kd.shape[-1] // 2

    def vjp(g):
        gb = g if batched else g[None]
        flipped = np.ascontiguousarray(kd[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
        gx = _correlate(gb, flipped)
        xp = np.pad(xd, ((0, 0), (0, 0), (p, p), (p, p))) if p else xd
        cols = np.lib.stride_tricks.sliding_window_view(xp, kd.shape[-2:], axis=(2, 3))
        gk = np.tensordot(gb, cols, axes=([0, 2, 3], [0, 2, 3]))
        return (gx if batched else gx[0]), gk

    return _emit(out if batched else out[0], (x, k), vjp)
