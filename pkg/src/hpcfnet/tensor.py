"""Dense tensors with a reverse-mode gradient tape.

Every differentiable operation builds its result with :func:`make_result`,
attaching the input tensors and a closure that maps the output gradient to
one gradient per input. :meth:`Tensor.backward` walks the tape in reverse
topological order and accumulates gradients additively into leaves.
"""
from __future__ import annotations

import zlib
from typing import Callable, Iterable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float64


class ShapeError(ValueError):
    """Raised when tensor extents are invalid or incompatible."""


def rng_stream(seed: int, name: str) -> np.random.Generator:
    """Counter-based (Philox) generator for one named stochastic site.

    Streams with different names are statistically independent; the same
    (seed, name) always yields the same sequence.
    """
    key = zlib.crc32(name.encode("utf-8"))
    ss = np.random.SeedSequence(int(seed), spawn_key=(key,))
    return np.random.Generator(np.random.Philox(ss))


class Tensor:
    """N-dimensional float array that can take part in autodiff.

    Layout for images and feature maps is (batch, channels, height, width).
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data: np.ndarray = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return self.data.item()

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # -- autodiff ---------------------------------------------------------
    def backward(self, grad: np.ndarray | None = None) -> None:
        """Populate ``.grad`` on every requires-grad ancestor of this scalar."""
        if grad is None:
            if self.size != 1:
                raise ShapeError(f"backward() needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if not node._parents:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- operator sugar ---------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        if isinstance(other, Tensor):
            return sub(other, self)
        return rsub_scalar(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scalar_mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scalar_mul(self, -1.0)

    def __getitem__(self, index):
        return take(self, index)

    def sum(self) -> "Tensor":
        return tensor_sum(self)


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(root, False)]
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
    return order


def make_result(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    """Wrap forward output ``data``; record the tape node if any input needs grad."""
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
        out.op = op
    return out


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else DEFAULT_DTYPE
    return Tensor(np.asarray(x, dtype=dtype))


def tensor_new(shape: Iterable[int], init="zeros", *, seed: int | None = None,
               stream: str = "init", dtype=DEFAULT_DTYPE, requires_grad: bool = False) -> Tensor:
    """Allocate a tensor.

    ``init`` is one of ``"zeros"``, ``"ones"``, ``("constant", v)`` or
    ``("uniform", a, b)``; the uniform fill draws from the named stream of
    ``seed`` and is bit-reproducible.
    """
    shape = tuple(int(s) for s in shape)
    if not shape or any(s < 1 for s in shape):
        raise ShapeError(f"invalid shape {shape}: every extent must be >= 1")
    if init == "zeros":
        data = np.zeros(shape, dtype=dtype)
    elif init == "ones":
        data = np.ones(shape, dtype=dtype)
    elif isinstance(init, tuple) and init[0] == "constant":
        data = np.full(shape, init[1], dtype=dtype)
    elif isinstance(init, tuple) and init[0] == "uniform":
        if seed is None:
            raise ValueError("uniform init needs a seed")
        data = rng_stream(seed, stream).uniform(init[1], init[2], size=shape).astype(dtype)
    else:
        raise ValueError(f"unknown init {init!r}")
    return Tensor(data, requires_grad=requires_grad)


# -- elementwise arithmetic ------------------------------------------------

def _check_broadcast(a: Tensor, b: Tensor) -> bool:
    """True when b is a channel-duplicated mask for a; raise if incompatible."""
    if a.shape == b.shape:
        return False
    if (a.ndim == 4 and b.ndim == 4 and b.shape[1] == 1
            and a.shape[0] == b.shape[0] and a.shape[2:] == b.shape[2:]):
        return True
    raise ShapeError(f"shape mismatch: {a.shape} vs {b.shape}")


def _reduce_channels(g: np.ndarray, channel_bcast: bool) -> np.ndarray:
    return g.sum(axis=1, keepdims=True) if channel_bcast else g


def add(a: Tensor, b) -> Tensor:
    b = as_tensor(b, like=a)
    if b.ndim == 0:
        return make_result(a.data + b.data, (a,), lambda g: (g,), "add_scalar")
    bc = _check_broadcast(a, b)
    return make_result(a.data + b.data, (a, b),
                       lambda g: (g, _reduce_channels(g, bc)), "add")


def sub(a: Tensor, b) -> Tensor:
    b = as_tensor(b, like=a)
    if b.ndim == 0:
        return make_result(a.data - b.data, (a,), lambda g: (g,), "sub_scalar")
    bc = _check_broadcast(a, b)
    return make_result(a.data - b.data, (a, b),
                       lambda g: (g, -_reduce_channels(g, bc)), "sub")


def rsub_scalar(a: Tensor, s: float) -> Tensor:
    """``s - a`` for a python scalar ``s``."""
    out = a.dtype.type(s) - a.data
    return make_result(out, (a,), lambda g: (-g,), "rsub_scalar")


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Element-wise product; ``b`` may be a single-channel mask over ``a``."""
    bc = _check_broadcast(a, b)
    ad, bd = a.data, b.data

    def backward(g):
        return g * bd, _reduce_channels(g * ad, bc)

    return make_result(ad * bd, (a, b), backward, "mul")


def scalar_mul(a: Tensor, s: float) -> Tensor:
    s = float(s)
    return make_result(a.data * s, (a,), lambda g: (g * s,), "scalar_mul")


def reciprocal_safe(a: Tensor, eps: float = 1e-12) -> Tensor:
    """1/x with the magnitude of x floored at ``eps`` (sign preserved)."""
    d = a.data
    sign = np.where(d < 0, -1.0, 1.0).astype(d.dtype)
    denom = np.maximum(np.abs(d), eps)
    out = sign / denom
    floored = np.abs(d) < eps

    def backward(g):
        return (np.where(floored, 0.0, -g / (denom * denom)).astype(d.dtype),)

    return make_result(out, (a,), backward, "reciprocal")


def elementwise(op: str, a: Tensor, b=None) -> Tensor:
    if op == "add":
        return add(a, b)
    if op == "sub":
        return sub(a, b)
    if op == "mul":
        return mul(a, as_tensor(b, like=a))
    if op == "scalar_mul":
        return scalar_mul(a, b)
    if op == "reciprocal":
        return reciprocal_safe(a) if b is None else reciprocal_safe(a, b)
    raise ValueError(f"unknown elementwise op {op!r}")


def tensor_sum(a: Tensor) -> Tensor:
    shape, dtype = a.shape, a.dtype
    return make_result(np.asarray(a.data.sum(), dtype=dtype), (a,),
                       lambda g: (np.broadcast_to(g, shape).astype(dtype),), "sum")


def take(a: Tensor, index) -> Tensor:
    """Basic (slice) indexing with scatter-back gradient."""
    shape, dtype = a.shape, a.dtype

    def backward(g):
        full = np.zeros(shape, dtype=dtype)
        full[index] = g
        return (full,)

    return make_result(a.data[index].copy(), (a,), backward, "take")


def concat(parts: Sequence[Tensor], axis: int) -> Tensor:
    """Concatenate along ``axis``; gradient is split at the same offsets."""
    parts = list(parts)
    if len(parts) == 1:
        return parts[0]
    ref = parts[0].shape
    for p in parts[1:]:
        if p.ndim != len(ref) or any(p.shape[i] != ref[i] for i in range(len(ref)) if i != axis):
            raise ShapeError(f"cannot concatenate {ref} with {p.shape} along axis {axis}")
    offsets = np.cumsum([0] + [p.shape[axis] for p in parts])

    def backward(g):
        out = []
        for i in range(len(parts)):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(offsets[i], offsets[i + 1])
            out.append(g[tuple(idx)])
        return out

    return make_result(np.concatenate([p.data for p in parts], axis=axis), parts, backward, "concat")
