"""Reverse-mode automatic differentiation over dense float64 arrays.

Every differentiable operation is a plain function that computes its forward
value with numpy and records a :class:`Node` on the output tensor.  Backward
rules live in a registry keyed by operation name, so a rule can be inspected
or swapped out (the gradient-oracle tests rely on this).

Only scalar-with-tensor broadcasting is supported.  Row/column alignment is
spelled out with :func:`tile_rows` and :func:`tile_cols`.
"""

from __future__ import annotations

import contextlib
import struct
import threading
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64

BackwardRule = Callable[["Node", np.ndarray], Sequence["np.ndarray | None"]]
_BACKWARD: dict[str, BackwardRule] = {}

_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (for frozen forward passes)."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


def register(name: str):
    """Register ``fn(node, grad_out) -> grads per parent`` as the backward rule for ``name``."""

    def deco(fn: BackwardRule) -> BackwardRule:
        _BACKWARD[name] = fn
        return fn

    return deco


def backward_rule(name: str) -> BackwardRule:
    return _BACKWARD[name]


def registered_ops() -> list[str]:
    return sorted(_BACKWARD)


@dataclass
class Node:
    op: str
    parents: tuple["Tensor", ...]
    saved: dict[str, Any] = field(default_factory=dict)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node", "name")

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        arr = np.array(data, dtype=DTYPE)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.node: Node | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    __add__ = lambda self, other: add(self, other)  # noqa: E731
    __radd__ = lambda self, other: add(other, self)  # noqa: E731
    __sub__ = lambda self, other: sub(self, other)  # noqa: E731
    __rsub__ = lambda self, other: sub(other, self)  # noqa: E731
    __mul__ = lambda self, other: mul(self, other)  # noqa: E731
    __rmul__ = lambda self, other: mul(other, self)  # noqa: E731
    __matmul__ = lambda self, other: matmul(self, other)  # noqa: E731
    __neg__ = lambda self: scale(self, -1.0)  # noqa: E731


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name: str = "") -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def create(shape: Sequence[int], init: str = "zeros", *, value: float = 0.0,
           low: float = 0.0, high: float = 1.0, seed: int | None = None,
           values: Iterable[float] | None = None, requires_grad: bool = False) -> Tensor:
    """Build a tensor of ``shape``.

    ``init`` is one of ``"zeros"``, ``"constant"`` (uses ``value``),
    ``"uniform"`` (uses ``low``, ``high`` and ``seed``) or ``"explicit"``
    (uses ``values``, flattened row-major).
    """
    shape = tuple(int(s) for s in shape)
    if not shape or any(s < 1 for s in shape):
        raise ValueError(f"shape must be non-empty with positive dims, got {shape}")
    n = int(np.prod(shape))
    if init == "zeros":
        data = np.zeros(shape)
    elif init == "constant":
        data = np.full(shape, float(value))
    elif init == "uniform":
        if seed is None:
            raise ValueError("uniform init needs a seed")
        data = np.random.default_rng(seed).uniform(low, high, size=shape)
    elif init == "explicit":
        flat = np.asarray(list(values if values is not None else []), dtype=DTYPE)
        if flat.size != n:
            raise ValueError(f"{flat.size} values do not fill shape {shape}")
        data = flat.reshape(shape)
    else:
        raise ValueError(f"unknown init {init!r}")
    return Tensor(data, requires_grad=requires_grad)


def _make(data: np.ndarray, op: str, parents: tuple[Tensor, ...], **saved) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = ""
    out.requires_grad = grad_enabled() and any(p.requires_grad for p in parents)
    out.node = Node(op, parents, saved) if out.requires_grad else None
    return out


# ----------------------------------------------------------------------------
# elementwise


def _align(a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape} (only scalar broadcast is allowed)")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.full(shape, g.sum())


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _align(a, b)
    return _make(a.data + b.data, "add", (a, b))


@register("add")
def _add_bw(node, g):
    a, b = node.parents
    return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _align(a, b)
    return _make(a.data - b.data, "sub", (a, b))


@register("sub")
def _sub_bw(node, g):
    a, b = node.parents
    return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _align(a, b)
    return _make(a.data * b.data, "mul", (a, b))


@register("mul")
def _mul_bw(node, g):
    a, b = node.parents
    return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)


def scale(x: Tensor, c: float) -> Tensor:
    return _make(x.data * float(c), "scale", (x,), c=float(c))


@register("scale")
def _scale_bw(node, g):
    return (g * node.saved["c"],)


def _sigmoid(v: np.ndarray) -> np.ndarray:
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)
    return out


def sigmoid(x: Tensor) -> Tensor:
    return _make(_sigmoid(x.data), "sigmoid", (x,))


@register("sigmoid")
def _sigmoid_bw(node, g):
    s = _sigmoid(node.parents[0].data)
    return (g * s * (1.0 - s),)


def tanh(x: Tensor) -> Tensor:
    return _make(np.tanh(x.data), "tanh", (x,))


@register("tanh")
def _tanh_bw(node, g):
    t = np.tanh(node.parents[0].data)
    return (g * (1.0 - t * t),)


def relu(x: Tensor) -> Tensor:
    return _make(np.maximum(x.data, 0.0), "relu", (x,))


@register("relu")
def _relu_bw(node, g):
    return (g * (node.parents[0].data > 0),)


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0):
        raise ValueError("log needs strictly positive inputs")
    return _make(np.log(x.data), "log", (x,))


@register("log")
def _log_bw(node, g):
    return (g / node.parents[0].data,)


def exp(x: Tensor) -> Tensor:
    return _make(np.exp(x.data), "exp", (x,))


@register("exp")
def _exp_bw(node, g):
    return (g * np.exp(node.parents[0].data),)


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp to ``[lo, hi]``; gradient passes only where the input is inside."""
    return _make(np.clip(x.data, lo, hi), "clip", (x,), lo=lo, hi=hi)


@register("clip")
def _clip_bw(node, g):
    v = node.parents[0].data
    return (g * ((v >= node.saved["lo"]) & (v <= node.saved["hi"])),)


# ----------------------------------------------------------------------------
# shape and linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul dimension mismatch {a.shape} @ {b.shape}")
    return _make(a.data @ b.data, "matmul", (a, b))


@register("matmul")
def _matmul_bw(node, g):
    a, b = node.parents
    return g @ b.data.T, a.data.T @ g


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    return _make(x.data.reshape(tuple(shape)), "reshape", (x,))


@register("reshape")
def _reshape_bw(node, g):
    return (g.reshape(node.parents[0].shape),)


def tile_rows(v: Tensor, n: int) -> Tensor:
    """Stack vector ``v`` (length D) into an ``n x D`` matrix."""
    if v.data.ndim != 1:
        raise ValueError("tile_rows expects a vector")
    return _make(np.broadcast_to(v.data, (n, v.shape[0])).copy(), "tile_rows", (v,))


@register("tile_rows")
def _tile_rows_bw(node, g):
    return (g.sum(axis=0),)


def tile_cols(v: Tensor, d: int) -> Tensor:
    """Spread vector ``v`` (length N) into an ``N x d`` matrix, ``out[i, j] = v[i]``."""
    if v.data.ndim != 1:
        raise ValueError("tile_cols expects a vector")
    return _make(np.repeat(v.data[:, None], d, axis=1), "tile_cols", (v,))


@register("tile_cols")
def _tile_cols_bw(node, g):
    return (g.sum(axis=1),)


def _check_axis(x: Tensor, axis):
    if axis is not None and not -x.data.ndim <= axis < x.data.ndim:
        raise ValueError(f"axis {axis} out of range for shape {x.shape}")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    _check_axis(x, axis)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    return _make(y, "softmax", (x,), y=y, axis=axis)


@register("softmax")
def _softmax_bw(node, g):
    y, axis = node.saved["y"], node.saved["axis"]
    return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)


def sum(x: Tensor, axis: int | None = None) -> Tensor:  # noqa: A001
    _check_axis(x, axis)
    return _make(np.asarray(x.data.sum(axis=axis)), "sum", (x,), axis=axis)


@register("sum")
def _sum_bw(node, g):
    x, axis = node.parents[0], node.saved["axis"]
    if axis is not None:
        g = np.expand_dims(g, axis)
    return (np.broadcast_to(g, x.shape).copy(),)


def mean(x: Tensor, axis: int | None = None) -> Tensor:
    _check_axis(x, axis)
    n = x.size if axis is None else x.shape[axis]
    return _make(np.asarray(x.data.mean(axis=axis)), "mean", (x,), axis=axis, n=n)


@register("mean")
def _mean_bw(node, g):
    x, axis = node.parents[0], node.saved["axis"]
    if axis is not None:
        g = np.expand_dims(g, axis)
    return (np.broadcast_to(g / node.saved["n"], x.shape).copy(),)


def max(x: Tensor, axis: int | None = None) -> Tensor:  # noqa: A001
    """Maximum; the gradient goes to the first (lowest-index) argmax."""
    _check_axis(x, axis)
    if axis is None:
        idx = int(np.argmax(x.data))
        return _make(np.asarray(x.data.reshape(-1)[idx]), "max", (x,), axis=None, idx=idx)
    idx = np.argmax(x.data, axis=axis)
    val = np.take_along_axis(x.data, np.expand_dims(idx, axis), axis=axis).squeeze(axis)
    return _make(val, "max", (x,), axis=axis, idx=idx)


@register("max")
def _max_bw(node, g):
    x, axis, idx = node.parents[0], node.saved["axis"], node.saved["idx"]
    out = np.zeros(x.shape)
    if axis is None:
        out.reshape(-1)[idx] = g
    else:
        np.put_along_axis(out, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis=axis)
    return (out,)


def cross_entropy(logits: Tensor, label: int) -> Tensor:
    """``-log softmax(logits)[label]`` for a single logit vector, via log-sum-exp."""
    if logits.data.ndim != 1 or logits.shape[0] < 2:
        raise ValueError(f"cross_entropy expects a logit vector with C >= 2, got {logits.shape}")
    label = int(label)
    if not 0 <= label < logits.shape[0]:
        raise ValueError(f"label {label} out of range for {logits.shape[0]} classes")
    z = logits.data
    m = z.max()
    lse = m + np.log(np.exp(z - m).sum())
    return _make(np.asarray(lse - z[label]), "cross_entropy", (logits,), label=label, lse=lse)


@register("cross_entropy")
def _ce_bw(node, g):
    z = node.parents[0].data
    p = np.exp(z - node.saved["lse"])
    p[node.saved["label"]] -= 1.0
    return (g * p,)


# ----------------------------------------------------------------------------
# backward pass


def _topo(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        if t.node is not None:
            for p in t.node.parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf that requires grad.

    Intermediate gradients are kept local to the call, so calling twice on the
    same graph gives exactly twice the leaf gradients.
    """
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape)}
    for t in reversed(_topo(loss)):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        if t.node is None:
            t.grad = g.copy() if t.grad is None else t.grad + g
            continue
        pgrads = _BACKWARD[t.node.op](t.node, g)
        for p, pg in zip(t.node.parents, pgrads):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            grads[key] = pg if key not in grads else grads[key] + pg


def finite_diff_check(f: Callable[..., Tensor], inputs: Sequence[Tensor], step: float = 1e-5) -> float:
    """Max relative error between autodiff and central-difference gradients.

    ``f(*inputs)`` must return a scalar tensor.  Relative error per element is
    ``|a - b| / max(|a|, |b|, 1e-8)``.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    backward(f(*inputs))
    worst = 0.0
    with no_grad():
        for t in inputs:
            analytic = t.grad if t.grad is not None else np.zeros(t.shape)
            flat = t.data.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + step
                fp = f(*inputs).item()
                flat[i] = orig - step
                fm = f(*inputs).item()
                flat[i] = orig
                numeric = (fp - fm) / (2 * step)
                a = analytic.reshape(-1)[i]
                err = abs(a - numeric) / np.max([abs(a), abs(numeric), 1e-8])
                worst = err if err > worst else worst
    return float(worst)


# ----------------------------------------------------------------------------
# serialization: rank (u64), dims (u64 each), row-major little-endian f64


def tensor_to_bytes(x: Tensor | np.ndarray) -> bytes:
    arr = np.ascontiguousarray(x.data if isinstance(x, Tensor) else x, dtype="<f8")
    head = struct.pack(f"<Q{arr.ndim}Q", arr.ndim, *arr.shape)
    return head + arr.tobytes()


def tensor_from_bytes(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Decode one tensor record at ``offset``; returns ``(array, next_offset)``."""
    (rank,) = struct.unpack_from("<Q", buf, offset)
    offset += 8
    dims = struct.unpack_from(f"<{rank}Q", buf, offset)
    offset += 8 * rank
    n = int(np.prod(dims)) if rank else 1
    end = offset + 8 * n
    if end > len(buf):
        raise ValueError("truncated tensor record")
    arr = np.frombuffer(buf[offset:end], dtype="<f8").astype(DTYPE).reshape(dims)
    return arr, end
