"""Dense f64 tensors with a small reverse-mode autodiff graph.

Values are plain ``numpy.ndarray`` objects in float64, row-major. A :class:`Node`
wraps a value, a gradient buffer of the same shape, and the closure that pushes
an upstream gradient back to its parents. Only what the adapter, the toy
decoder and their losses need is here; broadcasting is limited to bias-style
``(1, n)`` / ``(m, 1)`` / scalar operands.
"""

from __future__ import annotations

import os
import struct
from typing import Callable, Iterable, Sequence

import numpy as np

Tensor = np.ndarray

LAYER_NORM_EPS = 1e-5
DEBUG = bool(os.environ.get("MOEAUDIO_DEBUG"))

_MAGIC = b"MOET"
_VERSION = 1


class DimensionError(ValueError):
    pass


class NumericError(FloatingPointError):
    pass


def as_tensor(x) -> Tensor:
    arr = np.ascontiguousarray(x, dtype=np.float64)
    if any(d < 1 for d in arr.shape):
        raise DimensionError(f"tensor extents must be positive, got shape {arr.shape}")
    return arr


class Node:
    """A value in the computation graph together with its accumulated gradient."""

    __slots__ = ("value", "grad", "parents", "requires_grad", "op", "_backward")

    def __init__(self, value, parents: Sequence["Node"] = (), backward=None,
                 requires_grad: bool = False, op: str = "leaf"):
        self.value = value if isinstance(value, np.ndarray) and value.dtype == np.float64 else as_tensor(value)
        self.grad = np.zeros_like(self.value)
        self.parents = tuple(parents)
        self.requires_grad = requires_grad
        self.op = op
        self._backward = backward
        if DEBUG and not np.all(np.isfinite(self.value)):
            raise NumericError(f"non-finite value produced by {op}")

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.value)

    def backward(self, seed: Tensor | None = None) -> None:
        """Accumulate d(self)/d(leaf) into every reachable node's ``grad``."""
        if seed is None:
            if self.value.size != 1:
                raise DimensionError(f"backward() without a seed needs a scalar, got shape {self.shape}")
            seed = np.ones_like(self.value)
        order = _topological_order(self)
        self.grad = self.grad + seed
        for node in reversed(order):
            if node._backward is None:
                continue
            grads = node._backward(node.grad)
            for parent, g in zip(node.parents, grads):
                if g is None or not parent.requires_grad:
                    continue
                parent.grad += g

    def item(self) -> float:
        return float(self.value.reshape(-1)[0])

    def __add__(self, other):
        return add(self, _lift(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        return mul(self, _lift(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, _lift(other))

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self) -> str:
        return f"Node(op={self.op}, shape={self.shape}, requires_grad={self.requires_grad})"


def _topological_order(root: Node) -> list[Node]:
    order: list[Node] = []
    seen: set[int] = set()
    stack: list[tuple[Node, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def constant(x) -> Node:
    return Node(as_tensor(x))


def parameter(x) -> Node:
    return Node(as_tensor(x), requires_grad=True)


def _lift(x) -> Node:
    return x if isinstance(x, Node) else constant(x)


def _make(value: Tensor, parents: Sequence[Node], backward: Callable, op: str) -> Node:
    if any(p.requires_grad for p in parents):
        return Node(value, parents, backward, requires_grad=True, op=op)
    return Node(value, op=op)


def _unbroadcast(g: Tensor, shape: tuple[int, ...]) -> Tensor:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_broadcast(a: Node, b: Node, op: str) -> None:
    if a.shape == b.shape or a.value.size == 1 or b.value.size == 1:
        return
    if a.value.ndim == b.value.ndim == 2:
        (m1, n1), (m2, n2) = a.shape, b.shape
        if (m1 == m2 and 1 in (n1, n2)) or (n1 == n2 and 1 in (m1, m2)):
            return
    if b.value.ndim == 1 and a.value.ndim == 2 and a.shape[1] == b.shape[0]:
        return
    raise DimensionError(f"{op}: cannot combine shapes {a.shape} and {b.shape}")


# -- elementwise ---------------------------------------------------------------

def add(a: Node, b: Node) -> Node:
    _check_broadcast(a, b, "add")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.value + b.value, (a, b), backward, "add")


def sub(a: Node, b: Node) -> Node:
    _check_broadcast(a, b, "sub")

    def backward(g):
        return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)

    return _make(a.value - b.value, (a, b), backward, "sub")


def mul(a: Node, b: Node) -> Node:
    _check_broadcast(a, b, "mul")

    def backward(g):
        return _unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)

    return _make(a.value * b.value, (a, b), backward, "mul")


def div(a: Node, b: Node) -> Node:
    _check_broadcast(a, b, "div")
    out = a.value / b.value

    def backward(g):
        return _unbroadcast(g / b.value, a.shape), _unbroadcast(-g * out / b.value, b.shape)

    return _make(out, (a, b), backward, "div")


def scale(a: Node, c: float) -> Node:
    return _make(a.value * c, (a,), lambda g: (g * c,), "scale")


def sigmoid(x: Node) -> Node:
    s = _sigmoid(x.value)
    return _make(s, (x,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def silu(x: Node) -> Node:
    s = _sigmoid(x.value)
    out = x.value * s

    def backward(g):
        return (g * (s + x.value * s * (1.0 - s)),)

    return _make(out, (x,), backward, "silu")


def _sigmoid(v: Tensor) -> Tensor:
    # split by sign so exp never overflows
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    e = np.exp(v[~pos])
    out[~pos] = e / (1.0 + e)
    return out


# -- linear algebra and reshaping -------------------------------------------

def matmul(a: Node, b: Node) -> Node:
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} do not agree")

    def backward(g):
        return g @ b.value.T, a.value.T @ g

    return _make(a.value @ b.value, (a, b), backward, "matmul")


def transpose(a: Node) -> Node:
    return _make(np.ascontiguousarray(a.value.T), (a,), lambda g: (g.T,), "transpose")


def total(a: Node) -> Node:
    """Sum of all entries as a shape-(1,) node."""
    return _make(np.array([a.value.sum()]), (a,), lambda g: (np.full(a.shape, g[0]),), "sum")


def mean(a: Node) -> Node:
    n = a.value.size
    return _make(np.array([a.value.mean()]), (a,), lambda g: (np.full(a.shape, g[0] / n),), "mean")


def row_sum(a: Node) -> Node:
    return _make(a.value.sum(axis=1, keepdims=True), (a,),
                 lambda g: (np.broadcast_to(g, a.shape).copy(),), "row_sum")


def col_mean(a: Node) -> Node:
    """Mean over rows, giving a ``(1, n)`` node."""
    m = a.shape[0]
    return _make(a.value.mean(axis=0, keepdims=True), (a,),
                 lambda g: (np.broadcast_to(g / m, a.shape).copy(),), "col_mean")


def take_rows(a: Node, rows: Sequence[int] | np.ndarray) -> Node:
    idx = np.asarray(rows, dtype=np.intp)

    def backward(g):
        out = np.zeros_like(a.value)
        np.add.at(out, idx, g)
        return (out,)

    return _make(a.value[idx], (a,), backward, "take_rows")


def scatter_rows(a: Node, rows: Sequence[int] | np.ndarray, n_rows: int) -> Node:
    """Place the rows of ``a`` at ``rows`` of an ``n_rows``-row zero matrix (adding duplicates)."""
    idx = np.asarray(rows, dtype=np.intp)
    out = np.zeros((n_rows,) + a.shape[1:])
    np.add.at(out, idx, a.value)
    return _make(out, (a,), lambda g: (g[idx],), "scatter_rows")


def concat_rows(parts: Sequence[Node]) -> Node:
    sizes = [p.shape[0] for p in parts]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(g[bounds[i]:bounds[i + 1]] for i in range(len(parts)))

    return _make(np.concatenate([p.value for p in parts], axis=0), tuple(parts), backward, "concat_rows")


def slice_cols(a: Node, start: int, stop: int) -> Node:
    def backward(g):
        out = np.zeros_like(a.value)
        out[:, start:stop] = g
        return (out,)

    return _make(np.ascontiguousarray(a.value[:, start:stop]), (a,), backward, "slice_cols")


def concat_cols(parts: Sequence[Node]) -> Node:
    sizes = [p.shape[1] for p in parts]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(parts)))

    return _make(np.concatenate([p.value for p in parts], axis=1), tuple(parts), backward, "concat_cols")


# -- normalisation and losses -------------------------------------------------

def _softmax_values(v: Tensor, mask: Tensor | None = None) -> Tensor:
    if np.isnan(v).any():
        raise NumericError("softmax input contains NaN")
    if mask is not None:
        v = np.where(mask, v, -np.inf)
    shifted = v - v.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax(x: Node, mask: Tensor | None = None) -> Node:
    """Softmax over the last axis; entries where ``mask`` is False get probability 0."""
    if not np.all(np.isfinite(x.value)):
        raise NumericError("softmax input is not finite")
    p = _softmax_values(x.value, mask)

    def backward(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _make(p, (x,), backward, "softmax")


def layer_norm(x: Node, gamma: Node | None = None, beta: Node | None = None,
               eps: float = LAYER_NORM_EPS) -> Node:
    """Normalise over the last axis, then apply the optional affine ``gamma``, ``beta``."""
    mu = x.value.mean(axis=-1, keepdims=True)
    xc = x.value - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    def backward(g):
        return (inv * (g - g.mean(axis=-1, keepdims=True) - xhat * (g * xhat).mean(axis=-1, keepdims=True)),)

    out = _make(xhat, (x,), backward, "layer_norm")
    if gamma is not None:
        out = mul(out, gamma)
    if beta is not None:
        out = add(out, beta)
    return out


def _log_softmax_values(v: Tensor) -> Tensor:
    shifted = v - v.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def log_softmax_cross_entropy(logits: Node, target_index: int) -> Node:
    """``-log softmax(logits)[target_index]`` for a single logit vector."""
    v = logits.value.reshape(-1)
    if not 0 <= target_index < v.size:
        raise IndexError(f"target index {target_index} outside vocabulary of size {v.size}")
    return cross_entropy(_make(v[None, :], (logits,), lambda g: (g.reshape(logits.shape),), "reshape"),
                         [target_index])


def cross_entropy(logits: Node, targets: Sequence[int] | np.ndarray) -> Node:
    """Mean negative log-likelihood of ``targets`` under row-wise softmax of ``logits``."""
    tgt = np.asarray(targets, dtype=np.intp)
    if logits.value.ndim != 2 or tgt.shape != (logits.shape[0],):
        raise DimensionError(f"cross_entropy: logits {logits.shape} vs targets {tgt.shape}")
    if tgt.size == 0:
        raise DimensionError("cross_entropy needs at least one target")
    vocab = logits.shape[1]
    if tgt.min() < 0 or tgt.max() >= vocab:
        raise IndexError(f"target index outside vocabulary of size {vocab}")
    if not np.all(np.isfinite(logits.value)):
        raise NumericError("cross_entropy logits are not finite")
    logp = _log_softmax_values(logits.value)
    rows = np.arange(tgt.size)
    loss = -logp[rows, tgt].mean()

    def backward(g):
        p = np.exp(logp)
        p[rows, tgt] -= 1.0
        return (p * (g[0] / tgt.size),)

    return _make(np.array([loss]), (logits,), backward, "cross_entropy")


# -- serialisation ------------------------------------------------------------

def tensor_to_bytes(t: Tensor) -> bytes:
    t = as_tensor(t)
    header = _MAGIC + struct.pack("<II", _VERSION, t.ndim) + struct.pack(f"<{t.ndim}Q", *t.shape)
    return header + t.astype("<f8").tobytes(order="C")


def tensor_from_bytes(buf: bytes) -> Tensor:
    if buf[:4] != _MAGIC:
        raise ValueError("not a tensor blob (bad magic)")
    version, ndim = struct.unpack_from("<II", buf, 4)
    if version != _VERSION:
        raise ValueError(f"unsupported tensor blob version {version}")
    shape = struct.unpack_from(f"<{ndim}Q", buf, 12)
    offset = 12 + 8 * ndim
    count = int(np.prod(shape)) if shape else 1
    data = np.frombuffer(buf, dtype="<f8", count=count, offset=offset)
    if len(buf) != offset + 8 * count:
        raise ValueError("tensor blob length does not match its shape header")
    return data.astype(np.float64).reshape(shape)


def save_tensor(path, t: Tensor) -> None:
    with open(path, "wb") as fh:
        fh.write(tensor_to_bytes(t))


def load_tensor(path) -> Tensor:
    with open(path, "rb") as fh:
        return tensor_from_bytes(fh.read())


def tensor_to_text(t: Tensor) -> str:
    """Golden-file text form: a ``shape`` line followed by one value per line."""
    t = as_tensor(t)
    lines = ["shape " + " ".join(str(d) for d in t.shape)]
    lines.extend(repr(float(v)) for v in t.reshape(-1))
    return "\n".join(lines) + "\n"


def tensor_from_text(text: str) -> Tensor:
    lines = [ln.strip() for ln in text.splitlines() if ln.strip()]
    if not lines or not lines[0].startswith("shape"):
        raise ValueError("text tensor must start with a 'shape' line")
    shape = tuple(int(d) for d in lines[0].split()[1:])
    values = np.array([float(v) for v in lines[1:]], dtype=np.float64)
    if values.size != (int(np.prod(shape)) if shape else 1):
        raise ValueError(f"{values.size} values do not fill shape {shape}")
    return values.reshape(shape)


def zero_grads(nodes: Iterable[Node]) -> None:
    for n in nodes:
        n.zero_grad()
