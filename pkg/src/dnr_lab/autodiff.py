"""Reverse-mode automatic differentiation over dense 2-D float64 arrays.

Values are plain ``numpy`` arrays of shape ``(rows, cols)``.  Every forward
op returns a :class:`Node` that remembers how to push its output gradient back
to its inputs; :func:`backward` walks the graph once in reverse topological
order.  Parameters live in a :class:`ParamStore`, which also owns the Adam
state and the binary checkpoint format.
"""

from __future__ import annotations

import hashlib
import io
import struct
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

LOG_FLOOR = 1e-12
PROB_CLAMP = 1e-7
MAGIC = b"DNRW"
FORMAT_VERSION = 1


class ShapeError(ValueError):
    """Incompatible operand shapes for an op."""

    def __init__(self, kind: str, *shapes: tuple[int, ...]):
        self.kind = kind
        self.shapes = shapes
        joined = " and ".join(str(s) for s in shapes)
        super().__init__(f"{kind}: incompatible shapes {joined}")


class NumericalError(FloatingPointError):
    """A forward op or an update produced a non-finite value."""

    def __init__(self, kind: str, detail: str = "non-finite value produced"):
        self.kind = kind
        super().__init__(f"{kind}: {detail}")


def as_array2(x) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if a.ndim == 0:
        a = a.reshape(1, 1)
    elif a.ndim == 1:
        a = a.reshape(-1, 1)
    elif a.ndim != 2:
        raise ShapeError("as_array2", a.shape)
    return a


class Node:
    """One value in the computation graph."""

    __slots__ = ("value", "grad", "parents", "requires_grad", "kind", "_sink")

    def __init__(self, value, parents=(), kind="const", requires_grad=None):
        self.value = value
        self.grad = None
        self.parents = list(parents)
        self.kind = kind
        if requires_grad is None:
            requires_grad = any(p.requires_grad for p, _ in self.parents)
        self.requires_grad = requires_grad
        self._sink = None

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    def __repr__(self) -> str:
        return f"Node({self.kind}, shape={self.shape})"


def constant(x) -> Node:
    return Node(as_array2(x), requires_grad=False)


def _wrap(x) -> Node:
    return x if isinstance(x, Node) else constant(x)


def _finish(kind: str, value: np.ndarray, parents) -> Node:
    if not np.all(np.isfinite(value)):
        raise NumericalError(kind)
    return Node(value, parents, kind)


def _unbroadcast(g: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    if g.shape == shape:
        return g
    if shape[0] == 1 and g.shape[0] != 1:
        g = g.sum(axis=0, keepdims=True)
    if shape[1] == 1 and g.shape[1] != 1:
        g = g.sum(axis=1, keepdims=True)
    return g


def _broadcast_shape(kind: str, a: Node, b: Node) -> None:
    for sa, sb in zip(a.shape, b.shape):
        if sa != sb and sa != 1 and sb != 1:
            raise ShapeError(kind, a.shape, b.shape)


# -- primitives ---------------------------------------------------------------


def matmul(a, b) -> Node:
    a, b = _wrap(a), _wrap(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    av, bv = a.value, b.value
    return _finish(
        "matmul",
        av @ bv,
        [(a, lambda g: g @ bv.T), (b, lambda g: av.T @ g)],
    )


def add(a, b) -> Node:
    a, b = _wrap(a), _wrap(b)
    _broadcast_shape("add", a, b)
    sa, sb = a.shape, b.shape
    return _finish(
        "add",
        a.value + b.value,
        [(a, lambda g: _unbroadcast(g, sa)), (b, lambda g: _unbroadcast(g, sb))],
    )


def sub(a, b) -> Node:
    a, b = _wrap(a), _wrap(b)
    _broadcast_shape("sub", a, b)
    sa, sb = a.shape, b.shape
    return _finish(
        "sub",
        a.value - b.value,
        [(a, lambda g: _unbroadcast(g, sa)), (b, lambda g: -_unbroadcast(g, sb))],
    )


def mul(a, b) -> Node:
    a, b = _wrap(a), _wrap(b)
    _broadcast_shape("mul", a, b)
    av, bv = a.value, b.value
    sa, sb = a.shape, b.shape
    return _finish(
        "mul",
        av * bv,
        [(a, lambda g: _unbroadcast(g * bv, sa)), (b, lambda g: _unbroadcast(g * av, sb))],
    )


def scale(a, c: float) -> Node:
    a = _wrap(a)
    c = float(c)
    return _finish("scale", a.value * c, [(a, lambda g: g * c)])


def sigmoid(a) -> Node:
    a = _wrap(a)
    s = 0.5 * (1.0 + np.tanh(0.5 * a.value))
    return _finish("sigmoid", s, [(a, lambda g: g * s * (1.0 - s))])


def relu(a) -> Node:
    a = _wrap(a)
    on = a.value > 0
    return _finish("relu", np.where(on, a.value, 0.0), [(a, lambda g: g * on)])


def exp(a) -> Node:
    a = _wrap(a)
    with np.errstate(over="ignore"):
        e = np.exp(a.value)
    return _finish("exp", e, [(a, lambda g: g * e)])


def log(a) -> Node:
    a = _wrap(a)
    if not np.all(np.isfinite(a.value)):
        raise NumericalError("log", "non-finite input")
    x = np.maximum(a.value, LOG_FLOOR)
    live = a.value >= LOG_FLOOR
    return _finish("log", np.log(x), [(a, lambda g: g * live / x)])


def softmax_rows(a) -> Node:
    a = _wrap(a)
    if not np.all(np.isfinite(a.value)):
        raise NumericalError("softmax_rows", "non-finite input")
    z = a.value - a.value.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=1, keepdims=True)

    def back(g):
        return s * (g - (g * s).sum(axis=1, keepdims=True))

    return _finish("softmax_rows", s, [(a, back)])


def mean(a) -> Node:
    a = _wrap(a)
    shape = a.shape
    n = a.value.size
    return _finish(
        "mean",
        np.array([[a.value.sum() / n]]),
        [(a, lambda g: np.full(shape, g[0, 0] / n))],
    )


def total(a) -> Node:
    a = _wrap(a)
    shape = a.shape
    return _finish("sum", np.array([[a.value.sum()]]), [(a, lambda g: np.full(shape, g[0, 0]))])


def transpose(a) -> Node:
    a = _wrap(a)
    return _finish("transpose", a.value.T.copy(), [(a, lambda g: g.T)])


def concat_cols(nodes: Sequence) -> Node:
    nodes = [_wrap(n) for n in nodes]
    rows = {n.shape[0] for n in nodes}
    if len(rows) != 1:
        raise ShapeError("concat_cols", *(n.shape for n in nodes))
    bounds = np.cumsum([0] + [n.shape[1] for n in nodes])
    parents = []
    for n, lo, hi in zip(nodes, bounds[:-1], bounds[1:]):
        parents.append((n, lambda g, lo=lo, hi=hi: g[:, lo:hi]))
    return _finish("concat_cols", np.concatenate([n.value for n in nodes], axis=1), parents)


def slice_cols(a, start: int, stop: int) -> Node:
    a = _wrap(a)
    if not 0 <= start < stop <= a.shape[1]:
        raise ShapeError("slice_cols", a.shape, (start, stop))
    shape = a.shape

    def back(g):
        out = np.zeros(shape)
        out[:, start:stop] = g
        return out

    return _finish("slice_cols", a.value[:, start:stop].copy(), [(a, back)])


def gather_rows(a, index) -> Node:
    """Row lookup ``a[index]``; the backward pass scatter-adds."""
    a = _wrap(a)
    index = np.asarray(index, dtype=np.int64).ravel()
    if index.size and (index.min() < 0 or index.max() >= a.shape[0]):
        raise IndexError(f"gather_rows: index out of range for {a.shape[0]} rows")
    shape = a.shape

    def back(g):
        out = np.zeros(shape)
        np.add.at(out, index, g)
        return out

    return _finish("gather_rows", a.value[index], [(a, back)])


_FORWARD = {
    "matmul": matmul,
    "add": add,
    "sub": sub,
    "mul": mul,
    "sigmoid": sigmoid,
    "relu": relu,
    "exp": exp,
    "softmax_rows": softmax_rows,
    "log": log,
    "mean": mean,
    "sum": total,
    "transpose": transpose,
    "concat_cols": lambda *xs: concat_cols(xs),
}


def forward_op(kind: str, inputs: Sequence) -> Node:
    """Dispatch a primitive by name, e.g. ``forward_op("matmul", [a, b])``."""
    try:
        fn = _FORWARD[kind]
    except KeyError:
        raise ValueError(f"unknown op kind {kind!r}") from None
    return fn(*inputs)


def bce_loss(pred, labels, mask=None) -> Node:
    """Masked mean binary cross-entropy of probabilities against {0,1} labels."""
    pred = _wrap(pred)
    z = as_array2(labels)
    m = np.ones_like(z) if mask is None else as_array2(mask)
    if z.shape != pred.shape or m.shape != pred.shape:
        raise ShapeError("bce_loss", pred.shape, z.shape, m.shape)
    denom = m.sum()
    if denom <= 0:
        raise ValueError("bce_loss: empty batch")
    p = np.clip(pred.value, PROB_CLAMP, 1.0 - PROB_CLAMP)
    live = (pred.value >= PROB_CLAMP) & (pred.value <= 1.0 - PROB_CLAMP)
    cell = -(z * np.log(p) + (1.0 - z) * np.log1p(-p))
    value = np.array([[(m * cell).sum() / denom]])

    def back(g):
        return g[0, 0] * live * m * (-(z / p) + (1.0 - z) / (1.0 - p)) / denom

    return _finish("bce_loss", value, [(pred, back)])


# -- graph traversal ----------------------------------------------------------


def _topological(root: Node) -> list[Node]:
    order, seen = [], set()
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
        for parent, _ in node.parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Node) -> None:
    """Accumulate d(loss)/d(param) into every reachable parameter's store slot.

    Gradients add onto whatever the store already holds, so two calls without
    an intervening :meth:`ParamStore.zero_grad` (or :func:`adam_step`) sum.
    The graph is released afterwards.
    """
    if loss.shape != (1, 1):
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = _topological(loss)
    loss.grad = np.ones((1, 1))
    for node in reversed(order):
        g = node.grad
        if g is None:
            continue
        for parent, rule in node.parents:
            if not parent.requires_grad:
                continue
            contrib = rule(g)
            if parent.grad is None:
                parent.grad = np.array(contrib, dtype=np.float64, copy=True)
            else:
                parent.grad += contrib
        if node._sink is not None:
            store, name = node._sink
            store.grads[name] += g
    for node in order:
        node.parents = []
        node.grad = None


# -- parameters and optimisation ---------------------------------------------


class ParamStore:
    """Named trainable arrays plus per-entry Adam moments and step counters."""

    def __init__(self):
        self.weights: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.steps: dict[str, int] = {}

    def add(self, name: str, value) -> None:
        value = as_array2(value).copy()
        self.weights[name] = value
        self.grads[name] = np.zeros_like(value)
        self.m[name] = np.zeros_like(value)
        self.v[name] = np.zeros_like(value)
        self.steps[name] = 0

    def __contains__(self, name: str) -> bool:
        return name in self.weights

    def __getitem__(self, name: str) -> np.ndarray:
        return self.weights[name]

    def names(self) -> list[str]:
        return list(self.weights)

    def node(self, name: str, frozen: bool = False) -> Node:
        """Leaf node for ``name``; a frozen leaf never receives gradient."""
        n = Node(self.weights[name], kind=f"param:{name}", requires_grad=not frozen)
        if not frozen:
            n._sink = (self, name)
        return n

    def zero_grad(self) -> None:
        for g in self.grads.values():
            g.fill(0.0)

    def grad_norm(self) -> float:
        return float(np.sqrt(sum(float((g * g).sum()) for g in self.grads.values())))

    def copy(self) -> "ParamStore":
        out = ParamStore()
        for name, w in self.weights.items():
            out.add(name, w)
        return out

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        buf.write(MAGIC)
        buf.write(struct.pack("<I", FORMAT_VERSION))
        for name, w in self.weights.items():
            raw = name.encode("utf-8")
            rows, cols = w.shape
            buf.write(struct.pack("<I", len(raw)))
            buf.write(raw)
            buf.write(struct.pack("<II", rows, cols))
            buf.write(np.ascontiguousarray(w, dtype="<f8").tobytes())
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> "ParamStore":
        if data[:4] != MAGIC:
            raise ValueError("not a DNRW checkpoint (bad magic)")
        (version,) = struct.unpack_from("<I", data, 4)
        if version != FORMAT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        store, pos = cls(), 8
        while pos < len(data):
            (length,) = struct.unpack_from("<I", data, pos)
            pos += 4
            name = data[pos : pos + length].decode("utf-8")
            pos += length
            rows, cols = struct.unpack_from("<II", data, pos)
            pos += 8
            nbytes = rows * cols * 8
            if pos + nbytes > len(data):
                raise ValueError(f"truncated checkpoint at entry {name!r}")
            w = np.frombuffer(data[pos : pos + nbytes], dtype="<f8").reshape(rows, cols)
            pos += nbytes
            store.add(name, w.astype(np.float64))
        return store

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "ParamStore":
        return cls.from_bytes(Path(path).read_bytes())

    def digest(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()


def adam_step(
    store: ParamStore,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    weight_decay: float = 0.0,
    clip_norm: float | None = 5.0,
) -> None:
    """One Adam update on every entry, then zero the gradients.

    Weight decay is the coupled L2 form (added to the gradient).  Gradients
    are first rescaled so their global norm is at most ``clip_norm``.
    """
    for name, g in store.grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericalError("adam_step", f"non-finite gradient for {name!r}")
    factor = 1.0
    if clip_norm is not None:
        norm = store.grad_norm()
        if norm > clip_norm:
            factor = clip_norm / norm
    for name, w in store.weights.items():
        g = store.grads[name] * factor
        if weight_decay:
            g = g + weight_decay * w
        m, v = store.m[name], store.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        store.steps[name] += 1
        t = store.steps[name]
        m_hat = m / (1.0 - beta1**t)
        v_hat = v / (1.0 - beta2**t)
        w -= lr * m_hat / (np.sqrt(v_hat) + eps)
    store.zero_grad()


def grad_check(
    f: Callable[[], Node],
    params: ParamStore,
    step: float = 1e-4,
    max_coords: int | None = 64,
    rng: np.random.Generator | None = None,
    names: Iterable[str] | None = None,
) -> float:
    """Largest |analytic - central difference| / max(1, |central difference|).

    ``f`` must rebuild its graph from ``params`` on every call.  At most
    ``max_coords`` coordinates per entry are probed (all when ``None``).
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    names = list(names) if names is not None else params.names()
    params.zero_grad()
    backward(f())
    analytic = {n: params.grads[n].copy() for n in names}
    params.zero_grad()
    worst = 0.0
    for name in names:
        w = params.weights[name]
        flat = w.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = rng.choice(flat.size, size=max_coords, replace=False)
        for c in coords:
            orig = flat[c]
            flat[c] = orig + step
            up = f().value[0, 0]
            flat[c] = orig - step
            down = f().value[0, 0]
            flat[c] = orig
            numeric = (up - down) / (2.0 * step)
            err = abs(analytic[name].reshape(-1)[c] - numeric) / max(1.0, abs(numeric))
            worst = max(worst, err)
    return worst
