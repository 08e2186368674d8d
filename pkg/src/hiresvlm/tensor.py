"""Dense float64 tensors with reverse-mode gradients and a multiplication ledger.

The engine is deliberately small: every op stores a closure mapping the
output gradient to parent gradients, and :func:`backward` walks the graph in
reverse topological order.  Matrix products are the only ops that touch the
:class:`MulLedger`, which tallies ``n * o * d`` multiplications per product of
an ``(n, d)`` and a ``(d, o)`` operand.
"""

from __future__ import annotations

import hashlib
import math
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, NumericError

CATEGORIES = ("projection", "attention_scores", "attention_values", "feedforward", "other")


class MulLedger:
    """Per-category multiplication tallies for matrix products."""

    def __init__(self, counts: dict[str, int] | None = None):
        self._counts = {c: 0 for c in CATEGORIES}
        self._lock = threading.Lock()
        if counts:
            for cat, n in counts.items():
                self.add(cat, n)

    def add(self, category: str, n: int) -> None:
        if category not in self._counts:
            raise ValueError(f"unknown ledger category {category!r}")
        if n < 0:
            raise ValueError("multiplication counts are non-negative")
        with self._lock:
            self._counts[category] += int(n)

    def __getitem__(self, category: str) -> int:
        return self._counts[category]

    def total(self, categories: Iterable[str] | None = None) -> int:
        cats = CATEGORIES if categories is None else tuple(categories)
        return sum(self._counts[c] for c in cats)

    def as_dict(self) -> dict[str, int]:
        return dict(self._counts)

    def merge(self, other: "MulLedger") -> "MulLedger":
        """Fold ``other`` into this ledger (cross-thread tallies merge by summation)."""
        for cat, n in other.as_dict().items():
            self.add(cat, n)
        return self

    def __add__(self, other: "MulLedger") -> "MulLedger":
        return MulLedger(self.as_dict()).merge(other)

    def __eq__(self, other: object) -> bool:
        return isinstance(other, MulLedger) and self.as_dict() == other.as_dict()

    def __repr__(self) -> str:
        inner = ", ".join(f"{k}={v}" for k, v in self._counts.items())
        return f"MulLedger({inner})"


class Rng:
    """Seeded generator: PCG64 uniforms, Box-Muller normals.

    ``normal`` consumes uniforms in pairs ``(u1, u2)`` with ``u1`` taken from
    ``(0, 1]`` and emits ``sqrt(-2 ln u1) * cos(2 pi u2)`` followed by the
    matching ``sin`` sample, so streams replicate anywhere PCG64 is available.
    """

    algorithm = "pcg64+box-muller"

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def uniform(self, shape=()) -> np.ndarray:
        return self._gen.random(shape)

    def normal(self, shape=(), std: float = 1.0, mean: float = 0.0) -> np.ndarray:
        shape = tuple(np.atleast_1d(shape)) if shape != () else ()
        n = int(np.prod(shape)) if shape else 1
        pairs = (n + 1) // 2
        u = self._gen.random(2 * pairs)
        u1 = 1.0 - u[0::2]
        u2 = u[1::2]
        r = np.sqrt(-2.0 * np.log(u1))
        z = np.empty(2 * pairs)
        z[0::2] = r * np.cos(2.0 * np.pi * u2)
        z[1::2] = r * np.sin(2.0 * np.pi * u2)
        out = mean + std * z[:n]
        return out.reshape(shape) if shape else out[0]

    def integers(self, low: int, high: int, size=None):
        return self._gen.integers(low, high, size=size)

    def spawn(self, offset: int) -> "Rng":
        return Rng((self.seed * 1_000_003 + offset) % (2**63))


class Tensor:
    """Row-major float64 array with an optional gradient accumulator."""

    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, *, _parents=(), _grad_fn=None):
        arr = np.array(data, dtype=np.float64)
        arr.setflags(write=False)
        self._data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = _parents
        self._grad_fn = _grad_fn
        self._consumed = False

    # data is rebound, never mutated in place
    @property
    def data(self) -> np.ndarray:
        return self._data

    @data.setter
    def data(self, value) -> None:
        arr = np.array(value, dtype=np.float64)
        if arr.shape != self._data.shape:
            raise DimensionError(f"cannot rebind data of shape {self._data.shape} to {arr.shape}")
        arr.setflags(write=False)
        self._data = arr

    @property
    def shape(self) -> tuple[int, ...]:
        return self._data.shape

    @property
    def ndim(self) -> int:
        return self._data.ndim

    @property
    def size(self) -> int:
        return self._data.size

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self._data

    def item(self) -> float:
        return float(self._data.reshape(-1)[0]) if self._data.size == 1 else _raise_not_scalar(self)

    def zero_grad(self) -> None:
        self.grad = None

    def checksum(self) -> str:
        return hashlib.sha256(np.ascontiguousarray(self._data).tobytes()).hexdigest()

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # arithmetic
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, -_as_tensor(other))

    def __rsub__(self, other):
        return add(-self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division is restricted to scalars")
        return mul(self, 1.0 / other)

    def __getitem__(self, index):
        return index_(self, index)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)

    @property
    def T(self):
        return transpose(self)

    def sum(self):
        return sum_(self)


def _raise_not_scalar(t: Tensor):
    raise ContractError(f"expected a single-element tensor, got shape {t.shape}")


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], grad_fn) -> Tensor:
    req = any(p.requires_grad for p in parents)
    if not req:
        return Tensor(data)
    return Tensor(data, requires_grad=True, _parents=tuple(parents), _grad_fn=grad_fn)


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    g = g.sum(axis=tuple(range(lead))) if lead else g
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    return g.sum(axis=axes, keepdims=True) if axes else g


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape == b.shape or b.size == 1 or a.size == 1:
        return
    small, big = (a, b) if a.ndim < b.ndim else (b, a)
    if small.ndim < big.ndim and big.shape[-small.ndim:] == small.shape:
        return
    raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} only broadcast as bias or scalar")


# ops


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "add")
    out = a.data + b.data

    def grad_fn(g):
        return _reduce_to(g, a.shape), _reduce_to(g, b.shape)

    return _make(out, (a, b), grad_fn)


def mul(a, b) -> Tensor:
    """Element-wise product; the second operand is a same-shape tensor or a scalar."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape and b.size != 1:
        raise DimensionError(f"mul: shapes {a.shape} and {b.shape} differ")
    out = a.data * b.data

    def grad_fn(g):
        return _reduce_to(g * b.data, a.shape), _reduce_to(g * a.data, b.shape)

    return _make(out, (a, b), grad_fn)


def matmul(a: Tensor, b: Tensor, category: str = "other", ledger: MulLedger | None = None) -> Tensor:
    """``(n, d) @ (d, o)``; books ``n * o * d`` multiplications under ``category``."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    if category not in CATEGORIES:
        raise ValueError(f"unknown ledger category {category!r}")
    n, d = a.shape
    o = b.shape[1]
    if ledger is not None:
        ledger.add(category, n * o * d)
    out = a.data @ b.data

    def grad_fn(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.T @ g if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), grad_fn)


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise DimensionError("transpose expects a matrix")
    return _make(a.data.T, (a,), lambda g: (g.T,))


def reshape(a: Tensor, shape) -> Tensor:
    out = a.data.reshape(shape)
    return _make(out, (a,), lambda g: (g.reshape(a.shape),))


def index_(a: Tensor, index) -> Tensor:
    out = a.data[index]

    def grad_fn(g):
        full = np.zeros(a.shape)
        np.add.at(full, index, g)
        return (full,)

    return _make(np.array(out), (a,), grad_fn)


def gather_rows(table: Tensor, ids: Sequence[int]) -> Tensor:
    """Row lookup used for embeddings."""
    idx = np.asarray(ids, dtype=np.int64)
    return index_(table, idx)


def select(a: Tensor, rows: Sequence[int], cols: Sequence[int]) -> Tensor:
    r = np.asarray(rows, dtype=np.int64)
    c = np.asarray(cols, dtype=np.int64)
    return index_(a, (r, c))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise DimensionError("concat of an empty sequence")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def grad_fn(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(out, tensors, grad_fn)


def sum_(a: Tensor) -> Tensor:
    return _make(np.array(a.data.sum()), (a,), lambda g: (np.full(a.shape, float(g)),))


def softmax_rows(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis, stabilized by subtracting the row maximum.

    ``mask`` (boolean, ``True`` = keep) zeroes excluded entries; every row must
    keep at least one entry.
    """
    xd = x.data
    if np.isnan(xd).any():
        raise NumericError("softmax_rows: NaN in input")
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != x.shape:
            raise DimensionError(f"softmax mask shape {mask.shape} != {x.shape}")
        if not mask.any(axis=-1).all():
            raise ContractError("softmax mask removes an entire row")
        xd = np.where(mask, xd, -np.inf)
    m = xd.max(axis=-1, keepdims=True)
    e = np.exp(xd - m)
    p = e / e.sum(axis=-1, keepdims=True)

    def grad_fn(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _make(p, (x,), grad_fn)


def log_softmax_rows(x: Tensor) -> Tensor:
    xd = x.data
    if np.isnan(xd).any():
        raise NumericError("log_softmax_rows: NaN in input")
    m = xd.max(axis=-1, keepdims=True)
    shifted = xd - m
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse
    p = np.exp(out)

    def grad_fn(g):
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return _make(out, (x,), grad_fn)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    D = x.shape[-1] if x.ndim else 0
    if D == 0:
        raise DimensionError("layer_norm over an empty last axis")
    if gain.shape != (D,) or bias.shape != (D,):
        raise DimensionError(f"layer_norm: gain/bias {gain.shape}/{bias.shape} vs last axis {D}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def grad_fn(g):
        dxhat = g * gain.data
        dx = inv * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        lead = tuple(range(g.ndim - 1))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _make(out, (x, gain, bias), grad_fn)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """Tanh-approximated GELU."""
    xd = x.data
    inner = _GELU_C * (xd + 0.044715 * xd**3)
    t = np.tanh(inner)
    out = 0.5 * xd * (1.0 + t)

    def grad_fn(g):
        d = 0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * xd**2)
        return (g * d,)

    return _make(out, (x,), grad_fn)


# autograd


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf requiring gradients.

    The graph below ``loss`` is consumed: intermediate nodes drop their
    parents, so a second call on the same loss raises.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise ContractError("graph already consumed by an earlier backward pass")
    if not loss.requires_grad:
        return

    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if node.is_leaf:
            if g is not None:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        if g is not None:
            for parent, pg in zip(node._parents, node._grad_fn(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg
        node._parents = ()
        node._grad_fn = None
        node._consumed = True


def finite_difference_grad(
    f: Callable[[Tensor], float | Tensor],
    p: Tensor,
    step: float = 1e-5,
    indices: Iterable[tuple[int, ...]] | None = None,
) -> np.ndarray:
    """Central differences ``(f(p + h) - f(p - h)) / 2h`` per coordinate of ``p``.

    With ``indices`` only those coordinates are probed; the rest of the
    returned array stays zero.
    """
    base = p.data.copy()
    out = np.zeros(p.shape)
    coords = np.ndindex(*p.shape) if indices is None else indices

    def value() -> float:
        v = f(p)
        return v.item() if isinstance(v, Tensor) else float(v)

    try:
        for idx in coords:
            idx = tuple(idx)
            bumped = base.copy()
            bumped[idx] += step
            p.data = bumped
            hi = value()
            bumped[idx] = base[idx] - step
            p.data = bumped
            lo = value()
            out[idx] = (hi - lo) / (2.0 * step)
    finally:
        p.data = base
    return out
