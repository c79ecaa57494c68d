"""Small reverse-mode autodiff engine over float64 numpy arrays.

Graphs are built eagerly during the forward pass and walked once in
reverse topological order by :func:`backward`. Only the handful of ops
the completion network needs are provided.
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def accumulate(self, g: np.ndarray):
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def sum(self):
        return sum_all(self)

    def mean(self):
        return mean_all(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def detach(x: Tensor) -> Tensor:
    """Stop-gradient: same values, no history, never requires grad."""
    return Tensor(x.data, requires_grad=False, name=x.name)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape and b.data.ndim != 0 and a.data.ndim != 0:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ")

    def bw(g):
        if a.requires_grad:
            a.accumulate(g if a.data.ndim else np.sum(g))
        if b.requires_grad:
            b.accumulate(g if b.data.ndim else np.sum(g))

    return _make(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape and b.data.ndim != 0 and a.data.ndim != 0:
        raise ShapeError(f"sub: shapes {a.shape} and {b.shape} differ")

    def bw(g):
        if a.requires_grad:
            a.accumulate(g if a.data.ndim else np.sum(g))
        if b.requires_grad:
            b.accumulate(-g if b.data.ndim else -np.sum(g))

    return _make(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    """Elementwise product; either side may be a scalar."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape and b.data.ndim != 0 and a.data.ndim != 0:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} differ")

    def bw(g):
        if a.requires_grad:
            ga = g * b.data
            a.accumulate(ga if a.data.ndim else np.sum(ga))
        if b.requires_grad:
            gb = g * a.data
            b.accumulate(gb if b.data.ndim else np.sum(gb))

    return _make(a.data * b.data, (a, b), bw)


def square(x: Tensor) -> Tensor:
    def bw(g):
        x.accumulate(2.0 * x.data * g)

    return _make(x.data * x.data, (x,), bw)


def sum_all(x: Tensor) -> Tensor:
    def bw(g):
        x.accumulate(np.full(x.shape, float(g)))

    return _make(np.array(x.data.sum()), (x,), bw)


def mean_all(x: Tensor) -> Tensor:
    n = x.data.size

    def bw(g):
        x.accumulate(np.full(x.shape, float(g) / n))

    return _make(np.array(x.data.mean()), (x,), bw)


def sum_rows(x: Tensor) -> Tensor:
    """Sum over the last axis of a 2-D tensor: [M, d] -> [M]."""
    if x.data.ndim != 2:
        raise ShapeError(f"sum_rows expects a 2-D tensor, got shape {x.shape}")

    def bw(g):
        x.accumulate(np.repeat(g[:, None], x.shape[1], axis=1))

    return _make(x.data.sum(axis=1), (x,), bw)


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    out = x.data.reshape(shape)

    def bw(g):
        x.accumulate(g.reshape(x.shape))

    return _make(out, (x,), bw)


def relu(x: Tensor) -> Tensor:
    """max(0, x); the subgradient at exactly zero is taken as 0."""
    mask = x.data > 0

    def bw(g):
        x.accumulate(g * mask)

    return _make(np.where(mask, x.data, 0.0), (x,), bw)


def fc(x: Tensor, W: Tensor, b: Tensor) -> Tensor:
    """Fully connected layer ``x @ W + b`` with b broadcast over the batch."""
    if x.data.ndim != 2 or W.data.ndim != 2 or x.shape[1] != W.shape[0]:
        raise ShapeError(f"fc: input shape {x.shape} incompatible with weight shape {W.shape}")
    if b.shape != (W.shape[1],):
        raise ShapeError(f"fc: bias shape {b.shape} incompatible with weight shape {W.shape}")

    def bw(g):
        if x.requires_grad:
            x.accumulate(g @ W.data.T)
        if W.requires_grad:
            W.accumulate(x.data.T @ g)
        if b.requires_grad:
            b.accumulate(g.sum(axis=0))

    return _make(x.data @ W.data + b.data, (x, W, b), bw)


def segment_max(F: Tensor, offsets: Sequence[int]) -> Tensor:
    """Column-wise max over consecutive row segments.

    ``offsets`` has B+1 entries; segment s covers rows offsets[s]:offsets[s+1].
    Returns [B, d]. Gradient goes to the first argmax row of each column.
    """
    offsets = np.asarray(offsets, dtype=np.int64)
    if F.data.ndim != 2:
        raise ShapeError(f"segment_max expects [N, d], got shape {F.shape}")
    if len(offsets) < 2 or np.any(np.diff(offsets) <= 0) or offsets[0] != 0 or offsets[-1] != F.shape[0]:
        raise ShapeError("segment_max: every segment needs at least one row")
    out = np.maximum.reduceat(F.data, offsets[:-1], axis=0)
    d = F.shape[1]
    cols = np.arange(d)

    def bw(g):
        full = np.zeros_like(F.data)
        for s in range(len(offsets) - 1):
            lo, hi = offsets[s], offsets[s + 1]
            rows = lo + np.argmax(F.data[lo:hi], axis=0)
            full[rows, cols] += g[s]
        F.accumulate(full)

    return _make(out, (F,), bw)


def maxpool_points(F: Tensor) -> Tensor:
    """[N, d] -> [d] column max (the global-feature pooling)."""
    if F.data.ndim != 2 or F.shape[0] < 1:
        raise ShapeError(f"maxpool_points needs at least one point, got shape {F.shape}")
    return reshape(segment_max(F, [0, F.shape[0]]), (F.shape[1],))


def gather_rows(x: Tensor, index) -> Tensor:
    """x[index] for a 2-D tensor; repeated indices accumulate gradient."""
    index = np.asarray(index, dtype=np.int64)

    def bw(g):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        x.accumulate(full)

    return _make(x.data[index], (x,), bw)


def row_norm(x: Tensor) -> Tensor:
    """Euclidean norm of each row of [M, d]; zero rows get zero gradient."""
    n = np.sqrt(np.sum(x.data * x.data, axis=1))

    def bw(g):
        safe = np.where(n > 0, n, 1.0)
        x.accumulate(np.where((n > 0)[:, None], x.data / safe[:, None], 0.0) * g[:, None])

    return _make(n, (x,), bw)


def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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


def backward(loss: Tensor):
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    Interior nodes are released afterwards, so a graph is differentiated
    once; leaf gradients keep accumulating across calls.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = _toposort(loss)
    if loss._backward is None:
        loss.accumulate(np.ones_like(loss.data))
        return
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
    for node in order:
        if node._backward is not None:
            node.grad = None
            node._parents = ()
            node._backward = None


def parameter(data, name: str) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True, name=name)


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


GROUP_NAMES = ("theta_D", "theta_FE", "theta_KT", "theta_KRA", "theta_MLP")


@dataclass
class ParamGroup:
    name: str
    params: dict[str, Tensor] = field(default_factory=dict)

    def __post_init__(self):
        if self.name not in GROUP_NAMES:
            raise ValueError(f"unknown parameter group {self.name!r}; expected one of {GROUP_NAMES}")

    def __iter__(self):
        return iter(self.params.values())

    def add(self, t: Tensor):
        if t.name is None or t.name in self.params:
            raise ValueError(f"parameter needs a unique name, got {t.name!r}")
        self.params[t.name] = t
        return t

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None


class ConfigError(ValueError):
    pass


class Adam:
    """Adam with bias correction; one instance per set of updated parameters.

    Moments are keyed by parameter name so the optimizer can be
    checkpointed and restored independently of object identity.
    """

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: Iterable[Tensor], lr: float):
        if not lr > 0:
            raise ConfigError(f"learning rate must be positive, got {lr}")
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for p in params:
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m = self.m.setdefault(p.name, np.zeros_like(p.data))
            v = self.v.setdefault(p.name, np.zeros_like(p.data))
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.grad = None


def optimizer_step(opt: Adam, groups: ParamGroup | Sequence[ParamGroup], lr: float):
    """Apply one Adam update to every parameter of ``groups`` and zero their grads."""
    if isinstance(groups, ParamGroup):
        groups = [groups]
    params = [p for grp in groups for p in grp]
    opt.step(params, lr)
