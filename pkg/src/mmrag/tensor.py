"""Dense float64 tensors with taped reverse-mode differentiation.

Each operation whose inputs require gradients records a backward closure;
``Tensor.backward()`` replays the tape in reverse topological order and
accumulates gradients into leaf tensors. Interior gradients live only for
the duration of one backward pass, so separate losses over shared leaves
accumulate naturally.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError, ShapeError

_grad_enabled = True


class no_grad:
    """Disable tape recording inside a ``with`` block (eval/decode paths)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape``, inverting numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward = None

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # -- arithmetic ----------------------------------------------------------

    def __add__(self, other):
        other = _as_tensor(other)
        out_data = self.data + other.data
        return _node(out_data, (self, other), lambda g: (
            (self, _unbroadcast(g, self.data.shape)),
            (other, _unbroadcast(g, other.data.shape)),
        ))

    __radd__ = __add__

    def __mul__(self, other):
        other = _as_tensor(other)
        out_data = self.data * other.data
        return _node(out_data, (self, other), lambda g: (
            (self, _unbroadcast(g * other.data, self.data.shape)),
            (other, _unbroadcast(g * self.data, other.data.shape)),
        ))

    __rmul__ = __mul__

    def __neg__(self):
        return _node(-self.data, (self,), lambda g: ((self, -g),))

    def __sub__(self, other):
        return self + (-_as_tensor(other))

    def __rsub__(self, other):
        return _as_tensor(other) + (-self)

    def __truediv__(self, other):
        other = _as_tensor(other)
        out_data = self.data / other.data
        return _node(out_data, (self, other), lambda g: (
            (self, _unbroadcast(g / other.data, self.data.shape)),
            (other, _unbroadcast(-g * self.data / (other.data ** 2), other.data.shape)),
        ))

    def __rtruediv__(self, other):
        return _as_tensor(other) / self

    def __matmul__(self, other):
        return matmul(self, other)

    # -- elementwise functions -----------------------------------------------

    def exp(self):
        out_data = np.exp(self.data)
        return _node(out_data, (self,), lambda g: ((self, g * out_data),))

    def log(self):
        return _node(np.log(self.data), (self,), lambda g: ((self, g / self.data),))

    def sqrt(self):
        out_data = np.sqrt(self.data)
        return _node(out_data, (self,), lambda g: ((self, g * 0.5 / out_data),))

    def tanh(self):
        out_data = np.tanh(self.data)
        return _node(out_data, (self,), lambda g: ((self, g * (1.0 - out_data ** 2)),))

    def relu(self):
        out_data = np.maximum(self.data, 0.0)
        return _node(out_data, (self,), lambda g: ((self, g * (self.data > 0)),))

    def gelu(self):
        # tanh approximation with its exact analytic derivative
        c = np.sqrt(2.0 / np.pi)
        x = self.data
        inner = c * (x + 0.044715 * x ** 3)
        t = np.tanh(inner)
        out_data = 0.5 * x * (1.0 + t)

        def bw(g):
            d_inner = c * (1.0 + 3 * 0.044715 * x ** 2)
            dx = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t ** 2) * d_inner
            return ((self, g * dx),)

        return _node(out_data, (self,), bw)

    # -- shape ops -----------------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.data.shape
        return _node(self.data.reshape(shape), (self,),
                     lambda g: ((self, g.reshape(old)),))

    def transpose(self, *axes):
        if not axes:
            axes = tuple(reversed(range(self.data.ndim)))
        elif len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        inv = np.argsort(axes)
        return _node(self.data.transpose(axes), (self,),
                     lambda g: ((self, g.transpose(inv)),))

    def __getitem__(self, key):
        out_data = self.data[key]

        def bw(g):
            buf = np.zeros_like(self.data)
            np.add.at(buf, key, g)
            return ((self, buf),)

        return _node(out_data, (self,), bw)

    # -- reductions ----------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False):
        out_data = self.data.sum(axis=axis, keepdims=keepdims)

        def bw(g):
            if axis is None:
                return ((self, np.broadcast_to(g, self.data.shape).copy()),)
            gg = g if keepdims else np.expand_dims(g, axis)
            return ((self, np.broadcast_to(gg, self.data.shape).copy()),)

        return _node(out_data, (self,), bw)

    def mean(self, axis=None, keepdims: bool = False):
        n = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    # -- tape replay ---------------------------------------------------------

    def backward(self):
        """Propagate ``d(self)/d(leaf)`` into every reachable leaf's ``grad``.

        ``self`` must be a scalar. Repeated calls without zeroing grads
        accumulate.
        """
        if self.data.size != 1:
            raise ContractError(
                f"backward requires a scalar loss, got shape {self.data.shape}")
        order = _toposort(self)
        gradmap: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = gradmap.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in node._backward(g):
                if not parent.requires_grad:
                    continue
                key = id(parent)
                if key in gradmap:
                    gradmap[key] = gradmap[key] + pg
                else:
                    gradmap[key] = pg
        # leaves that never entered gradmap were pruned (no grad-requiring path)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: tuple, backward) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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
    return order


# -- free functions ------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with gradient flow to both operands.

    Supports stacked leading dimensions via numpy matmul broadcasting.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim < 1 or b.data.ndim < 2 or a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(
            f"matmul inner dimensions disagree: {a.data.shape} x {b.data.shape}")
    out_data = a.data @ b.data

    def bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return ((a, _unbroadcast(ga, a.data.shape)),
                (b, _unbroadcast(gb, b.data.shape)))

    return _node(out_data, (a, b), bw)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Shift-stabilized softmax along ``axis``; rows sum to one."""
    x = _as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        dot = (g * out_data).sum(axis=axis, keepdims=True)
        return ((x, out_data * (g - dot)),)

    return _node(out_data, (x,), bw)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = _as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out_data = z - lse
    p = np.exp(out_data)

    def bw(g):
        return ((x, g - p * g.sum(axis=axis, keepdims=True)),)

    return _node(out_data, (x,), bw)


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean negative log softmax probability of ``targets``.

    logits (B, V), targets length-B int class ids; each id must be < V.
    """
    logits = _as_tensor(logits)
    t = np.asarray(targets, dtype=np.int64).reshape(-1)
    if logits.data.ndim != 2 or t.shape[0] != logits.data.shape[0]:
        raise ShapeError(
            f"cross_entropy expects (B,V) logits with B targets: "
            f"{logits.data.shape} vs {t.shape}")
    v = logits.data.shape[1]
    if t.size and (t.min() < 0 or t.max() >= v):
        raise IndexError(f"target id out of range [0, {v})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    b = t.shape[0]
    out_data = np.asarray(-logp[np.arange(b), t].mean())

    def bw(g):
        p = np.exp(logp)
        p[np.arange(b), t] -= 1.0
        return ((logits, (float(g) / b) * p),)

    return _node(out_data, (logits,), bw)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        parts = np.split(g, splits, axis=axis)
        return tuple(zip(tensors, parts))

    return _node(out_data, tuple(tensors), bw)


def stack_rows(tensors) -> Tensor:
    """Stack 1-D tensors of equal length into a matrix (len, D)."""
    return concat([t.reshape(1, -1) for t in tensors], axis=0)


def take_rows(weight: Tensor, ids) -> Tensor:
    """Row gather (embedding lookup): weight (V, D), ids (L,) -> (L, D)."""
    weight = _as_tensor(weight)
    idx = np.asarray(ids, dtype=np.int64).reshape(-1)
    out_data = weight.data[idx]

    def bw(g):
        buf = np.zeros_like(weight.data)
        np.add.at(buf, idx, g)
        return ((weight, buf),)

    return _node(out_data, (weight,), bw)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean, unit variance, then affine."""
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = (x.data - mu) * inv
    out_data = y * gain.data + bias.data

    def bw(g):
        n = x.data.shape[-1]
        gy = g * gain.data
        gx = inv / n * (n * gy
                        - gy.sum(axis=-1, keepdims=True)
                        - y * (gy * y).sum(axis=-1, keepdims=True))
        g_gain = (g * y).reshape(-1, n).sum(axis=0)
        g_bias = g.reshape(-1, n).sum(axis=0)
        return ((x, gx), (gain, g_gain), (bias, g_bias))

    return _node(out_data, (x, gain, bias), bw)
