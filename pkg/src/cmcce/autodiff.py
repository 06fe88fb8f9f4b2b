"""Dense reverse-mode autodiff over float64 numpy arrays.

Graphs are built define-by-run: every op returns a new :class:`Value` that
remembers its parents and a closure propagating the output gradient back to
them. Only 1-D and 2-D tensors are used by the models in this package.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np


class DimensionError(ValueError):
    """Operand shapes are incompatible for the requested op."""


class ContractError(RuntimeError):
    """A precondition of an operation does not hold."""


def _as_array(data) -> np.ndarray:
    arr = np.array(data, dtype=np.float64)
    return arr


class Value:
    """A node in the computation graph holding a tensor and its gradient."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "name")

    def __init__(self, data, requires_grad: bool = False, op: str = "leaf",
                 parents: tuple = (), name: str | None = None):
        self.data = data if isinstance(data, np.ndarray) and data.dtype == np.float64 else _as_array(data)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents = parents
        self._backward: Callable[[np.ndarray], None] | None = None
        self.op = op
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self) -> str:
        label = f" {self.name}" if self.name else ""
        return f"Value{label}(op={self.op}, shape={self.shape})"

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def backward(self) -> None:
        """Accumulate d(self)/d(node) into ``grad`` of every reachable node."""
        if self.data.size != 1:
            raise ContractError(f"backward() needs a scalar loss, got shape {self.shape}")
        order: list[Value] = []
        seen: set[int] = set()
        stack: list[tuple[Value, bool]] = [(self, False)]
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
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node._accumulate(g)
                continue
            node.grad = g if node.grad is None else node.grad + g
            for parent, pg in node._backward(g):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # operator sugar
    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __matmul__(self, other): return matmul(self, other)
    def __neg__(self): return scale(self, -1.0)


def const(data) -> Value:
    return Value(data, requires_grad=False)


def _lift(x) -> Value:
    return x if isinstance(x, Value) else const(x)


def _node(data: np.ndarray, parents: Sequence[Value], op: str, backward) -> Value:
    needs = any(p.requires_grad for p in parents)
    out = Value(data, requires_grad=needs, op=op, parents=tuple(parents) if needs else ())
    if needs:
        out._backward = backward
    return out


# ---------------------------------------------------------------- primitives

def matmul(a, b) -> Value:
    a, b = _lift(a), _lift(b)
    if a.data.ndim == 0 or b.data.ndim == 0 or a.shape[-1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        if ad.ndim == 1 and bd.ndim == 1:
            return ((a, g * bd), (b, g * ad))
        if ad.ndim == 1:
            return ((a, bd @ g), (b, np.outer(ad, g)))
        if bd.ndim == 1:
            return ((a, np.outer(g, bd)), (b, ad.T @ g))
        return ((a, g @ bd.T), (b, ad.T @ g))

    return _node(ad @ bd, (a, b), "matmul", backward)


def _check_binary(a: Value, b: Value, op: str) -> None:
    if a.shape == b.shape:
        return
    # vector-over-rows is the only broadcast allowed
    if a.data.ndim == 2 and b.data.ndim == 1 and a.shape[1] == b.shape[0]:
        return
    raise DimensionError(f"{op} shape mismatch: {a.shape} vs {b.shape}")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    return g.sum(axis=0)


def add(a, b) -> Value:
    a, b = _lift(a), _lift(b)
    _check_binary(a, b, "add")
    sb = b.shape
    return _node(a.data + b.data, (a, b), "add",
                 lambda g: ((a, g), (b, _unbroadcast(g, sb))))


def sub(a, b) -> Value:
    a, b = _lift(a), _lift(b)
    _check_binary(a, b, "sub")
    sb = b.shape
    return _node(a.data - b.data, (a, b), "sub",
                 lambda g: ((a, g), (b, -_unbroadcast(g, sb))))


def mul(a, b) -> Value:
    a, b = _lift(a), _lift(b)
    _check_binary(a, b, "mul")
    ad, bd, sb = a.data, b.data, b.shape
    return _node(ad * bd, (a, b), "mul",
                 lambda g: ((a, g * bd), (b, _unbroadcast(g * ad, sb))))


def scale(a: Value, c: float) -> Value:
    c = float(c)
    return _node(a.data * c, (a,), "scale", lambda g: ((a, g * c),))


def tanh(a: Value) -> Value:
    y = np.tanh(a.data)
    return _node(y, (a,), "tanh", lambda g: ((a, g * (1.0 - y * y)),))


def sigmoid(a: Value) -> Value:
    x = a.data
    # split by sign so exp never overflows
    y = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                 np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    return _node(y, (a,), "sigmoid", lambda g: ((a, g * y * (1.0 - y)),))


def one_minus(a: Value) -> Value:
    return _node(1.0 - a.data, (a,), "one_minus", lambda g: ((a, -g),))


def absolute(a: Value) -> Value:
    s = np.sign(a.data)
    return _node(np.abs(a.data), (a,), "abs", lambda g: ((a, g * s),))


def square(a: Value) -> Value:
    x = a.data
    return _node(x * x, (a,), "square", lambda g: ((a, 2.0 * x * g),))


def sum_all(a: Value) -> Value:
    shape = a.shape
    return _node(np.array(a.data.sum()), (a,), "sum",
                 lambda g: ((a, np.full(shape, float(g))),))


def mean_all(a: Value) -> Value:
    n = a.data.size
    return scale(sum_all(a), 1.0 / n)


def mean_rows(a: Value) -> Value:
    """Mean over axis 0 of a matrix -> vector."""
    if a.data.ndim != 2:
        raise DimensionError(f"mean_rows needs a matrix, got {a.shape}")
    n = a.shape[0]
    return _node(a.data.sum(axis=0) / n, (a,), "mean_rows",
                 lambda g: ((a, np.broadcast_to(g / n, a.shape)),))


def softmax(x: Value, mask: np.ndarray | None = None) -> Value:
    """Softmax of a vector; entries where ``mask`` is False get weight exactly 0."""
    if x.data.ndim != 1 or x.shape[0] < 1:
        raise DimensionError(f"softmax needs a nonempty vector, got {x.shape}")
    z = x.data
    if mask is None:
        mask = np.ones(z.shape, dtype=bool)
    y = np.zeros_like(z)
    if mask.any():
        zm = z[mask]
        e = np.exp(zm - zm.max())
        y[mask] = e / e.sum()

    def backward(g):
        return ((x, y * (g - np.dot(g, y))),)

    return _node(y, (x,), "softmax", backward)


def concat(parts: Sequence[Value]) -> Value:
    """Concatenate vectors end to end."""
    parts = [_lift(p) for p in parts]
    sizes = [p.shape[0] for p in parts]
    if any(p.data.ndim != 1 for p in parts):
        raise DimensionError("concat takes vectors")
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        return tuple((p, g[offsets[i]:offsets[i + 1]]) for i, p in enumerate(parts))

    return _node(np.concatenate([p.data for p in parts]), parts, "concat", backward)


def stack(rows: Sequence[Value]) -> Value:
    """Stack equal-length vectors into a matrix."""
    rows = [_lift(r) for r in rows]
    if not rows:
        raise DimensionError("stack of zero rows")
    shape = rows[0].shape
    for r in rows:
        if r.shape != shape or r.data.ndim != 1:
            raise DimensionError(f"stack shape mismatch: {r.shape} vs {shape}")
    return _node(np.stack([r.data for r in rows]), rows, "stack",
                 lambda g: tuple((r, g[i]) for i, r in enumerate(rows)))


def vstack(mats: Sequence[Value]) -> Value:
    """Concatenate matrices along rows."""
    mats = [_lift(m) for m in mats]
    bounds = np.cumsum([0] + [m.shape[0] for m in mats])
    return _node(np.concatenate([m.data for m in mats], axis=0), mats, "vstack",
                 lambda g: tuple((m, g[bounds[i]:bounds[i + 1]]) for i, m in enumerate(mats)))


def take_rows(table: Value, idx: Sequence[int]) -> Value:
    """Gather rows of a matrix (embedding lookup); backward scatter-adds."""
    idx = np.asarray(idx, dtype=np.int64)
    shape = table.shape

    def backward(g):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return ((table, out),)

    return _node(table.data[idx], (table,), "take_rows", backward)


def row(a: Value, i: int) -> Value:
    """Row ``i`` of a matrix as a vector."""
    shape = a.shape

    def backward(g):
        out = np.zeros(shape)
        out[i] = g
        return ((a, out),)

    return _node(a.data[i], (a,), "row", backward)


def slice_vec(a: Value, start: int, stop: int) -> Value:
    shape = a.shape

    def backward(g):
        out = np.zeros(shape)
        out[start:stop] = g
        return ((a, out),)

    return _node(a.data[start:stop], (a,), "slice", backward)


# ----------------------------------------------------------- parameters

@dataclass
class Parameter:
    """A named trainable leaf."""

    name: str
    node: Value = field(repr=False)

    @property
    def data(self) -> np.ndarray:
        return self.node.data


def parameter(name: str, data: np.ndarray) -> Parameter:
    return Parameter(name, Value(np.array(data, dtype=np.float64), requires_grad=True, name=name))


class Module:
    """Container mixin: parameters are collected in attribute-definition order."""

    def named_parameters(self, prefix: str = "") -> list[Parameter]:
        out: list[Parameter] = []
        for key, val in vars(self).items():
            if key.startswith("_"):
                continue
            if isinstance(val, Parameter):
                out.append(Parameter(prefix + key, val.node))
            elif isinstance(val, Module):
                out.extend(val.named_parameters(prefix + key + "."))
        names = [p.name for p in out]
        if len(set(names)) != len(names):
            raise ContractError("duplicate parameter names")
        return out

    def parameters(self) -> list[Value]:
        return [p.node for p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


class Linear(Module):
    """y = W x + b with W stored as [out, in]; accepts a vector or a row-matrix."""

    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, bias: bool = True):
        bound = 1.0 / np.sqrt(n_in)
        self.weight = parameter("weight", rng.uniform(-bound, bound, size=(n_out, n_in)))
        self.bias = parameter("bias", np.zeros(n_out)) if bias else None

    def __call__(self, x: Value) -> Value:
        w = self.weight.node
        if x.data.ndim == 1:
            y = matmul(w, x)
        else:
            y = matmul(x, transpose(w))
        return add(y, self.bias.node) if self.bias is not None else y


def transpose(a: Value) -> Value:
    return _node(a.data.T, (a,), "transpose", lambda g: ((a, g.T),))


# --------------------------------------------------------- gradient check

@dataclass
class GradCheckReport:
    tolerance: float
    errors: dict[str, float]

    @property
    def passed(self) -> bool:
        return all(e <= self.tolerance for e in self.errors.values())

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    def lines(self) -> list[str]:
        return [f"{'ok  ' if e <= self.tolerance else 'FAIL'} {name}: max rel err {e:.3e}"
                for name, e in self.errors.items()]


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """Max entrywise |a-n| / max(|a|, |n|, floor)."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    if analytic.size == 0:
        return 0.0
    return float(np.max(np.abs(analytic - numeric) / denom))


def grad_check(loss_fn: Callable[[], Value], params: Iterable[Parameter], tolerance: float = 1e-4,
               h: float = 1e-5, max_entries: int | None = None,
               rng: np.random.Generator | None = None) -> GradCheckReport:
    """Compare backward() against central differences for every parameter.

    ``loss_fn`` must rebuild the graph from the current parameter values on each
    call. With ``max_entries`` only a random subset of each tensor is probed.
    """
    params = list(params)
    if not params:
        raise ContractError("grad_check needs at least one parameter")
    for p in params:
        p.node.grad = None
    loss = loss_fn()
    loss.backward()
    errors: dict[str, float] = {}
    rng = rng if rng is not None else np.random.default_rng(0)
    for p in params:
        data = p.node.data
        analytic = np.zeros_like(data) if p.node.grad is None else p.node.grad.copy()
        flat = data.reshape(-1)
        if max_entries is not None and flat.size > max_entries:
            idx = rng.choice(flat.size, size=max_entries, replace=False)
        else:
            idx = np.arange(flat.size)
        numeric = np.empty(len(idx))
        for j, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + h
            up = float(loss_fn().data)
            flat[i] = orig - h
            down = float(loss_fn().data)
            flat[i] = orig
            numeric[j] = (up - down) / (2.0 * h)
        errors[p.name] = relative_error(analytic.reshape(-1)[idx], numeric)
    return GradCheckReport(tolerance, errors)
