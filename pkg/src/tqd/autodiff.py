"""Tape-based reverse-mode differentiation over float64 matrices.

A :class:`Graph` records every primitive applied to its tensors.  Calling
:meth:`Graph.backward` walks the record in exact reverse order and
accumulates cotangents into the :class:`Parameter` objects that were bound
into the graph.  A graph built with ``record=False`` evaluates eagerly and
keeps nothing, which is what inference and finite differences use.

Example::

    g = Graph()
    x = g.param(p)
    loss = ad.sum_all(ad.mul(x, x))
    g.backward(loss)          # p.grad == 2 * p.value
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

import numpy as np

from . import numeric as nm
from .numeric import ShapeError


class GraphError(RuntimeError):
    """Misuse of a graph, e.g. backward before anything was recorded."""


class FiniteDiffError(ArithmeticError):
    """The checked function produced a non-finite value."""


@dataclass(eq=False)
class Parameter:
    name: str
    value: np.ndarray
    grad: np.ndarray = field(init=False)

    def __post_init__(self) -> None:
        self.value = nm.as_matrix(self.value).copy()
        self.grad = np.zeros_like(self.value)

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.value)


class Tensor:
    __slots__ = ("value", "graph", "index", "requires_grad", "meta")

    def __init__(self, value: np.ndarray, graph: "Graph", index: int, requires_grad: bool) -> None:
        self.value = value
        self.graph = graph
        self.index = index
        self.requires_grad = requires_grad
        self.meta: dict[str, Any] | None = None

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, index={self.index})"


@dataclass(frozen=True)
class Primitive:
    name: str
    forward: Callable[..., tuple[np.ndarray, Any]]
    backward: Callable[..., tuple[np.ndarray | None, ...]]


@dataclass
class Node:
    prim: Primitive
    inputs: tuple[Tensor, ...]
    attrs: dict[str, Any]
    out: Tensor
    saved: Any


class Graph:
    """Record of primitive applications for one forward/backward pass."""

    def __init__(self, record: bool = True, frozen: Sequence[np.ndarray] | None = None) -> None:
        self.record = record
        self.frozen = None if frozen is None else list(frozen)
        self.detached: list[np.ndarray] = []
        self.nodes: list[Node] = []
        self._count = 0
        self._leaves: list[tuple[Tensor, np.ndarray]] = []
        self._params: dict[int, tuple[Parameter, Tensor]] = {}
        self._backward_done = False

    def _new(self, value: np.ndarray, requires_grad: bool) -> Tensor:
        t = Tensor(value, self, self._count, requires_grad)
        self._count += 1
        return t

    def constant(self, value) -> Tensor:
        arr = nm.as_matrix(value)
        t = self._new(arr, False)
        if self.record:
            self._leaves.append((t, arr))
        return t

    def param(self, p: Parameter) -> Tensor:
        hit = self._params.get(id(p))
        if hit is not None:
            return hit[1]
        t = self._new(p.value, self.record)
        self._params[id(p)] = (p, t)
        if self.record:
            self._leaves.append((t, p.value))
        return t

    def detached_value(self, t: Tensor) -> np.ndarray:
        """The value of ``t`` as a plain array that carries no gradient.

        A graph built with ``frozen`` returns the recorded values in call
        order instead, so a perturbed re-evaluation sees the same detached
        inputs as the unperturbed one.
        """
        k = len(self.detached)
        if self.frozen is None:
            value = t.value.copy()
        else:
            if k >= len(self.frozen) or self.frozen[k].shape != t.shape:
                raise GraphError(f"detached value {k} does not match the frozen record")
            value = self.frozen[k]
        self.detached.append(value)
        return value

    def lift(self, x) -> Tensor:
        if isinstance(x, Tensor):
            if x.graph is not self:
                raise GraphError("tensor belongs to a different graph")
            return x
        return self.constant(x)

    def apply(self, prim: Primitive, inputs: Sequence[Tensor], **attrs) -> Tensor:
        arrays = [t.value for t in inputs]
        value, saved = prim.forward(*arrays, **attrs)
        needs = self.record and any(t.requires_grad for t in inputs)
        out = self._new(value, needs)
        if self.record:
            self.nodes.append(Node(prim, tuple(inputs), attrs, out, saved))
        return out

    def op_counts(self) -> dict[str, int]:
        counts: dict[str, int] = {}
        for node in self.nodes:
            counts[node.prim.name] = counts.get(node.prim.name, 0) + 1
        return counts

    def backward(self, output: Tensor, seed=None) -> None:
        """Accumulate d(output)/d(param) into every bound parameter's ``grad``."""
        if not self.record:
            raise GraphError("backward on a non-recording graph")
        if not self.nodes or output.graph is not self:
            raise GraphError("backward called before a forward pass was recorded")
        if self._backward_done:
            raise GraphError("backward already ran on this graph")
        if seed is None:
            seed = np.ones_like(output.value)
        seed = nm.as_matrix(seed)
        nm.check_same_shape("backward seed", seed, output.value)
        grads: list[np.ndarray | None] = [None] * self._count
        grads[output.index] = seed
        for node in reversed(self.nodes):
            g = grads[node.out.index]
            if g is None or not node.out.requires_grad:
                continue
            in_grads = node.prim.backward(g, node.saved, *[t.value for t in node.inputs], **node.attrs)
            for t, gi in zip(node.inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                cur = grads[t.index]
                grads[t.index] = gi if cur is None else cur + gi
        for p, t in self._params.values():
            g = grads[t.index]
            if g is not None:
                p.grad = p.grad + g
        self._backward_done = True

    def replay(self) -> list[np.ndarray]:
        """Re-run every recorded primitive from the stored leaves.

        Returns the recomputed node outputs in record order; comparing them
        with the recorded outputs checks forward determinism.
        """
        if not self.record:
            raise GraphError("nothing recorded")
        values: dict[int, np.ndarray] = {t.index: arr for t, arr in self._leaves}
        outs = []
        for node in self.nodes:
            args = [values[t.index] for t in node.inputs]
            value, _ = node.prim.forward(*args, **node.attrs)
            values[node.out.index] = value
            outs.append(value)
        return outs


def _graph_of(*xs) -> Graph:
    for x in xs:
        if isinstance(x, Tensor):
            return x.graph
    raise GraphError("at least one operand must be a Tensor")


def _call(prim: Primitive, *xs, **attrs) -> Tensor:
    g = _graph_of(*xs)
    return g.apply(prim, [g.lift(x) for x in xs], **attrs)


# -- primitives -------------------------------------------------------------

def _mm_f(a, b):
    return nm.matmul(a, b), None


def _mm_b(g, _, a, b):
    return g @ b.T, a.T @ g


def _add_f(a, b):
    nm.check_same_shape("add", a, b)
    return a + b, None


def _sub_f(a, b):
    nm.check_same_shape("sub", a, b)
    return a - b, None


def _mul_f(a, b):
    nm.check_same_shape("mul", a, b)
    return a * b, None


def _row_check(op, a, b):
    if b.shape != (1, a.shape[1]):
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _add_row_f(a, b):
    _row_check("add_row", a, b)
    return a + b, None


def _mul_row_f(a, b):
    _row_check("mul_row", a, b)
    return a * b, None


def _scale_f(a, c):
    return a * c, None


def _ln_f(a):
    y, inv = nm.layer_norm(a)
    return y, inv


def _ln_b(g, inv, a):
    y = (a - a.mean(axis=1, keepdims=True)) * inv
    return (nm.layer_norm_vjp(y, inv, g),)


def _gelu_f(a):
    return nm.gelu(a)


def _softmax_f(a, mask):
    out, flags = nm.masked_softmax(a, mask)
    return out, (out, flags)


def _reshape_f(a, shape):
    if a.size != shape[0] * shape[1]:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}")
    return a.reshape(shape), None


def _vstack_f(*arrs):
    cols = {a.shape[1] for a in arrs}
    if len(cols) > 1:
        raise ShapeError(f"vstack: column mismatch {[a.shape for a in arrs]}")
    return np.vstack(arrs), [a.shape[0] for a in arrs]


def _vstack_b(g, sizes, *arrs):
    cuts = np.cumsum(sizes)[:-1]
    return tuple(np.split(g, cuts, axis=0))


def _hstack_f(*arrs):
    rows = {a.shape[0] for a in arrs}
    if len(rows) > 1:
        raise ShapeError(f"hstack: row mismatch {[a.shape for a in arrs]}")
    return np.hstack(arrs), [a.shape[1] for a in arrs]


def _hstack_b(g, sizes, *arrs):
    cuts = np.cumsum(sizes)[:-1]
    return tuple(np.split(g, cuts, axis=1))


def _take_rows_f(a, idx):
    return a[idx], None


def _take_rows_b(g, _, a, idx):
    out = np.zeros_like(a)
    out[idx] = g
    return (out,)


def _take_cols_f(a, start, stop):
    return a[:, start:stop].copy(), None


def _take_cols_b(g, _, a, start, stop):
    out = np.zeros_like(a)
    out[:, start:stop] = g
    return (out,)


PRIMITIVES: dict[str, Primitive] = {
    p.name: p
    for p in [
        Primitive("matmul", _mm_f, _mm_b),
        Primitive("add", _add_f, lambda g, _, a, b: (g, g)),
        Primitive("sub", _sub_f, lambda g, _, a, b: (g, -g)),
        Primitive("mul", _mul_f, lambda g, _, a, b: (g * b, g * a)),
        Primitive("add_row", _add_row_f, lambda g, _, a, b: (g, g.sum(axis=0, keepdims=True))),
        Primitive("mul_row", _mul_row_f, lambda g, _, a, b: (g * b, (g * a).sum(axis=0, keepdims=True))),
        Primitive("scale", _scale_f, lambda g, _, a, c: (g * c,)),
        Primitive("transpose", lambda a: (a.T.copy(), None), lambda g, _, a: (g.T.copy(),)),
        Primitive("reshape", _reshape_f, lambda g, _, a, shape: (g.reshape(a.shape),)),
        Primitive("vstack", _vstack_f, _vstack_b),
        Primitive("hstack", _hstack_f, _hstack_b),
        Primitive("take_rows", _take_rows_f, _take_rows_b),
        Primitive("take_cols", _take_cols_f, _take_cols_b),
        Primitive("relu", lambda a: (np.maximum(a, 0.0), None), lambda g, _, a: (g * (a > 0),)),
        Primitive("gelu", _gelu_f, lambda g, t, a: (nm.gelu_vjp(a, t, g),)),
        Primitive("sigmoid", lambda a: (nm.sigmoid(a),) * 2, lambda g, s, a: (g * s * (1.0 - s),)),
        Primitive("softplus", lambda a: (nm.softplus(a), None), lambda g, _, a: (g * nm.sigmoid(a),)),
        Primitive("abs", lambda a: (np.abs(a), None), lambda g, _, a: (g * np.sign(a),)),
        Primitive("sum", lambda a: (np.array([[a.sum()]]), None),
                  lambda g, _, a: (np.full_like(a, g[0, 0]),)),
        Primitive("mean", lambda a: (np.array([[a.mean() if a.size else 0.0]]), None),
                  lambda g, _, a: (np.full_like(a, g[0, 0] / max(a.size, 1)),)),
        Primitive("layer_norm", _ln_f, _ln_b),
        Primitive("masked_softmax", _softmax_f,
                  lambda g, saved, a, mask: (nm.masked_softmax_vjp(saved[0], g),)),
    ]
}


def matmul(a, b) -> Tensor:
    return _call(PRIMITIVES["matmul"], a, b)


def add(a, b) -> Tensor:
    return _call(PRIMITIVES["add"], a, b)


def sub(a, b) -> Tensor:
    return _call(PRIMITIVES["sub"], a, b)


def mul(a, b) -> Tensor:
    return _call(PRIMITIVES["mul"], a, b)


def add_row(a, b) -> Tensor:
    """Add a 1×m row vector to every row of an n×m matrix."""
    return _call(PRIMITIVES["add_row"], a, b)


def mul_row(a, b) -> Tensor:
    return _call(PRIMITIVES["mul_row"], a, b)


def scale(a: Tensor, c: float) -> Tensor:
    return _call(PRIMITIVES["scale"], a, c=float(c))


def transpose(a: Tensor) -> Tensor:
    return _call(PRIMITIVES["transpose"], a)


def reshape(a: Tensor, rows: int, cols: int) -> Tensor:
    return _call(PRIMITIVES["reshape"], a, shape=(int(rows), int(cols)))


def vstack(parts: Sequence[Tensor]) -> Tensor:
    if len(parts) == 1:
        return parts[0]
    return _call(PRIMITIVES["vstack"], *parts)


def hstack(parts: Sequence[Tensor]) -> Tensor:
    if len(parts) == 1:
        return parts[0]
    return _call(PRIMITIVES["hstack"], *parts)


def take_rows(a: Tensor, idx) -> Tensor:
    """Gather rows by index.  Indices must be unique."""
    return _call(PRIMITIVES["take_rows"], a, idx=np.asarray(idx, dtype=np.intp))


def take_cols(a: Tensor, start: int, stop: int) -> Tensor:
    return _call(PRIMITIVES["take_cols"], a, start=int(start), stop=int(stop))


def relu(a: Tensor) -> Tensor:
    return _call(PRIMITIVES["relu"], a)


def gelu(a: Tensor) -> Tensor:
    return _call(PRIMITIVES["gelu"], a)


def sigmoid(a: Tensor) -> Tensor:
    return _call(PRIMITIVES["sigmoid"], a)


def softplus(a: Tensor) -> Tensor:
    return _call(PRIMITIVES["softplus"], a)


def absolute(a: Tensor) -> Tensor:
    return _call(PRIMITIVES["abs"], a)


def sum_all(a: Tensor) -> Tensor:
    return _call(PRIMITIVES["sum"], a)


def mean(a: Tensor) -> Tensor:
    return _call(PRIMITIVES["mean"], a)


def layer_norm(a: Tensor) -> Tensor:
    return _call(PRIMITIVES["layer_norm"], a)


def masked_softmax(a: Tensor, mask) -> Tensor:
    """Differentiable masked softmax; ``out.meta['all_masked']`` flags empty rows."""
    mask = nm.as_matrix(mask)
    out = _call(PRIMITIVES["masked_softmax"], a, mask=mask)
    out.meta = {"all_masked": ~(mask == 0).any(axis=1)}
    return out


# -- composite helpers ------------------------------------------------------

def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = matmul(x, w)
    return add_row(y, b) if b is not None else y


def feed_forward(x: Tensor, w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor) -> Tensor:
    """Two-layer GELU block with residual: ``x + W2·gelu(W1·x + b1) + b2``."""
    return add(x, linear(gelu(linear(x, w1, b1)), w2, b2))


def norm_affine(x: Tensor, gain: Tensor, bias: Tensor) -> Tensor:
    return add_row(mul_row(layer_norm(x), gain), bias)


# -- verification -----------------------------------------------------------

def finite_diff_check(
    f: Callable[[Graph], Tensor],
    params: Sequence[Parameter],
    h: float = 1e-5,
    max_coords_per_param: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Largest relative gap between analytic and central-difference gradients.

    ``f`` builds a scalar (1×1) tensor on the graph it is handed.  Values
    taken through :meth:`Graph.detached_value` stay at their unperturbed
    values during perturbation, matching the gradient's view.  The
    relative error of a coordinate is
    ``|analytic - (f(θ+h) - f(θ-h)) / 2h| / max(1, |analytic|)``.
    With ``max_coords_per_param`` set, that many coordinates are sampled per
    parameter (all of them when the parameter is smaller).
    """
    if h <= 0:
        raise ValueError("finite-difference step must be positive")
    for p in params:
        p.zero_grad()
    g = Graph()
    out = f(g)
    if out.shape != (1, 1):
        raise ShapeError(f"finite_diff_check: expected scalar output, got {out.shape}")
    if not np.isfinite(out.value).all():
        raise FiniteDiffError("non-finite value at the unperturbed point")
    g.backward(out)
    rng = rng if rng is not None else np.random.default_rng(0)

    frozen = list(g.detached)

    def value() -> float:
        return float(f(Graph(record=False, frozen=frozen)).value[0, 0])

    worst = 0.0
    for p in params:
        analytic = p.grad.copy()
        flat = p.value.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords_per_param is not None and flat.size > max_coords_per_param:
            coords = np.sort(rng.choice(flat.size, size=max_coords_per_param, replace=False))
        for k in coords:
            orig = flat[k]
            flat[k] = orig + h
            up = value()
            flat[k] = orig - h
            down = value()
            flat[k] = orig
            if not (np.isfinite(up) and np.isfinite(down)):
                idx = np.unravel_index(k, p.shape)
                raise FiniteDiffError(f"non-finite value when perturbing {p.name}{tuple(int(i) for i in idx)}")
            numeric = (up - down) / (2 * h)
            a = analytic.reshape(-1)[k]
            worst = max(worst, abs(a - numeric) / max(1.0, abs(a)))
    return worst
