"""Reverse-mode differentiation on a flat tape, plus forward 2-jets.

Nodes hold float64 numpy arrays (scalars are 0-d arrays).  Every primitive
records its value, its parents and a vector-Jacobian product; a backward
sweep walks the tape once in reverse.  Second spatial derivatives of a
network are obtained by pushing :class:`Jet2` triples through the network
with the same primitives, so the jet arithmetic itself lands on the tape
and parameter gradients flow through ``u_xx``.

The functions in this module accept either tape nodes or plain arrays;
with arrays they reduce to the corresponding numpy call, which keeps
evaluation-only code paths bit-identical to the recorded ones.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Callable, Sequence

import numpy as np

__all__ = [
    "NumericalError",
    "ContractError",
    "Node",
    "Tape",
    "Jet2",
    "ParameterVector",
    "eval_and_grad",
    "grad_through_jet",
    "jet2_forward",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "power",
    "matmul",
    "sin",
    "cos",
    "tanh",
    "sigmoid",
    "sqrt",
    "square",
    "total",
    "norm2",
    "reshape",
    "transpose",
    "value_of",
]


class NumericalError(ArithmeticError):
    """A non-finite value or gradient appeared; ``kind`` names the primitive."""

    def __init__(self, message: str, kind: str | None = None):
        super().__init__(message)
        self.kind = kind


class ContractError(ValueError):
    """Caller violated a documented precondition."""


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


class Node:
    __slots__ = ("value", "tape", "index", "parents", "vjp", "kind")

    # make numpy defer to the reflected Node operators
    __array_ufunc__ = None

    def __init__(self, tape, value, parents, vjp, kind):
        self.tape = tape
        self.value = value
        self.parents = parents
        self.vjp = vjp
        self.kind = kind
        self.index = len(tape.nodes)
        tape.nodes.append(self)

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node({self.kind}, shape={self.value.shape})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, k):
        return power(self, k)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, key):
        return take(self, key)

    @property
    def T(self):
        return transpose(self)


class Tape:
    """Ordered record of primitive operations.

    Inputs always precede the nodes that consume them because a node is
    appended at construction time, after its parents exist.
    """

    def __init__(self):
        self.nodes: list[Node] = []

    def __len__(self):
        return len(self.nodes)

    def variable(self, value) -> Node:
        return Node(self, np.array(value, dtype=np.float64), (), None, "input")

    def backward(self, output: Node, seed=None) -> list:
        """Accumulate adjoints of ``output`` into every upstream node.

        Returns the adjoint list indexed like ``self.nodes``; nodes that do
        not influence ``output`` keep ``None``.
        """
        if output.tape is not self:
            raise ContractError("output node belongs to a different tape")
        adjoints: list = [None] * (output.index + 1)
        adjoints[output.index] = (
            np.ones_like(output.value) if seed is None else np.asarray(seed, dtype=np.float64)
        )
        nodes = self.nodes
        for i in range(output.index, -1, -1):
            g = adjoints[i]
            if g is None:
                continue
            node = nodes[i]
            if node.vjp is None:
                continue
            contribs = node.vjp(g)
            for parent, c in zip(node.parents, contribs):
                if c is None or not isinstance(parent, Node):
                    continue
                j = parent.index
                if adjoints[j] is None:
                    adjoints[j] = c
                else:
                    adjoints[j] = adjoints[j] + c
        return adjoints

    def gradient(self, output: Node, wrt: Sequence[Node]) -> list[np.ndarray]:
        if not np.isfinite(output.value).all():
            raise NumericalError(
                f"non-finite objective value; first offender: {self._first_nonfinite_kind()}",
                self._first_nonfinite_kind(),
            )
        adjoints = self.backward(output)
        grads = []
        for leaf in wrt:
            g = adjoints[leaf.index] if leaf.index < len(adjoints) else None
            grads.append(np.zeros_like(leaf.value) if g is None else np.asarray(g, dtype=np.float64))
        for g in grads:
            if not np.isfinite(g).all():
                kind = self._first_nonfinite_adjoint_kind(adjoints)
                raise NumericalError(f"non-finite gradient produced in backward pass of {kind!r}", kind)
        return grads

    def _first_nonfinite_kind(self) -> str:
        for node in self.nodes:
            if not np.isfinite(node.value).all():
                return node.kind
        return "unknown"

    def _first_nonfinite_adjoint_kind(self, adjoints) -> str:
        for i in range(len(adjoints) - 1, -1, -1):
            g = adjoints[i]
            if g is not None and not np.isfinite(g).all():
                return self.nodes[i].kind
        return "unknown"


def _tape_of(*xs) -> Tape | None:
    for x in xs:
        if isinstance(x, Node):
            return x.tape
    return None


def value_of(x) -> np.ndarray:
    return x.value if isinstance(x, Node) else np.asarray(x, dtype=np.float64)


# ---------------------------------------------------------------------------
# primitives


def add(a, b):
    tape = _tape_of(a, b)
    if tape is None:
        return np.add(a, b)
    av, bv = value_of(a), value_of(b)
    sa, sb = av.shape, bv.shape
    out = av + bv

    def vjp(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _record(tape, "add", out, (a, b), vjp)


def sub(a, b):
    tape = _tape_of(a, b)
    if tape is None:
        return np.subtract(a, b)
    av, bv = value_of(a), value_of(b)
    sa, sb = av.shape, bv.shape

    def vjp(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return _record(tape, "add", av - bv, (a, b), vjp)


def mul(a, b):
    tape = _tape_of(a, b)
    if tape is None:
        return np.multiply(a, b)
    av, bv = value_of(a), value_of(b)

    def vjp(g):
        return _unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)

    return _record(tape, "mul", av * bv, (a, b), vjp)


def div(a, b):
    tape = _tape_of(a, b)
    if tape is None:
        return np.divide(a, b)
    av, bv = value_of(a), value_of(b)
    out = av / bv

    def vjp(g):
        ga = g / bv
        return _unbroadcast(ga, av.shape), _unbroadcast(-ga * out, bv.shape)

    return _record(tape, "division", out, (a, b), vjp)


def neg(a):
    if not isinstance(a, Node):
        return np.negative(a)
    return _record(a.tape, "mul", -a.value, (a,), lambda g: (-g,))


def power(a, k: float):
    """``a**k`` for a constant real exponent."""
    if not isinstance(a, Node):
        return np.power(a, k)
    av = a.value
    out = av**k

    def vjp(g):
        return (g * k * av ** (k - 1),)

    return _record(a.tape, "power", out, (a,), vjp)


def square(a):
    if not isinstance(a, Node):
        return np.square(a)
    av = a.value
    return _record(a.tape, "mul", av * av, (a,), lambda g: (2.0 * g * av,))


def matmul(a, b):
    tape = _tape_of(a, b)
    if tape is None:
        return np.matmul(a, b)
    av, bv = value_of(a), value_of(b)

    def vjp(g):
        if av.ndim == 1 and bv.ndim == 1:
            return g * bv, g * av
        if bv.ndim == 1:
            return np.outer(g, bv), av.T @ g
        if av.ndim == 1:
            return bv @ g, np.outer(av, g)
        return g @ bv.T, av.T @ g

    return _record(tape, "mul", av @ bv, (a, b), vjp)


def sin(a):
    if not isinstance(a, Node):
        return np.sin(a)
    av = a.value
    return _record(a.tape, "sin", np.sin(av), (a,), lambda g: (g * np.cos(av),))


def cos(a):
    if not isinstance(a, Node):
        return np.cos(a)
    av = a.value
    return _record(a.tape, "sin", np.cos(av), (a,), lambda g: (-g * np.sin(av),))


def tanh(a):
    if not isinstance(a, Node):
        return np.tanh(a)
    out = np.tanh(a.value)
    return _record(a.tape, "tanh", out, (a,), lambda g: (g * (1.0 - out * out),))


def _sigmoid(x):
    # split by sign so large |x| neither overflows nor loses the tail
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a):
    if not isinstance(a, Node):
        return _sigmoid(a)
    out = _sigmoid(a.value)
    return _record(a.tape, "sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def sqrt(a):
    if not isinstance(a, Node):
        return np.sqrt(a)
    out = np.sqrt(a.value)
    return _record(a.tape, "square-root", out, (a,), lambda g: (0.5 * g / out,))


def total(a, axis=None):
    """Sum of entries (optionally along one axis)."""
    if not isinstance(a, Node):
        return np.sum(a, axis=axis)
    av = a.value
    shape = av.shape

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _record(a.tape, "add", np.sum(av, axis=axis), (a,), vjp)


def norm2(a):
    """Euclidean norm of all entries; the subgradient at zero is taken as 0."""
    if not isinstance(a, Node):
        return np.sqrt(np.sum(np.square(a)))
    av = a.value
    out = np.sqrt(np.sum(av * av))

    def vjp(g):
        if out == 0.0:
            return (np.zeros_like(av),)
        return (g * av / out,)

    return _record(a.tape, "square-root", np.asarray(out), (a,), vjp)


def reshape(a, shape):
    if not isinstance(a, Node):
        return np.reshape(a, shape)
    old = a.value.shape
    return _record(a.tape, "reshape", a.value.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a):
    if not isinstance(a, Node):
        return np.transpose(a)
    return _record(a.tape, "reshape", a.value.T, (a,), lambda g: (g.T,))


def take(a, key):
    """Basic (slice/integer) indexing."""
    if not isinstance(a, Node):
        return a[key]
    av = a.value

    def vjp(g):
        out = np.zeros_like(av)
        out[key] += g
        return (out,)

    return _record(a.tape, "index", av[key], (a,), vjp)


def _record(tape, kind, value, parents, vjp):
    return Node(tape, np.asarray(value, dtype=np.float64), parents, vjp, kind)


# ---------------------------------------------------------------------------
# parameters


@dataclass
class ParameterVector:
    """Flat float64 parameter array with the layout that slices it.

    ``layout`` is a list of ``(name, shape)`` pairs in storage order.
    """

    values: np.ndarray
    layout: list[tuple[str, tuple[int, ...]]]

    def __post_init__(self):
        self.values = np.ascontiguousarray(self.values, dtype=np.float64).ravel()
        self.layout = [(str(n), tuple(int(s) for s in shape)) for n, shape in self.layout]
        expected = sum(int(np.prod(s)) for _, s in self.layout)
        if expected != self.values.size:
            raise ContractError(f"layout describes {expected} values but got {self.values.size}")

    def __len__(self):
        return self.values.size

    def offsets(self) -> dict[str, tuple[int, tuple[int, ...]]]:
        out, pos = {}, 0
        for name, shape in self.layout:
            out[name] = (pos, shape)
            pos += int(np.prod(shape))
        return out

    def replace(self, values) -> "ParameterVector":
        return ParameterVector(np.array(values, dtype=np.float64), list(self.layout))

    def to_bytes(self) -> bytes:
        return self.values.astype("<f8").tobytes()

    @classmethod
    def from_bytes(cls, data: bytes, layout) -> "ParameterVector":
        return cls(np.frombuffer(data, dtype="<f8").astype(np.float64), layout)


def unpack(flat, layout) -> dict[str, Any]:
    """Slice a flat vector (node or array) into named, reshaped pieces."""
    pieces, pos = {}, 0
    for name, shape in layout:
        n = int(np.prod(shape))
        pieces[name] = reshape(flat[pos : pos + n], shape)
        pos += n
    return pieces


# ---------------------------------------------------------------------------
# entry points


def eval_and_grad(objective: Callable, params) -> tuple[float, np.ndarray]:
    """Evaluate ``objective(p)`` on a fresh tape and return value and gradient.

    ``objective`` receives the parameter leaf node and must return a scalar
    node built from it.
    """
    values = params.values if isinstance(params, ParameterVector) else np.asarray(params, dtype=np.float64)
    tape = Tape()
    p = tape.variable(values)
    out = objective(p)
    if not isinstance(out, Node):
        out = tape.variable(out)
    if out.value.size != 1:
        raise ContractError("objective must return a scalar")
    (g,) = tape.gradient(out, [p])
    return float(out.value), g


grad_through_jet = eval_and_grad


# ---------------------------------------------------------------------------
# jets


@dataclass
class Jet2:
    """Value with first and second derivative along one fixed direction.

    ``d2`` may be ``None`` as a structural zero (affine inputs).
    """

    value: Any
    d1: Any
    d2: Any = None

    def __add__(self, other):
        if isinstance(other, Jet2):
            return Jet2(self.value + other.value, self.d1 + other.d1, _add_opt(self.d2, other.d2))
        return Jet2(self.value + other, self.d1, self.d2)

    __radd__ = __add__

    def __mul__(self, other):
        if isinstance(other, Jet2):
            d2 = mul(mul(self.d1, other.d1), 2.0)
            if self.d2 is not None:
                d2 = self.d2 * other.value + d2
            if other.d2 is not None:
                d2 = d2 + self.value * other.d2
            return Jet2(self.value * other.value, self.d1 * other.value + self.value * other.d1, d2)
        return Jet2(self.value * other, self.d1 * other, None if self.d2 is None else self.d2 * other)

    __rmul__ = __mul__

    def linear(self, weight, bias=None) -> "Jet2":
        """Apply ``x @ weight + bias`` (bias does not touch derivatives)."""
        v = matmul(self.value, weight)
        if bias is not None:
            v = v + bias
        return Jet2(v, matmul(self.d1, weight), None if self.d2 is None else matmul(self.d2, weight))

    def apply(self, fn: str) -> "Jet2":
        return activate_jet(self, fn)


def _add_opt(a, b):
    if a is None:
        return b
    if b is None:
        return a
    return a + b


def activation_with_derivatives(z, fn: str):
    """Return ``(s(z), s'(z), s''(z))`` built from recorded primitives."""
    if fn == "sine":
        a = sin(z)
        return a, cos(z), neg(a)
    if fn == "tanh":
        a = tanh(z)
        s1 = 1.0 - square(a)
        return a, s1, -2.0 * (a * s1)
    if fn == "sigmoid":
        a = sigmoid(z)
        s1 = a * (1.0 - a)
        return a, s1, s1 * (1.0 - 2.0 * a)
    raise ContractError(f"unknown activation {fn!r}")


def activate_jet(jet: Jet2, fn: str) -> Jet2:
    a, s1, s2 = activation_with_derivatives(jet.value, fn)
    d1 = s1 * jet.d1
    d2 = s2 * square(jet.d1)
    if jet.d2 is not None:
        d2 = d2 + s1 * jet.d2
    return Jet2(a, d1, d2)


def check_direction(direction) -> np.ndarray:
    d = np.asarray(direction, dtype=np.float64).ravel()
    if not np.isclose(np.linalg.norm(d), 1.0, rtol=0.0, atol=1e-12):
        raise ContractError(f"direction must have unit norm, got |d|={np.linalg.norm(d):.6g}")
    return d


def jet2_forward(spec, params, point, direction) -> Jet2:
    """Propagate a 2-jet through an MLP at ``point`` along ``direction``.

    ``point`` may be a single coordinate or a batch (rows).  When ``params``
    is a tape node the resulting components are differentiable in it.
    """
    from .models import mlp_jets

    d = check_direction(direction)
    pts = np.atleast_2d(np.asarray(point, dtype=np.float64))
    if pts.shape[1] != d.size:
        pts = pts.reshape(-1, d.size)
    _, out_value, out_jets = mlp_jets(spec, params, pts, [d])
    jet = out_jets[0]
    return Jet2(out_value, jet.d1, jet.d2 if jet.d2 is not None else 0.0 * out_value)
