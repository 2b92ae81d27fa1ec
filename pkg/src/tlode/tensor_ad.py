"""Dense float64 arrays with a small reverse-mode differentiation tape.

Values are plain ``numpy.ndarray`` objects of rank 0, 1 or 2. A :class:`Tape`
records primitive operations on :class:`Var` handles; the recorded program can
be replayed with new input values and differentiated in reverse.

The module also exposes *generic* primitive functions (:func:`add`,
:func:`matmul`, :func:`tanh`, ...) that accept ndarrays, tape variables or any
object implementing the matching method. The vector fields and jet rules are
written against these so that one definition serves plain evaluation,
reverse-mode training, Taylor-mode jets and nested forward duals.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

import numpy as np

__all__ = [
    "Tape",
    "Var",
    "TapeError",
    "ShapeError",
    "NonFiniteError",
    "as_tensor",
    "make_rng",
    "AdamState",
    "adam_step",
    "OpCounter",
    "add",
    "sub",
    "mul",
    "neg",
    "scale",
    "matmul",
    "tanh",
    "sigmoid",
    "softplus",
    "exp",
    "sin",
    "cos",
    "relu",
    "square",
    "total",
    "value_of",
]


class TapeError(RuntimeError):
    """Misuse of a tape (backward before forward, missing cotangent, ...)."""


class ShapeError(ValueError):
    """Shape mismatch raised while evaluating a recorded node."""

    def __init__(self, message: str, node_index: int | None = None):
        super().__init__(message)
        self.node_index = node_index


class NonFiniteError(FloatingPointError):
    """A NaN or Inf reached a place where only finite values are allowed."""

    def __init__(self, message: str, name: str | None = None):
        super().__init__(message)
        self.name = name


def as_tensor(data: Any, name: str = "tensor") -> np.ndarray:
    """Validate and copy ``data`` into a finite float64 array of rank <= 2."""
    arr = np.array(data, dtype=np.float64)
    if arr.ndim > 2:
        raise ShapeError(f"{name}: rank {arr.ndim} > 2 is not supported")
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{name}: non-finite entries", name=name)
    return arr


def make_rng(seed: int) -> np.random.Generator:
    """PCG64 generator; identical seeds give identical streams everywhere."""
    if seed < 0 or seed >= 2**64:
        raise ValueError("seed must be an unsigned 64-bit integer")
    return np.random.Generator(np.random.PCG64(seed))


# ---------------------------------------------------------------------------
# primitive registry: forward function and vector-Jacobian product
# ---------------------------------------------------------------------------


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _sigmoid(u):
    return 0.5 * (1.0 + np.tanh(0.5 * u))


def _vjp_matmul(g, out, a, b):
    if a.ndim == 1 and b.ndim == 2:
        return b @ g, np.outer(a, g)
    if a.ndim == 2 and b.ndim == 1:
        return np.outer(g, b), a.T @ g
    if a.ndim == 1 and b.ndim == 1:
        return g * b, g * a
    return g @ b.T, a.T @ g


def _vjp_sum(g, out, a, axis=None):
    if axis is None:
        return (np.broadcast_to(g, a.shape).copy(),)
    return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)


_PRIMS: dict[str, tuple[Callable, Callable]] = {
    "add": (lambda a, b: a + b,
            lambda g, o, a, b: (_unbroadcast(g, np.shape(a)), _unbroadcast(g, np.shape(b)))),
    "sub": (lambda a, b: a - b,
            lambda g, o, a, b: (_unbroadcast(g, np.shape(a)), _unbroadcast(-g, np.shape(b)))),
    "mul": (lambda a, b: a * b,
            lambda g, o, a, b: (_unbroadcast(g * b, np.shape(a)), _unbroadcast(g * a, np.shape(b)))),
    "div": (lambda a, b: a / b,
            lambda g, o, a, b: (_unbroadcast(g / b, np.shape(a)),
                                _unbroadcast(-g * o / b, np.shape(b)))),
    "neg": (lambda a: -a, lambda g, o, a: (-g,)),
    "scale": (lambda a, c: a * c, lambda g, o, a, c: (g * c,)),
    "matmul": (lambda a, b: a @ b, _vjp_matmul),
    "tanh": (np.tanh, lambda g, o, a: (g * (1.0 - o * o),)),
    "sigmoid": (_sigmoid, lambda g, o, a: (g * o * (1.0 - o),)),
    "softplus": (lambda a: np.logaddexp(0.0, a), lambda g, o, a: (g * _sigmoid(a),)),
    "exp": (np.exp, lambda g, o, a: (g * o,)),
    "sin": (np.sin, lambda g, o, a: (g * np.cos(a),)),
    "cos": (np.cos, lambda g, o, a: (-g * np.sin(a),)),
    "relu": (lambda a: np.maximum(a, 0.0), lambda g, o, a: (g * (a > 0.0),)),
    "sum": (lambda a, axis=None: np.sum(a, axis=axis), _vjp_sum),
    "reshape": (lambda a, shape: np.reshape(a, shape),
                lambda g, o, a, shape: (np.reshape(g, np.shape(a)),)),
    "transpose": (lambda a: a.T, lambda g, o, a: (g.T,)),
}

@dataclass
class _Node:
    kind: str  # "input" | "param" | "const" | "op"
    op: str | None = None
    inputs: tuple[int, ...] = ()
    attrs: dict = field(default_factory=dict)
    name: str | None = None
    shape: tuple | None = None


class Var:
    """Handle to one node of a :class:`Tape`."""

    __slots__ = ("tape", "index")
    __array_ufunc__ = None  # make numpy defer to our reflected operators

    def __init__(self, tape: "Tape", index: int):
        self.tape = tape
        self.index = index

    @property
    def value(self) -> np.ndarray:
        return self.tape.values[self.index]

    @property
    def shape(self) -> tuple:
        return self.tape.nodes[self.index].shape

    @property
    def ndim(self) -> int:
        return len(self.shape)

    def __repr__(self) -> str:
        node = self.tape.nodes[self.index]
        return f"Var(#{self.index}, {node.kind}:{node.op or node.name}, shape={node.shape})"

    def _bin(self, op, other, reverse=False):
        other = self.tape._lift(other)
        if other is None:
            return NotImplemented
        a, b = (other, self) if reverse else (self, other)
        return self.tape._record(op, (a, b))

    def __add__(self, o): return self._bin("add", o)
    def __radd__(self, o): return self._bin("add", o, True)
    def __sub__(self, o): return self._bin("sub", o)
    def __rsub__(self, o): return self._bin("sub", o, True)
    def __mul__(self, o):
        if isinstance(o, (int, float)):
            return self.tape._record("scale", (self,), c=float(o))
        return self._bin("mul", o)
    def __rmul__(self, o):
        if isinstance(o, (int, float)):
            return self.tape._record("scale", (self,), c=float(o))
        return self._bin("mul", o, True)
    def __truediv__(self, o):
        if isinstance(o, (int, float)):
            return self.tape._record("scale", (self,), c=1.0 / float(o))
        return self._bin("div", o)
    def __rtruediv__(self, o): return self._bin("div", o, True)
    def __matmul__(self, o): return self._bin("matmul", o)
    def __rmatmul__(self, o): return self._bin("matmul", o, True)
    def __neg__(self): return self.tape._record("neg", (self,))

    def __pow__(self, k):
        if not isinstance(k, int) or k < 0:
            return NotImplemented
        out = None
        for _ in range(k):
            out = self if out is None else out * self
        return out if out is not None else self * 0.0 + 1.0

    def tanh(self): return self.tape._record("tanh", (self,))
    def sigmoid(self): return self.tape._record("sigmoid", (self,))
    def softplus(self): return self.tape._record("softplus", (self,))
    def exp(self): return self.tape._record("exp", (self,))
    def sin(self): return self.tape._record("sin", (self,))
    def cos(self): return self.tape._record("cos", (self,))
    def relu(self): return self.tape._record("relu", (self,))
    def sum(self, axis=None): return self.tape._record("sum", (self,), axis=axis)
    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], tuple):
            shape = shape[0]
        return self.tape._record("reshape", (self,), shape=tuple(shape))

    @property
    def T(self): return self.tape._record("transpose", (self,))


class Tape:
    """Record of primitive operations, replayable forward and reverse.

    Nodes whose inputs all carry values are evaluated eagerly while they are
    recorded. Placeholders created with ``tape.input(shape=...)`` carry no
    value until :meth:`forward` is called, which lets a program be recorded
    once and replayed with different inputs.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.values: list[np.ndarray | None] = []
        self._inputs: list[int] = []
        self._params: list[int] = []
        self._outputs: list[int] = []
        self._const_ids: dict[int, tuple] = {}
        self.executed = False

    # -- leaves ------------------------------------------------------------
    def _leaf(self, kind, value, name, shape=None) -> Var:
        if value is not None:
            value = as_tensor(value, name or kind)
            shape = value.shape
        self.nodes.append(_Node(kind=kind, name=name, shape=tuple(shape) if shape is not None else None))
        self.values.append(value)
        return Var(self, len(self.nodes) - 1)

    def input(self, value=None, name: str | None = None, shape=None) -> Var:
        v = self._leaf("input", value, name or f"input{len(self._inputs)}", shape)
        self._inputs.append(v.index)
        return v

    def param(self, value, name: str | None = None) -> Var:
        v = self._leaf("param", value, name or f"param{len(self._params)}")
        self._params.append(v.index)
        return v

    def const(self, value) -> Var:
        # arrays are cached by identity; the cache keeps them alive so ids stay unique
        if isinstance(value, np.ndarray):
            hit = self._const_ids.get(id(value))
            if hit is not None and hit[0] is value:
                return Var(self, hit[1])
        arr = np.asarray(value, dtype=np.float64)
        self.nodes.append(_Node(kind="const", shape=arr.shape))
        self.values.append(arr)
        if isinstance(value, np.ndarray):
            self._const_ids[id(value)] = (value, len(self.nodes) - 1)
        return Var(self, len(self.nodes) - 1)

    def _lift(self, other):
        if isinstance(other, Var):
            if other.tape is not self:
                raise TapeError("cannot mix variables from different tapes")
            return other
        if isinstance(other, (np.ndarray, int, float, np.floating)):
            return self.const(other)
        return None

    @property
    def params(self) -> list[Var]:
        return [Var(self, i) for i in self._params]

    # -- recording ---------------------------------------------------------
    def _record(self, op: str, args: tuple[Var, ...], **attrs) -> Var:
        idx = len(self.nodes)
        node = _Node(kind="op", op=op, inputs=tuple(a.index for a in args), attrs=attrs)
        self.nodes.append(node)
        self.values.append(None)
        if all(self.values[i] is not None for i in node.inputs):
            self._eval_node(idx)
        else:
            node.shape = None
        return Var(self, idx)

    def _eval_node(self, idx: int) -> None:
        node = self.nodes[idx]
        fwd = _PRIMS[node.op][0]
        args = [self.values[i] for i in node.inputs]
        try:
            with np.errstate(over="ignore", invalid="ignore"):
                out = np.asarray(fwd(*args, **node.attrs), dtype=np.float64)
        except ValueError as exc:
            shapes = [np.shape(a) for a in args]
            raise ShapeError(f"node {idx} ({node.op}): incompatible shapes {shapes}: {exc}",
                             node_index=idx) from None
        node.shape = out.shape
        self.values[idx] = out

    def mark_output(self, *vars: Var) -> None:
        self._outputs.extend(v.index for v in vars)

    # -- replay ------------------------------------------------------------
    def forward(self, inputs: Sequence[Any]) -> list[np.ndarray]:
        """Re-evaluate the whole program with new values for the inputs."""
        if len(inputs) != len(self._inputs):
            raise ShapeError(f"expected {len(self._inputs)} inputs, got {len(inputs)}")
        for idx, val in zip(self._inputs, inputs):
            arr = as_tensor(val, self.nodes[idx].name)
            declared = self.nodes[idx].shape
            if declared is not None and arr.shape != declared:
                raise ShapeError(f"node {idx} ({self.nodes[idx].name}): expected shape "
                                 f"{declared}, got {arr.shape}", node_index=idx)
            self.values[idx] = arr
        for idx, node in enumerate(self.nodes):
            if node.kind == "op":
                self._eval_node(idx)
        self.executed = True
        return [self.values[i] for i in self._outputs]

    # -- reverse pass --------------------------------------------------------
    def backward(self, output: Var | None = None, cotangent=None,
                 wrt: Sequence[Var] | None = None) -> list[np.ndarray]:
        """Gradients of ``output`` (contracted with ``cotangent``) w.r.t. parameters.

        Returns one array per parameter in registration order, or per entry of
        ``wrt`` when given.
        """
        if output is None:
            if len(self._outputs) != 1:
                raise TapeError("backward needs an output variable")
            output = Var(self, self._outputs[0])
        if self.values[output.index] is None:
            raise TapeError("backward called before forward")
        out_val = self.values[output.index]
        if cotangent is None:
            if out_val.size != 1:
                raise TapeError("non-scalar objective requires an explicit cotangent")
            cotangent = np.ones_like(out_val)
        cotangent = np.asarray(cotangent, dtype=np.float64)
        if cotangent.shape != out_val.shape:
            raise ShapeError(f"cotangent shape {cotangent.shape} != output shape {out_val.shape}")

        grads: list[np.ndarray | None] = [None] * (output.index + 1)
        grads[output.index] = cotangent
        for idx in range(output.index, -1, -1):
            g = grads[idx]
            node = self.nodes[idx]
            if g is None or node.kind != "op":
                continue
            vjp = _PRIMS[node.op][1]
            args = [self.values[i] for i in node.inputs]
            parts = vjp(g, self.values[idx], *args, **node.attrs)
            for i, gi in zip(node.inputs, parts):
                if self.nodes[i].kind == "const":
                    continue
                grads[i] = gi if grads[i] is None else grads[i] + gi
        targets = [v.index for v in wrt] if wrt is not None else self._params
        out = []
        for i in targets:
            gi = grads[i] if i < len(grads) else None
            shape = self.values[i].shape
            out.append(np.zeros(shape) if gi is None else np.reshape(gi, shape))
        return out


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: Sequence[np.ndarray], **kw) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], **kw)


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: AdamState,
              lr: float, decay: float = 0.0, names: Sequence[str] | None = None
              ) -> tuple[list[np.ndarray], AdamState]:
    """One Adam update with learning rate ``lr * exp(-decay * t)``.

    ``t`` counts completed steps before this one, so the first step uses
    ``lr``. Inputs are not mutated; new parameter arrays and a new state are
    returned. Non-finite gradients reject the whole step.
    """
    if not (len(params) == len(grads) == len(state.m)):
        raise ShapeError("params, grads and optimizer state disagree in length")
    for k, (p, g) in enumerate(zip(params, grads)):
        if p.shape != g.shape or p.shape != state.m[k].shape:
            raise ShapeError(f"parameter {k}: shape mismatch {p.shape} vs {g.shape}")
        if not np.all(np.isfinite(g)):
            name = names[k] if names else f"param{k}"
            raise NonFiniteError(f"non-finite gradient for {name}", name=name)
    lr_t = lr * math.exp(-decay * state.t)
    t = state.t + 1
    b1, b2 = state.beta1, state.beta2
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        mhat = m / (1.0 - b1**t)
        vhat = v / (1.0 - b2**t)
        new_p.append(p - lr_t * mhat / (np.sqrt(vhat) + state.eps))
        new_m.append(m)
        new_v.append(v)
    return new_p, AdamState(new_m, new_v, t, b1, b2, state.eps)


# ---------------------------------------------------------------------------
# generic primitives
# ---------------------------------------------------------------------------


class OpCounter:
    """Counts array-level primitive evaluations made through the generic API.

    Only operations whose operands are plain arrays are counted, so nested
    containers (duals, jets) are charged for the work they actually expand to.
    """

    active: list["OpCounter"] = []

    def __init__(self):
        self.count = 0

    def __enter__(self):
        OpCounter.active.append(self)
        return self

    def __exit__(self, *exc):
        OpCounter.active.remove(self)
        return False


def _leafy(*xs) -> bool:
    return all(isinstance(x, (np.ndarray, float, int, np.floating)) for x in xs)


def _tick(*xs) -> None:
    if OpCounter.active and _leafy(*xs):
        for c in OpCounter.active:
            c.count += 1


def add(a, b):
    _tick(a, b)
    return a + b


def sub(a, b):
    _tick(a, b)
    return a - b


def mul(a, b):
    _tick(a, b)
    return a * b


def neg(a):
    _tick(a)
    return -a


def scale(a, c: float):
    _tick(a)
    return a * c


def matmul(a, b):
    _tick(a, b)
    return a @ b


def _unary(name: str, npfn: Callable):
    def fn(a):
        if hasattr(a, name):
            return getattr(a, name)()
        _tick(a)
        return npfn(np.asarray(a, dtype=np.float64))
    fn.__name__ = name
    return fn


tanh = _unary("tanh", np.tanh)
sigmoid = _unary("sigmoid", _sigmoid)
softplus = _unary("softplus", lambda a: np.logaddexp(0.0, a))
exp = _unary("exp", np.exp)
sin = _unary("sin", np.sin)
cos = _unary("cos", np.cos)
relu = _unary("relu", lambda a: np.maximum(a, 0.0))


def square(a):
    return mul(a, a)


def total(a):
    """Sum of all entries; works for arrays and tape variables."""
    if isinstance(a, Var):
        return a.sum()
    return np.sum(a)


def value_of(a) -> np.ndarray:
    return a.value if isinstance(a, Var) else np.asarray(a, dtype=np.float64)
