"""Taylor coefficients of ODE solutions.

For an autonomous field ``f`` the solution through ``x`` has the expansion
``x(t + s) = x + sum_l s**l f^[l](x)`` with ``f^[1] = f`` and
``f^[l+1] = (d f^[l] / dx) f / (l + 1)``.

:func:`ode_taylor_coefficients` obtains all ``f^[l]`` with truncated power
series (Taylor-mode) arithmetic: the field is traced once into a small graph
of primitives and the graph is then advanced one series coefficient at a
time, feeding each new output coefficient back in as the next state
coefficient. The work is quadratic in the order.

:func:`nested_jvp_oracle` computes the same quantities by literally nesting
forward-mode Jacobian-vector products. Its cost grows exponentially and it is
only meant as an independent check.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import tensor_ad as ad

__all__ = [
    "Jet",
    "NonSmoothPrimitiveError",
    "SMOOTH_PRIMITIVES",
    "ode_taylor_coefficients",
    "solution_jet",
    "nested_jvp_oracle",
    "truncated_taylor_predict",
    "trace_primitives",
]

SMOOTH_PRIMITIVES = frozenset(
    {"add", "sub", "neg", "scale", "mul", "matmul", "tanh", "sigmoid", "softplus", "exp", "sin", "cos"}
)
ORACLE_MAX_ORDER = 4


class NonSmoothPrimitiveError(ValueError):
    def __init__(self, primitive: str, order: int):
        super().__init__(f"primitive '{primitive}' has no Taylor coefficients beyond order 0 "
                         f"(requested expansion order {order})")
        self.primitive = primitive


@dataclass
class Jet:
    """Truncated Taylor series ``coeffs[0] + coeffs[1] t + ... + coeffs[order] t**order``."""

    coeffs: list

    @property
    def order(self) -> int:
        return len(self.coeffs) - 1

    def __post_init__(self):
        if len(self.coeffs) < 1:
            raise ValueError("a jet needs at least the constant coefficient")
        shapes = {np.shape(ad.value_of(c)) for c in self.coeffs}
        if len(shapes) != 1:
            raise ValueError(f"jet coefficients disagree in shape: {sorted(shapes)}")


# ---------------------------------------------------------------------------
# tracing a field into a primitive graph
# ---------------------------------------------------------------------------


class _Sym:
    __array_ufunc__ = None
    __slots__ = ("graph", "idx")

    def __init__(self, graph: "_Graph", idx: int):
        self.graph = graph
        self.idx = idx

    def _bin(self, op, other, reverse=False):
        o = self.graph.lift(other)
        a, b = (o, self.idx) if reverse else (self.idx, o)
        return self.graph.node(op, (a, b))

    def __add__(self, o): return self._bin("add", o)
    def __radd__(self, o): return self._bin("add", o, True)
    def __sub__(self, o): return self._bin("sub", o)
    def __rsub__(self, o): return self._bin("sub", o, True)

    def __mul__(self, o):
        if isinstance(o, (int, float)):
            return self.graph.node("scale", (self.idx,), float(o))
        return self._bin("mul", o)

    def __rmul__(self, o):
        if isinstance(o, (int, float)):
            return self.graph.node("scale", (self.idx,), float(o))
        return self._bin("mul", o, True)

    def __truediv__(self, o):
        if isinstance(o, (int, float)):
            return self.graph.node("scale", (self.idx,), 1.0 / float(o))
        return NotImplemented

    def __matmul__(self, o): return self._bin("matmul", o)
    def __rmatmul__(self, o): return self._bin("matmul", o, True)
    def __neg__(self): return self.graph.node("neg", (self.idx,))

    def tanh(self): return self.graph.node("tanh", (self.idx,))
    def sigmoid(self): return self.graph.node("sigmoid", (self.idx,))
    def softplus(self): return self.graph.node("softplus", (self.idx,))
    def exp(self): return self.graph.node("exp", (self.idx,))
    def sin(self): return self.graph.node("sin", (self.idx,))
    def cos(self): return self.graph.node("cos", (self.idx,))
    def relu(self): return self.graph.node("relu", (self.idx,))


class _Graph:
    def __init__(self):
        self.ops: list[tuple] = [("input", (), None)]

    def lift(self, value) -> int:
        if isinstance(value, _Sym):
            return value.idx
        self.ops.append(("const", (), value))
        return len(self.ops) - 1

    def node(self, op, args, attr=None) -> _Sym:
        self.ops.append((op, args, attr))
        return _Sym(self, len(self.ops) - 1)


def trace_primitives(field: Callable) -> list[str]:
    """Names of the primitives ``field`` applies to its state argument."""
    g = _Graph()
    field(_Sym(g, 0))
    return [op for op, _, _ in g.ops if op not in ("input", "const")]


# ---------------------------------------------------------------------------
# coefficient arithmetic with None standing for an exact zero
# ---------------------------------------------------------------------------


def _add(a, b):
    if a is None:
        return b
    if b is None:
        return a
    return ad.add(a, b)


def _cauchy(a: list, b: list, k: int, prod=ad.mul):
    """Coefficient ``k`` of the product of two series."""
    out = None
    for j in range(k + 1):
        if a[j] is None or b[k - j] is None:
            continue
        out = _add(out, prod(a[j], b[k - j]))
    return out


def _integral_rule(u: list, z: list, k: int):
    """``y_k`` for ``y' = z u'``: ``(1/k) sum_{j=1..k} j u_j z_{k-j}``."""
    out = None
    for j in range(1, k + 1):
        if u[j] is None or z[k - j] is None:
            continue
        out = _add(out, ad.mul(ad.scale(u[j], float(j)), z[k - j]))
    return None if out is None else ad.scale(out, 1.0 / k)


class _Propagator:
    """Advances a traced graph one Taylor coefficient at a time."""

    def __init__(self, graph: _Graph, order: int):
        self.ops = graph.ops
        self.order = order
        n = len(self.ops)
        self.c: list[list] = [[] for _ in range(n)]
        self.aux: list[list] = [[] for _ in range(n)]   # z-series of tanh/sigmoid, sigmoid of softplus
        self.aux2: list[list] = [[] for _ in range(n)]  # cos of sin, z of softplus' sigmoid

    def step(self, k: int, input_coeff, output: int):
        for i, (op, args, attr) in enumerate(self.ops):
            self.c[i].append(self._coeff(i, op, args, attr, k, input_coeff))
        return self.c[output][k]

    def _coeff(self, i, op, args, attr, k, input_coeff):
        c = self.c
        if op == "input":
            return input_coeff
        if op == "const":
            return attr if k == 0 else None
        if op == "add":
            return _add(c[args[0]][k], c[args[1]][k])
        if op == "sub":
            a, b = c[args[0]][k], c[args[1]][k]
            if b is None:
                return a
            return ad.neg(b) if a is None else ad.sub(a, b)
        if op == "neg":
            a = c[args[0]][k]
            return None if a is None else ad.neg(a)
        if op == "scale":
            a = c[args[0]][k]
            return None if a is None else ad.scale(a, attr)
        if op == "mul":
            return _cauchy(c[args[0]], c[args[1]], k)
        if op == "matmul":
            return _cauchy(c[args[0]], c[args[1]], k, prod=ad.matmul)

        u = c[args[0]]
        if op == "relu":
            if k > 0:
                raise NonSmoothPrimitiveError("relu", self.order)
            return ad.relu(u[0])
        if k == 0:
            return self._order0(i, op, u[0])
        if op == "exp":
            return _integral_rule(u, c[i], k)
        if op in ("tanh", "sigmoid"):
            z = self.aux[i]
            y_k = _integral_rule(u, z, k)
            c[i].append(y_k)  # temporarily visible for the z-series update
            yy = _cauchy(c[i], c[i], k)
            c[i].pop()
            if op == "tanh":
                z.append(None if yy is None else ad.neg(yy))
            else:
                z.append(_add(y_k, None if yy is None else ad.neg(yy)))
            return y_k
        if op == "softplus":
            s, z = self.aux[i], self.aux2[i]
            y_k = _integral_rule(u, s, k)
            s_k = _integral_rule(u, z, k)
            s.append(s_k)
            ss = _cauchy(s, s, k)
            z.append(_add(s_k, None if ss is None else ad.neg(ss)))
            return y_k
        if op in ("sin", "cos"):
            s, co = self.aux[i], self.aux2[i]
            s_k = _integral_rule(u, co, k)
            c_k = _integral_rule(u, s, k)
            c_k = None if c_k is None else ad.neg(c_k)
            s.append(s_k)
            co.append(c_k)
            return s_k if op == "sin" else c_k
        raise NonSmoothPrimitiveError(op, self.order)

    def _order0(self, i, op, u0):
        if u0 is None:
            u0 = 0.0
        if op == "exp":
            return ad.exp(u0)
        if op == "tanh":
            y = ad.tanh(u0)
            self.aux[i].append(ad.sub(1.0, ad.mul(y, y)))
            return y
        if op == "sigmoid":
            s = ad.sigmoid(u0)
            self.aux[i].append(ad.sub(s, ad.mul(s, s)))
            return s
        if op == "softplus":
            s = ad.sigmoid(u0)
            self.aux[i].append(s)
            self.aux2[i].append(ad.sub(s, ad.mul(s, s)))
            return ad.softplus(u0)
        if op in ("sin", "cos"):
            s, co = ad.sin(u0), ad.cos(u0)
            self.aux[i].append(s)
            self.aux2[i].append(co)
            return s if op == "sin" else co
        raise NonSmoothPrimitiveError(op, self.order)


def _zeros_like(x):
    return ad.scale(x, 0.0) if isinstance(x, ad.Var) else np.zeros(np.shape(x))


def solution_jet(field: Callable, x, order: int) -> Jet:
    """Jet of the solution through ``x``: ``coeffs[l] == f^[l](x)``, ``coeffs[0] == x``.

    ``x`` may be an array of shape ``(n,)`` or ``(batch, n)`` or a tape
    variable; field parameters may be tape variables as well, in which case
    every coefficient is differentiable.
    """
    if order < 1:
        raise ValueError("expansion order must be >= 1")
    graph = _Graph()
    output = graph.lift(field(_Sym(graph, 0)))
    prop = _Propagator(graph, order)
    coeffs = [x]
    for k in range(order):
        out = prop.step(k, coeffs[k], output)
        if out is None or isinstance(out, (int, float)):
            out = _zeros_like(x) if out is None else ad.add(_zeros_like(x), out)
        coeffs.append(ad.scale(out, 1.0 / (k + 1)) if k else out)
    return Jet(coeffs)


def ode_taylor_coefficients(field: Callable, x, p: int) -> list:
    """``[f^[1](x), ..., f^[p](x)]`` via Taylor-mode propagation."""
    return solution_jet(field, x, p).coeffs[1:]


# ---------------------------------------------------------------------------
# nested forward-mode oracle
# ---------------------------------------------------------------------------

_tags = itertools.count(1)


class _Dual:
    """First-order forward dual, tagged so that nesting stays unambiguous."""

    __array_ufunc__ = None
    __slots__ = ("p", "t", "tag")

    def __init__(self, p, t, tag):
        self.p, self.t, self.tag = p, t, tag

    def _split(self, other):
        if isinstance(other, _Dual) and other.tag == self.tag:
            return other.p, other.t
        return other, None

    def _defer(self, other):
        return isinstance(other, _Dual) and other.tag > self.tag

    def __add__(self, o):
        if self._defer(o):
            return NotImplemented
        op, ot = self._split(o)
        return _Dual(ad.add(self.p, op), self.t if ot is None else ad.add(self.t, ot), self.tag)

    def __radd__(self, o):
        return self.__add__(o)

    def __sub__(self, o):
        if self._defer(o):
            return NotImplemented
        op, ot = self._split(o)
        return _Dual(ad.sub(self.p, op), self.t if ot is None else ad.sub(self.t, ot), self.tag)

    def __rsub__(self, o):
        return _Dual(ad.sub(o, self.p), ad.neg(self.t), self.tag)

    def __neg__(self):
        return _Dual(ad.neg(self.p), ad.neg(self.t), self.tag)

    def __mul__(self, o):
        if isinstance(o, (int, float)):
            return _Dual(ad.scale(self.p, float(o)), ad.scale(self.t, float(o)), self.tag)
        if self._defer(o):
            return NotImplemented
        op, ot = self._split(o)
        t = ad.mul(self.t, op)
        if ot is not None:
            t = ad.add(t, ad.mul(self.p, ot))
        return _Dual(ad.mul(self.p, op), t, self.tag)

    def __rmul__(self, o):
        if isinstance(o, (int, float)):
            return self.__mul__(o)
        return _Dual(ad.mul(o, self.p), ad.mul(o, self.t), self.tag)

    def __truediv__(self, o):
        if isinstance(o, (int, float)):
            return self.__mul__(1.0 / o)
        return NotImplemented

    def __matmul__(self, o):
        if self._defer(o):
            return NotImplemented
        op, ot = self._split(o)
        t = ad.matmul(self.t, op)
        if ot is not None:
            t = ad.add(t, ad.matmul(self.p, ot))
        return _Dual(ad.matmul(self.p, op), t, self.tag)

    def __rmatmul__(self, o):
        return _Dual(ad.matmul(o, self.p), ad.matmul(o, self.t), self.tag)

    def tanh(self):
        y = ad.tanh(self.p)
        return _Dual(y, ad.mul(ad.sub(1.0, ad.mul(y, y)), self.t), self.tag)

    def sigmoid(self):
        s = ad.sigmoid(self.p)
        return _Dual(s, ad.mul(ad.sub(s, ad.mul(s, s)), self.t), self.tag)

    def softplus(self):
        return _Dual(ad.softplus(self.p), ad.mul(ad.sigmoid(self.p), self.t), self.tag)

    def exp(self):
        y = ad.exp(self.p)
        return _Dual(y, ad.mul(y, self.t), self.tag)

    def sin(self):
        return _Dual(ad.sin(self.p), ad.mul(ad.cos(self.p), self.t), self.tag)

    def cos(self):
        return _Dual(ad.cos(self.p), ad.neg(ad.mul(ad.sin(self.p), self.t)), self.tag)

    def relu(self):
        raise NonSmoothPrimitiveError("relu", 2)


def _jvp(g: Callable, x, v):
    tag = next(_tags)
    out = g(_Dual(x, v, tag))
    if isinstance(out, _Dual) and out.tag == tag:
        return out.t
    return ad.scale(out, 0.0)


def nested_jvp_oracle(field: Callable, x, p: int) -> list:
    """``[f^[1](x), ..., f^[p](x)]`` by nesting Jacobian-vector products (p <= 4)."""
    if p < 1:
        raise ValueError("expansion order must be >= 1")
    if p > ORACLE_MAX_ORDER:
        raise ValueError(f"oracle limited to order <= {ORACLE_MAX_ORDER} (exponential cost)")

    def lift(g, l):
        # f^[l+1](y) = (d f^[l](y) . f(y)) / (l + 1)
        return lambda y: ad.scale(_jvp(g, y, field(y)), 1.0 / (l + 1))

    x = np.asarray(x, dtype=np.float64)
    funcs = [field]
    for l in range(1, p):
        funcs.append(lift(funcs[-1], l))
    return [np.asarray(g(x), dtype=np.float64) + np.zeros_like(x) for g in funcs]


def truncated_taylor_predict(x, coeffs: Sequence, dt):
    """``x + sum_{l>=1} dt**l * coeffs[l-1]``."""
    out = x
    dt_pow = 1.0
    for c in coeffs:
        dt_pow = dt_pow * dt
        out = ad.add(out, ad.mul(c, dt_pow) if not np.isscalar(dt_pow) else ad.scale(c, float(dt_pow)))
    return out
