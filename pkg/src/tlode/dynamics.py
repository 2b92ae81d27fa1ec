"""Vector fields: analytic test systems and perceptron dynamics.

States use the row convention: a single state has shape ``(n,)`` and a batch
has shape ``(batch, n)``. Every field is written against the generic
primitives of :mod:`tlode.tensor_ad`, so the same callable accepts arrays,
tape variables, jets under construction and forward duals.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor_ad as ad
from .taylor_jets import SMOOTH_PRIMITIVES

__all__ = [
    "ACTIVATIONS",
    "Mlp",
    "VectorField",
    "LinearField",
    "PendulumField",
    "MlpField",
    "LinearStiffSystem",
    "stiff_system",
    "expm",
    "exact_linear_solution",
    "lipschitz_estimate",
]

ACTIVATIONS = {
    "none": lambda h: h,
    "tanh": ad.tanh,
    "sigmoid": ad.sigmoid,
    "softplus": ad.softplus,
    "exp": ad.exp,
    "relu": ad.relu,
}
SMOOTH_ACTIVATIONS = frozenset({"none", "tanh", "sigmoid", "softplus", "exp"})


@dataclass
class Mlp:
    """Fully connected network ``h -> act(h @ W + b)`` layer by layer.

    ``activations[i]`` applies after layer ``i``; use ``"none"`` for an affine
    layer. ``params`` holds ``[W0, b0, W1, b1, ...]`` and may contain tape
    variables while training.
    """

    sizes: tuple[int, ...]
    activations: tuple[str, ...]
    params: list
    bias: bool = True

    def __post_init__(self):
        self.sizes = tuple(int(s) for s in self.sizes)
        self.activations = tuple(self.activations)
        if len(self.activations) != len(self.sizes) - 1:
            raise ValueError("need one activation per layer")
        for a in self.activations:
            if a not in ACTIVATIONS:
                raise ValueError(f"unknown activation '{a}'")
        per_layer = 2 if self.bias else 1
        if len(self.params) != per_layer * (len(self.sizes) - 1):
            raise ValueError("parameter list does not match the layer sizes")
        for k, (n_in, n_out) in enumerate(zip(self.sizes[:-1], self.sizes[1:])):
            W = self.params[per_layer * k]
            if tuple(np.shape(ad.value_of(W))) != (n_in, n_out):
                raise ValueError(f"layer {k}: weight shape {np.shape(ad.value_of(W))} "
                                 f"does not compose with sizes {(n_in, n_out)}")
            if self.bias and tuple(np.shape(ad.value_of(self.params[2 * k + 1]))) != (n_out,):
                raise ValueError(f"layer {k}: bias shape mismatch")
            if not isinstance(W, ad.Var):
                for p in self.params[per_layer * k: per_layer * (k + 1)]:
                    ad.as_tensor(p, f"layer {k} parameter")

    @classmethod
    def init(cls, sizes: Sequence[int], activations: Sequence[str], rng: np.random.Generator,
             bias: bool = True, gain: float = 1.0) -> "Mlp":
        """Glorot-uniform weights, zero biases."""
        params = []
        for n_in, n_out in zip(sizes[:-1], sizes[1:]):
            lim = gain * math.sqrt(6.0 / (n_in + n_out))
            params.append(rng.uniform(-lim, lim, size=(n_in, n_out)))
            if bias:
                params.append(np.zeros(n_out))
        return cls(tuple(sizes), tuple(activations), params, bias)

    @property
    def n_in(self) -> int:
        return self.sizes[0]

    @property
    def n_out(self) -> int:
        return self.sizes[-1]

    @property
    def n_params(self) -> int:
        return int(sum(np.size(ad.value_of(p)) for p in self.params))

    def bind(self, params: Sequence) -> "Mlp":
        return Mlp(self.sizes, self.activations, list(params), self.bias)

    def numpy_params(self) -> list[np.ndarray]:
        return [np.array(ad.value_of(p), dtype=np.float64) for p in self.params]

    def __call__(self, h):
        step = 2 if self.bias else 1
        for k, act in enumerate(self.activations):
            h = ad.matmul(h, self.params[step * k])
            if self.bias:
                h = h + self.params[step * k + 1]
            h = ACTIVATIONS[act](h)
        return h

    def spectral_bound(self) -> float:
        """Product of layer spectral norms (valid Lipschitz bound for 1-Lipschitz activations)."""
        step = 2 if self.bias else 1
        out = 1.0
        for k in range(len(self.activations)):
            out *= float(np.linalg.norm(ad.value_of(self.params[step * k]), 2))
        return out


class VectorField:
    """Autonomous dynamics ``xdot = f(x)``."""

    dim: int

    def __call__(self, x):
        raise NotImplementedError

    def eval(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.dim:
            raise ValueError(f"state dimension {x.shape[-1]} does not match field dimension {self.dim}")
        return np.asarray(self(x), dtype=np.float64) + np.zeros_like(x)

    @property
    def is_smooth(self) -> bool:
        return True

    def smooth_order_ok(self, p: int) -> bool:
        return p <= 1 or self.is_smooth


@dataclass
class LinearField(VectorField):
    A: np.ndarray

    def __post_init__(self):
        self.A = ad.as_tensor(self.A, "A")
        if self.A.ndim != 2 or self.A.shape[0] != self.A.shape[1]:
            raise ValueError("A must be square")
        self._At = self.A.T.copy()

    @property
    def dim(self) -> int:
        return self.A.shape[0]

    def __call__(self, x):
        return ad.matmul(x, self._At)


@dataclass
class PendulumField(VectorField):
    """Frictionless pendulum ``(angle, rate) -> (rate, -g/l sin(angle))``."""

    g_over_l: float = 1.0
    dim: int = 2

    def __post_init__(self):
        self._pick_rate = np.array([[0.0, 0.0], [1.0, 0.0]])
        self._pick_angle = np.array([[1.0], [0.0]])
        self._push = np.array([[0.0, -float(self.g_over_l)]])

    def __call__(self, x):
        return ad.matmul(x, self._pick_rate) + ad.matmul(ad.sin(ad.matmul(x, self._pick_angle)), self._push)


@dataclass
class MlpField(VectorField):
    net: Mlp

    def __post_init__(self):
        if self.net.n_in != self.net.n_out:
            raise ValueError("dynamics network must map R^n to R^n")

    @property
    def dim(self) -> int:
        return self.net.n_in

    @property
    def is_smooth(self) -> bool:
        return all(a in SMOOTH_ACTIVATIONS for a in self.net.activations)

    def bind(self, params: Sequence) -> "MlpField":
        return MlpField(self.net.bind(params))

    def __call__(self, x):
        return self.net(x)


@dataclass
class LinearStiffSystem:
    A: np.ndarray
    eigenvalues: tuple[float, float]

    @property
    def field(self) -> LinearField:
        return LinearField(self.A)


def stiff_system(lambdas: tuple[float, float] = (-1.0, -1000.0), rotation: float | None = None
                 ) -> LinearStiffSystem:
    """``A = V diag(lambdas) V^-1`` with ``V`` the identity or a rotation by ``rotation`` rad."""
    D = np.diag(np.asarray(lambdas, dtype=np.float64))
    if rotation is None:
        A = D
    else:
        c, s = math.cos(rotation), math.sin(rotation)
        V = np.array([[c, -s], [s, c]])
        A = V @ D @ V.T
    return LinearStiffSystem(A, (float(lambdas[0]), float(lambdas[1])))


def expm(M: np.ndarray, tol: float = 1e-14) -> np.ndarray:
    """Matrix exponential by scaling and squaring around a Taylor series."""
    M = np.asarray(M, dtype=np.float64)
    n = M.shape[0]
    norm = np.linalg.norm(M, 1)
    s = max(0, int(math.ceil(math.log2(norm / 0.5)))) if norm > 0.5 else 0
    X = M / (2.0**s)
    out = np.eye(n)
    term = np.eye(n)
    for k in range(1, 60):
        term = term @ X / k
        out = out + term
        if np.linalg.norm(term, 1) <= tol * np.linalg.norm(out, 1):
            break
    for _ in range(s):
        out = out @ out
    return out


def exact_linear_solution(system: LinearStiffSystem | np.ndarray, x0, t: float) -> np.ndarray:
    """``expm(A t) x0`` for one state ``(n,)`` or a batch ``(batch, n)``."""
    if t < 0:
        raise ValueError("t must be non-negative")
    A = system.A if isinstance(system, LinearStiffSystem) else np.asarray(system, dtype=np.float64)
    E = expm(A * t)
    return np.asarray(x0, dtype=np.float64) @ E.T


def lipschitz_estimate(field: VectorField, lo, hi, samples: int, rng: np.random.Generator
                       ) -> tuple[np.ndarray, float]:
    """Componentwise Lipschitz constants of ``field`` over the box ``[lo, hi]``.

    Linear fields get the exact row norms of ``A``. Other fields get the
    largest difference quotient over ``samples`` random pairs, which is a lower
    estimate of the true constant. Returns the vector and its 2-norm.
    """
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    if np.any(hi <= lo):
        raise ValueError("zero-volume box")
    if samples < 2:
        raise ValueError("need at least two samples")
    if isinstance(field, LinearField):
        L = np.linalg.norm(field.A, axis=1)
        return L, float(np.linalg.norm(L))
    x = rng.uniform(lo, hi, size=(samples, lo.size))
    y = rng.uniform(lo, hi, size=(samples, lo.size))
    fx, fy = field.eval(x), field.eval(y)
    dist = np.linalg.norm(x - y, axis=1)
    keep = dist > 0
    L = np.max(np.abs(fx[keep] - fy[keep]) / dist[keep, None], axis=0)
    return L, float(np.linalg.norm(L))
