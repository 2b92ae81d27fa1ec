"""Midpoint models for the Lagrange remainder.

A midpoint model maps ``(x, dt)`` to a state ``gamma`` at which the order-``p``
Taylor coefficient reproduces the truncation error of the expansion about
``x``. All models use the assembly ``gamma = x + gammabar(x, dt) (.) f(x)``,
where ``(.)`` is a matrix-vector product (``full``) or an elementwise product
(``diag``).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor_ad as ad
from .dynamics import Mlp, expm
from .taylor_jets import solution_jet

__all__ = [
    "MidpointPrediction",
    "MidpointModel",
    "DegenerateMidpoint",
    "AnalyticLinearMidpoint",
    "LearnedMidpoint",
    "SingularMatrixError",
    "analytic_linear_gammabar",
    "predict_midpoint",
    "remainder_estimate",
    "state_dt_features",
]


class SingularMatrixError(np.linalg.LinAlgError):
    pass


@dataclass
class MidpointPrediction:
    gamma: object
    gammabar: object


class MidpointModel:
    def predict(self, field, x, dt, fx=None) -> MidpointPrediction:
        raise NotImplementedError


class DegenerateMidpoint(MidpointModel):
    """``gamma = x``; turns the Taylor-Lagrange step into a plain Taylor step."""

    def predict(self, field, x, dt, fx=None) -> MidpointPrediction:
        return MidpointPrediction(x, None)


def analytic_linear_gammabar(A, dt: float, terms: str | int = "closed", order: int = 1
                             ) -> tuple[np.ndarray, float]:
    """State-independent ``gammabar`` for ``xdot = A x``.

    For expansion order ``p`` the exact midpoint factor is
    ``sum_{j>=1} p!/(p+j)! dt**j A**(j-1)``, which for ``p = 1`` has the closed
    form ``A^-2 (expm(A dt) - I - A dt) / dt``. ``terms="closed"`` evaluates the
    closed form (``A`` must be invertible); an integer ``K`` sums the first
    ``K`` series terms. Returns the matrix and a bound on the omitted tail
    (zero for the closed form).
    """
    A = np.atleast_2d(np.asarray(A, dtype=np.float64))
    n = A.shape[0]
    p = int(order)
    if dt <= 0:
        raise ValueError("dt must be positive")
    if p < 1:
        raise ValueError("order must be >= 1")
    if terms == "closed":
        if np.linalg.matrix_rank(A) < n or np.linalg.cond(A) > 1e12:
            raise SingularMatrixError("A is singular; closed form unavailable, pass terms=K "
                                      "to use the truncated series instead")
        Z = A * dt
        # p! Z^-p (e^Z - sum_{k<p} Z^k / k!) - I, then left-multiplied by A^-1
        rest = expm(Z)
        term = np.eye(n)
        for k in range(p):
            if k:
                term = term @ Z / k
            rest = rest - term
        for _ in range(p):
            rest = np.linalg.solve(Z, rest)
        inner = math.factorial(p) * rest - np.eye(n)
        return np.linalg.solve(A, inner), 0.0
    K = int(terms)
    if K < 1:
        raise ValueError("series needs at least one term")
    out = np.zeros((n, n))
    Apow = np.eye(n)
    for j in range(1, K + 1):
        out = out + (math.factorial(p) / math.factorial(p + j)) * dt**j * Apow
        Apow = Apow @ A
    normA = float(np.linalg.norm(A, 2))
    first = math.factorial(p) / math.factorial(p + K + 1) * dt ** (K + 1) * normA**K
    ratio = dt * normA / (p + K + 2)
    tail = first / (1.0 - ratio) if ratio < 1.0 else math.inf
    return out, tail


@dataclass
class AnalyticLinearMidpoint(MidpointModel):
    """Exact midpoint for a linear field with matrix ``A`` and expansion order ``order``."""

    A: np.ndarray
    order: int = 1
    terms: str | int = "closed"

    def __post_init__(self):
        self.A = ad.as_tensor(self.A, "A")
        self._cache: dict[float, np.ndarray] = {}

    def gammabar(self, dt: float) -> np.ndarray:
        key = float(dt)
        if key not in self._cache:
            terms = self.terms
            if terms == "closed" and np.linalg.matrix_rank(self.A) < self.A.shape[0]:
                terms = 40
            self._cache[key] = analytic_linear_gammabar(self.A, key, terms, self.order)[0]
        return self._cache[key]

    def predict(self, field, x, dt, fx=None) -> MidpointPrediction:
        if fx is None:
            fx = field(x)
        dts = np.asarray(dt, dtype=np.float64)
        if dts.size == 1:
            G = self.gammabar(dts.item())
            return MidpointPrediction(ad.add(x, ad.matmul(fx, G.T)), G)
        # one gammabar per row
        fx_val = ad.value_of(fx)
        corr = np.stack([self.gammabar(float(d)) @ f for d, f in zip(dts.ravel(), fx_val)])
        return MidpointPrediction(ad.add(x, corr), None)


def state_dt_features(x, dt, n: int, encoding: str = "raw"):
    """``[x, enc(dt)]`` built from matmuls so it stays differentiable in ``x``."""
    P = np.hstack([np.eye(n), np.zeros((n, 1))])
    q = np.zeros((1, n + 1))
    q[0, n] = 1.0
    dts = np.asarray(dt, dtype=np.float64)
    if encoding == "log":
        dts = np.log(dts)
    elif encoding != "raw":
        raise ValueError(f"unknown dt encoding '{encoding}'")
    xv = ad.value_of(x)
    if np.ndim(xv) == 1:
        col = dts.reshape(1)
    else:
        col = np.broadcast_to(dts.reshape(-1, 1) if dts.size > 1 else dts.reshape(1, 1),
                              (np.shape(xv)[0], 1))
        col = np.ascontiguousarray(col)
    return ad.add(ad.matmul(x, P), ad.matmul(col, q))


def _rowwise_matvec(G, f, n: int):
    """``out[b, i] = sum_j G[b, i*n + j] f[b, j]`` without rank-3 arrays."""
    R = np.tile(np.eye(n), (1, n))                       # f @ R -> f repeated n times
    S = np.kron(np.eye(n), np.ones((n, 1)))              # groups of n summed
    return ad.matmul(ad.mul(G, ad.matmul(f, R)), S)


@dataclass
class LearnedMidpoint(MidpointModel):
    """``gammabar`` produced by a network of ``(x, dt)``.

    ``output_shape="full"`` reads ``n*n`` outputs as a row-major matrix;
    ``"diag"`` reads ``n`` outputs as a diagonal.
    """

    net: Mlp
    n: int
    output_shape: str = "full"
    dt_encoding: str = "raw"

    def __post_init__(self):
        if self.output_shape not in ("full", "diag"):
            raise ValueError("output_shape must be 'full' or 'diag'")
        want = self.n * self.n if self.output_shape == "full" else self.n
        if self.net.n_out != want:
            raise ValueError(f"midpoint network emits {self.net.n_out} values, "
                             f"{self.output_shape} gammabar for n={self.n} needs {want}")
        if self.net.n_in != self.n + 1:
            raise ValueError(f"midpoint network takes {self.net.n_in} inputs, expected n+1={self.n + 1}")

    @classmethod
    def init(cls, n: int, rng: np.random.Generator, hidden: Sequence[int] = (16,),
             activation: str = "relu", output_shape: str | None = None,
             dt_encoding: str = "raw", gain: float = 1.0) -> "LearnedMidpoint":
        if output_shape is None:
            output_shape = "full" if n <= 8 else "diag"
        n_out = n * n if output_shape == "full" else n
        sizes = (n + 1, *hidden, n_out)
        acts = tuple([activation] * len(hidden) + ["none"])
        return cls(Mlp.init(sizes, acts, rng, gain=gain), n, output_shape, dt_encoding)

    def bind(self, params: Sequence) -> "LearnedMidpoint":
        return LearnedMidpoint(self.net.bind(params), self.n, self.output_shape, self.dt_encoding)

    def gammabar(self, x, dt):
        return self.net(state_dt_features(x, dt, self.n, self.dt_encoding))

    def predict(self, field, x, dt, fx=None) -> MidpointPrediction:
        if fx is None:
            fx = field(x)
        G = self.gammabar(x, dt)
        if self.output_shape == "diag":
            corr = ad.mul(G, fx)
        else:
            corr = _rowwise_matvec(G, fx, self.n)
        gamma = ad.add(x, corr)
        if not isinstance(gamma, ad.Var) and not np.all(np.isfinite(gamma)):
            raise ad.NonFiniteError("midpoint prediction is not finite")
        return MidpointPrediction(gamma, G)


def predict_midpoint(model: MidpointModel, field, x, dt) -> MidpointPrediction:
    if np.any(np.asarray(dt) <= 0):
        raise ValueError("dt must be positive")
    return model.predict(field, x, dt)


def remainder_estimate(field, model: MidpointModel, x, dt, p: int, fx=None):
    """``dt**p f^[p](gamma)``: the estimated Lagrange remainder of one step."""
    gamma = model.predict(field, x, dt, fx=fx).gamma
    fp = solution_jet(field, gamma, p).coeffs[p]
    dtp = np.asarray(dt, dtype=np.float64) ** p
    return ad.scale(fp, dtp.item()) if dtp.size == 1 else ad.mul(fp, dtp)
