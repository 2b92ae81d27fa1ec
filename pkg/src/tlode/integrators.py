"""Step schemes and trajectory integration.

Fixed-step schemes (Taylor-Lagrange, truncated Taylor, Euler, RK4, HyperEuler)
are written against the generic primitives, so they run on arrays and on tape
variables alike; the dynamics loss differentiates straight through them.
Dormand-Prince 5(4) is array-only and serves as the high-accuracy reference.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import tensor_ad as ad
from .dynamics import Mlp
from .midpoint import DegenerateMidpoint, MidpointModel, state_dt_features
from .taylor_jets import solution_jet, truncated_taylor_predict

__all__ = [
    "Scheme",
    "IntegratorConfig",
    "Trajectory",
    "StiffnessError",
    "ResidualNet",
    "tl_step",
    "tl_step_parts",
    "taylor_step",
    "euler_step",
    "rk4_step",
    "hypereuler_step",
    "dopri5_adaptive",
    "integrate",
    "normalized_error",
    "step_nfe",
]


class Scheme(str, enum.Enum):
    TL = "tl"
    TRUNCATED_TAYLOR = "truncated_taylor"
    EULER = "euler"
    RK4 = "rk4"
    HYPER_EULER = "hypereuler"
    DOPRI5 = "dopri5"


class StiffnessError(RuntimeError):
    """Adaptive step size collapsed below the admissible minimum."""


@dataclass
class IntegratorConfig:
    scheme: Scheme = Scheme.TL
    p: int = 1
    H: int = 1
    rtol: float = 1.4e-12
    atol: float = 1.4e-12
    max_steps: int = 1_000_000

    def __post_init__(self):
        self.scheme = Scheme(self.scheme)
        if self.p < 1:
            raise ValueError("expansion order p must be >= 1")
        if self.H < 1:
            raise ValueError("H must be >= 1")
        if self.rtol <= 0 or self.atol <= 0:
            raise ValueError("rtol and atol must be positive")

    def dt(self, t0: float, T: float) -> float:
        return (T - t0) / self.H


@dataclass
class Trajectory:
    times: list[float]
    states: list[np.ndarray]
    nfe: int = 0

    @property
    def final(self) -> np.ndarray:
        return self.states[-1]


@dataclass
class ResidualNet:
    """HyperEuler correction network ``g(x, dt)``."""

    net: Mlp
    n: int
    dt_encoding: str = "raw"

    def __post_init__(self):
        if self.net.n_in != self.n + 1 or self.net.n_out != self.n:
            raise ValueError(f"residual network must map R^{self.n + 1} to R^{self.n}")

    @classmethod
    def init(cls, n: int, rng: np.random.Generator, hidden=(32,), activation: str = "relu"
             ) -> "ResidualNet":
        acts = tuple([activation] * len(hidden) + ["none"])
        return cls(Mlp.init((n + 1, *hidden, n), acts, rng), n)

    def bind(self, params) -> "ResidualNet":
        return ResidualNet(self.net.bind(params), self.n, self.dt_encoding)

    def __call__(self, x, dt):
        return self.net(state_dt_features(x, dt, self.n, self.dt_encoding))


def _times(c, dt):
    d = np.asarray(dt, dtype=np.float64)
    return ad.scale(c, d.item()) if d.size == 1 else ad.mul(c, d)


def tl_step_parts(field, midpoint: MidpointModel, x, dt, p: int):
    """One Taylor-Lagrange step; returns ``(x_next, remainder, gamma)``."""
    if p < 1:
        raise ValueError("expansion order p must be >= 1")
    at_x = solution_jet(field, x, max(1, p - 1)).coeffs
    fx = at_x[1]
    gamma = midpoint.predict(field, x, dt, fx=fx).gamma
    fp = solution_jet(field, gamma, p).coeffs[p]
    remainder = _times(fp, np.asarray(dt, dtype=np.float64) ** p)
    x_next = ad.add(truncated_taylor_predict(x, at_x[1:p], dt), remainder)
    return x_next, remainder, gamma


def tl_step(field, midpoint: MidpointModel, x, dt, p: int):
    return tl_step_parts(field, midpoint, x, dt, p)[0]


def taylor_step(field, x, dt, p: int):
    """Order-``p`` Taylor step ``x + sum_{l=1..p} dt**l f^[l](x)``."""
    coeffs = solution_jet(field, x, p).coeffs[1:]
    return truncated_taylor_predict(x, coeffs, dt)


def euler_step(field, x, dt):
    return ad.add(x, _times(field(x), dt))


def rk4_step(field, x, dt):
    k1 = field(x)
    k2 = field(ad.add(x, _times(k1, np.asarray(dt) * 0.5)))
    k3 = field(ad.add(x, _times(k2, np.asarray(dt) * 0.5)))
    k4 = field(ad.add(x, _times(k3, dt)))
    s = ad.add(ad.add(k1, ad.scale(k2, 2.0)), ad.add(ad.scale(k3, 2.0), k4))
    return ad.add(x, _times(s, np.asarray(dt) / 6.0))


def hypereuler_step(field, residual: ResidualNet, x, dt):
    """``x + dt f(x) + dt**2 g(x, dt)``."""
    return ad.add(euler_step(field, x, dt), _times(residual(x, dt), np.asarray(dt, dtype=np.float64) ** 2))


def step_nfe(scheme: Scheme, p: int = 1) -> int:
    """Field passes per fixed step; a jet of order ``k`` counts as ``k`` passes."""
    scheme = Scheme(scheme)
    if scheme == Scheme.TL:
        return max(1, p - 1) + p
    if scheme == Scheme.TRUNCATED_TAYLOR:
        return p
    if scheme in (Scheme.EULER, Scheme.HYPER_EULER):
        return 1
    if scheme == Scheme.RK4:
        return 4
    raise ValueError("adaptive schemes have no fixed per-step cost")


# ---------------------------------------------------------------------------
# Dormand-Prince 5(4)
# ---------------------------------------------------------------------------

_DP_C = (0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0)
_DP_A = (
    (),
    (1 / 5,),
    (3 / 40, 9 / 40),
    (44 / 45, -56 / 15, 32 / 9),
    (19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729),
    (9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656),
    (35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84),
)
_DP_B = (35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0)
_DP_E = (71 / 57600, 0.0, -71 / 16695, 71 / 1920, -17253 / 339200, 22 / 525, -1 / 40)

_SAFETY = 0.9
_MIN_FACTOR, _MAX_FACTOR = 0.2, 10.0
_ALPHA, _BETA = 0.7 / 5, 0.4 / 5


def _initial_step(f, x, f0, rtol, atol, span):
    sc = atol + rtol * np.abs(x)
    d0 = np.sqrt(np.mean((x / sc) ** 2))
    d1 = np.sqrt(np.mean((f0 / sc) ** 2))
    h0 = 1e-6 if (d0 < 1e-5 or d1 < 1e-5) else 0.01 * d0 / d1
    h0 = min(h0, span)
    f1 = f(x + h0 * f0)
    d2 = np.sqrt(np.mean(((f1 - f0) / sc) ** 2)) / h0
    if max(d1, d2) <= 1e-15:
        h1 = max(1e-6, h0 * 1e-3)
    else:
        h1 = (0.01 / max(d1, d2)) ** (1.0 / 5.0)
    return min(100 * h0, h1, span)


def dopri5_adaptive(field: Callable, x0, t0: float, T: float, rtol: float = 1.4e-12,
                    atol: float = 1.4e-12, max_steps: int = 1_000_000,
                    record: bool = True) -> Trajectory:
    """Adaptive Dormand-Prince 5(4) with PI step control.

    ``x0`` may be one state or a batch of states; a batch is integrated as one
    stacked system with a shared step size. A step is accepted when every
    component satisfies ``|err| <= atol + rtol * max(|x|, |x_new|)``.
    """
    if rtol <= 0 or atol <= 0:
        raise ValueError("tolerances must be positive")
    if not T > t0:
        raise ValueError("T must exceed t0")
    # overflow shows up as a non-finite error norm and is handled as a rejection
    with np.errstate(over="ignore", invalid="ignore"):
        return _dopri5(field, x0, t0, T, rtol, atol, max_steps, record)


def _dopri5(field, x0, t0, T, rtol, atol, max_steps, record) -> Trajectory:
    nfe = 0

    def f(y):
        nonlocal nfe
        nfe += 1
        return np.asarray(field(y), dtype=np.float64) + np.zeros_like(y)

    x = np.array(x0, dtype=np.float64)
    span = T - t0
    h_min = 1e-14 * span
    t = t0
    k1 = f(x)
    h = _initial_step(f, x, k1, rtol, atol, span)
    err_prev = 1.0
    times, states = [t0], [x.copy()]
    rejected = False
    for _ in range(max_steps):
        if t >= T:
            break
        last = t + h >= T - 1e-15 * span
        if last:
            h = T - t
        ks = [k1]
        for s in range(1, 7):
            acc = x.copy()
            for a, k in zip(_DP_A[s], ks):
                if a:
                    acc = acc + (h * a) * k
            ks.append(f(acc))
        x_new = x + h * sum(b * k for b, k in zip(_DP_B, ks) if b)
        err = h * sum(e * k for e, k in zip(_DP_E, ks) if e)
        sc = atol + rtol * np.maximum(np.abs(x), np.abs(x_new))
        err_norm = float(np.max(np.abs(err) / sc)) if err.size else 0.0
        if not math.isfinite(err_norm):
            err_norm = math.inf
        if err_norm <= 1.0:
            t = T if last else t + h
            x = x_new
            k1 = ks[6]
            if record:
                times.append(t)
                states.append(x.copy())
            fac = _SAFETY * max(err_norm, 1e-10) ** (-_ALPHA) * err_prev ** _BETA
            fac = min(_MAX_FACTOR, max(_MIN_FACTOR, fac))
            if rejected:
                fac = min(fac, 1.0)
            h = h * fac
            err_prev = max(err_norm, 1e-4)
            rejected = False
        else:
            fac = 0.0 if not math.isfinite(err_norm) else _SAFETY * err_norm ** (-_ALPHA)
            h = h * max(_MIN_FACTOR, fac)
            rejected = True
        if h < h_min and t < T:
            raise StiffnessError(f"stiffness failure: step {h:.3e} below {h_min:.3e} at t={t:.6g}")
    else:
        raise StiffnessError(f"stiffness failure: exceeded {max_steps} steps")
    if not record:
        times.append(t)
        states.append(x.copy())
    return Trajectory(times, states, nfe)


def integrate(field, x0, t0: float, T: float, cfg: IntegratorConfig,
              midpoint: MidpointModel | None = None, residual: ResidualNet | None = None
              ) -> Trajectory:
    """Integrate from ``t0`` to ``T``; returns the visited states and the field-pass count."""
    if not T > t0:
        raise ValueError("T must exceed t0")
    scheme = cfg.scheme
    if scheme == Scheme.TL and midpoint is None:
        raise ValueError("the Taylor-Lagrange scheme needs a midpoint model")
    if scheme == Scheme.HYPER_EULER and residual is None:
        raise ValueError("HyperEuler needs a residual network")
    if scheme == Scheme.DOPRI5:
        return dopri5_adaptive(field, x0, t0, T, cfg.rtol, cfg.atol, cfg.max_steps)
    dt = cfg.dt(t0, T)
    x = np.array(x0, dtype=np.float64)
    times, states = [t0], [x]
    for i in range(cfg.H):
        if scheme == Scheme.TL:
            x = tl_step(field, midpoint, x, dt, cfg.p)
        elif scheme == Scheme.TRUNCATED_TAYLOR:
            x = taylor_step(field, x, dt, cfg.p)
        elif scheme == Scheme.EULER:
            x = euler_step(field, x, dt)
        elif scheme == Scheme.RK4:
            x = rk4_step(field, x, dt)
        elif scheme == Scheme.HYPER_EULER:
            x = hypereuler_step(field, residual, x, dt)
        times.append(t0 + (i + 1) * dt)
        states.append(np.asarray(x, dtype=np.float64))
    times[-1] = T
    return Trajectory(times, states, step_nfe(scheme, cfg.p) * cfg.H)


def normalized_error(x_hat, x_true) -> np.ndarray:
    """``min(1, ||x_hat - x_true|| / ||x_true||)`` row by row (non-finite counts as 1)."""
    x_hat = np.asarray(x_hat, dtype=np.float64)
    x_true = np.asarray(x_true, dtype=np.float64)
    with np.errstate(all="ignore"):
        num = np.linalg.norm(x_hat - x_true, axis=-1)
        den = np.linalg.norm(x_true, axis=-1)
        r = num / den
    r = np.where(np.isfinite(r), r, 1.0)
    return np.minimum(1.0, r)
