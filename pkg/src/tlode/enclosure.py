"""One-step a priori bounds from Lipschitz constants.

Two checks on how far an exact trajectory can move over one step of length
``dt`` from ``x``:

* the Grönwall bound ``||x(t) - x|| <= ||f(x)|| (exp(L dt) - 1) / L``;
* the box ``x + [-1, 1]^{n x n} dt f(x) / (1 - sqrt(n) dt L)``. This needs
  ``sqrt(n) dt L < 1``.

``L`` is the 2-norm of the componentwise Lipschitz vector.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "AprioriEnclosure",
    "EnclosureStepError",
    "gronwall_variation_bound",
    "apriori_enclosure",
    "max_admissible_dt",
    "contains",
    "LIPSCHITZ_SAFETY",
]

LIPSCHITZ_SAFETY = 1.1  # multiplier applied to sampled (lower) Lipschitz estimates


class EnclosureStepError(ValueError):
    def __init__(self, dt: float, max_dt: float):
        super().__init__(f"step too large for enclosure: dt={dt:.6g}, "
                         f"max admissible dt={max_dt:.6g}")
        self.max_dt = max_dt


@dataclass
class AprioriEnclosure:
    center: np.ndarray
    radius: np.ndarray

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64)
        self.radius = np.asarray(self.radius, dtype=np.float64)
        if np.any(self.radius < 0):
            raise ValueError("radius must be non-negative")

    @property
    def lower(self) -> np.ndarray:
        return self.center - self.radius

    @property
    def upper(self) -> np.ndarray:
        return self.center + self.radius


def _fx(field, x):
    return np.asarray(field.eval(x) if hasattr(field, "eval") else field(x), dtype=np.float64)


def gronwall_variation_bound(field, lipschitz_norm: float, x, dt: float) -> float:
    if dt < 0:
        raise ValueError("dt must be non-negative")
    if lipschitz_norm < 0:
        raise ValueError("Lipschitz norm must be non-negative")
    speed = float(np.linalg.norm(_fx(field, x)))
    if lipschitz_norm == 0.0:
        return speed * dt
    return speed * math.expm1(lipschitz_norm * dt) / lipschitz_norm


def max_admissible_dt(lipschitz_norm: float, n: int) -> float:
    return math.inf if lipschitz_norm == 0 else 1.0 / (math.sqrt(n) * lipschitz_norm)


def apriori_enclosure(field, lipschitz_norm: float, x, dt: float, n: int | None = None
                      ) -> AprioriEnclosure:
    """Interval box around ``x`` that contains the exact state after ``dt``.

    The interval matrix ``[-1, 1]^{n x n}`` applied to ``v = dt f(x)`` gives
    ``||v||_1`` as the half-width of every component.
    """
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[-1] if n is None else n
    shrink = 1.0 - math.sqrt(n) * dt * lipschitz_norm
    if not shrink > 0:
        raise EnclosureStepError(dt, max_admissible_dt(lipschitz_norm, n))
    v = dt * _fx(field, x)
    half = float(np.sum(np.abs(v))) / shrink
    return AprioriEnclosure(x.copy(), np.full(x.shape, half))


def contains(enc: AprioriEnclosure, y, slack: float = 0.0) -> bool:
    """Closed-box membership; ``slack`` widens the box for round-off."""
    y = np.asarray(y, dtype=np.float64)
    if y.shape != enc.center.shape:
        raise ValueError("dimension mismatch")
    return bool(np.all(np.abs(y - enc.center) <= enc.radius + slack))
