"""Alternating training of a dynamics network and a midpoint network.

One outer round freezes the midpoint and takes ``N_theta`` Adam steps on the
dynamics objective (data misfit plus the remainder penalty), then freezes the
dynamics, relabels a sample of the training inputs with a tight Dormand-Prince
solve, and takes ``N_phi`` Adam steps on the midpoint objective.

Frozen parameters enter the tape as constants, so they never receive
gradient. Everything random flows from one PCG64 stream seeded by the
config, which makes a run reproducible bit for bit.
"""

from __future__ import annotations

import math
import time
import warnings
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import tensor_ad as ad
from .integrators import (
    ResidualNet,
    Scheme,
    StiffnessError,
    dopri5_adaptive,
    euler_step,
    hypereuler_step,
    rk4_step,
    taylor_step,
    tl_step_parts,
    step_nfe,
)
from .midpoint import DegenerateMidpoint, LearnedMidpoint, MidpointModel

__all__ = [
    "Dataset",
    "TrainingConfig",
    "TrainingLog",
    "LossResult",
    "TrainResult",
    "TrainingAborted",
    "NonFiniteLossError",
    "rollout",
    "dynamics_loss",
    "midpoint_loss",
    "distill_dataset",
    "train",
    "fit_hypereuler",
    "polish_output_layer",
    "heldout_mse",
    "MAX_TRAINABLE_ORDER",
]

MAX_TRAINABLE_ORDER = 3
DISTILL_TOL = 1.4e-12


class NonFiniteLossError(ad.NonFiniteError):
    def __init__(self, record: int):
        super().__init__(f"non-finite loss contribution from record {record}", name=f"record {record}")
        self.record = record


class TrainingAborted(RuntimeError):
    """A step produced a non-finite value; carries the last good state."""

    def __init__(self, message: str, result: "TrainResult"):
        super().__init__(message)
        self.result = result


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------


@dataclass
class Dataset:
    """Records ``(x0, t0, T, y)`` stored column-wise."""

    x0: np.ndarray
    t0: np.ndarray
    T: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        self.x0 = np.atleast_2d(np.asarray(self.x0, dtype=np.float64))
        self.y = np.atleast_2d(np.asarray(self.y, dtype=np.float64))
        self.t0 = np.asarray(self.t0, dtype=np.float64).reshape(-1)
        self.T = np.asarray(self.T, dtype=np.float64).reshape(-1)
        m = self.x0.shape[0]
        if not (self.y.shape == self.x0.shape and self.t0.size == m and self.T.size == m):
            raise ValueError("record fields disagree in length or state dimension")
        if m and not np.all(self.T > self.t0):
            bad = int(np.argmax(~(self.T > self.t0)))
            raise ValueError(f"record {bad}: T must exceed t0")

    @classmethod
    def from_records(cls, records: Sequence[tuple]) -> "Dataset":
        x0, t0, T, y = zip(*records)
        return cls(np.array(x0), np.array(t0), np.array(T), np.array(y))

    @property
    def records(self) -> list[tuple]:
        return [(self.x0[i], float(self.t0[i]), float(self.T[i]), self.y[i]) for i in range(len(self))]

    @property
    def n(self) -> int:
        return self.x0.shape[1]

    @property
    def horizon(self) -> np.ndarray:
        return self.T - self.t0

    def __len__(self) -> int:
        return self.x0.shape[0]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.x0[idx], self.t0[idx], self.T[idx], self.y[idx])

    def split(self, heldout: float, rng: np.random.Generator) -> tuple["Dataset", "Dataset"]:
        """Seeded shuffle, then the last ``heldout`` fraction is held out."""
        perm = rng.permutation(len(self))
        k = int(round(heldout * len(self)))
        if heldout > 0 and k == 0 and len(self) > 1:
            k = 1
        return self.subset(np.sort(perm[: len(self) - k])), self.subset(np.sort(perm[len(self) - k:]))


class _Batches:
    """Epoch-wise shuffled minibatches."""

    def __init__(self, n: int, size: int, rng: np.random.Generator):
        self.n, self.size, self.rng = n, min(size, n), rng
        self._order = np.empty(0, dtype=np.int64)
        self._pos = 0

    def next(self) -> np.ndarray:
        if self._pos + self.size > self._order.size:
            self._order = self.rng.permutation(self.n)
            self._pos = 0
        out = self._order[self._pos: self._pos + self.size]
        self._pos += self.size
        return out


# ---------------------------------------------------------------------------
# configuration and log
# ---------------------------------------------------------------------------


@dataclass
class TrainingConfig:
    N_train: int = 1
    N_theta: int = 200
    N_phi: int = 200
    N_distill: int = 1024
    lam: float = 0.0
    batch_size: int = 512
    lr_theta: float = 1e-2
    lr_phi: float = 1e-4
    decay: float = 1e-4
    p: int = 2
    H: int = 1
    seed: int = 0
    scheme: str = "tl"
    distill: bool = True
    heldout: float = 0.1
    eval_every: int = 1000
    penalty_reduction: str = "sum"
    polish: bool = False
    polish_ridge: float = 1e-12

    def __post_init__(self):
        for name in ("N_train", "N_distill", "batch_size", "p", "H", "eval_every"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        for name in ("N_theta", "N_phi"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if not self.lam >= 0:
            raise ValueError("lam must be >= 0")
        if self.p > MAX_TRAINABLE_ORDER:
            raise ValueError(f"training supports p <= {MAX_TRAINABLE_ORDER}, got {self.p}")
        if not 0 <= self.heldout < 1:
            raise ValueError("heldout must lie in [0, 1)")
        if self.penalty_reduction not in ("sum", "mean"):
            raise ValueError("penalty_reduction must be 'sum' or 'mean'")
        Scheme(self.scheme)


LOG_COLUMNS = ("step", "phase", "loss", "heldout_mse", "penalty", "nfe")


@dataclass
class TrainingLog:
    """One row per optimizer step; ``heldout_mse`` is NaN between evaluations.

    Wall-clock seconds per row are kept apart from the deterministic columns.
    """

    step: list = field(default_factory=list)
    phase: list = field(default_factory=list)
    loss: list = field(default_factory=list)
    heldout_mse: list = field(default_factory=list)
    penalty: list = field(default_factory=list)
    nfe: list = field(default_factory=list)
    wall_s: list = field(default_factory=list, compare=False)

    def append(self, phase, loss, heldout, penalty, nfe, wall):
        if self.step and len(self.step) != self.step[-1] + 1:
            raise AssertionError("log step index out of order")
        self.step.append(len(self.step))
        self.phase.append(phase)
        self.loss.append(float(loss))
        self.heldout_mse.append(float(heldout))
        self.penalty.append(float(penalty))
        self.nfe.append(int(nfe))
        self.wall_s.append(float(wall))

    def __len__(self) -> int:
        return len(self.step)

    def rows(self):
        for i in range(len(self)):
            yield tuple(getattr(self, c)[i] for c in LOG_COLUMNS)

    def last_heldout(self) -> float:
        vals = [v for v in self.heldout_mse if not math.isnan(v)]
        return vals[-1] if vals else math.nan


@dataclass
class LossResult:
    value: float
    mse: float
    penalty: float
    grad_theta: list
    grad_phi: list
    nfe: int


@dataclass
class TrainResult:
    field: object
    midpoint: MidpointModel
    log: TrainingLog


# ---------------------------------------------------------------------------
# forward model on arrays or tape variables
# ---------------------------------------------------------------------------


def _dt_column(batch: Dataset, H: int) -> np.ndarray:
    return (batch.horizon / H).reshape(-1, 1)


def rollout(field, x0, dt, H: int, scheme: str = "tl", p: int = 1,
            midpoint: MidpointModel | None = None, residual: ResidualNet | None = None):
    """``H`` fixed steps from ``x0``; ``dt`` is a scalar or a ``(batch, 1)`` column.

    Returns the final state and the list of per-step remainder estimates (TL
    only; empty otherwise).
    """
    scheme = Scheme(scheme)
    x = x0
    rems = []
    for _ in range(H):
        if scheme == Scheme.TL:
            x, rem, _ = tl_step_parts(field, midpoint, x, dt, p)
            rems.append(rem)
        elif scheme == Scheme.TRUNCATED_TAYLOR:
            x = taylor_step(field, x, dt, p)
        elif scheme == Scheme.EULER:
            x = euler_step(field, x, dt)
        elif scheme == Scheme.RK4:
            x = rk4_step(field, x, dt)
        elif scheme == Scheme.HYPER_EULER:
            x = hypereuler_step(field, residual, x, dt)
        else:
            raise ValueError("adaptive schemes are not differentiated through")
    return x, rems


def _sq_rows(diff):
    """Per-record squared norms."""
    return ad.matmul(ad.square(diff), np.ones((ad.value_of(diff).shape[1], 1)))


def _check_rows(rows_value: np.ndarray):
    bad = ~np.isfinite(np.asarray(rows_value).reshape(-1))
    if np.any(bad):
        raise NonFiniteLossError(int(np.argmax(bad)))


def _bind(model, tape: ad.Tape | None, params, prefix):
    if tape is None or model is None or not hasattr(model, "bind"):
        return model, []
    vars_ = [tape.param(p, f"{prefix}{i}") for i, p in enumerate(params)]
    return model.bind(vars_), vars_


def _params_of(model) -> list[np.ndarray]:
    if model is None or not hasattr(model, "bind"):
        return []
    net = model.net
    return net.numpy_params()


def _objective(field, midpoint, batch: Dataset, cfg: TrainingConfig, lam: float,
               train_theta: bool, train_phi: bool, data_term: str) -> LossResult:
    tape = ad.Tape()
    theta = _params_of(field)
    phi = _params_of(midpoint) if isinstance(midpoint, LearnedMidpoint) else []
    f = field
    m = midpoint
    tv, pv = [], []
    if train_theta and theta:
        f, tv = _bind(field, tape, theta, "theta")
    if train_phi and phi:
        m, pv = _bind(midpoint, tape, phi, "phi")
    x0 = tape.const(batch.x0)
    dt = _dt_column(batch, cfg.H)
    pred, rems = rollout(f, x0, dt, cfg.H, cfg.scheme, cfg.p, m)
    rows = _sq_rows(ad.sub(pred, batch.y))
    _check_rows(ad.value_of(rows))
    if data_term == "mse":
        fit = ad.scale(ad.total(rows), 1.0 / batch.y.size)
    else:
        fit = ad.total(rows)
    pen = None
    if lam > 0 and rems:
        for r in rems:
            s = ad.total(_sq_rows(r))
            pen = s if pen is None else ad.add(pen, s)
        if cfg.penalty_reduction == "mean":
            pen = ad.scale(pen, 1.0 / len(batch))
        loss = ad.add(fit, ad.scale(pen, lam))
    else:
        loss = fit
    value = float(ad.value_of(loss))
    if not math.isfinite(value):
        raise NonFiniteLossError(0)
    if tv or pv:
        grads = tape.backward(loss, wrt=tv + pv)
    else:
        grads = []
    g_theta = grads[: len(tv)] if tv else [np.zeros_like(t) for t in theta]
    g_phi = grads[len(tv):] if pv else [np.zeros_like(q) for q in phi]
    pen_value = float(ad.value_of(pen)) if pen is not None else _penalty_value(rems, cfg, len(batch))
    nfe = step_nfe(cfg.scheme, cfg.p) * cfg.H * len(batch) if cfg.scheme != "dopri5" else 0
    return LossResult(value, float(ad.value_of(fit)), pen_value, g_theta, g_phi, nfe)


def _penalty_value(rems, cfg, m: int) -> float:
    if not rems:
        return 0.0
    s = sum(float(np.sum(ad.value_of(r) ** 2)) for r in rems)
    return s if cfg.penalty_reduction == "sum" else s / m


def dynamics_loss(field, midpoint, batch: Dataset, cfg: TrainingConfig, lam: float | None = None
                  ) -> LossResult:
    """Data misfit (mean squared error) plus ``lam`` times the summed squared remainders.

    Only the dynamics parameters are differentiated; ``grad_phi`` is all zeros.
    """
    if len(batch) == 0:
        raise ValueError("empty batch")
    lam = cfg.lam if lam is None else lam
    return _objective(field, midpoint, batch, cfg, lam, True, False, "mse")


def midpoint_loss(field, midpoint, batch: Dataset, cfg: TrainingConfig) -> LossResult:
    """Sum over records of ``||TL(x0) - y||^2``; only the midpoint is differentiated."""
    if len(batch) == 0:
        raise ValueError("empty batch")
    return _objective(field, midpoint, batch, replace(cfg, scheme="tl"), 0.0, False, True, "sum")


def heldout_mse(field, midpoint, data: Dataset, cfg: TrainingConfig) -> float:
    pred, _ = rollout(field, data.x0, _dt_column(data, cfg.H), cfg.H, cfg.scheme, cfg.p, midpoint)
    return float(np.mean((np.asarray(pred) - data.y) ** 2))


# ---------------------------------------------------------------------------
# distillation
# ---------------------------------------------------------------------------


def distill_dataset(field, source: Dataset, N: int, rng: np.random.Generator,
                    rtol: float = DISTILL_TOL, atol: float = DISTILL_TOL) -> tuple[Dataset, int]:
    """Relabel ``N`` inputs drawn with replacement from ``source`` with Dopri5 on ``field``.

    Records sharing a horizon are integrated together as one stacked system.
    Records whose solve fails are skipped with a warning; returns the new set
    and the number skipped.
    """
    if N < 1:
        raise ValueError("N must be >= 1")
    if len(source) == 0:
        raise ValueError("empty source dataset")
    idx = rng.integers(0, len(source), size=N)
    sub = source.subset(idx)
    y = np.empty_like(sub.x0)
    ok = np.ones(N, dtype=bool)
    span = sub.horizon
    for s in np.unique(span):
        group = np.flatnonzero(span == s)
        try:
            y[group] = dopri5_adaptive(field, sub.x0[group], 0.0, float(s), rtol, atol, record=False).final
        except StiffnessError:
            for j in group:
                try:
                    y[j] = dopri5_adaptive(field, sub.x0[j], 0.0, float(s), rtol, atol, record=False).final
                except StiffnessError:
                    ok[j] = False
    skipped = int(np.sum(~ok))
    if skipped:
        warnings.warn(f"distillation skipped {skipped} record(s) after stiffness failures")
    keep = np.flatnonzero(ok)
    return Dataset(sub.x0[keep], sub.t0[keep], sub.T[keep], y[keep]), skipped


# ---------------------------------------------------------------------------
# alternating optimisation
# ---------------------------------------------------------------------------


def _apply(model, params):
    return model.bind([np.array(p) for p in params])


def train(cfg: TrainingConfig, data: Dataset, field, midpoint: MidpointModel,
          heldout: Dataset | None = None) -> TrainResult:
    """Alternating optimisation; returns final models and the step log.

    ``field`` without a ``bind`` method (a known vector field) is never
    updated. When ``heldout`` is not given a seeded ``cfg.heldout`` fraction
    of ``data`` is set aside for evaluation.
    """
    rng = ad.make_rng(cfg.seed)
    if heldout is None and cfg.heldout > 0 and len(data) > 1:
        data, heldout = data.split(cfg.heldout, rng)
    log = TrainingLog()
    theta_trainable = hasattr(field, "bind") and cfg.N_theta > 0
    phi_trainable = isinstance(midpoint, LearnedMidpoint) and cfg.N_phi > 0
    opt_theta = ad.AdamState.zeros_like(_params_of(field)) if theta_trainable else None
    opt_phi = ad.AdamState.zeros_like(_params_of(midpoint)) if phi_trainable else None
    batches = _Batches(len(data), cfg.batch_size, rng)
    mid_cfg = replace(cfg, scheme="tl")

    def snapshot():
        return TrainResult(field, midpoint, log)

    def record(phase, res, evaluate):
        h = math.nan
        if evaluate and heldout is not None and len(heldout):
            h = heldout_mse(field, midpoint, heldout, cfg if phase == "theta" else mid_cfg)
        log.append(phase, res.value, h, res.penalty, res.nfe, time.perf_counter() - t_start)

    t_start = time.perf_counter()
    step = 0
    for _ in range(cfg.N_train):
        if theta_trainable:
            for s in range(cfg.N_theta):
                batch = data.subset(batches.next())
                try:
                    res = dynamics_loss(field, midpoint, batch, cfg)
                    new, opt_theta = ad.adam_step(_params_of(field), res.grad_theta, opt_theta,
                                                  cfg.lr_theta, cfg.decay)
                    candidate = _apply(field, new)
                    if not all(np.all(np.isfinite(p)) for p in new):
                        raise ad.NonFiniteError("non-finite dynamics parameters")
                except ad.NonFiniteError as exc:
                    raise TrainingAborted(f"dynamics step {step}: {exc}", snapshot()) from exc
                field = candidate
                step += 1
                record("theta", res, step % cfg.eval_every == 0 or s == cfg.N_theta - 1)
        if phi_trainable:
            if cfg.distill:
                target, _ = distill_dataset(field, data, cfg.N_distill, rng)
            else:
                target = data
            mb = _Batches(len(target), cfg.batch_size, rng)
            for s in range(cfg.N_phi):
                batch = target.subset(mb.next())
                try:
                    res = midpoint_loss(field, midpoint, batch, cfg)
                    new, opt_phi = ad.adam_step(_params_of(midpoint), res.grad_phi, opt_phi,
                                                cfg.lr_phi, cfg.decay)
                    if not all(np.all(np.isfinite(p)) for p in new):
                        raise ad.NonFiniteError("non-finite midpoint parameters")
                except ad.NonFiniteError as exc:
                    raise TrainingAborted(f"midpoint step {step}: {exc}", snapshot()) from exc
                midpoint = _apply(midpoint, new)
                step += 1
                if s == cfg.N_phi - 1 and cfg.polish:
                    midpoint = polish_output_layer(field, midpoint, target, cfg.p, cfg.H,
                                                   ridge=cfg.polish_ridge)
                record("phi", res, step % cfg.eval_every == 0 or s == cfg.N_phi - 1)
    return TrainResult(field, midpoint, log)


# ---------------------------------------------------------------------------
# HyperEuler residual fitting and output-layer refinement
# ---------------------------------------------------------------------------


def fit_hypereuler(field, residual: ResidualNet, data: Dataset, steps: int, batch_size: int = 512,
                   lr: float = 1e-3, decay: float = 1e-4, seed: int = 0) -> ResidualNet:
    """Adam on ``mean ||g(x, dt) - (y - x - dt f(x)) / dt**2||^2`` (single-step records)."""
    rng = ad.make_rng(seed)
    dt_all = data.horizon.reshape(-1, 1)
    target = (data.y - data.x0 - dt_all * field.eval(data.x0)) / dt_all**2
    params = residual.net.numpy_params()
    opt = ad.AdamState.zeros_like(params)
    batches = _Batches(len(data), batch_size, rng)
    for _ in range(steps):
        idx = batches.next()
        tape = ad.Tape()
        vars_ = [tape.param(p) for p in params]
        g = residual.bind(vars_)(tape.const(data.x0[idx]), dt_all[idx])
        loss = ad.scale(ad.total(ad.square(ad.sub(g, target[idx]))), 1.0 / target[idx].size)
        grads = tape.backward(loss)
        params, opt = ad.adam_step(params, grads, opt, lr, decay)
    return residual.bind(params)


def polish_output_layer(field, midpoint: LearnedMidpoint, data: Dataset, p: int, H: int = 1,
                        iters: int = 3, ridge: float = 1e-12) -> LearnedMidpoint:
    """Gauss-Newton refinement of the midpoint network's last affine layer.

    Minimises ``sum ||TL(x0) - y||^2 + ridge' ||W_last||^2`` over the last
    weight matrix and bias, where ``ridge'`` is ``ridge`` times the mean
    squared Jacobian column norm. The residual is affine in these parameters
    when the field is linear, so one step is an exact (ridge) least-squares
    solve; other fields get a few iterations guarded by a decrease check.
    """
    params = midpoint.net.numpy_params()
    k_w = len(params) - 2 if midpoint.net.bias else len(params) - 1
    last = params[k_w:]
    shapes = [q.shape for q in last]
    sizes = [q.size for q in last]
    n_w = sizes[0]
    dt = _dt_column(data, H)

    def unpack(vec):
        parts, o = [], 0
        for shp, sz in zip(shapes, sizes):
            parts.append(vec[o: o + sz].reshape(shp))
            o += sz
        return parts

    def residual(vec):
        m = midpoint.bind(params[:k_w] + unpack(vec))
        pred, _ = rollout(field, data.x0, dt, H, "tl", p, m)
        return (np.asarray(pred) - data.y).reshape(-1)

    w = np.concatenate([q.reshape(-1) for q in last])
    r = residual(w)
    alpha = 0.0

    def cost_of(r_, w_):
        return float(r_ @ r_) + alpha * float(w_[:n_w] @ w_[:n_w])

    cost = math.inf
    for _ in range(iters):
        J = np.empty((r.size, w.size))
        for k in range(w.size):
            h = 1e-3 * max(1.0, abs(w[k]))
            e = np.zeros_like(w)
            e[k] = h
            J[:, k] = (residual(w + e) - residual(w - e)) / (2 * h)
        if not math.isfinite(cost):
            alpha = ridge * float(np.mean(np.sum(J * J, axis=0)))
            cost = cost_of(r, w)
        reg = np.zeros((n_w, w.size))
        reg[:, :n_w] = math.sqrt(alpha) * np.eye(n_w)
        lhs = np.vstack([J, reg])
        rhs = -np.concatenate([r, math.sqrt(alpha) * w[:n_w]])
        step = np.linalg.lstsq(lhs, rhs, rcond=None)[0]
        t = 1.0
        while t > 1e-4:
            r_new = residual(w + t * step)
            c_new = cost_of(r_new, w + t * step)
            if math.isfinite(c_new) and c_new < cost:
                break
            t *= 0.5
        else:
            break
        w, r, cost = w + t * step, r_new, c_new
    return midpoint.bind(params[:k_w] + unpack(w))
