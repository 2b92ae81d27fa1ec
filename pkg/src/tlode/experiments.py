"""Experiment recipes for the stiff linear benchmark.

Each runner returns plain rows (tuples in a fixed column order) so the CLI
can write them straight to CSV and the tests can inspect them.
"""

from __future__ import annotations

import math
import os
import statistics
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from . import tensor_ad as ad
from .dynamics import (
    LinearField,
    LinearStiffSystem,
    Mlp,
    MlpField,
    PendulumField,
    expm,
    lipschitz_estimate,
)
from .enclosure import LIPSCHITZ_SAFETY, apriori_enclosure, contains, gronwall_variation_bound
from .integrators import (
    IntegratorConfig,
    ResidualNet,
    Scheme,
    dopri5_adaptive,
    integrate,
    normalized_error,
    rk4_step,
    euler_step,
    taylor_step,
    tl_step,
)
from .midpoint import AnalyticLinearMidpoint, LearnedMidpoint
from .training import (
    Dataset,
    TrainingConfig,
    TrainResult,
    fit_hypereuler,
    heldout_mse,
    polish_output_layer,
    train,
)

__all__ = [
    "trajectory_dataset",
    "KnownStiffRecipe",
    "LearnStiffRecipe",
    "train_known_stiff_midpoint",
    "train_known_stiff_hypereuler",
    "integration_sweep",
    "learn_stiff",
    "convergence_sweep",
    "enclosure_audit",
    "median_wall_ns",
    "worker_count",
    "SWEEP_COLUMNS",
    "CONVERGENCE_COLUMNS",
    "AUDIT_COLUMNS",
    "LEARN_COLUMNS",
]

SWEEP_COLUMNS = ("scheme", "p", "horizon", "state", "normalized_error", "nfe", "wall_ns")
CONVERGENCE_COLUMNS = ("scheme", "p", "dt", "error", "fitted_slope")
AUDIT_COLUMNS = ("system", "sample", "dt", "deviation", "gronwall_bound", "gronwall_ok",
                 "max_excess", "enclosure_ok")
LEARN_COLUMNS = ("scheme", "p", "dynamics_steps", "heldout_mse", "wall_s")


def worker_count() -> int:
    """Thread cap from ``TLODE_THREADS`` (default 1)."""
    raw = os.environ.get("TLODE_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def median_wall_ns(fn: Callable[[], object], reps: int = 5) -> tuple[int, object]:
    """Median wall time of ``reps`` timed calls after one warm-up; returns (ns, last result)."""
    out = fn()
    times = []
    for _ in range(reps):
        t = time.perf_counter_ns()
        out = fn()
        times.append(time.perf_counter_ns() - t)
    return int(statistics.median(times)), out


def trajectory_dataset(A: np.ndarray, x0s: np.ndarray, horizon: float, t_end: float = 10.0,
                       obs: float | None = None) -> Dataset:
    """Pairs ``(x(t_k), x(t_k + horizon))`` along exact linear trajectories.

    ``t_k`` runs over ``[0, t_end)`` on a grid of spacing ``obs`` (default:
    the horizon itself, i.e. consecutive steps of the trajectory).
    """
    obs = horizon if obs is None else obs
    K = int(round(t_end / obs))
    tk = np.arange(K) * obs
    E = expm(np.asarray(A) * horizon)
    starts = np.concatenate([x0s @ expm(np.asarray(A) * t).T for t in tk])
    t0 = np.repeat(tk, x0s.shape[0])
    return Dataset(starts, t0, t0 + horizon, starts @ E.T)


# ---------------------------------------------------------------------------
# known stiff dynamics: learned midpoint versus fixed-step baselines
# ---------------------------------------------------------------------------


@dataclass
class KnownStiffRecipe:
    horizons: tuple = (0.01, 0.05, 0.1, 0.2, 0.3)
    orders: tuple = (2,)
    n_traj: int = 100
    t_end: float = 10.0
    box: float = 0.5
    hidden: tuple = (16,)
    activation: str = "relu"
    epochs: int = 1000
    max_steps: int = 10_000
    batch_size: int = 512
    lr: float = 1e-3
    decay: float = 1e-4
    polish: bool = True
    polish_ridge: float = 1e-12
    hyper_hidden: tuple = (32,)
    hyper_lr: float = 1e-3
    n_states: int = 250
    timing_reps: int = 5

    def steps_for(self, n_records: int) -> int:
        return min(self.max_steps, self.epochs * math.ceil(n_records / self.batch_size))


def _train_x0s(recipe, rng):
    return rng.uniform(-recipe.box, recipe.box, size=(recipe.n_traj, 2))


def train_known_stiff_midpoint(system: LinearStiffSystem, horizon: float, p: int,
                               recipe: KnownStiffRecipe, seed: int) -> TrainResult:
    """Adam on the midpoint objective with the field fixed, then an output-layer polish."""
    rng = ad.make_rng(seed)
    data = trajectory_dataset(system.A, _train_x0s(recipe, rng), horizon, recipe.t_end)
    model = LearnedMidpoint.init(2, rng, recipe.hidden, recipe.activation)
    cfg = TrainingConfig(N_train=1, N_theta=0, N_phi=recipe.steps_for(len(data)),
                         batch_size=recipe.batch_size, lr_phi=recipe.lr, decay=recipe.decay,
                         p=p, seed=seed, distill=False, heldout=0.0, eval_every=10**9)
    res = train(cfg, data, system.field, model)
    if recipe.polish and cfg.N_phi > 0:
        res.midpoint = polish_output_layer(system.field, res.midpoint, data, p,
                                           ridge=recipe.polish_ridge)
    return res


def train_known_stiff_hypereuler(system: LinearStiffSystem, horizon: float,
                                 recipe: KnownStiffRecipe, seed: int) -> ResidualNet:
    rng = ad.make_rng(seed)
    data = trajectory_dataset(system.A, _train_x0s(recipe, rng), horizon, recipe.t_end)
    net = ResidualNet.init(2, rng, recipe.hyper_hidden, recipe.activation)
    return fit_hypereuler(system.field, net, data, recipe.steps_for(len(data)), recipe.batch_size,
                          recipe.hyper_lr, recipe.decay, seed)


def integration_sweep(system: LinearStiffSystem, recipe: KnownStiffRecipe, seed: int,
                      midpoints: dict, residuals: dict, schemes: Sequence[str] | None = None
                      ) -> list[tuple]:
    """Per-state rows over the horizon grid.

    ``midpoints`` maps ``(p, horizon)`` to a midpoint model and ``residuals``
    maps ``horizon`` to a HyperEuler network. Every fixed-step scheme uses a
    single step over the horizon.
    """
    rng = ad.make_rng(seed)
    X = rng.uniform(-recipe.box, recipe.box, size=(recipe.n_states, 2))
    f = system.field
    schemes = list(schemes or ("tl", "truncated_taylor", "rk4", "hypereuler", "dopri5"))
    rows = []
    for h in recipe.horizons:
        exact = X @ expm(system.A * h).T
        jobs = []
        for s in schemes:
            if s in ("tl", "truncated_taylor"):
                orders = recipe.orders if s == "tl" else sorted({1, 2, *recipe.orders})
                for p in orders:
                    jobs.append((s, p))
            else:
                jobs.append((s, 0))
        for s, p in jobs:
            cfg = IntegratorConfig(s, p=max(p, 1))
            mid = midpoints.get((p, h)) if s == "tl" else None
            res_net = residuals.get(h) if s == "hypereuler" else None
            if s == "tl" and mid is None:
                raise KeyError(f"no midpoint model for p={p}, horizon={h}")
            if s == "hypereuler" and res_net is None:
                raise KeyError(f"no HyperEuler network for horizon={h}")

            def one(i, s=s, cfg=cfg, mid=mid, res_net=res_net, h=h, p=p):
                run = lambda: integrate(f, X[i], 0.0, h, cfg, midpoint=mid, residual=res_net)
                ns, tr = median_wall_ns(run, recipe.timing_reps)
                err = float(normalized_error(tr.final, exact[i]))
                return (s, p, h, i, err, tr.nfe, ns)

            with ThreadPoolExecutor(max_workers=worker_count()) as pool:
                rows.extend(pool.map(one, range(len(X))))
    return rows


# ---------------------------------------------------------------------------
# learning unknown stiff dynamics
# ---------------------------------------------------------------------------


@dataclass
class LearnStiffRecipe:
    horizon: float = 0.01
    obs: float = 0.1
    n_traj: int = 100
    n_test_traj: int = 10
    t_end: float = 10.0
    box: float = 0.5
    dyn_hidden: int = 64
    steps: int = 20_000
    N_phi: int = 200
    N_distill: int = 1024
    batch_size: int = 512
    lr_theta: float = 1e-2
    lr_phi: float = 1e-4
    decay: float = 1e-4
    p: int = 2
    lam: float = 0.0
    mid_hidden: tuple = (16,)
    activation: str = "relu"
    polish: bool = True
    polish_ridge: float = 1e-12
    eval_every: int = 1000


def learn_stiff_data(system: LinearStiffSystem, recipe: LearnStiffRecipe, seed: int
                     ) -> tuple[Dataset, Dataset]:
    rng = ad.make_rng(seed)
    tr = trajectory_dataset(system.A, rng.uniform(-recipe.box, recipe.box, (recipe.n_traj, 2)),
                            recipe.horizon, recipe.t_end, recipe.obs)
    te = trajectory_dataset(system.A, rng.uniform(-recipe.box, recipe.box, (recipe.n_test_traj, 2)),
                            recipe.horizon, recipe.t_end, recipe.obs)
    return tr, te


def learn_stiff(system: LinearStiffSystem, recipe: LearnStiffRecipe, scheme: str, seed: int,
                data: tuple[Dataset, Dataset] | None = None) -> tuple[TrainResult, float, float]:
    """Fit the two-layer linear dynamics network with one integration scheme.

    ``tl`` alternates dynamics and midpoint phases of ``N_phi`` steps each;
    the other schemes take ``steps`` plain dynamics steps. Returns the
    result, the final held-out MSE and the wall time in seconds.
    """
    train_set, test_set = data if data is not None else learn_stiff_data(system, recipe, seed)
    rng = ad.make_rng(seed + 1)
    net = Mlp.init((2, recipe.dyn_hidden, 2), ("none", "none"), rng)
    fnet = MlpField(net)
    mid = LearnedMidpoint.init(2, rng, recipe.mid_hidden, recipe.activation)
    common = dict(batch_size=recipe.batch_size, lr_theta=recipe.lr_theta, lr_phi=recipe.lr_phi,
                  decay=recipe.decay, p=recipe.p, seed=seed, lam=recipe.lam,
                  N_distill=recipe.N_distill, eval_every=recipe.eval_every,
                  polish=recipe.polish, polish_ridge=recipe.polish_ridge)
    if recipe.steps == 0:
        cfg = TrainingConfig(N_train=1, N_theta=0, N_phi=0, scheme=scheme, **common)
    elif scheme == "tl":
        rounds = max(1, recipe.steps // recipe.N_phi)
        cfg = TrainingConfig(N_train=rounds, N_theta=recipe.N_phi, N_phi=recipe.N_phi,
                             scheme="tl", **common)
    else:
        cfg = TrainingConfig(N_train=1, N_theta=recipe.steps, N_phi=0, scheme=scheme, **common)
    t = time.perf_counter()
    res = train(cfg, train_set, fnet, mid, heldout=test_set)
    wall = time.perf_counter() - t
    return res, heldout_mse(res.field, res.midpoint, test_set, cfg), wall


# ---------------------------------------------------------------------------
# one-step convergence on an analytic linear system
# ---------------------------------------------------------------------------


def _slope(dts, errs) -> str:
    d = np.asarray(dts, dtype=float)
    e = np.asarray(errs, dtype=float)
    if np.all(e <= 1e-13):
        return "exact"
    keep = e > 1e-13
    if keep.sum() < 2:
        return "exact"
    return f"{np.polyfit(np.log(d[keep]), np.log(e[keep]), 1)[0]:.4f}"


def convergence_sweep(A: np.ndarray, x0: np.ndarray, dts: Sequence[float],
                      schemes: Sequence[tuple[str, int]] = (("euler", 1), ("truncated_taylor", 1),
                                                            ("truncated_taylor", 2), ("rk4", 4),
                                                            ("tl", 1), ("tl", 2))
                      ) -> list[tuple]:
    """One-step absolute errors against the matrix exponential, with a fitted log-log slope."""
    A = np.asarray(A, dtype=np.float64)
    f = LinearField(A)
    x0 = np.asarray(x0, dtype=np.float64)
    rows = []
    for s, p in schemes:
        errs = []
        for dt in dts:
            exact = expm(A * dt) @ x0
            if s == "euler":
                xn = euler_step(f, x0, dt)
            elif s == "truncated_taylor":
                xn = taylor_step(f, x0, dt, p)
            elif s == "rk4":
                xn = rk4_step(f, x0, dt)
            elif s == "tl":
                xn = tl_step(f, AnalyticLinearMidpoint(A, order=p), x0, dt, p)
            else:
                raise ValueError(f"unsupported scheme '{s}' for the convergence sweep")
            errs.append(float(np.linalg.norm(np.asarray(xn) - exact)))
        slope = _slope(dts, errs)
        rows.extend((s, p, float(dt), e, slope) for dt, e in zip(dts, errs))
    return rows


# ---------------------------------------------------------------------------
# a priori enclosure audit
# ---------------------------------------------------------------------------


def enclosure_audit(systems: dict, samples: int, seed: int, box: float = 0.5,
                    slack: float = 1e-12) -> list[tuple]:
    """Sample ``(x0, dt)`` with ``dt sqrt(n) ||L|| < 1`` and check both one-step bounds.

    ``systems`` maps names to fields. Linear fields use exact row norms;
    other fields use a sampled estimate scaled by the safety factor. The
    reference state comes from Dopri5 at 1.4e-12.
    """
    rng = ad.make_rng(seed)
    rows = []
    for name, fld in systems.items():
        n = fld.dim
        lo, hi = -box * np.ones(n), box * np.ones(n)
        _, L = lipschitz_estimate(fld, lo, hi, 4096, rng)
        if not isinstance(fld, LinearField):
            L *= LIPSCHITZ_SAFETY
        dt_max = 1.0 / (math.sqrt(n) * L)
        for k in range(samples):
            x0 = rng.uniform(lo, hi)
            dt = float(rng.uniform(0.01, 0.99) * dt_max)
            ref = dopri5_adaptive(fld, x0, 0.0, dt, record=False).final
            dev = float(np.linalg.norm(ref - x0))
            bound = gronwall_variation_bound(fld, L, x0, dt)
            enc = apriori_enclosure(fld, L, x0, dt, n)
            excess = float(np.max(np.abs(ref - enc.center) - enc.radius))
            rows.append((name, k, dt, dev, bound, dev <= bound + slack, excess,
                         contains(enc, ref, slack)))
    return rows
