"""Acceptance criteria A1-A9; each test prints one PASS/FAIL line."""

import math
import time

import numpy as np
import pytest

from tlode import tensor_ad as ad
from tlode.dynamics import LinearField, Mlp, MlpField, PendulumField, exact_linear_solution, stiff_system
from tlode.experiments import (
    KnownStiffRecipe,
    LearnStiffRecipe,
    enclosure_audit,
    integration_sweep,
    learn_stiff,
    learn_stiff_data,
    train_known_stiff_hypereuler,
    train_known_stiff_midpoint,
)
from tlode.integrators import dopri5_adaptive, tl_step
from tlode.midpoint import AnalyticLinearMidpoint, LearnedMidpoint, remainder_estimate
from tlode.taylor_jets import nested_jvp_oracle, ode_taylor_coefficients
from tlode.training import Dataset, TrainingConfig, dynamics_loss, midpoint_loss, train

STIFF = stiff_system()


def rel_err(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300))


def test_a1_taylor_coefficient_exactness(report):
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(100):
        n = int(rng.integers(1, 5))
        A = rng.standard_normal((n, n))
        x = rng.standard_normal(n)
        coeffs = ode_taylor_coefficients(LinearField(A), x, 6)
        Ak = np.eye(n)
        for l in range(1, 7):
            Ak = Ak @ A
            worst = max(worst, rel_err(coeffs[l - 1], Ak @ x / math.factorial(l)))
    assert report("A1", worst <= 1e-10, f"max relative error {worst:.2e} (tol 1e-10)")


def test_a2_oracle_equivalence_and_cost(report):
    worst = 0.0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(1, 5))
        net = Mlp.init((n, 8, n), ("tanh", "none"), rng)
        x = rng.uniform(-1, 1, n)
        f = MlpField(net)
        for a, b in zip(ode_taylor_coefficients(f, x, 4), nested_jvp_oracle(f, x, 4)):
            worst = max(worst, rel_err(a, b))
    f = MlpField(Mlp.init((2, 16, 2), ("tanh", "none"), np.random.default_rng(0)))
    x = np.array([0.3, -0.2])
    jet, oracle = [], []
    for p in range(1, 9):
        with ad.OpCounter() as c:
            ode_taylor_coefficients(f, x, p)
        jet.append(c.count)
        if p <= 4:
            with ad.OpCounter() as c:
                nested_jvp_oracle(f, x, p)
            oracle.append(c.count)
    second = np.diff(jet, 2)
    quadratic = bool(np.all(second <= second[0])) and jet[-1] <= jet[0] * 8**2
    ratios = [oracle[i + 1] / oracle[i] for i in range(1, 3)]
    exponential = min(ratios) >= 2.5 and oracle[3] > jet[3]
    ok = worst <= 1e-9 and quadratic and exponential
    assert report("A2", ok, f"max relative error {worst:.2e}; jet passes {jet}; oracle passes {oracle}")


def test_a3_linear_exactness(report):
    rng = np.random.default_rng(1)
    X = rng.uniform(-0.5, 0.5, (20, 2))
    mid = AnalyticLinearMidpoint(STIFF.A, order=1)
    worst = 0.0
    for dt in (1e-4, 1e-3, 1e-2, 0.1, 0.3):
        out = tl_step(STIFF.field, mid, X, dt, 1)
        worst = max(worst, float(np.max(np.abs(out - exact_linear_solution(STIFF, X, dt)))))
    assert report("A3", worst <= 1e-12, f"max abs error {worst:.2e} (tol 1e-12)")


class _Perturbed(AnalyticLinearMidpoint):
    eta = 0.0
    u = np.array([0.6, 0.8])

    def predict(self, field, x, dt, fx=None):
        pred = super().predict(field, x, dt, fx)
        pred.gamma = pred.gamma + self.eta * self.u
        return pred


def _perturbed_error(p, dt, eta, x):
    m = _Perturbed(STIFF.A, order=p)
    m.eta = eta
    return float(np.linalg.norm(tl_step(STIFF.field, m, x, dt, p) - exact_linear_solution(STIFF, x, dt)))


def test_a4_midpoint_perturbation_scaling(report):
    x = np.array([0.3, 0.3])
    etas = np.logspace(-6, -2, 5)
    dts = np.logspace(-4, -2, 5)
    details, ok = [], True
    for p in (1, 2, 3):
        e_eta = [_perturbed_error(p, 1e-3, eta, x) for eta in etas]
        e_dt = [_perturbed_error(p, dt, 1e-4, x) for dt in dts]
        s_eta = np.polyfit(np.log(etas), np.log(e_eta), 1)[0]
        s_dt = np.polyfit(np.log(dts), np.log(e_dt), 1)[0]
        ok &= abs(s_eta - 1) <= 0.1 and abs(s_dt - p) <= 0.2
        details.append(f"p={p}: eta slope {s_eta:.3f}, dt slope {s_dt:.3f}")
    assert report("A4", ok, "; ".join(details))


@pytest.fixture(scope="module")
def known_stiff_sweep():
    recipe = KnownStiffRecipe()
    seed = 0
    t0 = time.perf_counter()
    midpoints, residuals = {}, {}
    for h in recipe.horizons:
        for p in recipe.orders:
            midpoints[(p, h)] = train_known_stiff_midpoint(STIFF, h, p, recipe, seed).midpoint
        residuals[h] = train_known_stiff_hypereuler(STIFF, h, recipe, seed)
    t_train = time.perf_counter() - t0
    t1 = time.perf_counter()
    rows = integration_sweep(STIFF, recipe, seed + 1, midpoints, residuals)
    t_sweep = time.perf_counter() - t1
    return rows, t_train, t_sweep


@pytest.mark.slow
def test_a5_known_stiff_reproduction(report, known_stiff_sweep):
    rows, t_train, t_sweep = known_stiff_sweep

    def errs(s, h, p=None):
        return np.array([r[4] for r in rows if r[0] == s and r[2] == h and (p is None or r[1] == p)])

    def nfe(s, h):
        return float(np.mean([r[5] for r in rows if r[0] == s and r[2] == h]))

    tl_err = float(np.mean(errs("tl", 0.3)))
    # the reported value is the mean over states; the worst single state is shown alongside
    saturated, worst = {}, {}
    for s, p in (("truncated_taylor", 2), ("rk4", None), ("hypereuler", None)):
        saturated[s] = min(float(np.mean(errs(s, h, p))) for h in (0.05, 0.1, 0.2, 0.3))
        worst[s] = min(float(np.min(errs(s, h, p))) for h in (0.05, 0.1, 0.2, 0.3))
    dopri_err = float(np.mean(errs("dopri5", 0.3)))
    ratio = nfe("dopri5", 0.3) / nfe("tl", 0.3)
    ok_i = tl_err <= 1e-3 and all(round(v, 2) == 1.0 for v in saturated.values())
    ok_ii = dopri_err <= 1e-10 and ratio >= 10
    ok_t = t_sweep <= 600
    sat = ", ".join(f"{k} mean {v:.4f} (worst state {worst[k]:.3g})" for k, v in saturated.items())
    detail = (f"TL mean error at 0.3 = {tl_err:.2e}; baselines for horizon >= 0.05: {sat}; "
              f"Dopri5 mean error {dopri_err:.2e}, NFE ratio {ratio:.0f}x; "
              f"sweep {t_sweep:.0f} s (training {t_train:.0f} s)")
    assert report("A5", ok_i and ok_ii and ok_t, detail)


@pytest.mark.slow
def test_a6_learned_dynamics_ordering(report):
    recipe = LearnStiffRecipe()
    data = learn_stiff_data(STIFF, recipe, 0)
    mse = {s: learn_stiff(STIFF, recipe, s, 0, data)[1] for s in ("tl", "rk4", "truncated_taylor")}
    ok = mse["tl"] < mse["rk4"] < mse["truncated_taylor"] and mse["tl"] <= 2e-5
    detail = ", ".join(f"{k} {v:.3e}" for k, v in mse.items())
    assert report("A6", ok, f"held-out MSE after {recipe.steps} steps: {detail}")


def _fd_check(loss_of, params, grads):
    worst = 0.0
    for k, P in enumerate(params):
        fd = np.zeros_like(P)
        for idx in np.ndindex(P.shape):
            h = 1e-6 * (1 + abs(P[idx]))
            up = [q.copy() for q in params]
            dn = [q.copy() for q in params]
            up[k][idx] += h
            dn[k][idx] -= h
            fd[idx] = (loss_of(up) - loss_of(dn)) / (2 * h)
        worst = max(worst, rel_err(grads[k], fd))
    return worst


def test_a7_gradient_audit(report):
    A = np.array([[-1.0, 0.5], [-0.5, -3.0]])
    rng = np.random.default_rng(7)
    x0 = rng.uniform(-0.5, 0.5, (12, 2))
    data = Dataset(x0, np.zeros(12), np.full(12, 0.1), exact_linear_solution(A, x0, 0.1))
    field = MlpField(Mlp.init((2, 6, 2), ("tanh", "none"), rng))
    mid = LearnedMidpoint.init(2, rng, hidden=(5,), activation="tanh")
    assert field.net.n_params <= 100 and mid.net.n_params <= 100
    worst_theta = worst_phi = 0.0
    for p in (1, 2, 3):
        cfg = TrainingConfig(p=p, lam=2.0, H=2)
        res = dynamics_loss(field, mid, data, cfg)
        th = field.net.numpy_params()
        worst_theta = max(worst_theta, _fd_check(
            lambda ps: dynamics_loss(field.bind(ps), mid, data, cfg).value, th, res.grad_theta))
        res = midpoint_loss(field, mid, data, cfg)
        ph = mid.net.numpy_params()
        worst_phi = max(worst_phi, _fd_check(
            lambda ps: midpoint_loss(field, mid.bind(ps), data, cfg).value, ph, res.grad_phi))
    ok = worst_theta <= 1e-4 and worst_phi <= 1e-4
    assert report("A7", ok, f"dynamics-loss rel error {worst_theta:.2e}, midpoint-loss rel error {worst_phi:.2e}")


def test_a8_enclosure_soundness(report):
    rows = enclosure_audit({"linear": STIFF.field, "pendulum": PendulumField(1.0)}, 1000, seed=0)
    gron = sum(not r[5] for r in rows)
    encl = sum(not r[7] for r in rows)
    per = {name: sum(1 for r in rows if r[0] == name) for name in ("linear", "pendulum")}
    ok = gron == 0 and encl == 0 and per == {"linear": 1000, "pendulum": 1000}
    assert report("A8", ok, f"samples {per}; Gronwall violations {gron}; enclosure violations {encl}")


@pytest.mark.slow
def test_a9_regularisation_effect(report):
    recipe = LearnStiffRecipe()
    train_set, test_set = learn_stiff_data(STIFF, recipe, 0)
    X = np.random.default_rng(3).uniform(-0.5, 0.5, (64, 2))
    stats = {}
    for lam in (0.0, 200.0):
        rems, nfes = [], []
        for seed in range(5):
            fnet = MlpField(Mlp.init((2, 64, 2), ("none", "none"), ad.make_rng(100 + seed)))
            mid = LearnedMidpoint.init(2, ad.make_rng(200 + seed), (16,), "relu")
            cfg = TrainingConfig(N_train=5, N_theta=200, N_phi=50, lam=lam, p=2, seed=seed,
                                 polish=True, eval_every=10**9)
            res = train(cfg, train_set, fnet, mid, heldout=test_set)
            r = np.asarray(remainder_estimate(res.field, res.midpoint, test_set.x0, recipe.horizon, 2))
            rems.append(float(np.sum(r**2)) / len(test_set))
            nfes.append(dopri5_adaptive(res.field, X, 0.0, 1.0).nfe)
        stats[lam] = (float(np.mean(rems)), float(np.mean(nfes)))
    ok = stats[200.0][0] < stats[0.0][0] and stats[200.0][1] < stats[0.0][1]
    detail = "; ".join(f"lambda={k:g}: mean remainder {v[0]:.3e}, mean Dopri5 NFE {v[1]:.0f}"
                       for k, v in stats.items())
    assert report("A9", ok, detail)
