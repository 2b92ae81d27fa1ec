import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from tlode.dynamics import LinearField, Mlp, MlpField, expm, stiff_system
from tlode.midpoint import AnalyticLinearMidpoint, DegenerateMidpoint, LearnedMidpoint, analytic_linear_gammabar
from tlode.training import (
    LOG_COLUMNS,
    Dataset,
    TrainingAborted,
    TrainingConfig,
    distill_dataset,
    dynamics_loss,
    midpoint_loss,
    polish_output_layer,
    train,
)

STIFF = stiff_system()


def linear_net(A, bias=None):
    n = A.shape[0]
    return MlpField(Mlp((n, n), ("none",), [A.T.copy(), np.zeros(n) if bias is None else bias]))


def tanh_dynamics(seed, n=2, hidden=6):
    return MlpField(Mlp.init((n, hidden, n), ("tanh", "none"), np.random.default_rng(seed)))


def exact_records(A, m, dt, seed=0, box=0.5):
    x0 = np.random.default_rng(seed).uniform(-box, box, (m, A.shape[0]))
    return Dataset(x0, np.zeros(m), np.full(m, dt), x0 @ expm(A * dt).T)


def constant_midpoint(G, hidden=4):
    """A learned midpoint whose output is the constant matrix ``G``."""
    n = G.shape[0]
    net = Mlp.init((n + 1, hidden, n * n), ("relu", "none"), np.random.default_rng(0))
    W1, b1, W2, _ = net.numpy_params()
    return LearnedMidpoint(net.bind([W1, b1, np.zeros_like(W2), G.reshape(-1).copy()]), n)


class TestDataset:
    def test_horizon_must_be_positive(self):
        with pytest.raises(ValueError, match="record 1"):
            Dataset(np.zeros((2, 2)), [0.0, 1.0], [1.0, 1.0], np.zeros((2, 2)))

    def test_dimension_agreement(self):
        with pytest.raises(ValueError):
            Dataset(np.zeros((2, 2)), [0, 0], [1, 1], np.zeros((2, 3)))

    def test_records_round_trip(self):
        d = exact_records(STIFF.A, 5, 0.1)
        again = Dataset.from_records(d.records)
        np.testing.assert_array_equal(again.x0, d.x0)
        np.testing.assert_array_equal(again.y, d.y)
        assert len(again) == 5 and again.n == 2

    def test_split_is_seeded(self):
        d = exact_records(STIFF.A, 50, 0.1)
        a1, b1 = d.split(0.1, np.random.default_rng(3))
        a2, b2 = d.split(0.1, np.random.default_rng(3))
        assert len(b1) == 5 and len(a1) == 45
        np.testing.assert_array_equal(b1.x0, b2.x0)


class TestConfig:
    @pytest.mark.parametrize("kw", [{"p": 4}, {"lam": -1.0}, {"N_train": 0}, {"batch_size": 0},
                                    {"N_theta": -1}, {"heldout": 1.0}, {"penalty_reduction": "max"},
                                    {"scheme": "leapfrog"}])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            TrainingConfig(**kw)


class TestDynamicsLoss:
    def test_perfect_model(self):
        data = exact_records(STIFF.A, 16, 0.01)
        cfg = TrainingConfig(p=1, lam=0.0)
        res = dynamics_loss(linear_net(STIFF.A), AnalyticLinearMidpoint(STIFF.A), data, cfg)
        assert res.value <= 1e-20

    def test_degenerate_order1_is_euler_mse(self):
        data = exact_records(STIFF.A, 16, 1e-3)
        cfg = TrainingConfig(p=1, lam=0.0)
        res = dynamics_loss(linear_net(STIFF.A), DegenerateMidpoint(), data, cfg)
        euler = data.x0 + 1e-3 * data.x0 @ STIFF.A.T
        assert res.value == pytest.approx(np.mean((euler - data.y) ** 2), rel=1e-12)

    def test_zero_field_fixed_point(self):
        x0 = np.array([[0.2, -0.4]])
        data = Dataset(x0, [0.0], [0.1], x0)
        res = dynamics_loss(linear_net(np.zeros((2, 2))), DegenerateMidpoint(), data,
                            TrainingConfig(p=2, lam=200.0))
        assert res.value == 0.0 and res.penalty == 0.0

    def test_penalty_is_summed_remainders(self):
        data = exact_records(STIFF.A, 8, 1e-3)
        f = tanh_dynamics(1)
        mid = LearnedMidpoint.init(2, np.random.default_rng(2))
        base = dynamics_loss(f, mid, data, TrainingConfig(p=2, lam=0.0))
        reg = dynamics_loss(f, mid, data, TrainingConfig(p=2, lam=3.0))
        assert reg.value == pytest.approx(base.value + 3.0 * reg.penalty, rel=1e-12)
        mean = dynamics_loss(f, mid, data, TrainingConfig(p=2, lam=3.0, penalty_reduction="mean"))
        assert mean.penalty == pytest.approx(reg.penalty / 8, rel=1e-12)

    def test_gradient_isolation(self):
        data = exact_records(STIFF.A, 8, 1e-3)
        f = tanh_dynamics(0)
        mid = LearnedMidpoint.init(2, np.random.default_rng(1), activation="tanh")
        cfg = TrainingConfig(p=2, lam=1.0)
        d = dynamics_loss(f, mid, data, cfg)
        m = midpoint_loss(f, mid, data, cfg)
        assert all(np.count_nonzero(g) == 0 for g in d.grad_phi)
        assert all(np.count_nonzero(g) == 0 for g in m.grad_theta)
        assert any(np.count_nonzero(g) for g in d.grad_theta)
        assert any(np.count_nonzero(g) for g in m.grad_phi)

    def test_empty_batch(self):
        data = exact_records(STIFF.A, 4, 0.1).subset(np.array([], dtype=int))
        with pytest.raises(ValueError):
            dynamics_loss(linear_net(STIFF.A), DegenerateMidpoint(), data, TrainingConfig())


class TestMidpointLoss:
    @pytest.mark.parametrize("p", [1, 2])
    def test_analytic_parameters_are_exact(self, p):
        dt = 0.01
        G, _ = analytic_linear_gammabar(STIFF.A, dt, order=p)
        data = exact_records(STIFF.A, 32, dt)
        res = midpoint_loss(STIFF.field, constant_midpoint(G), data, TrainingConfig(p=p))
        assert res.value <= 1e-20

    def test_zero_field(self):
        zero = LinearField(np.zeros((2, 2)))
        x0 = np.random.default_rng(0).uniform(-1, 1, (6, 2))
        data = Dataset(x0, np.zeros(6), np.full(6, 0.1), x0)
        mid = LearnedMidpoint.init(2, np.random.default_rng(5))
        assert midpoint_loss(zero, mid, data, TrainingConfig(p=2)).value == 0.0

    def test_trained_midpoint_beats_degenerate(self):
        dt = 0.01
        data = exact_records(STIFF.A, 256, dt, seed=1)
        test = exact_records(STIFF.A, 64, dt, seed=2)
        cfg = TrainingConfig(N_theta=0, N_phi=50, lr_phi=1e-3, p=2, distill=False, heldout=0.0,
                             batch_size=64, polish=True)
        res = train(cfg, data, STIFF.field, LearnedMidpoint.init(2, np.random.default_rng(0)))
        learned = midpoint_loss(STIFF.field, res.midpoint, test, cfg).value
        degenerate = midpoint_loss(STIFF.field, DegenerateMidpoint(), test, cfg).value
        assert learned < degenerate


class TestDistill:
    def test_zero_field_labels(self):
        src = exact_records(STIFF.A, 10, 0.1)
        d, skipped = distill_dataset(LinearField(np.zeros((2, 2))), src, 7, np.random.default_rng(0))
        np.testing.assert_array_equal(d.y, d.x0)
        assert skipped == 0

    def test_linear_labels_match_expm(self):
        src = exact_records(STIFF.A, 10, 0.1)
        d, _ = distill_dataset(STIFF.field, src, 20, np.random.default_rng(0))
        np.testing.assert_allclose(d.y, d.x0 @ expm(STIFF.A * 0.1).T, atol=1e-10)

    def test_sampling_with_replacement(self):
        src = exact_records(STIFF.A, 3, 0.05)
        d, _ = distill_dataset(STIFF.field, src, 11, np.random.default_rng(0))
        assert len(d) == 11
        assert {tuple(r) for r in d.x0} <= {tuple(r) for r in src.x0}

    def test_mixed_horizons(self):
        src = Dataset.from_records([([0.1, 0.2], 0.0, 0.1, [0, 0]), ([0.3, -0.1], 1.0, 1.3, [0, 0])])
        d, _ = distill_dataset(STIFF.field, src, 8, np.random.default_rng(1))
        for x0, h, y in zip(d.x0, d.horizon, d.y):
            np.testing.assert_allclose(y, expm(STIFF.A * h) @ x0, atol=1e-10)

    def test_stiffness_failure_is_skipped(self):
        blowup = MlpField(Mlp((1, 1), ("exp",), [np.array([[50.0]]), np.zeros(1)]))
        src = Dataset(np.array([[1.0]]), [0.0], [1.0], [[0.0]])
        with pytest.warns(UserWarning, match="skipped"):
            d, skipped = distill_dataset(blowup, src, 2, np.random.default_rng(0))
        assert skipped == 2 and len(d) == 0


class TestTrain:
    def test_no_op(self):
        f = tanh_dynamics(0)
        mid = LearnedMidpoint.init(2, np.random.default_rng(1))
        cfg = TrainingConfig(N_train=1, N_theta=0, N_phi=0)
        res = train(cfg, exact_records(STIFF.A, 20, 0.01), f, mid)
        for a, b in zip(res.field.net.numpy_params(), f.net.numpy_params()):
            np.testing.assert_array_equal(a, b)
        for a, b in zip(res.midpoint.net.numpy_params(), mid.net.numpy_params()):
            np.testing.assert_array_equal(a, b)
        assert len(res.log) == 0

    def test_deterministic_log(self):
        data = exact_records(STIFF.A, 40, 0.01)
        cfg = TrainingConfig(N_train=2, N_theta=3, N_phi=3, N_distill=16, batch_size=8,
                             p=2, lam=1.0, eval_every=2, seed=11)

        def run():
            return train(cfg, data, tanh_dynamics(3), LearnedMidpoint.init(2, np.random.default_rng(4)))

        a, b = run(), run()
        assert a.log == b.log
        assert a.log.step == list(range(12))
        assert a.log.phase[:3] == ["theta"] * 3 and a.log.phase[3:6] == ["phi"] * 3
        for p, q in zip(a.field.net.numpy_params(), b.field.net.numpy_params()):
            np.testing.assert_array_equal(p, q)

    def test_log_rows_match_columns(self):
        data = exact_records(STIFF.A, 20, 0.01)
        cfg = TrainingConfig(N_theta=2, N_phi=0, batch_size=8)
        res = train(cfg, data, tanh_dynamics(0), DegenerateMidpoint())
        rows = list(res.log.rows())
        assert len(rows) == 2 and all(len(r) == len(LOG_COLUMNS) for r in rows)
        assert math.isnan(rows[0][3]) and math.isfinite(rows[1][3])

    def test_known_field_is_never_updated(self):
        data = exact_records(STIFF.A, 20, 0.01)
        cfg = TrainingConfig(N_theta=5, N_phi=2, distill=False, batch_size=8)
        known = STIFF.field
        res = train(cfg, data, known, LearnedMidpoint.init(2, np.random.default_rng(0)))
        assert res.field is known
        assert res.log.phase == ["phi", "phi"]

    def test_divergence_aborts_with_checkpoint(self):
        x0 = np.array([[1.0, 1.0]])
        data = Dataset(np.repeat(x0, 4, 0), np.zeros(4), np.full(4, 1.0), np.repeat(x0, 4, 0) * 1e300)
        cfg = TrainingConfig(N_theta=3, N_phi=0, p=1, heldout=0.0, lr_theta=1e3)
        f = tanh_dynamics(0)
        with pytest.raises(TrainingAborted) as exc:
            train(cfg, data, f, DegenerateMidpoint())
        assert exc.value.result.field is not None
        for p in exc.value.result.field.net.numpy_params():
            assert np.all(np.isfinite(p))


def test_polish_recovers_constant_gammabar():
    dt = 0.05
    data = exact_records(STIFF.A, 128, dt, seed=3)
    mid = LearnedMidpoint.init(2, np.random.default_rng(0))
    out = polish_output_layer(STIFF.field, mid, data, p=2)
    test = exact_records(STIFF.A, 32, dt, seed=4)
    cfg = TrainingConfig(p=2)
    assert midpoint_loss(STIFF.field, out, test, cfg).value < 1e-18


@given(seed=st.integers(0, 200))
def test_isolation_property(seed):
    data = exact_records(STIFF.A, 4, 1e-3, seed=seed)
    f = tanh_dynamics(seed, hidden=3)
    mid = LearnedMidpoint.init(2, np.random.default_rng(seed + 1), hidden=(3,), activation="tanh")
    cfg = TrainingConfig(p=1 + seed % 3, lam=2.0)
    assert all(not np.any(g) for g in dynamics_loss(f, mid, data, cfg).grad_phi)
    assert all(not np.any(g) for g in midpoint_loss(f, mid, data, cfg).grad_theta)
