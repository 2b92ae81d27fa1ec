import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from tlode.dynamics import LinearField, Mlp, exact_linear_solution, expm, stiff_system
from tlode.enclosure import apriori_enclosure, contains
from tlode.integrators import tl_step
from tlode.midpoint import (
    AnalyticLinearMidpoint,
    DegenerateMidpoint,
    LearnedMidpoint,
    SingularMatrixError,
    analytic_linear_gammabar,
    predict_midpoint,
    remainder_estimate,
)

STIFF = stiff_system()
DECAY = LinearField(np.array([[-1.0]]))


class TestAnalyticGammabar:
    def test_scalar_value(self):
        G, tail = analytic_linear_gammabar([[-1.0]], 0.1)
        assert G[0, 0] == pytest.approx(0.0483741803596, abs=1e-12)
        assert G[0, 0] == pytest.approx((math.exp(-0.1) - 0.9) / 0.1, rel=1e-12)
        assert tail == 0.0

    def test_zero_matrix_series(self):
        G, tail = analytic_linear_gammabar(np.zeros((2, 2)), 0.3, terms=5)
        np.testing.assert_allclose(G, 0.15 * np.eye(2), rtol=1e-15)
        assert tail == 0.0

    def test_closed_mode_rejects_singular(self):
        with pytest.raises(SingularMatrixError, match="terms=K"):
            analytic_linear_gammabar(np.zeros((2, 2)), 0.1)

    def test_stiff_diagonal_entries(self):
        dt = 1e-3
        G, _ = analytic_linear_gammabar(STIFF.A, dt)
        for k, lam in enumerate((-1.0, -1000.0)):
            want = (math.exp(lam * dt) - 1 - lam * dt) / (lam**2 * dt)
            assert G[k, k] == pytest.approx(want, rel=1e-10)
        assert G[0, 1] == 0.0 and G[1, 0] == 0.0

    @pytest.mark.parametrize("p", [1, 2, 3])
    def test_series_converges_to_closed_form(self, p):
        A = np.array([[-2.0, 0.5], [0.1, -1.0]])
        closed, _ = analytic_linear_gammabar(A, 0.2, order=p)
        series, tail = analytic_linear_gammabar(A, 0.2, terms=25, order=p)
        np.testing.assert_allclose(series, closed, rtol=1e-11, atol=1e-14)
        assert tail < 1e-20

    def test_series_tail_bounds_truncation(self):
        A = np.array([[-2.0, 0.5], [0.1, -1.0]])
        closed, _ = analytic_linear_gammabar(A, 0.2)
        series, tail = analytic_linear_gammabar(A, 0.2, terms=3)
        assert np.linalg.norm(series - closed, 2) <= tail

    def test_bad_inputs(self):
        with pytest.raises(ValueError):
            analytic_linear_gammabar(STIFF.A, 0.0)
        with pytest.raises(ValueError):
            analytic_linear_gammabar(STIFF.A, 0.1, terms=0)


class TestPredict:
    def test_scalar_gamma(self):
        pred = predict_midpoint(AnalyticLinearMidpoint(DECAY.A), DECAY, np.array([1.0]), 0.1)
        assert pred.gamma[0] == pytest.approx(0.9516258196404, abs=1e-12)

    def test_degenerate(self):
        x = np.array([0.1, 0.2])
        assert predict_midpoint(DegenerateMidpoint(), STIFF.field, x, 0.1).gamma is x

    def test_zero_field_keeps_state(self):
        zero = LinearField(np.zeros((2, 2)))
        x = np.array([0.4, -0.1])
        for model in (LearnedMidpoint.init(2, np.random.default_rng(0)),
                      LearnedMidpoint.init(2, np.random.default_rng(0), output_shape="diag"),
                      AnalyticLinearMidpoint(np.zeros((2, 2)))):
            np.testing.assert_array_equal(predict_midpoint(model, zero, x, 0.1).gamma, x)

    def test_dt_must_be_positive(self):
        with pytest.raises(ValueError):
            predict_midpoint(DegenerateMidpoint(), DECAY, np.ones(1), 0.0)

    def test_learned_output_size_checked(self):
        net = Mlp.init((3, 4, 3), ("relu", "none"), np.random.default_rng(0))
        with pytest.raises(ValueError, match="needs 4"):
            LearnedMidpoint(net, 2, "full")

    def test_default_shape_by_dimension(self):
        rng = np.random.default_rng(0)
        assert LearnedMidpoint.init(8, rng).output_shape == "full"
        assert LearnedMidpoint.init(9, rng).output_shape == "diag"

    def test_full_diag_duality(self):
        rng = np.random.default_rng(2)
        n = 3
        diag = LearnedMidpoint.init(n, rng, hidden=(5,), output_shape="diag")
        W1, b1, W2, b2 = diag.net.numpy_params()
        # embed each diagonal output into column i*n+i of a full-output layer
        E = np.zeros((n, n * n))
        for i in range(n):
            E[i, i * n + i] = 1.0
        full = LearnedMidpoint(Mlp(diag.net.sizes[:-1] + (n * n,), diag.net.activations,
                                   [W1, b1, W2 @ E, b2 @ E]), n, "full")
        x = rng.uniform(-1, 1, (4, n))
        field = LinearField(rng.standard_normal((n, n)))
        np.testing.assert_array_equal(full.predict(field, x, 0.1).gamma, diag.predict(field, x, 0.1).gamma)

    def test_full_matches_explicit_matvec(self):
        rng = np.random.default_rng(9)
        m = LearnedMidpoint.init(2, rng, hidden=(4,))
        x = rng.uniform(-1, 1, (3, 2))
        fx = STIFF.field.eval(x)
        G = m.gammabar(x, 0.1).reshape(3, 2, 2)
        want = x + np.einsum("bij,bj->bi", G, fx)
        np.testing.assert_allclose(m.predict(STIFF.field, x, 0.1).gamma, want, rtol=1e-14)


class TestRemainder:
    def test_zero_field(self):
        zero = LinearField(np.zeros((2, 2)))
        r = remainder_estimate(zero, AnalyticLinearMidpoint(np.zeros((2, 2))), np.ones(2), 0.1, 2)
        assert np.array_equal(r, np.zeros(2))

    def test_degenerate_is_euler_increment(self):
        x = np.array([0.3, -0.2])
        r = remainder_estimate(STIFF.field, DegenerateMidpoint(), x, 1e-3, 1)
        np.testing.assert_allclose(r, 1e-3 * STIFF.A @ x, rtol=1e-15)

    def test_exact_midpoint_remainder(self):
        x = np.array([0.3, -0.2])
        dt = 1e-3
        r = remainder_estimate(STIFF.field, AnalyticLinearMidpoint(STIFF.A), x, dt, 1)
        want = expm(STIFF.A * dt) @ x - x
        np.testing.assert_allclose(r, want, atol=1e-12)


@given(dt=st.floats(1e-4, 0.3), a=st.floats(-1, 1), b=st.floats(-1, 1))
def test_order1_step_is_exact(dt, a, b):
    x = np.array([a, b])
    out = tl_step(STIFF.field, AnalyticLinearMidpoint(STIFF.A), x, dt, 1)
    np.testing.assert_allclose(out, exact_linear_solution(STIFF, x, dt), rtol=0, atol=1e-12)


@given(dt=st.floats(1e-4, 0.3), angle=st.floats(0, 1.5), a=st.floats(-1, 1), b=st.floats(-1, 1))
def test_order1_step_is_exact_rotated(dt, angle, a, b):
    # coupling mixes the slow and fast modes inside gammabar @ f, so round-off
    # of order eps * |lambda| * dt * |gammabar f| survives: allow one more decade
    sys_ = stiff_system(rotation=angle)
    x = np.array([a, b])
    out = tl_step(sys_.field, AnalyticLinearMidpoint(sys_.A), x, dt, 1)
    np.testing.assert_allclose(out, exact_linear_solution(sys_, x, dt), rtol=0, atol=1e-11)


@given(dt=st.floats(1e-5, 1e-3), a=st.floats(-1, 1), b=st.floats(-1, 1))
def test_analytic_gamma_is_between_state_and_next(dt, a, b):
    x = np.array([a, b])
    gamma = predict_midpoint(AnalyticLinearMidpoint(STIFF.A), STIFF.field, x, dt).gamma
    nxt = exact_linear_solution(STIFF, x, dt)
    lo, hi = np.minimum(x, nxt), np.maximum(x, nxt)
    assert np.all(gamma >= lo - 1e-15) and np.all(gamma <= hi + 1e-15)


@given(dt=st.floats(1e-6, 5e-4), a=st.floats(-1, 1), b=st.floats(-1, 1))
def test_analytic_gamma_inside_enclosure(dt, a, b):
    x = np.array([a, b])
    L = float(np.linalg.norm(np.linalg.norm(STIFF.A, axis=1)))
    gamma = predict_midpoint(AnalyticLinearMidpoint(STIFF.A), STIFF.field, x, dt).gamma
    assert contains(apriori_enclosure(STIFF.field, L, x, dt), gamma, slack=1e-15)
