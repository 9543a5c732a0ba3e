import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.linalg import expm
from scipy.signal import freqz, lfilter

from l1dcgrid.controllers import (BaselineState, DguController, L1Config, L1ControllerState, adaptive_step,
                                  baseline_step, composite_control, l1_control, project_l1_ball,
                                  smooth_projection, TypeIIIState, type3_design, type3_step, type3_tuning,
                                  duty_to_voltage)
from l1dcgrid.model import compute_operating_point
from l1dcgrid.synthesis import GainVector

import properties as props

DT = 4e-5


def l1_cfg(r, dt=DT, **kw):
    return L1Config(r.predictor, r.P, kw.pop("Gamma", 1e4), r.omega_c, r.bound.theta_max, dt, **kw)


class TestPropagator:
    def test_matches_matrix_exponential(self, synth1):
        for r in synth1.values():
            cfg = l1_cfg(r)
            pd = r.predictor
            h = DT * pd.time_scale
            aug = np.zeros((4, 4))
            aug[:3, :3] = pd.A_m_cc
            aug[:3, 3] = pd.b_cc.ravel()
            E = expm(aug * h)
            np.testing.assert_allclose(cfg.Phi, E[:3, :3], atol=1e-10)
            np.testing.assert_allclose(cfg.Psi, E[:3, 3], atol=1e-10 * max(1.0, np.abs(E[:3, 3]).max()))

    def test_config_validation(self, synth1):
        r = synth1[1]
        with pytest.raises(ValueError, match="Gamma"):
            l1_cfg(r, Gamma=0.0)
        with pytest.raises(ValueError):
            l1_cfg(r, dt=0.0)


class TestProjection:
    @settings(max_examples=200, deadline=None)
    @given(theta=st.lists(st.floats(-50, 50), min_size=3, max_size=3), radius=st.floats(0.0, 20.0))
    def test_ball_projection_is_nearest_point(self, theta, radius):
        th = np.array(theta)
        p = project_l1_ball(th, radius)
        assert np.abs(p).sum() <= radius * (1 + 1e-12) + 1e-12
        if np.abs(th).sum() <= radius:
            np.testing.assert_array_equal(p, th)
        else:
            # optimality: no sampled feasible point is closer
            rng = np.random.default_rng(0)
            cand = rng.normal(size=(200, 3))
            cand *= radius / np.maximum(np.abs(cand).sum(axis=1, keepdims=True), 1e-300)
            assert np.linalg.norm(th - p) <= np.linalg.norm(th - cand, axis=1).min() + 1e-9

    def test_smooth_operator_inside_is_identity(self):
        y = np.array([1.0, -2.0, 3.0])
        np.testing.assert_array_equal(smooth_projection(np.array([0.1, 0.1, 0.1]), y, 5.0, 0.1), y)

    def test_smooth_operator_on_boundary_has_no_outward_component(self):
        th = np.array([2.0, -2.0, 1.0])   # ||.||_1 = 5 = theta_max
        out = smooth_projection(th, np.array([1.0, -1.0, 1.0]), 5.0, 0.1)
        assert float(np.sign(th) @ out) == pytest.approx(0.0, abs=1e-12)
        inward = np.array([-1.0, 1.0, -1.0])
        np.testing.assert_array_equal(smooth_projection(th, inward, 5.0, 0.1), inward)

    def test_random_updates_stay_bounded(self):
        for seed in range(3):
            assert props.projection_excursion(20_000, seed=seed, gain=1e-2) <= 1 + 1e-12


class TestAdaptation:
    def test_lyapunov_decrease_and_convergence(self, synth1):
        theta_true = np.array([0.3, -0.2, 0.1])
        err, V, theta = props.toy_adaptation(synth1[2], theta_true, 1e-6, 20_000)
        assert np.diff(V).max() <= 1e-9 * V[0]
        assert V[-1] < 1e-3 * V[0]
        np.testing.assert_allclose(theta, theta_true, atol=1e-3)

    def test_nominal_prediction_error_vanishes(self, synth1):
        assert props.prediction_error_ratio(synth1[1]) < 1e-6

    def test_estimate_respects_bound_and_rate(self, synth1):
        r = synth1[3]
        cfg = l1_cfg(r, rate_limit=10.0)
        s = L1ControllerState(z_hat=np.zeros(3))
        z = np.array([50.0, -20.0, 5.0])
        s2 = adaptive_step(s, z, cfg)
        step = np.abs(s2.theta_hat - s.theta_hat)
        assert step.max() <= 10.0 * DT * (1 + 1e-12)
        for _ in range(100_000 // 100):
            s = adaptive_step(s, z, cfg)
        assert np.abs(s.theta_hat).sum() <= cfg.theta_max * (1 + 1e-12)

    def test_disabled_adaptation_freezes_estimate(self, synth1):
        cfg = l1_cfg(synth1[1])
        th = np.array([0.1, 0.2, 0.3])
        s = L1ControllerState(z_hat=np.zeros(3), theta_hat=th, adaptation_enabled=False)
        out = adaptive_step(s, np.ones(3), cfg)
        np.testing.assert_array_equal(out.theta_hat, th)
        np.testing.assert_array_equal(out.z_err, np.ones(3))

    def test_filter_is_exact_for_held_input(self, synth1):
        cfg = l1_cfg(synth1[1])
        s = L1ControllerState(z_hat=np.zeros(3), theta_hat=np.array([1.0, 0.0, 0.0]))
        z = np.array([2.0, 0.0, 0.0])
        u = 0.0
        for k in range(1, 6):
            u, s = l1_control(s, z, cfg)
            assert u == pytest.approx(-2.0 * (1 - np.exp(-cfg.omega_c * DT * k)), rel=1e-12)


class TestTypeIII:
    def test_discrete_matches_continuous_below_nyquist(self):
        dt = 4e-5
        d = type3_design(50.0, 3000.0, 30000.0, dt)
        w = np.array([100.0, 1000.0, 3000.0, 8000.0])
        _, H = freqz(d.num, d.den, worN=w * dt)
        # bilinear warp: analog frequency 2/dt*tan(w dt/2)
        wa = 2 / dt * np.tan(w * dt / 2)
        ref = np.array([d.response(x) for x in wa])
        np.testing.assert_allclose(H, ref, rtol=1e-9)

    def test_step_matches_lfilter(self):
        d = type3_design(10.0, 500.0, 5000.0, 4e-5)
        e = np.sin(np.arange(300) * 0.05)
        ref = lfilter(d.num, d.den, e)
        s, out = TypeIIIState(), []
        for x in e:
            y, s = type3_step(s, x, d)
            out.append(y)
        np.testing.assert_allclose(out, ref, rtol=1e-10, atol=1e-12)

    def test_tuning_gives_stable_loop(self, table1):
        p = table1.dgu(4)
        op = compute_operating_point(p)
        d = type3_tuning(p, op, 4e-5)
        num, den = duty_to_voltage(p, op)
        # closed-loop characteristic polynomial: den*s(s+wp)^2 + kc*num*(s+wz)^2
        cnum = d.k_c * np.polymul(num, np.polymul([1, d.omega_z], [1, d.omega_z]))
        cden = np.polymul(den, np.polymul([1, 0], np.polymul([1, d.omega_p], [1, d.omega_p])))
        char = np.polyadd(cden, cnum)
        assert np.roots(char).real.max() < 0

    def test_rejects_l1_with_type3(self, synth1):
        r = synth1[1]
        with pytest.raises(ValueError, match="state-feedback"):
            DguController(1, r.K, 0.75, 381.0, 26.0, DT, l1=l1_cfg(r), type3=type3_design(1, 1, 10, DT))


class TestBaseline:
    def test_trapezoidal_integral(self):
        K = GainVector(0.0, 0.0, 1.0)
        s = BaselineState(last_error=1.0)
        u, s = baseline_step(s, (0.0, -1.0), 0.0, 0.1, K)
        assert s.xi == pytest.approx(0.1)
        assert u == pytest.approx(-0.1)

    def test_anti_windup_holds_integral(self):
        K = GainVector(0.0, 0.0, 1.0)
        s = BaselineState(xi=2.0, frozen=True)
        _, s2 = baseline_step(s, (0.0, -5.0), 0.0, 0.1, K)
        assert s2.xi == 2.0
        with pytest.raises(ValueError):
            baseline_step(s, (0, 0), 0, 0.0, K)

    def test_composite_saturation(self):
        assert composite_control(0.7, 0.05, 0.0) == (pytest.approx(0.75), False)
        assert composite_control(0.7, 0.2, 0.1) == (0.8, True)
        assert composite_control(0.1, -0.3, 0.0) == (0.0, True)


class TestDguController:
    def _ctrl(self, table1, synth1, i=2):
        r = synth1[i]
        p = table1.dgu(i)
        op = compute_operating_point(p)
        c = DguController(i, r.K, op.D, op.V_dc_bar, op.I_t_bar, DT, l1=l1_cfg(r), duty_max=0.85)
        return c, op

    def test_bumpless_start(self, table1, synth1):
        c, op = self._ctrl(table1, synth1)
        c.initialize(op.I_t_bar + 0.3, op.V_dc_bar - 0.2, op.D + 0.01)
        c.step(0.0, op.I_t_bar + 0.3, op.V_dc_bar - 0.2)
        # the integral is chosen so the baseline reproduces the running duty;
        # the only change is one trapezoidal step of the 0.2 V tracking error
        drift = -c.K.K_xi * 0.2 * DT
        assert c.last.u_bl == pytest.approx(0.01 + drift, abs=1e-12)

    def test_equilibrium_is_fixed_point(self, table1, synth1):
        c, op = self._ctrl(table1, synth1)
        c.initialize(op.I_t_bar, op.V_dc_bar, op.D)
        for k in range(50):
            d = c.step(k * DT, op.I_t_bar, op.V_dc_bar)
        assert d == pytest.approx(op.D, abs=1e-12)
        np.testing.assert_allclose(c.l1_state.theta_hat, 0.0, atol=1e-12)

    def test_adaptation_off_leaves_baseline_alone(self, table1, synth1):
        c, op = self._ctrl(table1, synth1)
        c.initialize(op.I_t_bar, op.V_dc_bar, op.D)
        for k in range(20):
            c.step(k * DT, op.I_t_bar + 2.0, op.V_dc_bar - 1.0)
        assert np.abs(c.l1_state.theta_hat).sum() > 0
        c.set_adaptation(False)
        np.testing.assert_array_equal(c.l1_state.theta_hat, np.zeros(3))
        for k in range(20, 30):
            c.step(k * DT, op.I_t_bar + 2.0, op.V_dc_bar - 1.0)
            assert c.last.u_l1 == 0.0
            np.testing.assert_array_equal(c.last.z_err, np.zeros(3))
        c.set_adaptation(True)
        c.step(30 * DT, op.I_t_bar + 2.0, op.V_dc_bar - 1.0)
        assert c.l1_state.adaptation_enabled

    def test_commissioning_adopts_measured_point(self, table1, synth1):
        c, op = self._ctrl(table1, synth1)
        c.commission = True
        c.initialize(op.I_t_bar + 1.0, op.V_dc_bar, op.D + 0.005)
        assert c.I_op == op.I_t_bar + 1.0 and c.D_op == op.D + 0.005
        assert c.base.xi == 0.0
