"""Discrete-time control laws run once per controller sample.

Every controller sees only its own DGU: the inductor current and PCC
voltage it measures, plus its stored operating point.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.signal import bilinear, ss2tf

from .model import build_decoupled_nominal
from .synthesis import GainVector, PredictorDesign


# --- baseline state feedback --------------------------------------------------

@dataclass
class BaselineState:
    xi: float = 0.0
    last_error: float = 0.0
    frozen: bool = False   # set when the previous duty command saturated


def baseline_step(s: BaselineState, meas, v_ref_dev: float, dt: float, K: GainVector) -> tuple[float, BaselineState]:
    """Advance the tracking-error integral and return the baseline duty deviation.

    ``meas = (i_dev, v_dev)`` are deviations from the stored operating point
    and ``v_ref_dev`` is the current reference minus the stored one.
    """
    if not dt > 0:
        raise ValueError("dt must be > 0")
    i_dev, v_dev = meas
    err = v_ref_dev - v_dev
    xi = s.xi if s.frozen else s.xi + 0.5 * dt * (err + s.last_error)
    u = -(K.K_i * i_dev + K.K_v * v_dev + K.K_xi * xi)
    return u, BaselineState(xi=xi, last_error=err, frozen=s.frozen)


# --- Type III compensator -----------------------------------------------------

@dataclass(frozen=True)
class TypeIIIDesign:
    k_c: float
    omega_z: float
    omega_p: float
    dt: float
    num: np.ndarray = field(repr=False, default=None)
    den: np.ndarray = field(repr=False, default=None)

    def response(self, omega: float) -> complex:
        s = 1j * omega
        return self.k_c / s * (s + self.omega_z) ** 2 / (s + self.omega_p) ** 2


def type3_design(k_c: float, omega_z: float, omega_p: float, dt: float) -> TypeIIIDesign:
    """Bilinear discretisation of ``k_c/s * (s+wz)^2/(s+wp)^2``."""
    num = k_c * np.polymul([1.0, omega_z], [1.0, omega_z])
    den = np.polymul([1.0, 0.0], np.polymul([1.0, omega_p], [1.0, omega_p]))
    b, a = bilinear(num, den, fs=1.0 / dt)
    return TypeIIIDesign(k_c, omega_z, omega_p, dt, b / a[0], a / a[0])


def duty_to_voltage(p, op) -> tuple[np.ndarray, np.ndarray]:
    """Numerator and denominator of the decoupled duty-to-PCC-voltage transfer function."""
    m = build_decoupled_nominal(p, op)
    num, den = ss2tf(m.A_ii, m.B, m.C, np.zeros((1, 1)))
    return num[0], den


def type3_tuning(p, op, dt: float, phase_margin_deg: float = 60.0) -> TypeIIIDesign:
    """Zeros at the LC resonance, poles a decade above, gain for the phase margin.

    The crossover is the lowest frequency at which the unity-gain loop has the
    requested phase margin; ``k_c`` then makes the loop gain one there.
    """
    num, den = duty_to_voltage(p, op)
    w0 = (1 - op.D) / math.sqrt(p.L_t * p.C_t)
    wz, wp = w0, 10.0 * w0
    w = np.logspace(math.log10(w0) - 3, math.log10(w0) + 2, 4000)
    s = 1j * w
    loop = np.polyval(num, s) / np.polyval(den, s) * (s + wz) ** 2 / (s * (s + wp) ** 2)
    margin = 180.0 + np.degrees(np.unwrap(np.angle(loop)))
    hit = np.nonzero(margin <= phase_margin_deg)[0]
    k = int(hit[0]) if hit.size else int(np.argmin(np.abs(margin - phase_margin_deg)))
    return type3_design(1.0 / abs(loop[k]), wz, wp, dt)


@dataclass
class TypeIIIState:
    x: np.ndarray = field(default_factory=lambda: np.zeros(3))


def type3_step(s: TypeIIIState, error: float, d: TypeIIIDesign) -> tuple[float, TypeIIIState]:
    """Transposed direct-form II update; three states for the third-order filter."""
    b, a = d.num, d.den
    x = s.x
    y = b[0] * error + x[0]
    nx = np.empty(3)
    nx[0] = b[1] * error - a[1] * y + x[1]
    nx[1] = b[2] * error - a[2] * y + x[2]
    nx[2] = b[3] * error - a[3] * y
    return float(y), TypeIIIState(nx)


# --- L1 adaptive augmentation ------------------------------------------------------

@dataclass
class L1Config:
    predictor: PredictorDesign
    P: np.ndarray
    Gamma: float
    omega_c: float            # rad/s
    theta_max: float
    dt: float                 # controller sample period, s
    rate_limit: float = 1e6   # max |d theta/dt| per component, 1/s
    eps_proj: float = 0.1
    rk4_substeps: int = 0     # 0 picks enough substeps for an accurate propagator

    def __post_init__(self):
        if not self.Gamma > 0:
            raise ValueError("adaptive gain Gamma must be > 0")
        if not self.dt > 0:
            raise ValueError("sample period must be > 0")
        if self.theta_max < 0:
            raise ValueError("theta_max must be >= 0")
        self._build()

    def _build(self):
        pd = self.predictor
        h_total = self.dt * pd.time_scale
        A = pd.A_m_cc
        rho = float(np.abs(np.linalg.eigvals(A)).max())
        n = self.rk4_substeps or max(1, int(math.ceil(h_total * rho / 0.005)))
        h = h_total / n
        I = np.eye(3)
        hA = h * A
        M1 = I + hA + hA @ hA / 2 + hA @ hA @ hA / 6 + hA @ hA @ hA @ hA / 24
        N1 = h * (I + hA / 2 + hA @ hA / 6 + hA @ hA @ hA / 24)
        M, N = I.copy(), np.zeros((3, 3))
        for _ in range(n):
            M, N = M1 @ M, M1 @ N + N1
        self.substeps = n
        self.Phi = M
        self.Psi = (N @ pd.b_cc).ravel()
        self.Pb = (self.P @ pd.b_cc).ravel()
        self.filter_pole = math.exp(-self.omega_c * self.dt)
        self.rate_pu = self.rate_limit / pd.time_scale


@dataclass
class L1ControllerState:
    z_hat: np.ndarray
    theta_hat: np.ndarray = field(default_factory=lambda: np.zeros(3))
    u_filt: float = 0.0
    adaptation_enabled: bool = True
    z_err: np.ndarray = field(default_factory=lambda: np.zeros(3))


def canonical_state(pd: PredictorDesign, x_bar: np.ndarray) -> np.ndarray:
    return pd.T @ np.asarray(x_bar, dtype=float)


def predictor_step(s: L1ControllerState, z_meas: np.ndarray, u_l1: float, cfg: L1Config) -> L1ControllerState:
    """Advance the predictor one sample with inputs held (RK4 substeps)."""
    w = u_l1 + float(s.theta_hat @ z_meas)
    z_hat = cfg.Phi @ s.z_hat + cfg.Psi * w
    return replace(s, z_hat=z_hat)


def project_l1_ball(theta: np.ndarray, radius: float) -> np.ndarray:
    """Euclidean projection onto ``{||theta||_1 <= radius}``."""
    a = np.abs(theta)
    if a.sum() <= radius:
        return theta
    if radius <= 0:
        return np.zeros_like(theta)
    u = np.sort(a)[::-1]
    css = np.cumsum(u)
    active = np.nonzero(u * np.arange(1, len(u) + 1) > css - radius)[0]
    k = active[-1] if active.size else 0   # the largest entry is always active; rounding can hide it
    tau = (css[k] - radius) / (k + 1)
    return np.sign(theta) * np.maximum(a - tau, 0.0)


def smooth_projection(theta: np.ndarray, y: np.ndarray, theta_max: float, eps: float) -> np.ndarray:
    """Convex projection operator on the 1-norm ball with a boundary layer.

    Inside ``||theta||_1 <= theta_max/(1+eps)`` the update passes unchanged;
    across the layer its outward component is scaled down, reaching zero on
    ``||theta||_1 = theta_max``.
    """
    if theta_max <= 0:
        return np.zeros_like(y)
    f = ((1 + eps) * np.abs(theta).sum() - theta_max) / (eps * theta_max)
    grad = np.sign(theta)
    gy = float(grad @ y)
    gg = float(grad @ grad)
    if f > 0 and gy > 0 and gg > 0:
        return y - min(f, 1.0) * gy / gg * grad
    return y


def adaptive_step(s: L1ControllerState, z_meas: np.ndarray, cfg: L1Config) -> L1ControllerState:
    """Gradient update of the parameter estimate, projected and rate limited."""
    z_err = z_meas - s.z_hat
    if not s.adaptation_enabled:
        return replace(s, z_err=z_err)
    # gradient of the Lyapunov function in (z_hat - z); with z_err = z - z_hat the sign flips
    raw = float(z_err @ cfg.Pb) * z_meas
    rate = cfg.Gamma * smooth_projection(s.theta_hat, raw, cfg.theta_max, cfg.eps_proj)
    rate = np.clip(rate, -cfg.rate_pu, cfg.rate_pu)
    theta = s.theta_hat + cfg.dt * cfg.predictor.time_scale * rate
    theta = project_l1_ball(theta, cfg.theta_max)
    return replace(s, theta_hat=theta, z_err=z_err)


def l1_control(s: L1ControllerState, z_meas: np.ndarray, cfg: L1Config) -> tuple[float, L1ControllerState]:
    """Low-pass filtered cancellation ``-C(s)[theta^T z]``, exact for a held input."""
    w = -float(s.theta_hat @ z_meas)
    a = cfg.filter_pole
    u = a * s.u_filt + (1.0 - a) * w
    return u, replace(s, u_filt=u)


def composite_control(D_op: float, u_bl: float, u_l1: float, duty_max: float = 0.8,
                      duty_min: float = 0.0) -> tuple[float, bool]:
    d = D_op + u_bl + u_l1
    if d > duty_max:
        return duty_max, True
    if d < duty_min:
        return duty_min, True
    return d, False


@dataclass
class Telemetry:
    t: float
    z_err: np.ndarray
    theta_hat: np.ndarray
    u_bl: float
    u_l1: float
    duty: float
    saturated: bool


@dataclass
class DguController:
    """Complete per-DGU controller: baseline plus optional L1 augmentation.

    Inputs are the DGU's own measurements only.
    """
    dgu: int
    K: GainVector
    D_op: float
    V_op: float
    I_op: float
    dt: float
    l1: L1Config | None = None
    duty_max: float = 0.8
    duty_min: float = 0.0
    v_ref: float | None = None
    commission: bool = False
    type3: TypeIIIDesign | None = None   # replaces state feedback when set
    base: BaselineState = field(default_factory=BaselineState)
    l1_state: L1ControllerState | None = None
    last: Telemetry | None = None
    t3_state: TypeIIIState = field(default_factory=TypeIIIState)

    def __post_init__(self):
        if self.v_ref is None:
            self.v_ref = self.V_op
        if self.type3 is not None and self.l1 is not None:
            raise ValueError("the L1 augmentation needs the state-feedback baseline")

    def initialize(self, i_t: float, v_dc: float, duty: float) -> None:
        """Set the integral so the first command reproduces ``duty`` (bumpless start)."""
        if self.commission:
            # adopt the locally measured steady state as the operating point
            self.I_op, self.D_op = i_t, duty
        i_dev, v_dev = i_t - self.I_op, v_dc - self.V_op
        xi = 0.0
        if self.K.K_xi != 0:
            xi = (self.D_op - duty - self.K.K_i * i_dev - self.K.K_v * v_dev) / self.K.K_xi
        self.base = BaselineState(xi=xi, last_error=(self.v_ref - self.V_op) - v_dev)
        if self.l1 is not None:
            z = canonical_state(self.l1.predictor, [i_dev, v_dev, xi])
            self.l1_state = L1ControllerState(z_hat=z.copy())

    def set_adaptation(self, on: bool) -> None:
        """Engage or disengage the L1 loop; off leaves the baseline acting alone."""
        if self.l1_state is None:
            return
        s = replace(self.l1_state, adaptation_enabled=on)
        if not on:
            s = replace(s, theta_hat=np.zeros_like(s.theta_hat), u_filt=0.0)
        self.l1_state = s

    def step(self, t: float, i_t: float, v_dc: float) -> float:
        i_dev, v_dev = i_t - self.I_op, v_dc - self.V_op
        if self.type3 is not None:
            return self._step_type3(t, v_dc)
        u_bl, self.base = baseline_step(self.base, (i_dev, v_dev), self.v_ref - self.V_op, self.dt, self.K)
        u_l1 = 0.0
        s = self.l1_state
        if self.l1 is not None and not s.adaptation_enabled:
            # keep the predictor on the measurement so re-engaging starts without error
            z = canonical_state(self.l1.predictor, [i_dev, v_dev, self.base.xi])
            s = self.l1_state = replace(s, z_hat=z, z_err=np.zeros(3))
        elif self.l1 is not None:
            z = canonical_state(self.l1.predictor, [i_dev, v_dev, self.base.xi])
            s = adaptive_step(s, z, self.l1)
            u_l1, s = l1_control(s, z, self.l1)
            s = predictor_step(s, z, u_l1, self.l1)
            self.l1_state = s
        d, sat = composite_control(self.D_op, u_bl, u_l1, self.duty_max, self.duty_min)
        self.base.frozen = sat
        self.last = Telemetry(t, s.z_err if s is not None else np.zeros(3),
                              s.theta_hat if s is not None else np.zeros(3), u_bl, u_l1, d, sat)
        return d

    def _step_type3(self, t: float, v_dc: float) -> float:
        u, nxt = type3_step(self.t3_state, self.v_ref - v_dc, self.type3)
        d, sat = composite_control(self.D_op, u, 0.0, self.duty_max, self.duty_min)
        if not sat:
            self.t3_state = nxt   # hold the compensator while saturated
        self.last = Telemetry(t, np.zeros(3), np.zeros(3), u, 0.0, d, sat)
        return d
