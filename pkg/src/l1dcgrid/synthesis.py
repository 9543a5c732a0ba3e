"""Offline synthesis: baseline gains, Lyapunov solves, canonical predictor
design, the matched-uncertainty bound and the L1-norm filter condition."""
from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
import scipy.linalg as sla
from scipy.integrate import solve_ivp
from scipy.optimize import brentq
from scipy.signal import place_poles
from scipy.stats import qmc

from .model import (AugmentedModel, DguParams, OperatingPoint, build_augmented,
                    build_decoupled_nominal, build_small_signal)

log = logging.getLogger(__name__)


class SynthesisError(RuntimeError):
    """A design step could not produce a valid result."""


def _require_hurwitz(A: np.ndarray, what: str) -> np.ndarray:
    ev = np.linalg.eigvals(A)
    worst = ev[np.argmax(ev.real)]
    if not worst.real < 0:
        raise SynthesisError(f"{what} is not Hurwitz: eigenvalue {worst:.6g} has Re >= 0")
    return ev


# --- gains ------------------------------------------------------------------

@dataclass(frozen=True)
class GainVector:
    """State-feedback gains for ``u = -(K_i*i + K_v*v + K_xi*xi)``."""
    K_i: float
    K_v: float
    K_xi: float

    @property
    def array(self) -> np.ndarray:
        return np.array([self.K_i, self.K_v, self.K_xi])

    @classmethod
    def from_array(cls, k) -> "GainVector":
        k = np.asarray(k, dtype=float).ravel()
        return cls(float(k[0]), float(k[1]), float(k[2]))


def closed_loop(m: AugmentedModel, K: GainVector) -> np.ndarray:
    return m.A_bar - m.B_bar @ K.array[None, :]


def controllability(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    n = A.shape[0]
    cols = [B]
    for _ in range(n - 1):
        cols.append(A @ cols[-1])
    return np.hstack(cols)


def _check_controllable(A, B, what):
    Cm = controllability(A, B)
    # column-normalise so the rank test is insensitive to SI magnitudes
    s = np.linalg.svd(Cm / np.linalg.norm(Cm, axis=0), compute_uv=False)
    rank = int(np.sum(s > s[0] * 1e-10))
    if rank < A.shape[0]:
        raise SynthesisError(f"{what}: controllability rank {rank} < {A.shape[0]} (singular values {s})")
    return rank


def energy_weights(L_t: float, C_t: float, I_t: float, V_dc: float, G: float = 1.0) -> np.ndarray:
    """LQI state weight built from the stored inductor/capacitor energies."""
    return np.diag([L_t * I_t ** 2, 1.0, C_t * G]) / (C_t * V_dc ** 2)


def lqi_gains(m: AugmentedModel, Q: np.ndarray, R: float = 1.0) -> GainVector:
    """Infinite-horizon LQ gains for the integrator-augmented model."""
    if not R > 0:
        raise SynthesisError("control weight R must be > 0")
    _check_controllable(m.A_bar, m.B_bar, f"DGU {m.dgu}")
    X = sla.solve_continuous_are(m.A_bar, m.B_bar, Q, np.array([[R]]))
    K = GainVector.from_array(m.B_bar.T @ X / R)
    res = m.A_bar.T @ X + X @ m.A_bar - X @ m.B_bar @ m.B_bar.T @ X / R + Q
    if np.linalg.norm(res) > 1e-8 * max(1.0, np.linalg.norm(Q), np.linalg.norm(X @ m.A_bar)):
        raise SynthesisError(f"DGU {m.dgu}: Riccati residual {np.linalg.norm(res):.3g} too large")
    _require_hurwitz(closed_loop(m, K), f"DGU {m.dgu} LQI closed loop")
    return K


def second_order_poles(omega_n: float, zeta: float, ratio: float = 1.0) -> list[complex]:
    """Dominant pair at (omega_n, zeta) plus a real pole at -ratio*omega_n."""
    if zeta < 1:
        wd = omega_n * np.sqrt(1 - zeta ** 2)
        pair = [complex(-zeta * omega_n, wd), complex(-zeta * omega_n, -wd)]
    else:
        r = omega_n * np.sqrt(zeta ** 2 - 1)
        pair = [-zeta * omega_n + r, -zeta * omega_n - r]
    return pair + [-ratio * omega_n]


def pole_placement_gains(m: AugmentedModel, poles: Sequence[complex]) -> GainVector:
    _check_controllable(m.A_bar, m.B_bar, f"DGU {m.dgu}")
    res = place_poles(m.A_bar, m.B_bar, np.asarray(poles))
    K = GainVector.from_array(res.gain_matrix)
    _require_hurwitz(closed_loop(m, K), f"DGU {m.dgu} pole-placement closed loop")
    return K


@dataclass(frozen=True)
class BaselineSpec:
    """How to tune one DGU's state-feedback baseline."""
    method: str = "lqi"            # "lqi" or "poles"
    G: float = 1.0                 # integral weight (LQI)
    R: float = 1.0                 # control weight (LQI)
    omega_n: float = 2000.0        # pole placement
    zeta: float = 0.7
    ratio: float = 1.0

    def __post_init__(self):
        if self.method not in ("lqi", "poles"):
            raise ValueError(f"unknown baseline method {self.method!r}")


def design_baseline(p: DguParams, op: OperatingPoint, spec: BaselineSpec) -> GainVector:
    """Gains for a standalone DGU feeding its load as a linear resistance."""
    m = build_augmented(build_decoupled_nominal(p, op))
    if spec.method == "lqi":
        return lqi_gains(m, energy_weights(p.L_t, p.C_t, op.I_t_bar, op.V_dc_bar, spec.G), spec.R)
    return pole_placement_gains(m, second_order_poles(spec.omega_n, spec.zeta, spec.ratio))


# --- Lyapunov -----------------------------------------------------------------

def solve_lyapunov(A: np.ndarray, Q: np.ndarray) -> np.ndarray:
    """Symmetric positive-definite ``P`` with ``A^T P + P A + Q = 0``."""
    A = np.asarray(A, dtype=float)
    Q = np.asarray(Q, dtype=float)
    if not np.allclose(Q, Q.T, rtol=0, atol=1e-12 * max(1.0, np.abs(Q).max())):
        raise SynthesisError("Q must be symmetric")
    if np.linalg.eigvalsh(Q).min() <= 0:
        raise SynthesisError("Q must be positive definite")
    _require_hurwitz(A, "Lyapunov matrix A")
    P = sla.solve_continuous_lyapunov(A.T, -Q)
    P = 0.5 * (P + P.T)
    res = np.linalg.norm(A.T @ P + P @ A + Q)
    if res > 1e-8 * np.linalg.norm(Q):
        # one step of iterative refinement usually recovers the lost digits
        dP = sla.solve_continuous_lyapunov(A.T, -(A.T @ P + P @ A + Q))
        P = 0.5 * (P + dP + (P + dP).T)
        res = np.linalg.norm(A.T @ P + P @ A + Q)
        if res > 1e-8 * np.linalg.norm(Q):
            raise SynthesisError(f"Lyapunov residual {res:.3g} exceeds tolerance")
    np.linalg.cholesky(P)
    return P


# --- canonical predictor --------------------------------------------------------

@dataclass(frozen=True)
class NominalDesign:
    """Nominal DGU used to shape the desired predictor dynamics."""
    D: float = 0.7368
    L_t: float = 2.794e-6
    C_t: float = 60.6e-6
    R_t: float = 0.1
    R_line: float = 1.0
    L_line: float = 10e-6
    V_dc: float = 380.0
    P_min: float = 800.0
    couplings: int = 5
    G: float = 1.0
    R: float = 1.0

    @property
    def I_t(self) -> float:
        """Inductor current for the smallest expected load (conservative choice)."""
        return self.P_min / (self.V_dc * (1.0 - self.D))

    def augmented(self, couplings: int | None = None) -> AugmentedModel:
        g = (self.couplings if couplings is None else couplings) / self.R_line
        A = np.array([[-self.R_t / self.L_t, -(1 - self.D) / self.L_t],
                      [(1 - self.D) / self.C_t, -g / self.C_t]])
        A_bar = np.zeros((3, 3))
        A_bar[:2, :2] = A
        A_bar[2, 1] = -1.0
        B_bar = np.array([[self.V_dc / self.L_t], [-self.I_t / self.C_t], [0.0]])
        E_bar = np.array([[0.0, 0.0], [-1.0 / self.C_t, 0.0], [0.0, 1.0]])
        return AugmentedModel(0, A_bar, B_bar, E_bar, {}, np.array([[0.0, 1.0, 0.0]]))

    def gains(self) -> GainVector:
        return lqi_gains(self.augmented(), energy_weights(self.L_t, self.C_t, self.I_t, self.V_dc, self.G), self.R)


@dataclass
class PredictorDesign:
    """Desired closed-loop dynamics and their control-canonical realisation.

    ``A_m_hat`` and ``B_bar`` are SI; every canonical quantity (``A_m_cc``,
    ``T``, ``e``, ``f``) lives in the scaled time ``tau = time_scale * t``.
    ``time_scale = 1`` gives the SI canonical form.
    """
    A_m_hat: np.ndarray
    B_bar: np.ndarray
    A_m_cc: np.ndarray
    b_cc: np.ndarray
    C_cc: np.ndarray
    T: np.ndarray
    e: np.ndarray
    f: np.ndarray
    K: GainVector
    time_scale: float = 1.0
    cond_controllability: float = 0.0

    @property
    def T_inv(self) -> np.ndarray:
        return np.linalg.inv(self.T)


def companion(e: Sequence[float]) -> np.ndarray:
    e0, e1, e2 = e
    return np.array([[0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [-e0, -e1, -e2]])


def canonical_transform(A_m: np.ndarray, B_bar: np.ndarray, K: GainVector | None = None,
                        time_scale: float | str = 1.0, C_bar: np.ndarray | None = None) -> PredictorDesign:
    """Control-canonical realisation of ``(A_m, B_bar)`` with ``T = C_z C_x^-1``.

    ``time_scale="auto"`` picks ``|det A_m|^(1/3)`` so the scaled constant
    coefficient is one, which keeps the canonical coordinates well conditioned.
    """
    A_m = np.asarray(A_m, dtype=float)
    B_bar = np.asarray(B_bar, dtype=float).reshape(3, 1)
    _require_hurwitz(A_m, "desired dynamics A_m")
    if time_scale == "auto":
        time_scale = float(abs(np.linalg.det(A_m)) ** (1.0 / 3.0))
    w = float(time_scale)
    if not w > 0:
        raise SynthesisError("time_scale must be > 0")
    A = A_m / w
    B = B_bar / w
    Cx = controllability(A, B)
    cond = np.linalg.cond(Cx)
    if not cond < 1e12:
        raise SynthesisError(f"plant controllability matrix ill-conditioned (cond={cond:.3g})")
    coeffs = np.poly(A)  # [1, e2, e1, e0]
    e = np.array([coeffs[3], coeffs[2], coeffs[1]]).real
    Acc = companion(e)
    b = np.array([[0.0], [0.0], [1.0]])
    Cz = controllability(Acc, b)
    T = Cz @ np.linalg.inv(Cx)
    C_bar = np.array([[0.0, 1.0, 0.0]]) if C_bar is None else C_bar
    f = (C_bar @ np.linalg.inv(T)).ravel()
    if K is None:
        K = GainVector(0.0, 0.0, 0.0)
    return PredictorDesign(A_m, B_bar, Acc, b, f[None, :], T, e, f, K, w, float(cond))


def design_predictor(nominal: NominalDesign = NominalDesign(), time_scale: float | str = "auto") -> PredictorDesign:
    """Nominal coupled closed loop ``A_m = A - B K`` in canonical form."""
    m = nominal.augmented()
    K = nominal.gains()
    return canonical_transform(closed_loop(m, K), m.B_bar, K, time_scale)


def closed_form_coefficients(nominal: NominalDesign, K: GainVector) -> np.ndarray:
    """SI characteristic-polynomial coefficients ``(e0, e1, e2)`` of the nominal loop,
    written out term by term for cross-checking the numeric transform."""
    L, C, R, D = nominal.L_t, nominal.C_t, nominal.R_t, nominal.D
    V, I = nominal.V_dc, nominal.I_t
    g = nominal.couplings / nominal.R_line
    Ki, Kv, Kx = K.K_i, K.K_v, K.K_xi
    e2 = (g - I * Kv) / C + (R + V * Ki) / L
    e1 = ((R + V * Ki) * (g - I * Kv) + ((1 - D) + V * Kv) * ((1 - D) + I * Ki)) / (L * C) + I * Kx / C
    e0 = (I * Kx * (R + V * Ki) - V * Kx * ((1 - D) + I * Ki)) / (L * C)
    return np.array([e0, e1, e2])


# --- uncertainty bound ------------------------------------------------------------

@dataclass(frozen=True)
class Polytope:
    """Ranges of the uncertain DGU parameters (SI)."""
    L_t: tuple[float, float] = (28e-6, 193e-6)
    C_t: tuple[float, float] = (24e-6, 52e-6)
    R_t: tuple[float, float] = (0.02, 0.5)
    D: tuple[float, float] = (0.72, 0.77)
    g_line: tuple[float, float] = (0.0, 2.6)
    P_load: tuple[float, float] = (800.0, 3000.0)
    V_dc: float = 380.0

    names = ("L_t", "C_t", "R_t", "D", "g_line", "P_load")

    @classmethod
    def around(cls, p: DguParams, op: OperatingPoint, rel: float, g_max: float,
               P_load: tuple[float, float] = (800.0, 3000.0), dD: float = 0.01) -> "Polytope":
        """Local polytope: component tolerances ``rel`` around one DGU, any
        coupling up to ``g_max`` and the given load range."""
        if not 0 <= rel < 1:
            raise ValueError("relative tolerance must lie in [0, 1)")

        def tol(x):
            return (x * (1 - rel), x * (1 + rel))
        return cls(L_t=tol(p.L_t), C_t=tol(p.C_t), R_t=tol(p.R_t), D=(op.D - dD, op.D + dD),
                   g_line=(0.0, g_max), P_load=tuple(P_load), V_dc=op.V_dc_bar)

    def bounds(self) -> np.ndarray:
        b = np.array([getattr(self, n) for n in self.names], dtype=float)
        if np.any(b[:, 1] < b[:, 0]):
            raise ValueError("polytope range with upper < lower")
        return b


@dataclass
class UncertaintyBound:
    theta_max: float
    Theta_set: Polytope
    samples: int
    worst: dict = field(default_factory=dict)
    norms: np.ndarray | None = None


def sample_polytope(poly: Polytope, samples: int, seed: int = 0) -> np.ndarray:
    """Latin-hypercube interior samples followed by every vertex."""
    b = poly.bounds()
    free = b[:, 1] > b[:, 0]
    pts = []
    if samples > 0:
        u = qmc.LatinHypercube(d=len(b), seed=seed).random(samples)
        pts.append(b[:, 0] + u * (b[:, 1] - b[:, 0]))
    corners = [list(r) if f else [r[0]] for r, f in zip(b, free)]
    pts.append(np.array(list(itertools.product(*corners)), dtype=float))
    return np.unique(np.vstack(pts), axis=0) if not free.any() else np.vstack(pts)


def sample_closed_loop(x: np.ndarray, V_dc: float, baseline: Callable[[AugmentedModel, dict], GainVector]) -> np.ndarray:
    """Coupled closed loop of one sampled DGU with gains tuned on its decoupled model."""
    L, C, R, D, g, P = x
    RL = V_dc ** 2 / P
    I = P / (V_dc * (1 - D))
    B = np.array([[V_dc / L], [-I / C], [0.0]])
    A_dec = np.array([[-R / L, -(1 - D) / L, 0.0], [(1 - D) / C, -1 / (RL * C), 0.0], [0.0, -1.0, 0.0]])
    m = AugmentedModel(0, A_dec, B, np.zeros((3, 2)), {}, np.array([[0.0, 1.0, 0.0]]))
    K = baseline(m, dict(L_t=L, C_t=C, R_t=R, D=D, I_t=I, V_dc=V_dc))
    A_cpl = A_dec.copy()
    A_cpl[1, 1] = -g / C
    return A_cpl - B @ K.array[None, :]


def default_sample_baseline(m: AugmentedModel, s: dict) -> GainVector:
    return lqi_gains(m, energy_weights(s["L_t"], s["C_t"], s["I_t"], s["V_dc"]))


def fixed_gains(K: GainVector) -> Callable[[AugmentedModel, dict], GainVector]:
    """Sample baseline that keeps the gains the DGU actually runs with."""
    return lambda m, s: K


def spec_baseline(spec: "BaselineSpec") -> Callable[[AugmentedModel, dict], GainVector]:
    """Sample baseline that re-tunes every sampled DGU with ``spec``."""
    def tune(m: AugmentedModel, s: dict) -> GainVector:
        if spec.method == "lqi":
            return lqi_gains(m, energy_weights(s["L_t"], s["C_t"], s["I_t"], s["V_dc"], spec.G), spec.R)
        return pole_placement_gains(m, second_order_poles(spec.omega_n, spec.zeta, spec.ratio))
    return tune


def theta_max_bound(pd: PredictorDesign, poly: Polytope, samples: int = 256, seed: int = 0,
                    baseline: Callable[[AugmentedModel, dict], GainVector] = default_sample_baseline) -> UncertaintyBound:
    """``4 * max ||theta||_1`` over the sampled polytope.

    For each sample, ``theta`` is the least-squares solution of
    ``b theta^T = T A_s T^-1 - A_m_cc`` in the scaled canonical coordinates;
    since ``b`` is the last unit vector this is the third row.
    """
    pts = sample_polytope(poly, samples, seed)
    Tinv = pd.T_inv
    norms = np.empty(len(pts))
    best = (-1.0, None)
    for k, x in enumerate(pts):
        try:
            A_s = sample_closed_loop(x, poly.V_dc, baseline)
        except SynthesisError as exc:
            log.debug("skipping polytope sample %s: %s", x, exc)
            norms[k] = np.nan
            continue
        delta = pd.T @ (A_s / pd.time_scale) @ Tinv - pd.A_m_cc
        theta = np.linalg.lstsq(pd.b_cc, delta, rcond=None)[0].ravel()
        norms[k] = np.abs(theta).sum()
        if norms[k] > best[0]:
            best = (norms[k], x)
    finite = norms[np.isfinite(norms)]
    tmax = 4.0 * float(finite.max()) if finite.size else 0.0
    worst = dict(zip(Polytope.names, map(float, best[1]))) if best[1] is not None else {}
    return UncertaintyBound(tmax, poly, len(pts), worst, norms)


# --- L1 norm and filter condition ---------------------------------------------------

def l1_norm(A: np.ndarray, B: np.ndarray, C: np.ndarray, rel_tol: float = 1e-6) -> np.ndarray:
    """Row-wise L1 norm ``int_0^inf |C e^{At} B| dt`` of a single-input system.

    Uses the modal expansion ``g(t) = sum_k r_k exp(lambda_k t)``: sign changes
    of each output are bracketed on a grid resolving every mode and refined,
    then ``|g|`` is integrated exactly lobe by lobe.  Falls back to adaptive
    quadrature of the impulse response when the eigenvector basis is
    ill-conditioned (nearly defective ``A``).
    """
    A = np.asarray(A, float)
    B = np.asarray(B, float).reshape(-1)
    C = np.atleast_2d(np.asarray(C, float))
    ev, V = np.linalg.eig(A)
    if not ev.real.max() < 0:
        raise SynthesisError("L1 norm requires a Hurwitz system")
    if np.linalg.cond(V) > 1e8:
        return _l1_norm_ode(A, B, C, rel_tol)
    w = np.linalg.solve(V, B.astype(complex))
    R = (C @ V) * w[None, :]          # residues, one row per output
    return np.array([_modal_abs_integral(ev, r) for r in R])


def _modal_abs_integral(lam: np.ndarray, r: np.ndarray) -> float:
    keep = np.abs(r) > 1e-300
    lam, r = lam[keep], r[keep]
    if lam.size == 0:
        return 0.0
    alpha = -lam.real
    t_end = 60.0 / alpha.min()
    # grid resolving every decay rate and oscillation period
    pieces = [np.geomspace(1e-3 / np.abs(lam).max(), t_end, 4000)]
    for lk in lam:
        span = min(60.0 / -lk.real, t_end)
        step = min(0.25 / -lk.real, np.pi / (8.0 * abs(lk.imag)) if lk.imag else np.inf)
        pieces.append(np.linspace(0.0, span, int(min(span / step, 2e5)) + 2))
    t = np.unique(np.concatenate([[0.0], *pieces]))

    def g(x):
        return float(np.real(np.sum(r * np.exp(lam * x))))

    def prim(x):
        return float(np.real(np.sum(r / lam * np.exp(lam * x))))

    gv = np.real(np.exp(np.outer(t, lam)) @ r)
    roots = []
    for k in np.nonzero(np.sign(gv[:-1]) * np.sign(gv[1:]) < 0)[0]:
        roots.append(brentq(g, t[k], t[k + 1], xtol=1e-300, rtol=1e-14))
    edges = [0.0, *roots]
    total = sum(abs(prim(b) - prim(a)) for a, b in zip(edges[:-1], edges[1:]))
    return total + abs(-prim(edges[-1]))  # last lobe runs to infinity


def _l1_norm_ode(A, B, C, rel_tol):
    ev, V = np.linalg.eig(A)
    alpha = -ev.real.max()
    n, p = A.shape[0], C.shape[0]

    def rhs(t, y):
        return np.concatenate([A @ y[:n], np.abs(C @ y[:n])])

    y = np.concatenate([B, np.zeros(p)])
    t0, window = 0.0, 5.0 / alpha
    while True:
        sol = solve_ivp(rhs, (t0, t0 + window), y, method="LSODA", rtol=1e-10, atol=1e-14)
        if not sol.success:
            raise SynthesisError(f"L1 norm integration failed: {sol.message}")
        y, t0 = sol.y[:, -1], t0 + window
        acc = y[n:]
        if np.linalg.norm(y[:n]) * np.abs(C).sum(axis=1).max() / alpha <= rel_tol * acc.max() or t0 > 1e3 / alpha:
            return acc


def filtered_error_system(A_m_cc: np.ndarray, omega_c: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """State-space of ``(sI - A)^-1 b (1 - C(s))`` with a first-order ``C(s)``."""
    A = np.zeros((4, 4))
    A[:3, :3] = A_m_cc
    A[:3, 3] = -np.array([0.0, 0.0, 1.0])
    A[3, 3] = -omega_c
    B = np.array([0.0, 0.0, 1.0, omega_c])
    C = np.hstack([np.eye(3), np.zeros((3, 1))])
    return A, B, C


@dataclass(frozen=True)
class FilterDesign:
    omega_c: float      # rad/s, SI
    lambda_: float
    g_norm: float

    @property
    def feasible(self) -> bool:
        return self.lambda_ < 1.0


def l1_norm_condition(pd: PredictorDesign, ub: UncertaintyBound, omega_grid: Sequence[float]) -> list[FilterDesign]:
    """``lambda = ||G||_L1 * theta_max`` across a grid of SI bandwidths."""
    out = []
    for wc in omega_grid:
        if not wc > 0:
            raise SynthesisError("filter bandwidth must be > 0")
        A, B, C = filtered_error_system(pd.A_m_cc, wc / pd.time_scale)
        g = float(l1_norm(A, B, C).max())
        out.append(FilterDesign(float(wc), g * ub.theta_max, g))
    return out


def select_bandwidth(pd: PredictorDesign, ub: UncertaintyBound, table: Sequence[FilterDesign],
                     safety: float = 2.0) -> FilterDesign:
    """Smallest feasible grid bandwidth times ``safety``, with its own ``lambda``."""
    feasible = [fd for fd in table if fd.feasible]
    if not feasible:
        best = min(table, key=lambda fd: fd.lambda_)
        raise SynthesisError(
            f"no bandwidth satisfies lambda < 1 (best lambda={best.lambda_:.3g} at "
            f"omega_c={best.omega_c:.3g} rad/s); extend the bandwidth grid or tighten the polytope")
    first = min(feasible, key=lambda fd: fd.omega_c)
    return l1_norm_condition(pd, ub, [first.omega_c * safety])[0]


def default_omega_grid(pd: PredictorDesign, points: int = 31, decades: float = 6.0) -> np.ndarray:
    lo = pd.time_scale * 0.1
    return np.logspace(np.log10(lo), np.log10(lo) + decades, points)


def plant_bandwidth(pd: PredictorDesign) -> float:
    return float(np.abs(np.linalg.eigvals(pd.A_m_hat)).max())


# --- per-DGU synthesis bundle ----------------------------------------------------

@dataclass(frozen=True)
class PredictorSpec:
    """How the desired dynamics ``A_m`` of one DGU are obtained.

    ``mode="shared"`` uses the fleet-wide nominal row for every DGU.
    ``mode="local"`` closes the DGU's own decoupled model with the nominal
    gains given by ``method`` (``"poles"`` or ``"lqi"``).
    """
    mode: str = "local"
    method: str = "poles"
    omega_n: float = 2000.0
    zeta: float = 0.7
    G: float = 1e9
    R: float = 1.0

    def __post_init__(self):
        if self.mode not in ("local", "shared"):
            raise ValueError(f"unknown predictor mode {self.mode!r}")
        if self.method not in ("poles", "lqi"):
            raise ValueError(f"unknown predictor method {self.method!r}")


def local_predictor(p: DguParams, op: OperatingPoint, spec: PredictorSpec) -> PredictorDesign:
    m = build_augmented(build_decoupled_nominal(p, op))
    if spec.method == "lqi":
        K = lqi_gains(m, energy_weights(p.L_t, p.C_t, op.I_t_bar, op.V_dc_bar, spec.G), spec.R)
    else:
        K = pole_placement_gains(m, second_order_poles(spec.omega_n, spec.zeta))
    return canonical_transform(closed_loop(m, K), m.B_bar, K, "auto")


@dataclass
class DguSynthesis:
    dgu: int
    K: GainVector
    predictor: PredictorDesign
    P: np.ndarray
    bound: UncertaintyBound
    table: list[FilterDesign]
    selected: FilterDesign

    @property
    def omega_c(self) -> float:
        return self.selected.omega_c

    @property
    def theta_max(self) -> float:
        return self.bound.theta_max


def synthesize_dgu(p: DguParams, op: OperatingPoint, baseline: "BaselineSpec", predictor: PredictorSpec,
                   polytope: Polytope, nominal: NominalDesign | None = None,
                   omega_grid: Sequence[float] | None = None, samples: int = 64, seed: int = 0,
                   safety: float = 2.0) -> DguSynthesis:
    """Baseline gains, predictor, Lyapunov matrix, ``theta_max`` and filter bandwidth of one DGU.

    Local predictors are bounded against the DGU's own polytope with its
    fixed baseline gains; a shared predictor is bounded against ``polytope``
    with every sample re-tuned by ``baseline``.
    """
    K = design_baseline(p, op, baseline)
    if predictor.mode == "local":
        pd = local_predictor(p, op, predictor)
        sampler = fixed_gains(K)
    else:
        nominal = nominal or NominalDesign(G=predictor.G, R=predictor.R)
        pd = design_predictor(nominal)
        sampler = spec_baseline(baseline)
    P = solve_lyapunov(pd.A_m_cc, np.eye(3))
    ub = theta_max_bound(pd, polytope, samples, seed, baseline=sampler)
    grid = default_omega_grid(pd) if omega_grid is None else omega_grid
    table = l1_norm_condition(pd, ub, grid)
    return DguSynthesis(p.id, K, pd, P, ub, table, select_bandwidth(pd, ub, table, safety))
