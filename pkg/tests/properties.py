"""Measurable properties shared by the unit tests and the acceptance suite.

Each function returns the measured quantity; callers compare it with the
threshold they care about.
"""
from __future__ import annotations

import numpy as np

from l1dcgrid import project
from l1dcgrid.controllers import (L1Config, L1ControllerState, adaptive_step, l1_control, predictor_step,
                                  project_l1_ball, smooth_projection)
from l1dcgrid.model import (DguParams, LineParams, NetworkArrays, Topology, assemble_global,
                            build_augmented, build_esr_small_signal, build_small_signal,
                            compute_operating_point, nonlinear_derivative)
from l1dcgrid.simulator import GridSimulation, SimConfig
from l1dcgrid.synthesis import closed_loop, design_baseline, BaselineSpec, solve_lyapunov


def lyapunov_residual(A: np.ndarray, Q: np.ndarray | None = None) -> float:
    Q = np.eye(A.shape[0]) if Q is None else Q
    P = solve_lyapunov(A, Q)
    return float(np.linalg.norm(A.T @ P + P @ A + Q) / np.linalg.norm(Q))


def projection_excursion(steps: int, theta_max: float = 5.0, seed: int = 0, gain: float = 1e-3,
                         scale: float = 1e3) -> float:
    """Largest ``||theta||_1 / theta_max`` seen over random adaptive updates."""
    rng = np.random.default_rng(seed)
    Y = rng.normal(size=(steps, 3)) * scale
    th = np.zeros(3)
    worst = 0.0
    for y in Y:
        th = project_l1_ball(th + gain * smooth_projection(th, y, theta_max, 0.1), theta_max)
        worst = max(worst, float(np.abs(th).sum()))
    return worst / theta_max


def toy_adaptation(synth, theta_true, dt: float, steps: int, Gamma: float = 10.0,
                   excitation: float = 1.0, z0=(1.0, -0.5, 0.2), z_hat0=(0.0, 0.0, 0.0)):
    """Canonical-coordinate plant with a known matched parameter, driven by the
    controller's own adaptive law, filter and predictor.

    Returns prediction-error norms, the Lyapunov function
    ``z~' P z~ + theta~' theta~ / Gamma`` and the final estimate.
    """
    pd = synth.predictor
    cfg = L1Config(pd, synth.P, Gamma, synth.omega_c, 1e3, dt, rate_limit=1e12)
    theta_true = np.asarray(theta_true, float)
    z = np.array(z0, float)
    s = L1ControllerState(z_hat=np.array(z_hat0, float))
    err, V = np.empty(steps), np.empty(steps)
    for k in range(steps):
        t = k * dt
        r = excitation * (np.sin(3000.0 * t) + np.sin(11000.0 * t))
        s = adaptive_step(s, z, cfg)
        u, s = l1_control(s, z, cfg)
        s = predictor_step(s, z, u + r, cfg)
        z = cfg.Phi @ z + cfg.Psi * (u + r + theta_true @ z)
        zt = s.z_hat - z
        tt = s.theta_hat - theta_true
        err[k] = np.linalg.norm(zt)
        V[k] = zt @ synth.P @ zt + tt @ tt / Gamma
    return err, V, s.theta_hat


def prediction_error_ratio(synth, steps: int = 250) -> float:
    """Nominal case (no mismatch): prediction-error norm after ``steps`` samples
    (10 ms by default) over its initial value."""
    z0 = np.array([1.0, -0.5, 0.2])
    e0 = float(np.linalg.norm(np.array([0.5, 0.5, -0.2])))
    err, _, _ = toy_adaptation(synth, np.zeros(3), 4e-5, steps, excitation=0.0,
                               z0=z0, z_hat0=z0 + np.array([0.5, 0.5, -0.2]))
    return float(err[-1] / e0)


def _fd(f, x, h):
    J = np.empty((len(f(x)), len(x)))
    for k in range(len(x)):
        dx = np.zeros_like(x)
        dx[k] = h[k]
        J[:, k] = (f(x + dx) - f(x - dx)) / (2 * h[k])
    return J


def jacobian_mismatch(dgus, lines, esr: bool = False) -> float:
    """Relative difference between central-difference Jacobians of the averaged
    model (loads held as fixed currents) and the assembled small-signal matrices."""
    top = Topology(dgus, lines)
    net = NetworkArrays(top)
    n = net.n
    ops = {p.id: compute_operating_point(p) for p in dgus}
    V = np.array([ops[i].V_dc_bar for i in net.ids])
    I = np.array([ops[i].I_t_bar for i in net.ids])
    D = np.array([ops[i].D for i in net.ids])
    I_load = np.array([top.dgus[i].P_load / ops[i].V_dc_bar for i in net.ids])
    x0 = np.concatenate([I, V])
    f = lambda x: nonlinear_derivative(net, x, D, I_load)
    A_fd = _fd(f, x0, 1e-6 * np.abs(x0))
    B_fd = _fd(lambda d: nonlinear_derivative(net, x0, d, I_load), D, np.full(n, 1e-7))
    worst = 0.0
    I_net = net.inc @ net.qsl_currents(V) if net.m else np.zeros(n)
    for k, i in enumerate(net.ids):
        p = top.dgus[i]
        if esr:
            m = build_esr_small_signal(p, ops[i], top.incident(i), line_current=I_net[k],
                                       load_current=I_load[k])
        else:
            m = build_small_signal(p, ops[i], top.incident(i))
        rows = [k, n + k]
        blocks = {i: m.A_ii, **m.A_ij}
        ref = np.zeros((2, 2 * n))
        for j, blk in blocks.items():
            c = net.pos[j]
            ref[:, [c, n + c]] = blk
        fd = A_fd[rows]
        scale = np.abs(ref).max()
        worst = max(worst, float(np.abs(fd - ref).max() / scale))
        b_ref = m.B.ravel()
        worst = max(worst, float(np.abs(B_fd[rows, k] - b_ref).max() / np.abs(b_ref).max()))
    return worst


def block_triangular_gap(p1: DguParams, p2: DguParams, line: LineParams) -> float:
    """Relative distance between the dynamic-line spectrum and the union of the
    QSL grid spectrum with the line mode ``-R/L``."""
    top = Topology([p1, p2], [line])
    diag, coup = {}, {}
    for p in (p1, p2):
        op = compute_operating_point(p)
        m = build_augmented(build_small_signal(p, op, top.incident(p.id)))
        diag[p.id] = closed_loop(m, design_baseline(p, op, BaselineSpec(method="poles")))
        coup[p.id] = m.A_bar_ij
    full = assemble_global(top, diag, coup, dynamic_lines=True).A
    qsl = assemble_global(top, diag, coup).A
    expected = np.concatenate([np.linalg.eigvals(qsl), [-line.R / line.L]])
    got = np.linalg.eigvals(full)
    key = lambda z: (round(z.real, 3), round(z.imag, 3))
    a = np.array(sorted(got, key=key))
    b = np.array(sorted(expected, key=key))
    return float(np.abs(a - b).max() / np.abs(b).max())


def rk4_halving(topology: Topology, horizon: float = 2e-3, h: float = 1e-6) -> tuple[float, float]:
    """Open-loop (fixed duty) integration from a perturbed equilibrium with
    ``h``, ``h/2`` and ``h/4``.  Returns the relative ``h`` vs ``h/2`` difference
    and the ratio of successive differences (about 16 for fourth order)."""
    from l1dcgrid.controllers import DguController
    from l1dcgrid.synthesis import GainVector

    finals = []
    for step in (h, h / 2, h / 4):
        ctrls = {i: DguController(i, GainVector(0, 0, 0), 0.7, p.V_ref, 1.0, 1e-4)
                 for i, p in topology.dgus.items()}
        sim = GridSimulation(topology, ctrls, SimConfig(dt_plant=step, dt_ctrl=step))
        n = len(sim.ids)
        sim.x = sim.x.copy()
        sim.x[n:2 * n] *= 1.02
        for _ in range(int(round(horizon / step))):
            sim.rk4(step)
        finals.append(sim.x)
    d1 = np.linalg.norm(finals[0] - finals[1])
    d2 = np.linalg.norm(finals[1] - finals[2])
    return float(d1 / np.linalg.norm(finals[1])), float(d1 / d2)


def csv_bytes(cfg, name: str, results, horizon: float) -> bytes:
    return project.run(cfg, name, results, horizon=horizon).series.to_csv(cfg.sim.decimation).encode()
