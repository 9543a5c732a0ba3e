"""Glue between a ProjectConfig and the synthesis, simulation and analysis layers."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from .config import ProjectConfig, ScenarioSpec
from .controllers import DguController, L1Config, type3_tuning
from .metrics import Metrics
from .model import Topology, compute_operating_point
from .simulator import (AdaptationSwitch, LoadStep, PlugIn, PlugOut, ScenarioError, ScenarioEvent,
                        TimeSeries, VrefStep, run_scenario)
from .stability import StabilityReport, analyze
from .synthesis import DguSynthesis, GainVector, Polytope, synthesize_dgu


def full_topology(cfg: ProjectConfig) -> Topology:
    return Topology(cfg.dgus, cfg.lines)


def local_polytope(cfg: ProjectConfig, dgu: int) -> Polytope:
    p = cfg.dgu(dgu)
    lp = cfg.synthesis.local_polytope
    g_max = lp.g_max if lp.g_max is not None else full_topology(cfg).conductance_sum(dgu)
    return Polytope.around(p, compute_operating_point(p), lp.rel, g_max, lp.P_load, lp.dD)


def synthesize(cfg: ProjectConfig, dgus=None) -> dict[int, DguSynthesis]:
    """Per-DGU synthesis for every DGU of the project (or the listed ones)."""
    s = cfg.synthesis
    out = {}
    for p in cfg.dgus:
        if dgus is not None and p.id not in dgus:
            continue
        poly = local_polytope(cfg, p.id) if s.predictor.mode == "local" else s.shared_polytope
        out[p.id] = synthesize_dgu(p, compute_operating_point(p), s.baseline_for(p.id), s.predictor, poly,
                                   nominal=cfg.nominal, omega_grid=s.omega_grid, samples=s.samples,
                                   seed=s.seed, safety=s.safety)
    return out


def synthesis_report(cfg: ProjectConfig, results: dict[int, DguSynthesis]) -> str:
    lines = ["synthesis report", ""]
    for i, r in results.items():
        K, pd = r.K, r.predictor
        ev = np.sort_complex(np.linalg.eigvals(pd.A_m_hat))
        lines += [
            f"DGU {i}",
            f"  baseline gains      K_i={K.K_i:.9g} K_v={K.K_v:.9g} K_xi={K.K_xi:.9g}",
            f"  predictor gains     K_i={pd.K.K_i:.9g} K_v={pd.K.K_v:.9g} K_xi={pd.K.K_xi:.9g}",
            f"  A_m eigenvalues     " + ", ".join(f"{z.real:.6g}{z.imag:+.6g}j" for z in ev),
            f"  time scale          {pd.time_scale:.9g} rad/s",
            f"  canonical e (pu)    " + " ".join(f"{x:.9g}" for x in pd.e),
            f"  theta_max           {r.theta_max:.9g}",
            f"  selected omega_c    {r.omega_c:.9g} rad/s (lambda={r.selected.lambda_:.6g})",
            "  omega_c [rad/s]      ||G||_L1      lambda",
        ]
        lines += [f"  {fd.omega_c:14.6g} {fd.g_norm:13.6g} {fd.lambda_:11.6g}" for fd in r.table]
        lines.append("")
    return "\n".join(lines)


def initial_topology(cfg: ProjectConfig, sc: ScenarioSpec) -> Topology:
    if sc.initial_lines is None:
        return full_topology(cfg)
    return Topology(cfg.dgus, [cfg.line(k) for k in sc.initial_lines])


def scenario_events(cfg: ProjectConfig, sc: ScenarioSpec) -> list[ScenarioEvent]:
    out = []
    for e in sc.events:
        if e.kind == "plugin":
            kind = PlugIn(e.dgu, tuple(cfg.line(k) for k in e.lines))
        elif e.kind == "plugout":
            kind = PlugOut(e.dgu)
        elif e.kind == "loadstep":
            kind = LoadStep(e.dgu, e.P_load)
        elif e.kind == "vrefstep":
            kind = VrefStep(e.dgu, e.V_ref)
        else:
            kind = AdaptationSwitch(e.dgu, e.enabled)
        out.append(ScenarioEvent(e.time, kind))
    return out


def build_controllers(cfg: ProjectConfig, kind: str, results: dict[int, DguSynthesis] | None,
                      dt: float) -> dict[int, DguController]:
    s = cfg.synthesis
    out = {}
    for p in cfg.dgus:
        op = compute_operating_point(p)
        common = dict(duty_max=s.duty_max, duty_min=s.duty_min, commission=s.commission)
        if kind == "type3":
            out[p.id] = DguController(p.id, GainVector(0.0, 0.0, 0.0), op.D, op.V_dc_bar, op.I_t_bar, dt,
                                      type3=type3_tuning(p, op, dt), **common)
            continue
        r = results[p.id]
        l1 = None
        if kind == "l1":
            wc = s.omega_c if s.omega_c is not None else r.omega_c
            l1 = L1Config(r.predictor, r.P, s.Gamma, wc, r.theta_max, dt, s.rate_limit, s.eps_proj)
        out[p.id] = DguController(p.id, r.K, op.D, op.V_dc_bar, op.I_t_bar, dt, l1=l1, **common)
    return out


@dataclass
class RunResult:
    series: TimeSeries
    metrics: Metrics


def run(cfg: ProjectConfig, name: str, results: dict[int, DguSynthesis] | None = None,
        line_mode: str | None = None, model: str | None = None, horizon: float | None = None) -> RunResult:
    """Simulate a named scenario.  Raises ``DivergenceError`` on divergence."""
    if name not in cfg.scenarios:
        raise ScenarioError(f"unknown scenario {name!r}; available: {', '.join(sorted(cfg.scenarios))}")
    sc = cfg.scenarios[name]
    sim = dataclasses.replace(cfg.sim, **{k: v for k, v in dict(
        line_mode=line_mode, model_variant=model or sc.model,
        horizon=horizon or sc.horizon).items() if v is not None})
    if sc.controller != "type3" and results is None:
        results = synthesize(cfg)
    controllers = build_controllers(cfg, sc.controller, results, sim.dt_ctrl)
    all_lines = [ln.key for ln in cfg.lines]
    ts, metrics = run_scenario(initial_topology(cfg, sc), controllers, scenario_events(cfg, sc), sim, all_lines)
    return RunResult(ts, metrics)


def topology_after(cfg: ProjectConfig, sc: ScenarioSpec, until: float | None = None) -> Topology:
    """Topology once every topology event up to ``until`` has been applied."""
    top = initial_topology(cfg, sc)
    for e in sc.events:
        if until is not None and e.time > until:
            break
        if e.kind == "plugin":
            for k in e.lines:
                top.add_line(cfg.line(k))
        elif e.kind == "plugout":
            for k in [k for k in top.lines if e.dgu in k]:
                top.remove_line(*k)
    return top


def stability(cfg: ProjectConfig, variant: str, topology: Topology,
              results: dict[int, DguSynthesis] | None = None, dynamic_lines: bool = False) -> StabilityReport:
    results = results if results is not None else synthesize(cfg)
    gains = {i: r.K for i, r in results.items()}
    preds = {i: r.predictor for i, r in results.items()}
    return analyze(topology, gains, variant, preds, dynamic_lines=dynamic_lines)
