"""Fixed-step closed-loop simulation of the averaged microgrid with scripted events."""
from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping, Sequence, Union

import numpy as np

from .controllers import DguController
from .model import (LineParams, NetworkArrays, Topology, TopologyError, V_CLAMP, line_key,
                    lossy_equilibrium, nonlinear_derivative)

log = logging.getLogger(__name__)


class ScenarioError(ValueError):
    """An event cannot be applied to the current grid."""


class DivergenceError(RuntimeError):
    """The simulation left the physically meaningful region."""

    def __init__(self, message: str, series: "TimeSeries", t: float, dgu: int | None, kind: str):
        super().__init__(message)
        self.series = series
        self.t = t
        self.dgu = dgu
        self.kind = kind


# --- events -------------------------------------------------------------------

@dataclass(frozen=True)
class PlugIn:
    dgu: int
    lines: tuple[LineParams, ...]


@dataclass(frozen=True)
class PlugOut:
    dgu: int


@dataclass(frozen=True)
class LoadStep:
    dgu: int
    P_load: float


@dataclass(frozen=True)
class VrefStep:
    dgu: int
    V_ref: float


@dataclass(frozen=True)
class AdaptationSwitch:
    dgu: int
    on: bool


EventKind = Union[PlugIn, PlugOut, LoadStep, VrefStep, AdaptationSwitch]


@dataclass(frozen=True)
class ScenarioEvent:
    time: float
    kind: EventKind


def validate_events(events: Sequence[ScenarioEvent], topology: Topology) -> None:
    last = -math.inf
    for ev in events:
        if ev.time < last:
            raise ScenarioError(f"event times must be non-decreasing ({ev.time} after {last})")
        last = ev.time
        if ev.time < 0:
            raise ScenarioError("event time must be >= 0")
        if ev.kind.dgu not in topology.dgus:
            raise ScenarioError(f"event references unknown DGU {ev.kind.dgu}")
        if isinstance(ev.kind, PlugIn):
            for ln in ev.kind.lines:
                if ev.kind.dgu not in (ln.a, ln.b):
                    raise ScenarioError(f"plug-in of DGU {ev.kind.dgu} lists line {ln.a}-{ln.b} not touching it")
                for end in (ln.a, ln.b):
                    if end not in topology.dgus:
                        raise ScenarioError(f"line {ln.a}-{ln.b} references unknown DGU {end}")
        if isinstance(ev.kind, LoadStep) and not ev.kind.P_load > 0:
            raise ScenarioError("load power must be > 0")


# --- configuration and outputs -------------------------------------------------------

@dataclass(frozen=True)
class SimConfig:
    horizon: float = 0.2
    dt_plant: float = 1e-6
    dt_ctrl: float = 4e-5
    line_mode: str = "qsl"          # "qsl" | "dynamic"
    model_variant: str = "ideal"    # "ideal" | "esr"
    load_model: str = "constant_power"
    decimation: int = 10
    divergence_factor: float = 10.0
    saturation_window: float = 0.02  # duty pinned at a limit this long counts as runaway
    tracking_window: float = 0.05    # sustained error beyond tracking_band this long counts as lost
    tracking_band: float = 0.05

    def __post_init__(self):
        if self.line_mode not in ("qsl", "dynamic"):
            raise ValueError(f"line_mode must be 'qsl' or 'dynamic', got {self.line_mode!r}")
        if self.model_variant not in ("ideal", "esr"):
            raise ValueError(f"model_variant must be 'ideal' or 'esr', got {self.model_variant!r}")
        if self.load_model not in ("constant_power", "resistive"):
            raise ValueError(f"unknown load model {self.load_model!r}")
        if not (self.dt_plant > 0 and self.dt_ctrl > 0 and self.horizon > 0):
            raise ValueError("time steps and horizon must be > 0")
        ratio = self.dt_ctrl / self.dt_plant
        if abs(ratio - round(ratio)) > 1e-9 * ratio or round(ratio) < 1:
            raise ValueError("dt_ctrl must be an integer multiple of dt_plant")

    @property
    def substeps(self) -> int:
        return int(round(self.dt_ctrl / self.dt_plant))


@dataclass
class TimeSeries:
    t: np.ndarray
    dgus: list[int]
    vdc: np.ndarray        # (samples, dgus)
    it: np.ndarray
    duty: np.ndarray
    ul1: np.ndarray
    theta: np.ndarray      # 1-norm of the parameter estimate
    line_keys: list[tuple[int, int]]
    line_current: np.ndarray  # (samples, lines); current from the higher id into the lower id
    clamped: np.ndarray        # load-current clamp active (any DGU) per sample
    saturated: np.ndarray      # (samples, dgus)

    def channel(self, name: str) -> np.ndarray:
        """Look up a column by its CSV header name, e.g. ``"6.vdc"`` or ``"1-2.current"``."""
        if name == "t":
            return self.t
        left, _, kind = name.partition(".")
        if kind == "current":
            a, b = (int(x) for x in left.split("-"))
            return self.line_current[:, self.line_keys.index(line_key(a, b))]
        col = self.dgus.index(int(left))
        return {"vdc": self.vdc, "it": self.it, "duty": self.duty, "ul1": self.ul1,
                "theta_l1": self.theta}[kind][:, col]

    def header(self) -> list[str]:
        cols = ["t"]
        for i in self.dgus:
            cols += [f"{i}.vdc", f"{i}.it", f"{i}.duty", f"{i}.ul1", f"{i}.theta_l1"]
        cols += [f"{a}-{b}.current" for a, b in self.line_keys]
        return cols

    def to_csv(self, decimation: int = 10) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.header())
        for k in range(0, len(self.t), max(1, decimation)):
            row = [self.t[k]]
            for c in range(len(self.dgus)):
                row += [self.vdc[k, c], self.it[k, c], self.duty[k, c], self.ul1[k, c], self.theta[k, c]]
            row += list(self.line_current[k])
            w.writerow([f"{float(v):.9g}" for v in row])
        return buf.getvalue()


# --- simulation state --------------------------------------------------------------

class GridSimulation:
    """Mutable state of one scenario run: plant, topology and controllers."""

    def __init__(self, topology: Topology, controllers: Mapping[int, DguController], cfg: SimConfig,
                 all_lines: Iterable[tuple[int, int]] = ()):
        self.cfg = cfg
        self.topology = topology.copy()
        if cfg.model_variant == "ideal":
            for p in self.topology.dgus.values():
                if p.R_c:
                    self.topology.replace_dgu(replace(p, R_c=0.0))
        self.controllers = dict(controllers)
        missing = [i for i in self.topology.ids if i not in self.controllers]
        if missing:
            raise ScenarioError(f"no controller for DGU(s) {missing}")
        self.ids = self.topology.ids
        self.pos = {i: k for k, i in enumerate(self.ids)}
        self.P_load = np.array([self.topology.dgus[i].P_load for i in self.ids], dtype=float)
        self.R_load = np.array([self.topology.dgus[i].R_load for i in self.ids], dtype=float)
        self.V_ref = np.array([self.topology.dgus[i].V_ref for i in self.ids], dtype=float)
        self.line_keys = sorted(set(self.topology.lines) | {line_key(*k) for k in all_lines})
        self._rebuild()
        self.x = self._equilibrium()
        self.duty = np.array([self._eq_duty[i] for i in range(len(self.ids))])
        for i in self.ids:
            k = self.pos[i]
            self.controllers[i].initialize(self.x[k], self.x[len(self.ids) + k], self.duty[k])
        self.clamped = False

    # network arrays change only on topology events
    def _rebuild(self):
        self.net = NetworkArrays(self.topology)
        self.dynamic = self.cfg.line_mode == "dynamic"

    def _equilibrium(self) -> np.ndarray:
        """Steady state with every PCC at its reference (integral action guarantees this)."""
        n = len(self.ids)
        V = self.V_ref.copy()
        i_line = self.net.qsl_currents(V)
        I_net = self.net.inc @ i_line if self.net.m else np.zeros(n)
        I_load = self._load_currents(V)[0]
        I = np.empty(n)
        self._eq_duty = np.empty(n)
        for k, i in enumerate(self.ids):
            p = self.topology.dgus[i]
            out = I_load[k] - I_net[k]
            if p.R_c:
                d, I[k] = _esr_equilibrium(p, out, I_load[k], I_net[k])
            else:
                d, I[k] = lossy_equilibrium(p, out)
            self._eq_duty[k] = d
        x = np.concatenate([I, V])
        if self.dynamic:
            x = np.concatenate([x, i_line])
        return x

    def _load_currents(self, V):
        if self.cfg.load_model == "resistive":
            return V / self.R_load, np.zeros(len(V), dtype=bool)
        clamped = V < V_CLAMP
        return self.P_load / np.where(clamped, V_CLAMP, V), clamped

    def derivative(self, x: np.ndarray, duty: np.ndarray) -> np.ndarray:
        n = len(self.ids)
        I_load, clamped = self._load_currents(x[n:2 * n])
        if clamped.any():
            self.clamped = True
        return nonlinear_derivative(self.net, x, duty, I_load, self.dynamic)

    def rk4(self, h: float) -> None:
        x, d = self.x, self.duty
        k1 = self.derivative(x, d)
        k2 = self.derivative(x + 0.5 * h * k1, d)
        k3 = self.derivative(x + 0.5 * h * k2, d)
        k4 = self.derivative(x + h * k3, d)
        self.x = x + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)

    def line_currents(self) -> dict[tuple[int, int], float]:
        n = len(self.ids)
        if self.dynamic:
            cur = self.x[2 * n:]
        else:
            cur = self.net.qsl_currents(self.x[n:2 * n])
        return dict(zip(self.net.keys, cur))

    def apply_event(self, ev: EventKind) -> None:
        apply_event(self, ev)


def _esr_equilibrium(p, out_current, I_load, I_net):
    """Equilibrium with ESR; the capacitor carries no DC current so it matches the ideal case."""
    return lossy_equilibrium(p, out_current)


def apply_event(sim: GridSimulation, ev: EventKind) -> None:
    """Mutate topology, loads, references or adaptation for one event.

    Controllers keep their stored operating points: nothing is re-tuned.
    """
    n = len(sim.ids)
    if isinstance(ev, (PlugIn, PlugOut)):
        old = sim.line_currents() if sim.dynamic else {}
        if isinstance(ev, PlugIn):
            for ln in ev.lines:
                try:
                    sim.topology.add_line(ln)
                except TopologyError as exc:
                    raise ScenarioError(str(exc)) from exc
        else:
            incident = sim.topology.incident(ev.dgu)
            if not incident:
                raise ScenarioError(f"DGU {ev.dgu} is not connected")
            for ln in incident:
                sim.topology.remove_line(ln.a, ln.b)
        sim._rebuild()
        if sim.dynamic:
            V = sim.x[n:2 * n]
            qsl = dict(zip(sim.net.keys, sim.net.qsl_currents(V)))
            cur = [old.get(k, qsl[k]) for k in sim.net.keys]
            sim.x = np.concatenate([sim.x[:2 * n], np.array(cur, dtype=float)])
    elif isinstance(ev, LoadStep):
        k = sim.pos[ev.dgu]
        if sim.cfg.load_model == "resistive":
            sim.R_load[k] *= sim.P_load[k] / ev.P_load
        sim.P_load[k] = ev.P_load
    elif isinstance(ev, VrefStep):
        sim.V_ref[sim.pos[ev.dgu]] = ev.V_ref
        sim.controllers[ev.dgu].v_ref = ev.V_ref
    elif isinstance(ev, AdaptationSwitch):
        sim.controllers[ev.dgu].set_adaptation(ev.on)
    else:
        raise ScenarioError(f"unknown event {ev!r}")


# --- main loop -----------------------------------------------------------------------

def run_scenario(topology: Topology, controllers: Mapping[int, DguController],
                 events: Sequence[ScenarioEvent], cfg: SimConfig = SimConfig(),
                 all_lines: Iterable[tuple[int, int]] = ()) -> tuple[TimeSeries, "Metrics"]:
    """Simulate the closed loop and return sampled channels plus metrics.

    Raises ``DivergenceError`` (carrying the partial series) when a voltage
    leaves ``(0, divergence_factor*V_ref]``, a state becomes non-finite, a
    duty command stays pinned at a limit for ``saturation_window``, or a
    voltage stays outside the tracking band for ``tracking_window``.
    """
    from .metrics import compute_metrics

    validate_events(events, topology)
    extra = set(all_lines)
    for ev in events:
        if isinstance(ev.kind, PlugIn):
            extra |= {ln.key for ln in ev.kind.lines}
    sim = GridSimulation(topology, controllers, cfg, extra)
    n = len(sim.ids)
    steps = int(round(cfg.horizon / cfg.dt_plant))
    sub = cfg.substeps
    n_samples = steps // sub + 1
    rec = {k: np.zeros((n_samples, n)) for k in ("vdc", "it", "duty", "ul1", "theta")}
    sat = np.zeros((n_samples, n), dtype=bool)
    lines = np.zeros((n_samples, len(sim.line_keys)))
    clamp = np.zeros(n_samples, dtype=bool)
    t_rec = np.zeros(n_samples)
    lk_index = {k: c for c, k in enumerate(sim.line_keys)}

    pending = sorted(events, key=lambda e: e.time)
    ev_ticks = [e.time / cfg.dt_plant for e in pending]
    ei = 0
    sat_run = np.zeros(n)
    track_run = np.zeros(n)
    V_lim = cfg.divergence_factor * sim.V_ref.max()

    def record(k, t):
        t_rec[k] = t
        rec["it"][k] = sim.x[:n]
        rec["vdc"][k] = sim.x[n:2 * n]
        rec["duty"][k] = sim.duty
        for c, i in enumerate(sim.ids):
            tel = sim.controllers[i].last
            if tel is not None:
                rec["ul1"][k, c] = tel.u_l1
                rec["theta"][k, c] = float(np.abs(tel.theta_hat).sum())
                sat[k, c] = tel.saturated
        for key, val in sim.line_currents().items():
            lines[k, lk_index[key]] = val
        clamp[k] = sim.clamped
        sim.clamped = False

    def partial(k):
        return TimeSeries(t_rec[:k], list(sim.ids), rec["vdc"][:k], rec["it"][:k], rec["duty"][:k],
                          rec["ul1"][:k], rec["theta"][:k], list(sim.line_keys), lines[:k], clamp[:k], sat[:k])

    def fire_due(tick_pos):
        nonlocal ei
        while ei < len(pending) and ev_ticks[ei] <= tick_pos + 1e-9:
            apply_event(sim, pending[ei].kind)
            ei += 1

    for k in range(n_samples):
        tick = k * sub
        t = tick * cfg.dt_plant
        fire_due(tick)
        for c, i in enumerate(sim.ids):
            sim.duty[c] = sim.controllers[i].step(t, sim.x[c], sim.x[n + c])
        record(k, t)
        V = sim.x[n:2 * n]
        bad = None
        if not np.all(np.isfinite(sim.x)):
            bad = ("non-finite state", int(np.argmax(~np.isfinite(V))) if not np.all(np.isfinite(V)) else 0)
        elif np.any(V > V_lim) or np.any(V <= 0):
            bad = ("voltage out of range", int(np.argmax((V > V_lim) | (V <= 0))))
        else:
            pinned = sat[k]
            sat_run = np.where(pinned, sat_run + cfg.dt_ctrl, 0.0)
            off = np.abs(V - sim.V_ref) > cfg.tracking_band * sim.V_ref
            track_run = np.where(off, track_run + cfg.dt_ctrl, 0.0)
            if np.any(sat_run >= cfg.saturation_window - 1e-12):
                bad = ("duty saturation runaway", int(np.argmax(sat_run)))
            elif np.any(track_run >= cfg.tracking_window - 1e-12):
                bad = ("loss of reference tracking", int(np.argmax(track_run)))
        if bad is not None:
            kind, c = bad
            dgu = sim.ids[c]
            raise DivergenceError(f"{kind} at DGU {dgu}, t={t:.6f} s", partial(k + 1), t, dgu, kind)
        if k == n_samples - 1:
            break
        # integrate one controller period, splitting at events that fall inside it
        pos = float(tick)
        end = float(tick + sub)
        while pos < end - 1e-9:
            nxt = min(math.floor(pos + 1e-9) + 1.0, end)
            if ei < len(pending) and pos + 1e-9 < ev_ticks[ei] < nxt - 1e-9:
                nxt = ev_ticks[ei]
            try:
                sim.rk4((nxt - pos) * cfg.dt_plant)
            except FloatingPointError as exc:
                raise DivergenceError(f"{exc} at t={(pos * cfg.dt_plant):.6f} s", partial(k + 1),
                                      pos * cfg.dt_plant, None, "voltage out of range") from exc
            pos = nxt
            if abs(pos - round(pos)) > 1e-9 or pos < end - 1e-9:
                fire_due(pos)
    ts = partial(n_samples)
    return ts, compute_metrics(ts, events)
