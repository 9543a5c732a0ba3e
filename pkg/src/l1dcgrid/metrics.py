"""Transient metrics extracted from simulated voltage channels."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


@dataclass(frozen=True)
class WindowMetrics:
    event_time: float
    dgu: int
    settling_time: float     # s after the event; nan when unsettled
    overshoot_pct: float
    steady_state_error: float
    peak_swing: float
    settled: bool


@dataclass
class Metrics:
    windows: list[WindowMetrics] = field(default_factory=list)

    def for_event(self, t: float, dgu: int) -> WindowMetrics:
        for w in self.windows:
            if abs(w.event_time - t) < 1e-12 and w.dgu == dgu:
                return w
        raise KeyError(f"no metrics window for DGU {dgu} at t={t}")

    def table(self) -> str:
        rows = [f"{'event_t':>9} {'dgu':>4} {'settling_ms':>12} {'overshoot_%':>12} {'ss_err_V':>10} {'swing_V':>9}"]
        for w in self.windows:
            st = f"{1e3 * w.settling_time:12.3f}" if w.settled else f"{'unsettled':>12}"
            rows.append(f"{w.event_time:9.4f} {w.dgu:4d} {st} {w.overshoot_pct:12.3f} "
                        f"{w.steady_state_error:10.4f} {w.peak_swing:9.3f}")
        return "\n".join(rows) + "\n"


def settling_time(t: np.ndarray, y: np.ndarray, band: float = 0.01, final: float | None = None) -> float:
    """Time from ``t[0]`` after which ``y`` stays within ``band*|final|`` of ``final``.

    Returns ``nan`` if the last sample is itself outside the band.
    """
    if final is None:
        final = float(y[-1])
    tol = band * abs(final) if final != 0 else band * max(np.abs(y).max(), 1e-300)
    outside = np.abs(y - final) > tol
    if not outside.any():
        return 0.0
    last = int(np.nonzero(outside)[0][-1])
    if last == len(y) - 1:
        return float("nan")
    return float(t[last + 1] - t[0])


def overshoot(y: np.ndarray, initial: float, final: float) -> float:
    """Largest excursion beyond ``final`` as a percentage of the step (or of ``final`` for small steps)."""
    step = final - initial
    if abs(step) > 0.01 * abs(final):
        excursion = max(0.0, float(np.max((y - final) * np.sign(step))))
        return 100.0 * excursion / abs(step)
    return 100.0 * float(np.max(np.abs(y - final))) / abs(final) if final else 0.0


def _tail(y: np.ndarray, fraction: float = 0.05) -> np.ndarray:
    return y[-max(1, int(round(fraction * len(y)))):]


def tail_value(y: np.ndarray, fraction: float = 0.05) -> float:
    """Mean of the last ``fraction`` of the window, a drift-tolerant final value."""
    return float(np.mean(_tail(y, fraction)))


def window_metrics(t: np.ndarray, y: np.ndarray, ref: float, event_time: float, dgu: int,
                   initial: float | None = None, band: float = 0.01) -> WindowMetrics:
    final = tail_value(y)
    tail = _tail(y)
    init = float(y[0]) if initial is None else initial
    st = settling_time(t, y, band, final)
    if float(tail.max() - tail.min()) > band * abs(final):
        st = float("nan")   # still drifting when the window closes
    return WindowMetrics(event_time, dgu, st, overshoot(y, init, final), abs(final - ref),
                         float(y.max() - y.min()), not np.isnan(st))


def compute_metrics(ts, events: Sequence) -> Metrics:
    """Per event and per DGU voltage metrics over the window up to the next event."""
    times = sorted({float(e.time) for e in events})
    out = Metrics()
    if len(ts.t) == 0:
        return out
    edges = times + [float(ts.t[-1]) + 1e-12]
    refs = _reference_track(ts, events)
    for a, b in zip(edges[:-1], edges[1:]):
        sel = (ts.t >= a - 1e-12) & (ts.t < b)
        if sel.sum() < 2:
            continue
        before = np.nonzero(ts.t < a - 1e-12)[0]
        for c, i in enumerate(ts.dgus):
            y = ts.vdc[sel, c]
            init = float(ts.vdc[before[-1], c]) if before.size else None
            out.windows.append(window_metrics(ts.t[sel], y, refs[c](b - 1e-9), a, i, init))
    return out


def _reference_track(ts, events):
    from .simulator import VrefStep

    base = {i: float(ts.vdc[0, c]) for c, i in enumerate(ts.dgus)}
    steps = [(e.time, e.kind.dgu, e.kind.V_ref) for e in events if isinstance(e.kind, VrefStep)]

    def make(i):
        def ref(t):
            v = base[i]
            for te, d, vr in steps:
                if d == i and te <= t:
                    v = vr
            return v
        return ref
    return [make(i) for i in ts.dgus]
