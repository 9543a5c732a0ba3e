import numpy as np
import pytest

from l1dcgrid import project
from l1dcgrid.controllers import DguController
from l1dcgrid.model import LineParams, Topology
from l1dcgrid.simulator import (AdaptationSwitch, DivergenceError, GridSimulation, LoadStep, PlugIn, PlugOut,
                                ScenarioError, ScenarioEvent, SimConfig, VrefStep, apply_event, run_scenario,
                                validate_events)
from l1dcgrid.synthesis import GainVector

import properties as props


@pytest.fixture(scope="module")
def grid(table1):
    return Topology(table1.dgus, table1.lines)


def idle_controllers(top):
    return {i: DguController(i, GainVector(0, 0, 0), 0.7, p.V_ref, 1.0, 4e-5) for i, p in top.dgus.items()}


class TestConfig:
    @pytest.mark.parametrize("kw", [dict(line_mode="pi"), dict(model_variant="switching"),
                                    dict(load_model="zip"), dict(dt_plant=0.0), dict(dt_ctrl=2.5e-6),
                                    dict(horizon=-1.0)])
    def test_rejects(self, kw):
        with pytest.raises(ValueError):
            SimConfig(**kw)

    def test_substeps(self):
        assert SimConfig().substeps == 40


class TestEvents:
    def test_validation(self, grid):
        ln = LineParams(1, 6, 1.0, 1e-6)
        bad = [
            [ScenarioEvent(0.2, LoadStep(1, 1000)), ScenarioEvent(0.1, LoadStep(1, 900))],
            [ScenarioEvent(-1.0, LoadStep(1, 1000))],
            [ScenarioEvent(0.1, PlugOut(9))],
            [ScenarioEvent(0.1, PlugIn(2, (ln,)))],
            [ScenarioEvent(0.1, LoadStep(1, 0.0))],
        ]
        for evs in bad:
            with pytest.raises(ScenarioError):
                validate_events(evs, grid)
        validate_events([ScenarioEvent(0.1, PlugIn(6, (ln,))), ScenarioEvent(0.1, VrefStep(6, 385.0))], grid)

    def test_plug_out_then_in_restores_topology(self, grid):
        sim = GridSimulation(grid, idle_controllers(grid), SimConfig())
        before = sim.topology.copy()
        incident = tuple(sim.topology.incident(3))
        apply_event(sim, PlugOut(3))
        assert sim.topology.neighbors(3) == []
        with pytest.raises(ScenarioError):
            apply_event(sim, PlugOut(3))
        apply_event(sim, PlugIn(3, incident))
        assert sim.topology == before
        with pytest.raises(ScenarioError):
            apply_event(sim, PlugIn(3, incident[:1]))

    def test_reference_and_adaptation_events(self, grid):
        sim = GridSimulation(grid, idle_controllers(grid), SimConfig())
        apply_event(sim, VrefStep(2, 383.0))
        assert sim.controllers[2].v_ref == 383.0
        apply_event(sim, LoadStep(4, 1000.0))
        assert sim.P_load[sim.pos[4]] == 1000.0
        apply_event(sim, AdaptationSwitch(1, False))   # no L1 loop: a no-op

    def test_missing_controller(self, grid):
        ctrls = idle_controllers(grid)
        del ctrls[4]
        with pytest.raises(ScenarioError, match="4"):
            GridSimulation(grid, ctrls, SimConfig())


class TestIntegration:
    def test_equilibrium_is_stationary(self, table1, synth1):
        rr = project.run(table1, "pnp-dgu6", synth1, horizon=0.01)
        V = np.array([p.V_ref for p in table1.dgus])
        assert np.abs(rr.series.vdc - V).max() < 1e-9
        # DGU 6 and its future lines are recorded from the first sample
        assert "6.vdc" in rr.series.header() and "1-6.current" in rr.series.header()
        assert np.abs(rr.series.channel("1-6.current")).max() == 0.0

    def test_rk4_is_fourth_order(self, grid):
        rel, ratio = props.rk4_halving(grid)
        assert rel < 1e-6
        assert 12.0 < ratio < 20.0

    def test_qsl_and_dynamic_lines_agree_in_steady_state(self, table1, synth1):
        a = project.run(table1, "vref-dgu1", synth1, horizon=0.15).series
        b = project.run(table1, "vref-dgu1", synth1, horizon=0.15, line_mode="dynamic").series
        assert a.header() == b.header()
        assert np.abs(a.vdc[-1] - b.vdc[-1]).max() < 1e-3
        assert np.abs(a.line_current[-1] - b.line_current[-1]).max() < 1e-3

    def test_event_between_controller_samples(self, grid):
        ctrls = idle_controllers(grid)
        cfg = SimConfig(horizon=2e-4)
        ev = [ScenarioEvent(1.03e-4, LoadStep(2, 2000.0))]
        ts, metrics = run_scenario(grid, ctrls, ev, cfg)
        assert len(ts.t) == 6
        assert {w.event_time for w in metrics.windows} == {1.03e-4}

    def test_divergence_carries_partial_series(self, table1, synth1):
        with pytest.raises(DivergenceError) as info:
            project.run(table1, "baseline-only-pnp", synth1)
        err = info.value
        assert err.kind == "duty saturation runaway"
        assert err.dgu == 5
        assert 0.05 < err.t < 0.2
        assert err.series.t[-1] == pytest.approx(err.t)
        assert err.series.vdc.shape == (len(err.series.t), 6)

    def test_csv_decimation_and_format(self, table1, synth1):
        ts = project.run(table1, "pnp-dgu6", synth1, horizon=1e-3).series
        rows = ts.to_csv(10).splitlines()
        assert rows[0].split(",")[:6] == ["t", "1.vdc", "1.it", "1.duty", "1.ul1", "1.theta_l1"]
        assert len(rows) == 1 + (len(ts.t) + 9) // 10
        with pytest.raises(ValueError):
            ts.channel("9.vdc")
