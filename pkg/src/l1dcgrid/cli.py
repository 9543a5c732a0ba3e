"""Command-line entry point.

Exit codes: 0 success, 1 synthesis infeasible (some lambda >= 1 or an
unstable local loop), 2 invalid input, 3 simulation diverged, 4 requested
stability variant is not Hurwitz.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import re
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import project
from .config import BUNDLED, ConfigError, ProjectConfig, resolve
from .simulator import DivergenceError, ScenarioError
from .stability import VARIANTS, StabilityError, eigenvalue_csv

EXIT_OK, EXIT_INFEASIBLE, EXIT_INPUT, EXIT_DIVERGED, EXIT_UNSTABLE = 0, 1, 2, 3, 4


class InputError(Exception):
    pass


def _load(args) -> ProjectConfig:
    cfg = resolve(args.config)
    if getattr(args, "seed", None) is not None:
        cfg.synthesis = dataclasses.replace(cfg.synthesis, seed=args.seed)
    return cfg


def _out_dir(args) -> Path:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _lambda_csv(results) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["dgu", "omega_c", "g_l1_norm", "lambda", "selected"])
    for i, r in results.items():
        for fd in r.table:
            w.writerow([i, f"{fd.omega_c:.9g}", f"{fd.g_norm:.9g}", f"{fd.lambda_:.9g}", 0])
        s = r.selected
        w.writerow([i, f"{s.omega_c:.9g}", f"{s.g_norm:.9g}", f"{s.lambda_:.9g}", 1])
    return buf.getvalue()


def cmd_synthesize(args) -> int:
    cfg = _load(args)
    results = project.synthesize(cfg)
    out = _out_dir(args)
    (out / "synthesis_report.txt").write_text(project.synthesis_report(cfg, results))
    (out / "lambda.csv").write_text(_lambda_csv(results))
    code = EXIT_OK
    for i, r in results.items():
        hurwitz = np.linalg.eigvals(r.predictor.A_m_hat).real.max() < 0
        lam = r.selected.lambda_
        ok = lam < 1 and hurwitz
        print(f"DGU {i}: theta_max={r.theta_max:.4g} omega_c={r.omega_c:.4g} rad/s "
              f"lambda={lam:.4f} {'ok' if ok else 'FAIL'}")
        if not ok:
            code = EXIT_INFEASIBLE
    print(f"report written to {out / 'synthesis_report.txt'}")
    return code


def _run_one(cfg: ProjectConfig, name: str, results, args, out: Path) -> tuple[int, str]:
    try:
        rr = project.run(cfg, name, results, line_mode=args.line_mode, model=args.model)
    except DivergenceError as exc:
        (out / f"{name}.csv").write_text(exc.series.to_csv(cfg.sim.decimation))
        return EXIT_DIVERGED, f"{name}: diverged ({exc}); partial CSV written"
    (out / f"{name}.csv").write_text(rr.series.to_csv(cfg.sim.decimation))
    table = rr.metrics.table()
    (out / f"{name}_metrics.txt").write_text(table)
    return EXIT_OK, f"{name}: completed\n{table}"


def _needs_synthesis(cfg: ProjectConfig, names) -> bool:
    return any(cfg.scenarios[n].controller != "type3" for n in names)


def _check_scenarios(cfg: ProjectConfig, names) -> None:
    missing = [n for n in names if n not in cfg.scenarios]
    if missing:
        raise InputError(f"unknown scenario(s) {', '.join(missing)}; available: "
                         f"{', '.join(sorted(cfg.scenarios))}")


def cmd_run(args) -> int:
    cfg = _load(args)
    _check_scenarios(cfg, [args.scenario])
    results = project.synthesize(cfg) if _needs_synthesis(cfg, [args.scenario]) else None
    code, msg = _run_one(cfg, args.scenario, results, args, _out_dir(args))
    print(msg, file=sys.stderr if code else sys.stdout)
    return code


def cmd_batch(args) -> int:
    cfg = _load(args)
    names = args.scenario or sorted(cfg.scenarios)
    _check_scenarios(cfg, names)
    results = project.synthesize(cfg) if _needs_synthesis(cfg, names) else None
    out = _out_dir(args)
    with ThreadPoolExecutor(max_workers=args.jobs) as pool:
        done = list(pool.map(lambda n: _run_one(cfg, n, results, args, out), names))
    for _, msg in done:
        print(msg)
    return max(code for code, _ in done)


_EVENT = re.compile(r"^(plugin|plugout)-dgu(\d+)$")


def _event_topology(cfg: ProjectConfig, spec: str | None):
    """Topology selected by ``--event``.

    Accepts a scenario name (its topology after every event) or
    ``plugin-dguN`` / ``plugout-dguN`` (the first scenario containing that
    event, just after it fires).  Without ``--event`` every configured line
    is connected.
    """
    if spec is None:
        return project.full_topology(cfg), "all configured lines"
    if spec in cfg.scenarios:
        return project.topology_after(cfg, cfg.scenarios[spec]), f"after scenario {spec}"
    m = _EVENT.match(spec)
    if m:
        kind, dgu = m.group(1), int(m.group(2))
        for name in sorted(cfg.scenarios):
            sc = cfg.scenarios[name]
            for ev in sc.events:
                if ev.kind == kind and ev.dgu == dgu:
                    return project.topology_after(cfg, sc, ev.time), f"{spec} in scenario {name}"
    raise InputError(f"no scenario or event matches {spec!r}")


def cmd_stability(args) -> int:
    cfg = _load(args)
    topology, where = _event_topology(cfg, args.event)
    variants = args.variant or list(VARIANTS)
    results = project.synthesize(cfg)   # every variant needs the gains
    dynamic = args.line_mode == "dynamic"
    reports = [project.stability(cfg, v, topology, results, dynamic) for v in variants]
    out = _out_dir(args)
    (out / "eigenvalues.csv").write_text(eigenvalue_csv(reports))
    text = f"topology: {where}; lines {sorted(topology.lines)}\n\n" + "\n".join(r.summary() for r in reports)
    (out / "stability_report.txt").write_text(text)
    print(text)
    return EXIT_OK if all(r.hurwitz for r in reports) else EXIT_UNSTABLE


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="l1dcgrid", description="Decentralised L1 adaptive voltage control "
                                 "of boost-converter DC microgrids.")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, out="out"):
        p.add_argument("--config", default="table1",
                       help=f"YAML project file or bundled name ({', '.join(BUNDLED)}); default table1")
        p.add_argument("--out-dir", default=out, help="directory for CSV and report files")
        p.add_argument("--seed", type=int, default=None, help="override the polytope sampling seed")

    def sim_flags(p):
        p.add_argument("--line-mode", choices=("qsl", "dynamic"), default=None)
        p.add_argument("--model", choices=("ideal", "esr"), default=None, help="plant model variant")

    p = sub.add_parser("synthesize", help="baseline gains, predictors, theta_max and filter bandwidths")
    common(p)
    p.set_defaults(func=cmd_synthesize)

    p = sub.add_parser("run", help="simulate one scenario")
    common(p)
    sim_flags(p)
    p.add_argument("--scenario", required=True)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("batch", help="simulate several scenarios on worker threads")
    common(p)
    sim_flags(p)
    p.add_argument("--scenario", action="append", help="repeatable; default every scenario")
    p.add_argument("--jobs", type=int, default=4)
    p.set_defaults(func=cmd_batch)

    p = sub.add_parser("stability", help="global eigenvalues and the decomposed Lyapunov test")
    common(p)
    p.add_argument("--variant", action="append", choices=VARIANTS, help="repeatable; default all")
    p.add_argument("--event", default=None, help="scenario name, plugin-dguN or plugout-dguN")
    p.add_argument("--line-mode", choices=("qsl", "dynamic"), default="qsl")
    p.set_defaults(func=cmd_stability)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ScenarioError, StabilityError, InputError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except ValueError as exc:   # parameter validation deeper in the model layer
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
