"""Project configuration files (YAML).

A project file holds the DGU table, the line list, the nominal row,
synthesis options, simulator options and named scenarios.  Parsing is
strict: unknown keys, missing required keys and ill-typed values are
reported with their dotted path and source line.
"""
from __future__ import annotations

import dataclasses
import types
import typing
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Union

import yaml

from .model import DguParams, LineParams, line_key
from .simulator import SimConfig
from .synthesis import BaselineSpec, NominalDesign, Polytope, PredictorSpec


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class LocalPolytope:
    """Per-DGU uncertainty set used with local predictors."""
    rel: float = 0.1
    P_load: tuple[float, float] = (800.0, 3000.0)
    dD: float = 0.01
    g_max: float | None = None   # None: conductance of every configured incident line


@dataclass
class SynthesisConfig:
    baseline: BaselineSpec = field(default_factory=BaselineSpec)
    baseline_overrides: dict[int, BaselineSpec] = field(default_factory=dict)
    predictor: PredictorSpec = field(default_factory=PredictorSpec)
    local_polytope: LocalPolytope = field(default_factory=LocalPolytope)
    shared_polytope: Polytope = field(default_factory=Polytope)
    Gamma: float = 1e4
    omega_c: float | None = None          # None: use the synthesized bandwidth
    omega_grid: tuple[float, ...] | None = None
    samples: int = 64
    seed: int = 0
    safety: float = 2.0
    rate_limit: float = 1e6
    eps_proj: float = 0.1
    duty_max: float = 0.8
    duty_min: float = 0.0
    commission: bool = True

    def __post_init__(self):
        if not self.Gamma > 0:
            raise ValueError("Gamma must be > 0")
        if not 0 <= self.duty_min < self.duty_max <= 1:
            raise ValueError("duty limits must satisfy 0 <= duty_min < duty_max <= 1")
        if self.samples < 0:
            raise ValueError("samples must be >= 0")

    def baseline_for(self, dgu: int) -> BaselineSpec:
        return self.baseline_overrides.get(dgu, self.baseline)


@dataclass(frozen=True)
class EventSpec:
    time: float
    kind: str                      # plugin | plugout | loadstep | vrefstep | adaptation
    dgu: int
    lines: tuple[tuple[int, int], ...] = ()
    P_load: float | None = None
    V_ref: float | None = None
    enabled: bool | None = None

    def __post_init__(self):
        need = {"plugin": "lines", "loadstep": "P_load", "vrefstep": "V_ref", "adaptation": "enabled"}
        if self.kind not in ("plugin", "plugout", "loadstep", "vrefstep", "adaptation"):
            raise ValueError(f"unknown event kind {self.kind!r}")
        key = need.get(self.kind)
        if key is not None and getattr(self, key) in (None, ()):
            raise ValueError(f"{self.kind} event needs '{key}'")
        if self.time < 0:
            raise ValueError("event time must be >= 0")


@dataclass(frozen=True)
class ScenarioSpec:
    description: str = ""
    initial_lines: tuple[tuple[int, int], ...] | None = None   # None: every configured line
    controller: str = "l1"          # l1 | baseline | type3
    events: tuple[EventSpec, ...] = ()
    horizon: float | None = None
    model: str | None = None        # overrides sim.model_variant

    def __post_init__(self):
        if self.controller not in ("l1", "baseline", "type3"):
            raise ValueError(f"unknown controller kind {self.controller!r}")
        if self.model not in (None, "ideal", "esr"):
            raise ValueError(f"unknown model variant {self.model!r}")
        times = [e.time for e in self.events]
        if times != sorted(times):
            raise ValueError("event times must be non-decreasing")


@dataclass
class ProjectConfig:
    dgus: tuple[DguParams, ...]
    lines: tuple[LineParams, ...] = ()
    nominal: NominalDesign = field(default_factory=NominalDesign)
    synthesis: SynthesisConfig = field(default_factory=SynthesisConfig)
    sim: SimConfig = field(default_factory=SimConfig)
    scenarios: dict[str, ScenarioSpec] = field(default_factory=dict)

    def __post_init__(self):
        ids = [p.id for p in self.dgus]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate DGU id")
        keys = set()
        for ln in self.lines:
            for end in (ln.a, ln.b):
                if end not in ids:
                    raise ValueError(f"line {ln.a}-{ln.b} references unknown DGU {end}")
            if ln.key in keys:
                raise ValueError(f"line {ln.a}-{ln.b} listed twice")
            keys.add(ln.key)
        for name, sc in self.scenarios.items():
            for k in sc.initial_lines or ():
                if line_key(*k) not in keys:
                    raise ValueError(f"scenario {name}: initial line {k} is not configured")
            for ev in sc.events:
                if ev.dgu not in ids:
                    raise ValueError(f"scenario {name}: event references unknown DGU {ev.dgu}")
                for k in ev.lines:
                    if line_key(*k) not in keys:
                        raise ValueError(f"scenario {name}: line {k} is not configured")

    def dgu(self, i: int) -> DguParams:
        for p in self.dgus:
            if p.id == i:
                return p
        raise KeyError(i)

    def line(self, key: tuple[int, int]) -> LineParams:
        k = line_key(*key)
        for ln in self.lines:
            if ln.key == k:
                return ln
        raise KeyError(key)


# --- generic dataclass <-> plain data ------------------------------------------

def _hints(cls) -> dict[str, Any]:
    return typing.get_type_hints(cls)


def _convert(tp, value, path: str, marks: dict):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin in (Union, types.UnionType):
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        errors = []
        for a in inner:
            try:
                return _convert(a, value, path, marks)
            except ConfigError as exc:
                errors.append(exc)
        raise errors[0]
    if dataclasses.is_dataclass(tp):
        return _build(tp, value, path, marks)
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            _fail(path, marks, f"expected a list, got {type(value).__name__}")
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_convert(args[0], v, f"{path}[{k}]", marks) for k, v in enumerate(value))
        if len(value) != len(args):
            _fail(path, marks, f"expected {len(args)} entries, got {len(value)}")
        return tuple(_convert(a, v, f"{path}[{k}]", marks) for k, (a, v) in enumerate(zip(args, value)))
    if origin is dict:
        if not isinstance(value, dict):
            _fail(path, marks, f"expected a mapping, got {type(value).__name__}")
        return {_convert(args[0], k, f"{path}.{k}", marks): _convert(args[1], v, f"{path}.{k}", marks)
                for k, v in value.items()}
    if tp is bool:
        if not isinstance(value, bool):
            _fail(path, marks, f"expected true/false, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, (int, str)):
            _fail(path, marks, f"expected an integer, got {value!r}")
        try:
            return int(value)
        except ValueError:
            _fail(path, marks, f"expected an integer, got {value!r}")
    if tp is float:
        if isinstance(value, bool):
            _fail(path, marks, f"expected a number, got {value!r}")
        try:
            return float(value)
        except (TypeError, ValueError):
            _fail(path, marks, f"expected a number, got {value!r}")
    if tp is str:
        if not isinstance(value, str):
            _fail(path, marks, f"expected a string, got {value!r}")
        return value
    raise TypeError(f"unsupported config type {tp!r}")


def _build(cls, data, path: str, marks: dict):
    if not isinstance(data, dict):
        _fail(path, marks, f"expected a mapping, got {type(data).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls) if f.init}
    unknown = sorted(set(data) - set(fields), key=str)
    if unknown:
        _fail(f"{path}.{unknown[0]}" if path else str(unknown[0]), marks,
              f"unknown key (allowed: {', '.join(fields)})")
    hints = _hints(cls)
    kwargs = {}
    for name, f in fields.items():
        sub = f"{path}.{name}" if path else name
        if name in data:
            kwargs[name] = _convert(hints[name], data[name], sub, marks)
        elif f.default is dataclasses.MISSING and f.default_factory is dataclasses.MISSING:
            _fail(sub, marks, "required key missing")
    try:
        return cls(**kwargs)
    except (ValueError, TypeError) as exc:
        _fail(path or "<root>", marks, str(exc))


def _fail(path: str, marks: dict, msg: str):
    line, up = marks.get(path), path
    while line is None and "." in up:
        # absent keys have no position; report the enclosing mapping's line
        up = up.rsplit(".", 1)[0]
        line = marks.get(up)
    where = f" (line {line})" if line is not None else ""
    raise ConfigError(f"{path}{where}: {msg}")


def to_plain(obj):
    """Dataclasses to nested dicts and lists; defaults are kept so files are explicit."""
    if dataclasses.is_dataclass(obj):
        return {f.name: to_plain(getattr(obj, f.name)) for f in dataclasses.fields(obj) if f.init}
    if isinstance(obj, (list, tuple)):
        return [to_plain(v) for v in obj]
    if isinstance(obj, dict):
        return {k: to_plain(v) for k, v in obj.items()}
    return obj


# --- YAML with source positions ------------------------------------------------

def _node_to_data(node, path: str, marks: dict):
    marks[path] = node.start_mark.line + 1
    if isinstance(node, yaml.MappingNode):
        out = {}
        for k, v in node.value:
            key = _scalar(k)
            sub = f"{path}.{key}" if path else str(key)
            if key in out:
                _fail(sub, marks, "duplicate key")
            marks[sub] = k.start_mark.line + 1
            out[key] = _node_to_data(v, sub, marks)
        return out
    if isinstance(node, yaml.SequenceNode):
        return [_node_to_data(v, f"{path}[{k}]", marks) for k, v in enumerate(node.value)]
    return _scalar(node)


def _scalar(node):
    loader = yaml.SafeLoader("")
    try:
        return loader.construct_object(node, deep=True)
    finally:
        loader.dispose()


def loads(text: str) -> ProjectConfig:
    try:
        root = yaml.compose(text, Loader=yaml.SafeLoader)
    except yaml.YAMLError as exc:
        raise ConfigError(f"YAML syntax error: {exc}") from None
    if root is None:
        raise ConfigError("empty configuration")
    marks: dict[str, int] = {}
    data = _node_to_data(root, "", marks)
    return _build(ProjectConfig, data, "", marks)


def dumps(cfg: ProjectConfig) -> str:
    return yaml.safe_dump(to_plain(cfg), sort_keys=False, default_flow_style=None, width=100)


def load(path: str | Path) -> ProjectConfig:
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read {p}: {exc.strerror}") from None
    return loads(text)


BUNDLED = ("table1", "table2", "esr")


def bundled_path(name: str) -> Path:
    if name not in BUNDLED:
        raise ConfigError(f"no bundled config {name!r}; choose from {', '.join(BUNDLED)}")
    return Path(str(resources.files("l1dcgrid") / "configs" / f"{name}.yaml"))


def resolve(spec: str | Path) -> ProjectConfig:
    """Load a config file, or a bundled one when ``spec`` names it."""
    if isinstance(spec, str) and spec in BUNDLED and not Path(spec).exists():
        return load(bundled_path(spec))
    return load(spec)
