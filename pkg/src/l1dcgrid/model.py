"""Electrical models of boost-converter DGUs coupled by RL power lines.

State vectors follow the convention ``x_i = [I_t, V_dc]`` per DGU.  All
quantities are SI.  Small-signal matrices are built around the lossless
boost operating point; the nonlinear averaged dynamics are exact.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping

import numpy as np

# load current is clamped below this PCC voltage (constant-power load blows up at 0 V)
V_CLAMP = 1.0


class TopologyError(ValueError):
    """Invalid line/DGU reference in a topology operation."""


@dataclass(frozen=True)
class DguParams:
    id: int
    P_rated: float
    P_load: float
    V_in: float
    V_ref: float
    f_s: float
    L_t: float
    C_t: float
    R_t: float
    R_c: float = 0.0

    def __post_init__(self):
        for name in ("P_rated", "P_load", "V_in", "V_ref", "f_s", "L_t", "C_t", "R_t"):
            if not getattr(self, name) > 0:
                raise ValueError(f"DGU {self.id}: {name} must be > 0, got {getattr(self, name)}")
        if self.R_c < 0:
            raise ValueError(f"DGU {self.id}: R_c must be >= 0, got {self.R_c}")
        if not self.V_ref > self.V_in:
            raise ValueError(
                f"DGU {self.id}: V_ref={self.V_ref} must exceed V_in={self.V_in} for boost operation")
        if self.P_load > self.P_rated:
            raise ValueError(f"DGU {self.id}: P_load={self.P_load} exceeds P_rated={self.P_rated}")

    @property
    def R_load(self) -> float:
        """Nominal resistive equivalent of the local load at V_ref."""
        return self.V_ref ** 2 / self.P_load


def line_key(a: int, b: int) -> tuple[int, int]:
    return (a, b) if a < b else (b, a)


@dataclass(frozen=True)
class LineParams:
    a: int
    b: int
    R: float
    L: float

    def __post_init__(self):
        if self.a == self.b:
            raise ValueError(f"line endpoints must differ, got {self.a}-{self.b}")
        if not (self.R > 0 and self.L > 0):
            raise ValueError(f"line {self.a}-{self.b}: R and L must be > 0")

    @property
    def key(self) -> tuple[int, int]:
        return line_key(self.a, self.b)

    def other(self, i: int) -> int:
        if i == self.a:
            return self.b
        if i == self.b:
            return self.a
        raise TopologyError(f"DGU {i} is not an endpoint of line {self.a}-{self.b}")


class Topology:
    """DGUs plus the set of currently connected lines.

    Lines are stored under their unordered key, so ``(i, j)`` and ``(j, i)``
    refer to the same physical line.  DGUs with no lines still exist and
    feed only their local load.
    """

    def __init__(self, dgus: Iterable[DguParams], lines: Iterable[LineParams] = ()):
        self.dgus: dict[int, DguParams] = {}
        for p in dgus:
            if p.id in self.dgus:
                raise TopologyError(f"duplicate DGU id {p.id}")
            self.dgus[p.id] = p
        self.lines: dict[tuple[int, int], LineParams] = {}
        for ln in lines:
            self.add_line(ln)

    @property
    def ids(self) -> list[int]:
        return sorted(self.dgus)

    def add_line(self, line: LineParams) -> None:
        for end in (line.a, line.b):
            if end not in self.dgus:
                raise TopologyError(f"line {line.a}-{line.b} references unknown DGU {end}")
        if line.key in self.lines:
            raise TopologyError(f"line {line.a}-{line.b} is already connected")
        self.lines[line.key] = line

    def remove_line(self, a: int, b: int) -> LineParams:
        key = line_key(a, b)
        if key not in self.lines:
            raise TopologyError(f"line {a}-{b} is not connected")
        return self.lines.pop(key)

    def incident(self, i: int) -> list[LineParams]:
        return [ln for k, ln in sorted(self.lines.items()) if i in k]

    def neighbors(self, i: int) -> list[int]:
        return [ln.other(i) for ln in self.incident(i)]

    def connected(self, i: int) -> bool:
        return any(i in k for k in self.lines)

    def conductance_sum(self, i: int) -> float:
        return sum(1.0 / ln.R for ln in self.incident(i))

    def replace_dgu(self, p: DguParams) -> None:
        if p.id not in self.dgus:
            raise TopologyError(f"unknown DGU {p.id}")
        self.dgus[p.id] = p

    def copy(self) -> "Topology":
        return Topology(self.dgus.values(), self.lines.values())

    def __eq__(self, other):
        if not isinstance(other, Topology):
            return NotImplemented
        return self.dgus == other.dgus and self.lines == other.lines

    def __repr__(self):
        return f"Topology(dgus={self.ids}, lines={sorted(self.lines)})"


@dataclass(frozen=True)
class OperatingPoint:
    D: float
    V_dc_bar: float
    I_t_bar: float


def compute_operating_point(p: DguParams, export_current: float = 0.0) -> OperatingPoint:
    """Lossless boost operating point at ``V_dc = V_ref``.

    ``export_current`` is the steady current leaving the PCC through lines
    (zero for a standalone DGU, which reproduces the tabulated duty cycles).
    """
    if p.V_ref <= p.V_in:
        raise ValueError(f"DGU {p.id}: duty cycle outside (0, 1) for V_ref={p.V_ref}, V_in={p.V_in}")
    D = 1.0 - p.V_in / p.V_ref
    I_t = (p.V_in / ((1.0 - D) ** 2 * p.R_load)) + export_current / (1.0 - D)
    return OperatingPoint(D=D, V_dc_bar=p.V_in / (1.0 - D), I_t_bar=I_t)


def lossy_equilibrium(p: DguParams, out_current: float) -> tuple[float, float]:
    """Exact averaged-model equilibrium ``(d, I_t)`` delivering ``out_current`` at V_ref.

    Solves ``R_t I^2 - V_in I + out_current V_ref = 0`` (small root), i.e.
    the inductor loop including the parasitic drop.
    """
    disc = p.V_in ** 2 - 4.0 * p.R_t * out_current * p.V_ref
    if disc < 0:
        raise ValueError(f"DGU {p.id}: no equilibrium delivering {out_current:.3f} A at {p.V_ref} V")
    I = (p.V_in - np.sqrt(disc)) / (2.0 * p.R_t)
    return 1.0 - out_current / I, I


def qsl_line_current(v_i: float, v_j: float, R_ij: float) -> float:
    """Current flowing from DGU j into DGU i under the quasi-stationary line approximation."""
    if not R_ij > 0:
        raise ValueError("line resistance must be > 0")
    return (v_j - v_i) / R_ij


@dataclass
class SmallSignalModel:
    dgu: int
    A_ii: np.ndarray
    A_ij: dict[int, np.ndarray]
    B: np.ndarray
    E: np.ndarray
    C: np.ndarray = field(default_factory=lambda: np.array([[0.0, 1.0]]))


def _line_resistances(lines: Iterable[LineParams], i: int) -> dict[int, float]:
    return {ln.other(i): ln.R for ln in lines}


def build_small_signal(p: DguParams, op: OperatingPoint, lines: Iterable[LineParams] = ()) -> SmallSignalModel:
    """Coupled QSL small-signal model of one DGU; loads enter only through ``E``."""
    nbrs = _line_resistances(lines, p.id)
    g = sum(1.0 / r for r in nbrs.values())
    A = np.array([
        [-p.R_t / p.L_t, -(1.0 - op.D) / p.L_t],
        [(1.0 - op.D) / p.C_t, -g / p.C_t],
    ])
    A_ij = {j: np.array([[0.0, 0.0], [0.0, 1.0 / (r * p.C_t)]]) for j, r in nbrs.items()}
    B = np.array([[op.V_dc_bar / p.L_t], [-op.I_t_bar / p.C_t]])
    E = np.array([[0.0], [-1.0 / p.C_t]])
    return SmallSignalModel(p.id, A, A_ij, B, E)


def build_decoupled_nominal(p: DguParams, op: OperatingPoint) -> SmallSignalModel:
    """Standalone DGU feeding its load as a linear resistance (baseline design model)."""
    m = build_small_signal(p, op)
    m.A_ii[1, 1] = -1.0 / (p.R_load * p.C_t)
    return m


def build_esr_small_signal(p: DguParams, op: OperatingPoint, lines: Iterable[LineParams] = (),
                           line_current: float = 0.0, load_current: float | None = None) -> SmallSignalModel:
    """Small-signal model including the output-capacitor ESR ``R_c``.

    ``line_current`` is the steady net current into the PCC from lines and
    ``load_current`` the steady load current (defaults to ``P_load/V_dc``);
    both only enter the duty-cycle input column.
    """
    nbrs = _line_resistances(lines, p.id)
    g = sum(1.0 / r for r in nbrs.values())
    d_off = 1.0 - op.D
    Rc = p.R_c
    if load_current is None:
        load_current = p.P_load / op.V_dc_bar
    # Rc*(1/R) is dimensionless; zero Rc must reproduce build_small_signal bit-for-bit
    A = np.array([
        [-(p.R_t + d_off * Rc) / p.L_t, -d_off / p.L_t * (1.0 - Rc * g)],
        [d_off / p.C_t, -g / p.C_t],
    ])
    A_ij = {j: np.array([[0.0, -d_off * Rc / (r * p.L_t)], [0.0, 1.0 / (r * p.C_t)]])
            for j, r in nbrs.items()}
    cap_current = op.I_t_bar + line_current - load_current
    B = np.array([[(op.V_dc_bar + Rc * cap_current) / p.L_t], [-op.I_t_bar / p.C_t]])
    E = np.array([[d_off * Rc / p.L_t], [-1.0 / p.C_t]])
    return SmallSignalModel(p.id, A, A_ij, B, E)


def esr_switching_matrices(p: DguParams, lines: Iterable[LineParams] = ()) -> dict[str, dict[str, np.ndarray]]:
    """On-state and off-state linear models with ESR (input column is V_in).

    Returned as ``{"on": {...}, "off": {...}}`` with keys ``A``, ``B``, ``E`` and
    ``A_ij`` (summed coupling matrix per unit neighbour-voltage, keyed by id).
    """
    nbrs = _line_resistances(lines, p.id)
    g = sum(1.0 / r for r in nbrs.values())
    Rc, L, C = p.R_c, p.L_t, p.C_t
    on = {
        "A": np.array([[-p.R_t / L, 0.0], [0.0, -g / C]]),
        "B": np.array([[1.0 / L], [0.0]]),
        "E": np.array([[0.0], [-1.0 / C]]),
        "A_ij": {j: np.array([[0.0, 0.0], [0.0, 1.0 / (r * C)]]) for j, r in nbrs.items()},
    }
    off = {
        "A": np.array([[-(p.R_t + Rc) / L, -(1.0 - Rc * g) / L], [1.0 / C, -g / C]]),
        "B": np.array([[1.0 / L], [0.0]]),
        "E": np.array([[Rc / L], [-1.0 / C]]),
        "A_ij": {j: np.array([[0.0, -Rc / (r * L)], [0.0, 1.0 / (r * C)]]) for j, r in nbrs.items()},
    }
    return {"on": on, "off": off}


def esr_averaged_matrices(p: DguParams, d: float, lines: Iterable[LineParams] = ()) -> dict[str, np.ndarray]:
    """State-space-averaged ESR model at duty ``d`` (input column is V_in)."""
    nbrs = _line_resistances(lines, p.id)
    g = sum(1.0 / r for r in nbrs.values())
    Rc, L, C = p.R_c, p.L_t, p.C_t
    return {
        "A": np.array([[-(p.R_t + (1 - d) * Rc) / L, -(1 - d) * (1.0 - Rc * g) / L],
                       [(1 - d) / C, -g / C]]),
        "B": np.array([[1.0 / L], [0.0]]),
        "E": np.array([[(1 - d) * Rc / L], [-1.0 / C]]),
        "A_ij": {j: np.array([[0.0, -(1 - d) * Rc / (r * L)], [0.0, 1.0 / (r * C)]]) for j, r in nbrs.items()},
    }


@dataclass
class AugmentedModel:
    dgu: int
    A_bar: np.ndarray
    B_bar: np.ndarray
    E_bar: np.ndarray
    A_bar_ij: dict[int, np.ndarray]
    C_bar: np.ndarray


def build_augmented(m: SmallSignalModel) -> AugmentedModel:
    """Append the integral of the voltage tracking error as a third state."""
    A = np.zeros((3, 3))
    A[:2, :2] = m.A_ii
    A[2, :2] = -m.C[0]
    B = np.vstack([m.B, [[0.0]]])
    E = np.zeros((3, 2))
    E[:2, :1] = m.E
    E[2, 1] = 1.0
    A_ij = {}
    for j, a in m.A_ij.items():
        blk = np.zeros((3, 3))
        blk[:2, :2] = a
        A_ij[j] = blk
    C = np.array([[0.0, 1.0, 0.0]])
    return AugmentedModel(m.dgu, A, B, E, A_ij, C)


@dataclass
class GlobalModel:
    A: np.ndarray
    B: np.ndarray
    E: np.ndarray
    C: np.ndarray
    index: dict[int, int]
    block: int
    line_index: dict[tuple[int, int], int] = field(default_factory=dict)

    def block_of(self, i: int, j: int) -> np.ndarray:
        a, b, n = self.index[i], self.index[j], self.block
        return self.A[a:a + n, b:b + n]


def _block_diag(blocks: list[np.ndarray]) -> np.ndarray:
    rows = sum(b.shape[0] for b in blocks)
    cols = sum(b.shape[1] for b in blocks)
    out = np.zeros((rows, cols))
    r = c = 0
    for b in blocks:
        out[r:r + b.shape[0], c:c + b.shape[1]] = b
        r += b.shape[0]
        c += b.shape[1]
    return out


def assemble_global(topology: Topology, diagonal: Mapping[int, np.ndarray],
                    coupling: Mapping[int, Mapping[int, np.ndarray]],
                    B: Mapping[int, np.ndarray] | None = None,
                    E: Mapping[int, np.ndarray] | None = None,
                    C: Mapping[int, np.ndarray] | None = None,
                    dynamic_lines: bool = False) -> GlobalModel:
    """Stack per-DGU blocks into the block matrix of the whole grid.

    ``diagonal[i]`` is DGU i's own block (open-loop, baseline closed-loop or
    desired predictor dynamics; the caller decides).  ``coupling[i][j]`` is
    inserted at block (i, j) for each connected line.  With
    ``dynamic_lines`` the line-current states are appended below in the
    block lower-triangular arrangement where DGU rows keep their QSL
    coupling and each line row is driven by its terminal voltages.
    """
    ids = topology.ids
    for i in list(diagonal) + list(coupling):
        if i not in topology.dgus:
            raise TopologyError(f"block supplied for unknown DGU {i}")
    missing = [i for i in ids if i not in diagonal]
    if missing:
        raise TopologyError(f"no diagonal block for DGU(s) {missing}")
    n = diagonal[ids[0]].shape[0]
    index = {i: k * n for k, i in enumerate(ids)}
    N = n * len(ids)
    A = np.zeros((N, N))
    for i in ids:
        A[index[i]:index[i] + n, index[i]:index[i] + n] = diagonal[i]
    for (a, b) in sorted(topology.lines):
        for i, j in ((a, b), (b, a)):
            blk = coupling.get(i, {}).get(j)
            if blk is None:
                raise TopologyError(f"no coupling block for line {i}-{j}")
            A[index[i]:index[i] + n, index[j]:index[j] + n] = blk

    def diag_of(m, default_cols):
        if m is None:
            return np.zeros((N, default_cols * len(ids)))
        return _block_diag([m[i] for i in ids])

    Bg, Eg = diag_of(B, 1), diag_of(E, 1)
    Cg = diag_of(C, 1) if C is not None else np.zeros((len(ids), N))
    line_index = {}
    if dynamic_lines:
        keys = sorted(topology.lines)
        nl = len(keys)
        big = np.zeros((N + nl, N + nl))
        big[:N, :N] = A
        volt = 1 if n >= 2 else 0
        for k, key in enumerate(keys):
            ln = topology.lines[key]
            r = N + k
            line_index[key] = r
            # L di_ab/dt = V_b - V_a - R i_ab  (current from b into a)
            big[r, index[key[0]] + volt] = -1.0 / ln.L
            big[r, index[key[1]] + volt] = 1.0 / ln.L
            big[r, r] = -ln.R / ln.L
        A = big
        Bg = np.vstack([Bg, np.zeros((nl, Bg.shape[1]))])
        Eg = np.vstack([Eg, np.zeros((nl, Eg.shape[1]))])
        Cg = np.hstack([Cg, np.zeros((Cg.shape[0], nl))])
    return GlobalModel(A, Bg, Eg, Cg, index, n, line_index)


# --- nonlinear averaged dynamics -------------------------------------------

class NetworkArrays:
    """Dense arrays describing a topology, for fast derivative evaluation."""

    def __init__(self, topology: Topology):
        self.ids = topology.ids
        pos = {i: k for k, i in enumerate(self.ids)}
        self.pos = pos
        dg = [topology.dgus[i] for i in self.ids]
        self.V_in = np.array([p.V_in for p in dg])
        self.L = np.array([p.L_t for p in dg])
        self.C = np.array([p.C_t for p in dg])
        self.R = np.array([p.R_t for p in dg])
        self.Rc = np.array([p.R_c for p in dg])
        self.keys = sorted(topology.lines)
        ln = [topology.lines[k] for k in self.keys]
        self.line_a = np.array([pos[k[0]] for k in self.keys], dtype=int)
        self.line_b = np.array([pos[k[1]] for k in self.keys], dtype=int)
        self.line_R = np.array([l.R for l in ln])
        self.line_L = np.array([l.L for l in ln])
        n, m = len(self.ids), len(self.keys)
        # incidence: current i_ab (from b into a) adds to node a, subtracts from b
        self.inc = np.zeros((n, m))
        self.inc[self.line_a, np.arange(m)] = 1.0
        self.inc[self.line_b, np.arange(m)] = -1.0
        self.lap = self.inc @ np.diag(1.0 / self.line_R) @ self.inc.T if m else np.zeros((n, n))

    @property
    def n(self) -> int:
        return len(self.ids)

    @property
    def m(self) -> int:
        return len(self.keys)

    def qsl_currents(self, V: np.ndarray) -> np.ndarray:
        """Line currents i_ab = (V_b - V_a)/R for each stored line key (a, b)."""
        return (V[self.line_b] - V[self.line_a]) / self.line_R


def load_currents(P_load: np.ndarray, V: np.ndarray, model: str = "constant_power") -> tuple[np.ndarray, np.ndarray]:
    """Load currents and a clamp flag per DGU.

    Constant-power loads draw ``P/V``; below ``V_CLAMP`` the current is held
    at ``P/V_CLAMP``.  ``model="resistive"`` uses ``V/R_L`` with R_L fixed by the
    caller through ``P_load`` interpreted as ``V_ref**2/R_L`` at call time.
    """
    if model == "constant_power":
        clamped = V < V_CLAMP
        return P_load / np.where(clamped, V_CLAMP, V), clamped
    if model == "resistive":
        return P_load, np.zeros_like(V, dtype=bool)
    raise ValueError(f"unknown load model {model!r}")


def nonlinear_derivative(net: NetworkArrays, x: np.ndarray, duty: np.ndarray, I_load: np.ndarray,
                         dynamic_lines: bool = False) -> np.ndarray:
    """Averaged large-signal derivative of the whole grid.

    ``x`` stacks ``[I_t (n), V_dc (n)]`` followed, with ``dynamic_lines``, by
    one current per line key ``(a, b)`` flowing from b into a.  ``I_load`` is
    the load current per DGU (the caller picks the load model).  With a
    nonzero ESR the inductor loop sees the capacitor current through R_c.
    """
    n = net.n
    I = x[:n]
    V = x[n:2 * n]
    if np.any(V <= 0):
        raise FloatingPointError("PCC voltage must stay positive in the averaged model")
    if dynamic_lines:
        i_line = x[2 * n:]
    else:
        i_line = net.qsl_currents(V)
    I_net = net.inc @ i_line if net.m else np.zeros(n)
    off = 1.0 - duty
    I_cap = I + I_net - I_load
    dI = (net.V_in - net.R * I - off * (V + net.Rc * I_cap)) / net.L
    dV = (off * I + I_net - I_load) / net.C
    if not dynamic_lines:
        return np.concatenate([dI, dV])
    dl = (V[net.line_b] - net.line_R * i_line - V[net.line_a]) / net.line_L
    return np.concatenate([dI, dV, dl])
