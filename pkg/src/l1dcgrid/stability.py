"""Global eigenvalue checks and the decomposed Lyapunov test for a grid of
locally controlled DGUs."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .model import (Topology, assemble_global, build_augmented, build_decoupled_nominal,
                    build_small_signal, compute_operating_point)
from .synthesis import GainVector, PredictorDesign, SynthesisError, closed_loop, solve_lyapunov

VARIANTS = ("decoupled", "coupled-baseline", "l1-converged")
HURWITZ_TOL = -1e-9


class StabilityError(ValueError):
    pass


@dataclass(frozen=True)
class LyapunovTerms:
    norm_a: float            # spectral norm of A_D^T P + P A_D
    norm_b: float            # spectral norm of A_C^T P + P A_C
    max_eig_sum: float       # largest eigenvalue of (a) + (b)
    asymmetry: float

    @property
    def negative_definite(self) -> bool:
        scale = max(self.norm_a, self.norm_b, 1.0)
        return self.max_eig_sum < -1e-9 * scale


@dataclass
class StabilityReport:
    variant: str
    eigenvalues: np.ndarray
    lyap: LyapunovTerms | None = None
    line_modes: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def max_real(self) -> float:
        return float(self.eigenvalues.real.max())

    @property
    def hurwitz(self) -> bool:
        return self.max_real < HURWITZ_TOL

    def summary(self) -> str:
        out = [f"variant: {self.variant}",
               f"states: {len(self.eigenvalues)}",
               f"max Re(eig): {self.max_real:.6g}",
               f"hurwitz: {'yes' if self.hurwitz else 'no'}"]
        if self.lyap is not None:
            ly = self.lyap
            out += [f"||(a)||_2: {ly.norm_a:.6g}", f"||(b)||_2: {ly.norm_b:.6g}",
                    f"max eig((a)+(b)): {ly.max_eig_sum:.6g}",
                    f"decomposed condition: {'holds' if ly.negative_definite else 'fails'}"]
        return "\n".join(out) + "\n"


def converged_block(pd: PredictorDesign, A_cl: np.ndarray) -> np.ndarray:
    """Closed loop after the matched mismatch is cancelled.

    In the predictor's canonical coordinates the input enters only the last
    row, so the adaptive loop can at best replace that row with the desired
    one; the remaining rows keep whatever the plant has there.
    """
    w = pd.time_scale
    Z = pd.T @ (A_cl / w) @ pd.T_inv
    Z[2] = pd.A_m_cc[2]
    return pd.T_inv @ Z @ pd.T * w


def _coupling_part(topology: Topology, index: Mapping[int, int], n: int, size: int) -> np.ndarray:
    """Every line-dependent entry of the global matrix: the conductance terms on
    the diagonal and the neighbour voltage terms off it."""
    A_C = np.zeros((size, size))
    for (a, b), ln in topology.lines.items():
        for i, j in ((a, b), (b, a)):
            C = topology.dgus[i].C_t
            A_C[index[i] + 1, index[i] + 1] -= 1.0 / (ln.R * C)
            A_C[index[i] + 1, index[j] + 1] += 1.0 / (ln.R * C)
    return A_C


def global_matrix(topology: Topology, gains: Mapping[int, GainVector], variant: str,
                  predictors: Mapping[int, PredictorDesign] | None = None,
                  dynamic_lines: bool = False):
    """Assembled global closed loop for one of the analysis variants."""
    if variant not in VARIANTS:
        raise StabilityError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    ids = topology.ids
    missing = [i for i in ids if i not in gains]
    if missing:
        raise StabilityError(f"no gains for DGU(s) {missing}")
    if variant == "l1-converged" and (predictors is None or any(i not in predictors for i in ids)):
        raise StabilityError("the l1-converged variant needs a predictor for every DGU")
    diagonal, coupling = {}, {}
    for i in ids:
        p = topology.dgus[i]
        op = compute_operating_point(p)
        K = gains[i]
        if K.array.shape != (3,):
            raise StabilityError(f"gain vector of DGU {i} has wrong dimension")
        if variant == "decoupled":
            diagonal[i] = closed_loop(build_augmented(build_decoupled_nominal(p, op)), K)
            continue
        m = build_augmented(build_small_signal(p, op, topology.incident(i)))
        A_cl = closed_loop(m, K)
        diagonal[i] = converged_block(predictors[i], A_cl) if variant == "l1-converged" else A_cl
        coupling[i] = m.A_bar_ij
    if variant == "decoupled":
        isolated = Topology([topology.dgus[i] for i in ids], [])
        return assemble_global(isolated, diagonal, {}), isolated
    return assemble_global(topology, diagonal, coupling, dynamic_lines=dynamic_lines), topology


def lyapunov_terms(A: np.ndarray, A_C: np.ndarray, block: int, Q: np.ndarray | None = None) -> LyapunovTerms:
    """Terms (a) and (b) with ``P = blockdiag(P_i)`` solved on the local parts ``A - A_C``."""
    A_D = A - A_C
    N = A.shape[0]
    if N % block:
        raise StabilityError("matrix size is not a multiple of the block size")
    Q = np.eye(block) if Q is None else np.asarray(Q, float)
    if Q.shape != (block, block):
        raise StabilityError("Q has the wrong dimension")
    P = np.zeros((N, N))
    for k in range(0, N, block):
        P[k:k + block, k:k + block] = solve_lyapunov(A_D[k:k + block, k:k + block], Q)
    a = A_D.T @ P + P @ A_D
    b = A_C.T @ P + P @ A_C
    asym = max(np.abs(a - a.T).max(), np.abs(b - b.T).max())
    a, b = 0.5 * (a + a.T), 0.5 * (b + b.T)
    return LyapunovTerms(float(np.linalg.norm(a, 2)), float(np.linalg.norm(b, 2)),
                         float(np.linalg.eigvalsh(a + b).max()), float(asym))


def analyze(topology: Topology, gains: Mapping[int, GainVector], variant: str,
            predictors: Mapping[int, PredictorDesign] | None = None,
            dynamic_lines: bool = False, lyapunov: bool = True) -> StabilityReport:
    gm, top = global_matrix(topology, gains, variant, predictors, dynamic_lines)
    ev = np.linalg.eigvals(gm.A)
    n_dgu = gm.block * len(top.ids)
    line_modes = np.array([-ln.R / ln.L for _, ln in sorted(top.lines.items())]) if dynamic_lines else np.zeros(0)
    lyap = None
    if lyapunov:
        A = gm.A[:n_dgu, :n_dgu]
        A_C = _coupling_part(top, gm.index, gm.block, n_dgu)
        try:
            lyap = lyapunov_terms(A, A_C, gm.block)
        except SynthesisError:
            lyap = None   # local parts not Hurwitz: no decomposition exists
    return StabilityReport(variant, ev, lyap, line_modes)


@dataclass(frozen=True)
class GainCheck:
    label: str
    terms: LyapunovTerms

    @property
    def passed(self) -> bool:
        return self.terms.negative_definite

    @property
    def margin(self) -> float:
        return -self.terms.max_eig_sum


def iterative_gain_check(topology: Topology, candidates: Sequence[tuple[str, Mapping[int, GainVector]]],
                         Q: np.ndarray | None = None) -> list[GainCheck]:
    """Decomposed Lyapunov test for each candidate gain set.

    Passing candidates come first, largest margin first; failing ones follow
    in input order.  A candidate whose local parts are not Hurwitz fails with
    an infinite ``max_eig_sum``.
    """
    if not candidates:
        raise StabilityError("no candidate gain sets")
    rows = []
    for label, gains in candidates:
        gm, top = global_matrix(topology, gains, "coupled-baseline")
        A_C = _coupling_part(top, gm.index, gm.block, gm.A.shape[0])
        try:
            terms = lyapunov_terms(gm.A, A_C, gm.block, Q)
        except SynthesisError:
            terms = LyapunovTerms(float("nan"), float("nan"), float("inf"), 0.0)
        rows.append(GainCheck(label, terms))
    passed = sorted((r for r in rows if r.passed), key=lambda r: -r.margin)
    return passed + [r for r in rows if not r.passed]


def gain_check_table(rows: Iterable[GainCheck]) -> str:
    out = [f"{'candidate':<20} {'||(a)||':>12} {'||(b)||':>12} {'max eig':>12} result"]
    for r in rows:
        t = r.terms
        out.append(f"{r.label:<20} {t.norm_a:12.5g} {t.norm_b:12.5g} {t.max_eig_sum:12.5g} "
                   f"{'pass' if r.passed else 'fail'}")
    return "\n".join(out) + "\n"


def eigenvalue_csv(reports: Iterable[StabilityReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["re", "im", "variant"])
    for r in reports:
        for z in sorted(r.eigenvalues, key=lambda z: (z.real, z.imag)):
            w.writerow([f"{z.real:.12g}", f"{z.imag:.12g}", r.variant])
    return buf.getvalue()
