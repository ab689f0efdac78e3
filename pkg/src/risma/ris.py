"""Reflection-phase design: worst-case covariance-form rates, SCA, SDR.

Per inner iteration the lifted reflection matrix V (Hermitian, unit
diagonal, PSD) maximises the sum of private-rate slacks subject to
linearised rate rows.  The difference-of-logs rate expressions are handled
with a first-order Taylor majorant of the subtracted concave term
(``fta_private`` / ``fta_common``) plus a piecewise-linear secant minorant
of the kept log (same device as the precoding stage), so every inner
problem is a genuine SDP.  Unit-modulus solutions are recovered by
projection of Gaussian draws from the lifted matrix.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import precoding as pc
from . import rates as rt
from .channel import ChannelRealization
from .conic import HermitianVariable, SDPProblem, solve
from .linalg import InvariantViolation
from .precoding import RATE_CAP, StageInfeasible, usable_result

LN2 = float(np.log(2.0))


@dataclass
class RISConfiguration:
    """Unit-modulus reflection vector and its lifted matrix."""

    phases: np.ndarray
    feasible: bool = True

    def __post_init__(self):
        self.phases = np.mod(np.asarray(self.phases, dtype=float), 2 * np.pi)

    @property
    def v(self) -> np.ndarray:
        return np.exp(1j * self.phases)

    @property
    def lifted(self) -> np.ndarray:
        v = self.v
        return np.outer(v, v.conj())

    @staticmethod
    def from_vector(v: np.ndarray, feasible: bool = True) -> "RISConfiguration":
        v = np.asarray(v, dtype=complex)
        mags = np.abs(v)
        if np.any(mags < 1e-15):
            raise InvariantViolation("reflection coefficients must be nonzero")
        return RISConfiguration(phases=np.angle(v), feasible=feasible)


@dataclass
class RISStageState:
    """SCA anchor and cached per-user rate matrices (precoders fixed)."""

    anchor: np.ndarray
    mats: list = field(default_factory=list)
    objective: float = -np.inf
    solve_ms: list = field(default_factory=list)


@dataclass
class AffineInV:
    """Real affine functional of a Hermitian matrix: const + Re tr(coeff V)."""

    const: float
    coeff: np.ndarray

    def value(self, v_mat: np.ndarray) -> float:
        return self.const + float(np.real(np.sum(self.coeff * v_mat.T)))


def assemble_rate_matrices(realization: ChannelRealization, positions: np.ndarray,
                           sol: rt.PrecodingSolution):
    """Per-user quadratic-form matrices of the reflection-lifted rates."""
    return rt.rate_matrices(realization, positions, sol)


def fta_private(anchor: np.ndarray, w2: np.ndarray, tr_s2: float, rho_hat: float,
                sigma2: float) -> AffineInV:
    """Tangent majorant of V -> log2(tr(V W2) + rho^2 tr_S2 + sigma2) at anchor."""
    den0 = float(np.real(np.sum(w2 * anchor.T))) + rho_hat ** 2 * tr_s2 + sigma2
    if den0 <= 0:
        raise InvariantViolation("log argument nonpositive at the anchor")
    const = np.log2(den0) - float(np.real(np.sum(w2 * anchor.T))) / (den0 * LN2)
    return AffineInV(const=const, coeff=w2 / (den0 * LN2))


def fta_common(anchor: np.ndarray, u2: np.ndarray, tr_s1: float, rho_hat: float,
               sigma2: float) -> AffineInV:
    """Tangent majorant of the common-stream denominator log at the anchor."""
    return fta_private(anchor, u2, tr_s1, rho_hat, sigma2)


def _assemble_p6(realization: ChannelRealization, mats, state: RISStageState,
                 r_min: float):
    """One inner-iteration SDP of the reflection stage (normalised units)."""
    cfg = realization.config
    n_el, m_users = cfg.N, cfg.M
    sig2 = cfg.sigma2
    rho2 = (realization.rho_hat ** 2) / sig2

    idx_rc = np.arange(0, m_users)
    idx_w = np.arange(m_users, 2 * m_users)
    idx_a = np.arange(2 * m_users, 3 * m_users)
    idx_b = np.arange(3 * m_users, 4 * m_users)
    idx_la = np.arange(4 * m_users, 5 * m_users)
    idx_lb = np.arange(5 * m_users, 6 * m_users)
    v_var = HermitianVariable(n_el, 6 * m_users)
    num_vars = 6 * m_users + v_var.num_vars

    # normalised per-user matrices and scalars
    nm = []
    for m in range(m_users):
        d = mats[m]
        nm.append({
            "U1": d["U1"] / sig2, "U2": d["U2"] / sig2,
            "W1": d["W1"] / sig2, "W2": d["W2"] / sig2,
            "tr_Pc": d["tr_Pc"], "tr_Pm": d["tr_Pm"],
            "tr_S1": d["tr_S1"], "tr_S2": d["tr_S2"],
        })

    lower = np.full(num_vars, -np.inf)
    upper = np.full(num_vars, np.inf)
    lower[idx_rc] = 0.0
    upper[idx_rc] = RATE_CAP
    lower[idx_w] = 0.0
    upper[idx_w] = RATE_CAP
    lower[v_var.start:v_var.start + n_el] = 0.0
    upper[v_var.start:v_var.start + n_el] = 1.0
    lower[v_var.start + n_el:num_vars] = -1.0
    upper[v_var.start + n_el:num_vars] = 1.0

    def lam_max(x):
        return float(np.linalg.eigvalsh(x)[-1])

    a_lo = np.empty(m_users)
    a_hi = np.empty(m_users)
    b_lo = np.empty(m_users)
    b_hi = np.empty(m_users)
    for m in range(m_users):
        d = nm[m]
        a_lo[m] = max(1e-6, 0.5 * (1.0 - rho2[m] * d["tr_Pm"]))
        a_hi[m] = n_el * lam_max(d["W1"] + d["W2"]) + rho2[m] * d["tr_S2"] + 1.0 + 1e-6
        b_lo[m] = max(1e-6, 0.5 * (1.0 - rho2[m] * d["tr_Pc"]))
        b_hi[m] = n_el * lam_max(d["U1"] + d["U2"]) + rho2[m] * d["tr_S1"] + 1.0 + 1e-6
    lower[idx_a], upper[idx_a] = a_lo, a_hi
    lower[idx_b], upper[idx_b] = b_lo, b_hi
    lower[idx_la] = np.log2(a_lo) - 1.0
    upper[idx_la] = np.log2(a_hi) + 1.0
    lower[idx_lb] = np.log2(b_lo) - 1.0
    upper[idx_lb] = np.log2(b_hi) + 1.0

    obj = np.zeros(num_vars)
    obj[idx_w] = 1.0

    rows, rhs = [], []

    def add_row(idx, coef, b):
        rows.append((np.asarray(idx, dtype=int), np.asarray(coef, dtype=float)))
        rhs.append(float(b))

    eq_rows, eq_rhs = [], []

    def add_eq(idx, coef, b):
        eq_rows.append((np.asarray(idx, dtype=int), np.asarray(coef, dtype=float)))
        eq_rhs.append(float(b))

    anchor = state.anchor
    for m in range(m_users):
        d = nm[m]
        # a_m and b_m track the full log arguments (affine in V)
        ti, tc = v_var.trace_row(d["W1"] + d["W2"])
        add_eq(np.concatenate([ti, [idx_a[m]]]), np.concatenate([-tc, [1.0]]),
               rho2[m] * (d["tr_S2"] - d["tr_Pm"]) + 1.0)
        ti, tc = v_var.trace_row(d["U1"] + d["U2"])
        add_eq(np.concatenate([ti, [idx_b[m]]]), np.concatenate([-tc, [1.0]]),
               rho2[m] * (d["tr_S1"] - d["tr_Pc"]) + 1.0)

        # private-rate row: rc + la - FTA(V) >= w
        fta_p = fta_private(anchor, d["W2"], d["tr_S2"], np.sqrt(rho2[m]), 1.0)
        ti, tc = v_var.trace_row(fta_p.coeff)
        add_row(np.concatenate([[idx_rc[m], idx_la[m], idx_w[m]], ti]),
                np.concatenate([[-1.0, -1.0, 1.0], tc]), -fta_p.const)
        # common decodability: lb - FTA_c(V) >= sum rc
        fta_c = fta_common(anchor, d["U2"], d["tr_S1"], np.sqrt(rho2[m]), 1.0)
        ti, tc = v_var.trace_row(fta_c.coeff)
        add_row(np.concatenate([idx_rc, [idx_lb[m]], ti]),
                np.concatenate([np.ones(m_users), [-1.0], tc]), -fta_c.const)
        # QoS on the slack
        add_row([idx_w[m]], [-1.0], -r_min)

        # secants of log2(x) on [lo, hi] with the anchor value inserted
        a0 = float(np.real(np.sum((d["W1"] + d["W2"]) * anchor.T))) \
            + rho2[m] * (d["tr_S2"] - d["tr_Pm"]) + 1.0
        for slope, intercept in _log2_chords(a_lo[m], a_hi[m], a0):
            add_row([idx_la[m], idx_a[m]], [1.0, -slope], intercept)
        b0 = float(np.real(np.sum((d["U1"] + d["U2"]) * anchor.T))) \
            + rho2[m] * (d["tr_S1"] - d["tr_Pc"]) + 1.0
        for slope, intercept in _log2_chords(b_lo[m], b_hi[m], b0):
            add_row([idx_lb[m], idx_b[m]], [1.0, -slope], intercept)

    # unit diagonal of the lifted matrix
    for i in range(n_el):
        add_eq([v_var.diag_index(i)], [1.0], 1.0)

    def to_csr(rws, nv):
        data, ridx, cidx = [], [], []
        for r, (idx, coef) in enumerate(rws):
            ridx.extend([r] * len(idx))
            cidx.extend(np.asarray(idx).tolist())
            data.extend(np.asarray(coef).tolist())
        return sp.csr_matrix((data, (ridx, cidx)), shape=(len(rws), nv))

    prob = SDPProblem(
        num_vars=num_vars, objective=obj,
        lmi_blocks=[v_var.psd_block(num_vars)],
        a_ineq=to_csr(rows, num_vars), b_ineq=np.asarray(rhs),
        a_eq=to_csr(eq_rows, num_vars), b_eq=np.asarray(eq_rhs),
        lower=lower, upper=upper)
    layout = {"rc": idx_rc, "w": idx_w, "a": idx_a, "b": idx_b, "v": v_var}
    return prob, layout


def _log2_chords(lo: float, hi: float, anchor: float, n_points: int = 48):
    """Chords of log2 on [lo, hi] (log-spaced grid, anchor inserted)."""
    xs = np.geomspace(max(lo, 1e-12), max(hi, lo * (1 + 1e-9) + 1e-12), n_points)
    if lo < anchor < hi:
        xs = np.unique(np.concatenate([xs, [anchor]]))
    ys = np.log2(xs)
    out = []
    for i in range(len(xs) - 1):
        if xs[i + 1] <= xs[i]:
            continue
        slope = (ys[i + 1] - ys[i]) / (xs[i + 1] - xs[i])
        out.append((slope, ys[i] - slope * xs[i]))
    return out


def solve_p6(realization: ChannelRealization, positions: np.ndarray,
             sol: rt.PrecodingSolution, state: RISStageState | None,
             cfg_override=None):
    """Inner SCA loop over anchored SDPs; returns (lifted V, r_c, state, obj)."""
    cfg = realization.config if cfg_override is None else cfg_override
    if state is None or not state.mats:
        mats = assemble_rate_matrices(realization, positions, sol)
        anchor = state.anchor if state is not None else np.ones(
            (cfg.N, cfg.N), dtype=complex)
        state = RISStageState(anchor=anchor, mats=mats)
    best = None
    obj_prev = -np.inf
    solve_ms: list[float] = []
    for _ in range(max(1, cfg.max_inner_ris)):
        prob, layout = _assemble_p6(realization, state.mats, state, cfg.R_min)
        t0 = time.perf_counter()
        res = solve(prob, tol=cfg.solver_tol, max_iters=cfg.solver_max_iters)
        solve_ms.append(1e3 * (time.perf_counter() - t0))
        state.solve_ms = solve_ms
        if res.status == "Infeasible":
            if best is None:
                raise StageInfeasible("reflection subproblem infeasible")
            break
        if res.status == "NumericalFailure" or not usable_result(res):
            break
        x = res.x
        v_mat = layout["v"].value(x)
        v_mat = 0.5 * (v_mat + v_mat.conj().T)
        obj = float(np.sum(x[layout["w"]]))
        state = RISStageState(anchor=v_mat, mats=state.mats, objective=obj,
                              solve_ms=solve_ms)
        if best is None or obj > best[3]:
            best = (v_mat, x[layout["rc"]].copy(), state, obj)
        if obj - obj_prev <= cfg.sca_tol * (1.0 + abs(obj)):
            break
        obj_prev = obj
    if best is None:
        raise StageInfeasible("reflection stage produced no usable iterate")
    return best


def randomize_unit_modulus(v_lift: np.ndarray, realization: ChannelRealization,
                           positions: np.ndarray, sol: rt.PrecodingSolution,
                           rng: np.random.Generator,
                           count: int | None = None) -> RISConfiguration:
    """Recover a unit-modulus configuration from the lifted matrix.

    Rank-one lifts reduce to the principal eigenvector projected to unit
    modulus; otherwise Gaussian draws from the lift are projected and the
    best QoS-feasible candidate under the worst-case rates is kept (flagged
    best-effort when none is feasible).
    """
    cfg = realization.config
    count = cfg.randomization_count if count is None else count
    w, u = np.linalg.eigh(0.5 * (v_lift + v_lift.conj().T))
    w = np.maximum(w, 0.0)

    def project(vec):
        mags = np.abs(vec)
        safe = np.where(mags > 1e-15, vec / np.maximum(mags, 1e-300), 1.0)
        return RISConfiguration(phases=np.angle(safe))

    def score(ris):
        report, ok = pc.evaluate_solution(realization, positions, ris.v, sol)
        return report.sum_rate, ok

    candidates = [project(u[:, -1])]
    rank_one = w.size < 2 or w[-2] <= rt.RANK_ONE_RATIO * max(w[-1], 1e-300)
    if not rank_one:
        chol = u * np.sqrt(w)
        for _ in range(max(1, count)):
            e = (rng.normal(size=cfg.N) + 1j * rng.normal(size=cfg.N)) / np.sqrt(2)
            candidates.append(project(chol @ e))
    scored = [(c,) + score(c) for c in candidates]
    feasible = [s for s in scored if s[2]]
    pool = feasible if feasible else scored
    best = max(pool, key=lambda s: s[1])
    ris = best[0]
    ris.feasible = bool(feasible)
    return ris


def run_stage(realization: ChannelRealization, positions: np.ndarray,
              sol: rt.PrecodingSolution, state: RISStageState | None,
              prev: RISConfiguration, rng: np.random.Generator):
    """Full stage: SDP + unit-modulus recovery, never worse than ``prev``."""
    diagnostics = {"sdp_objective": None, "fallback": False, "solve_ms": []}
    mats = assemble_rate_matrices(realization, positions, sol)
    anchor = prev.lifted if state is None else state.anchor
    state = RISStageState(anchor=anchor, mats=mats)
    try:
        v_lift, r_c, state, obj = solve_p6(realization, positions, sol, state)
        diagnostics["sdp_objective"] = obj
        diagnostics["solve_ms"] = list(state.solve_ms)
        cand = randomize_unit_modulus(v_lift, realization, positions, sol, rng)
    except StageInfeasible:
        diagnostics["fallback"] = True
        diagnostics["solve_ms"] = list(state.solve_ms)
        return prev, state, diagnostics
    prev_rate = pc.evaluate_solution(realization, positions, prev.v, sol)[0].sum_rate
    cand_rate = pc.evaluate_solution(realization, positions, cand.v, sol)[0].sum_rate
    if (not cand.feasible and prev.feasible) or cand_rate < prev_rate:
        diagnostics["fallback"] = True
        return prev, state, diagnostics
    return cand, state, diagnostics
