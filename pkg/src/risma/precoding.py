"""Robust precoder design: S-procedure LMIs, semidefinite relaxation, recovery.

The stage maximizes sum(r_c_m + kappa_m) over lifted covariance matrices
P_c, P_m and slack variables, subject to worst-case decodability constraints
for every channel error in the per-user ball ||dg|| <= rho_hat.  The two
norm-bounded quadratic constraints per user and stream become LMIs with a
nonnegative multiplier each (S-procedure); the bilinear corner terms
(2^kappa - 1) * zeta and (2^{sum r_c} - 1) * beta are handled exactly as

  * kappa <= log2(1 + gamma) through piecewise-linear secants of the concave
    log (chords of a concave function underestimate it on their own segment,
    so the encoding is a safe restriction, tight at grid/anchor points), and
  * u >= gamma * zeta through the convex quadratic upper bound of
    ``convexify_product`` anchored at the previous iterate.

All SDP assembly uses noise-normalised channels (g / sigma), so constraint
entries are O(1) .. O(1e4) regardless of physical noise floors.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import channel as chan
from . import rates as rt
from .channel import ChannelRealization
from .conic import ComplexLMIBuilder, HermitianVariable, SDPProblem, dense_block, solve
from .linalg import InvariantViolation

RATE_CAP = 64.0           # bps/Hz; generous bound on any rate variable
SECANT_POINTS = 56


class StageInfeasible(RuntimeError):
    """A stage subproblem is infeasible (caller falls back)."""


def usable_result(res) -> bool:
    """A solve whose iterate is accurate enough to drive the SCA step.

    Final feasibility and solution quality are always re-verified on the
    recovered rank-one solutions, so moderate duality-gap slack is safe.
    """
    if res.optimal:
        return True
    pres, dres, relgap = res.kkt_residuals
    return pres <= 1e-4 and dres <= 1e-4 and relgap <= 1e-3


# ---------------------------------------------------------------------------
# reusable pieces
# ---------------------------------------------------------------------------


def convexify_product(gamma: float, s: float, anchor: tuple[float, float]) -> float:
    """Convex upper bound on gamma * s, exact at the anchor.

    gamma * s = ((gamma+s)^2 - (gamma-s)^2) / 4; the concave -(gamma-s)^2 is
    linearised at the anchor, giving

      ub = ((gamma+s)^2 - 2(g0-s0)(gamma-s) + (g0-s0)^2) / 4  >=  gamma * s.
    """
    g0, s0 = anchor
    if g0 <= 0 or s0 <= 0:
        raise InvariantViolation("product anchor must be strictly positive")
    d0 = g0 - s0
    return 0.25 * ((gamma + s) ** 2 - 2.0 * d0 * (gamma - s) + d0 * d0)


def product_bound_block(num_vars: int, var_gamma: int, var_s: int, var_u: int,
                        anchor: tuple[float, float]):
    """2x2 LMI enforcing u >= convexify_product(gamma, s, anchor).

    Schur form [[1, (g+s)/2], [(g+s)/2, u + (g0-s0)(g-s)/2 - (g0-s0)^2/4]].
    """
    g0, s0 = anchor
    if g0 <= 0 or s0 <= 0:
        raise InvariantViolation("product anchor must be strictly positive")
    d0 = g0 - s0
    b0 = np.array([[1.0, 0.0], [0.0, -0.25 * d0 * d0]])
    terms = {
        var_gamma: np.array([[0.0, 0.5], [0.5, 0.5 * d0]]),
        var_s: np.array([[0.0, 0.5], [0.5, -0.5 * d0]]),
        var_u: np.array([[0.0, 0.0], [0.0, 1.0]]),
    }
    return dense_block(num_vars, b0, terms)


def log2_secants(x_max: float, n_points: int = SECANT_POINTS,
                 anchors: tuple[float, ...] = ()) -> list[tuple[float, float]]:
    """Chords (slope, intercept) of x -> log2(1+x) on [0, x_max].

    min_i (slope_i * x + intercept_i) underestimates log2(1+x) on [0, x_max]
    and touches it at every grid point (anchors are inserted into the grid).
    """
    u = np.linspace(0.0, np.log2(1.0 + max(x_max, 1e-9)), n_points)
    xs = np.power(2.0, u) - 1.0
    xs = np.unique(np.concatenate([xs, [a for a in anchors if 0.0 < a < x_max]]))
    ys = np.log2(1.0 + xs)
    out = []
    for i in range(len(xs) - 1):
        slope = (ys[i + 1] - ys[i]) / (xs[i + 1] - xs[i])
        out.append((slope, ys[i] - slope * xs[i]))
    return out


def bordered(c_mat: np.ndarray, g: np.ndarray) -> np.ndarray:
    """[[C, Cg], [g^H C, g^H C g]] (Hermitian when C is)."""
    cg = c_mat @ g
    corner = np.array([[np.vdot(g, cg)]])
    top = np.hstack([c_mat, cg[:, None]])
    bot = np.hstack([cg.conj()[None, :], corner])
    return np.vstack([top, bot])


@dataclass
class MultiplierLMI:
    """Affine LMI const + multiplier * coeff with a nonnegative multiplier."""

    const: np.ndarray
    coeff: np.ndarray

    def value(self, multiplier: float) -> np.ndarray:
        return self.const + multiplier * self.coeff

    def feasible(self, tol: float = 1e-9, grid: int = 120) -> bool:
        scale = max(1.0, float(np.linalg.norm(self.const)))
        for mult in np.concatenate([[0.0], np.geomspace(1e-9, 1e9, grid)]):
            w = np.linalg.eigvalsh(self.value(mult))
            if w[0] >= -tol * scale:
                return True
        return False


def build_private_lmis(g: np.ndarray, rho_hat: float, p_own: np.ndarray,
                       q_interf: np.ndarray, gamma_term: float, zeta: float,
                       sigma2: float) -> tuple[MultiplierLMI, MultiplierLMI]:
    """Numeric S-procedure blocks for the private-stream pair of constraints.

    Block 1 certifies (g+d)^H P (g+d) >= gamma_term * zeta over the ball;
    block 2 certifies (g+d)^H Q (g+d) + sigma2 <= zeta.  Both are affine in
    their nonnegative multiplier.
    """
    dim = g.size + 1
    mult = np.zeros((dim, dim))
    mult[:-1, :-1] = np.eye(g.size)
    mult[-1, -1] = -rho_hat ** 2
    blk1 = bordered(p_own, g)
    blk1[-1, -1] -= gamma_term * zeta
    blk2 = bordered(-q_interf, g)
    blk2[-1, -1] += zeta - sigma2
    return (MultiplierLMI(blk1, mult.copy()), MultiplierLMI(blk2, mult.copy()))


def build_common_lmis(g: np.ndarray, rho_hat: float, p_c: np.ndarray,
                      s1: np.ndarray, commonrate_term: float, beta: float,
                      sigma2: float) -> tuple[MultiplierLMI, MultiplierLMI]:
    """As build_private_lmis, for the common stream (interference = all users)."""
    dim = g.size + 1
    mult = np.zeros((dim, dim))
    mult[:-1, :-1] = np.eye(g.size)
    mult[-1, -1] = -rho_hat ** 2
    blk1 = bordered(p_c, g)
    blk1[-1, -1] -= commonrate_term * beta
    blk2 = bordered(-s1, g)
    blk2[-1, -1] += beta - sigma2
    return (MultiplierLMI(blk1, mult.copy()), MultiplierLMI(blk2, mult.copy()))


def allocate_common_rates(capacity: float, private_rates: np.ndarray,
                          r_min: float) -> tuple[np.ndarray, bool]:
    """Split the common-rate capacity: QoS top-ups first, remainder to user 0.

    Returns (shares, feasible); when the top-ups alone exceed the capacity
    the shares are scaled down proportionally and the split is flagged.
    """
    private_rates = np.asarray(private_rates, dtype=float)
    capacity = max(0.0, float(capacity))
    needs = np.maximum(0.0, r_min - private_rates)
    total = float(np.sum(needs))
    if total > capacity + 1e-12:
        scale = capacity / total if total > 0 else 0.0
        return needs * scale, False
    r_c = needs.copy()
    r_c[0] += capacity - total
    return r_c, True


def _ball_quadratic_min(p_mat: np.ndarray, g: np.ndarray, rho: float) -> float:
    """Certified lower bound on min (g+d)^H P (g+d) over ||d|| <= rho.

    ||P^(1/2)(g+d)|| >= ||P^(1/2) g|| - rho sqrt(lmax(P)); exact when P has
    rank one.
    """
    val = float(np.real(np.vdot(g, p_mat @ g)))
    lmax = max(float(np.linalg.eigvalsh(p_mat)[-1]), 0.0)
    return max(0.0, np.sqrt(max(val, 0.0)) - rho * np.sqrt(lmax)) ** 2


def _ball_quadratic_max(q_mat: np.ndarray, g: np.ndarray, rho: float) -> float:
    """Certified upper bound on max (g+d)^H Q (g+d) over ||d|| <= rho."""
    val = float(np.real(np.vdot(g, q_mat @ g)))
    lmax = max(float(np.linalg.eigvalsh(q_mat)[-1]), 0.0)
    return (np.sqrt(max(val, 0.0)) + rho * np.sqrt(lmax)) ** 2


def vector_ball_wc_rates(g_rows: np.ndarray, rho_hat: np.ndarray,
                         sol: rt.PrecodingSolution, sigma2: float):
    """Certified worst-case rates under the vector-ball error model.

    Every admissible error keeps the own-stream power above the numerator
    bound and the interference below the denominator bound, so the returned
    rates are floors that sampled errors can never violate; for rank-one
    beamformers the bounds coincide with the exact closed forms.
    """
    m_users = g_rows.shape[0]
    wc_c = np.zeros(m_users)
    wc_p = np.zeros(m_users)
    s1 = np.sum(sol.P_m, axis=0)
    for m in range(m_users):
        g = g_rows[m]
        rho = float(rho_hat[m])
        lo_own = _ball_quadratic_min(sol.P_m[m], g, rho)
        hi_int = _ball_quadratic_max(s1 - sol.P_m[m], g, rho)
        wc_p[m] = np.log2(1.0 + lo_own / (hi_int + sigma2))
        lo_c = _ball_quadratic_min(sol.P_c, g, rho)
        hi_all = _ball_quadratic_max(s1, g, rho)
        wc_c[m] = np.log2(1.0 + lo_c / (hi_all + sigma2))
    return wc_c, wc_p


def evaluate_solution(realization: ChannelRealization, positions: np.ndarray,
                      v: np.ndarray, sol: rt.PrecodingSolution):
    """Worst-case report with a fresh conservative common-rate allocation.

    The allocation capacity is the per-user minimum of the covariance-form
    and (for rank-one beamformers) vector-ball worst-case common rates, so
    both uncertainty models certify the returned shares.
    """
    cfg = realization.config
    report = rt.worst_case_rates(realization, positions, v, sol)
    g_rows = np.stack([chan.effective_user_channel(realization, positions, v, m)
                       for m in range(cfg.M)])
    ball_c, ball_p = vector_ball_wc_rates(g_rows, realization.rho_hat, sol, cfg.sigma2)
    capacity = float(np.min(np.minimum(report.wc_common, ball_c)))
    floors = np.minimum(report.wc_private, ball_p)
    r_c, ok = allocate_common_rates(capacity, floors, cfg.R_min)
    report.r_c = r_c
    report.sum_rate = float(np.sum(r_c + report.wc_private))
    qos_ok = ok and bool(np.all(r_c + floors >= cfg.R_min - 1e-9))
    return report, qos_ok


# ---------------------------------------------------------------------------
# stage state and SDP assembly
# ---------------------------------------------------------------------------


@dataclass
class PrecodingStageState:
    """Anchors and last slack values of the inner SCA loop."""

    gamma0: np.ndarray
    zeta0: np.ndarray
    rhoc0: float
    beta0: np.ndarray
    last: dict = field(default_factory=dict)
    objective: float = -np.inf


def _scaled_channels(realization: ChannelRealization, positions: np.ndarray,
                     v: np.ndarray):
    cfg = realization.config
    sig = np.sqrt(cfg.sigma2)
    g_rows = np.stack([chan.effective_user_channel(realization, positions, v, m)
                       for m in range(cfg.M)]) / sig
    rho_s = realization.rho_hat / sig
    return g_rows, rho_s


def initial_solution(realization: ChannelRealization, positions: np.ndarray,
                     v: np.ndarray) -> rt.PrecodingSolution:
    """Matched-filter start: half power on the common stream, rest split."""
    cfg = realization.config
    g_rows = np.stack([chan.effective_user_channel(realization, positions, v, m)
                       for m in range(cfg.M)])
    gsum = np.sum(g_rows, axis=0)
    if np.linalg.norm(gsum) < 1e-30:
        gsum = np.ones(cfg.L, dtype=complex)
    p_c = np.sqrt(cfg.P_t / 2.0) * gsum / np.linalg.norm(gsum)
    p_m = np.zeros((cfg.M, cfg.L), dtype=complex)
    for m in range(cfg.M):
        g = g_rows[m]
        nrm = np.linalg.norm(g)
        d = g / nrm if nrm > 1e-30 else np.ones(cfg.L) / np.sqrt(cfg.L)
        p_m[m] = np.sqrt(cfg.P_t / (2.0 * cfg.M)) * d
    return rt.PrecodingSolution.from_vectors(p_c, p_m)


def zero_forcing_solution(realization: ChannelRealization, positions: np.ndarray,
                          v: np.ndarray) -> rt.PrecodingSolution:
    """Interference-nulled start: each private beam avoids the other users.

    Useful as an anchor source when the matched-filter point is too far from
    any QoS-feasible operating point for the convexified products.
    """
    cfg = realization.config
    g_rows = np.stack([chan.effective_user_channel(realization, positions, v, m)
                       for m in range(cfg.M)])
    p_m = np.zeros((cfg.M, cfg.L), dtype=complex)
    for m in range(cfg.M):
        others = np.delete(g_rows, m, axis=0)
        d = g_rows[m].copy()
        if others.size:
            a = others.T
            proj = a @ np.linalg.pinv(a.conj().T @ a, rcond=1e-10) @ a.conj().T
            d = d - proj @ d
        if np.linalg.norm(d) < 1e-12 * max(np.linalg.norm(g_rows[m]), 1e-300):
            d = g_rows[m]
        nrm = np.linalg.norm(d)
        d = d / nrm if nrm > 1e-30 else np.ones(cfg.L) / np.sqrt(cfg.L)
        p_m[m] = np.sqrt(cfg.P_t / (2.0 * cfg.M)) * d
    gsum = np.sum(g_rows / np.maximum(
        np.linalg.norm(g_rows, axis=1, keepdims=True), 1e-300), axis=0)
    if np.linalg.norm(gsum) < 1e-30:
        gsum = np.ones(cfg.L, dtype=complex)
    p_c = np.sqrt(cfg.P_t / 2.0) * gsum / np.linalg.norm(gsum)
    return rt.PrecodingSolution.from_vectors(p_c, p_m)


def initial_stage_state(realization: ChannelRealization, positions: np.ndarray,
                        v: np.ndarray,
                        sol: rt.PrecodingSolution | None = None) -> PrecodingStageState:
    """Anchors consistent with the ball-model certificates of the LMIs.

    The product anchors describe an operating point the S-procedure can
    actually certify for ``sol`` (closed-form ball worst cases), slightly
    shrunk/inflated so the anchored point is strictly interior.
    """
    cfg = realization.config
    if sol is None:
        sol = initial_solution(realization, positions, v)
    g_rows, rho_s = _scaled_channels(realization, positions, v)
    ball_c, ball_p = vector_ball_wc_rates(g_rows, rho_s, sol, 1.0)
    gamma0 = np.maximum(0.95 * (2.0 ** ball_p - 1.0), 1e-6)
    zeta0 = np.zeros(cfg.M)
    beta0 = np.zeros(cfg.M)
    s1 = np.sum(sol.P_m, axis=0)
    for m in range(cfg.M):
        g = g_rows[m]
        zeta0[m] = 1.05 * (1.0 + _ball_quadratic_max(s1 - sol.P_m[m], g, rho_s[m]))
        beta0[m] = 1.05 * (1.0 + _ball_quadratic_max(s1, g, rho_s[m]))
    rhoc0 = max(0.95 * (2.0 ** float(np.min(ball_c)) - 1.0), 1e-6)
    return PrecodingStageState(gamma0=gamma0, zeta0=zeta0, rhoc0=rhoc0, beta0=beta0)


def qos_rate_upper_bound(realization: ChannelRealization, positions: np.ndarray,
                         v: np.ndarray) -> np.ndarray:
    """Per-user upper bound on r_c + kappa achievable at full power."""
    cfg = realization.config
    g_rows, rho_s = _scaled_channels(realization, positions, v)
    bound = np.zeros(cfg.M)
    gam_max = (np.linalg.norm(g_rows, axis=1) + rho_s) ** 2 * cfg.P_t
    common_cap = np.log2(1.0 + float(np.min(gam_max)))
    for m in range(cfg.M):
        bound[m] = common_cap + np.log2(1.0 + gam_max[m])
    return bound


def qos_balanced_solution(realization: ChannelRealization, positions: np.ndarray,
                          v: np.ndarray) -> rt.PrecodingSolution:
    """Interference-nulled start with inverse-gain private power weights.

    Equal power splits starve weak users; weighting each private stream by
    the inverse of its beamformed gain roughly equalises the per-user SNRs,
    which is a much better anchor neighbourhood when the QoS target binds.
    """
    cfg = realization.config
    zf = zero_forcing_solution(realization, positions, v)
    g_rows, _ = _scaled_channels(realization, positions, v)
    gains = np.array([max(abs(np.vdot(g_rows[m], zf.p_m[m])) ** 2, 1e-30)
                      for m in range(cfg.M)])
    # current per-stream power is P_t/(2M); reweight inversely to the gain
    base = np.linalg.norm(zf.p_m, axis=1) ** 2
    inv = (1.0 / gains)
    w = inv / np.sum(inv) * (cfg.P_t / 2.0)
    p_m = np.stack([np.sqrt(w[m] / base[m]) * zf.p_m[m] for m in range(cfg.M)])
    return rt.PrecodingSolution.from_vectors(zf.p_c, p_m)


def _assemble_p3(realization, g_rows, rho_s, state: PrecodingStageState,
                 r_min: float | None = None):
    """One inner-iteration SDP for the precoding stage (normalised units)."""
    cfg = realization.config
    r_min = cfg.R_min if r_min is None else float(r_min)
    m_users, l_ant = cfg.M, cfg.L
    n_scalar = 11 * m_users + 1
    idx_rc = np.arange(0, m_users)
    idx_kap = np.arange(m_users, 2 * m_users)
    idx_gam = np.arange(2 * m_users, 3 * m_users)
    idx_zet = np.arange(3 * m_users, 4 * m_users)
    idx_lam = np.arange(4 * m_users, 5 * m_users)
    idx_mu = np.arange(5 * m_users, 6 * m_users)
    idx_u = np.arange(6 * m_users, 7 * m_users)
    idx_bet = np.arange(7 * m_users, 8 * m_users)
    idx_lamc = np.arange(8 * m_users, 9 * m_users)
    idx_muc = np.arange(9 * m_users, 10 * m_users)
    idx_uc = np.arange(10 * m_users, 11 * m_users)
    idx_rhoc = 11 * m_users

    pc_var = HermitianVariable(l_ant, n_scalar)
    pm_vars = [HermitianVariable(l_ant, n_scalar + (k + 1) * l_ant ** 2)
               for k in range(m_users)]
    num_vars = n_scalar + (m_users + 1) * l_ant ** 2

    gam_max = (np.linalg.norm(g_rows, axis=1) + rho_s) ** 2 * cfg.P_t
    rhoc_max = float(np.min(gam_max))
    zeta_max = 1.0 + gam_max
    beta_max = 1.0 + gam_max

    # valid multiplier caps: a PSD corner forces lam * rho^2 <= g^H P g
    # <= gam_max (and mu * rho^2 <= zeta <= zeta_max), so these bounds never
    # cut a feasible point
    rho2_floor = np.maximum(rho_s ** 2, 1e-12)
    lam_cap = 1.01 * gam_max / rho2_floor
    mu_cap = 1.01 * zeta_max / rho2_floor
    muc_cap = 1.01 * beta_max / rho2_floor

    lower = np.full(num_vars, -np.inf)
    upper = np.full(num_vars, np.inf)
    lower[:n_scalar] = 0.0
    upper[idx_rc] = RATE_CAP
    upper[idx_kap] = RATE_CAP
    upper[idx_gam] = gam_max
    upper[idx_zet] = zeta_max
    upper[idx_lam] = lam_cap
    upper[idx_mu] = mu_cap
    # any LMI-feasible point has u <= g^H P g - lam rho^2 <= gam_max
    upper[idx_u] = 1.01 * gam_max
    upper[idx_bet] = beta_max
    upper[idx_lamc] = lam_cap
    upper[idx_muc] = muc_cap
    upper[idx_uc] = 1.01 * gam_max
    upper[idx_rhoc] = rhoc_max
    for hv in [pc_var] + pm_vars:
        lower[hv.start:hv.start + l_ant] = 0.0
        upper[hv.start:hv.start + l_ant] = cfg.P_t
        lower[hv.start + l_ant:hv.start + hv.num_vars] = -cfg.P_t
        upper[hv.start + l_ant:hv.start + hv.num_vars] = cfg.P_t

    obj = np.zeros(num_vars)
    obj[idx_rc] = 1.0
    obj[idx_kap] = 1.0

    rows, rhs = [], []

    def add_row(idx, coef, b):
        rows.append((np.asarray(idx, dtype=int), np.asarray(coef, dtype=float)))
        rhs.append(float(b))

    # QoS rows: r_c + kappa >= r_min (possibly relaxed, see solve_p3)
    for m in range(m_users):
        add_row([idx_rc[m], idx_kap[m]], [-1.0, -1.0], -r_min)
    # power budget
    pw_idx = np.concatenate([[hv.start + i for i in range(l_ant)]
                             for hv in [pc_var] + pm_vars])
    add_row(pw_idx, np.ones(pw_idx.size), cfg.P_t)
    # secant rows: kappa_m <= chords(gamma_m); sum r_c <= chords(rho_c)
    for m in range(m_users):
        for slope, intercept in log2_secants(gam_max[m],
                                             anchors=(float(state.gamma0[m]),)):
            add_row([idx_kap[m], idx_gam[m]], [1.0, -slope], intercept)
    for slope, intercept in log2_secants(rhoc_max, anchors=(float(state.rhoc0),)):
        coefs = np.concatenate([np.ones(m_users), [-slope]])
        add_row(np.concatenate([idx_rc, [idx_rhoc]]), coefs, intercept)

    blocks = []
    # PSD lifts
    blocks.append(pc_var.psd_block(num_vars))
    for hv in pm_vars:
        blocks.append(hv.psd_block(num_vars))
    # product bounds u >= gamma * zeta and u_c >= rho_c * beta
    for m in range(m_users):
        blocks.append(product_bound_block(
            num_vars, idx_gam[m], idx_zet[m], idx_u[m],
            (float(state.gamma0[m]), float(state.zeta0[m]))))
        blocks.append(product_bound_block(
            num_vars, idx_rhoc, idx_bet[m], idx_uc[m],
            (float(state.rhoc0), float(state.beta0[m]))))

    eye_like = np.eye(l_ant + 1, dtype=complex)
    for m in range(m_users):
        g = g_rows[m]
        rho2 = rho_s[m] ** 2
        if rho2 <= 1e-14:
            # zero uncertainty: the S-procedure pairs collapse to their
            # scalar constraints; the multipliers are pinned (unused)
            for vv in (idx_lam[m], idx_mu[m], idx_lamc[m], idx_muc[m]):
                upper[vv] = 1.0
            outer = np.outer(g, g.conj())
            ti, tc = pm_vars[m].trace_row(outer)
            add_row(np.concatenate([ti, [idx_u[m]]]),
                    np.concatenate([-tc, [1.0]]), 0.0)
            ii, cc = [], []
            for i in range(m_users):
                if i == m:
                    continue
                ti2, tc2 = pm_vars[i].trace_row(outer)
                ii.extend(ti2.tolist())
                cc.extend(tc2.tolist())
            add_row(ii + [int(idx_zet[m])], cc + [-1.0], -1.0)
            ti3, tc3 = pc_var.trace_row(outer)
            add_row(np.concatenate([ti3, [idx_uc[m]]]),
                    np.concatenate([-tc3, [1.0]]), 0.0)
            ii, cc = [], []
            for i in range(m_users):
                ti4, tc4 = pm_vars[i].trace_row(outer)
                ii.extend(ti4.tolist())
                cc.extend(tc4.tolist())
            add_row(ii + [int(idx_bet[m])], cc + [-1.0], -1.0)
            continue

        mult = eye_like.copy()
        mult[-1, -1] = -rho2

        # signal-side private block
        b = ComplexLMIBuilder(l_ant + 1, num_vars)
        hv = pm_vars[m]
        for loc in range(hv.num_vars):
            b.add_term(hv.start + loc, bordered(hv.basis_matrix(loc), g))
        corner = np.zeros((l_ant + 1, l_ant + 1))
        corner[-1, -1] = -1.0
        b.add_term(int(idx_u[m]), corner)
        b.add_term(int(idx_lam[m]), mult)
        blocks.append(b.build())

        # interference-side private block
        b = ComplexLMIBuilder(l_ant + 1, num_vars)
        for i in range(m_users):
            if i == m:
                continue
            hv = pm_vars[i]
            for loc in range(hv.num_vars):
                b.add_term(hv.start + loc, -bordered(hv.basis_matrix(loc), g))
        cz = np.zeros((l_ant + 1, l_ant + 1))
        cz[-1, -1] = 1.0
        b.add_term(int(idx_zet[m]), cz)
        b.add_term(int(idx_mu[m]), mult)
        cconst = np.zeros((l_ant + 1, l_ant + 1))
        cconst[-1, -1] = -1.0  # - sigma^2 in normalised units
        b.add_const(cconst)
        blocks.append(b.build())

        # signal-side common block
        b = ComplexLMIBuilder(l_ant + 1, num_vars)
        for loc in range(pc_var.num_vars):
            b.add_term(pc_var.start + loc, bordered(pc_var.basis_matrix(loc), g))
        b.add_term(int(idx_uc[m]), corner)
        b.add_term(int(idx_lamc[m]), mult)
        blocks.append(b.build())

        # interference-side common block (all private streams)
        b = ComplexLMIBuilder(l_ant + 1, num_vars)
        for i in range(m_users):
            hv = pm_vars[i]
            for loc in range(hv.num_vars):
                b.add_term(hv.start + loc, -bordered(hv.basis_matrix(loc), g))
        cb = np.zeros((l_ant + 1, l_ant + 1))
        cb[-1, -1] = 1.0
        b.add_term(int(idx_bet[m]), cb)
        b.add_term(int(idx_muc[m]), mult)
        b.add_const(cconst)
        blocks.append(b.build())

    n_rows = len(rows)
    data, ridx, cidx = [], [], []
    for r, (idx, coef) in enumerate(rows):
        ridx.extend([r] * len(idx))
        cidx.extend(idx.tolist())
        data.extend(coef.tolist())
    a_ineq = sp.csr_matrix((data, (ridx, cidx)), shape=(n_rows, num_vars))

    prob = SDPProblem(num_vars=num_vars, objective=obj, lmi_blocks=blocks,
                      a_ineq=a_ineq, b_ineq=np.asarray(rhs),
                      lower=lower, upper=upper)
    layout = {
        "rc": idx_rc, "kappa": idx_kap, "gamma": idx_gam, "zeta": idx_zet,
        "lam": idx_lam, "mu": idx_mu, "u": idx_u, "beta": idx_bet,
        "lamc": idx_lamc, "muc": idx_muc, "uc": idx_uc, "rhoc": idx_rhoc,
        "pc": pc_var, "pm": pm_vars,
    }
    return prob, layout


def solve_p3(realization: ChannelRealization, positions: np.ndarray, v: np.ndarray,
             state: PrecodingStageState | None, cfg_override=None):
    """Inner SCA loop over anchored SDPs; returns (lifted solution, state, obj).

    The previous iterate stays feasible after every anchor refresh, so the
    objective sequence is nondecreasing.  Raises StageInfeasible when even
    the full-power bound cannot meet the QoS target, or when the solver
    certifies infeasibility on the first iteration.
    """
    cfg = realization.config if cfg_override is None else cfg_override
    g_rows, rho_s = _scaled_channels(realization, positions, v)
    if np.any(qos_rate_upper_bound(realization, positions, v) < cfg.R_min):
        raise StageInfeasible("QoS unreachable at full power")

    def _sca(state0, r_eff):
        best = None
        obj_prev = -np.inf
        st = state0
        for _ in range(max(1, cfg.max_inner_precoding)):
            prob, layout = _assemble_p3(realization, g_rows, rho_s, st, r_eff)
            res = solve(prob, tol=cfg.solver_tol, max_iters=cfg.solver_max_iters)
            if res.status in ("Infeasible", "NumericalFailure"):
                break
            if not usable_result(res):
                break
            x = res.x
            obj = float(np.sum(x[layout["rc"]]) + np.sum(x[layout["kappa"]]))
            sol = rt.PrecodingSolution(
                p_c=np.zeros(cfg.L, dtype=complex),
                p_m=np.zeros((cfg.M, cfg.L), dtype=complex),
                P_c=layout["pc"].value(x),
                P_m=np.stack([hv.value(x) for hv in layout["pm"]]),
                r_c=x[layout["rc"]].copy(),
            )
            st = PrecodingStageState(
                gamma0=np.maximum(x[layout["gamma"]], 1e-9),
                zeta0=np.maximum(x[layout["zeta"]], 1e-9),
                rhoc0=max(float(x[layout["rhoc"]]), 1e-9),
                beta0=np.maximum(x[layout["beta"]], 1e-9),
                last={k: x[idx].copy() if hasattr(idx, "__len__") else float(x[idx])
                      for k, idx in layout.items() if k not in ("pc", "pm")},
                objective=obj,
            )
            if best is None or obj > best[2]:
                best = (sol, st, obj)
            if obj - obj_prev <= cfg.sca_tol * (1.0 + abs(obj)):
                break
            obj_prev = obj
        return best

    # anchor ladder (a too-distant product anchor can make the restricted
    # SDP infeasible even when the true problem is not), then a QoS-relaxed
    # pass as the last resort; the driver's acceptance test keeps the trace
    # monotone either way
    makers = []
    if state is not None:
        makers.append(lambda: state)
    makers.extend([
        lambda: initial_stage_state(
            realization, positions, v,
            sol=qos_balanced_solution(realization, positions, v)),
        lambda: initial_stage_state(
            realization, positions, v,
            sol=zero_forcing_solution(realization, positions, v)),
        lambda: initial_stage_state(realization, positions, v),
    ])
    for r_eff in (cfg.R_min, 0.0):
        for maker in makers:
            out = _sca(maker(), r_eff)
            if out is not None:
                return out
        if cfg.R_min == 0.0:
            break
    raise StageInfeasible("precoding stage produced no usable iterate")


def gaussian_randomize_precoders(lifted: rt.PrecodingSolution,
                                 realization: ChannelRealization,
                                 positions: np.ndarray, v: np.ndarray,
                                 rng: np.random.Generator,
                                 count: int | None = None) -> rt.PrecodingSolution:
    """Recover rank-one beamformers from the lifted matrices.

    Rank-one inputs (eigenvalue ratio <= 1e-6) are deflated deterministically;
    otherwise ``count`` Gaussian candidates are drawn from each lifted
    covariance, each candidate tuple is rescaled to the lifted power, and the
    best QoS-feasible tuple under the worst-case rates is kept.  If no
    candidate is feasible the best-effort tuple is returned flagged.
    """
    cfg = realization.config
    count = cfg.randomization_count if count is None else count

    def principal(p_mat):
        w, u = np.linalg.eigh(p_mat)
        lam = max(float(w[-1]), 0.0)
        return np.sqrt(lam) * u[:, -1]

    def is_rank_one(p_mat):
        w = np.linalg.eigvalsh(p_mat)
        top = max(float(w[-1]), 0.0)
        return top <= 0 or (max(float(w[-2]), 0.0) <= rt.RANK_ONE_RATIO * top
                            if w.size > 1 else True)

    mats = [lifted.P_c] + [lifted.P_m[m] for m in range(cfg.M)]
    all_rank_one = all(is_rank_one(p) for p in mats)
    power_target = min(lifted.total_power(), cfg.P_t)

    def finish(p_c, p_m):
        sol = rt.PrecodingSolution.from_vectors(p_c, p_m)
        total = sol.total_power()
        if total > 0:
            scale = np.sqrt(power_target / total)
            sol = rt.PrecodingSolution.from_vectors(scale * p_c, scale * np.asarray(p_m))
        report, ok = evaluate_solution(realization, positions, v, sol)
        sol.r_c = report.r_c
        return sol, report.sum_rate, ok

    candidates = [finish(principal(lifted.P_c),
                         np.stack([principal(lifted.P_m[m]) for m in range(cfg.M)]))]
    if not all_rank_one:
        chols = []
        for p_mat in mats:
            w, u = np.linalg.eigh(p_mat)
            w = np.maximum(w, 0.0)
            chols.append(u * np.sqrt(w))
        for _ in range(max(1, count)):
            draws = []
            for ch in chols:
                e = (rng.normal(size=cfg.L) + 1j * rng.normal(size=cfg.L)) / np.sqrt(2)
                draws.append(ch @ e)
            candidates.append(finish(draws[0], np.stack(draws[1:])))

    feasible = [c for c in candidates if c[2]]
    pool = feasible if feasible else candidates
    best = max(pool, key=lambda c: c[1])
    sol = best[0]
    sol.feasible = bool(feasible)
    return sol


def run_stage(realization: ChannelRealization, positions: np.ndarray, v: np.ndarray,
              state: PrecodingStageState | None,
              prev: rt.PrecodingSolution | None,
              rng: np.random.Generator):
    """Full stage: SDP + recovery, never worse than the previous solution.

    Returns (solution, state, diagnostics).  On subproblem infeasibility the
    previous solution is kept (AO safeguard); if there is no previous
    solution the infeasibility is re-raised.
    """
    diagnostics = {"sdp_objective": None, "fallback": False}
    try:
        lifted, state, obj = solve_p3(realization, positions, v, state)
        diagnostics["sdp_objective"] = obj
        cand = gaussian_randomize_precoders(lifted, realization, positions, v, rng)
    except StageInfeasible:
        if prev is None:
            raise
        diagnostics["fallback"] = True
        return prev, state, diagnostics
    if prev is not None:
        prev_rate = evaluate_solution(realization, positions, v, prev)[0].sum_rate
        cand_rate = evaluate_solution(realization, positions, v, cand)[0].sum_rate
        if (not cand.feasible) or cand_rate < prev_rate:
            diagnostics["fallback"] = True
            return prev, state, diagnostics
    return cand, state, diagnostics
