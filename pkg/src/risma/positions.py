"""Antenna placement by block coordinate descent over per-antenna LPs.

One antenna moves at a time: the worst-case covariance-form rates are
linearised in the antenna coordinates with analytic gradients (chain rule
through the cascaded channel and the per-path phase terms), the minimum
separation constraints get their first-order lower bound, and the resulting
LP (solved by the conic core with no matrix blocks) proposes a step inside
an infinity-norm trust region.  Steps are accepted only if the true
(non-linearised) worst-case sum-rate does not decrease; rejected steps halve
the trust region.  This makes the sweep monotone by construction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from . import precoding as pc
from . import rates as rt
from .channel import ChannelRealization, bs_ris_channel, check_antenna_layout, frv
from .conic import SDPProblem, solve
from .linalg import InvariantViolation
from .precoding import RATE_CAP


@dataclass
class PositionStageState:
    positions: np.ndarray
    objective: float = -np.inf
    sweeps: int = 0


def _phase_sensitivities(geometry):
    s_x = np.sin(geometry.tx_elev) * np.cos(geometry.tx_azim)
    s_y = np.cos(geometry.tx_elev)
    return s_x, s_y


def rate_gradient(realization: ChannelRealization, positions: np.ndarray,
                  v: np.ndarray, sol: rt.PrecodingSolution, m: int, l: int,
                  which: str = "private"):
    """Gradient of the worst-case rate of user m w.r.t. antenna l's position.

    Returns (gradient (2,), clamped) where ``clamped`` marks a zero-gradient
    point caused by the worst-case numerator clamp (the subgradient used
    there is zero).
    """
    cfg = realization.config
    geo = realization.geometry
    lam = cfg.wavelength
    hh = bs_ris_channel(realization, positions)
    q = realization.h_ris_user[m] * np.conj(v)
    g = hh.conj().T @ q
    s1 = np.sum(sol.P_m, axis=0)
    if which == "private":
        num_mat, den_mat = sol.P_m[m], s1 - sol.P_m[m]
        tr_num, tr_den = (float(np.real(np.trace(sol.P_m[m]))),
                          float(np.real(np.trace(s1 - sol.P_m[m]))))
    elif which == "common":
        num_mat, den_mat = sol.P_c, s1
        tr_num, tr_den = (float(np.real(np.trace(sol.P_c))),
                          float(np.real(np.trace(s1))))
    else:
        raise ValueError("which must be 'private' or 'common'")
    rho2 = float(realization.rho_hat[m]) ** 2
    num = float(np.real(np.vdot(g, num_mat @ g))) - rho2 * tr_num
    den = float(np.real(np.vdot(g, den_mat @ g))) + rho2 * tr_den + cfg.sigma2
    if num <= 0.0:
        return np.zeros(2), True

    # dH/dx_l = eta_x e_l^T with eta = F^rH Lam (j 2pi/lam s . f(t_l))
    f_l = frv(positions[l], geo.tx_elev, geo.tx_azim, lam)
    f_r = np.exp(2j * np.pi / lam * (
        np.outer(np.sin(geo.rx_elev) * np.cos(geo.rx_azim),
                 geo.ris_element_positions[:, 0]).T
        + np.outer(np.cos(geo.rx_elev), geo.ris_element_positions[:, 1]).T))
    a_mat = f_r.conj() * realization.path_gains[None, :]   # (N, L_p)
    s_x, s_y = _phase_sensitivities(geo)
    k = 2.0 * np.pi / lam
    eta_x = a_mat @ (1j * k * s_x * f_l)
    eta_y = a_mat @ (1j * k * s_y * f_l)

    def quad_grad(x_mat, eta):
        # d/dtheta  g^H X g  with  dg = e_l (eta^H q)
        return 2.0 * float(np.real(np.conj(np.vdot(eta, q)) * (x_mat @ g)[l]))

    grad = np.zeros(2)
    for axis, eta in ((0, eta_x), (1, eta_y)):
        dn = quad_grad(num_mat, eta)
        dd = quad_grad(den_mat, eta)
        grad[axis] = ((dn + dd) / (num + den) - dd / den) / np.log(2.0)
    return grad, False


def linearize_separation(t_anchor: np.ndarray, t_j: np.ndarray, min_dist: float):
    """Affine row (a, b): a . t_l >= b implies ||t_l - t_j|| >= min_dist.

    a is the unit vector from the neighbour to the anchor; at the anchor the
    row's left side equals the true distance.
    """
    diff = np.asarray(t_anchor, dtype=float) - np.asarray(t_j, dtype=float)
    nrm = float(np.linalg.norm(diff))
    if nrm < 1e-12:
        raise InvariantViolation("anchor coincides with a neighbouring antenna")
    a = diff / nrm
    return a, min_dist + float(a @ np.asarray(t_j, dtype=float))


def worst_case_rate_value(realization, positions, v, sol, m, which):
    """Scalar worst-case rate used by the linearised rows (clamped form)."""
    rep = rt.worst_case_rates(realization, positions, v, sol)
    return float(rep.wc_private[m] if which == "private" else rep.wc_common[m])


def _p8_lp(realization, v, sol, positions, l, delta):
    """Build and solve the per-antenna LP; returns (t_new, rc, ups, lp_obj)."""
    cfg = realization.config
    m_users = cfg.M
    t0 = positions[l]
    num_vars = 2 + 2 * m_users
    idx_t = np.arange(2)
    idx_rc = np.arange(2, 2 + m_users)
    idx_up = np.arange(2 + m_users, num_vars)

    obj = np.zeros(num_vars)
    obj[idx_rc] = 1.0
    obj[idx_up] = 1.0

    rows, rhs = [], []

    def add_row(idx, coef, b):
        rows.append((np.asarray(idx, dtype=int), np.asarray(coef, dtype=float)))
        rhs.append(float(b))

    for m in range(m_users):
        gp, _ = rate_gradient(realization, positions, v, sol, m, l, "private")
        rp0 = worst_case_rate_value(realization, positions, v, sol, m, "private")
        add_row([idx_up[m], idx_t[0], idx_t[1]], [1.0, -gp[0], -gp[1]],
                rp0 - float(gp @ t0))
        gc, _ = rate_gradient(realization, positions, v, sol, m, l, "common")
        rc0 = worst_case_rate_value(realization, positions, v, sol, m, "common")
        add_row(np.concatenate([idx_rc, idx_t]),
                np.concatenate([np.ones(m_users), -gc]), rc0 - float(gc @ t0))
        add_row([idx_rc[m], idx_up[m]], [-1.0, -1.0], -cfg.R_min)

    for j in range(cfg.L):
        if j == l:
            continue
        a, b = linearize_separation(t0, positions[j], cfg.min_dist)
        add_row(idx_t, -a, -b)

    half = cfg.region_a / 2.0
    lower = np.concatenate([np.maximum(t0 - delta, -half),
                            np.zeros(m_users), -RATE_CAP * np.ones(m_users)])
    upper = np.concatenate([np.minimum(t0 + delta, half),
                            RATE_CAP * np.ones(m_users), RATE_CAP * np.ones(m_users)])
    if np.any(lower[:2] > upper[:2]):
        return None

    data, ridx, cidx = [], [], []
    for r, (idx, coef) in enumerate(rows):
        ridx.extend([r] * len(idx))
        cidx.extend(idx.tolist())
        data.extend(coef.tolist())
    prob = SDPProblem(num_vars=num_vars, objective=obj, lmi_blocks=[],
                      a_ineq=sp.csr_matrix((data, (ridx, cidx)),
                                           shape=(len(rows), num_vars)),
                      b_ineq=np.asarray(rhs), lower=lower, upper=upper)
    res = solve(prob, tol=max(1e-9, cfg.solver_tol), max_iters=cfg.solver_max_iters)
    if res.status not in ("Optimal",) and max(res.kkt_residuals) > 1e-6:
        return None
    x = res.x
    return x[idx_t].copy(), x[idx_rc].copy(), x[idx_up].copy(), float(obj @ x)


def solve_p8_single(realization: ChannelRealization, v: np.ndarray,
                    sol: rt.PrecodingSolution, positions: np.ndarray, l: int,
                    delta: float | None = None, max_halvings: int = 4):
    """Move antenna l; accept only if the true worst-case sum-rate holds up.

    Returns (new_positions, r_c, ups, lp_objective, accepted).  The trust
    region starts at lambda/4 (phases oscillate at wavelength scale) and is
    halved on every rejected step.
    """
    cfg = realization.config
    base, _ = pc.evaluate_solution(realization, positions, v, sol)
    delta = cfg.wavelength / 4.0 if delta is None else delta
    for _ in range(max_halvings + 1):
        out = _p8_lp(realization, v, sol, positions, l, delta)
        if out is None:
            delta *= 0.5
            continue
        t_new, r_c, ups, lp_obj = out
        cand = positions.copy()
        cand[l] = t_new
        try:
            check_antenna_layout(cand, cfg)
        except InvariantViolation:
            delta *= 0.5
            continue
        rep, _ = pc.evaluate_solution(realization, cand, v, sol)
        if rep.sum_rate >= base.sum_rate - 1e-12:
            return cand, r_c, ups, lp_obj, True
        delta *= 0.5
    return positions, base.r_c, None, base.sum_rate, False


def bcd_sweep(realization: ChannelRealization, v: np.ndarray,
              sol: rt.PrecodingSolution, state: PositionStageState):
    """Sweep all antennas until the metric stalls or the sweep cap is hit."""
    cfg = realization.config
    positions = state.positions.copy()
    metric = pc.evaluate_solution(realization, positions, v, sol)[0].sum_rate
    sweeps = 0
    for _ in range(max(1, cfg.max_sweeps_positions)):
        for l in range(cfg.L):
            positions, _, _, _, _ = solve_p8_single(realization, v, sol,
                                                    positions, l)
        sweeps += 1
        new_metric = pc.evaluate_solution(realization, positions, v, sol)[0].sum_rate
        if new_metric - metric <= 1e-4 * (1.0 + abs(new_metric)):
            metric = max(metric, new_metric)
            break
        metric = new_metric
    check_antenna_layout(positions, cfg)
    return PositionStageState(positions=positions, objective=metric, sweeps=sweeps)


def run_stage(realization: ChannelRealization, v: np.ndarray,
              sol: rt.PrecodingSolution, positions: np.ndarray):
    """Full placement stage; monotone by step acceptance."""
    state = PositionStageState(positions=positions)
    out = bcd_sweep(realization, v, sol, state)
    diagnostics = {"sweeps": out.sweeps, "objective": out.objective}
    return out.positions, diagnostics
