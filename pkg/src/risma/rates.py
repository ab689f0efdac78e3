"""SINR and rate computation for the rate-splitting downlink.

Nominal rates use the estimated end-to-end channels directly; worst-case
rates use the covariance form, where the numerator loses rho_hat^2 * tr(P)
and the denominator gains rho_hat^2 * tr(S) (the extremal trace value of a
norm-bounded Hermitian perturbation of the channel covariance; see
``theorem1_value``).  Worst-case numerators are clamped at zero before the
logarithm.  Rates are bps/Hz, logs base 2.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .channel import ChannelRealization, bs_ris_channel
from .linalg import InvariantViolation

RANK_ONE_RATIO = 1e-6


@dataclass
class PrecodingSolution:
    """Common/private beamformers, their lifted matrices and rate shares."""

    p_c: np.ndarray           # (L,)
    p_m: np.ndarray           # (M, L)
    P_c: np.ndarray           # (L, L) lifted
    P_m: np.ndarray           # (M, L, L) lifted
    r_c: np.ndarray           # (M,) common-rate shares
    feasible: bool = True

    @staticmethod
    def from_vectors(p_c: np.ndarray, p_m: np.ndarray,
                     r_c: np.ndarray | None = None) -> "PrecodingSolution":
        p_c = np.asarray(p_c, dtype=complex)
        p_m = np.atleast_2d(np.asarray(p_m, dtype=complex))
        m = p_m.shape[0]
        return PrecodingSolution(
            p_c=p_c,
            p_m=p_m,
            P_c=np.outer(p_c, p_c.conj()),
            P_m=np.stack([np.outer(p, p.conj()) for p in p_m]),
            r_c=np.zeros(m) if r_c is None else np.asarray(r_c, dtype=float),
        )

    def total_power(self) -> float:
        return float(np.real(np.trace(self.P_c) + sum(np.trace(p) for p in self.P_m)))


@dataclass
class RateReport:
    """Per-user rates; ``sum_rate`` = sum of shares plus worst-case private."""

    common: np.ndarray
    private: np.ndarray
    wc_common: np.ndarray
    wc_private: np.ndarray
    r_c: np.ndarray
    sum_rate: float
    rank_flags: dict = field(default_factory=dict)


def sinr_common(g_rows: np.ndarray, sol: PrecodingSolution, sigma2: float, m: int) -> float:
    """Common-stream SINR at user m from estimated channel vectors (M, L)."""
    g = g_rows[m]
    sig = abs(np.vdot(g, sol.p_c)) ** 2
    interf = sum(abs(np.vdot(g, p)) ** 2 for p in sol.p_m)
    return float(sig / (interf + sigma2))


def sinr_private(g_rows: np.ndarray, sol: PrecodingSolution, sigma2: float, m: int) -> float:
    """Private-stream SINR at user m; own stream excluded from interference."""
    g = g_rows[m]
    sig = abs(np.vdot(g, sol.p_m[m])) ** 2
    interf = sum(abs(np.vdot(g, p)) ** 2
                 for i, p in enumerate(sol.p_m) if i != m)
    return float(sig / (interf + sigma2))


def lift_through_reflection(a_mat: np.ndarray, h: np.ndarray) -> np.ndarray:
    """Hermitian PSD lift with tr(vv^H lift(A, h)) = |h^H diag(v) A^(1/2)...|^2.

    Concretely lift(A, h) = conj(A) * (h h^H) elementwise, which satisfies
    tr(vv^H lift(A, h)) = q^H A q with q = conj(v) * h, i.e. exactly
    |h^H diag(v) H p|^2 when A = H p p^H H^H.
    """
    return np.conj(a_mat) * np.outer(h, h.conj())


def rate_matrices(realization: ChannelRealization, positions: np.ndarray,
                  sol: PrecodingSolution):
    """Per-user quadratic-form matrices for the reflection-lifted rates.

    Returns a list of dicts with keys U1, U2 (common), W1, W2 (private) and
    the scalars tr_Pc, tr_Pm, tr_S1, tr_S2.
    """
    hh = bs_ris_channel(realization, positions)
    s1 = np.sum(sol.P_m, axis=0)
    a_c = hh @ sol.P_c @ hh.conj().T
    a_s1 = hh @ s1 @ hh.conj().T
    out = []
    for m in range(realization.config.M):
        h = realization.h_ris_user[m]
        s2 = s1 - sol.P_m[m]
        a_pm = hh @ sol.P_m[m] @ hh.conj().T
        out.append({
            "U1": lift_through_reflection(a_c, h),
            "U2": lift_through_reflection(a_s1, h),
            "W1": lift_through_reflection(a_pm, h),
            "W2": lift_through_reflection(a_s1 - a_pm, h),
            "tr_Pc": float(np.real(np.trace(sol.P_c))),
            "tr_Pm": float(np.real(np.trace(sol.P_m[m]))),
            "tr_S1": float(np.real(np.trace(s1))),
            "tr_S2": float(np.real(np.trace(s2))),
        })
    return out


def _rank_flag(p: np.ndarray) -> bool:
    w = np.linalg.eigvalsh(p)
    top = max(float(w[-1]), 0.0)
    second = max(float(w[-2]), 0.0) if w.size > 1 else 0.0
    return top > 0 and second / top > RANK_ONE_RATIO


def worst_case_rates_matrix(realization: ChannelRealization, positions: np.ndarray,
                            v_lift: np.ndarray, sol: PrecodingSolution) -> RateReport:
    """Worst-case and nominal covariance-form rates at a lifted reflection matrix."""
    cfg = realization.config
    mats = rate_matrices(realization, positions, sol)
    wc_c = np.zeros(cfg.M)
    wc_p = np.zeros(cfg.M)
    nom_c = np.zeros(cfg.M)
    nom_p = np.zeros(cfg.M)
    for m, d in enumerate(mats):
        rho2 = float(realization.rho_hat[m]) ** 2
        tvu1 = float(np.real(np.sum(v_lift * d["U1"].T)))
        tvu2 = float(np.real(np.sum(v_lift * d["U2"].T)))
        tvw1 = float(np.real(np.sum(v_lift * d["W1"].T)))
        tvw2 = float(np.real(np.sum(v_lift * d["W2"].T)))
        nom_c[m] = np.log2(1.0 + tvu1 / (tvu2 + cfg.sigma2))
        nom_p[m] = np.log2(1.0 + tvw1 / (tvw2 + cfg.sigma2))
        num_c = max(0.0, tvu1 - rho2 * d["tr_Pc"])
        den_c = tvu2 + rho2 * d["tr_S1"] + cfg.sigma2
        num_p = max(0.0, tvw1 - rho2 * d["tr_Pm"])
        den_p = tvw2 + rho2 * d["tr_S2"] + cfg.sigma2
        wc_c[m] = np.log2(1.0 + num_c / den_c)
        wc_p[m] = np.log2(1.0 + num_p / den_p)
    flags = {"P_c": _rank_flag(sol.P_c)}
    for m in range(cfg.M):
        flags[f"P_{m}"] = _rank_flag(sol.P_m[m])
    return RateReport(
        common=nom_c, private=nom_p, wc_common=wc_c, wc_private=wc_p,
        r_c=sol.r_c.copy(), sum_rate=float(np.sum(sol.r_c + wc_p)),
        rank_flags=flags,
    )


def worst_case_rates(realization: ChannelRealization, positions: np.ndarray,
                     ris, sol: PrecodingSolution) -> RateReport:
    """Worst-case rates at a unit-modulus reflection configuration."""
    v = ris.v if hasattr(ris, "v") else np.asarray(ris)
    return worst_case_rates_matrix(realization, positions,
                                   np.outer(v, v.conj()), sol)


def theorem1_value(psi: np.ndarray, rho2: float) -> float:
    """max tr(Psi Xi) over Hermitian Xi with spectral norm <= rho2.

    Requires Psi PSD of rank one; then the maximum equals rho2 * tr(Psi)
    (attained at Xi = rho2 * Psi / tr(Psi)).
    """
    if rho2 < 0:
        raise InvariantViolation("rho2 must be nonnegative")
    psi = np.asarray(psi)
    if np.linalg.norm(psi - psi.conj().T) > 1e-10 * max(1.0, np.linalg.norm(psi)):
        raise InvariantViolation("input must be Hermitian")
    w = np.linalg.eigvalsh(psi)
    top = float(w[-1])
    if w[0] < -1e-10 * max(top, 1.0):
        raise InvariantViolation("input must be positive semidefinite")
    if psi.shape[0] > 1 and top > 0 and float(w[-2]) > 1e-8 * top:
        raise InvariantViolation("input must have rank one")
    return rho2 * float(np.real(np.trace(psi)))


def sum_rate(report: RateReport) -> float:
    return float(np.sum(report.r_c + report.wc_private))
