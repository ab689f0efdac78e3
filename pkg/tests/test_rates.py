import numpy as np
import pytest

from risma import channel, rates
from risma.channel import SystemConfig
from risma.linalg import InvariantViolation


def small_setup(seed=0, **kw):
    base = dict(L=2, N=4, M=2, L_t=2, L_r=2)
    base.update(kw)
    cfg = SystemConfig(**base)
    rng = np.random.default_rng(seed)
    real = channel.new_realization(cfg, rng)
    t = channel.initial_antenna_grid(cfg)
    v = np.exp(1j * rng.uniform(0, 2 * np.pi, cfg.N))
    g_rows = np.stack([channel.effective_user_channel(real, t, v, m)
                       for m in range(cfg.M)])
    p_c = rng.normal(size=cfg.L) + 1j * rng.normal(size=cfg.L)
    p_m = rng.normal(size=(cfg.M, cfg.L)) + 1j * rng.normal(size=(cfg.M, cfg.L))
    scale = np.sqrt(cfg.P_t / (np.linalg.norm(p_c) ** 2 + np.linalg.norm(p_m) ** 2))
    sol = rates.PrecodingSolution.from_vectors(scale * p_c, scale * p_m)
    return cfg, real, t, v, g_rows, sol, rng


def test_sinr_common_cases():
    cfg, real, t, v, g_rows, sol, rng = small_setup()
    zero_c = rates.PrecodingSolution.from_vectors(np.zeros(cfg.L), sol.p_m)
    assert rates.sinr_common(g_rows, zero_c, cfg.sigma2, 0) == 0.0
    only_c = rates.PrecodingSolution.from_vectors(sol.p_c, np.zeros((cfg.M, cfg.L)))
    expect = abs(np.vdot(g_rows[1], sol.p_c)) ** 2 / cfg.sigma2
    assert rates.sinr_common(g_rows, only_c, cfg.sigma2, 1) == pytest.approx(expect)
    # direct evaluation oracle
    m = 0
    num = abs(np.vdot(g_rows[m], sol.p_c)) ** 2
    den = sum(abs(np.vdot(g_rows[m], p)) ** 2 for p in sol.p_m) + cfg.sigma2
    assert rates.sinr_common(g_rows, sol, cfg.sigma2, m) == pytest.approx(num / den)


def test_sinr_private_cases():
    cfg, real, t, v, g_rows, sol, rng = small_setup()
    m = 1
    num = abs(np.vdot(g_rows[m], sol.p_m[m])) ** 2
    den = abs(np.vdot(g_rows[m], sol.p_m[0])) ** 2 + cfg.sigma2
    assert rates.sinr_private(g_rows, sol, cfg.sigma2, m) == pytest.approx(num / den)
    # single user: no interference term
    cfg1 = SystemConfig(L=2, N=4, M=1, L_t=2, L_r=2)
    rng1 = np.random.default_rng(1)
    real1 = channel.new_realization(cfg1, rng1)
    g1 = np.stack([channel.effective_user_channel(
        real1, channel.initial_antenna_grid(cfg1), np.ones(cfg1.N), 0)])
    sol1 = rates.PrecodingSolution.from_vectors(np.zeros(2), g1[0][None, :])
    expect = np.linalg.norm(g1[0]) ** 4 / cfg1.sigma2
    assert rates.sinr_private(g1, sol1, cfg1.sigma2, 0) == pytest.approx(expect)


def test_sinr_private_orthogonal_precoders():
    cfg, real, t, v, g_rows, sol, rng = small_setup(seed=3)
    g = g_rows[0]
    # interference precoder orthogonal to user 0's channel
    p1 = np.array([-np.conj(g[1]), np.conj(g[0])])
    assert abs(np.vdot(g, p1)) <= 1e-12 * np.linalg.norm(g) * np.linalg.norm(p1)
    sol2 = rates.PrecodingSolution.from_vectors(sol.p_c, np.stack([g, p1]))
    expect = np.linalg.norm(g) ** 4 / cfg.sigma2
    assert rates.sinr_private(g_rows, sol2, cfg.sigma2, 0) == pytest.approx(expect, rel=1e-9)


def test_lift_identity():
    # tr(v v^H lift(H P H^H, h)) equals |h^H diag(v) H p|^2 for rank-one P
    cfg, real, t, v, g_rows, sol, rng = small_setup(seed=4)
    hh = channel.bs_ris_channel(real, t)
    h = real.h_ris_user[0]
    p = sol.p_m[0]
    lift = rates.lift_through_reflection(hh @ np.outer(p, p.conj()) @ hh.conj().T, h)
    assert np.linalg.norm(lift - lift.conj().T) <= 1e-12 * np.linalg.norm(lift)
    v_lift = np.outer(v, v.conj())
    val = float(np.real(np.sum(v_lift * lift.T)))
    direct = abs(h.conj() @ np.diag(v) @ hh @ p) ** 2
    assert val == pytest.approx(direct, rel=1e-10)


def test_worst_case_zero_uncertainty_matches_nominal():
    cfg, real, t, v, g_rows, sol, rng = small_setup(seed=5)
    real.rho_hat = np.zeros(cfg.M)
    rep = rates.worst_case_rates(real, t, v, sol)
    assert np.allclose(rep.wc_common, rep.common, atol=1e-10)
    assert np.allclose(rep.wc_private, rep.private, atol=1e-10)
    # nominal covariance-form equals the vector-form rates at the estimate
    for m in range(cfg.M):
        snr = rates.sinr_private(g_rows, sol, cfg.sigma2, m)
        assert rep.private[m] == pytest.approx(np.log2(1 + snr), rel=1e-9)
        snc = rates.sinr_common(g_rows, sol, cfg.sigma2, m)
        assert rep.common[m] == pytest.approx(np.log2(1 + snc), rel=1e-9)


def test_worst_case_clamps_at_zero():
    cfg, real, t, v, g_rows, sol, rng = small_setup(seed=6)
    real.rho_hat = 1e6 * np.ones(cfg.M)
    rep = rates.worst_case_rates(real, t, v, sol)
    assert np.all(rep.wc_common == 0.0)
    assert np.all(rep.wc_private == 0.0)


def _perturbed_private_rate(g_mat, d_g, sol, m, sigma2):
    """Covariance-form private rate at covariance G + dG."""
    gm = g_mat + d_g
    num = float(np.real(np.trace(sol.P_m[m] @ gm)))
    den = float(np.real(sum(np.trace(sol.P_m[i] @ gm)
                            for i in range(sol.p_m.shape[0]) if i != m))) + sigma2
    return np.log2(1.0 + max(num, 0.0) / den)


def test_worst_case_is_lower_bound_by_sampling():
    cfg, real, t, v, g_rows, sol, rng = small_setup(seed=7, rho=0.05)
    rep = rates.worst_case_rates(real, t, v, sol)
    m = 0
    g_mat = channel.estimated_covariance(real, t, v, m)
    rho2 = real.rho_hat[m] ** 2
    worst_seen = np.inf
    for _ in range(10000):
        w = rng.normal(size=(cfg.L, cfg.L)) + 1j * rng.normal(size=(cfg.L, cfg.L))
        d_g = 0.5 * (w + w.conj().T)
        d_g *= rho2 / max(np.abs(np.linalg.eigvalsh(d_g)).max(), 1e-30)
        worst_seen = min(worst_seen,
                         _perturbed_private_rate(g_mat, d_g, sol, m, cfg.sigma2))
    assert rep.wc_private[m] <= worst_seen + 1e-12


def test_worst_case_tight_for_orthogonal_ranges():
    # when own-stream and interference precoders occupy orthogonal subspaces
    # the per-term extremal perturbations are compatible and the bound is met
    cfg = SystemConfig(L=2, N=4, M=2, L_t=2, L_r=2, rho=0.03)
    rng = np.random.default_rng(8)
    real = channel.new_realization(cfg, rng)
    t = channel.initial_antenna_grid(cfg)
    v = np.ones(cfg.N, dtype=complex)
    p_own = np.array([1.0 + 0j, 0.0])
    p_other = np.array([0.0, 1.0 + 0j])
    sol = rates.PrecodingSolution.from_vectors(np.zeros(2), np.stack([p_own, p_other]))
    m = 0
    rep = rates.worst_case_rates(real, t, v, sol)
    g_mat = channel.estimated_covariance(real, t, v, m)
    rho2 = real.rho_hat[m] ** 2
    d_star = rho2 * (np.outer(p_other, p_other.conj()) - np.outer(p_own, p_own.conj()))
    assert np.abs(np.linalg.eigvalsh(d_star)).max() <= rho2 + 1e-12
    realized = _perturbed_private_rate(g_mat, d_star, sol, m, cfg.sigma2)
    assert rep.wc_private[m] == pytest.approx(realized, abs=1e-10)


def test_theorem1_trivial_and_oracle():
    assert rates.theorem1_value(np.diag([1.0, 0.0]), 0.5) == pytest.approx(0.5)
    assert rates.theorem1_value(np.diag([2.0, 0.0]), 0.0) == 0.0
    rng = np.random.default_rng(9)
    n = 4
    u = rng.normal(size=n) + 1j * rng.normal(size=n)
    psi = np.outer(u, u.conj())
    rho2 = 0.7
    val = rates.theorem1_value(psi, rho2)
    # sampling plus analytic-candidate oracle
    best = -np.inf
    for _ in range(20000):
        w = rng.normal(size=(n, n)) + 1j * rng.normal(size=(n, n))
        xi = 0.5 * (w + w.conj().T)
        xi *= rho2 * rng.uniform() / np.abs(np.linalg.eigvalsh(xi)).max()
        best = max(best, float(np.real(np.trace(psi @ xi))))
    analytic = rho2 * psi / np.real(np.trace(psi))
    best = max(best, float(np.real(np.trace(psi @ analytic))))
    assert val == pytest.approx(best, abs=1e-9)
    assert best <= val + 1e-9


def test_theorem1_preconditions():
    with pytest.raises(InvariantViolation):
        rates.theorem1_value(np.diag([1.0, 1.0]), 0.5)  # rank 2
    with pytest.raises(InvariantViolation):
        rates.theorem1_value(np.diag([-1.0, 0.0]), 0.5)  # not PSD
    with pytest.raises(InvariantViolation):
        rates.theorem1_value(np.array([[0.0, 1.0], [0.0, 0.0]]), 0.5)
    with pytest.raises(InvariantViolation):
        rates.theorem1_value(np.diag([1.0, 0.0]), -0.1)


def test_sum_rate_additivity():
    rep = rates.RateReport(
        common=np.array([1.0, 2.0]), private=np.array([0.5, 0.25]),
        wc_common=np.array([0.9, 1.8]), wc_private=np.array([0.4, 0.2]),
        r_c=np.array([0.3, 0.1]), sum_rate=0.0)
    assert rates.sum_rate(rep) == pytest.approx(0.3 + 0.4 + 0.1 + 0.2)
    zero = rates.RateReport(
        common=np.zeros(2), private=np.zeros(2), wc_common=np.zeros(2),
        wc_private=np.zeros(2), r_c=np.zeros(2), sum_rate=0.0)
    assert rates.sum_rate(zero) == 0.0


def test_rate_monotone_in_signal_power():
    cfg, real, t, v, g_rows, sol, rng = small_setup(seed=10)
    rep1 = rates.worst_case_rates(real, t, v, sol)
    boosted = rates.PrecodingSolution.from_vectors(sol.p_c, sol.p_m.copy())
    boosted.P_m = sol.P_m.copy()
    boosted.P_m[0] = 1.5 * sol.P_m[0]
    # keep interference fixed for user 0 by scaling only its own lifted matrix
    rep2 = rates.worst_case_rates_matrix(real, t, np.outer(v, v.conj()), boosted)
    assert rep2.wc_private[0] >= rep1.wc_private[0] - 1e-12
