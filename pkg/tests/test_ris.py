import numpy as np
import pytest

from risma import channel, precoding, rates, ris
from risma.channel import SystemConfig
from risma.linalg import InvariantViolation


def desk_setup(seed=0, solved=False, **kw):
    base = dict(L=2, N=4, M=2, L_t=2, L_r=2, rho=0.01,
                max_inner_ris=3, randomization_count=60)
    base.update(kw)
    cfg = SystemConfig(**base)
    rng = np.random.default_rng(seed)
    real = channel.new_realization(cfg, rng)
    t = channel.initial_antenna_grid(cfg)
    sol = precoding.initial_solution(real, t, np.ones(cfg.N, dtype=complex))
    if solved:
        sol, _, _ = precoding.run_stage(real, t, np.ones(cfg.N, dtype=complex),
                                        None, sol, rng)
    return cfg, real, t, sol, rng


def random_unit_diag_psd(rng, n):
    a = rng.normal(size=(n, n)) + 1j * rng.normal(size=(n, n))
    p = a @ a.conj().T + 1e-6 * np.eye(n)
    d = 1.0 / np.sqrt(np.real(np.diag(p)))
    return p * np.outer(d, d)


def test_ris_configuration_invariants():
    cfg = ris.RISConfiguration(phases=np.array([0.1, 7.0]))
    assert np.allclose(np.abs(cfg.v), 1.0)
    assert np.allclose(np.diag(cfg.lifted), 1.0)
    r2 = ris.RISConfiguration.from_vector(np.array([1.0 + 1.0j, -2.0j]))
    assert np.allclose(np.abs(r2.v), 1.0)
    with pytest.raises(InvariantViolation):
        ris.RISConfiguration.from_vector(np.array([0.0, 1.0]))


def test_assemble_rate_matrices_properties():
    cfg, real, t, sol, rng = desk_setup(seed=1)
    zero = rates.PrecodingSolution.from_vectors(
        np.zeros(cfg.L), np.zeros((cfg.M, cfg.L)))
    mats0 = ris.assemble_rate_matrices(real, t, zero)
    for d in mats0:
        for key in ("U1", "U2", "W1", "W2"):
            assert np.allclose(d[key], 0.0)
    mats = ris.assemble_rate_matrices(real, t, sol)
    for d in mats:
        assert d["tr_S2"] == pytest.approx(d["tr_S1"] - d["tr_Pm"], rel=1e-12)
        # trace identity against the direct rate evaluation, rank-one case
    v = np.exp(1j * rng.uniform(0, 2 * np.pi, cfg.N))
    v_lift = np.outer(v, v.conj())
    hh = channel.bs_ris_channel(real, t)
    for m, d in enumerate(mats):
        h = real.h_ris_user[m]
        direct = abs(h.conj() @ np.diag(v) @ hh @ sol.p_m[m]) ** 2
        assert float(np.real(np.sum(v_lift * d["W1"].T))) == pytest.approx(
            direct, rel=1e-9)


def test_fta_private_tightness_and_majorant():
    cfg, real, t, sol, rng = desk_setup(seed=2)
    mats = ris.assemble_rate_matrices(real, t, sol)
    d = mats[0]
    rho = float(real.rho_hat[0])
    anchor = random_unit_diag_psd(rng, cfg.N)
    f = ris.fta_private(anchor, d["W2"], d["tr_S2"], rho, cfg.sigma2)

    def logden(v_mat):
        return np.log2(float(np.real(np.sum(d["W2"] * v_mat.T)))
                       + rho ** 2 * d["tr_S2"] + cfg.sigma2)

    assert f.value(anchor) == pytest.approx(logden(anchor), abs=1e-10)
    for _ in range(500):
        v_mat = random_unit_diag_psd(rng, cfg.N)
        assert f.value(v_mat) >= logden(v_mat) - 1e-9
    # zero coefficient matrix: constant functional
    fz = ris.fta_private(anchor, np.zeros((cfg.N, cfg.N)), d["tr_S2"], rho, cfg.sigma2)
    assert fz.value(anchor) == pytest.approx(fz.value(np.eye(cfg.N)), abs=1e-12)
    with pytest.raises(InvariantViolation):
        ris.fta_private(anchor, -10 * np.eye(cfg.N), 0.0, 0.0, 1e-30)


def test_fta_common_tightness_and_majorant():
    cfg, real, t, sol, rng = desk_setup(seed=3)
    d = ris.assemble_rate_matrices(real, t, sol)[1]
    rho = float(real.rho_hat[1])
    anchor = random_unit_diag_psd(rng, cfg.N)
    f = ris.fta_common(anchor, d["U2"], d["tr_S1"], rho, cfg.sigma2)

    def logden(v_mat):
        return np.log2(float(np.real(np.sum(d["U2"] * v_mat.T)))
                       + rho ** 2 * d["tr_S1"] + cfg.sigma2)

    assert f.value(anchor) == pytest.approx(logden(anchor), abs=1e-10)
    for _ in range(500):
        v_mat = random_unit_diag_psd(rng, cfg.N)
        assert f.value(v_mat) >= logden(v_mat) - 1e-9


def test_solve_p6_single_element_trivial():
    cfg, real, t, sol, rng = desk_setup(seed=4, N=1, solved=True, R_min=0.1)
    v_lift, r_c, state, obj = ris.solve_p6(real, t, sol, None)
    assert v_lift.shape == (1, 1)
    assert v_lift[0, 0] == pytest.approx(1.0, abs=1e-6)
    report, _ = precoding.evaluate_solution(real, t, np.ones(1, dtype=complex), sol)
    # objective of P6 is sum of (r_c + wc private) surrogates at the trivial V
    assert obj == pytest.approx(
        float(np.sum(r_c + report.wc_private)), abs=1e-4)


def test_solve_p6_sca_monotone():
    cfg, real, t, sol, rng = desk_setup(seed=5, N=6, solved=True, R_min=0.25)
    state = None
    prev_obj = -np.inf
    for _ in range(3):
        v_lift, r_c, state, obj = ris.solve_p6(real, t, sol, state)
        assert obj >= prev_obj - 1e-6
        prev_obj = obj
    assert np.allclose(np.real(np.diag(v_lift)), 1.0, atol=1e-6)
    assert np.linalg.eigvalsh(v_lift)[0] >= -1e-7


def test_solve_p6_against_phase_grid():
    # single user, no uncertainty, two elements: exhaustive phase grid oracle
    cfg = SystemConfig(L=1, N=2, M=1, L_t=1, L_r=1, rho=0.0,
                       max_inner_ris=6, randomization_count=40)
    rng = np.random.default_rng(6)
    real = channel.new_realization(cfg, rng)
    t = np.zeros((1, 2))
    sol = precoding.initial_solution(real, t, np.ones(cfg.N, dtype=complex))
    v_lift, r_c, state, obj = ris.solve_p6(real, t, sol, None)

    hh = channel.bs_ris_channel(real, t)
    h = real.h_ris_user[0]
    thetas = np.linspace(0, 2 * np.pi, 360, endpoint=False)
    t1, t2 = np.meshgrid(thetas, thetas, indexing="ij")
    vgrid = np.stack([np.exp(1j * t1).ravel(), np.exp(1j * t2).ravel()], axis=1)
    own = np.abs((vgrid * (h.conj()[None, :])) @ (hh @ sol.p_m[0])) ** 2
    com = np.abs((vgrid * (h.conj()[None, :])) @ (hh @ sol.p_c)) ** 2
    grid_best = np.max(np.log2(1 + com / (own + cfg.sigma2))
                       + np.log2(1 + own / cfg.sigma2))
    assert obj >= grid_best - 0.02 * abs(grid_best)
    ris_cfg = ris.randomize_unit_modulus(v_lift, real, t, sol, rng)
    rate = precoding.evaluate_solution(real, t, ris_cfg.v, sol)[0].sum_rate
    assert rate >= grid_best * (1 - 0.02)


def test_randomize_unit_modulus_rank_one():
    cfg, real, t, sol, rng = desk_setup(seed=7)
    phases = rng.uniform(0, 2 * np.pi, cfg.N)
    v = np.exp(1j * phases)
    out = ris.randomize_unit_modulus(np.outer(v, v.conj()), real, t, sol, rng)
    assert np.allclose(np.abs(out.v), 1.0, atol=1e-12)
    rel = out.v * np.conj(out.v[0])
    ref = v * np.conj(v[0])
    assert np.allclose(rel, ref, atol=1e-8)


def test_randomize_unit_modulus_rank_two_gap():
    cfg, real, t, sol, rng = desk_setup(seed=8)
    phases = rng.uniform(0, 2 * np.pi, cfg.N)
    v = np.exp(1j * phases)
    w = np.exp(1j * rng.uniform(0, 2 * np.pi, cfg.N))
    v_lift = np.outer(v, v.conj()) + 0.05 * np.outer(w, w.conj())
    ref_rate = precoding.evaluate_solution(real, t, v, sol)[0].sum_rate
    out = ris.randomize_unit_modulus(v_lift, real, t, sol, rng, count=200)
    rate = precoding.evaluate_solution(real, t, out.v, sol)[0].sum_rate
    assert rate >= 0.95 * ref_rate


def test_run_stage_never_decreases():
    cfg, real, t, sol, rng = desk_setup(seed=9, N=6, solved=True, R_min=0.25)
    prev = ris.RISConfiguration(phases=np.zeros(cfg.N))
    prev_rate = precoding.evaluate_solution(real, t, prev.v, sol)[0].sum_rate
    out, state, diag = ris.run_stage(real, t, sol, None, prev, rng)
    rate = precoding.evaluate_solution(real, t, out.v, sol)[0].sum_rate
    assert rate >= prev_rate - 1e-9


def test_global_phase_invariance_of_rates():
    cfg, real, t, sol, rng = desk_setup(seed=10)
    v = np.exp(1j * rng.uniform(0, 2 * np.pi, cfg.N))
    rep1 = rates.worst_case_rates(real, t, v, sol)
    rep2 = rates.worst_case_rates(real, t, v * np.exp(1j * 1.234), sol)
    assert np.allclose(rep1.wc_common, rep2.wc_common, atol=1e-10)
    assert np.allclose(rep1.wc_private, rep2.wc_private, atol=1e-10)


def test_p6_solution_implies_true_rate_inequality():
    # the linearised private row implies the true difference-of-logs row
    cfg, real, t, sol, rng = desk_setup(seed=11, N=6, solved=True, R_min=0.25)
    v_lift, r_c, state, obj = ris.solve_p6(real, t, sol, None)
    mats = state.mats
    sig2 = cfg.sigma2
    for m in range(cfg.M):
        d = mats[m]
        rho2 = float(real.rho_hat[m]) ** 2
        num = float(np.real(np.sum(v_lift * d["W1"].T))) - rho2 * d["tr_Pm"]
        den = float(np.real(np.sum(v_lift * d["W2"].T))) + rho2 * d["tr_S2"] + sig2
        true_rate = np.log2(1 + max(0.0, num) / den)
        # with the returned r_c, the private slack the SDP certified holds
        assert float(r_c[m]) + true_rate >= cfg.R_min - 1e-5
