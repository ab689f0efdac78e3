import numpy as np
import pytest
import scipy.sparse as sp

from risma.conic import (
    ComplexLMIBuilder,
    HermitianVariable,
    SDPProblem,
    check_kkt,
    dense_block,
    smat,
    solve,
    svec,
    symkron,
)
from _oracles import certified_max, feasible_mask, random_small_sdp


def _two_by_two_t():
    # maximize t s.t. [[1, t], [t, 1]] >= 0  ->  t* = 1
    b1 = np.array([[0.0, 1.0], [1.0, 0.0]])
    return SDPProblem(num_vars=1, objective=np.array([1.0]),
                      lmi_blocks=[dense_block(1, np.eye(2), {0: b1})])


def test_svec_trace_compat():
    rng = np.random.default_rng(0)
    a = rng.normal(size=(5, 5))
    a = a + a.T
    b = rng.normal(size=(5, 5))
    b = b + b.T
    assert svec(a) @ svec(b) == pytest.approx(np.trace(a @ b))
    assert np.allclose(smat(svec(a), 5), a)


def test_symkron_action():
    rng = np.random.default_rng(1)
    g = rng.normal(size=(4, 4))
    g = g + g.T
    y = rng.normal(size=(4, 4))
    y = y + y.T
    assert np.allclose(symkron(g) @ svec(y), svec(g @ y @ g), atol=1e-12)


def test_psd_boundary_2x2():
    res = solve(_two_by_two_t())
    assert res.status == "Optimal"
    assert res.x[0] == pytest.approx(1.0, abs=1e-6)
    assert res.objective_value == pytest.approx(1.0, abs=1e-6)


def test_scalar_block_cap():
    # maximize x s.t. 3 - x >= 0 (1x1 LMI)
    prob = SDPProblem(num_vars=1, objective=np.array([1.0]),
                      lmi_blocks=[dense_block(1, np.array([[3.0]]), {0: np.array([[-1.0]])})])
    res = solve(prob)
    assert res.status == "Optimal"
    assert res.x[0] == pytest.approx(3.0, abs=1e-6)


def test_pure_lp_with_equalities():
    # maximize x + y s.t. x + y = 1, 0 <= x, y <= 1
    prob = SDPProblem(
        num_vars=2,
        objective=np.array([1.0, 1.0]),
        a_eq=sp.csr_matrix(np.array([[1.0, 1.0]])),
        b_eq=np.array([1.0]),
        lower=np.zeros(2),
        upper=np.ones(2),
    )
    res = solve(prob)
    assert res.status == "Optimal"
    assert res.objective_value == pytest.approx(1.0, abs=1e-7)


def test_infeasible_detection():
    # x <= -1 and x >= 1
    prob = SDPProblem(
        num_vars=1,
        objective=np.array([1.0]),
        a_ineq=sp.csr_matrix(np.array([[1.0], [-1.0]])),
        b_ineq=np.array([-1.0, -1.0]),
    )
    res = solve(prob)
    assert res.status == "Infeasible"


def test_infeasible_lmi():
    # [[x-1, 0], [0, -1-x]] >= 0 requires x >= 1 and x <= -1
    b0 = np.diag([-1.0, -1.0])
    b1 = np.diag([1.0, -1.0])
    prob = SDPProblem(num_vars=1, objective=np.array([0.0]),
                      lmi_blocks=[dense_block(1, b0, {0: b1})])
    res = solve(prob)
    assert res.status == "Infeasible"


def test_complex_block_modulus_cap():
    # maximize t s.t. [[1, t*(1+i)/sqrt(2)], [t*(1-i)/sqrt(2), 1]] >= 0 -> t* = 1
    builder = ComplexLMIBuilder(2, 1)
    builder.add_const(np.eye(2, dtype=complex))
    m = np.zeros((2, 2), dtype=complex)
    m[0, 1] = (1 + 1j) / np.sqrt(2)
    m[1, 0] = np.conj(m[0, 1])
    builder.add_term(0, m)
    prob = SDPProblem(num_vars=1, objective=np.array([1.0]),
                      lmi_blocks=[builder.build()])
    res = solve(prob)
    assert res.status == "Optimal"
    assert abs(res.x[0]) == pytest.approx(1.0, abs=1e-6)


def test_hermitian_variable_layout_and_psd_block():
    rng = np.random.default_rng(2)
    hv = HermitianVariable(3, start=1)
    x = np.zeros(1 + hv.num_vars)
    a = rng.normal(size=(3, 3)) + 1j * rng.normal(size=(3, 3))
    p = a @ a.conj().T
    hv.assign(x, p)
    assert np.allclose(hv.value(x), p)
    m = rng.normal(size=(3, 3)) + 1j * rng.normal(size=(3, 3))
    m = 0.5 * (m + m.conj().T)
    idx, coef = hv.trace_row(m)
    assert coef @ x[idx] == pytest.approx(float(np.real(np.trace(p @ m))), rel=1e-12)
    blk = hv.psd_block(x.size)
    from risma.linalg import embed_hermitian

    assert np.allclose(blk.affine_value(x), embed_hermitian(p), atol=1e-12)


def test_sdp_trace_constrained_eigenvalue():
    # maximize tr(C P) s.t. P >= 0 hermitian, tr(P) = 1: optimum = lambda_max(C)
    rng = np.random.default_rng(3)
    a = rng.normal(size=(3, 3)) + 1j * rng.normal(size=(3, 3))
    c_mat = 0.5 * (a + a.conj().T)
    hv = HermitianVariable(3, start=0)
    nv = hv.num_vars
    idx, coef = hv.trace_row(c_mat)
    obj = np.zeros(nv)
    obj[idx] = coef
    tr_idx, tr_coef = hv.trace_row(np.eye(3, dtype=complex))
    a_eq = sp.csr_matrix((tr_coef, (np.zeros(len(tr_idx), dtype=int), tr_idx)),
                         shape=(1, nv))
    prob = SDPProblem(num_vars=nv, objective=obj,
                      lmi_blocks=[hv.psd_block(nv)],
                      a_eq=a_eq, b_eq=np.array([1.0]))
    res = solve(prob)
    assert res.status == "Optimal"
    lam_max = float(np.linalg.eigvalsh(c_mat)[-1])
    assert res.objective_value == pytest.approx(lam_max, abs=1e-6)


def test_random_sdps_match_grid_oracle():
    rng = np.random.default_rng(2024)
    n_checked = 0
    for _ in range(10):
        prob = random_small_sdp(rng, num_vars=int(rng.integers(2, 5)))
        res = solve(prob)
        assert res.status == "Optimal"
        oracle, _, cert_gap = certified_max(prob, prob.lower, prob.upper)
        assert cert_gap <= 1e-5
        assert res.objective_value == pytest.approx(oracle, abs=1e-5)
        n_checked += 1
    assert n_checked == 10


def test_check_kkt_recomputation():
    prob = _two_by_two_t()
    res = solve(prob)
    pres, dres, gap = check_kkt(prob, res)
    assert pres <= 1e-8 and dres <= 1e-7 and gap <= 1e-7
    # deliberate violation
    bad = res
    bad.x = res.x + 0.1
    pres2, _, _ = check_kkt(prob, bad)
    assert pres2 > 1e-3


def test_gap_positive_at_interior_point():
    prob = _two_by_two_t()
    res = solve(prob)
    res.x = np.array([0.0])  # strictly interior
    _, _, gap = check_kkt(prob, res)
    assert gap > 1e-8


def test_determinism():
    rng = np.random.default_rng(7)
    prob = random_small_sdp(rng, num_vars=4)
    r1 = solve(prob)
    r2 = solve(prob)
    assert np.array_equal(r1.x, r2.x)
    assert r1.iterations == r2.iterations


def test_objective_scaling_invariance():
    rng = np.random.default_rng(8)
    prob = random_small_sdp(rng, num_vars=3)
    r1 = solve(prob)
    scaled = SDPProblem(num_vars=prob.num_vars, objective=prob.objective * 37.0,
                        lmi_blocks=prob.lmi_blocks, lower=prob.lower, upper=prob.upper)
    r2 = solve(scaled)
    assert np.allclose(r1.x, r2.x, atol=1e-5)


def test_upper_bound_certificate():
    rng = np.random.default_rng(9)
    prob = random_small_sdp(rng, num_vars=3)
    res = solve(prob)
    pts = rng.uniform(-2, 2, size=(4000, 3))
    mask = feasible_mask(prob, pts)
    if np.any(mask):
        vals = pts[mask] @ prob.objective
        assert np.max(vals) <= res.objective_value + 1e-6


def test_json_round_trip():
    prob = _two_by_two_t()
    prob.lower = np.array([-5.0])
    prob.upper = np.array([5.0])
    s = prob.to_json()
    prob2 = SDPProblem.from_json(s)
    r1, r2 = solve(prob), solve(prob2)
    assert r1.objective_value == pytest.approx(r2.objective_value, abs=1e-9)


def test_maxiters_status():
    prob = _two_by_two_t()
    res = solve(prob, tol=1e-30, max_iters=5)
    assert res.status in ("MaxIters", "NumericalFailure")
    assert res.iterations <= 5
