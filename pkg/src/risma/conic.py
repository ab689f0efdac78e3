"""Small dense interior-point solver for linear objectives over block LMIs.

Solves problems of the form::

    maximize    c . x
    subject to  B0_k + sum_i x_i Bi_k  >= 0   (PSD, one block per k)
                A x <= b,   E x = f,   lb <= x <= ub

with a primal-dual path-following method using Nesterov-Todd scaling on the
real symmetric blocks (complex Hermitian LMIs enter through the fixed real
embedding of :mod:`risma.linalg`) and a Mehrotra predictor-corrector step.
Scalar inequalities live in a nonnegative orthant; second-order-cone needs
are expressed by callers as 2x2 / arrow LMI blocks, so the PSD cone is the
only matrix cone kind.

Infeasible starts are handled directly (slacks initialised off the affine
manifold) rather than via a homogeneous self-dual embedding; primal
infeasibility is detected through an approximate Farkas certificate: a
normalised dual ray (Z, z, y) with vanishing homogeneous dual residual and
negative dual objective.  See ``solve`` for the exit statuses.

All computations are deterministic; identical inputs give identical results.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.linalg import cho_factor, cho_solve

from .linalg import embed_hermitian

# ---------------------------------------------------------------------------
# svec utilities (real symmetric matrices <-> packed vectors, tr-compatible)
# ---------------------------------------------------------------------------

_SVEC_CACHE: dict[int, tuple[np.ndarray, np.ndarray, np.ndarray]] = {}


def svec_indices(n: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(rows, cols, scale) of the packed lower triangle, rows >= cols.

    Off-diagonal entries carry scale sqrt(2) so that
    svec(A) . svec(B) = tr(A B).
    """
    cached = _SVEC_CACHE.get(n)
    if cached is not None:
        return cached
    rows, cols = np.tril_indices(n)
    scale = np.where(rows == cols, 1.0, np.sqrt(2.0))
    _SVEC_CACHE[n] = (rows, cols, scale)
    return rows, cols, scale


def svec(a: np.ndarray) -> np.ndarray:
    n = a.shape[0]
    r, c, s = svec_indices(n)
    return a[r, c] * s


def smat(v: np.ndarray, n: int) -> np.ndarray:
    r, c, s = svec_indices(n)
    a = np.zeros((n, n))
    vals = v / s
    a[r, c] = vals
    a[c, r] = vals
    return a


def _packed_index(i: int, j: int) -> int:
    """Position of entry (i, j), i >= j, in np.tril_indices order."""
    return i * (i + 1) // 2 + j


def symkron(g: np.ndarray) -> np.ndarray:
    """Dense matrix K with K @ svec(Y) = svec(G Y G) for symmetric G, Y."""
    r, c, s = svec_indices(g.shape[0])
    k = 0.5 * (g[np.ix_(r, r)] * g[np.ix_(c, c)] + g[np.ix_(r, c)] * g[np.ix_(c, r)])
    k *= np.outer(s, s)
    return k


# ---------------------------------------------------------------------------
# Problem representation
# ---------------------------------------------------------------------------


@dataclass
class LMIBlock:
    """One affine PSD constraint B0 + sum_i x_i Bi >= 0, stored in svec form.

    ``q0`` is svec(B0); column i of the sparse ``q`` is svec(Bi) (empty
    columns for variables that do not enter the block).
    """

    dim: int
    q0: np.ndarray
    q: sp.csc_matrix

    def affine_value(self, x: np.ndarray) -> np.ndarray:
        return smat(self.q0 + self.q @ x, self.dim)

    def adjoint(self, z: np.ndarray) -> np.ndarray:
        """A^*(Z)_i = tr(Bi Z) for symmetric Z."""
        return self.q.T @ svec(z)

    def dense_q(self) -> np.ndarray:
        q = getattr(self, "_qdense", None)
        if q is None:
            q = self.q.toarray()
            object.__setattr__(self, "_qdense", q)
        return q


def _block_from_triplets(dim, num_vars, const_entries, var_entries) -> LMIBlock:
    """Assemble an LMIBlock from (i, j, val) triplets with i >= j."""
    d = dim * (dim + 1) // 2
    _, _, s = svec_indices(dim)
    q0 = np.zeros(d)
    for i, j, v in const_entries:
        p = _packed_index(max(i, j), min(i, j))
        q0[p] += v * s[p]
    data, rows, cols = [], [], []
    for var, i, j, v in var_entries:
        p = _packed_index(max(i, j), min(i, j))
        rows.append(p)
        cols.append(var)
        data.append(v * s[p])
    q = sp.csc_matrix((data, (rows, cols)), shape=(d, num_vars))
    q.sum_duplicates()
    return LMIBlock(dim=dim, q0=q0, q=q)


def dense_block(num_vars: int, b0: np.ndarray, terms: dict[int, np.ndarray]) -> LMIBlock:
    """LMIBlock from dense real symmetric b0 and {var: coefficient matrix}."""
    n = b0.shape[0]
    q0 = svec(np.asarray(b0, dtype=float))
    d = q0.size
    cols, data, rows = [], [], []
    for var, m in sorted(terms.items()):
        v = svec(np.asarray(m, dtype=float))
        nz = np.nonzero(v)[0]
        rows.extend(nz.tolist())
        cols.extend([var] * nz.size)
        data.extend(v[nz].tolist())
    q = sp.csc_matrix((data, (rows, cols)), shape=(d, num_vars))
    return LMIBlock(dim=n, q0=q0, q=q)


class ComplexLMIBuilder:
    """Accumulates a complex Hermitian affine map, embeds it on ``build``."""

    def __init__(self, dim: int, num_vars: int):
        self.dim = dim
        self.num_vars = num_vars
        self.b0 = np.zeros((dim, dim), dtype=complex)
        self.terms: dict[int, np.ndarray] = {}

    def add_const(self, m: np.ndarray) -> None:
        self.b0 = self.b0 + m

    def add_term(self, var: int, m: np.ndarray) -> None:
        cur = self.terms.get(var)
        self.terms[var] = np.asarray(m, dtype=complex) if cur is None else cur + m

    def build(self) -> LMIBlock:
        b0 = embed_hermitian(self.b0)
        terms = {v: embed_hermitian(m) for v, m in self.terms.items()}
        return dense_block(self.num_vars, b0, terms)


class HermitianVariable:
    """Index layout of a complex Hermitian matrix variable.

    Real parametrisation: n diagonal entries, then (re, im) pairs for the
    upper triangle (i < j) in lexicographic order; n^2 scalars total.
    """

    def __init__(self, n: int, start: int):
        self.n = n
        self.start = start
        self.num_vars = n * n
        self._pairs = [(i, j) for i in range(n) for j in range(i + 1, n)]
        self._pair_pos = {p: k for k, p in enumerate(self._pairs)}

    def diag_index(self, i: int) -> int:
        return self.start + i

    def offdiag_index(self, i: int, j: int) -> tuple[int, int]:
        """(re_index, im_index) of entry (i, j), i < j."""
        k = self._pair_pos[(i, j)]
        return self.start + self.n + 2 * k, self.start + self.n + 2 * k + 1

    def value(self, x: np.ndarray) -> np.ndarray:
        n = self.n
        p = np.zeros((n, n), dtype=complex)
        p[np.diag_indices(n)] = x[self.start:self.start + n]
        base = self.start + n
        for k, (i, j) in enumerate(self._pairs):
            re, im = x[base + 2 * k], x[base + 2 * k + 1]
            p[i, j] = re + 1j * im
            p[j, i] = re - 1j * im
        return p

    def assign(self, x: np.ndarray, p: np.ndarray) -> None:
        """Write the parameters of Hermitian p into x (inverse of value)."""
        n = self.n
        x[self.start:self.start + n] = np.real(np.diag(p))
        base = self.start + n
        for k, (i, j) in enumerate(self._pairs):
            x[base + 2 * k] = p[i, j].real
            x[base + 2 * k + 1] = p[i, j].imag

    def trace_row(self, m: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """(indices, coeffs) with coeffs . x[idx] = Re tr(P(x) M), M Hermitian."""
        n = self.n
        idx = [self.start + i for i in range(n)]
        coef = [float(np.real(m[i, i])) for i in range(n)]
        base = self.start + n
        for k, (i, j) in enumerate(self._pairs):
            idx.extend([base + 2 * k, base + 2 * k + 1])
            coef.extend([2.0 * float(np.real(m[i, j])), 2.0 * float(np.imag(m[i, j]))])
        return np.asarray(idx, dtype=int), np.asarray(coef)

    def basis_matrix(self, local: int) -> np.ndarray:
        """Complex Hermitian basis matrix of local parameter ``local``."""
        n = self.n
        b = np.zeros((n, n), dtype=complex)
        if local < n:
            b[local, local] = 1.0
        else:
            k, part = divmod(local - n, 2)
            i, j = self._pairs[k]
            if part == 0:
                b[i, j] = b[j, i] = 1.0
            else:
                b[i, j] = 1j
                b[j, i] = -1j
        return b

    def psd_block(self, num_vars: int) -> LMIBlock:
        """Embedded PSD constraint P(x) >= 0 with svec-sparse columns."""
        n = self.n
        var_entries = []
        for i in range(n):
            v = self.start + i
            var_entries.append((v, i, i, 1.0))
            var_entries.append((v, n + i, n + i, 1.0))
        base = self.start + n
        for k, (i, j) in enumerate(self._pairs):
            vre, vim = base + 2 * k, base + 2 * k + 1
            var_entries.append((vre, j, i, 1.0))
            var_entries.append((vre, n + j, n + i, 1.0))
            var_entries.append((vim, n + i, j, 1.0))
            var_entries.append((vim, n + j, i, -1.0))
        return _block_from_triplets(2 * n, num_vars, [], var_entries)


@dataclass
class SDPProblem:
    """Block-LMI problem IR: maximize objective . x over the constraints."""

    num_vars: int
    objective: np.ndarray
    lmi_blocks: list[LMIBlock] = field(default_factory=list)
    a_ineq: sp.csr_matrix | None = None
    b_ineq: np.ndarray | None = None
    a_eq: sp.csr_matrix | None = None
    b_eq: np.ndarray | None = None
    lower: np.ndarray | None = None
    upper: np.ndarray | None = None

    def __post_init__(self):
        self.objective = np.asarray(self.objective, dtype=float)
        if self.objective.size != self.num_vars:
            raise ValueError("objective length != num_vars")
        for blk in self.lmi_blocks:
            if blk.q.shape[1] != self.num_vars:
                raise ValueError("LMI block built for a different num_vars")
        if self.a_ineq is not None:
            self.a_ineq = sp.csr_matrix(self.a_ineq)
            self.b_ineq = np.asarray(self.b_ineq, dtype=float)
        if self.a_eq is not None:
            self.a_eq = sp.csr_matrix(self.a_eq)
            self.b_eq = np.asarray(self.b_eq, dtype=float)

    # -- JSON round trip (schema used by the `solve` CLI subcommand) --------
    def to_json_dict(self) -> dict:
        blocks = []
        for blk in self.lmi_blocks:
            coeffs = []
            qc = blk.q.tocsc()
            for var in range(self.num_vars):
                col = qc.getcol(var)
                if col.nnz:
                    coeffs.append({
                        "var": var,
                        "mat": smat(np.asarray(col.todense()).ravel(), blk.dim).tolist(),
                    })
            blocks.append({
                "dim": blk.dim,
                "b0": smat(blk.q0, blk.dim).tolist(),
                "coeffs": coeffs,
            })
        out = {
            "num_vars": self.num_vars,
            "objective": self.objective.tolist(),
            "lmi_blocks": blocks,
        }
        if self.a_ineq is not None:
            out["linear_ineqs"] = {"a": self.a_ineq.toarray().tolist(),
                                   "b": self.b_ineq.tolist()}
        if self.a_eq is not None:
            out["linear_eqs"] = {"a": self.a_eq.toarray().tolist(),
                                 "b": self.b_eq.tolist()}
        if self.lower is not None or self.upper is not None:
            out["var_bounds"] = {
                "lower": None if self.lower is None else list(map(float, self.lower)),
                "upper": None if self.upper is None else list(map(float, self.upper)),
            }
        return out

    @staticmethod
    def from_json_dict(d: dict) -> "SDPProblem":
        num_vars = int(d["num_vars"])
        blocks = []
        for bd in d.get("lmi_blocks", []):
            terms = {int(cdict["var"]): np.asarray(cdict["mat"], dtype=float)
                     for cdict in bd.get("coeffs", [])}
            blocks.append(dense_block(num_vars, np.asarray(bd["b0"], dtype=float), terms))
        kw = {}
        if "linear_ineqs" in d:
            kw["a_ineq"] = sp.csr_matrix(np.asarray(d["linear_ineqs"]["a"], dtype=float))
            kw["b_ineq"] = np.asarray(d["linear_ineqs"]["b"], dtype=float)
        if "linear_eqs" in d:
            kw["a_eq"] = sp.csr_matrix(np.asarray(d["linear_eqs"]["a"], dtype=float))
            kw["b_eq"] = np.asarray(d["linear_eqs"]["b"], dtype=float)
        vb = d.get("var_bounds")
        if vb:
            if vb.get("lower") is not None:
                kw["lower"] = np.asarray(vb["lower"], dtype=float)
            if vb.get("upper") is not None:
                kw["upper"] = np.asarray(vb["upper"], dtype=float)
        return SDPProblem(num_vars=num_vars,
                          objective=np.asarray(d["objective"], dtype=float),
                          lmi_blocks=blocks, **kw)

    def to_json(self) -> str:
        return json.dumps(self.to_json_dict())

    @staticmethod
    def from_json(s: str) -> "SDPProblem":
        return SDPProblem.from_json_dict(json.loads(s))


@dataclass
class SolverResult:
    """Solver output; ``z_ineq`` covers the folded inequality system
    (user rows, then finite lower-bound rows, then upper-bound rows)."""

    status: str
    x: np.ndarray
    objective_value: float
    kkt_residuals: tuple[float, float, float]
    iterations: int
    z_lmi: list[np.ndarray] | None = None
    z_ineq: np.ndarray | None = None
    y_eq: np.ndarray | None = None

    @property
    def optimal(self) -> bool:
        return self.status == "Optimal"


# ---------------------------------------------------------------------------
# Interior-point core
# ---------------------------------------------------------------------------


def _fold_bounds(prob: SDPProblem):
    """(A, b) with variable-bound rows appended after the user rows."""
    rows, vals, rhs = [], [], []
    if prob.lower is not None:
        for i, lo in enumerate(prob.lower):
            if np.isfinite(lo):
                rows.append(i)
                vals.append(-1.0)
                rhs.append(-float(lo))
    if prob.upper is not None:
        for i, hi in enumerate(prob.upper):
            if np.isfinite(hi):
                rows.append(i)
                vals.append(1.0)
                rhs.append(float(hi))
    if not rhs and prob.a_ineq is None:
        return None, None
    mats, bs = [], []
    if prob.a_ineq is not None:
        mats.append(sp.csr_matrix(prob.a_ineq))
        bs.append(prob.b_ineq)
    if rhs:
        k = len(rhs)
        mats.append(sp.csr_matrix((vals, (np.arange(k), rows)), shape=(k, prob.num_vars)))
        bs.append(np.asarray(rhs))
    return sp.vstack(mats).tocsr(), np.concatenate(bs)


def _max_step(lam: np.ndarray, d: np.ndarray) -> float:
    """Largest alpha with diag(lam) + alpha * d > 0 (lam > 0, d symmetric)."""
    rt = np.sqrt(lam)
    m = d / rt[:, None] / rt[None, :]
    wmin = float(np.linalg.eigvalsh(0.5 * (m + m.T))[0])
    if wmin >= -1e-14:
        return np.inf
    return -1.0 / wmin


class _BlockState:
    __slots__ = ("s", "z", "lam", "r", "rinv", "winv", "kmat")

    def __init__(self, dim: int):
        self.s = np.eye(dim)
        self.z = np.eye(dim)
        self.lam = None
        self.r = None
        self.rinv = None
        self.winv = None
        self.kmat = None


def solve(problem: SDPProblem, tol: float = 1e-7, max_iters: int = 100,
          verbose: bool = False) -> SolverResult:
    """Solve the problem; see the module docstring for the algorithm.

    Exit statuses: ``Optimal`` (all three KKT residuals <= tol),
    ``Infeasible`` (Farkas certificate found), ``MaxIters`` (residuals
    stalled or the iteration cap was hit), ``NumericalFailure``
    (factorization breakdown that regularization could not fix).
    """
    m = problem.num_vars
    c_raw = problem.objective

    a_mat, b_vec = _fold_bounds(problem)
    e_mat = sp.csr_matrix(problem.a_eq) if problem.a_eq is not None else None
    f_vec = problem.b_eq if problem.a_eq is not None else None

    # per-variable scaling from the bound magnitudes (x = svar * x_scaled);
    # the same duals solve the scaled and unscaled KKT systems
    svar = np.ones(m)
    for bnd in (problem.lower, problem.upper):
        if bnd is not None:
            finite = np.isfinite(bnd)
            svar[finite] = np.maximum(svar[finite], np.abs(bnd[finite]))
    svar = np.clip(svar, 1.0, 1e4)
    if a_mat is not None:
        a_mat = (a_mat @ sp.diags(svar)).tocsr()
    if e_mat is not None:
        e_mat = (e_mat @ sp.diags(svar)).tocsr()

    # normalisation (objective, rows, blocks); undone in the returned result
    c_var = c_raw * svar
    c_scale = max(float(np.max(np.abs(c_var))) if m else 1.0, 1e-12)
    c = c_var / c_scale
    row_scale = None
    if a_mat is not None:
        row_scale = np.maximum(np.abs(a_mat).max(axis=1).toarray().ravel(), 1e-12)
        a_mat = (sp.diags(1.0 / row_scale) @ a_mat).tocsr()
        b_vec = b_vec / row_scale
    eq_scale = None
    if e_mat is not None:
        eq_scale = np.maximum(np.abs(e_mat).max(axis=1).toarray().ravel(), 1e-12)
        e_mat = (sp.diags(1.0 / eq_scale) @ e_mat).tocsr()
        f_vec = f_vec / eq_scale
    blocks: list[LMIBlock] = []
    blk_scale: list[float] = []
    for blk in problem.lmi_blocks:
        q_var = (blk.q @ sp.diags(svar)).tocsc()
        s_k = max(float(np.max(np.abs(blk.q0))) if blk.q0.size else 0.0,
                  float(np.max(np.abs(q_var.data))) if q_var.nnz else 0.0, 1e-12)
        blocks.append(LMIBlock(blk.dim, blk.q0 / s_k, (q_var / s_k).tocsc()))
        blk_scale.append(s_k)

    n_ineq = 0 if a_mat is None else a_mat.shape[0]
    n_eq = 0 if e_mat is None else e_mat.shape[0]
    cone_dim = sum(b.dim for b in blocks) + n_ineq
    if cone_dim == 0:
        raise ValueError("problem has no inequality or LMI constraints")

    # starting point
    if e_mat is not None:
        x = np.asarray(sp.linalg.lsqr(e_mat, f_vec, atol=1e-12, btol=1e-12)[0])
    else:
        x = np.zeros(m)
    states: list[_BlockState] = []
    for blk in blocks:
        bx = blk.affine_value(x)
        wmin = float(np.linalg.eigvalsh(bx)[0]) if blk.dim else 0.0
        st = _BlockState(blk.dim)
        st.s = bx + max(1.0, -1.5 * wmin + 1.0) * np.eye(blk.dim)
        states.append(st)
    if n_ineq:
        resid = b_vec - a_mat @ x
        t = np.maximum(1.0, resid)          # feasible slack where possible
        z = 1.0 / t                          # balanced complementarity t.z = 1
    else:
        t = np.zeros(0)
        z = np.zeros(0)
    y = np.zeros(n_eq)

    def residuals():
        r_d = c.copy()
        for blk, st in zip(blocks, states):
            r_d += blk.adjoint(st.z)
        if n_ineq:
            r_d -= a_mat.T @ z
        if n_eq:
            r_d -= e_mat.T @ y
        r_ps = [blk.affine_value(x) - st.s for blk, st in zip(blocks, states)]
        r_t = (b_vec - a_mat @ x - t) if n_ineq else np.zeros(0)
        r_e = (f_vec - e_mat @ x) if n_eq else np.zeros(0)
        return r_d, r_ps, r_t, r_e

    def measure(r_d, r_ps, r_t, r_e):
        gap = sum(float(np.sum(st.s * st.z)) for st in states) + float(t @ z)
        pobj = float(c @ x)
        dobj = sum(float(np.sum(smat(blk.q0, blk.dim) * st.z))
                   for blk, st in zip(blocks, states))
        if n_ineq:
            dobj += float(b_vec @ z)
        if n_eq:
            dobj += float(f_vec @ y)
        xnorm = 1.0 + (float(np.linalg.norm(x, np.inf)) if m else 0.0)
        pres = 0.0
        for rp in r_ps:
            pres = max(pres, float(np.linalg.norm(rp)) / xnorm)
        if n_ineq:
            pres = max(pres, float(np.max(np.abs(r_t))) / xnorm)
        if n_eq:
            pres = max(pres, float(np.max(np.abs(r_e))) / xnorm)
        dres = float(np.max(np.abs(r_d))) / 2.0
        relgap = abs(dobj - pobj) / (1.0 + abs(pobj) + abs(dobj))
        return gap, pobj, dobj, pres, dres, relgap

    status = "MaxIters"
    it = 0
    best_score = np.inf
    best_snap = None
    stall = 0

    def snapshot():
        return (x.copy(), [(st.s.copy(), st.z.copy()) for st in states],
                t.copy(), z.copy(), y.copy())

    def restore(snap):
        nonlocal x, t, z, y
        x, pairs, t, z, y = snap
        for st, (s_m, z_m) in zip(states, pairs):
            st.s, st.z = s_m, z_m

    for it in range(1, max_iters + 1):
        r_d, r_ps, r_t, r_e = residuals()
        gap, pobj, dobj, pres, dres, relgap = measure(r_d, r_ps, r_t, r_e)
        mu = gap / cone_dim

        if verbose:
            print(f"it={it:3d} mu={mu:9.2e} pres={pres:9.2e} dres={dres:9.2e} "
                  f"gap={relgap:9.2e} pobj={pobj:12.6e}")
        score = max(pres, dres, relgap)
        if score < best_score:
            if score < 0.9 * best_score:
                stall = 0
            best_score = score
            best_snap = snapshot()
        else:
            stall += 1
        if pres <= tol and dres <= tol and relgap <= tol:
            status = "Optimal"
            break

        # Farkas certificate for primal infeasibility
        theta = max([float(np.linalg.norm(st.z)) for st in states] +
                    ([float(np.max(np.abs(z)))] if n_ineq else []) +
                    ([float(np.max(np.abs(y)))] if n_eq else []) + [0.0])
        if theta > 1e4:
            cert_res = float(np.max(np.abs(r_d - c))) / theta
            if cert_res <= 1e-8 and dobj / theta <= -1e-8:
                status = "Infeasible"
                break
        if abs(pobj) > 1e13:
            status = "NumericalFailure"
            break
        # numerical floor of the path: stop before the scalings degenerate,
        # or once the best residual score has stopped improving
        if mu <= 1e-13 * (1.0 + abs(pobj)) or stall > 15:
            break

        # NT scalings and Schur complement
        h_mat = np.zeros((m, m))
        ok = True
        for blk, st in zip(blocks, states):
            try:
                ws, us = np.linalg.eigh(st.s)
                ws = np.maximum(ws, 1e-14)
                s_half = (us * np.sqrt(ws)) @ us.T
                s_ihalf = (us * (1.0 / np.sqrt(ws))) @ us.T
                tmat = s_half @ st.z @ s_half
                dt, vt = np.linalg.eigh(0.5 * (tmat + tmat.T))
            except np.linalg.LinAlgError:
                ok = False
                break
            dt = np.maximum(dt, 1e-16)
            st.lam = np.sqrt(dt)
            st.r = s_half @ (vt * (dt ** -0.25))
            st.rinv = (vt * (dt ** 0.25)).T @ s_ihalf
            st.winv = st.rinv.T @ st.rinv
            st.kmat = symkron(st.winv)
            # M += Q^T K Q with two sparse-dense products (Q is svec-sparse)
            a_half = blk.q.T @ st.kmat
            h_mat += blk.q.T.dot(a_half.T).T
        if not ok:
            status = "NumericalFailure"
            break
        if n_ineq:
            h_mat += (a_mat.T @ sp.diags(z / t) @ a_mat).toarray()

        chol = None
        reg = 0.0
        for _ in range(8):
            try:
                chol = cho_factor(
                    h_mat + reg * np.eye(m) if reg else h_mat, lower=True)
                break
            except np.linalg.LinAlgError:
                reg = max(reg * 100.0, 1e-14 * float(np.max(np.diag(h_mat))))
        if chol is None:
            status = "NumericalFailure"
            break

        if n_eq:
            e_dense = e_mat.toarray()
            hinv_et = cho_solve(chol, e_dense.T)
            schur_y = e_dense @ hinv_et
            schur_y += 1e-13 * (1.0 + float(np.abs(schur_y).max())) * np.eye(n_eq)

        def newton(u_list, q_sc):
            """Solve the Newton system for the given Jordan targets."""
            hv = r_d.copy()
            for blk, st, rp, u in zip(blocks, states, r_ps, u_list):
                rt_u = st.rinv.T @ u @ st.rinv
                hv += blk.q.T @ (svec(rt_u) - st.kmat @ svec(rp))
            if n_ineq:
                d0 = (q_sc - z * r_t) / t
                hv -= a_mat.T @ d0
            if n_eq:
                hx = cho_solve(chol, hv)
                dy = np.linalg.solve(schur_y, e_dense @ hx - r_e)
                dx = hx - hinv_et @ dy
            else:
                dy = np.zeros(0)
                dx = cho_solve(chol, hv)
            steps = []
            for blk, st, rp, u in zip(blocks, states, r_ps, u_list):
                ds_mat = smat(blk.q @ dx, blk.dim) + rp
                dz_mat = st.rinv.T @ u @ st.rinv - st.winv @ ds_mat @ st.winv
                steps.append((0.5 * (ds_mat + ds_mat.T), 0.5 * (dz_mat + dz_mat.T)))
            if n_ineq:
                dt_vec = r_t - a_mat @ dx
                dz_vec = (q_sc - z * r_t) / t + (z / t) * (a_mat @ dx)
            else:
                dt_vec = np.zeros(0)
                dz_vec = np.zeros(0)
            return dx, dy, steps, dt_vec, dz_vec

        def step_lengths(steps, dt_vec, dz_vec):
            a_p, a_d = np.inf, np.inf
            scaled = []
            for st, (ds_mat, dz_mat) in zip(states, steps):
                ds_l = st.rinv @ ds_mat @ st.rinv.T
                dz_l = st.r.T @ dz_mat @ st.r
                scaled.append((ds_l, dz_l))
                a_p = min(a_p, _max_step(st.lam, ds_l))
                a_d = min(a_d, _max_step(st.lam, dz_l))
            if n_ineq:
                neg = dt_vec < 0
                if np.any(neg):
                    a_p = min(a_p, float(np.min(-t[neg] / dt_vec[neg])))
                neg = dz_vec < 0
                if np.any(neg):
                    a_d = min(a_d, float(np.min(-z[neg] / dz_vec[neg])))
            return a_p, a_d, scaled

        # predictor
        u_aff = [-np.diag(st.lam) for st in states]
        q_aff = -z * t if n_ineq else np.zeros(0)
        _, _, steps_a, dt_a, dz_a = newton(u_aff, q_aff)
        a_p, a_d, scaled_a = step_lengths(steps_a, dt_a, dz_a)
        a_p = min(1.0, 0.99 * a_p)
        a_d = min(1.0, 0.99 * a_d)

        gap_aff = 0.0
        for st, (ds_mat, dz_mat) in zip(states, steps_a):
            gap_aff += float(np.sum((st.s + a_p * ds_mat) * (st.z + a_d * dz_mat)))
        if n_ineq:
            gap_aff += float((t + a_p * dt_a) @ (z + a_d * dz_a))
        sigma = float(np.clip((max(gap_aff, 0.0) / gap) ** 3, 1e-8, 0.999))

        # corrector
        u_cor = []
        for st, (ds_l, dz_l) in zip(states, scaled_a):
            lam = st.lam
            qj = sigma * mu * np.eye(lam.size) - np.diag(lam ** 2) \
                - 0.5 * (ds_l @ dz_l + dz_l @ ds_l)
            u_cor.append(2.0 * qj / (lam[:, None] + lam[None, :]))
        q_cor = (sigma * mu - z * t - dz_a * dt_a) if n_ineq else np.zeros(0)
        dx, dy, steps_c, dt_c, dz_c = newton(u_cor, q_cor)
        a_p, a_d, _ = step_lengths(steps_c, dt_c, dz_c)
        tau = 0.99 if mu < 1e-4 else 0.95
        a_p = min(1.0, tau * a_p)
        a_d = min(1.0, tau * a_d)

        x = x + a_p * dx
        for st, (ds_mat, dz_mat) in zip(states, steps_c):
            st.s = 0.5 * ((st.s + a_p * ds_mat) + (st.s + a_p * ds_mat).T)
            st.z = 0.5 * ((st.z + a_d * dz_mat) + (st.z + a_d * dz_mat).T)
        if n_ineq:
            t = t + a_p * dt_c
            z = z + a_d * dz_c
        if n_eq:
            y = y + a_d * dy

    # report the best iterate seen (the loop may have wandered past it)
    if status != "Infeasible" and best_snap is not None:
        restore(best_snap)
    r_d, r_ps, r_t, r_e = residuals()
    _, _, _, pres, dres, relgap = measure(r_d, r_ps, r_t, r_e)
    z_lmi = [c_scale / s_k * st.z for s_k, st in zip(blk_scale, states)]
    z_orig = c_scale * z / row_scale if n_ineq else None
    y_orig = c_scale * y / eq_scale if n_eq else None
    x_out = svar * x

    return SolverResult(
        status=status,
        x=x_out,
        objective_value=float(c_raw @ x_out),
        kkt_residuals=(pres, dres, relgap),
        iterations=it,
        z_lmi=z_lmi,
        z_ineq=z_orig,
        y_eq=y_orig,
    )


def check_kkt(problem: SDPProblem, result: SolverResult) -> tuple[float, float, float]:
    """Recompute (primal, dual, gap) residuals from the original data.

    Independent of the solve path: uses only the problem data, result.x and
    the returned dual variables.  Primal residual is the worst normalised
    violation (negative block eigenvalue, inequality or equality row).
    """
    x = result.x
    xnorm = 1.0 + (float(np.linalg.norm(x, np.inf)) if x.size else 0.0)
    pres = 0.0
    for blk in problem.lmi_blocks:
        bx = blk.affine_value(x)
        wmin = float(np.linalg.eigvalsh(bx)[0])
        pres = max(pres, max(0.0, -wmin) / (1.0 + float(np.linalg.norm(bx))))
    a_mat, b_vec = _fold_bounds(problem)
    if a_mat is not None:
        viol = np.asarray(a_mat @ x - b_vec)
        row_n = np.maximum(np.abs(a_mat).max(axis=1).toarray().ravel(), 1e-12)
        pres = max(pres, float(np.max(viol / (row_n * xnorm), initial=0.0)))
    if problem.a_eq is not None:
        viol = np.abs(problem.a_eq @ x - problem.b_eq)
        row_n = np.maximum(np.abs(problem.a_eq).max(axis=1).toarray().ravel(), 1e-12)
        pres = max(pres, float(np.max(viol / (row_n * xnorm), initial=0.0)))

    dual = np.inf
    gap = np.inf
    if result.z_lmi is not None:
        r_d = problem.objective.copy()
        dobj = 0.0
        for blk, zk in zip(problem.lmi_blocks, result.z_lmi):
            r_d += blk.adjoint(zk)
            dobj += float(np.sum(smat(blk.q0, blk.dim) * zk))
        if a_mat is not None and result.z_ineq is not None:
            r_d -= a_mat.T @ result.z_ineq
            dobj += float(b_vec @ result.z_ineq)
        if problem.a_eq is not None and result.y_eq is not None:
            r_d -= problem.a_eq.T @ result.y_eq
            dobj += float(problem.b_eq @ result.y_eq)
        cn = 1.0 + float(np.max(np.abs(problem.objective)))
        dual = float(np.max(np.abs(r_d))) / cn
        pobj = float(problem.objective @ x)
        gap = abs(dobj - pobj) / (1.0 + abs(pobj) + abs(dobj))
    return pres, dual, gap
