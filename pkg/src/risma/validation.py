"""Property and oracle suites behind the `validate` CLI subcommand.

Each suite re-derives its expected values independently of the code path it
checks (sampling oracles, finite differences, analytic candidates) at
reduced sample counts relative to the acceptance tests, so a full run stays
under a minute.  ``mutations`` is a test fixture: named fault injections
(e.g. a gradient sign flip) that a healthy validation must catch.
"""

from __future__ import annotations

import json

import numpy as np

from . import channel, positions, precoding, rates, ris
from .channel import SystemConfig


def _desk(seed, **kw):
    base = dict(L=2, N=4, M=2, L_t=2, L_r=2, rho=0.02, R_min=0.25,
                randomization_count=40)
    base.update(kw)
    cfg = SystemConfig(**base)
    rng = np.random.default_rng(seed)
    real = channel.new_realization(cfg, rng)
    t = channel.initial_antenna_grid(cfg)
    v = np.ones(cfg.N, dtype=complex)
    return cfg, real, t, v, rng


def suite_theorem1(rng, mutations=frozenset()):
    """Extremal trace value vs sampling plus the analytic maximiser."""
    worst = 0.0
    for _ in range(20):
        n = int(rng.integers(2, 6))
        u = rng.normal(size=n) + 1j * rng.normal(size=n)
        psi = np.outer(u, u.conj())
        for rho2 in (0.0, 0.1, 1.0):
            val = rates.theorem1_value(psi, rho2)
            best = rho2 * float(np.real(np.trace(psi)))  # analytic maximiser
            for _ in range(2000):
                w = rng.normal(size=(n, n)) + 1j * rng.normal(size=(n, n))
                xi = 0.5 * (w + w.conj().T)
                top = np.abs(np.linalg.eigvalsh(xi)).max()
                xi *= rho2 * rng.uniform() / max(top, 1e-30)
                best = max(best, float(np.real(np.trace(psi @ xi))))
            worst = max(worst, abs(val - best))
    return {"passed": bool(worst <= 1e-9), "max_gap": worst}


def suite_s_procedure(rng, mutations=frozenset()):
    """Stage-1 solutions keep sampled ball errors inside the certified region."""
    violations = 0
    checked = 0
    for seed in (11, 12):
        cfg, real, t, v, _ = _desk(seed)
        sol0 = precoding.initial_solution(real, t, v)
        sol, _, _ = precoding.run_stage(real, t, v, None, sol0, rng)
        g_rows = np.stack([channel.effective_user_channel(real, t, v, m)
                           for m in range(cfg.M)])
        ball_c, ball_p = precoding.vector_ball_wc_rates(
            g_rows, real.rho_hat, sol, cfg.sigma2)
        total_rc = float(np.sum(sol.r_c))
        for m in range(cfg.M):
            floor_p = 2.0 ** ball_p[m] - 1.0
            need_c = 2.0 ** total_rc - 1.0
            for _ in range(2000):
                d = channel.sample_error_in_ball(real.rho_hat[m], cfg.L, rng)
                gh = g_rows[m] + d
                own = abs(np.vdot(gh, sol.p_m[m])) ** 2
                interf = sum(abs(np.vdot(gh, sol.p_m[i])) ** 2
                             for i in range(cfg.M) if i != m)
                checked += 1
                if own / (interf + cfg.sigma2) < floor_p * (1 - 1e-9) - 1e-12:
                    violations += 1
                com = abs(np.vdot(gh, sol.p_c)) ** 2
                den = interf + abs(np.vdot(gh, sol.p_m[m])) ** 2 + cfg.sigma2
                if com / den < need_c * (1 - 1e-9) - 1e-12:
                    violations += 1
    return {"passed": violations == 0, "violations": violations,
            "checked": checked}


def suite_gradients(rng, mutations=frozenset()):
    """Analytic placement gradients against central finite differences."""
    cfg, real, t, v, _ = _desk(21)
    sol0 = precoding.initial_solution(real, t, v)
    sol, _, _ = precoding.run_stage(real, t, v, None, sol0, rng)
    h = 1e-6
    worst = 0.0
    checked = 0
    for _ in range(60):
        pts = np.clip(t + rng.uniform(-0.02, 0.02, t.shape),
                      -cfg.region_a / 2 + 0.01, cfg.region_a / 2 - 0.01)
        m = int(rng.integers(cfg.M))
        li = int(rng.integers(cfg.L))
        which = "private" if rng.uniform() < 0.5 else "common"
        grad, clamped = positions.rate_gradient(real, pts, v, sol, m, li, which)
        if clamped:
            continue
        if "gradient_sign_flip" in mutations:
            grad = -grad
        fd = np.zeros(2)
        for axis in range(2):
            pp, pm = pts.copy(), pts.copy()
            pp[li, axis] += h
            pm[li, axis] -= h
            fd[axis] = (positions.worst_case_rate_value(real, pp, v, sol, m, which)
                        - positions.worst_case_rate_value(real, pm, v, sol, m,
                                                          which)) / (2 * h)
        rel = np.linalg.norm(grad - fd) / max(np.linalg.norm(fd), 1e-9)
        worst = max(worst, rel)
        checked += 1
    return {"passed": bool(checked >= 20 and worst <= 1e-5),
            "checked": checked, "worst_rel_error": worst}


def suite_fta_bounds(rng, mutations=frozenset()):
    """Taylor rows upper-bound the concave logs; tight at the anchor."""
    cfg, real, t, v, _ = _desk(31)
    sol = precoding.initial_solution(real, t, v)
    mats = ris.assemble_rate_matrices(real, t, sol)
    worst_gap = -np.inf
    anchor_gap = 0.0
    for m in range(cfg.M):
        d = mats[m]
        rho = float(real.rho_hat[m])
        a = rng.normal(size=(cfg.N, cfg.N)) + 1j * rng.normal(size=(cfg.N, cfg.N))
        p = a @ a.conj().T + 1e-6 * np.eye(cfg.N)
        dd = 1.0 / np.sqrt(np.real(np.diag(p)))
        anchor = p * np.outer(dd, dd)
        for name, coeff, tr_s in (("p", d["W2"], d["tr_S2"]),
                                  ("c", d["U2"], d["tr_S1"])):
            f = ris.fta_private(anchor, coeff, tr_s, rho, cfg.sigma2)

            def logden(vm):
                return np.log2(float(np.real(np.sum(coeff * vm.T)))
                               + rho ** 2 * tr_s + cfg.sigma2)

            anchor_gap = max(anchor_gap, abs(f.value(anchor) - logden(anchor)))
            for _ in range(1000):
                b = rng.normal(size=(cfg.N, cfg.N)) + 1j * rng.normal(
                    size=(cfg.N, cfg.N))
                q = b @ b.conj().T + 1e-6 * np.eye(cfg.N)
                dq = 1.0 / np.sqrt(np.real(np.diag(q)))
                vm = q * np.outer(dq, dq)
                gap = logden(vm) - f.value(vm)   # must be <= 0
                if "fta_sign_flip" in mutations:
                    gap = -gap
                worst_gap = max(worst_gap, gap)
    return {"passed": bool(worst_gap <= 1e-9 and anchor_gap <= 1e-10),
            "worst_overshoot": worst_gap, "anchor_gap": anchor_gap}


def suite_separation(rng, mutations=frozenset()):
    """Linearised minimum-distance rows imply the true norm constraint."""
    n = 20000
    anchors = rng.uniform(-1, 1, (n, 2))
    neigh = rng.uniform(-1, 1, (n, 2))
    pts = rng.uniform(-1, 1, (n, 2))
    d_min = 0.25
    diff = anchors - neigh
    nrm = np.linalg.norm(diff, axis=1)
    keep = nrm > 1e-9
    a = diff[keep] / nrm[keep, None]
    lhs = np.einsum("ij,ij->i", a, pts[keep] - neigh[keep])
    sat = lhs >= d_min
    true = np.linalg.norm(pts[keep] - neigh[keep], axis=1)
    bad = int(np.sum(true[sat] < d_min - 1e-12))
    return {"passed": bad == 0, "counterexamples": bad,
            "satisfying": int(np.sum(sat))}


SUITES = {
    "theorem1": suite_theorem1,
    "s_procedure": suite_s_procedure,
    "gradients": suite_gradients,
    "fta_bounds": suite_fta_bounds,
    "separation": suite_separation,
}


def run_validation(mutations=frozenset(), seed: int = 0) -> dict:
    rng = np.random.default_rng(seed)
    report = {"suites": {}, "passed": True}
    for name, fn in SUITES.items():
        out = fn(rng, mutations=frozenset(mutations))
        report["suites"][name] = out
        report["passed"] = report["passed"] and bool(out["passed"])
    return report


def report_to_json(report: dict) -> str:
    def default(o):
        if isinstance(o, (np.floating, np.integer)):
            return o.item()
        if isinstance(o, np.bool_):
            return bool(o)
        raise TypeError(type(o))

    return json.dumps(report, indent=1, default=default)
