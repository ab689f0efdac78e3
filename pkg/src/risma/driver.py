"""Three-stage alternating optimization with monitoring and fallbacks.

Stage order is fixed: precoders, then reflection phases, then antenna
positions.  The convergence metric is the worst-case sum-rate from the
rates module (stage objectives use surrogates and are logged separately).
Every stage compares its candidate against the incoming iterate and keeps
the better one, so the recorded metric is nondecreasing by construction.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field

import numpy as np

from . import positions as ps
from . import precoding as pc
from . import ris as rs
from .channel import ChannelRealization, check_antenna_layout, initial_antenna_grid
from .rates import PrecodingSolution, worst_case_rates


class InfeasibleScenario(RuntimeError):
    """QoS is unreachable even at full power for this realization."""


@dataclass
class AOTrace:
    """Per-outer-iteration records plus final summary."""

    rows: list = field(default_factory=list)
    final: dict = field(default_factory=dict)

    def add(self, **kw):
        self.rows.append(kw)

    def sum_rates(self) -> np.ndarray:
        return np.array([r["wc_sum_rate"] for r in self.rows])

    def monotone(self, slack: float = 1e-6) -> bool:
        sr = self.sum_rates()
        return bool(np.all(np.diff(sr) >= -slack)) if sr.size > 1 else True

    def to_csv(self, path):
        if not self.rows:
            return
        cols = list(self.rows[0].keys())
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=cols)
            w.writeheader()
            for r in self.rows:
                w.writerow(r)

    def to_json(self, path=None):
        payload = {"rows": self.rows, "final": self.final}
        if path is None:
            return json.dumps(payload)
        with open(path, "w") as fh:
            json.dump(payload, fh, indent=1)
        return None


def optimize(realization: ChannelRealization, rng: np.random.Generator,
             config=None):
    """Run the full alternating loop on one realization.

    Returns (PrecodingSolution, RISConfiguration, positions, AOTrace).
    Raises InfeasibleScenario when the QoS target is unreachable even at
    full power on the initial layout.
    """
    cfg = realization.config if config is None else config
    positions = initial_antenna_grid(cfg)
    ris_cfg = rs.RISConfiguration(phases=np.zeros(cfg.N))
    if np.any(pc.qos_rate_upper_bound(realization, positions, ris_cfg.v) < cfg.R_min):
        raise InfeasibleScenario("QoS above the full-power rate bound")

    sol = pc.initial_solution(realization, positions, ris_cfg.v)
    trace = AOTrace()
    state1 = None
    state2 = None
    metric_prev = pc.evaluate_solution(realization, positions, ris_cfg.v, sol)[0].sum_rate

    # fixed per-stage randomization streams, identical across outer
    # iterations: recovery candidates then converge together with the SDP
    # solutions instead of ratcheting on fresh draws forever
    base = int(rng.integers(2 ** 62))

    for outer in range(1, max(1, cfg.max_outer) + 1):
        rng1 = np.random.default_rng(np.random.SeedSequence([base, 1]))
        rng2 = np.random.default_rng(np.random.SeedSequence([base, 2]))
        t0 = time.perf_counter()
        try:
            sol, state1, d1 = pc.run_stage(realization, positions, ris_cfg.v,
                                           state1, sol, rng1)
        except pc.StageInfeasible as exc:
            if outer == 1:
                raise InfeasibleScenario(str(exc)) from exc
            d1 = {"sdp_objective": None, "fallback": True}
        t1 = time.perf_counter()
        m1 = pc.evaluate_solution(realization, positions, ris_cfg.v, sol)[0].sum_rate

        ris_cfg, state2, d2 = rs.run_stage(realization, positions, sol,
                                           state2, ris_cfg, rng2)
        t2 = time.perf_counter()
        m2 = pc.evaluate_solution(realization, positions, ris_cfg.v, sol)[0].sum_rate

        if cfg.enable_ma:
            positions, d3 = ps.run_stage(realization, ris_cfg.v, sol, positions)
        else:
            d3 = {"sweeps": 0, "objective": m2}
        t3 = time.perf_counter()
        report, qos_ok = pc.evaluate_solution(realization, positions, ris_cfg.v, sol)
        metric = report.sum_rate

        trace.add(
            iteration=outer,
            stage1_objective=d1.get("sdp_objective"),
            stage2_objective=d2.get("sdp_objective"),
            stage3_objective=d3.get("objective"),
            wc_after_stage1=m1,
            wc_after_stage2=m2,
            wc_sum_rate=metric,
            qos_ok=qos_ok,
            stage1_fallback=d1.get("fallback", False),
            stage2_fallback=d2.get("fallback", False),
            stage3_sweeps=d3.get("sweeps", 0),
            stage2_solve_ms_median=float(np.median(d2["solve_ms"]))
            if d2.get("solve_ms") else np.nan,
            stage2_solve_count=len(d2.get("solve_ms", [])),
            stage1_ms=1e3 * (t1 - t0),
            stage2_ms=1e3 * (t2 - t1),
            stage3_ms=1e3 * (t3 - t2),
        )
        if abs(metric - metric_prev) <= cfg.ao_tol * (1.0 + abs(metric)):
            metric_prev = metric
            break
        metric_prev = metric

    # independent final-feasibility recomputation
    check_antenna_layout(positions, cfg)
    assert np.allclose(np.abs(ris_cfg.v), 1.0, atol=1e-12)
    power = sol.total_power()
    report, qos_ok = pc.evaluate_solution(realization, positions, ris_cfg.v, sol)
    sol.r_c = report.r_c
    trace.final = {
        "wc_sum_rate": report.sum_rate,
        "power": power,
        "power_ok": bool(power <= cfg.P_t * (1 + 1e-9)),
        "qos_ok": bool(qos_ok),
        "outer_iterations": len(trace.rows),
        "monotone": trace.monotone(),
        "enable_ma": bool(cfg.enable_ma),
    }
    return sol, ris_cfg, positions, trace


def iteration_cost_model(config) -> dict:
    """Predicted interior-point operation counts per the complexity model."""
    l_t = float(config.L)
    n_t = float(config.N)
    stage1 = config.max_inner_precoding * l_t ** 3.5
    stage2 = config.max_inner_ris * n_t ** 3.5
    stage3 = config.max_sweeps_positions * l_t
    return {
        "stage1": stage1,
        "stage2": stage2,
        "stage3": stage3,
        "total": config.max_outer * (stage1 + stage2 + stage3),
    }
