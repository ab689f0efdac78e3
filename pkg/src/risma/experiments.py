"""Monte-Carlo harness: scenario generation, sweeps, baselines, persistence.

Trials are dispatched to a process pool; each worker derives its RNG stream
from (master seed, trial index) so results are reproducible and aggregation
is order-independent.  The fixed-position baseline runs on the same
realization with the placement stage disabled.

Reproducibility note: cells.csv is bit-identical across runs of the same
(config, seed) except for the wallclock_ms column, which measures real time
by design; comparisons should drop that column.
"""

from __future__ import annotations

import csv
import json
import os
import subprocess
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import driver
from .channel import ChannelRealization, SystemConfig, new_realization

SWEEP_PARAMS = ("N", "L", "P_t", "L_p", "rho")
CELL_COLUMNS = ("param", "value", "trial", "seed", "scheme", "sum_rate",
                "iterations", "wallclock_ms")


@dataclass
class Scenario:
    """Reproducible from (config, seed) alone."""

    config: SystemConfig
    seed: int
    realization: ChannelRealization

    @property
    def user_positions(self):
        return self.realization.user_positions


def make_scenario(config: SystemConfig, seed: int) -> Scenario:
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    return Scenario(config=config, seed=int(seed),
                    realization=new_realization(config, rng))


@dataclass
class SweepSpec:
    param: str
    values: list
    trials: int = 20
    baselines: tuple = ("MA-RIS", "FPA")

    def __post_init__(self):
        if self.param not in SWEEP_PARAMS:
            raise ValueError(f"unknown sweep parameter {self.param!r}")
        if not list(self.values):
            raise ValueError("value list must be nonempty")
        if self.trials < 1:
            raise ValueError("trials must be >= 1")
        for b in self.baselines:
            if b not in ("MA-RIS", "FPA"):
                raise ValueError(f"unknown scheme {b!r}")


def apply_param(config: SystemConfig, param: str, value) -> SystemConfig:
    if param == "N":
        return config.replace(N=int(value))
    if param == "L":
        return config.replace(L=int(value))
    if param == "P_t":
        return config.replace(P_t=float(value))
    if param == "L_p":
        return config.replace(L_t=int(value), L_r=int(value))
    if param == "rho":
        return config.replace(rho=float(value))
    raise ValueError(param)


def trial_seed(master_seed: int, trial: int) -> int:
    return int(np.random.SeedSequence([master_seed, trial]).generate_state(1)[0])


def fpa_baseline(realization: ChannelRealization, rng: np.random.Generator):
    """Stages 1-2 only; antennas stay on the half-wavelength grid."""
    cfg = realization.config.replace(enable_ma=False)
    return driver.optimize(realization, rng, config=cfg)


def _scheme_config(config: SystemConfig, scheme: str) -> SystemConfig:
    return config.replace(enable_ma=(scheme == "MA-RIS"))


def run_trial(config: SystemConfig, param: str, value, trial: int,
              master_seed: int, schemes) -> list[dict]:
    """One (value, trial) cell: all schemes on the same realization."""
    cfg = apply_param(config, param, value)
    seed = trial_seed(master_seed, trial)
    scenario = make_scenario(cfg, seed)
    rows = []
    for scheme in schemes:
        t0 = time.perf_counter()
        row = {
            "param": param, "value": value, "trial": trial, "seed": seed,
            "scheme": scheme, "sum_rate": np.nan, "iterations": 0,
            "wallclock_ms": 0.0, "status": "ok", "trace": None,
        }
        try:
            rng = np.random.default_rng(np.random.SeedSequence([master_seed,
                                                                trial, 7]))
            _, _, _, trace = driver.optimize(
                scenario.realization, rng, config=_scheme_config(cfg, scheme))
            row["sum_rate"] = trace.final["wc_sum_rate"]
            row["iterations"] = trace.final["outer_iterations"]
            row["trace"] = trace
        except driver.InfeasibleScenario:
            row["status"] = "infeasible"
        except Exception as exc:  # recorded, not fatal
            row["status"] = f"error: {type(exc).__name__}: {exc}"
        row["wallclock_ms"] = 1e3 * (time.perf_counter() - t0)
        rows.append(row)
    return rows


def _pool_worker(args):
    os.environ.setdefault("OMP_NUM_THREADS", "1")
    config_dict, param, value, trial, master_seed, schemes = args
    cfg = SystemConfig.from_dict(config_dict)
    rows = run_trial(cfg, param, value, trial, master_seed, schemes)
    for r in rows:
        tr = r.pop("trace")
        r["trace_rows"] = tr.rows if tr is not None else []
        r["trace_final"] = tr.final if tr is not None else {}
    return rows


def _git_revision() -> str:
    try:
        out = subprocess.run(["git", "rev-parse", "HEAD"], capture_output=True,
                             text=True, timeout=10)
        return out.stdout.strip() if out.returncode == 0 else "unknown"
    except Exception:
        return "unknown"


def run_sweep(spec: SweepSpec, config: SystemConfig, out_root,
              master_seed: int | None = None, jobs: int = 1,
              run_label: str | None = None):
    """Run the sweep, persist cells.csv / traces / meta.json, return rows.

    Output goes to ``out_root/<param>/<run_label>`` with a UTC timestamp as
    the default label.
    """
    master_seed = config.seed if master_seed is None else int(master_seed)
    label = run_label or datetime.now(timezone.utc).strftime("%Y%m%dT%H%M%SZ")
    out_dir = Path(out_root) / spec.param / label
    out_dir.mkdir(parents=True, exist_ok=True)

    tasks = [(config.to_dict(), spec.param, value, trial, master_seed,
              tuple(spec.baselines))
             for value in spec.values for trial in range(spec.trials)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            nested = list(pool.map(_pool_worker, tasks))
    else:
        nested = [_pool_worker(t) for t in tasks]
    rows = [r for batch in nested for r in batch]
    rows.sort(key=lambda r: (str(r["value"]), r["trial"], r["scheme"]))

    with open(out_dir / "cells.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(CELL_COLUMNS) + ["status"])
        w.writeheader()
        for r in rows:
            w.writerow({k: r[k] for k in list(CELL_COLUMNS) + ["status"]})

    for r in rows:
        if r["trace_rows"]:
            tag = f"{spec.param}{r['value']}_t{r['trial']:03d}_{r['scheme'].replace('-', '')}"
            tr = driver.AOTrace(rows=r["trace_rows"], final=r["trace_final"])
            tr.to_csv(out_dir / f"trace_{tag}.csv")

    summary, flagged = summarize(rows, spec)
    with open(out_dir / "summary.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["param", "value", "scheme", "n_ok",
                                           "n_fail", "mean_sum_rate",
                                           "std_sum_rate", "flagged"])
        w.writeheader()
        for s in summary:
            w.writerow(s)

    meta = {
        "config": config.to_dict(),
        "sweep": {"param": spec.param, "values": list(spec.values),
                  "trials": spec.trials, "baselines": list(spec.baselines)},
        "master_seed": master_seed,
        "git_revision": _git_revision(),
        "label": label,
        "flagged_cells": flagged,
    }
    with open(out_dir / "meta.json", "w") as fh:
        json.dump(meta, fh, indent=1)
    return rows, out_dir


def summarize(rows, spec: SweepSpec):
    """Mean and sample std per (value, scheme); flags cells >20% failures."""
    summary = []
    flagged = []
    for value in spec.values:
        for scheme in spec.baselines:
            cell = [r for r in rows
                    if r["value"] == value and r["scheme"] == scheme]
            ok = [r["sum_rate"] for r in cell if r["status"] == "ok"]
            n_fail = len(cell) - len(ok)
            flag = bool(cell) and n_fail > 0.2 * len(cell)
            if flag:
                flagged.append({"value": value, "scheme": scheme,
                                "n_fail": n_fail, "n_total": len(cell)})
            summary.append({
                "param": spec.param, "value": value, "scheme": scheme,
                "n_ok": len(ok), "n_fail": n_fail,
                "mean_sum_rate": float(np.mean(ok)) if ok else np.nan,
                "std_sum_rate": float(np.std(ok, ddof=1)) if len(ok) > 1 else 0.0,
                "flagged": flag,
            })
    return summary, flagged
