"""Command-line entry point: single runs, sweeps, validation, solver access.

Exit codes: 0 success, 1 error (bad input, internal failure), 2 infeasible
scenario.  Config files are JSON (canonical) or TOML when a toml reader is
available; dB/dBm keys are converted at load time (see SystemConfig).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import driver, experiments, validation
from .channel import SystemConfig
from .conic import SDPProblem, solve

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_INFEASIBLE = 2


def load_config(path) -> SystemConfig:
    raw = Path(path).read_bytes()
    if str(path).endswith(".toml"):
        try:
            import tomllib
        except ImportError:
            import tomli as tomllib
        data = tomllib.loads(raw.decode())
    else:
        data = json.loads(raw.decode())
    system = data.get("system", data)
    return SystemConfig.from_dict(system), data


def _solution_json(sol, ris_cfg, positions, trace) -> dict:
    return {
        "p_c": {"re": np.real(sol.p_c).tolist(), "im": np.imag(sol.p_c).tolist()},
        "p_m": {"re": np.real(sol.p_m).tolist(), "im": np.imag(sol.p_m).tolist()},
        "r_c": sol.r_c.tolist(),
        "phases": ris_cfg.phases.tolist(),
        "positions": positions.tolist(),
        "feasible": bool(sol.feasible),
        "final": trace.final,
    }


def cmd_run(args) -> int:
    try:
        cfg, _ = load_config(args.config)
    except Exception as exc:
        print(f"error: cannot load config: {exc}", file=sys.stderr)
        return EXIT_ERROR
    if args.seed is not None:
        cfg = cfg.replace(seed=int(args.seed))
    if args.no_ma:
        cfg = cfg.replace(enable_ma=False)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    scenario = experiments.make_scenario(cfg, cfg.seed)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 7]))
    try:
        sol, ris_cfg, positions, trace = driver.optimize(scenario.realization, rng)
    except driver.InfeasibleScenario as exc:
        print(f"infeasible scenario: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    trace.to_csv(out / "trace.csv")
    trace.to_json(out / "trace.json")
    with open(out / "solution.json", "w") as fh:
        json.dump(_solution_json(sol, ris_cfg, positions, trace), fh, indent=1)
    print(f"worst-case sum rate: {trace.final['wc_sum_rate']:.4f} bps/Hz "
          f"({trace.final['outer_iterations']} outer iterations)")
    return EXIT_OK


def cmd_sweep(args) -> int:
    try:
        cfg, data = load_config(args.config)
    except Exception as exc:
        print(f"error: cannot load config: {exc}", file=sys.stderr)
        return EXIT_ERROR
    spec_dict = dict(data.get("sweep", {}))
    if args.sweep:
        spec_dict["param"] = args.sweep
    if args.trials:
        spec_dict["trials"] = args.trials
    if "values" not in spec_dict:
        print("error: sweep values missing (config key sweep.values)",
              file=sys.stderr)
        return EXIT_ERROR
    if args.no_ma:
        spec_dict["baselines"] = ["FPA"]
    try:
        spec = experiments.SweepSpec(
            param=spec_dict.get("param", "N"),
            values=spec_dict["values"],
            trials=int(spec_dict.get("trials", 20)),
            baselines=tuple(spec_dict.get("baselines", ("MA-RIS", "FPA"))))
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    seed = int(args.seed) if args.seed is not None else None
    rows, out_dir = experiments.run_sweep(spec, cfg, args.out,
                                          master_seed=seed, jobs=args.jobs)
    n_fail = sum(r["status"] != "ok" for r in rows)
    print(f"sweep written to {out_dir} ({len(rows)} rows, {n_fail} failures)")
    return EXIT_OK


def cmd_validate(args) -> int:
    mutations = frozenset(
        m for m in os.environ.get("RISMA_VALIDATE_MUTATE", "").split(",") if m)
    report = validation.run_validation(mutations=mutations)
    payload = validation.report_to_json(report)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(payload)
    print(payload)
    if report["passed"]:
        return EXIT_OK
    failing = [k for k, v in report["suites"].items() if not v["passed"]]
    print(f"failing suites: {', '.join(failing)}", file=sys.stderr)
    return EXIT_ERROR


def cmd_solve(args) -> int:
    try:
        prob = SDPProblem.from_json(Path(args.problem).read_text())
    except Exception as exc:
        print(f"error: cannot parse problem: {exc}", file=sys.stderr)
        return EXIT_ERROR
    res = solve(prob, tol=args.tol, max_iters=args.max_iters)
    out = {
        "status": res.status,
        "objective_value": res.objective_value,
        "x": res.x.tolist(),
        "kkt_residuals": list(res.kkt_residuals),
        "iterations": res.iterations,
    }
    print(json.dumps(out, indent=1))
    return EXIT_OK if res.status in ("Optimal", "Infeasible") else EXIT_ERROR


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="risma",
                                description="Robust beamforming toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="optimize one scenario end to end")
    run.add_argument("--config", required=True)
    run.add_argument("--seed", type=int, default=None)
    run.add_argument("--out", default="out")
    run.add_argument("--no-ma", action="store_true",
                     help="fixed-position baseline (placement stage disabled)")
    run.set_defaults(func=cmd_run)

    sw = sub.add_parser("sweep", help="Monte-Carlo parameter sweep")
    sw.add_argument("--config", required=True)
    sw.add_argument("--sweep", default=None, choices=experiments.SWEEP_PARAMS)
    sw.add_argument("--trials", type=int, default=None)
    sw.add_argument("--jobs", type=int, default=1)
    sw.add_argument("--seed", type=int, default=None)
    sw.add_argument("--out", default="results")
    sw.add_argument("--no-ma", action="store_true")
    sw.set_defaults(func=cmd_sweep)

    va = sub.add_parser("validate", help="run the property/oracle suites")
    va.add_argument("--out", default=None, help="write the JSON report here")
    va.set_defaults(func=cmd_validate)

    so = sub.add_parser("solve", help="solve a serialized SDP problem")
    so.add_argument("problem")
    so.add_argument("--tol", type=float, default=1e-7)
    so.add_argument("--max-iters", type=int, default=100)
    so.set_defaults(func=cmd_solve)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except driver.InfeasibleScenario:
        return EXIT_INFEASIBLE
    except Exception as exc:  # pragma: no cover - defensive
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
