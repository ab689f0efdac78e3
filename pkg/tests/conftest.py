import os
import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))


def _cpu_jobs() -> int:
    try:
        return max(1, min(2, len(os.sched_getaffinity(0))))
    except AttributeError:
        return 2


@pytest.fixture(scope="session")
def trend_results(tmp_path_factory):
    """Trend-study sweeps shared by the acceptance tests (expensive).

    Desk-scale configuration: L=4, N=8, M=3, L_p=4, trials=20, reduced
    iteration caps for throughput (see the experiments module defaults
    discussion in the README).
    """
    from risma.channel import SystemConfig
    from risma.experiments import SweepSpec, run_sweep

    cfg = SystemConfig(
        L=4, N=8, M=3, L_t=4, L_r=4, P_t=15.0, sigma2=1e-11, R_min=1.0,
        rho=0.01, max_outer=3, max_inner_precoding=2, max_inner_ris=2,
        max_sweeps_positions=1, randomization_count=100, seed=20240)
    out_root = tmp_path_factory.mktemp("trend")
    jobs = _cpu_jobs()
    sweeps = {
        "N": SweepSpec(param="N", values=[8, 16, 32], trials=20),
        "L": SweepSpec(param="L", values=[2, 4, 6], trials=20),
        "P_t": SweepSpec(param="P_t", values=[5.0, 15.0, 25.0], trials=20),
        "rho": SweepSpec(param="rho", values=[0.0, 0.01, 0.05], trials=20),
    }
    results = {}
    for name, spec in sweeps.items():
        rows, out_dir = run_sweep(spec, cfg, out_root, master_seed=777,
                                  jobs=jobs, run_label="acceptance")
        results[name] = {"rows": rows, "dir": out_dir, "spec": spec}
    return results
