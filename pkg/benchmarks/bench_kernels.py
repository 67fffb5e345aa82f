"""Time the numba and numpy kernel backends against each other.

Each backend runs in its own interpreter because the choice is made once at
import time from CROSSOVER_SSR_BACKEND.

    python3 benchmarks/bench_kernels.py [--repeat 5]
"""
import argparse
import json
import os
import subprocess
import sys

WORKLOAD = r"""
import json, time
import numpy as np
from crossover_ssr import kernels, numerics as nm
from crossover_ssr.design import builtin_design
from crossover_ssr.mixed_model import PatientAllocation, fit_design
from crossover_ssr.simulator import ScenarioConfig, run_trial, replicate_rng
from crossover_ssr.sample_size import ReestimationPolicy

def best(f, repeat):
    f()  # warm-up (includes JIT compilation for numba)
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter(); f(); times.append(time.perf_counter() - t0)
    return min(times)

repeat = REPEAT
rng = np.random.default_rng(0)
C3 = np.array([[1, .3, .9], [.3, 1, .1], [.9, .1, 1]])
Ce = np.full((3, 3), .5) + .5 * np.eye(3)
s = nm.IntegrationSettings(qmc_points=4096, randomisations=8, target_abs_error=1e-3, seed=1)
design, params, hyp = builtin_design("example1")
seq = np.repeat(np.arange(4), 8)
Y = rng.normal(size=(32, 4)) + rng.normal(size=(32, 1))
alloc = PatientAllocation(seq)
cfg = ScenarioConfig(design, params, hyp, ReestimationPolicy(16, 1000), tau_scenario="global_alt")

out = {"backend": kernels.BACKEND}
out["mvn_qmc_M3"] = best(lambda: [nm.mvn_cdf([1, .5, 2], C3, s, method="qmc") for _ in range(20)], repeat) / 20
out["mvt_factor_M3"] = best(lambda: [nm.mvt_cdf([2, 2, 2], Ce, 40, method="factor") for _ in range(50)], repeat) / 50
out["reml_fit_N32"] = best(lambda: [fit_design(design, Y, alloc) for _ in range(200)], repeat) / 200
out["trial_ex1"] = best(lambda: [run_trial(cfg, replicate_rng(1, i)) for i in range(200)], repeat) / 200
print(json.dumps(out))
"""


def run(backend, repeat):
    env = dict(os.environ, CROSSOVER_SSR_BACKEND=backend)
    res = subprocess.run([sys.executable, "-c", WORKLOAD.replace("REPEAT", str(repeat))],
                         env=env, capture_output=True, text=True, check=True)
    return json.loads(res.stdout.strip().splitlines()[-1])


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    a = run("numba", args.repeat)
    b = run("numpy", args.repeat)
    print(f"{'kernel':<16}{'numba':>12}{'numpy':>12}{'speed-up':>10}")
    for k in a:
        if k == "backend":
            continue
        print(f"{k:<16}{a[k] * 1e6:>10.1f}us{b[k] * 1e6:>10.1f}us{b[k] / a[k]:>9.1f}x")


if __name__ == "__main__":
    main()
