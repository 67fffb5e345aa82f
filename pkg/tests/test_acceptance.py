"""End-to-end acceptance checks, one test per criterion.

Each test records a PASS/FAIL line in ``REPORT``; the lines are printed at
the end of the pytest run (see conftest.py) and also to stdout as they are
produced. Monte Carlo criteria run at the replicate counts they state.
"""
import dataclasses
import io
import json
import math
import os
import time
from contextlib import redirect_stdout

import numpy as np
import pytest

from crossover_ssr import numerics as nm
from crossover_ssr.cli import main
from crossover_ssr.config import build_manifest, dump_config, example_config, load_text
from crossover_ssr.design import builtin_design
from crossover_ssr.estimators import adjusted_blinded_raw, adjustment_terms, block_blinded_raw
from crossover_ssr.sample_size import design_critical_value, required_n_pairwise, unit_information
from crossover_ssr.simulator import TAU_SCENARIOS, run_monte_carlo, scenario_tau

from oracles import quadratic_expectation

REPORT = {}
WORKERS = os.cpu_count() or 1
REPS = 10_000


def record(key, ok, detail):
    line = f"criterion {key}: {'PASS' if ok else 'FAIL'}  {detail}"
    REPORT[key] = line
    print(line)
    return ok


def _rows(name, kind="table"):
    return build_manifest(load_text(dump_config(example_config(name, kind)), f"<{name}>")).scenarios


def _row(rows, method, n_int, tau, n_B=None, inflation=False):
    for r in rows:
        if (r.method, r.n_int, r.n_B, r.inflation, r.config.tau_scenario) == (method, n_int, n_B, inflation, tau):
            return r.config
    raise LookupError((method, n_int, tau, n_B, inflation))


def _run(cfg, reps=REPS):
    return run_monte_carlo(cfg.with_(replications=reps), WORKERS)


def _within(x, target, tol):
    return x is not None and abs(x - target) <= tol


# ---------------------------------------------------------------------------

def test_criterion_01_design_formulas():
    out = {}
    for name in ("example1", "example2", "example3"):
        buf = io.StringIO()
        t0 = time.perf_counter()
        with redirect_stdout(buf):
            code = main(["design", "--example", name, "--json"])
        out[name] = (json.loads(buf.getvalue()), time.perf_counter() - t0, code)
    n1 = out["example1"][0]["N_pairwise_ceil"]
    n2 = out["example2"][0]["N_pairwise_ceil"]
    n3 = out["example3"][0]["N_pairwise"]
    fast = all(t < 1.0 and c == 0 for _, t, c in out.values())
    ok = [n1 == 72, n2 == 30, abs(n3 - 90) <= 2, fast]
    detail = (f"ex1 ceil N={n1} (want 72), ex2 ceil N={n2} (want 30; N={out['example2'][0]['N_pairwise']:.3f}), "
              f"ex3 N={n3:.3f} (want 90 +/- 2), max time {max(t for _, t, _ in out.values()):.3f}s")
    assert record("1", all(ok), detail), detail


def test_criterion_02_complete_block_sigma_b2_independence():
    design, params, hyp = builtin_design("example1")
    Ns = [required_n_pairwise(design, params.sigma_e2, sb2, hyp) for sb2 in (0.0, 10.12, 40.48)]
    spread = max(Ns) - min(Ns)
    detail = f"N over sigma_b2 in {{0, 10.12, 40.48}}: {Ns[0]:.10f}, spread {spread:.2e}"
    assert record("2", spread <= 1e-10, detail), detail


def test_criterion_03_table1_spot_rows():
    rows = _rows("example1")
    a = _run(_row(rows, "unblinded", 32, "global_null"))
    b = _run(_row(rows, "adjusted_null", 16, "global_alt"))
    c = _run(_row(rows, "adjusted_alternative", 8, "global_alt"))
    ok = [_within(a.fwer, 0.0520, 0.012), _within(b.power_pairwise, 0.7942, 0.013),
          _within(c.power_pairwise, 0.7432, 0.013)]
    detail = (f"unblinded n_int=32 FWER {a.fwer:.4f} (0.0520 +/- 0.012); null-adjusted n_int=16 power "
              f"{b.power_pairwise:.4f} (0.7942 +/- 0.013); alt-adjusted n_int=8 power {c.power_pairwise:.4f} "
              f"(0.7432 +/- 0.013)")
    assert record("3", all(ok), detail), detail


def test_criterion_04_table2_direction():
    rows = _rows("example2")
    u = _run(_row(rows, "unblinded", 18, "global_null"))
    n0 = _run(_row(rows, "adjusted_null", 18, "global_null"))
    n1 = _run(_row(rows, "adjusted_null", 18, "global_alt"))
    a1 = _run(_row(rows, "adjusted_alternative", 18, "global_alt"))
    ok = [u.fwer > n0.fwer, _within(u.fwer, 0.1174, 0.015), _within(n0.fwer, 0.1069, 0.015),
          n1.power_pairwise - a1.power_pairwise >= 0.05]
    detail = (f"FWER unblinded {u.fwer:.4f} vs null-adjusted {n0.fwer:.4f} (paper 0.1174, 0.1069 +/- 0.015); "
              f"power null-adjusted {n1.power_pairwise:.4f} vs alt-adjusted {a1.power_pairwise:.4f} "
              f"(difference >= 0.05)")
    assert record("4", all(ok), detail), detail


def test_criterion_05_table3_spot_row():
    rows = _rows("example3")
    f = _run(_row(rows, "block", 32, "global_null", n_B=8))
    p = _run(_row(rows, "block", 32, "global_alt", n_B=8))
    ok = [_within(f.fwer, 0.0241, 0.008), _within(p.power_pairwise, 0.8942, 0.013)]
    detail = (f"block n_B=8 n_int=32: FWER {f.fwer:.4f} (0.0241 +/- 0.008), "
              f"power {p.power_pairwise:.4f} (0.8942 +/- 0.013)")
    assert record("5", all(ok), detail), detail


# ---------------------------------------------------------------------------

N_INT = {"example1": (16, 4), "example2": (18, 3), "example3": (32, 8)}


def _cell_means(design, params, tau, seq):
    return params.mu0 + np.asarray(params.pi)[None, :] + np.asarray(tau)[design.array[seq]]


def _dyadic(x):
    return np.round(np.asarray(x, dtype=float) * 64) / 64


def test_criterion_06_estimator_unbiasedness():
    R = 50_000
    failures, lines = [], []
    for k, name in enumerate(("example1", "example2", "example3")):
        design, params, hyp = builtin_design(name)
        n, n_B = N_INT[name]
        seq = np.repeat(np.arange(design.K), n // design.K)
        # sequence-homogeneous blocks of n_B patients
        block = np.arange(n) // n_B
        for label in TAU_SCENARIOS:
            try:
                tau = np.array(scenario_tau(label, design.D, hyp.delta, params.tau))
            except Exception:
                continue  # tau1_tau2 does not exist for D = 2
            rng = np.random.default_rng([k, TAU_SCENARIOS.index(label)])
            Y = (_cell_means(design, params, tau, seq)[None]
                 + math.sqrt(params.sigma_b2) * rng.standard_normal((R, n, 1))
                 + math.sqrt(params.sigma_e2) * rng.standard_normal((R, n, design.P)))
            checks = {
                "adjusted(tau*=tau)": (adjusted_blinded_raw(Y, design, tau)[0], params.sigma_e2),
                "block": (block_blinded_raw(Y, block, n // n_B)[0], params.sigma_e2),
                "null-adjusted bias": (adjusted_blinded_raw(Y, design, np.zeros(design.D))[0],
                                       params.sigma_e2 + adjustment_terms(design, tau, n)[0]),
            }
            for what, (est, target) in checks.items():
                se = est.std(ddof=1) / math.sqrt(R)
                z = (est.mean() - target) / se
                if abs(z) > 4:
                    failures.append(f"{name}/{label}/{what} z={z:.2f}")
                lines.append(abs(z))
        # noise-free, bit-level, on dyadic versions of the parameters
        p = params.with_(mu0=float(_dyadic(params.mu0)), pi=tuple(_dyadic(params.pi)), tau=tuple(_dyadic(params.tau)))
        Y0 = _cell_means(design, p, p.tau, seq)
        e_adj = adjusted_blinded_raw(Y0, design, p.tau)
        e_blk = block_blinded_raw(Y0, block, n // n_B)
        e_null = adjusted_blinded_raw(Y0, design, np.zeros(design.D))[0]
        bias = adjustment_terms(design, p.tau, n)[0]
        if not (e_adj[0] == 0.0 and e_adj[1] == 0.0 and e_blk[0] == 0.0 and e_blk[1] == 0.0 and e_null == bias):
            failures.append(f"{name} noise-free: adjusted {e_adj}, block {e_blk}, null {e_null} vs {bias}")
    detail = (f"{len(lines)} mean checks over 50,000 replicates, max |z| = {max(lines):.2f} (limit 4); "
              f"noise-free bit-level {'ok' if not any('noise' in f for f in failures) else 'failed'}"
              + ("; " + "; ".join(failures) if failures else ""))
    assert record("6", not failures, detail), detail


def test_criterion_07_sigma_b2_add_back():
    results = []
    wrong_rejected = True
    for name in ("example1", "example2", "example3"):
        design, params, _ = builtin_design(name)
        n = 2 * design.K
        seq = np.repeat(np.arange(design.K), 2)
        mu = _cell_means(design, params, params.tau, seq).ravel()
        blk = params.sigma_e2 * np.eye(design.P) + params.sigma_b2
        Sigma = np.kron(np.eye(n), blk)
        K, D = design.K, design.D
        _, _, first = adjustment_terms(design, params.tau, n)
        sb2 = lambda y: adjusted_blinded_raw(y.reshape(n, design.P), design, params.tau)[1]
        E = quadratic_expectation(sb2, mu, Sigma)
        results.append(abs(E - params.sigma_b2) / params.sigma_b2)
        if D != K:
            E_d2 = quadratic_expectation(lambda y: sb2(y) + 0.5 * first * (K * K / (D * D) - 1), mu, Sigma)
            wrong_rejected &= abs(E_d2 - params.sigma_b2) > 1e-6
        if first != 0:
            E_minus = quadratic_expectation(lambda y: sb2(y) - first, mu, Sigma)
            wrong_rejected &= abs(E_minus - params.sigma_b2) > 1e-6
    ok = max(results) < 1e-10 and wrong_rejected
    detail = (f"E[sigma_b2_hat] - sigma_b2 relative error {max(results):.1e} on all three examples (+ sign, K^2 "
              f"divisor); D^2 and minus variants {'biased' if wrong_rejected else 'NOT distinguished'}")
    assert record("7", ok, detail), detail


def test_criterion_08_numerics():
    path = os.path.join(os.path.dirname(__file__), "data", "mv_oracle.json")
    cases = json.load(open(path))
    worst = 0.0
    for c in cases:
        up, C = np.array(c["upper"]), np.array(c["corr"])
        got = nm.mvn_cdf(up, C) if c["nu"] is None else nm.mvt_cdf(up, C, c["nu"])
        worst = max(worst, abs(got.value - c["value"]))
    d2 = [abs(design_critical_value(np.eye(1), a)[0] - nm.std_normal_quantile(1 - a)) for a in (0.01, 0.025, 0.05, 0.1)]
    design, params, hyp = builtin_design("example1")
    e = unit_information(design, params.sigma_e2, params.sigma_b2, hyp.alpha).e
    ok = [len(cases) == 200 and worst <= 5e-4, max(d2) <= 1e-4, abs(e - 2.075) <= 0.01]
    detail = (f"200-case max error {worst:.1e} (<= 5e-4); D=2 max gap {max(d2):.1e}; ex1 Dunnett e = {e:.6f} "
              f"(want 2.075 +/- 0.01; the exact equicoordinate quantile is 2.062084)")
    assert record("8", all(ok), detail), detail


def test_criterion_09_inflation_factor():
    rows = _rows("example1")
    failures, parts = [], []
    for method, n_B, n_ints in (("unblinded", None, (8, 16, 32)), ("adjusted_null", None, (8, 16, 32)),
                                ("block", 4, (16, 32))):
        for n_int in n_ints:
            cfg = _row(rows, method, n_int, "global_alt", n_B=n_B)
            on = cfg.with_(policy=dataclasses.replace(cfg.policy, use_inflation_factor=True))
            p0 = _run(cfg).power_pairwise
            p1 = _run(on).power_pairwise
            se = math.sqrt(p0 * (1 - p0) / REPS + p1 * (1 - p1) / REPS)
            se1 = math.sqrt(p1 * (1 - p1) / REPS)
            tag = f"{method}{'' if n_B is None else f'(n_B={n_B})'} n_int={n_int}: {p0:.4f} -> {p1:.4f}"
            parts.append(tag)
            if p1 < p0 - 2 * se:
                failures.append(tag + " (power fell)")
            if p1 < 0.80 - 2 * se1:
                failures.append(tag + " (below 0.80)")
    detail = "; ".join(parts) + ("" if not failures else " | failed: " + "; ".join(failures))
    assert record("9", not failures, detail), detail


def test_criterion_10_determinism(tmp_path):
    out = {}
    for threads in ("1", "8"):
        d = tmp_path / f"t{threads}"
        with redirect_stdout(io.StringIO()):
            code = main(["simulate", "--example", "example1", "--reps", "50", "--threads", threads,
                         "--out", str(d), "--raw"])
        assert code == 0
        out[threads] = ((d / "summary.csv").read_bytes(), (d / "replicates.csv").read_bytes())
    same = out["1"] == out["8"]
    detail = f"example1 table config (88 rows, 50 reps each), 1 vs 8 workers: {'byte-identical' if same else 'differ'}"
    assert record("10", same, detail), detail


def test_criterion_11_figure1_smoke():
    rows = [r for r in _rows("example1", "figure") if r.n_int == 16 and r.n_B in (None, 4)]
    med = {}
    for r in rows:
        s = _run(r.config, 5000)
        med[(r.method, r.config.tau_scenario)] = s.sigma_e2_q[1]
    truth = builtin_design("example1")[1].sigma_e2
    failures = []
    for (m, t), v in med.items():
        if m in ("unblinded", "block") and abs(v / truth - 1) > 0.15:
            failures.append(f"{m}/{t} median {v:.3f} not near {truth}")
    for m in ("adjusted_null", "adjusted_alternative"):
        if not med[(m, "observed")] > max(med[("unblinded", "observed")], med[("block", "observed")]):
            failures.append(f"{m} not inflated under observed effects ({med[(m, 'observed')]:.3f})")
    if not med[("adjusted_null", "observed")] > truth * 1.05:
        failures.append("null-adjusted median not above truth under observed effects")
    detail = ("sigma_e2 medians under observed effects: " +
              ", ".join(f"{m} {med[(m, 'observed')]:.3f}" for m in
                        ("unblinded", "block", "adjusted_null", "adjusted_alternative"))
              + f" (truth {truth})" + ("" if not failures else " | " + "; ".join(failures)))
    assert record("11", not failures, detail), detail
