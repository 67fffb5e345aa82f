"""Command-line front end.

Exit codes: 0 on success, 2 when the config or arguments fail validation,
3 when a run fails part-way.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import math
import os
import sys
import time
from typing import List, Optional

from . import __version__
from . import sample_size as ss
from .config import (ConfigError, build_manifest, dump_config, example_config, load_manifest, load_text)
from .design import BUILTIN_NAMES, DesignError, builtin_design
from .simulator import RAW_FIELDS, SimulationError, calibrate_alpha, run_monte_carlo

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3

SUMMARY_COLUMNS = (
    "scenario_id", "method", "n_int", "n_B", "tau_scenario", "sigma_e2", "sigma_b2", "delta", "reps",
    "fwer", "fwer_se", "power_pairwise", "power_familywise",
    "sigma_e2_q25", "sigma_e2_q50", "sigma_e2_q75",
    "sigma_b2_q25", "sigma_b2_q50", "sigma_b2_q75",
    "N_hat_q25", "N_hat_q50", "N_hat_q75",
    "mean_realised_N", "nonconverged_count",
    # metadata needed to rerun a row exactly
    "power_pairwise_se", "power_familywise_se", "uneven_count", "inflation", "random_period_sd",
    "interim_only", "seed", "config_hash", "version",
)


def _manifest(args, overrides=None):
    if args.config and args.example:
        raise ConfigError("give either --config or --example, not both")
    if args.config:
        return load_manifest(args.config, overrides)
    if args.example:
        kind = getattr(args, "kind", "table") or "table"
        cfg = example_config(args.example, kind)
        text = dump_config(cfg)
        return build_manifest(load_text(text, f"<{args.example}>"), overrides)
    raise ConfigError("one of --config or --example is required")


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _fmt4(v):
    if v is None or v == "":
        return "-"
    if isinstance(v, float):
        return f"{v:.4f}"
    return str(v)


# ---------------------------------------------------------------------------
# design

def design_report(design, params, hyp, n_int=None):
    info = ss.unit_information(design, params.sigma_e2, params.sigma_b2, hyp.alpha, hyp.direction)
    n_pair = ss.required_n_pairwise(design, params.sigma_e2, params.sigma_b2, hyp, info)
    n_fw = ss.required_n_familywise(design, params.sigma_e2, params.sigma_b2, hyp, info)
    n_ceil = math.ceil(n_pair - 1e-9)
    n_seq = ss.round_up(n_ceil, design.K)
    rep = {
        "K": design.K, "P": design.P, "D": design.D,
        "e": info.e, "alpha_star": info.alpha_star,
        "unit_information": info.unit_info.tolist(),
        "q_corr": info.q_corr.tolist(),
        "N_pairwise": n_pair, "N_pairwise_ceil": n_ceil, "N_pairwise_multiple_of_K": n_seq,
        "N_familywise": n_fw,
        "nu_at_N": ss.analysis_df(n_ceil, design.P, design.D),
    }
    if n_int is not None:
        nu = ss.analysis_df(n_int, design.P, design.D)
        rep["n_int"] = n_int
        rep["nu_at_n_int"] = nu
        rep["inflation_factor_at_n_int"] = ss.inflation_factor(hyp.alpha, hyp.beta, nu) if nu >= 1 else None
    return rep


def cmd_design(args) -> int:
    if args.example and not args.config:
        design, params, hyp = builtin_design(args.example)
    else:
        m = _manifest(args)
        c = m.scenarios[0].config
        design, params, hyp = c.design, c.true_params, c.hyp
    rep = design_report(design, params, hyp, args.n_int)
    if args.json:
        print(json.dumps(rep, indent=2))
        return EXIT_OK
    name = args.example or args.config
    print(f"design: {name}  (K={rep['K']}, P={rep['P']}, D={rep['D']})")
    print(f"  critical value e        {rep['e']:.4f}")
    print(f"  per-comparison alpha*   {rep['alpha_star']:.4f}")
    print("  unit information        " + ", ".join(f"{v:.4f}" for v in rep["unit_information"]))
    print(f"  N (pairwise)            {rep['N_pairwise']:.4f}")
    print(f"  N (pairwise, ceiling)   {rep['N_pairwise_ceil']}")
    print(f"  N (multiple of K)       {rep['N_pairwise_multiple_of_K']}")
    print(f"  N (familywise)          {rep['N_familywise']}")
    print(f"  nu at ceiling N         {rep['nu_at_N']}")
    if "n_int" in rep:
        f = rep["inflation_factor_at_n_int"]
        print(f"  inflation at n_int={rep['n_int']}  {_fmt4(f)}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# simulate

def summary_row(row, summary, manifest):
    c = row.config
    p = c.params
    vals = {
        "scenario_id": row.scenario_id, "method": row.method, "n_int": row.n_int, "n_B": row.n_B,
        "tau_scenario": c.tau_scenario, "sigma_e2": p.sigma_e2, "sigma_b2": p.sigma_b2,
        "delta": c.hyp.delta, "reps": summary.reps,
        "fwer": summary.fwer, "fwer_se": summary.fwer_se,
        "power_pairwise": summary.power_pairwise, "power_familywise": summary.power_familywise,
        "mean_realised_N": summary.mean_realised_N, "nonconverged_count": summary.nonconverged_count,
        "power_pairwise_se": summary.power_pairwise_se,
        "power_familywise_se": summary.power_familywise_se,
        "uneven_count": summary.uneven_count, "inflation": row.inflation,
        "random_period_sd": c.random_period_sd, "interim_only": c.interim_only,
        "seed": manifest.master_seed, "config_hash": manifest.config_hash, "version": manifest.version,
    }
    for name, q in (("sigma_e2", summary.sigma_e2_q), ("sigma_b2", summary.sigma_b2_q), ("N_hat", summary.N_hat_q)):
        for lab, v in zip(("q25", "q50", "q75"), q):
            vals[f"{name}_{lab}"] = v
    if c.interim_only:
        for k in ("fwer", "fwer_se", "power_pairwise", "power_familywise", "power_pairwise_se",
                  "power_familywise_se"):
            vals[k] = None
    return vals


def _writer(path):
    fh = open(path, "w", newline="")
    return fh, csv.writer(fh, lineterminator="\n")


CONSOLE = ("scenario_id", "method", "n_int", "n_B", "tau_scenario", "fwer", "power_pairwise",
           "power_familywise", "sigma_e2_q50", "N_hat_q50")


def cmd_simulate(args) -> int:
    overrides = {"replications": args.reps, "seed": args.seed,
                 "inflation": None if args.inflation is None else args.inflation == "on"}
    manifest = _manifest(args, overrides)
    out = args.out
    try:
        os.makedirs(out, exist_ok=True)
        probe = os.path.join(out, ".write_test")
        open(probe, "w").close()
        os.remove(probe)
    except OSError as exc:
        print(f"error: cannot write to {out}: {exc.strerror}", file=sys.stderr)
        return EXIT_CONFIG
    started = time.strftime("%Y-%m-%dT%H:%M:%S")
    rows = []
    raw_fh = raw_w = None
    if args.raw:
        raw_fh, raw_w = _writer(os.path.join(out, "replicates.csv"))
        raw_w.writerow(("scenario_id",) + RAW_FIELDS + tuple(f"T{d}" for d in range(1, 20)))
    print("  ".join(f"{c:>14}" for c in CONSOLE))
    try:
        for row in manifest.scenarios:
            summary, tab = run_monte_carlo(row.config, args.threads, return_raw=True)
            vals = summary_row(row, summary, manifest)
            rows.append(vals)
            print("  ".join(f"{_fmt4(vals[c]):>14}" for c in CONSOLE), flush=True)
            if raw_w is not None:
                for i in range(len(tab)):
                    raw_w.writerow([row.scenario_id, i, _fmt(float(tab.sigma_e2_hat[i])),
                                    _fmt(float(tab.sigma_b2_raw[i])), int(tab.N_hat[i]),
                                    int(tab.N_final[i]), _fmt(float(tab.e[i])), int(tab.converged[i]),
                                    int(tab.uneven[i])] + [_fmt(float(t)) for t in tab.T[i]])
    except (SimulationError, DesignError, ArithmeticError, ValueError) as exc:
        print(f"error: simulation failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    finally:
        if raw_fh is not None:
            raw_fh.close()
    fh, w = _writer(os.path.join(out, "summary.csv"))
    with fh:
        w.writerow(SUMMARY_COLUMNS)
        for vals in rows:
            w.writerow([_fmt(vals[c]) for c in SUMMARY_COLUMNS])
    with open(os.path.join(out, "manifest.json"), "w") as fh:
        json.dump({"config": manifest.source, "config_hash": manifest.config_hash,
                   "version": manifest.version, "master_seed": manifest.master_seed,
                   "scenarios": len(manifest.scenarios), "started": started,
                   "finished": time.strftime("%Y-%m-%dT%H:%M:%S"),
                   "notes": "fwer counts rejections of true nulls only, so it is also "
                            "reported under partial nulls"}, fh, indent=2)
    return EXIT_OK


# ---------------------------------------------------------------------------
# calibrate

def cmd_calibrate(args) -> int:
    manifest = _manifest(args, {"replications": args.reps, "seed": args.seed, "inflation": None})
    base = manifest.scenarios[args.scenario].config
    calib = manifest.calibration or {}
    grid = calib.get("grid") or [[base.true_params.sigma_e2, base.true_params.sigma_b2]]
    target = calib.get("target_alpha", base.hyp.alpha)
    reps = base.replications
    try:
        res = calibrate_alpha(base, grid, target, reps, args.threads)
    except (SimulationError, DesignError, ValueError) as exc:
        print(f"error: calibration failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    print(f"calibration for scenario {args.scenario} ({base.policy.method}, n_int={base.policy.n_int})")
    if res.grid_fwer:
        print(f"{'sigma_e2':>10}  {'sigma_b2':>10}  {'fwer':>8}")
        for se2, sb2, f in res.grid_fwer:
            print(f"{se2:>10.4f}  {sb2:>10.4f}  {f:>8.4f}")
    print(f"maximiser: sigma_e2={res.sigma_e2_max:.4f}, sigma_b2={res.sigma_b2_max:.4f}")
    print("bisection trace (alpha, fwer):")
    for a, f in res.trace:
        print(f"  {a:.6f}  {f:.4f}")
    print(f"alpha_adj = {res.alpha_adj:.6f}")
    if args.out:
        with open(args.out, "w") as fh:
            json.dump({"alpha_adj": res.alpha_adj, "sigma_e2_max": res.sigma_e2_max,
                       "sigma_b2_max": res.sigma_b2_max, "grid_fwer": res.grid_fwer,
                       "trace": res.trace, "target_alpha": target, "reps": reps,
                       "seed": manifest.master_seed, "config_hash": manifest.config_hash,
                       "version": manifest.version}, fh, indent=2)
    return EXIT_OK


# ---------------------------------------------------------------------------
# examples

def cmd_examples(args) -> int:
    text = dump_config(example_config(args.name, args.kind))
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


# ---------------------------------------------------------------------------

def _source_args(p):
    p.add_argument("--config", help="JSON scenario file")
    p.add_argument("--example", choices=BUILTIN_NAMES, help="use a built-in example instead of --config")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="crossover-ssr", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("design", help="critical values and required sample sizes")
    _source_args(p)
    p.add_argument("--n-int", type=int, default=None, help="report nu and the inflation factor at n_int")
    p.add_argument("--json", action="store_true", help="print the report as JSON")
    p.set_defaults(func=cmd_design)

    p = sub.add_parser("simulate", help="Monte Carlo operating characteristics")
    _source_args(p)
    p.add_argument("--kind", choices=("table", "figure"), default="table",
                   help="with --example: table scenarios or interim-only figure data")
    p.add_argument("--reps", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--threads", type=int, default=None,
                   help="worker processes (no effect on results); env CROSSOVER_SSR_THREADS overrides")
    p.add_argument("--out", default="results")
    p.add_argument("--raw", action="store_true", help="also write per-replicate results")
    p.add_argument("--inflation", choices=("on", "off"), default=None)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("calibrate", help="alpha adjustment for FWER control")
    _source_args(p)
    p.add_argument("--kind", choices=("table", "figure"), default="table")
    p.add_argument("--scenario", type=int, default=0, help="scenario id used as the base (default 0)")
    p.add_argument("--reps", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--threads", type=int, default=None)
    p.add_argument("--out", default=None, help="write the report as JSON")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("examples", help="write a ready-to-run config for a built-in example")
    p.add_argument("name", choices=BUILTIN_NAMES)
    p.add_argument("--kind", choices=("table", "figure"), default="table")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_examples)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    try:
        return args.func(args)
    except (ConfigError, DesignError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SimulationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
