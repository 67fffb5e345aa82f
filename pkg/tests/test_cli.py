import csv
import json

import pytest

from crossover_ssr.cli import EXIT_CONFIG, EXIT_OK, SUMMARY_COLUMNS, main
from crossover_ssr.config import build_manifest, example_config, load_manifest, load_text, dump_config

SMALL = {
    "example": "example1",
    "n_max": 200,
    "replications": 12,
    "seed": 5,
    "scenarios": [
        {"method": ["unblinded", "adjusted_null"], "n_int": 16, "tau_scenario": ["global_null", "global_alt"]},
        {"method": "block", "n_B": 4, "n_int": 16, "tau_scenario": "tau1_only"},
    ],
}


def _write(tmp_path, obj, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(obj, indent=2) if not isinstance(obj, str) else obj)
    return str(p)


@pytest.mark.parametrize("name,rows", [("example1", 88), ("example2", 16), ("example3", 28)])
def test_example_configs_round_trip(tmp_path, name, rows):
    out = tmp_path / f"{name}.json"
    assert main(["examples", name, "--out", str(out)]) == EXIT_OK
    m = load_manifest(str(out))
    assert len(m.scenarios) == rows
    again = build_manifest(load_text(dump_config(example_config(name, "table")), "<mem>"))
    assert m.same_scenarios(again)
    assert main(["examples", name, "--kind", "figure", "--out", str(tmp_path / "fig.json")]) == EXIT_OK


def test_design_command(capsys):
    assert main(["design", "--example", "example1", "--n-int", "16", "--json"]) == EXIT_OK
    rep = json.loads(capsys.readouterr().out)
    assert rep["N_pairwise_ceil"] == 72 and rep["N_familywise"] == 42
    assert rep["nu_at_n_int"] == 42
    assert abs(rep["inflation_factor_at_n_int"] - 1.0371300695576) < 1e-9
    assert main(["design", "--example", "example2"]) == EXIT_OK
    assert "N (multiple of K)       36" in capsys.readouterr().out


def test_simulate_writes_outputs(tmp_path, capsys):
    cfg = _write(tmp_path, SMALL)
    out = tmp_path / "res"
    assert main(["simulate", "--config", cfg, "--out", str(out), "--raw"]) == EXIT_OK
    with open(out / "summary.csv") as fh:
        rows = list(csv.reader(fh))
    assert tuple(rows[0]) == SUMMARY_COLUMNS
    assert len(rows) == 1 + 5
    d = dict(zip(rows[0], rows[1]))
    assert d["reps"] == "12" and d["seed"] == "5"
    glob_alt = [dict(zip(rows[0], r)) for r in rows[1:] if r[4] == "global_alt"]
    assert all(r["fwer"] == "" for r in glob_alt)
    man = json.loads((out / "manifest.json").read_text())
    assert man["scenarios"] == 5
    with open(out / "replicates.csv") as fh:
        assert sum(1 for _ in fh) == 1 + 5 * 12


def test_thread_count_does_not_change_output(tmp_path):
    cfg = _write(tmp_path, SMALL)
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["simulate", "--config", cfg, "--out", str(a), "--threads", "1", "--raw"]) == EXIT_OK
    assert main(["simulate", "--config", cfg, "--out", str(b), "--threads", "8", "--raw"]) == EXIT_OK
    assert (a / "summary.csv").read_bytes() == (b / "summary.csv").read_bytes()
    assert (a / "replicates.csv").read_bytes() == (b / "replicates.csv").read_bytes()


def test_config_errors_are_line_anchored(tmp_path, capsys):
    bad = dict(SMALL, scenarios=[{"method": "bogus", "n_int": 16}])
    cfg = _write(tmp_path, bad)
    assert main(["simulate", "--config", cfg, "--out", str(tmp_path / "o")]) == EXIT_CONFIG
    err = capsys.readouterr().err
    assert f"{cfg}:" in err and "method" in err
    line = int(err.split(f"{cfg}:")[1].split(":")[0])
    assert "bogus" in open(cfg).read().splitlines()[line - 1]
    cfg2 = _write(tmp_path, "{ not json", "broken.json")
    assert main(["simulate", "--config", cfg2]) == EXIT_CONFIG
    assert main(["simulate", "--config", str(tmp_path / "missing.json")]) == EXIT_CONFIG
    assert main(["simulate"]) == EXIT_CONFIG
    assert main(["no-such-command"]) == EXIT_CONFIG


def test_calibrate_command(tmp_path, capsys):
    cfg = _write(tmp_path, dict(SMALL, replications=30))
    out = tmp_path / "cal.json"
    assert main(["calibrate", "--config", cfg, "--out", str(out)]) == EXIT_OK
    res = json.loads(out.read_text())
    assert 0 < res["alpha_adj"] <= 0.05
    assert "alpha_adj" in capsys.readouterr().out
