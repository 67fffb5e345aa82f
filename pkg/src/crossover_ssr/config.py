"""JSON scenario files: parsing with line-anchored errors, grid expansion and
ready-made configurations for the three built-in examples.

A config looks like::

    {
      "example": "example1",            # or "design" + "params" + "hypothesis"
      "n_max": 1000,
      "replications": 10000,
      "seed": 20240101,
      "rounding": "sequence",
      "scenarios": [
        {"method": ["unblinded", "adjusted_null"], "n_int": [8, 16],
         "tau_scenario": ["global_null", "global_alt"]}
      ]
    }

Every entry of ``scenarios`` is a grid block; list-valued keys are crossed.
"""
from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass
from itertools import product
from typing import Any, Dict, List, Optional, Tuple

from . import __version__
from .design import BUILTIN_NAMES, DesignError, HypothesisSpec, ModelParams, TrialDesign, builtin_design
from .sample_size import ReestimationPolicy
from .simulator import TAU_SCENARIOS, ScenarioConfig

METHOD_NAMES = ("unblinded", "adjusted_null", "adjusted_alternative", "adjusted_custom", "block")
GRID_KEYS = ("method", "n_int", "n_B", "tau_scenario", "sigma_e2", "sigma_b2", "delta",
             "random_period_sd", "inflation")
TOP_KEYS = {"example", "design", "params", "hypothesis", "n_max", "replications", "seed", "rounding",
            "inflation", "inflation_alpha", "random_period_sd", "interim_only", "tau_star",
            "scenarios", "calibration", "description"}


class ConfigError(ValueError):
    def __init__(self, message, line=None, source="<config>"):
        self.line = line
        where = f"{source}:{line}: " if line is not None else f"{source}: "
        super().__init__(where + message)


# ---------------------------------------------------------------------------
# JSON with source positions

_WS = re.compile(r"[ \t\n\r]*")
_NUM = re.compile(r"-?(?:0|[1-9]\d*)(?:\.\d+)?(?:[eE][+-]?\d+)?")


def _locate(text: str) -> Dict[Tuple, int]:
    """Map every JSON path (tuple of keys and indices) to the line its value starts on."""
    lines: Dict[Tuple, int] = {}
    dec = json.JSONDecoder()

    def line_of(pos):
        return text.count("\n", 0, pos) + 1

    def skip(pos):
        return _WS.match(text, pos).end()

    def value(pos, path):
        pos = skip(pos)
        lines[path] = line_of(pos)
        ch = text[pos]
        if ch == "{":
            pos = skip(pos + 1)
            if text[pos] == "}":
                return pos + 1
            while True:
                key, pos = dec.raw_decode(text, skip(pos))
                pos = skip(pos) + 1  # colon
                pos = skip(value(pos, path + (key,)))
                if text[pos] == "}":
                    return pos + 1
                pos += 1
        if ch == "[":
            pos = skip(pos + 1)
            if text[pos] == "]":
                return pos + 1
            i = 0
            while True:
                pos = skip(value(pos, path + (i,)))
                i += 1
                if text[pos] == "]":
                    return pos + 1
                pos += 1
        _, end = dec.raw_decode(text, pos)
        return end

    value(0, ())
    return lines


@dataclass(frozen=True, eq=False)
class RawConfig:
    data: Dict[str, Any]
    lines: Dict[Tuple, int]
    source: str
    text: str

    def error(self, message, path=()):
        path = tuple(path)
        while path and path not in self.lines:
            path = path[:-1]
        raise ConfigError(message, self.lines.get(path), self.source)


def load_text(text: str, source="<config>") -> RawConfig:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON: {exc.msg} (column {exc.colno})", exc.lineno, source) from None
    if not isinstance(data, dict):
        raise ConfigError("the top level must be a JSON object", 1, source)
    return RawConfig(data, _locate(text), source, text)


def config_hash(text: str) -> str:
    return hashlib.sha256(text.encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# manifest

@dataclass(frozen=True)
class ScenarioRow:
    scenario_id: int
    method: str
    n_int: int
    n_B: Optional[int]
    inflation: bool
    config: ScenarioConfig


@dataclass(frozen=True, eq=False)
class RunManifest:
    source: str
    config_hash: str
    version: str
    master_seed: int
    scenarios: Tuple[ScenarioRow, ...]
    calibration: Optional[Dict[str, Any]] = None

    def same_scenarios(self, other: "RunManifest") -> bool:
        return self.scenarios == other.scenarios and self.master_seed == other.master_seed


def _as_list(v):
    return v if isinstance(v, list) else [v]


def _num(raw, path, value, kind=float, positive=False, allow_zero=True):
    ok = isinstance(value, (int, float)) and not isinstance(value, bool)
    if kind is int:
        ok = ok and float(value).is_integer()
    if not ok:
        raw.error(f"{'/'.join(map(str, path))} must be {'an integer' if kind is int else 'a number'}", path)
    value = kind(value)
    if positive and (value < 0 or (value == 0 and not allow_zero)):
        raw.error(f"{'/'.join(map(str, path))} must be {'positive' if not allow_zero else 'nonnegative'}", path)
    return value


def _base(raw: RawConfig):
    d = raw.data
    for key in d:
        if key not in TOP_KEYS:
            raw.error(f"unknown key {key!r}", (key,))
    if "example" in d:
        name = d["example"]
        if name not in BUILTIN_NAMES:
            raw.error(f"unknown example {name!r}; choose from {list(BUILTIN_NAMES)}", ("example",))
        design, params, hyp = builtin_design(name)
    else:
        for key in ("design", "params", "hypothesis"):
            if key not in d:
                raw.error(f"missing {key!r} (or give 'example')")
        try:
            ds = d["design"]
            design = TrialDesign.from_strings(ds["sequences"], ds.get("D"))
        except (DesignError, KeyError, TypeError, ValueError) as exc:
            raw.error(f"bad design: {exc}", ("design",))
        try:
            params = ModelParams(**d["params"])
        except (DesignError, TypeError) as exc:
            raw.error(f"bad params: {exc}", ("params",))
        try:
            hyp = HypothesisSpec(**d["hypothesis"])
        except (DesignError, TypeError) as exc:
            raw.error(f"bad hypothesis: {exc}", ("hypothesis",))
    # explicit overrides of the example's parameters
    if "example" in d:
        for key in ("params", "hypothesis"):
            if key in d:
                try:
                    if key == "params":
                        params = params.with_(**d[key])
                    else:
                        hyp = hyp.with_(**d[key])
                except (DesignError, TypeError) as exc:
                    raw.error(f"bad {key}: {exc}", (key,))
    try:
        params.check_against(design)
    except DesignError as exc:
        raw.error(str(exc), ("params",))
    return design, params, hyp


def build_manifest(raw: RawConfig, overrides: Optional[Dict[str, Any]] = None) -> RunManifest:
    """Expand and validate every scenario before anything is simulated."""
    overrides = overrides or {}
    d = raw.data
    design, params, hyp = _base(raw)
    n_max = _num(raw, ("n_max",), d.get("n_max", 1000), int, True, False)
    reps = overrides.get("replications") or _num(raw, ("replications",), d.get("replications", 10000), int,
                                                   True, False)
    seed = overrides.get("seed")
    if seed is None:
        seed = _num(raw, ("seed",), d.get("seed", 20240101), int, True)
    rounding = d.get("rounding", "sequence")
    if rounding not in ("sequence", "integer"):
        raw.error("rounding must be 'sequence' or 'integer' (block methods always use n_B)", ("rounding",))
    inflation_alpha = d.get("inflation_alpha", "alpha")
    if inflation_alpha not in ("alpha", "alpha_star"):
        raw.error("inflation_alpha must be 'alpha' or 'alpha_star'", ("inflation_alpha",))
    interim_only = d.get("interim_only", False)
    if not isinstance(interim_only, bool):
        raw.error("interim_only must be true or false", ("interim_only",))
    tau_star = d.get("tau_star")
    blocks = d.get("scenarios")
    if not isinstance(blocks, list) or not blocks:
        raw.error("'scenarios' must be a nonempty list of grid blocks", ("scenarios",))
    rows: List[ScenarioRow] = []
    for b, block in enumerate(blocks):
        bpath = ("scenarios", b)
        if not isinstance(block, dict):
            raw.error("each grid block must be an object", bpath)
        for key in block:
            if key not in GRID_KEYS:
                raw.error(f"unknown grid key {key!r}", bpath + (key,))
        axes = {k: _as_list(block.get(k, d.get(k) if k in ("inflation", "random_period_sd") else None))
                for k in GRID_KEYS}
        axes["method"] = _as_list(block.get("method", "unblinded"))
        axes["tau_scenario"] = _as_list(block.get("tau_scenario", "global_null"))
        if "n_int" not in block:
            raw.error("grid block needs 'n_int'", bpath)
        for combo in product(*(axes[k] for k in GRID_KEYS)):
            c = dict(zip(GRID_KEYS, combo))
            rows.append(_scenario(raw, bpath, c, len(rows), design, params, hyp, n_max, reps, seed,
                                  rounding, inflation_alpha, interim_only, tau_star, overrides))
    calib = d.get("calibration")
    if calib is not None:
        _check_calibration(raw, calib, hyp)
    return RunManifest(raw.source, config_hash(raw.text), __version__, int(seed), tuple(rows), calib)


def _scenario(raw, bpath, c, sid, design, params, hyp, n_max, reps, seed, rounding, inflation_alpha,
              interim_only, tau_star, overrides) -> ScenarioRow:
    method = c["method"]
    if method not in METHOD_NAMES:
        raw.error(f"unknown method {method!r}; choose from {list(METHOD_NAMES)}", bpath + ("method",))
    n_int = _num(raw, bpath + ("n_int",), c["n_int"], int, True, False)
    n_B = c["n_B"]
    if method == "block":
        if n_B is None:
            raw.error("method 'block' needs n_B", bpath)
        n_B = _num(raw, bpath + ("n_B",), n_B, int, True, False)
    else:
        n_B = None
    if c["tau_scenario"] not in TAU_SCENARIOS:
        raw.error(f"unknown tau_scenario {c['tau_scenario']!r}; choose from {list(TAU_SCENARIOS)}",
                  bpath + ("tau_scenario",))
    p, h = params, hyp
    try:
        if c["sigma_e2"] is not None:
            p = p.with_(sigma_e2=_num(raw, bpath + ("sigma_e2",), c["sigma_e2"], float, True))
        if c["sigma_b2"] is not None:
            p = p.with_(sigma_b2=_num(raw, bpath + ("sigma_b2",), c["sigma_b2"], float, True))
        if c["delta"] is not None:
            h = h.with_(delta=_num(raw, bpath + ("delta",), c["delta"]))
    except DesignError as exc:
        raw.error(str(exc), bpath)
    inflation = c["inflation"]
    if overrides.get("inflation") is not None:
        inflation = overrides["inflation"]
    if inflation is None:
        inflation = False
    if not isinstance(inflation, bool):
        raw.error("inflation must be true or false", bpath + ("inflation",))
    rps = 0.0 if c["random_period_sd"] is None else _num(raw, bpath + ("random_period_sd",),
                                                          c["random_period_sd"], float, True)
    try:
        policy = ReestimationPolicy(n_int, n_max, method, "block" if method == "block" else rounding, n_B,
                                    inflation, inflation_alpha)
        cfg = ScenarioConfig(design, p, h, policy, c["tau_scenario"],
                             "block" if method == "block" else "simple", int(reps), int(seed), rps,
                             tuple(tau_star) if tau_star is not None else None, None, interim_only)
    except DesignError as exc:
        raw.error(f"scenario {sid}: {exc}", bpath)
    return ScenarioRow(sid, method, n_int, n_B, inflation, cfg)


def _check_calibration(raw, calib, hyp):
    path = ("calibration",)
    if not isinstance(calib, dict):
        raw.error("calibration must be an object", path)
    grid = calib.get("grid")
    if not isinstance(grid, list) or not grid:
        raw.error("calibration.grid must be a nonempty list of [sigma_e2, sigma_b2] pairs", path + ("grid",))
    for i, g in enumerate(grid):
        if not (isinstance(g, list) and len(g) == 2):
            raw.error("each grid point must be [sigma_e2, sigma_b2]", path + ("grid", i))
        _num(raw, path + ("grid", i, 0), g[0], float, True, False)
        _num(raw, path + ("grid", i, 1), g[1], float, True)
    t = calib.get("target_alpha", hyp.alpha)
    if not (isinstance(t, (int, float)) and 0 < t < 1):
        raw.error("target_alpha must lie in (0, 1)", path + ("target_alpha",))


def load_manifest(path: str, overrides=None) -> RunManifest:
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc.strerror}", None, path) from None
    return build_manifest(load_text(text, path), overrides)


# ---------------------------------------------------------------------------
# built-in example configs

_TABLE_TAUS = {
    "example1": ["global_null", "tau1_only", "tau1_tau2", "global_alt"],
    "example2": ["global_null", "tau1_only", "global_alt"],
    "example3": ["global_null", "global_alt"],
}
_FIGURE_TAUS = {
    "example1": ["global_null", "tau1_only", "tau1_tau2", "global_alt", "observed"],
    "example2": ["global_null", "tau1_only", "global_alt", "observed"],
    "example3": ["global_null", "global_alt", "observed"],
}
_SIMPLE = ["unblinded", "adjusted_null", "adjusted_alternative"]


def _blocks(name, taus):
    if name == "example1":
        n_ints = [8, 16, 24, 32, 40]
        return [
            {"method": _SIMPLE, "n_int": n_ints, "tau_scenario": taus},
            {"method": "block", "n_B": 2, "n_int": n_ints, "tau_scenario": taus},
            {"method": "block", "n_B": 4, "n_int": [16, 32], "tau_scenario": taus},
        ]
    if name == "example2":
        return [
            {"method": _SIMPLE, "n_int": 18, "tau_scenario": taus},
            {"method": "block", "n_B": 3, "n_int": 18, "tau_scenario": taus},
        ]
    return [
        {"method": _SIMPLE, "n_int": [16, 32, 48], "tau_scenario": taus},
        {"method": "block", "n_B": 4, "n_int": [16, 32, 48], "tau_scenario": taus},
        {"method": "block", "n_B": 8, "n_int": [32, 48], "tau_scenario": taus},
    ]


def example_config(name: str, kind: str = "table") -> Dict[str, Any]:
    """Config dict that reruns the table (or figure) scenarios of an example."""
    if name not in BUILTIN_NAMES:
        raise ConfigError(f"unknown example {name!r}; choose from {list(BUILTIN_NAMES)}")
    if kind not in ("table", "figure"):
        raise ConfigError("kind must be 'table' or 'figure'")
    taus = (_TABLE_TAUS if kind == "table" else _FIGURE_TAUS)[name]
    cfg: Dict[str, Any] = {
        "description": f"{name} {kind} scenarios",
        "example": name,
        "n_max": 1000,
        "replications": 10000 if kind == "table" else 5000,
        "seed": 20240101,
        "rounding": "sequence",
        "scenarios": _blocks(name, taus),
    }
    if kind == "figure":
        cfg["interim_only"] = True
    if kind == "table" and name == "example2":
        # the table's last column: global alternative with the inflation factor
        cfg["scenarios"] += [
            {"method": _SIMPLE, "n_int": 18, "tau_scenario": "global_alt", "inflation": True},
            {"method": "block", "n_B": 3, "n_int": 18, "tau_scenario": "global_alt", "inflation": True},
        ]
    if name == "example2":
        _, p, _ = builtin_design(name)
        cfg["calibration"] = {
            "grid": [[0.5 * p.sigma_e2, p.sigma_b2], [p.sigma_e2, p.sigma_b2], [2 * p.sigma_e2, p.sigma_b2]],
            "target_alpha": 0.1,
        }
    return cfg


def dump_config(cfg: Dict[str, Any]) -> str:
    return json.dumps(cfg, indent=2) + "\n"
