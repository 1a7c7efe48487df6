"""Run configuration: a YAML file validated against a fixed schema.

Unknown keys are rejected and every numeric range is checked before any
computation starts. Any leaf can be overridden with a dotted path.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Optional

import yaml

from .engine import MCConfig
from .fields import FIELDS, ConductanceField, make_field

QUANTITIES = ("nu", "nu_star", "abar", "delta", "c_km", "expansion", "harmonic", "key_probe",
              "continuity")

DEFAULTS: dict = {
    "field": {"name": "constant", "c": 1.0},
    "d": 1,
    "m": [0],
    "rho0": [1.0],
    "rho": [0.05, 0.1, 0.2],
    "q": None,
    "p": None,
    "quantities": ["nu_star"],
    "k": 1,
    "harmonic": {"E": [1], "F": [], "rho": 0.0, "which": 1},
    "key_probe": {"F": [1], "G": [1]},
    "mc": {"n_outer": 16, "n_max": 4, "h": 1 / 16, "h_ext": 1 / 16, "tol": 1e-10, "seed": 0,
           "tail_tol": 1e-3, "label_cap": 4},
    "oracle": {"n_max": 2, "h_ladder": [1 / 32, 1 / 64, 1 / 128], "h_ext": 1 / 16, "k_ext": 6},
    "outputs": {"csv": "results.csv", "json": "provenance.json", "dat_dir": "dat", "cache_dir": None},
}

# caps for the oracle subcommand
ORACLE_CAPS = {"n_max": 2, "min_h": 1 / 512, "k_ext": 8}


class ConfigError(ValueError):
    pass


def _merge(base: dict, over: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, val in over.items():
        where = f"{path}{key}"
        if key not in base:
            raise ConfigError(f"unknown key {where!r}")
        if key == "field":
            out[key] = dict(val) if isinstance(val, dict) else val
        elif isinstance(base[key], dict):
            if not isinstance(val, dict):
                raise ConfigError(f"{where}: expected a section, got {type(val).__name__}")
            out[key] = _merge(base[key], val, where + ".")
        else:
            out[key] = val
    return out


def parse_text(text: str) -> dict:
    try:
        data = yaml.safe_load(text) or {}
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f" at line {mark.line + 1}, column {mark.column + 1}" if mark else ""
        raise ConfigError(f"config parse error{where}: {getattr(exc, 'problem', exc)}") from exc
    if not isinstance(data, dict):
        raise ConfigError("config must be a mapping at top level")
    return data


def apply_override(data: dict, assignment: str) -> dict:
    """Set a leaf from 'dotted.path=value'; the value is parsed as YAML."""
    if "=" not in assignment:
        raise ConfigError(f"override {assignment!r} must look like key.path=value")
    path, raw = assignment.split("=", 1)
    keys = path.strip().split(".")
    node = data
    for k in keys[:-1]:
        node = node.setdefault(k, {})
        if not isinstance(node, dict):
            raise ConfigError(f"override {path!r}: {k!r} is not a section")
    node[keys[-1]] = yaml.safe_load(raw)
    return data


@dataclass
class RunConfig:
    raw: dict
    field: ConductanceField
    mc: MCConfig

    def __getitem__(self, key: str) -> Any:
        return self.raw[key]

    @property
    def d(self) -> int:
        return self.raw["d"]


def _number_list(raw: dict, key: str, lo: float, hi: float, allow_zero=False) -> None:
    vals = raw[key] if isinstance(raw[key], list) else [raw[key]]
    for v in vals:
        if not isinstance(v, (int, float)) or isinstance(v, bool):
            raise ConfigError(f"{key}: {v!r} is not a number")
        if not (lo < v <= hi or (allow_zero and v == 0)):
            raise ConfigError(f"{key}: {v} outside ({lo}, {hi}]")
    raw[key] = [float(v) for v in vals]


def validate(data: dict) -> RunConfig:
    raw = _merge(DEFAULTS, data)
    if raw["d"] not in (1, 2):
        raise ConfigError(f"d: must be 1 or 2, got {raw['d']!r}")
    ms = raw["m"] if isinstance(raw["m"], list) else [raw["m"]]
    if any(not isinstance(m, int) or m < 0 or m > 2 for m in ms):
        raise ConfigError(f"m: entries must be integers in [0, 2], got {ms}")
    raw["m"] = ms
    _number_list(raw, "rho0", 0, 50)
    _number_list(raw, "rho", -1, 5)
    for key in ("q", "p"):
        if raw[key] is not None:
            if len(raw[key]) != raw["d"]:
                raise ConfigError(f"{key}: needs {raw['d']} components")
            raw[key] = [float(v) for v in raw[key]]
    bad = [x for x in raw["quantities"] if x not in QUANTITIES]
    if bad:
        raise ConfigError(f"quantities: unknown {bad}; known: {list(QUANTITIES)}")
    if raw["k"] not in (1, 2, 3):
        raise ConfigError("k: must be 1, 2 or 3")
    spec = raw["field"]
    if not isinstance(spec, dict) or spec.get("name") not in FIELDS:
        raise ConfigError(f"field.name: must be one of {sorted(FIELDS)}")
    try:
        fld = make_field(spec)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"field: {exc}") from exc
    mc_raw = raw["mc"]
    try:
        mc = MCConfig(n_outer=int(mc_raw["n_outer"]), n_max=int(mc_raw["n_max"]), h=float(mc_raw["h"]),
                      h_ext=float(mc_raw["h_ext"]), tol=float(mc_raw["tol"]), seed=int(mc_raw["seed"]),
                      tail_tol=float(mc_raw["tail_tol"]), label_cap=int(mc_raw["label_cap"]))
    except ValueError as exc:
        raise ConfigError(f"mc: {exc}") from exc
    if not 0 < mc.tol < 1e-3:
        raise ConfigError("mc.tol: must lie in (0, 1e-3)")
    orc = raw["oracle"]
    if not 1 <= orc["n_max"] <= ORACLE_CAPS["n_max"]:
        raise ConfigError(f"oracle.n_max: capped at {ORACLE_CAPS['n_max']}")
    if any(h < ORACLE_CAPS["min_h"] or h > 0.25 for h in orc["h_ladder"]) or len(orc["h_ladder"]) < 2:
        raise ConfigError("oracle.h_ladder: at least two spacings in [1/512, 1/4]")
    if not 1 <= orc["k_ext"] <= ORACLE_CAPS["k_ext"]:
        raise ConfigError(f"oracle.k_ext: capped at {ORACLE_CAPS['k_ext']}")
    return RunConfig(raw, fld, mc)


def load(path: Optional[str], overrides=()) -> RunConfig:
    data: dict = {}
    if path:
        p = Path(path)
        data = parse_text(p.read_text())
    for a in overrides:
        apply_override(data, a)
    return validate(data)
