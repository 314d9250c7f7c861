"""Experiment configuration: JSON schema, parsing and canonical hashing."""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass
from typing import Any, Optional

import jsonschema
import numpy as np

from smpc.model import LtiSystem, NoiseModel, Polytope
from smpc.mpc import CostSpec
from smpc.sim import SimConfig


class ConfigError(ValueError):
    pass


_MATRIX = {"type": "array", "minItems": 1, "items": {"type": "array", "minItems": 1, "items": {"type": "number"}}}
_VECTOR = {"type": "array", "minItems": 1, "items": {"type": "number"}}
_BOX = {
    "type": "object",
    "additionalProperties": False,
    "required": ["lower", "upper"],
    "properties": {"lower": _VECTOR, "upper": _VECTOR},
}

SCHEMA: dict[str, Any] = {
    "type": "object",
    "additionalProperties": False,
    "required": ["system", "noise", "constraints", "mpc", "sim", "issp"],
    "properties": {
        "system": {
            "type": "object",
            "additionalProperties": False,
            "required": ["A", "B"],
            "properties": {"A": _MATRIX, "B": _MATRIX, "Ts": {"type": "number", "exclusiveMinimum": 0}},
        },
        "noise": {
            "type": "object",
            "additionalProperties": False,
            "required": ["sigma_w"],
            "properties": {
                "sigma_w": _MATRIX,
                "mode": {"enum": ["exact_gaussian", "moment_ambiguity"]},
            },
        },
        "constraints": {
            "type": "object",
            "additionalProperties": False,
            "required": ["state_box", "input_box"],
            "properties": {"state_box": _BOX, "input_box": _BOX},
        },
        "mpc": {
            "type": "object",
            "additionalProperties": False,
            "required": ["N", "Q", "R", "delta"],
            "properties": {
                "N": {"type": "integer", "minimum": 1},
                "Q": _MATRIX,
                "R": _MATRIX,
                "delta": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                "terminal_facets": {"type": "integer", "minimum": 3},
            },
        },
        "sim": {
            "type": "object",
            "additionalProperties": False,
            "required": ["n_runs", "steps", "master_seed", "initial_states"],
            "properties": {
                "mode": {"enum": ["autonomous", "mpc_combined"]},
                "n_runs": {"type": "integer", "minimum": 1},
                "steps": {"type": "integer", "minimum": 1},
                "master_seed": {"type": "integer", "minimum": 0, "maximum": 2**64 - 1},
                "initial_states": _MATRIX,
            },
        },
        "issp": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "P": _MATRIX,
                "Q_lyap": _MATRIX,
                "gamma_factor": {"type": "number", "exclusiveMinimum": 1},
                "eps": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
                "M": {"type": "integer", "minimum": 1},
                "calibration_runs": {"type": "integer", "minimum": 1},
                "evaluation_runs": {"type": "integer", "minimum": 1},
                "sublevel_samples": {"type": "integer", "minimum": 1},
            },
        },
    },
}

DEFAULTS = {
    "system": {"Ts": 1.0},
    "noise": {"mode": "exact_gaussian"},
    "mpc": {"terminal_facets": 16},
    "sim": {"mode": "mpc_combined"},
    "issp": {
        "gamma_factor": 1.1,
        "eps": 0.1,
        "M": 200,
        "calibration_runs": 100,
        "evaluation_runs": 1000,
        "sublevel_samples": 720,
    },
}

REFERENCE_CONFIG: dict[str, Any] = {
    "system": {"A": [[0.924, -0.1], [0.05, 1.0]], "B": [[0.025], [0.0]], "Ts": 0.05},
    "noise": {"sigma_w": [[0.005, 0.0], [0.0, 0.0075]], "mode": "exact_gaussian"},
    "constraints": {
        "state_box": {"lower": [-1.0, -2.0], "upper": [12.0, 4.0]},
        "input_box": {"lower": [-37.0], "upper": [37.0]},
    },
    # the initial state [10, 0] is feasible only for horizons of about 93 or more
    "mpc": {"N": 100, "Q": [[2.0, 0.0], [0.0, 0.1]], "R": [[1.0]], "delta": 0.15, "terminal_facets": 16},
    "sim": {"mode": "mpc_combined", "n_runs": 100, "steps": 200, "master_seed": 20240, "initial_states": [[10.0, 0.0]]},
    "issp": {
        "P": [[1.093, 0.554], [0.554, 2.915]],
        "gamma_factor": 1.1,
        "eps": 0.1,
        "M": 200,
        "calibration_runs": 100,
        "evaluation_runs": 1000,
        "sublevel_samples": 720,
    },
}


def normalize(doc: dict) -> dict:
    """Validate ``doc`` and fill defaults; numbers become floats except integer fields."""
    try:
        jsonschema.validate(doc, SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"config error at {where}: {exc.message}") from None
    out = copy.deepcopy(doc)
    for block, vals in DEFAULTS.items():
        for key, val in vals.items():
            out[block].setdefault(key, val)
    ints = {("mpc", "N"), ("mpc", "terminal_facets"), ("sim", "n_runs"), ("sim", "steps"), ("sim", "master_seed"),
            ("issp", "M"), ("issp", "calibration_runs"), ("issp", "evaluation_runs"), ("issp", "sublevel_samples")}

    def floats(v):
        if isinstance(v, list):
            return [floats(e) for e in v]
        if isinstance(v, (int, float)) and not isinstance(v, bool):
            return float(v)
        return v

    for block, vals in out.items():
        for key in list(vals):
            if (block, key) not in ints:
                vals[key] = floats(vals[key])
    _check_dimensions(out)
    return out


def _check_dimensions(doc: dict) -> None:
    def shape(M, name):
        lens = {len(r) for r in M}
        if len(lens) != 1:
            raise ConfigError(f"config error at {name}: ragged matrix")
        return len(M), lens.pop()

    nx, nx2 = shape(doc["system"]["A"], "system/A")
    if nx != nx2:
        raise ConfigError("config error at system/A: must be square")
    nb, nu = shape(doc["system"]["B"], "system/B")
    expect = {
        "system/B": (nb, nx),
        "noise/sigma_w": (shape(doc["noise"]["sigma_w"], "noise/sigma_w"), (nx, nx)),
        "mpc/Q": (shape(doc["mpc"]["Q"], "mpc/Q"), (nx, nx)),
        "mpc/R": (shape(doc["mpc"]["R"], "mpc/R"), (nu, nu)),
    }
    for name, (got, want) in expect.items():
        if got != want:
            raise ConfigError(f"config error at {name}: dimension {got}, expected {want}")
    for name, dim in (("state_box", nx), ("input_box", nu)):
        box = doc["constraints"][name]
        if len(box["lower"]) != dim or len(box["upper"]) != dim:
            raise ConfigError(f"config error at constraints/{name}: bounds must have length {dim}")
    if shape(doc["sim"]["initial_states"], "sim/initial_states")[1] != nx:
        raise ConfigError(f"config error at sim/initial_states: states must have length {nx}")
    n0 = len(doc["sim"]["initial_states"])
    if n0 not in (1, doc["sim"]["n_runs"]):
        raise ConfigError("config error at sim/initial_states: give one state or one per run")
    for key in ("P", "Q_lyap"):
        if key in doc["issp"] and shape(doc["issp"][key], f"issp/{key}") != (nx, nx):
            raise ConfigError(f"config error at issp/{key}: expected {nx}x{nx}")


def parse(text: str) -> dict:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config error: invalid JSON ({exc})") from None
    return normalize(doc)


def load(path: str) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            return parse(fh.read())
    except OSError as exc:
        raise ConfigError(f"config error: cannot read {path}: {exc.strerror}") from None


def serialize(doc: dict) -> str:
    """Canonical text: sorted keys, fixed separators, trailing newline."""
    return json.dumps(doc, sort_keys=True, indent=2) + "\n"


def config_hash(doc: dict) -> str:
    return hashlib.sha256(json.dumps(doc, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


@dataclass(frozen=True)
class Experiment:
    """Typed objects built from a normalized document."""

    doc: dict
    sys: LtiSystem
    noise: NoiseModel
    X: Polytope
    U: Polytope
    cost: CostSpec
    N: int
    delta: float
    terminal_facets: int
    sim: SimConfig
    P: Optional[np.ndarray]
    Q_lyap: Optional[np.ndarray]


def build(doc: dict) -> Experiment:
    try:
        s, n, c, m, sm, iss = (doc[k] for k in ("system", "noise", "constraints", "mpc", "sim", "issp"))
        sys = LtiSystem(s["A"], s["B"], s["Ts"])
        noise = NoiseModel(np.array(n["sigma_w"]), n["mode"])
        X = Polytope.box(c["state_box"]["lower"], c["state_box"]["upper"])
        U = Polytope.box(c["input_box"]["lower"], c["input_box"]["upper"])
        cost = CostSpec(np.array(m["Q"]), np.array(m["R"]))
        sim = SimConfig(sm["mode"], sm["n_runs"], sm["steps"], sm["master_seed"], np.array(sm["initial_states"]))
    except ValueError as exc:
        raise ConfigError(f"config error: {exc}") from None
    P = np.array(iss["P"]) if "P" in iss else None
    Q_lyap = np.array(iss["Q_lyap"]) if "Q_lyap" in iss else None
    return Experiment(doc, sys, noise, X, U, cost, m["N"], m["delta"], m["terminal_facets"], sim, P, Q_lyap)
