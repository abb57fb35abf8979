"""Scenario files: JSON schema, defaults and diagnostics."""

from __future__ import annotations

import copy
import json
from pathlib import Path

from jsonschema import Draft202012Validator

from ..errors import ConfigError, InvalidInputError

MODEL_NAMES = (
    "constant",
    "linear-drift",
    "mean-field-ou",
    "threshold-control",
    "mean-constraint-embedded",
    "crop-example",
)
TARGET_KINDS = ("half-space-in-mean", "moment-box", "w2-ball", "embedded")
SAMPLERS = ("gaussian", "uniform-box", "discrete-points")
FUNCTION_KINDS = ("linear-mean", "mean-squared", "second-moment")

_positive = {"type": "number", "exclusiveMinimum": 0}
_count = {"type": "integer", "minimum": 1}
_vector = {"type": "array", "items": {"type": "number"}, "minItems": 1}
_seed = {"type": "integer", "minimum": 0}

_model = {
    "type": "object",
    "required": ["name"],
    "properties": {"name": {"enum": list(MODEL_NAMES)}, "params": {"type": "object"}},
    "additionalProperties": False,
}

SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": ["name", "model", "grid", "initial"],
    "properties": {
        "name": {"type": "string", "minLength": 1},
        "description": {"type": "string"},
        "model": _model,
        "grid": {
            "type": "object",
            "required": ["t", "T", "K"],
            "properties": {"t": {"type": "number"}, "T": {"type": "number"}, "K": _count},
            "additionalProperties": False,
        },
        "particles": _count,
        "paths": _count,
        "seeds": {
            "type": "object",
            "properties": {"path_seed": _seed, "draw_seed": _seed, "control_seed": _seed},
            "additionalProperties": False,
        },
        "initial": {
            "type": "object",
            "required": ["sampler"],
            "properties": {
                "sampler": {"enum": list(SAMPLERS)},
                "params": {"type": "object"},
                "set_mean": _vector,
            },
            "additionalProperties": False,
        },
        "target": {
            "type": "object",
            "required": ["kind"],
            "properties": {"kind": {"enum": list(TARGET_KINDS)}, "params": {"type": "object"}},
            "additionalProperties": False,
        },
        "controls": {
            "type": "object",
            "properties": {
                "levels": {"oneOf": [_count, {"type": "array", "items": _count, "minItems": 1}]},
                "switch_times": {"type": "array", "items": {"type": "number"}},
                "values": {"type": "array", "items": _vector, "minItems": 1},
            },
            "additionalProperties": False,
        },
        "tolerances": {
            "type": "object",
            "properties": {"tol": _positive, "delta": _positive, "tol_y": _positive, "h": _positive, "h2": _positive},
            "additionalProperties": False,
        },
        "simulate": {
            "type": "object",
            "properties": {"control": _vector},
            "additionalProperties": False,
        },
        "calculus": {
            "type": "object",
            "properties": {
                "functions": {"type": "array", "items": {"enum": list(FUNCTION_KINDS)}, "minItems": 1},
                "residual_function": {"enum": list(FUNCTION_KINDS)},
                "refinements": {"type": "array", "items": _count, "minItems": 1},
                "quadratic_variation": {"enum": ["realized", "dt"]},
                "control": _vector,
            },
            "additionalProperties": False,
        },
        "reach": {
            "type": "object",
            "properties": {"sweep_means": {"type": "array", "items": _vector}},
            "additionalProperties": False,
        },
        "verify": {
            "type": "object",
            "properties": {
                "control": _vector,
                "eps": _positive,
                "sweep_means": {"type": "array", "items": _vector},
            },
            "additionalProperties": False,
        },
        "gdpp": {
            "type": "object",
            "properties": {
                "control": _vector,
                "theta": {"type": "number"},
                "restarts": _count,
                "sweep_means": {"type": "array", "items": _vector},
            },
            "additionalProperties": False,
        },
        "budget": {
            "type": "object",
            "properties": {
                "cost_weights": {"type": "array", "items": {"type": "number", "minimum": 0}, "minItems": 1},
                "bracket": {"type": "array", "items": {"type": "number"}, "minItems": 2, "maxItems": 2},
                "sweep_means": {"type": "array", "items": _vector},
                "gdp": {
                    "type": "object",
                    "required": ["y"],
                    "properties": {"y": {"type": "number"}, "theta": {"type": "number"}, "control": _vector},
                    "additionalProperties": False,
                },
            },
            "additionalProperties": False,
        },
        "check_h1": {
            "type": "object",
            "properties": {"budget": _count, "n_atoms": _count, "scale": _positive},
            "additionalProperties": False,
        },
        "expect": {
            "type": "object",
            "properties": {
                "verify": {"enum": ["certified", "failed"]},
                "reach": {"enum": ["member", "non-member", "inconclusive"]},
                "gdpp": {"type": "boolean"},
                "budget": {
                    "oneOf": [
                        {"const": "infeasible"},
                        {
                            "type": "object",
                            "required": ["value", "tolerance"],
                            "properties": {"value": {"type": "number"}, "tolerance": _positive},
                            "additionalProperties": False,
                        },
                    ]
                },
                "check_h1": {"type": "boolean"},
                "w2": {"type": "number", "minimum": 0},
            },
            "additionalProperties": False,
        },
        "w2": {"$ref": "#/$defs/w2"},
    },
    "additionalProperties": False,
    "$defs": {
        "w2": {
            "type": "object",
            "required": ["first", "second"],
            "properties": {"first": {"type": "string"}, "second": {"type": "string"}, "approximate": {"type": "boolean"}},
            "additionalProperties": False,
        }
    },
}

# a scenario holding only a w2 section compares two stored measures
W2_SCHEMA = {
    "$schema": SCHEMA["$schema"],
    "type": "object",
    "required": ["name", "w2"],
    "properties": {
        "name": SCHEMA["properties"]["name"],
        "description": {"type": "string"},
        "w2": SCHEMA["$defs"]["w2"],
        "expect": SCHEMA["properties"]["expect"],
    },
    "additionalProperties": False,
}

DEFAULTS = {
    "description": "",
    "particles": 64,
    "paths": 8,
    "seeds": {"path_seed": 0, "draw_seed": 0, "control_seed": 0},
    "controls": {"levels": 5, "switch_times": []},
    "tolerances": {"delta": 1e-3, "tol_y": 1e-3, "h": 1e-5, "h2": 1e-4},
    "expect": {},
}


def _merge(defaults: dict, given: dict) -> dict:
    out = copy.deepcopy(defaults)
    for key, value in given.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def _field_path(error) -> str:
    parts = [str(p) for p in error.absolute_path]
    if error.validator == "required":
        missing = error.message.split("'")[1]
        parts.append(missing)
    return ".".join(parts) or "<root>"


def _describe(error) -> str:
    if error.validator == "required":
        return "missing required field"
    if error.validator in ("minimum", "exclusiveMinimum"):
        return f"must be positive, got {error.instance!r}" if error.validator_value in (0, 1) else error.message
    if error.validator == "enum":
        return f"unknown name {error.instance!r}; expected one of {', '.join(map(str, error.validator_value))}"
    return error.message


def is_w2_only(config: dict) -> bool:
    return isinstance(config, dict) and "w2" in config and "model" not in config


def diagnose(config) -> list[str]:
    """Schema and invariant diagnostics as ``field.path: message`` strings (empty when valid)."""
    if not isinstance(config, dict):
        return ["<root>: scenario must be a JSON object"]
    schema = W2_SCHEMA if is_w2_only(config) else SCHEMA
    validator = Draft202012Validator(schema)
    errors = sorted(validator.iter_errors(config), key=lambda e: (list(map(str, e.absolute_path)), e.message))
    out = [f"{_field_path(e)}: {_describe(e)}" for e in errors]
    if out or is_w2_only(config):
        return out
    grid = config["grid"]
    if not grid["T"] > grid["t"]:
        return [f"grid.T: must exceed grid.t ({grid['t']}), got {grid['T']}"]
    # model/target/initial construction errors surface as diagnostics too
    from .registry import build

    try:
        build(with_defaults(config))
    except InvalidInputError as exc:
        out.append(str(exc))
    return out


def with_defaults(config: dict) -> dict:
    if is_w2_only(config):
        return _merge({"description": "", "expect": {}}, config)
    return _merge(DEFAULTS, config)


def load_scenario(path) -> dict:
    """Read a scenario file; raises :class:`ConfigError` listing every diagnostic."""
    config = read_json(path)
    problems = diagnose(config)
    if problems:
        raise ConfigError("invalid scenario:\n  " + "\n  ".join(problems))
    return with_defaults(config)


def read_json(path) -> dict:
    text = Path(path).read_text()
    if not text.strip():
        return {}
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"not valid JSON: {exc}", field="<root>") from exc


def apply_seed_override(config: dict, seed: int | None) -> dict:
    if seed is None or is_w2_only(config):
        return config
    config = copy.deepcopy(config)
    config["seeds"] = {key: int(seed) for key in ("path_seed", "draw_seed", "control_seed")}
    return config
