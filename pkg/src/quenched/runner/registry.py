"""Closed registry turning scenario sections into library objects."""

from __future__ import annotations

import inspect
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .. import models
from ..budget import BudgetProblem
from ..calculus import MeasureFunction, linear_mean, mean_squared, second_moment
from ..dynamics import (
    CoefficientModel,
    ControlPolicy,
    constant_control,
    default_control_family,
    sample_initial,
    uniform_grid,
)
from ..errors import ConfigError, InvalidInputError
from ..measures import EmpiricalMeasure
from ..target import (
    TargetSet,
    embed_mean_constraint,
    extend_initial,
    half_space_in_mean,
    moment_box,
    w2_ball,
)


def _embedded(base: dict, loss: dict, alpha_box) -> tuple[CoefficientModel, TargetSet]:
    if base.get("name") == "mean-constraint-embedded":
        raise ConfigError("base model cannot itself be embedded", field="model.params.base.name")
    base_model = make_model(base.get("name"), base.get("params", {}), field="model.params.base")
    direction = np.asarray(loss.get("direction", [1.0] * base_model.dim), dtype=float)
    offset = float(loss.get("offset", 0.0))
    if direction.size != base_model.dim:
        raise ConfigError(f"needs {base_model.dim} entries", field="model.params.loss.direction")

    def ell(x):
        return x @ direction - offset

    return embed_mean_constraint(base_model, ell, alpha_box)


MODEL_FACTORIES: dict[str, Callable] = {
    "constant": models.constant,
    "linear-drift": models.linear_drift,
    "mean-field-ou": models.mean_field_ou,
    "threshold-control": models.threshold_control,
    "mean-constraint-embedded": _embedded,
    "crop-example": models.crop_example,
}

FUNCTIONS = {
    "linear-mean": lambda d: linear_mean(np.ones(d)),
    "mean-squared": lambda d: mean_squared(np.ones(d)),
    "second-moment": second_moment,
}


def make_model(name: str, params: dict, field: str = "model.params"):
    if name not in MODEL_FACTORIES:
        raise ConfigError(f"unknown model {name!r}; expected one of {', '.join(MODEL_FACTORIES)}", field="model.name")
    factory = MODEL_FACTORIES[name]
    accepted = list(inspect.signature(factory).parameters)
    unknown = sorted(set(params) - set(accepted))
    if unknown:
        raise ConfigError(f"unknown parameter(s) {unknown}; {name} accepts {accepted}", field=field)
    try:
        return factory(**params)
    except (TypeError, ValueError, KeyError) as exc:
        raise ConfigError(f"cannot build {name}: {exc}", field=field) from exc


def make_target(spec: dict, dim: int) -> TargetSet:
    kind, p = spec["kind"], spec.get("params", {})
    try:
        if kind == "half-space-in-mean":
            normal = p.get("normal", [1.0] + [0.0] * (dim - 1))
            if len(normal) != dim:
                raise ConfigError(f"needs {dim} entries", field="target.params.normal")
            return half_space_in_mean(normal, float(p["kappa"]))
        if kind == "moment-box":
            return moment_box(p["low"], p["high"])
        if kind == "w2-ball":
            return w2_ball(EmpiricalMeasure(np.asarray(p["reference"], dtype=float)), float(p["radius"]))
    except KeyError as exc:
        raise ConfigError("missing required field", field=f"target.params.{exc.args[0]}") from exc
    except InvalidInputError as exc:
        raise ConfigError(str(exc), field="target.params") from exc
    raise ConfigError("'embedded' targets come from the mean-constraint-embedded model", field="target.kind")


@dataclass
class Built:
    """Library objects for one scenario."""

    model: CoefficientModel
    grid: np.ndarray
    t: float
    initial: EmpiricalMeasure
    target: TargetSet | None
    controls: list[ControlPolicy]
    embedded: bool

    def with_mean(self, mean) -> EmpiricalMeasure:
        """Initial measure translated to ``mean`` (X-coordinates only for embedded models)."""
        mean = np.asarray(mean, dtype=float)
        shift = np.zeros(self.initial.d)
        shift[: mean.size] = mean - self.initial.mean()[: mean.size]
        return self.initial.shifted(shift)

    def control(self, value, field: str) -> ControlPolicy:
        value = np.asarray(value, dtype=float)
        if value.size != self.model.control_dim:
            raise ConfigError(f"needs {self.model.control_dim} entries", field=field)
        return constant_control(value, self.model.control_box)


def build(config: dict) -> Built:
    spec = config["model"]
    embedded = spec["name"] == "mean-constraint-embedded"
    target = None
    if embedded:
        p = spec.get("params", {})
        missing = [k for k in ("base", "alpha_box") if k not in p]
        if missing:
            raise ConfigError("missing required field", field=f"model.params.{missing[0]}")
        try:
            model, target = _embedded(p["base"], p.get("loss", {}), p["alpha_box"])
        except InvalidInputError as exc:
            raise ConfigError(str(exc), field="model.params") from exc
    else:
        model = make_model(spec["name"], spec.get("params", {}))

    g = config["grid"]
    grid = uniform_grid(g["t"], g["T"], g["K"])
    seeds = config["seeds"]

    init = config["initial"]
    try:
        mu = sample_initial(init["sampler"], config["particles"], seeds["draw_seed"], **init.get("params", {}))
    except (KeyError, TypeError, InvalidInputError) as exc:
        raise ConfigError(f"cannot sample: {exc}", field="initial.params") from exc
    if "set_mean" in init:
        if len(init["set_mean"]) != mu.d:
            raise ConfigError(f"needs {mu.d} entries", field="initial.set_mean")
        mu = mu.with_mean(init["set_mean"])
    x_dim = model.dim - 1 if embedded else model.dim
    if mu.d != x_dim:
        raise ConfigError(f"sampler gives dimension {mu.d}, model expects {x_dim}", field="initial.params")
    if embedded:
        mu = extend_initial(mu, 0.0)

    if "target" in config:
        if embedded and config["target"]["kind"] != "embedded":
            raise ConfigError("mean-constraint-embedded models need kind 'embedded'", field="target.kind")
        if not embedded:
            target = make_target(config["target"], model.dim)

    cspec = config["controls"]
    if "values" in cspec:
        bad = [i for i, v in enumerate(cspec["values"]) if len(v) != model.control_dim]
        if bad:
            raise ConfigError(f"needs {model.control_dim} entries", field=f"controls.values.{bad[0]}")
        controls = [constant_control(v, model.control_box) for v in cspec["values"]]
    else:
        levels = cspec["levels"]
        if isinstance(levels, list) and len(levels) != model.control_dim:
            raise ConfigError(f"needs {model.control_dim} entries", field="controls.levels")
        controls = default_control_family(model.control_box, levels, cspec.get("switch_times", []))
    return Built(model, grid, float(g["t"]), mu, target, controls, embedded)


def function_named(name: str, dim: int) -> MeasureFunction:
    return FUNCTIONS[name](dim)


def budget_problem(config: dict, built: Built) -> BudgetProblem:
    if built.target is None:
        raise ConfigError("budget needs a target on the X-law", field="target")
    if built.embedded:
        raise ConfigError("budget runs on the unextended model", field="model.name")
    q = built.model.control_dim
    weights = np.asarray(config.get("budget", {}).get("cost_weights", [1.0] * q), dtype=float)
    if weights.size != q:
        raise ConfigError(f"needs {q} entries", field="budget.cost_weights")
    return BudgetProblem(
        built.model, lambda u: np.abs(u) @ weights, built.target, built.grid, name=config["name"]
    )
