"""Command-line entry point: ``quenched <subcommand> --scenario FILE``.

Exit codes: 0 on success, 2 when the scenario declares an expectation that
the run does not meet, 1 on any error.
"""

from __future__ import annotations

import argparse
import logging
import math
import sys
from pathlib import Path

import numpy as np

from ..budget import budget_value, frontier_row, gdp_check, write_frontier_csv
from ..calculus import (
    chain_rule_residual,
    d2_action_quadrature,
    fd_d2_action,
    fd_dmu_all,
    threshold_barrier,
)
from ..dynamics import check_h1, sample_path, simulate_ensemble, write_trajectories_csv
from ..errors import ConfigError, QuenchedError
from ..measures import EmpiricalMeasure, wasserstein2
from ..seeding import SAMPLING_STREAM, ordered_map, rng_for
from ..target import gdpp_check, reach_estimate, verify_membership
from . import registry
from .reports import config_hash, dumps, manifest, write_report
from .scenario import apply_seed_override, diagnose, load_scenario, read_json, with_defaults

logger = logging.getLogger("quenched")

SUBCOMMANDS = ("simulate", "w2", "calculus", "reach", "verify", "gdpp", "budget", "check-h1", "validate")


class Run:
    """One subcommand invocation: effective config, built objects and output directory."""

    def __init__(self, config: dict, scenario_path: Path, out: Path, workers: int):
        self.config = config
        self.scenario_path = scenario_path
        self.out = out
        self.workers = workers
        self._built = None

    @property
    def built(self) -> registry.Built:
        if self._built is None:
            self._built = registry.build(self.config)
        return self._built

    @property
    def seeds(self) -> dict:
        return self.config["seeds"]

    @property
    def tol(self) -> dict:
        return self.config["tolerances"]

    def section(self, name: str) -> dict:
        return self.config.get(name, {})

    def require_target(self, subcommand: str):
        if self.built.target is None:
            raise ConfigError(f"{subcommand} needs a target", field="target")
        return self.built.target


# --------------------------------------------------------------------------- subcommands


def _simulate(run: Run):
    b = run.built
    value = run.section("simulate").get("control", np.clip(0.0, *b.model.control_box.T).tolist())
    control = b.control(value, "simulate.control")
    paths = [sample_path(b.grid, run.seeds["path_seed"], b.model.noise_dim, m) for m in range(run.config["paths"])]
    trajs = ordered_map(lambda p: simulate_ensemble(b.model, control, b.t, b.initial, p), paths, run.workers)
    write_trajectories_csv(run.out / "trajectories.csv", trajs)
    result = {
        "terminal_means": [tr.terminal.mean().tolist() for tr in trajs],
        "clamp_counts": [tr.clamp_count for tr in trajs],
        "path_refs": [tr.path_ref for tr in trajs],
        "trajectories": "trajectories.csv",
    }
    return result, ["trajectories.csv"], None


def _w2(run: Run):
    spec = run.config["w2"]
    base = run.scenario_path.parent
    first = EmpiricalMeasure.from_dict(read_json(base / spec["first"]))
    second = EmpiricalMeasure.from_dict(read_json(base / spec["second"]))
    approx = spec.get("approximate", False)
    dist = wasserstein2(first, second, approximate=approx, seed=0)
    result = {"distance": dist, "first": spec["first"], "second": spec["second"], "approximate": approx}
    expected = run.config["expect"].get("w2")
    met = None if expected is None else abs(dist - expected) <= 1e-12
    return result, [], met


def _calculus(run: Run):
    b = run.built
    spec = run.section("calculus")
    d = b.model.dim
    names = spec.get("functions", ["linear-mean", "mean-squared", "second-moment"])
    h, h2 = run.tol["h"], run.tol["h2"]
    rng = rng_for(run.seeds["control_seed"], SAMPLING_STREAM)
    direction = rng.standard_normal((b.initial.n, d))
    fd_rows = {}
    for name in names:
        w = registry.function_named(name, d)
        analytic = w.d_mu(b.t, b.initial, b.initial.points)
        numeric = fd_dmu_all(w, b.t, b.initial, h)
        scale = max(float(np.abs(analytic).max()), 1e-300)
        quad = d2_action_quadrature(w, b.t, b.initial, direction)
        fd2 = fd_d2_action(w, b.t, b.initial, direction, h2)
        fd_rows[name] = {
            "dmu_relative_error": float(np.abs(numeric - analytic).max()) / scale,
            "d2_action_fd": fd2,
            "d2_action_quadrature": quad,
            "d2_action_abs_error": abs(fd2 - quad),
        }

    res_name = spec.get("residual_function", "mean-squared")
    w = registry.function_named(res_name, d)
    qv = spec.get("quadratic_variation", "realized")
    refinements = sorted(spec.get("refinements", [run.config["grid"]["K"]]))
    finest = refinements[-1]
    if any(finest % k for k in refinements):
        raise ConfigError("every refinement must divide the finest one", field="calculus.refinements")
    g = run.config["grid"]
    fine_grid = np.linspace(g["t"], g["T"], finest + 1)
    value = spec.get("control", np.clip(0.0, *b.model.control_box.T).tolist())
    control = b.control(value, "calculus.control")

    def one(m):
        fine = sample_path(fine_grid, run.seeds["path_seed"], b.model.noise_dim, m)
        out = []
        for k in refinements:
            traj = simulate_ensemble(b.model, control, b.t, b.initial, fine.coarsen(finest // k))
            out.append(chain_rule_residual(w, traj, b.model, quadratic_variation=qv).terminal)
        return out

    per_path = np.array(ordered_map(one, range(run.config["paths"]), run.workers))
    mean_res = [math.fsum(col) / len(col) for col in per_path.T]
    ratios = [mean_res[i] / mean_res[i + 1] if mean_res[i + 1] > 0 else None for i in range(len(mean_res) - 1)]
    result = {
        "fd": fd_rows,
        "fd_steps": {"h": h, "h2": h2},
        "residual": {
            "function": res_name,
            "quadratic_variation": qv,
            "dt": [(g["T"] - g["t"]) / k for k in refinements],
            "N": b.initial.n,
            "mean_terminal_residual": mean_res,
            "convergence_ratios": ratios,
        },
    }
    return result, [], None


def _sweep(run: Run, key: str, fn):
    means = run.section(key).get("sweep_means", [])
    return [{"mean": m, **fn(run.built.with_mean(m))} for m in means]


def _reach(run: Run):
    b = run.built
    target = run.require_target("reach")
    opts = dict(n_paths=run.config["paths"], delta=run.tol["delta"], seed=run.seeds["path_seed"], workers=run.workers)

    def one(mu):
        return reach_estimate(b.model, b.controls, b.t, mu, target, b.grid, **opts).to_dict()

    result = one(b.initial)
    result["sweep"] = _sweep(run, "reach", lambda mu: {"verdict": one(mu)["verdict"]})
    expected = run.config["expect"].get("reach")
    return result, [], None if expected is None else result["verdict"] == expected


def _barrier(run: Run, value):
    b = run.built
    spec = run.config.get("target", {})
    if b.embedded or spec.get("kind") != "half-space-in-mean":
        raise ConfigError("verify uses the threshold barrier and needs a half-space-in-mean target", field="target")
    normal = np.asarray(spec["params"].get("normal", [1.0] + [0.0] * (b.model.dim - 1)), dtype=float)
    # rate at which <c, mean> moves under the constant verification control
    speed = float(normal @ b.model.drift(b.t, b.initial.points[:1], b.initial, np.asarray([value]))[0])
    eps = run.section("verify").get("eps", 0.05)
    return threshold_barrier(normal, float(spec["params"]["kappa"]), float(b.grid[-1]), eps, speed), eps


def _verify(run: Run):
    b = run.built
    target = run.require_target("verify")
    value = run.section("verify").get("control", b.model.control_box[:, 1].tolist())
    control = b.control(value, "verify.control")
    w, eps = _barrier(run, value)
    opts = dict(n_paths=run.config["paths"], seed=run.seeds["path_seed"], tol=run.tol.get("tol"), workers=run.workers)

    def one(mu):
        return verify_membership(w, control, b.t, mu, b.model, target, b.grid, **opts).to_dict()

    result = one(b.initial)
    result["barrier"] = {"eps": eps, "control": list(value)}
    result["sweep"] = _sweep(run, "verify", lambda mu: {k: v for k, v in one(mu).items() if k != "per_path"})
    expected = run.config["expect"].get("verify")
    status = "certified" if result["certified"] else "failed"
    return result, [], None if expected is None else status == expected


def _gdpp(run: Run):
    b = run.built
    target = run.require_target("gdpp")
    spec = run.section("gdpp")
    value = spec.get("control", b.model.control_box[:, 1].tolist())
    control = b.control(value, "gdpp.control")
    theta = spec.get("theta", float(b.grid[len(b.grid) // 2]))
    opts = dict(
        n_paths=run.config["paths"], n_restarts=spec.get("restarts", 4), delta=run.tol["delta"],
        seed=run.seeds["path_seed"], workers=run.workers,
    )

    def one(mu):
        return gdpp_check(b.model, control, b.t, mu, target, b.grid, theta, **opts).to_dict()

    result = one(b.initial)
    result["sweep"] = _sweep(
        run, "gdpp", lambda mu: {k: v for k, v in one(mu).items() if k not in ("original_success", "restart_success")}
    )
    expected = run.config["expect"].get("gdpp")
    return result, [], None if expected is None else result["consistent"] == expected


def _budget(run: Run):
    b = run.built
    problem = registry.budget_problem(run.config, b)
    spec = run.section("budget")
    opts = dict(
        n_paths=run.config["paths"], bracket=spec.get("bracket"), tol_y=run.tol["tol_y"],
        delta=run.tol["delta"], seed=run.seeds["path_seed"], workers=run.workers,
    )
    base = budget_value(problem, b.t, b.initial, b.controls, **opts)
    result = base.to_dict()
    rows = [frontier_row(run.config["name"], b.t, b.initial, base)]
    result["sweep"] = []
    for m in spec.get("sweep_means", []):
        mu = b.with_mean(m)
        res = budget_value(problem, b.t, mu, b.controls, **opts)
        rows.append(frontier_row(run.config["name"], b.t, mu, res))
        result["sweep"].append({"mean": m, "value": res.value, "verdict": res.to_dict()["verdict"]})
    write_frontier_csv(run.out / "frontier.csv", rows)
    result["frontier"] = "frontier.csv"
    if "gdp" in spec:
        g = spec["gdp"]
        control = b.control(g.get("control", b.model.control_box[:, 1].tolist()), "budget.gdp.control")
        theta = g.get("theta", float(b.grid[len(b.grid) // 2]))
        report = gdp_check(
            problem, b.t, b.initial, g["y"], control, theta, b.controls,
            **{k: opts[k] for k in ("n_paths", "delta", "tol_y", "seed", "workers")},
        )
        result["gdp"] = report.to_dict()
    expected = run.config["expect"].get("budget")
    if expected is None:
        met = None
    elif expected == "infeasible":
        met = not base.feasible
    else:
        met = base.feasible and abs(base.value - expected["value"]) <= expected["tolerance"]
    return result, ["frontier.csv"], met


def _check_h1(run: Run):
    spec = run.section("check_h1")
    g = run.config["grid"]
    report = check_h1(
        run.built.model, spec.get("budget", 500), run.seeds["control_seed"],
        n_atoms=spec.get("n_atoms", 6), scale=spec.get("scale", 2.0), horizon=g["T"],
    ).to_dict()
    expected = run.config["expect"].get("check_h1")
    ok = report["lipschitz_ok"] and report["bound_ok"]
    return report, [], None if expected is None else ok == expected


HANDLERS = {
    "simulate": _simulate,
    "w2": _w2,
    "calculus": _calculus,
    "reach": _reach,
    "verify": _verify,
    "gdpp": _gdpp,
    "budget": _budget,
    "check-h1": _check_h1,
}


# --------------------------------------------------------------------------- entry point


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="quenched", description=__doc__.splitlines()[0])
    p.add_argument("subcommand", choices=SUBCOMMANDS)
    p.add_argument("--scenario", required=True, type=Path, help="scenario JSON file")
    p.add_argument("--out", type=Path, default=Path("quenched-out"), help="output directory")
    p.add_argument("--workers", type=int, default=1, help="thread pool size for path-level work")
    p.add_argument("--seed-override", type=int, default=None, help="replace every seed in the scenario")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def validate(path) -> tuple[list[str], dict | None]:
    """Diagnostics for a scenario file plus its effective configuration when valid."""
    try:
        config = read_json(path)
    except (ConfigError, OSError) as exc:
        return [str(exc)], None
    problems = diagnose(config)
    return problems, (None if problems else with_defaults(config))


def run(subcommand: str, scenario, out, workers: int = 1, seed_override: int | None = None) -> int:
    scenario = Path(scenario)
    if subcommand == "validate":
        problems, effective = validate(scenario)
        sys.stdout.write(dumps({"diagnostics": problems, "effective": effective}))
        return 0 if not problems else 1
    config = apply_seed_override(load_scenario(scenario), seed_override)
    if subcommand == "w2" and "w2" not in config:
        raise ConfigError("missing required field", field="w2")
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    handler = HANDLERS[subcommand]
    result, extra, met = handler(Run(config, scenario, out, max(1, workers)))
    report_name = f"{subcommand}.json"
    payload = {
        "scenario": config["name"],
        "scenario_hash": config_hash(config),
        "subcommand": subcommand,
        "config": config,
        "expectation_met": met,
        "result": result,
    }
    write_report(out, report_name, payload)
    write_report(out, "manifest.json", manifest(config, subcommand, [report_name, *extra]))
    sys.stdout.write(f"{subcommand}: wrote {out / report_name}\n")
    if met is False:
        sys.stdout.write(f"{subcommand}: declared expectation not met\n")
        return 2
    return 0


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return run(args.subcommand, args.scenario, args.out, args.workers, args.seed_override)
    except (QuenchedError, OSError) as exc:
        sys.stderr.write(f"error: {exc}\n")
        return 1


if __name__ == "__main__":
    sys.exit(main())
