"""Minimal initial budget for reaching a target under an accumulated control cost.

The state carries an extra coordinate ``Y = y - C`` where ``C`` integrates a
non-negative cost rate of the control. Because the constraint only involves
the conditional mean of ``Y``, that mean is tracked as a scalar per path:

    Y_k = y - sum_{j<k} (1/N) sum_l cost_rate(u_j^l) dt_j

The value ``v(t, mu_X)`` is the smallest ``y`` for which some candidate
control puts the terminal X-law in the dilated target and keeps
``Y_T >= -delta`` on every sampled path.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .dynamics import (
    CoefficientModel,
    ControlPolicy,
    Trajectory,
    _check_grid,
    grid_index,
    sample_path,
    simulate_ensemble,
)
from .errors import BracketError, InvalidInputError
from .measures import EmpiricalMeasure
from .models import crop_example, threshold_control
from .seeding import PATH_STREAM, RESTART_STREAM, SAMPLING_STREAM, ordered_map, rng_for
from .target import TargetSet, half_space_in_mean


@dataclass(frozen=True)
class BudgetProblem:
    """X-dynamics, a non-negative cost rate ``u -> R_+`` and a target on the X-law.

    ``cost_rate`` maps an ``(N, q)`` array of controls to ``N`` costs.
    """

    x_model: CoefficientModel
    cost_rate: Callable[[np.ndarray], np.ndarray]
    target_x: TargetSet
    grid: np.ndarray
    name: str = "budget"

    def __post_init__(self):
        object.__setattr__(self, "grid", _check_grid(self.grid))
        probe = self._probe_controls()
        costs = self.costs(probe)
        if (costs < 0).any():
            raise InvalidInputError("cost_rate must be non-negative on the control box")
        object.__setattr__(self, "_max_cost", float(costs.max()))

    def _probe_controls(self) -> np.ndarray:
        box = self.x_model.control_box
        corners = np.stack(np.meshgrid(*box, indexing="ij"), axis=-1).reshape(-1, box.shape[0])
        rng = rng_for(0, SAMPLING_STREAM)
        inner = box[:, 0] + (box[:, 1] - box[:, 0]) * rng.random((64, box.shape[0]))
        return np.vstack([corners, inner])

    def costs(self, u: np.ndarray) -> np.ndarray:
        u = np.asarray(u, dtype=float).reshape(-1, self.x_model.control_dim)
        return np.asarray(self.cost_rate(u), dtype=float).reshape(u.shape[0])

    @property
    def horizon(self) -> float:
        return float(self.grid[-1])

    @property
    def max_cost(self) -> float:
        return self._max_cost

    def default_bracket(self, t: float) -> tuple[float, float]:
        scale = self.max_cost * max(1.0, self.x_model.bound_M if math.isfinite(self.x_model.bound_M) else 1.0)
        return -1.0, (self.horizon - t) * scale + 1.0


def cost_integral(problem: BudgetProblem, traj: Trajectory) -> np.ndarray:
    """Accumulated particle-averaged cost at every time of ``traj`` (starts at 0)."""
    dt = np.diff(traj.times)
    rates = np.array([math.fsum(problem.costs(u)) / u.shape[0] for u in traj.controls])
    out = np.zeros(len(traj.times))
    np.cumsum(rates * dt, out=out[1:])
    return out


def simulate_budget(
    problem: BudgetProblem,
    control: ControlPolicy,
    t: float,
    initial_x: EmpiricalMeasure,
    y: float,
    path,
    *,
    stop: float | None = None,
) -> tuple[Trajectory, np.ndarray]:
    """Simulate X and return it with the budget ``Y`` on the same times."""
    if not math.isfinite(y):
        raise InvalidInputError("initial budget must be finite")
    traj = simulate_ensemble(problem.x_model, control, t, initial_x, path, stop=stop)
    return traj, float(y) - cost_integral(problem, traj)


# --------------------------------------------------------------------------- value function


@dataclass
class BudgetResult:
    value: float | None  # None when infeasible
    feasible: bool
    bracket: tuple
    iterations: int
    best_control: str | None
    delta: float
    tol_y: float
    n_paths: int
    seed: int
    candidates: dict = field(default_factory=dict)  # label -> {"reaches": bool, "max_cost": float}

    def to_dict(self) -> dict:
        return {
            "value": self.value,
            "verdict": "feasible" if self.feasible else "infeasible",
            "bracket": list(self.bracket),
            "iterations": self.iterations,
            "best_control": self.best_control,
            "delta": self.delta,
            "tol_y": self.tol_y,
            "M": self.n_paths,
            "seed": self.seed,
            "candidates": self.candidates,
        }


def _label(ctrl: ControlPolicy, i: int, seen: set) -> str:
    label = ctrl.label or f"control{i}"
    if label in seen:
        label = f"{label}#{i}"
    seen.add(label)
    return label


def budget_value(
    problem: BudgetProblem,
    t: float,
    initial_x: EmpiricalMeasure,
    controls: Sequence[ControlPolicy],
    *,
    n_paths: int = 8,
    bracket: tuple[float, float] | None = None,
    tol_y: float = 1e-3,
    delta: float = 1e-3,
    seed: int = 0,
    workers: int = 1,
    stream: int = PATH_STREAM,
    index_prefix: tuple = (),
) -> BudgetResult:
    """Bisection for the minimal feasible initial budget.

    The X-trajectories and costs do not depend on ``y``, so each candidate
    is simulated once on the common paths and every probe of the bisection
    reuses those runs. Feasibility is then monotone in ``y`` by construction.
    Raises :class:`BracketError` if the lower end is already feasible.
    """
    controls = list(controls)
    if not controls:
        raise InvalidInputError("control family is empty")
    lo, hi = problem.default_bracket(t) if bracket is None else map(float, bracket)
    if not lo < hi:
        raise InvalidInputError(f"bracket needs y_lo < y_hi, got [{lo}, {hi}]")
    goal = problem.target_x.dilate(delta)
    grid = problem.grid
    paths = [
        sample_path(grid, seed, problem.x_model.noise_dim, (*index_prefix, m), stream=stream) for m in range(n_paths)
    ]

    def run(job):
        ci, m = job
        traj = simulate_ensemble(problem.x_model, controls[ci], t, initial_x, paths[m])
        return goal.contains(traj.terminal), float(cost_integral(problem, traj)[-1])

    jobs = [(ci, m) for ci in range(len(controls)) for m in range(n_paths)]
    results = ordered_map(run, jobs, workers)
    seen: set = set()
    candidates = {}
    need = []  # minimal y per reaching candidate: Y_T >= -delta on every path
    for ci, ctrl in enumerate(controls):
        res = results[ci * n_paths : (ci + 1) * n_paths]
        reaches = all(r[0] for r in res)
        worst = max(r[1] for r in res)
        label = _label(ctrl, ci, seen)
        candidates[label] = {"reaches": reaches, "max_cost": worst}
        if reaches:
            need.append((worst - delta, label))

    def feasible(y):
        return any(y >= req for req, _ in need)

    if feasible(lo):
        raise BracketError(f"y_lo={lo} is already feasible; lower the bracket")
    if not feasible(hi):
        return BudgetResult(None, False, (lo, hi), 0, None, float(delta), float(tol_y), n_paths, seed, candidates)
    it = 0
    while hi - lo > tol_y:
        mid = 0.5 * (lo + hi)
        if feasible(mid):
            hi = mid
        else:
            lo = mid
        it += 1
        assert feasible(hi) and not feasible(lo), "feasibility must be monotone in y"
    best = min((req, label) for req, label in need if req <= hi)[1]
    return BudgetResult(0.5 * (lo + hi), True, (lo, hi), it, best, float(delta), float(tol_y), n_paths, seed, candidates)


# --------------------------------------------------------------------------- dynamic programming


@dataclass
class GDPReport:
    theta: float
    y: float
    v_initial: float | None
    margins: list  # per path: Y_theta - v(theta, X-law at theta), None if infeasible
    nested_values: list
    gdp1_premise: bool
    gdp1_holds: bool
    gdp2_premise: bool
    gdp2_conclusion: bool
    delta: float
    tol_y: float

    @property
    def gdp2_confirmed(self) -> bool:
        return self.gdp2_premise and self.gdp2_conclusion

    @property
    def consistent(self) -> bool:
        return (not self.gdp1_premise or self.gdp1_holds) and (not self.gdp2_premise or self.gdp2_conclusion)

    def to_dict(self) -> dict:
        return {
            "theta": self.theta,
            "y": self.y,
            "v_initial": self.v_initial,
            "margins": self.margins,
            "nested_values": self.nested_values,
            "gdp1": {"premise": self.gdp1_premise, "holds": self.gdp1_holds},
            "gdp2": {
                "premise": self.gdp2_premise,
                "conclusion": self.gdp2_conclusion,
                "confirmed": self.gdp2_confirmed,
            },
            "consistent": self.consistent,
            "delta": self.delta,
            "tol_y": self.tol_y,
        }


def gdp_check(
    problem: BudgetProblem,
    t: float,
    initial_x: EmpiricalMeasure,
    y: float,
    control: ControlPolicy,
    theta: float,
    controls: Sequence[ControlPolicy],
    *,
    n_paths: int = 8,
    delta: float = 1e-3,
    tol_y: float = 1e-3,
    margin: float | None = None,
    seed: int = 0,
    workers: int = 1,
) -> GDPReport:
    """Check both halves of the budget dynamic programming principle at ``theta``.

    ``control`` is run from ``t`` to ``theta`` on each sampled path; the value
    at ``theta`` is recomputed on the realised X-law by a nested
    :func:`budget_value` over ``controls`` with fresh paths.

    * GDP1: if ``y > v(t) + margin`` then ``Y_theta >= v(theta) - delta`` on every path.
    * GDP2: if ``Y_theta > v(theta)`` on every path then ``y >= v(t) - delta``.

    Infeasible nested values are recorded as ``None`` (treated as ``+inf``).
    """
    grid = problem.grid
    k = grid_index(grid, theta)
    theta = float(grid[k])
    margin = delta + tol_y if margin is None else float(margin)
    opts = dict(n_paths=n_paths, delta=delta, tol_y=tol_y, seed=seed, workers=1)
    v0 = budget_value(problem, t, initial_x, controls, **{**opts, "workers": workers})

    def run(m):
        path = sample_path(grid, seed, problem.x_model.noise_dim, m)
        traj, Y = simulate_budget(problem, control, t, initial_x, y, path, stop=theta)
        try:
            nested = budget_value(
                problem, theta, traj.terminal, controls, stream=RESTART_STREAM, index_prefix=(m,), **opts
            ).value
        except BracketError:
            nested = None
        return float(Y[-1]), nested

    results = ordered_map(run, range(n_paths), workers)
    margins = [None if v is None else yt - v for yt, v in results]
    v_t = v0.value
    gdp1_premise = v_t is not None and y > v_t + margin
    gdp1_holds = all(mg is not None and mg >= -delta for mg in margins)
    gdp2_premise = all(mg is not None and mg > 0 for mg in margins)
    gdp2_conclusion = v_t is not None and y >= v_t - delta
    return GDPReport(
        theta, float(y), v_t, margins, [v for _, v in results],
        gdp1_premise, gdp1_holds, gdp2_premise, gdp2_conclusion, float(delta), float(tol_y),
    )


# --------------------------------------------------------------------------- frontier export


def frontier_row(scenario: str, t: float, mu_x: EmpiricalMeasure, result: BudgetResult) -> dict:
    pts = mu_x.points
    row = {"scenario": scenario, "t": t}
    for i in range(mu_x.d):
        row[f"mean_{i + 1}"] = float(mu_x.mean()[i])
        row[f"std_{i + 1}"] = float(np.sqrt(math.fsum((pts[:, i] - mu_x.mean()[i]) ** 2) / mu_x.n))
    row["v"] = result.value
    row["verdict"] = "feasible" if result.feasible else "infeasible"
    return row


def write_frontier_csv(path, rows: Sequence[dict]) -> None:
    """CSV of ``(scenario, t, mean_i, std_i, v, verdict)``; ``v`` is empty when infeasible."""
    rows = list(rows)
    if not rows:
        raise InvalidInputError("no frontier rows to write")
    fields = list(rows[0])
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(fields)
        for row in rows:
            writer.writerow(["" if row[f] is None else (repr(row[f]) if isinstance(row[f], float) else row[f])
                             for f in fields])


# --------------------------------------------------------------------------- built-in problems


def threshold_budget_problem(kappa: float, grid, *, u_max: float = 1.0, sigma: float = 0.0) -> BudgetProblem:
    """``dX = u dt + sigma dB`` with ``u`` in ``[0, u_max]``, cost ``u``, target ``mean >= kappa``."""
    model = threshold_control(dim=1, u_low=0.0, u_high=u_max, sigma=sigma)
    return BudgetProblem(model, lambda u: u[:, 0], half_space_in_mean([1.0], kappa), grid, name="threshold-budget")


def crop_budget_problem(quality_target: float, grid, **model_params) -> BudgetProblem:
    """Fertiliser spend needed to lift the average quality of a field to ``quality_target``.

    Cost is the applied fertiliser rate; the target is a half-space on the
    mean of the quality coordinate.
    """
    model = crop_example(**model_params)
    return BudgetProblem(model, lambda u: u[:, 0], half_space_in_mean([0.0, 1.0], quality_target), grid,
                         name="crop-budget")
