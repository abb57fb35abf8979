"""Stochastic target machinery on conditional laws.

The almost-sure requirement "terminal conditional law lies in G" is tested
on finitely many sampled common-noise paths against a dilated target
``G_delta``; see :func:`reach_estimate` for how the three-valued verdict is
formed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .calculus import MeasureFunction, generator_terms
from .dynamics import (
    CoefficientModel,
    ControlPolicy,
    _check_grid,
    grid_index,
    sample_path,
    simulate_ensemble,
)
from .errors import InvalidInputError
from .measures import EmpiricalMeasure, wasserstein2
from .seeding import RESTART_STREAM, ordered_map

# --------------------------------------------------------------------------- target sets


@dataclass(frozen=True)
class TargetSet:
    """A closed set of measures with an outward relaxation.

    ``dilate(delta)`` returns ``G_delta``, a superset of ``G`` with
    ``G_0 == G``.
    """

    membership: Callable[[EmpiricalMeasure], bool]
    dilation: Callable[[float], "TargetSet"]
    description: str
    delta: float = 0.0

    def contains(self, mu: EmpiricalMeasure) -> bool:
        return bool(self.membership(mu))

    __contains__ = contains

    def dilate(self, delta: float) -> "TargetSet":
        if delta < 0:
            raise InvalidInputError("dilation must be non-negative")
        return self if delta == 0 else self.dilation(delta)


def half_space_in_mean(normal, kappa: float) -> TargetSet:
    """``{mu : <c, mean(mu)> >= kappa}``; dilation lowers the threshold to ``kappa - delta``."""
    c = np.atleast_1d(np.asarray(normal, dtype=float))

    def make(delta):
        level = kappa - delta
        return TargetSet(
            lambda mu: float(c @ mu.mean()) >= level,
            lambda extra: make(delta + extra),
            f"<{c.tolist()}, mean> >= {level:g}",
            delta,
        )

    return make(0.0)


def moment_box(low, high) -> TargetSet:
    """Componentwise box on the mean; dilation widens each side by delta."""
    lo = np.atleast_1d(np.asarray(low, dtype=float))
    hi = np.atleast_1d(np.asarray(high, dtype=float))

    def make(delta):
        return TargetSet(
            lambda mu: bool(np.all(mu.mean() >= lo - delta) and np.all(mu.mean() <= hi + delta)),
            lambda extra: make(delta + extra),
            f"mean in [{(lo - delta).tolist()}, {(hi + delta).tolist()}]",
            delta,
        )

    return make(0.0)


def w2_ball(reference: EmpiricalMeasure, radius: float) -> TargetSet:
    def make(delta):
        r = radius + delta
        return TargetSet(
            lambda mu: wasserstein2(mu, reference) <= r,
            lambda extra: make(delta + extra),
            f"W2(mu, ref) <= {r:g}",
            delta,
        )

    return make(0.0)


def functional_threshold(functional: Callable[[EmpiricalMeasure], float], level: float = 0.0,
                         name: str = "L") -> TargetSet:
    """``{mu : functional(mu) >= level}``; dilation lowers the level."""

    def make(delta):
        lv = level - delta
        return TargetSet(
            lambda mu: float(functional(mu)) >= lv,
            lambda extra: make(delta + extra),
            f"{name}(mu) >= {lv:g}",
            delta,
        )

    return make(0.0)


def terminal_condition(mu: EmpiricalMeasure, target: TargetSet) -> int:
    """``1 - 1_G(mu)``: 0 inside the (closed) target, 1 outside."""
    return 0 if target.contains(mu) else 1


# --------------------------------------------------------------------------- operators


def _controls_at(control: ControlPolicy, t, x, mu):
    if isinstance(control, ControlPolicy):
        return control.evaluate(t, x, mu, None)[0]
    return np.asarray(control(x), dtype=float).reshape(x.shape[0], -1)


def hamiltonian_L(w: MeasureFunction, t: float, mu: EmpiricalMeasure, control, model: CoefficientModel) -> float:
    """Particle quadrature of the controlled generator acting on ``w``.

    ``(1/N) sum_i [b_i . d_mu w(x_i) + 1/2 Tr(dx_d_mu w(x_i) a_i a_i^T)]
    + (1/2N^2) sum_ij Tr(d2_mu w(x_i, x_j) a_j a_i^T)``

    ``control`` is a :class:`ControlPolicy` or a map ``x -> u`` on ``(N, d)`` arrays.
    """
    x = mu.points
    terms = generator_terms(w, t, x, _controls_at(control, t, x, mu), model)
    return terms.drift_term + terms.trace_term + terms.double_term


def n_set_residual(w: MeasureFunction, t: float, mu: EmpiricalMeasure, control, model: CoefficientModel) -> float:
    """``|(1/N) sum_i d_mu w(x_i)^T a(x_i, u(x_i))|``: zero iff the control kills the noise on ``w``."""
    x = mu.points
    terms = generator_terms(w, t, x, _controls_at(control, t, x, mu), model)
    return float(np.linalg.norm(terms.noise_vector))


def n_set_test(w, t, mu, control, model, eps: float) -> bool:
    return n_set_residual(w, t, mu, control, model) <= eps


# --------------------------------------------------------------------------- verification


@dataclass
class VerificationReport:
    certified: bool
    reason: str  # "certified" or the first failing condition: "a", "b", "c", "d"
    first_violation: dict | None
    tol: float
    n_paths: int
    seed: int
    w_initial: float
    violations: dict
    per_path: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "certified": self.certified,
            "reason": self.reason,
            "first_violation": self.first_violation,
            "tol": self.tol,
            "M": self.n_paths,
            "seed": self.seed,
            "w_initial": self.w_initial,
            "violations": self.violations,
            "per_path": self.per_path,
        }


def verify_membership(
    w: MeasureFunction,
    control: ControlPolicy,
    t: float,
    initial: EmpiricalMeasure,
    model: CoefficientModel,
    target: TargetSet,
    grid,
    *,
    n_paths: int = 8,
    seed: int = 0,
    tol: float | None = None,
    workers: int = 1,
) -> VerificationReport:
    """Sufficient-condition check that ``initial`` can be steered into ``target``.

    Along ``n_paths`` simulated paths with the feedback ``control``:

    (a) ``-d_t w - L^u[w] >= -tol`` at every step,
    (b) the noise loading ``|E_B[d_mu w . a]| <= tol`` at every step,
    (c) ``w(T, mu_T) >= 1 - 1_G(mu_T)`` on every terminal ensemble,
    (d) ``w(t, initial) <= 0``.

    Certified when all four hold; otherwise ``reason`` names the first failing
    condition in the order a, b, c, d.
    """
    w.require_derivatives()
    grid = _check_grid(grid)
    w0 = w(t, initial)
    if tol is None:
        tol = 1e-6 * (1.0 + abs(w0))
    T = float(grid[-1])

    def run(m):
        path = sample_path(grid, seed, model.noise_dim, m)
        traj = simulate_ensemble(model, control, t, initial, path)
        first_a = first_b = None
        worst_a, worst_b = math.inf, 0.0
        for k in range(len(traj.times) - 1):
            terms = generator_terms(w, traj.times[k], traj.states[k], traj.controls[k], model)
            pde = -terms.time_term - (terms.drift_term + terms.trace_term + terms.double_term)
            nres = float(np.linalg.norm(terms.noise_vector))
            worst_a, worst_b = min(worst_a, pde), max(worst_b, nres)
            if first_a is None and pde < -tol:
                first_a = k
            if first_b is None and nres > tol:
                first_b = k
        mu_T = traj.terminal
        wT = w(T, mu_T)
        return {
            "path": m,
            "first_a": first_a,
            "first_b": first_b,
            "c_holds": bool(wT >= terminal_condition(mu_T, target)),
            "min_pde": worst_a if math.isfinite(worst_a) else None,
            "max_noise": worst_b,
            "w_terminal": wT,
        }

    per_path = ordered_map(run, range(n_paths), workers)
    violations = {
        "a": sum(p["first_a"] is not None for p in per_path),
        "b": sum(p["first_b"] is not None for p in per_path),
        "c": sum(not p["c_holds"] for p in per_path),
        "d": int(not w0 <= 0.0),
    }
    reason, first = "certified", None
    for cond in ("a", "b", "c"):
        if violations[cond]:
            reason = cond
            for p in per_path:
                if cond == "c" and not p["c_holds"]:
                    first = {"condition": "c", "path": p["path"], "step": len(grid) - 1}
                    break
                if cond != "c" and p[f"first_{cond}"] is not None:
                    first = {"condition": cond, "path": p["path"], "step": p[f"first_{cond}"]}
                    break
            break
    if reason == "certified" and violations["d"]:
        reason, first = "d", {"condition": "d", "path": None, "step": 0}
    return VerificationReport(reason == "certified", reason, first, tol, n_paths, seed, w0, violations, per_path)


# --------------------------------------------------------------------------- reachability


@dataclass
class ReachVerdict:
    verdict: str  # "member", "non-member", "inconclusive"
    delta: float
    n_paths: int
    seed: int
    best_control: str | None
    fractions: dict  # label -> fraction of paths with terminal law in G_delta
    fractions_outer: dict  # label -> fraction of paths with terminal law in G_{2 delta}
    outcomes: dict = field(default_factory=dict)  # label -> per-path membership in G_delta
    family_relative: bool = True

    def to_dict(self) -> dict:
        return {
            "verdict": self.verdict,
            "delta": self.delta,
            "M": self.n_paths,
            "seed": self.seed,
            "best_control": self.best_control,
            "fractions": self.fractions,
            "fractions_outer": self.fractions_outer,
            "per_path": self.outcomes,
            "family_relative": self.family_relative,
        }


def reach_estimate(
    model: CoefficientModel,
    controls: Sequence[ControlPolicy],
    t: float,
    initial: EmpiricalMeasure,
    target: TargetSet,
    grid,
    *,
    n_paths: int = 32,
    delta: float = 0.0,
    seed: int = 0,
    workers: int = 1,
) -> ReachVerdict:
    """Estimate membership of ``initial`` in the reachability set at ``t``.

    Every candidate is run on the same ``n_paths`` common-noise paths.

    * member: some candidate puts the terminal law in ``G_delta`` on every path;
    * non-member: every candidate leaves ``G_{2 delta}`` on at least one path;
    * inconclusive: otherwise.

    Verdicts are relative to the finite candidate family.
    """
    controls = list(controls)
    if not controls:
        raise InvalidInputError("control family is empty")
    grid = _check_grid(grid)
    inner, outer = target.dilate(delta), target.dilate(2 * delta)
    paths = [sample_path(grid, seed, model.noise_dim, m) for m in range(n_paths)]

    def run(job):
        ci, m = job
        mu_T = simulate_ensemble(model, controls[ci], t, initial, paths[m]).terminal
        return inner.contains(mu_T), outer.contains(mu_T)

    jobs = [(ci, m) for ci in range(len(controls)) for m in range(n_paths)]
    results = ordered_map(run, jobs, workers)
    fractions, fractions_outer, outcomes = {}, {}, {}
    best, best_frac = None, -1.0
    all_inner_any = False
    all_fail_outer = True
    for ci, ctrl in enumerate(controls):
        res = results[ci * n_paths : (ci + 1) * n_paths]
        ins = [r[0] for r in res]
        outs = [r[1] for r in res]
        label = ctrl.label or f"control{ci}"
        if label in fractions:
            label = f"{label}#{ci}"
        fractions[label] = sum(ins) / n_paths
        fractions_outer[label] = sum(outs) / n_paths
        outcomes[label] = ins
        if fractions[label] > best_frac:
            best, best_frac = label, fractions[label]
        if all(ins):
            all_inner_any = True
        if all(outs):
            all_fail_outer = False
    if all_inner_any:
        verdict = "member"
    elif all_fail_outer:
        verdict = "non-member"
    else:
        verdict = "inconclusive"
    return ReachVerdict(verdict, float(delta), n_paths, seed, best, fractions, fractions_outer, outcomes)


# --------------------------------------------------------------------------- dynamic programming


@dataclass
class GDPPReport:
    theta: float
    n_paths: int
    n_restarts: int
    delta: float
    original_success: list
    restart_success: list  # [path][restart]
    fraction: float
    consistent: bool

    def to_dict(self) -> dict:
        return {
            "theta": self.theta,
            "M": self.n_paths,
            "restarts": self.n_restarts,
            "delta": self.delta,
            "original_success": self.original_success,
            "restart_success": self.restart_success,
            "fraction": self.fraction,
            "consistent": self.consistent,
        }


def gdpp_check(
    model: CoefficientModel,
    control: ControlPolicy,
    t: float,
    initial: EmpiricalMeasure,
    target: TargetSet,
    grid,
    theta: float,
    *,
    n_paths: int = 16,
    n_restarts: int = 4,
    delta: float = 0.0,
    seed: int = 0,
    workers: int = 1,
) -> GDPPReport:
    """Time-consistency check of reachability at an intermediate grid time.

    For each sampled path the ensemble is run to ``theta``, then restarted
    from the realised law with the same (tail) control on ``n_restarts``
    fresh continuations of the noise. If the control succeeds from ``t`` on
    every sampled path, every restart should succeed as well.
    """
    grid = _check_grid(grid)
    k_theta = grid_index(grid, theta)
    if grid[k_theta] < t - 1e-12:
        raise InvalidInputError("theta must lie in [t, T]")
    goal = target.dilate(delta)
    tail_grid = grid[k_theta:]

    def run(m):
        path = sample_path(grid, seed, model.noise_dim, m)
        full = simulate_ensemble(model, control, t, initial, path)
        mu_theta = full.measure(grid_index(full.times, grid[k_theta]))
        restarts = []
        for r in range(n_restarts):
            tail = sample_path(tail_grid, seed, model.noise_dim, (m, r), stream=RESTART_STREAM)
            term = simulate_ensemble(model, control, float(grid[k_theta]), mu_theta, tail).terminal
            restarts.append(goal.contains(term))
        return goal.contains(full.terminal), restarts

    results = ordered_map(run, range(n_paths), workers)
    original = [r[0] for r in results]
    restarts = [r[1] for r in results]
    total = sum(sum(r) for r in restarts)
    fraction = total / max(1, n_paths * n_restarts)
    consistent = (not all(original)) or all(all(r) for r in restarts)
    return GDPPReport(float(grid[k_theta]), n_paths, n_restarts, float(delta), original, restarts, fraction, consistent)


# --------------------------------------------------------------------------- mean-constraint embedding


def embed_mean_constraint(
    base: CoefficientModel,
    loss: Callable[[np.ndarray], np.ndarray],
    alpha_box,
    *,
    loss_bound: float = math.inf,
) -> tuple[CoefficientModel, TargetSet]:
    """Turn ``E[loss(X_T)] >= 0`` into an almost-sure target on conditional laws.

    The state is extended to ``(X, Y)`` with ``dY = alpha . dB`` where the
    row ``alpha`` (one entry per noise coordinate) is appended to the control.
    The target is ``{mu : int (loss(x) - y) mu(dx, dy) >= 0}`` with dilation
    lowering the threshold. Base coefficients see the X-marginal of the law.
    """
    d, m, q = base.dim, base.noise_dim, base.control_dim
    alpha_box = np.asarray(alpha_box, dtype=float).reshape(-1, 2)
    if alpha_box.shape[0] != m:
        raise InvalidInputError(f"alpha needs one interval per noise coordinate ({m})")

    def marginal(mu):
        return EmpiricalMeasure._wrap(mu.points[:, :d])

    def b(t, x, mu, u):
        out = np.zeros((x.shape[0], d + 1))
        out[:, :d] = base.drift(t, x[:, :d], marginal(mu), u[:, :q])
        return out

    def a(t, x, mu, u):
        out = np.zeros((x.shape[0], d + 1, m))
        out[:, :d, :] = base.diffusion(t, x[:, :d], marginal(mu), u[:, :q])
        out[:, d, :] = u[:, q:]
        return out

    alpha_bound = float(np.linalg.norm(np.abs(alpha_box).max(axis=1)))
    model = CoefficientModel(
        b,
        a,
        dim=d + 1,
        noise_dim=m,
        control_box=np.vstack([base.control_box, alpha_box]),
        lipschitz_L=base.lipschitz_L,
        bound_M=math.hypot(base.bound_M, alpha_bound) if math.isfinite(base.bound_M) else math.inf,
        params={"base": base.name, **base.params, "alpha_box": alpha_box.tolist(), "loss_bound": loss_bound},
        name=f"mean-constraint[{base.name}]",
    )

    def L(mu):
        pts = mu.points
        vals = np.asarray(loss(pts[:, :d]), dtype=float).reshape(-1) - pts[:, d]
        return math.fsum(vals) / mu.n

    return model, functional_threshold(L, 0.0, name="L")


def extend_initial(mu: EmpiricalMeasure, y: float = 0.0) -> EmpiricalMeasure:
    """Append a budget coordinate ``y`` to every particle."""
    return EmpiricalMeasure(np.hstack([mu.points, np.full((mu.n, 1), float(y))]))
