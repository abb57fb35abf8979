"""Common-noise paths and Euler-Maruyama simulation of the quenched particle system.

All particles of an ensemble are driven by one shared Brownian path; they
differ only through their initial draws (and, for feedback controls, through
their own state). Coefficients are vectorised over particles:

    b(t, x, mu, u) -> (N, d)        a(t, x, mu, u) -> (N, d, m)

with ``x`` of shape ``(N, d)``, ``u`` of shape ``(N, q)`` and ``mu`` the current
:class:`~quenched.measures.EmpiricalMeasure`. ``m`` is the dimension of the
common noise (equal to ``d`` unless a model declares otherwise).
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import InvalidInputError, NumericBlowupError
from .measures import EmpiricalMeasure, wasserstein2
from .seeding import DRAW_STREAM, PATH_STREAM, SAMPLING_STREAM, ordered_map, rng_for

logger = logging.getLogger(__name__)

GRID_ATOL = 1e-12


# --------------------------------------------------------------------------- paths


def uniform_grid(t0: float, T: float, K: int) -> np.ndarray:
    if K < 0:
        raise InvalidInputError("K must be non-negative")
    if K > 0 and not T > t0:
        raise InvalidInputError(f"need T > t0, got t0={t0}, T={T}")
    return np.linspace(float(t0), float(T), int(K) + 1)


def _check_grid(grid) -> np.ndarray:
    grid = np.asarray(grid, dtype=float).reshape(-1)
    if grid.size < 1:
        raise InvalidInputError("grid must contain at least one time")
    if not np.isfinite(grid).all():
        raise InvalidInputError("grid times must be finite")
    if grid.size > 1 and not (np.diff(grid) > 0).all():
        raise InvalidInputError("grid must be strictly increasing")
    return grid


def grid_index(grid: np.ndarray, t: float) -> int:
    """Index of ``t`` in ``grid``; raises if ``t`` is not a grid time."""
    k = int(np.argmin(np.abs(grid - t)))
    if abs(grid[k] - t) > GRID_ATOL * max(1.0, abs(t)):
        raise InvalidInputError(f"time {t} is not on the grid")
    return k


@dataclass(frozen=True, eq=False)
class CommonNoisePath:
    """One realisation of the driving Brownian motion on a grid.

    Only increments are stored; the path starts at 0 at ``grid[0]``.
    ``seed`` and ``index`` identify the random stream it was drawn from.
    """

    grid: np.ndarray
    increments: np.ndarray
    seed: int = 0
    index: tuple = ()

    def __post_init__(self):
        grid = _check_grid(self.grid)
        inc = np.asarray(self.increments, dtype=float)
        if inc.ndim == 1:
            inc = inc.reshape(-1, 1) if grid.size > 1 else inc.reshape(0, max(inc.size, 1))
        if inc.shape[0] != grid.size - 1:
            raise InvalidInputError(f"{grid.size - 1} increments expected, got {inc.shape[0]}")
        grid = grid.copy()
        inc = inc.copy()
        grid.setflags(write=False)
        inc.setflags(write=False)
        object.__setattr__(self, "grid", grid)
        object.__setattr__(self, "increments", inc)
        object.__setattr__(self, "index", tuple(int(i) for i in np.atleast_1d(self.index)))

    @property
    def dim(self) -> int:
        return self.increments.shape[1]

    @property
    def n_steps(self) -> int:
        return self.increments.shape[0]

    @property
    def ref(self) -> str:
        idx = ",".join(str(i) for i in self.index)
        return f"seed={self.seed};index=({idx});K={self.n_steps}"

    def values(self) -> np.ndarray:
        """Path values ``B_{t_k} - B_{t_0}`` at every grid time, shape (K+1, m)."""
        out = np.zeros((self.n_steps + 1, self.dim))
        np.cumsum(self.increments, axis=0, out=out[1:])
        return out

    def index_of(self, t: float) -> int:
        return grid_index(self.grid, t)

    def tail(self, t: float) -> "CommonNoisePath":
        k = self.index_of(t)
        return CommonNoisePath(self.grid[k:], self.increments[k:], self.seed, self.index)

    def coarsen(self, factor: int) -> "CommonNoisePath":
        """Same Brownian path observed on every ``factor``-th grid time."""
        factor = int(factor)
        if factor < 1 or self.n_steps % factor:
            raise InvalidInputError(f"cannot coarsen {self.n_steps} steps by {factor}")
        inc = self.increments.reshape(-1, factor, self.dim).sum(axis=1)
        return CommonNoisePath(self.grid[::factor], inc, self.seed, self.index)

    def save(self, path) -> None:
        np.savez(path, grid=self.grid, increments=self.increments, seed=self.seed, index=np.array(self.index))

    @classmethod
    def load(cls, path) -> "CommonNoisePath":
        with np.load(path) as data:
            return cls(data["grid"], data["increments"], int(data["seed"]), tuple(data["index"].tolist()))


def sample_path(grid, seed: int, dim: int = 1, index=0, *, stream: int = PATH_STREAM) -> CommonNoisePath:
    """Draw i.i.d. ``N(0, dt I)`` increments on ``grid``; deterministic in (grid, seed, index)."""
    grid = _check_grid(grid)
    index = tuple(int(i) for i in np.atleast_1d(index))
    rng = rng_for(seed, stream, *index)
    dt = np.diff(grid)
    z = rng.standard_normal((dt.size, int(dim)))
    return CommonNoisePath(grid, z * np.sqrt(dt)[:, None], int(seed), index)


# --------------------------------------------------------------------------- models


@dataclass(frozen=True)
class CoefficientModel:
    """Drift and diffusion of the controlled quenched SDE.

    ``lipschitz_L`` and ``bound_M`` are *declared* constants; :func:`check_h1`
    compares them against sampled values. ``control_box`` is the admissible
    set U as a ``(q, 2)`` array of closed intervals.
    """

    b: Callable
    a: Callable
    dim: int
    control_box: np.ndarray
    lipschitz_L: float = math.inf
    bound_M: float = math.inf
    noise_dim: int | None = None
    params: dict = field(default_factory=dict)
    name: str = "custom"

    def __post_init__(self):
        box = np.asarray(self.control_box, dtype=float).reshape(-1, 2)
        if (box[:, 0] > box[:, 1]).any():
            raise InvalidInputError("control_box intervals need lo <= hi")
        object.__setattr__(self, "control_box", box)
        if self.noise_dim is None:
            object.__setattr__(self, "noise_dim", int(self.dim))

    @property
    def control_dim(self) -> int:
        return self.control_box.shape[0]

    def drift(self, t, x, mu, u) -> np.ndarray:
        return np.asarray(self.b(t, x, mu, u), dtype=float).reshape(x.shape[0], self.dim)

    def diffusion(self, t, x, mu, u) -> np.ndarray:
        return np.asarray(self.a(t, x, mu, u), dtype=float).reshape(x.shape[0], self.dim, self.noise_dim)


# --------------------------------------------------------------------------- controls

CONTROL_KINDS = ("feedback", "measure-feedback", "open-loop-constant")


@dataclass(frozen=True)
class ControlPolicy:
    """A control in one of three families.

    * ``feedback``: ``fn(t, x, mu, increments_so_far) -> (N, q)``
    * ``measure-feedback``: ``fn(t, mu, increments_so_far) -> (q,)``; ignores
      the particle's own state, so every particle gets the same value.
    * ``open-loop-constant``: ``value`` is a fixed point of U.

    Outputs are clamped to ``box``; :meth:`evaluate` reports how many
    coordinates were clamped.
    """

    kind: str
    box: np.ndarray
    fn: Callable | None = None
    value: np.ndarray | None = None
    label: str = ""

    def __post_init__(self):
        if self.kind not in CONTROL_KINDS:
            raise InvalidInputError(f"unknown control kind {self.kind!r}; expected one of {CONTROL_KINDS}")
        box = np.asarray(self.box, dtype=float).reshape(-1, 2)
        object.__setattr__(self, "box", box)
        if self.kind == "open-loop-constant":
            if self.value is None:
                raise InvalidInputError("open-loop-constant control needs a value")
            object.__setattr__(self, "value", np.asarray(self.value, dtype=float).reshape(box.shape[0]))
        elif self.fn is None:
            raise InvalidInputError(f"{self.kind} control needs fn")

    @property
    def dim(self) -> int:
        return self.box.shape[0]

    def evaluate(self, t, x, mu, increments=None) -> tuple[np.ndarray, int]:
        n = x.shape[0]
        if self.kind == "open-loop-constant":
            raw = np.broadcast_to(self.value, (n, self.dim))
        elif self.kind == "measure-feedback":
            raw = np.broadcast_to(np.asarray(self.fn(t, mu, increments), dtype=float).reshape(self.dim), (n, self.dim))
        else:
            raw = np.asarray(self.fn(t, x, mu, increments), dtype=float).reshape(n, self.dim)
        u = np.clip(raw, self.box[:, 0], self.box[:, 1])
        clamped = int(np.count_nonzero(u != raw))
        if clamped:
            logger.debug("control %s clamped %d coordinates at t=%g", self.label, clamped, t)
        return u, clamped


def constant_control(value, box, label: str | None = None) -> ControlPolicy:
    value = np.atleast_1d(np.asarray(value, dtype=float))
    return ControlPolicy("open-loop-constant", box, value=value, label=label or f"const{value.tolist()}")


def feedback_control(fn, box, label: str = "feedback") -> ControlPolicy:
    return ControlPolicy("feedback", box, fn=fn, label=label)


def measure_feedback_control(fn, box, label: str = "measure-feedback") -> ControlPolicy:
    return ControlPolicy("measure-feedback", box, fn=fn, label=label)


def bang_bang_control(before, after, switch_time: float, box, label: str | None = None) -> ControlPolicy:
    """``before`` on [t, switch_time), ``after`` from ``switch_time`` on."""
    before = np.atleast_1d(np.asarray(before, dtype=float))
    after = np.atleast_1d(np.asarray(after, dtype=float))
    s = float(switch_time)

    def fn(t, mu, increments):
        return before if t < s - GRID_ATOL else after

    return ControlPolicy(
        "measure-feedback", box, fn=fn, label=label or f"bang{before.tolist()}->{after.tolist()}@{s:g}"
    )


def default_control_family(box, levels=5, switch_times: Sequence[float] = ()) -> list[ControlPolicy]:
    """Constant controls on a tensor grid of U, plus bang-bang switches.

    ``levels`` is a count per axis (an int applies to every axis). Bang-bang
    candidates go from the upper to the lower corner of the box (and back)
    at each of ``switch_times``.
    """
    box = np.asarray(box, dtype=float).reshape(-1, 2)
    counts = np.broadcast_to(np.asarray(levels, dtype=int), (box.shape[0],))
    axes = [np.linspace(lo, hi, int(c)) if hi > lo else np.array([lo]) for (lo, hi), c in zip(box, counts)]
    mesh = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, box.shape[0])
    family = [constant_control(v, box) for v in mesh]
    for s in switch_times:
        family.append(bang_bang_control(box[:, 1], box[:, 0], s, box))
        family.append(bang_bang_control(box[:, 0], box[:, 1], s, box))
    return family


# --------------------------------------------------------------------------- ensembles


@dataclass(frozen=True, eq=False)
class ParticleEnsemble:
    time: float
    states: np.ndarray
    initial_draws: np.ndarray
    path_ref: str

    def as_measure(self) -> EmpiricalMeasure:
        return EmpiricalMeasure(self.states)


@dataclass(eq=False)
class Trajectory:
    """Particle states on the grid times at and after the start time.

    ``states[k]`` are the particles at ``times[k]``; ``controls[k]`` is the
    control applied on ``[times[k], times[k+1])`` and ``increments[k]`` the
    corresponding common-noise increment.
    """

    times: np.ndarray
    states: np.ndarray
    controls: np.ndarray
    increments: np.ndarray
    path_ref: str
    clamp_count: int = 0

    def __len__(self) -> int:
        return len(self.times)

    def __getitem__(self, k) -> ParticleEnsemble:
        return ParticleEnsemble(float(self.times[k]), self.states[k], self.states[0], self.path_ref)

    def __iter__(self):
        return (self[k] for k in range(len(self)))

    @property
    def terminal(self) -> EmpiricalMeasure:
        return EmpiricalMeasure(self.states[-1])

    def measure(self, k: int) -> EmpiricalMeasure:
        return EmpiricalMeasure(self.states[k])


def simulate_ensemble(
    model: CoefficientModel,
    control: ControlPolicy,
    t: float,
    initial: EmpiricalMeasure,
    path: CommonNoisePath,
    *,
    stop: float | None = None,
) -> Trajectory:
    """Euler-Maruyama for the particle system driven by one common path.

    ``X_{k+1} = X_k + b(t_k, X_k, mu_k, u_k) dt_k + a(t_k, X_k, mu_k, u_k) dB_k``

    where ``mu_k`` is the empirical measure of the current ensemble. Starts at
    grid time ``t`` and runs to ``stop`` (default: the end of the path grid).
    """
    if initial.d != model.dim:
        raise InvalidInputError(f"initial measure has dimension {initial.d}, model expects {model.dim}")
    if path.dim != model.noise_dim:
        raise InvalidInputError(f"path has dimension {path.dim}, model noise expects {model.noise_dim}")
    if control.dim != model.control_dim:
        raise InvalidInputError(f"control has dimension {control.dim}, model expects {model.control_dim}")
    k0 = path.index_of(t)
    k1 = path.n_steps if stop is None else path.index_of(stop)
    if k1 < k0:
        raise InvalidInputError("stop time precedes start time")

    n_steps = k1 - k0
    states = np.empty((n_steps + 1, initial.n, model.dim))
    controls = np.empty((n_steps, initial.n, model.control_dim))
    states[0] = initial.points
    grid, inc = path.grid, path.increments
    clamped = 0
    for j in range(n_steps):
        k = k0 + j
        x = states[j]
        mu = EmpiricalMeasure._wrap(x)
        u, c = control.evaluate(grid[k], x, mu, inc[:k])
        clamped += c
        controls[j] = u
        dt = grid[k + 1] - grid[k]
        drift = model.drift(grid[k], x, mu, u)
        diff = model.diffusion(grid[k], x, mu, u)
        nxt = x + drift * dt + np.einsum("nij,j->ni", diff, inc[k])
        if not np.isfinite(nxt).all():
            raise NumericBlowupError("non-finite particle state", step=k)
        states[j + 1] = nxt
    if clamped:
        logger.info("control %s: %d clamped coordinates over the run", control.label, clamped)
    return Trajectory(grid[k0 : k1 + 1].copy(), states, controls, inc[k0:k1].copy(), path.ref, clamped)


# --------------------------------------------------------------------------- initial samplers


def sample_initial(kind: str, n: int, seed: int = 0, **params) -> EmpiricalMeasure:
    """Named initial samplers, drawn from their own seed stream.

    * ``gaussian``: ``mean`` (d,), ``std`` scalar or (d,)
    * ``uniform-box``: ``low`` (d,), ``high`` (d,)
    * ``discrete-points``: ``points`` (k, d); cycled to n particles, no randomness
    """
    if n < 1:
        raise InvalidInputError("particle count must be positive")
    rng = rng_for(seed, DRAW_STREAM)
    if kind == "gaussian":
        mean = np.atleast_1d(np.asarray(params.get("mean", [0.0]), dtype=float))
        std = np.broadcast_to(np.asarray(params.get("std", 1.0), dtype=float), mean.shape)
        pts = mean + std * rng.standard_normal((n, mean.size))
    elif kind == "uniform-box":
        low = np.atleast_1d(np.asarray(params["low"], dtype=float))
        high = np.atleast_1d(np.asarray(params["high"], dtype=float))
        pts = low + (high - low) * rng.random((n, low.size))
    elif kind == "discrete-points":
        base = np.asarray(params["points"], dtype=float)
        base = base.reshape(len(base), -1)
        pts = base[np.arange(n) % len(base)]
    else:
        raise InvalidInputError(f"unknown sampler {kind!r}; expected gaussian, uniform-box, discrete-points")
    return EmpiricalMeasure(pts)


# --------------------------------------------------------------------------- trajectory IO


def write_trajectories_csv(path, trajectories: Iterable[Trajectory]) -> None:
    """CSV with columns ``path_id, step, time, particle, x_1..x_d``."""
    trajectories = list(trajectories)
    d = trajectories[0].states.shape[2] if trajectories else 1
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["path_id", "step", "time", "particle"] + [f"x_{i + 1}" for i in range(d)])
        for pid, traj in enumerate(trajectories):
            for k, tk in enumerate(traj.times):
                for p, x in enumerate(traj.states[k]):
                    writer.writerow([pid, k, repr(float(tk)), p] + [repr(float(v)) for v in x])


def read_trajectories_csv(path) -> dict[int, np.ndarray]:
    """Inverse of :func:`write_trajectories_csv`: ``{path_id: states (K+1, N, d)}``."""
    rows: dict[int, dict[tuple[int, int], list[float]]] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        for rec in reader:
            pid, step, _, particle = int(rec[0]), int(rec[1]), rec[2], int(rec[3])
            rows.setdefault(pid, {})[(step, particle)] = [float(v) for v in rec[4:]]
    out = {}
    for pid, cells in rows.items():
        K = max(s for s, _ in cells) + 1
        N = max(p for _, p in cells) + 1
        d = len(next(iter(cells.values())))
        arr = np.empty((K, N, d))
        for (s, p), v in cells.items():
            arr[s, p] = v
        out[pid] = arr
    return out


# --------------------------------------------------------------------------- stability


@dataclass(frozen=True)
class StabilityRow:
    size: float
    mean_w2_sq: float
    stderr: float
    n_paths: int


def _perturbation(kind, model, control, t, initial, grid):
    if callable(kind):
        return kind
    if kind == "shift":
        e = np.zeros(initial.d)
        e[0] = 1.0

        def perturb(size):
            return t, initial.shifted(size * e), control

        return perturb
    if kind == "spread":
        centred = initial.points - initial.mean()
        rms = math.sqrt(initial.second_moment() - float(initial.mean() @ initial.mean()))
        if rms <= 0:
            raise InvalidInputError("spread perturbation needs a non-degenerate initial measure")

        def perturb(size):
            # dilation about the mean; W2(initial, perturbed) == size
            return t, EmpiricalMeasure(initial.mean() + (1.0 + size / rms) * centred), control

        return perturb
    if kind == "start-time":

        def perturb(size):
            k = grid_index(grid, t) + int(round(size / (grid[1] - grid[0])))
            return float(grid[min(k, len(grid) - 1)]), initial, control

        return perturb
    raise InvalidInputError(f"unknown perturbation {kind!r}; expected shift, spread, start-time or a callable")


def stability_probe(
    model: CoefficientModel,
    control: ControlPolicy,
    t: float,
    initial: EmpiricalMeasure,
    sizes: Sequence[float],
    grid,
    *,
    perturb="shift",
    n_paths: int = 16,
    seed: int = 0,
    workers: int = 1,
) -> list[StabilityRow]:
    """Monte Carlo estimate of ``E[W2(terminal law, perturbed terminal law)^2]``.

    Both runs share each sampled common-noise path. ``perturb`` is one of
    ``"shift"`` (translate all initial points along the first axis),
    ``"spread"`` (mean-preserving dilation at W2 distance ``size``),
    ``"start-time"`` (start ``size`` later on the grid), or a callable
    ``size -> (t', initial', control')``.
    """
    grid = _check_grid(grid)
    make = _perturbation(perturb, model, control, t, initial, grid)
    paths = [sample_path(grid, seed, model.noise_dim, m) for m in range(n_paths)]
    base = ordered_map(lambda p: simulate_ensemble(model, control, t, initial, p).terminal, paths, workers)
    rows = []
    for size in sizes:
        tp, init_p, ctrl_p = make(size)

        def one(m):
            term = simulate_ensemble(model, ctrl_p, tp, init_p, paths[m]).terminal
            return wasserstein2(base[m], term) ** 2

        vals = np.array(ordered_map(one, range(n_paths), workers))
        stderr = float(vals.std(ddof=1) / math.sqrt(n_paths)) if n_paths > 1 else 0.0
        rows.append(StabilityRow(float(size), math.fsum(vals) / n_paths, stderr, n_paths))
    return rows


# --------------------------------------------------------------------------- (H1) checks


@dataclass(frozen=True)
class H1Report:
    max_lipschitz_ratio: float
    max_x_ratio: float
    max_mu_ratio: float
    max_bound: float
    max_u_ratio: float
    time_modulus: list
    declared_L: float
    declared_M: float
    n_samples: int
    lipschitz_ok: bool
    bound_ok: bool

    def to_dict(self) -> dict:
        return {
            "max_lipschitz_ratio": self.max_lipschitz_ratio,
            "max_x_ratio": self.max_x_ratio,
            "max_mu_ratio": self.max_mu_ratio,
            "max_bound": self.max_bound,
            "max_u_ratio": self.max_u_ratio,
            "time_modulus": [list(p) for p in self.time_modulus],
            "declared_L": self.declared_L if math.isfinite(self.declared_L) else None,
            "declared_M": self.declared_M if math.isfinite(self.declared_M) else None,
            "n_samples": self.n_samples,
            "lipschitz_ok": self.lipschitz_ok,
            "bound_ok": self.bound_ok,
        }


def check_h1(
    model: CoefficientModel,
    budget: int = 500,
    seed: int = 0,
    *,
    n_atoms: int = 6,
    scale: float = 2.0,
    horizon: float = 1.0,
    tolerance: float = 1e-6,
) -> H1Report:
    """Randomised probe of the Lipschitz, boundedness and (t, u)-modulus conditions.

    Ratios use ``|b - b'| + |a - a'|_F`` in the numerator. Half of the
    measure perturbations are pure translations, where ``W2`` is the shift
    length, so that ratios attain the mean-field Lipschitz constant when the
    coefficients depend on the mean.
    """
    rng = rng_for(seed, SAMPLING_STREAM)
    d, box = model.dim, model.control_box

    def coeffs(t, x, mu, u):
        x = x.reshape(1, d)
        u = u.reshape(1, -1)
        return model.drift(t, x, mu, u)[0], model.diffusion(t, x, mu, u)[0]

    def gap(p, q):
        return float(np.linalg.norm(p[0] - q[0]) + np.linalg.norm(p[1] - q[1]))

    def draw_u():
        return box[:, 0] + (box[:, 1] - box[:, 0]) * rng.random(box.shape[0])

    x_ratio = mu_ratio = joint = bound = u_ratio = 0.0
    modulus = []
    for i in range(int(budget)):
        t = horizon * rng.random()
        x, x2 = scale * rng.standard_normal(d), scale * rng.standard_normal(d)
        mu = EmpiricalMeasure(scale * rng.standard_normal((n_atoms, d)))
        if i % 2 == 0:
            mu2 = mu.shifted(scale * rng.standard_normal(d))
        else:
            mu2 = EmpiricalMeasure(scale * rng.standard_normal((n_atoms, d)))
        u, u2 = draw_u(), draw_u()
        w = wasserstein2(mu, mu2)
        base = coeffs(t, x, mu, u)
        bound = max(bound, float(np.linalg.norm(base[0])), float(np.linalg.norm(base[1])))
        dx = float(np.linalg.norm(x - x2))
        if dx > 0:
            x_ratio = max(x_ratio, gap(base, coeffs(t, x2, mu, u)) / dx)
        if w > 0:
            mu_ratio = max(mu_ratio, gap(base, coeffs(t, x, mu2, u)) / w)
        if dx + w > 0:
            joint = max(joint, gap(base, coeffs(t, x2, mu2, u)) / (dx + w))
        du = float(np.linalg.norm(u - u2))
        if du > 0:
            u_ratio = max(u_ratio, gap(base, coeffs(t, x, mu, u2)) / du)
        if i < 32:
            t2 = horizon * rng.random()
            modulus.append((abs(t - t2), gap(base, coeffs(t2, x, mu, u))))
    modulus.sort()
    L, M = model.lipschitz_L, model.bound_M
    return H1Report(
        max_lipschitz_ratio=joint,
        max_x_ratio=x_ratio,
        max_mu_ratio=mu_ratio,
        max_bound=bound,
        max_u_ratio=u_ratio,
        time_modulus=modulus,
        declared_L=L,
        declared_M=M,
        n_samples=int(budget),
        lipschitz_ok=joint <= L * (1 + tolerance) + tolerance,
        bound_ok=bound <= M * (1 + tolerance) + tolerance,
    )
