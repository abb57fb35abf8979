"""Equal-weight empirical measures and the 2-Wasserstein distance."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import CapacityError, InvalidInputError, NumericError

DEFAULT_EXACT_CAP = 4096


def _column_fsum(values: np.ndarray) -> np.ndarray:
    # exactly rounded per-column sums: independent of particle order
    return np.array([math.fsum(col) for col in values.T], dtype=float)


@dataclass(frozen=True, eq=False)
class EmpiricalMeasure:
    """Uniform point cloud ``(1/N) sum_i delta_{x_i}`` in R^d.

    ``points`` may be given as a 1-D array (interpreted as N points in R^1)
    or as an ``(N, d)`` array. The stored array is a read-only copy.
    """

    points: np.ndarray = field(repr=False)

    def __post_init__(self):
        pts = np.array(self.points, dtype=float, copy=True)
        if pts.ndim == 1:
            pts = pts.reshape(-1, 1)
        if pts.ndim != 2:
            raise InvalidInputError(f"points must be 1-D or 2-D, got shape {pts.shape}")
        if pts.shape[0] < 1 or pts.shape[1] < 1:
            raise InvalidInputError(f"need at least one point of dimension >= 1, got shape {pts.shape}")
        if not np.isfinite(pts).all():
            raise InvalidInputError("all coordinates must be finite")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    @classmethod
    def _wrap(cls, points: np.ndarray) -> "EmpiricalMeasure":
        """Wrap an already-validated finite ``(N, d)`` array without copying."""
        obj = object.__new__(cls)
        object.__setattr__(obj, "points", points)
        return obj

    @classmethod
    def dirac(cls, x) -> "EmpiricalMeasure":
        return cls(np.atleast_1d(np.asarray(x, dtype=float)).reshape(1, -1))

    @property
    def n(self) -> int:
        return self.points.shape[0]

    @property
    def d(self) -> int:
        return self.points.shape[1]

    def __len__(self) -> int:
        return self.n

    def __repr__(self) -> str:
        return f"EmpiricalMeasure(n={self.n}, d={self.d}, mean={self.mean().tolist()})"

    @cached_property
    def _mean(self) -> np.ndarray:
        m = _column_fsum(self.points) / self.n
        m.setflags(write=False)
        return m

    def mean(self) -> np.ndarray:
        return self._mean

    def second_moment(self) -> float:
        return math.fsum(np.einsum("ij,ij->i", self.points, self.points)) / self.n

    def integrate(self, f: Callable[[np.ndarray], np.ndarray]) -> np.ndarray:
        """Equal-weight quadrature ``(1/N) sum_i f(x_i)``.

        ``f`` is applied to the whole ``(N, d)`` array and must return an array
        with leading dimension N (or N scalars).
        """
        vals = np.asarray(f(self.points), dtype=float)
        if vals.ndim == 0 or vals.shape[0] != self.n:
            raise InvalidInputError(f"f must return one value per point, got shape {vals.shape}")
        vals = vals.reshape(self.n, -1)
        if not np.isfinite(vals).all():
            raise NumericError("integrand returned non-finite values")
        return _column_fsum(vals) / self.n

    def shifted(self, c) -> "EmpiricalMeasure":
        return EmpiricalMeasure(self.points + np.asarray(c, dtype=float))

    def scaled(self, s: float) -> "EmpiricalMeasure":
        return EmpiricalMeasure(self.points * float(s))

    def with_mean(self, target) -> "EmpiricalMeasure":
        """Translate so that the mean equals ``target`` (up to rounding)."""
        return self.shifted(np.asarray(target, dtype=float) - self.mean())

    def permuted(self, order) -> "EmpiricalMeasure":
        return EmpiricalMeasure(self.points[np.asarray(order)])

    def marginal(self, coords) -> "EmpiricalMeasure":
        return EmpiricalMeasure(self.points[:, coords])

    def to_dict(self) -> dict:
        return {"points": self.points.tolist()}

    @classmethod
    def from_dict(cls, data: dict) -> "EmpiricalMeasure":
        if "points" not in data:
            raise InvalidInputError("measure record needs a 'points' field")
        return cls(np.asarray(data["points"], dtype=float))


def mean(mu: EmpiricalMeasure) -> np.ndarray:
    return mu.mean()


def integrate(mu: EmpiricalMeasure, f: Callable[[np.ndarray], np.ndarray]) -> np.ndarray:
    return mu.integrate(f)


def _w2_sorted_1d(x: np.ndarray, y: np.ndarray) -> float:
    """Exact W2^2 between two uniform 1-D samples of any sizes (quantile coupling)."""
    x = np.sort(x)
    y = np.sort(y)
    n, m = len(x), len(y)
    if n == m:
        diff = x - y
        return math.fsum(diff * diff) / n
    # breakpoints of both quantile functions in integer units of 1/(n*m)
    cuts = np.union1d(np.arange(1, n + 1, dtype=np.int64) * m, np.arange(1, m + 1, dtype=np.int64) * n)
    starts = np.concatenate(([0], cuts[:-1]))
    widths = cuts - starts
    diff = x[starts // m] - y[starts // n]
    return math.fsum(widths * diff * diff) / (n * m)


def _assignment_cost(x: np.ndarray, y: np.ndarray) -> float:
    diff = x[:, None, :] - y[None, :, :]
    cost = np.einsum("ijk,ijk->ij", diff, diff)
    rows, cols = linear_sum_assignment(cost)
    return math.fsum(cost[rows, cols]) / len(rows)


def wasserstein2(
    mu: EmpiricalMeasure,
    nu: EmpiricalMeasure,
    *,
    cap: int = DEFAULT_EXACT_CAP,
    approximate: bool = False,
    seed: int = 0,
) -> float:
    """2-Wasserstein distance between two equal-weight empirical measures.

    d = 1 always uses the exact quantile (sorted-sample) coupling. For d > 1
    the optimal coupling is an assignment on the squared-distance cost matrix;
    unequal sizes are reduced to equal ones by replicating every point
    ``lcm(N1, N2) / N`` times. The assignment size is capped at ``cap``. Past
    the cap a :class:`CapacityError` is raised unless ``approximate`` is set,
    in which case both measures are subsampled (seeded) down to the cap.
    """
    if mu.d != nu.d:
        raise InvalidInputError(f"dimension mismatch: {mu.d} vs {nu.d}")
    x, y = mu.points, nu.points
    # canonical argument order: tied optimal assignments can differ in the last bit
    if (len(x), x.tobytes()) > (len(y), y.tobytes()):
        x, y = y, x
    if mu.d == 1:
        return math.sqrt(_w2_sorted_1d(x[:, 0], y[:, 0]))

    n, m = len(x), len(y)
    size = n if n == m else math.lcm(n, m)
    if size > cap:
        if not approximate:
            raise CapacityError(
                f"exact W2 needs an assignment of size {size} > cap {cap}; pass approximate=True"
            )
        rng = np.random.default_rng(seed)
        k = min(n, m, cap)
        x = x[np.sort(rng.choice(n, size=k, replace=False))]
        y = y[np.sort(rng.choice(m, size=k, replace=False))]
        n = m = size = k
    if n != m:
        x = np.repeat(x, size // n, axis=0)
        y = np.repeat(y, size // m, axis=0)
    return math.sqrt(max(_assignment_cost(x, y), 0.0))
