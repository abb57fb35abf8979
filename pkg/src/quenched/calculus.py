"""Numerical Lions calculus on empirical measures.

A function ``w(t, mu)`` is probed through its lift to particle arrays,
``W(t, X) = w(t, (1/N) sum_i delta_{X_i})``. Because each particle carries
weight ``1/N`` in the lift, ``N * dW/dX_i`` approximates the measure
derivative ``d_mu w(mu)(X_i)``, and the second directional derivative of the
lift along a displacement field ``Y`` is

    (1/N) sum_i Y_i . dx_d_mu w(X_i) Y_i  +  (1/N^2) sum_ij Y_i . d2_mu w(X_i, X_j) Y_j.

Derivative conventions (all vectorised over points):

* ``d_mu(t, mu, x)``      -> (n, d)
* ``dx_d_mu(t, mu, x)``   -> (n, d, d), entry [p, q] = d/dx_q of d_mu[p]
* ``d2_mu(t, mu, x, y)``  -> (n, m, d, d), entry [p, q] = derivative of d_mu(x)[p]
  in the measure direction, evaluated at y, component q
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .dynamics import CoefficientModel, Trajectory
from .errors import InvalidInputError, NumericError
from .measures import EmpiricalMeasure


@dataclass(frozen=True)
class MeasureFunction:
    """``w(t, mu)`` with optional analytic Lions derivatives.

    ``quadratic_action(t, mu, G)`` is an optional fast path for
    ``(1/N^2) sum_ij Tr(d2_mu w(x_i, x_j) G_j G_i^T)`` with ``G`` of shape
    ``(N, d, r)``; when absent it is assembled from ``d2_mu``.
    """

    value: Callable[[float, EmpiricalMeasure], float]
    d_t: Callable | None = None
    d_mu: Callable | None = None
    dx_d_mu: Callable | None = None
    d2_mu: Callable | None = None
    quadratic_action: Callable | None = None
    smooth: bool = False
    name: str = "w"

    def __call__(self, t: float, mu: EmpiricalMeasure) -> float:
        return float(self.value(t, mu))

    @property
    def has_derivatives(self) -> bool:
        return None not in (self.d_t, self.d_mu, self.dx_d_mu, self.d2_mu)

    def require_derivatives(self) -> None:
        if not self.has_derivatives:
            raise InvalidInputError(f"measure function {self.name!r} has no analytic derivatives")

    def double_trace(self, t: float, mu: EmpiricalMeasure, G: np.ndarray) -> float:
        if self.quadratic_action is not None:
            return float(self.quadratic_action(t, mu, G))
        x = mu.points
        M = self.d2_mu(t, mu, x, x)
        return float(np.einsum("ijpq,ipr,jqr->", M, G, G)) / mu.n**2


def constant_function(c: float) -> MeasureFunction:
    def zero_vec(t, mu, x):
        return np.zeros_like(np.asarray(x, dtype=float))

    def zero_mat(t, mu, x):
        x = np.asarray(x, dtype=float)
        return np.zeros(x.shape + (x.shape[1],))

    def zero_pair(t, mu, x, y):
        return np.zeros((len(x), len(y), x.shape[1], x.shape[1]))

    return MeasureFunction(
        value=lambda t, mu: float(c),
        d_t=lambda t, mu: 0.0,
        d_mu=zero_vec,
        dx_d_mu=zero_mat,
        d2_mu=zero_pair,
        quadratic_action=lambda t, mu, G: 0.0,
        smooth=True,
        name=f"const({c:g})",
    )


def cylindrical(
    outer: Callable,
    outer_grad: Callable,
    outer_hess: Callable,
    inner: Callable,
    inner_grad: Callable,
    inner_hess: Callable,
    outer_dt: Callable | None = None,
    name: str = "cylindrical",
) -> MeasureFunction:
    """``w(t, mu) = phi(t, <f, mu>)`` with ``f: R^d -> R^k``.

    ``outer(t, m)``, ``outer_grad(t, m) -> (k,)``, ``outer_hess(t, m) -> (k, k)``,
    ``outer_dt(t, m)`` (defaults to 0); ``inner(x) -> (n, k)``,
    ``inner_grad(x) -> (n, k, d)``, ``inner_hess(x) -> (n, k, d, d)``.

    Derivatives:
    ``d_mu w(x) = sum_k phi_k grad f_k(x)``,
    ``dx_d_mu w(x) = sum_k phi_k hess f_k(x)``,
    ``d2_mu w(x, y) = sum_kl phi_kl grad f_k(x) grad f_l(y)^T``.
    """

    def moments(mu):
        return mu.integrate(inner)

    def value(t, mu):
        return float(outer(t, moments(mu)))

    def d_t(t, mu):
        return 0.0 if outer_dt is None else float(outer_dt(t, moments(mu)))

    def d_mu(t, mu, x):
        g = np.atleast_1d(outer_grad(t, moments(mu)))
        return np.einsum("k,nkd->nd", g, inner_grad(np.asarray(x, dtype=float)))

    def dx_d_mu(t, mu, x):
        g = np.atleast_1d(outer_grad(t, moments(mu)))
        return np.einsum("k,nkde->nde", g, inner_hess(np.asarray(x, dtype=float)))

    def d2_mu(t, mu, x, y):
        H = np.atleast_2d(outer_hess(t, moments(mu)))
        gx = inner_grad(np.asarray(x, dtype=float))
        gy = inner_grad(np.asarray(y, dtype=float))
        return np.einsum("nkd,kl,mle->nmde", gx, H, gy)

    def quadratic_action(t, mu, G):
        H = np.atleast_2d(outer_hess(t, moments(mu)))
        v = np.einsum("nkd,ndr->kr", inner_grad(mu.points), G) / mu.n
        return float(np.einsum("kr,kl,lr->", v, H, v))

    return MeasureFunction(value, d_t, d_mu, dx_d_mu, d2_mu, quadratic_action, smooth=True, name=name)


# ---- a few standard members of the cylindrical family


def _identity_inner(d_weights):
    c = np.asarray(d_weights, dtype=float)

    def f(x):
        return (x @ c).reshape(-1, 1)

    def grad(x):
        return np.broadcast_to(c, (x.shape[0], 1, c.size))

    def hess(x):
        return np.zeros((x.shape[0], 1, c.size, c.size))

    return f, grad, hess


def linear_mean(direction) -> MeasureFunction:
    """``w(mu) = <c, mean(mu)>``."""
    f, g, h = _identity_inner(np.atleast_1d(direction))
    return cylindrical(
        lambda t, m: m[0], lambda t, m: np.ones(1), lambda t, m: np.zeros((1, 1)), f, g, h, name="linear-mean"
    )


def mean_squared(direction) -> MeasureFunction:
    """``w(mu) = <c, mean(mu)>^2``."""
    f, g, h = _identity_inner(np.atleast_1d(direction))
    return cylindrical(
        lambda t, m: m[0] ** 2, lambda t, m: 2.0 * m, lambda t, m: 2.0 * np.ones((1, 1)), f, g, h, name="mean-squared"
    )


def second_moment(dim: int) -> MeasureFunction:
    """``w(mu) = int |x|^2 dmu``."""

    def f(x):
        return np.einsum("nd,nd->n", x, x).reshape(-1, 1)

    def g(x):
        return (2.0 * x)[:, None, :]

    def h(x):
        return np.broadcast_to(2.0 * np.eye(dim), (x.shape[0], 1, dim, dim))

    return cylindrical(
        lambda t, m: m[0], lambda t, m: np.ones(1), lambda t, m: np.zeros((1, 1)), f, g, h, name="second-moment"
    )


def smootherstep(s):
    """C^2 step: 0 for s <= 0, 1 for s >= 1; returns (value, first, second) derivatives."""
    s = np.clip(s, 0.0, 1.0)
    return (
        s**3 * (10.0 - 15.0 * s + 6.0 * s**2),
        30.0 * s**2 * (1.0 - s) ** 2,
        60.0 * s * (1.0 - s) * (1.0 - 2.0 * s),
    )


def threshold_barrier(direction, kappa: float, horizon: float, eps: float, speed: float = 1.0) -> MeasureFunction:
    """``w(t, mu) = H(kappa - <c, mean(mu)> - speed (T - t))``.

    ``H`` is a C^2 nondecreasing ramp: 0 on (-inf, -eps], 1 on [0, inf).
    ``w(t, mu) <= 0`` exactly when ``<c, mean> >= kappa - speed (T - t) + eps``.
    """
    eps = float(eps)

    def ramp(z):
        v, d1, d2 = smootherstep((z + eps) / eps)
        return float(v), float(d1) / eps, float(d2) / eps**2

    def arg(t, m):
        return kappa - m[0] - speed * (horizon - t)

    f, g, h = _identity_inner(np.atleast_1d(direction))
    return cylindrical(
        outer=lambda t, m: ramp(arg(t, m))[0],
        outer_grad=lambda t, m: np.array([-ramp(arg(t, m))[1]]),
        outer_hess=lambda t, m: np.array([[ramp(arg(t, m))[2]]]),
        inner=f,
        inner_grad=g,
        inner_hess=h,
        outer_dt=lambda t, m: speed * ramp(arg(t, m))[1],
        name="threshold-barrier",
    )


# --------------------------------------------------------------------------- lift and finite differences


def lift_eval(w: MeasureFunction, t: float, ensemble) -> float:
    """``W(t, X)`` for a particle ensemble, an ``(N, d)`` array or a measure."""
    if hasattr(ensemble, "as_measure"):
        mu = ensemble.as_measure()
    elif isinstance(ensemble, EmpiricalMeasure):
        mu = ensemble
    else:
        mu = EmpiricalMeasure(ensemble)
    return w(t, mu)


def _lift(w, t, X):
    val = w(t, EmpiricalMeasure(X))
    if not math.isfinite(val):
        raise NumericError("measure function returned a non-finite value")
    return val


def fd_dmu(w: MeasureFunction, t: float, mu: EmpiricalMeasure, i: int, h: float = 1e-5) -> np.ndarray:
    """Central-difference estimate of ``d_mu w(mu)(x_i)``: ``N * dW/dX_i``."""
    if h <= 0:
        raise InvalidInputError("step h must be positive")
    X = np.array(mu.points)
    out = np.empty(mu.d)
    for k in range(mu.d):
        xp, xm = X.copy(), X.copy()
        xp[i, k] += h
        xm[i, k] -= h
        out[k] = mu.n * (_lift(w, t, xp) - _lift(w, t, xm)) / (2.0 * h)
    if not np.isfinite(out).all():
        raise NumericError("non-finite finite difference")
    return out


def fd_dmu_all(w: MeasureFunction, t: float, mu: EmpiricalMeasure, h: float = 1e-5) -> np.ndarray:
    return np.stack([fd_dmu(w, t, mu, i, h) for i in range(mu.n)])


def fd_d2_action(w: MeasureFunction, t: float, mu: EmpiricalMeasure, direction, h: float = 1e-4) -> float:
    """Second central difference of the lift along the displacement field ``direction``."""
    if h <= 0:
        raise InvalidInputError("step h must be positive")
    Y = np.asarray(direction, dtype=float).reshape(mu.n, mu.d)
    X = mu.points
    val = (_lift(w, t, X + h * Y) - 2.0 * _lift(w, t, X) + _lift(w, t, X - h * Y)) / h**2
    if not math.isfinite(val):
        raise NumericError("non-finite second difference")
    return val


def d2_action_quadrature(w: MeasureFunction, t: float, mu: EmpiricalMeasure, direction) -> float:
    """Analytic value of the lift's second derivative along ``direction``.

    ``(1/N) sum_i Tr(dx_d_mu w(x_i) Y_i Y_i^T) + (1/N^2) sum_ij Tr(d2_mu w(x_i, x_j) Y_j Y_i^T)``.
    """
    w.require_derivatives()
    Y = np.asarray(direction, dtype=float).reshape(mu.n, mu.d)
    X = mu.points
    local = np.einsum("ipq,ip,iq->", w.dx_d_mu(t, mu, X), Y, Y) / mu.n
    cross = np.einsum("ijpq,ip,jq->", w.d2_mu(t, mu, X, X), Y, Y) / mu.n**2
    return float(local + cross)


# --------------------------------------------------------------------------- chain rule


@dataclass(frozen=True)
class GeneratorTerms:
    """Particle quadrature of the terms of the measure-flow chain rule at one time."""

    time_term: float  # d_t w
    drift_term: float  # (1/N) sum d_mu w(x_i) . b_i
    trace_term: float  # (1/2N) sum Tr(dx_d_mu w(x_i) G_i G_i^T)
    double_term: float  # (1/2N^2) sum_ij Tr(d2_mu w(x_i, x_j) G_j G_i^T)
    noise_vector: np.ndarray  # (1/N) sum (d_mu w(x_i))^T a_i, shape (m,)


def generator_terms(
    w: MeasureFunction, t: float, x: np.ndarray, u: np.ndarray, model: CoefficientModel, G: np.ndarray | None = None
) -> GeneratorTerms:
    """Evaluate the chain-rule integrands at particles ``x`` with controls ``u``.

    ``G`` replaces the diffusion matrices in the two second-order terms (used
    to plug in realised increments ``a_i dB``); it defaults to ``a`` itself,
    which gives the ``dt``-integrands.
    """
    w.require_derivatives()
    mu = EmpiricalMeasure._wrap(x)
    b = model.drift(t, x, mu, u)
    a = model.diffusion(t, x, mu, u)
    G = a if G is None else G
    dmu = w.d_mu(t, mu, x)
    n = x.shape[0]
    drift = math.fsum(np.einsum("nd,nd->n", dmu, b)) / n
    local = math.fsum(np.einsum("npq,npr,nqr->n", w.dx_d_mu(t, mu, x), G, G)) / n
    cross = w.double_trace(t, mu, G)
    noise = np.einsum("nd,ndm->m", dmu, a) / n
    return GeneratorTerms(float(w.d_t(t, mu)), drift, 0.5 * local, 0.5 * cross, noise)


@dataclass(frozen=True)
class ChainRuleResidual:
    times: np.ndarray
    residuals: np.ndarray  # absolute residual at times[1:]
    quadratic_variation: str

    @property
    def terminal(self) -> float:
        return float(self.residuals[-1]) if self.residuals.size else 0.0

    @property
    def max(self) -> float:
        return float(self.residuals.max()) if self.residuals.size else 0.0


def chain_rule_residual(
    w: MeasureFunction,
    trajectory: Trajectory,
    model: CoefficientModel,
    *,
    quadratic_variation: str = "realized",
) -> ChainRuleResidual:
    """Discrepancy between ``w(s, mu_s) - w(t, mu_t)`` and the chain-rule integrals.

    Integrands are frozen at the left end of each Euler step, matching the
    simulation. The drift term uses ``dt_k`` and the stochastic term the
    recorded increment ``dB_k``. The two second-order terms integrate against
    the quadratic variation of B: with ``"realized"`` it is the observed
    ``dB_k dB_k^T`` (the discrete bracket, which keeps the residual of first
    order in ``dt`` pathwise); with ``"dt"`` it is ``dt_k I``, whose residual
    only decays like ``sqrt(dt)`` pathwise.
    """
    if quadratic_variation not in ("realized", "dt"):
        raise InvalidInputError("quadratic_variation must be 'realized' or 'dt'")
    w.require_derivatives()
    times = trajectory.times
    lhs0 = w(times[0], trajectory.measure(0))
    acc = 0.0
    out = np.empty(len(times) - 1)
    for k in range(len(times) - 1):
        x, u, dB = trajectory.states[k], trajectory.controls[k], trajectory.increments[k]
        dt = times[k + 1] - times[k]
        mu = EmpiricalMeasure._wrap(x)
        a = model.diffusion(times[k], x, mu, u)
        if quadratic_variation == "realized":
            G = np.einsum("ndm,m->nd", a, dB)[:, :, None]
            terms = generator_terms(w, times[k], x, u, model, G)
            second = terms.trace_term + terms.double_term
        else:
            terms = generator_terms(w, times[k], x, u, model)
            second = (terms.trace_term + terms.double_term) * dt
        acc += (terms.time_term + terms.drift_term) * dt + second + float(terms.noise_vector @ dB)
        out[k] = abs(w(times[k + 1], trajectory.measure(k + 1)) - lhs0 - acc)
    return ChainRuleResidual(times.copy(), out, quadratic_variation)
