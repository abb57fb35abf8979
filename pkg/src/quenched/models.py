"""Built-in coefficient models.

Each factory returns a :class:`~quenched.dynamics.CoefficientModel` whose
declared ``lipschitz_L``/``bound_M`` are the tight constants for the chosen
parameters (``inf`` where the coefficient is unbounded).
"""

from __future__ import annotations

import math

import numpy as np

from .dynamics import CoefficientModel


def _eye_stack(n, d, m, sigma):
    out = np.zeros((n, d, m))
    k = min(d, m)
    out[:, np.arange(k), np.arange(k)] = sigma
    return out


def constant(drift, diffusion, control_box=((0.0, 0.0),)) -> CoefficientModel:
    drift = np.atleast_1d(np.asarray(drift, dtype=float))
    diffusion = np.asarray(diffusion, dtype=float).reshape(drift.size, -1)

    def b(t, x, mu, u):
        return np.broadcast_to(drift, x.shape)

    def a(t, x, mu, u):
        return np.broadcast_to(diffusion, (x.shape[0],) + diffusion.shape)

    return CoefficientModel(
        b,
        a,
        dim=drift.size,
        noise_dim=diffusion.shape[1],
        control_box=control_box,
        lipschitz_L=0.0,
        bound_M=max(float(np.linalg.norm(drift)), float(np.linalg.norm(diffusion))),
        params={"drift": drift.tolist(), "diffusion": diffusion.tolist()},
        name="constant",
    )


def linear_drift(matrix, offset=None, sigma: float = 0.0, clip: float | None = None,
                 control_box=((0.0, 0.0),)) -> CoefficientModel:
    """``b = clip(A x + c)``, ``a = sigma I``; clipping is componentwise to [-clip, clip]."""
    A = np.atleast_2d(np.asarray(matrix, dtype=float))
    d = A.shape[0]
    c = np.zeros(d) if offset is None else np.asarray(offset, dtype=float).reshape(d)

    def b(t, x, mu, u):
        out = x @ A.T + c
        return out if clip is None else np.clip(out, -clip, clip)

    def a(t, x, mu, u):
        return _eye_stack(x.shape[0], d, d, sigma)

    bound = math.inf if clip is None else max(clip * math.sqrt(d), abs(sigma) * math.sqrt(d))
    return CoefficientModel(
        b, a, dim=d, control_box=control_box,
        lipschitz_L=float(np.linalg.norm(A, 2)),
        bound_M=bound,
        params={"matrix": A.tolist(), "offset": c.tolist(), "sigma": sigma, "clip": clip},
        name="linear-drift",
    )


def mean_field_ou(theta: float = 1.0, sigma: float = 0.5, dim: int = 1) -> CoefficientModel:
    """``dX = theta (mean(mu) - X) dt + sigma dB``; no control.

    Given the common path the conditional mean moves as ``sigma dB`` and the
    deviations from it contract at rate ``theta``; see :func:`ou_exact_terminal`.
    """

    def b(t, x, mu, u):
        return theta * (mu.mean() - x)

    def a(t, x, mu, u):
        return _eye_stack(x.shape[0], dim, dim, sigma)

    return CoefficientModel(
        b, a, dim=dim, control_box=((0.0, 0.0),),
        lipschitz_L=abs(theta),
        bound_M=math.inf,
        params={"theta": theta, "sigma": sigma},
        name="mean-field-ou",
    )


def ou_exact_terminal(initial_points, theta: float, sigma: float, elapsed: float, dB) -> np.ndarray:
    """Exact conditional-law representatives of the mean-field OU model.

    ``X_s = m_s + exp(-theta (s - t)) (xi - m_t)`` with
    ``m_s = m_t + sigma (B_s - B_t)``, applied to the given draws ``xi``.
    """
    pts = np.asarray(initial_points, dtype=float)
    pts = pts.reshape(len(pts), -1)
    m0 = pts.mean(axis=0)
    return m0 + sigma * np.asarray(dB, dtype=float) + math.exp(-theta * elapsed) * (pts - m0)


def threshold_control(dim: int = 1, u_low: float = -1.0, u_high: float = 1.0, sigma: float = 0.0) -> CoefficientModel:
    """``b = u`` (one control per state coordinate), ``a = sigma I``."""

    def b(t, x, mu, u):
        return u

    def a(t, x, mu, u):
        return _eye_stack(x.shape[0], dim, dim, sigma)

    box = [(u_low, u_high)] * dim
    return CoefficientModel(
        b, a, dim=dim, control_box=box,
        lipschitz_L=0.0,
        bound_M=max(max(abs(u_low), abs(u_high)) * math.sqrt(dim), abs(sigma) * math.sqrt(dim)),
        params={"u_low": u_low, "u_high": u_high, "sigma": sigma},
        name="threshold-control",
    )


def crop_example(
    growth: float = 1.0,
    quality_gain: float = 0.6,
    competition: float = 0.5,
    coupling: float = 0.3,
    sigma_biomass: float = 0.2,
    sigma_quality: float = 0.0,
    u_max: float = 1.0,
) -> CoefficientModel:
    """Two field characteristics (biomass, quality) driven by fertiliser ``u``.

    * biomass: ``growth * u - competition * tanh(x1 - mean1)`` -- plots above
      the field average compete for water and light;
    * quality: ``quality_gain * u - coupling * tanh(x2 - x1)`` -- quality is
      pulled toward biomass.

    Weather enters through the common noise on biomass (and optionally quality).
    """

    def b(t, x, mu, u):
        m1 = mu.mean()[0]
        out = np.empty_like(x)
        out[:, 0] = growth * u[:, 0] - competition * np.tanh(x[:, 0] - m1)
        out[:, 1] = quality_gain * u[:, 0] - coupling * np.tanh(x[:, 1] - x[:, 0])
        return out

    def a(t, x, mu, u):
        out = np.zeros((x.shape[0], 2, 2))
        out[:, 0, 0] = sigma_biomass
        out[:, 1, 1] = sigma_quality
        return out

    drift_bound = math.hypot(growth * u_max + competition, quality_gain * u_max + coupling)
    return CoefficientModel(
        b, a, dim=2, control_box=[(0.0, u_max)],
        lipschitz_L=competition + math.sqrt(2.0) * coupling,
        bound_M=max(drift_bound, math.hypot(sigma_biomass, sigma_quality)),
        params={
            "growth": growth, "quality_gain": quality_gain, "competition": competition,
            "coupling": coupling, "sigma_biomass": sigma_biomass, "sigma_quality": sigma_quality,
            "u_max": u_max,
        },
        name="crop-example",
    )
