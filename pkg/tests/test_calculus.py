import math

import numpy as np
import pytest
import sympy as sp
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

import cylinders
from quenched.calculus import (
    MeasureFunction,
    chain_rule_residual,
    constant_function,
    d2_action_quadrature,
    fd_d2_action,
    fd_dmu,
    fd_dmu_all,
    generator_terms,
    lift_eval,
    linear_mean,
    mean_squared,
    second_moment,
    smootherstep,
    threshold_barrier,
)
from quenched.dynamics import constant_control, sample_path, simulate_ensemble, uniform_grid
from quenched.errors import InvalidInputError
from quenched.measures import EmpiricalMeasure
from quenched.models import constant, mean_field_ou, threshold_control

NO_CONTROL = constant_control([0.0], [(0.0, 0.0)])


def integral_of_square():
    return second_moment(1)


# --------------------------------------------------------------------------- examples


def test_lift_examples():
    assert lift_eval(linear_mean([1.0]), 0.0, np.array([[0.0], [2.0]])) == 1.0
    assert lift_eval(linear_mean([1.0]), 0.0, np.array([[2.0], [0.0]])) == 1.0
    assert lift_eval(mean_squared([1.0]), 0.0, EmpiricalMeasure([1.0, 3.0])) == 4.0


def test_fd_dmu_examples():
    assert fd_dmu(linear_mean([1.0]), 0.0, EmpiricalMeasure([0.0, 2.0]), 0)[0] == pytest.approx(1.0, abs=1e-9)
    assert fd_dmu(integral_of_square(), 0.0, EmpiricalMeasure([3.0, -1.0]), 0)[0] == pytest.approx(6.0, abs=1e-8)
    assert fd_dmu(mean_squared([1.0]), 0.0, EmpiricalMeasure([1.0, 3.0]), 1)[0] == pytest.approx(4.0, abs=1e-8)


def test_fd_second_difference_examples():
    mu = EmpiricalMeasure([1.0, 3.0])
    ones = np.ones((2, 1))
    assert fd_d2_action(linear_mean([1.0]), 0.0, mu, ones) == pytest.approx(0.0, abs=1e-6)
    assert fd_d2_action(mean_squared([1.0]), 0.0, mu, ones) == pytest.approx(2.0, abs=1e-6)
    assert fd_d2_action(integral_of_square(), 0.0, mu, ones) == pytest.approx(2.0, abs=1e-6)


def test_nonpositive_step_rejected():
    mu = EmpiricalMeasure([1.0, 3.0])
    with pytest.raises(InvalidInputError):
        fd_dmu(linear_mean([1.0]), 0.0, mu, 0, h=0.0)
    with pytest.raises(InvalidInputError):
        fd_d2_action(linear_mean([1.0]), 0.0, mu, np.ones(2), h=-1.0)


def test_constant_function_has_zero_derivatives():
    w = constant_function(2.5)
    mu = EmpiricalMeasure(np.arange(6.0).reshape(3, 2))
    assert w(0.0, mu) == 2.5
    assert not w.d_mu(0.0, mu, mu.points).any()
    assert d2_action_quadrature(w, 0.0, mu, np.ones((3, 2))) == 0.0


def test_smootherstep_ramp():
    s = np.array([-1.0, 0.0, 0.5, 1.0, 2.0])
    value, slope, curvature = smootherstep(s)
    assert np.allclose(value, [0.0, 0.0, 0.5, 1.0, 1.0])
    assert np.allclose(slope, [0.0, 0.0, 1.875, 0.0, 0.0])
    assert np.allclose(curvature, 0.0)


def test_barrier_is_one_inside_and_zero_far_away():
    w = threshold_barrier([1.0], kappa=1.0, horizon=1.0, eps=0.05)
    assert w(1.0, EmpiricalMeasure([2.0])) == 0.0
    assert w(0.0, EmpiricalMeasure([-5.0])) == 1.0


# --------------------------------------------------------------------------- symbolic check of the cylindrical formulas


@pytest.mark.parametrize("name", ["sin-times-square", "log-tanh", "gaussian-bump"])
def test_cylindrical_derivatives_match_symbolic_lift(name):
    n, d = 3, 2
    phi, inner, m, xs = cylinders.symbolic(name, d)
    X = sp.Matrix(n, d, lambda i, p: sp.Symbol(f"X{i}_{p}", real=True))
    moments = [sum(f.subs(dict(zip(xs, X.row(i)))) for i in range(n)) / n for f in inner]
    W = phi.subs(dict(zip(m, moments)))
    flat = list(X)
    grad = sp.lambdify(flat, [sp.diff(W, v) for v in flat])
    hess = sp.lambdify(flat, sp.hessian(W, flat))

    pts = np.array([[0.3, -0.8], [1.1, 0.4], [-0.5, 0.9]])
    w = {f.name: f for f in cylinders.family(d)}[name]
    mu = EmpiricalMeasure(pts)
    vals = list(pts.ravel())

    got_grad = n * np.array(grad(*vals)).reshape(n, d)
    assert np.allclose(w.d_mu(0.0, mu, pts), got_grad, rtol=1e-12, atol=1e-12)

    H = np.array(hess(*vals), dtype=float).reshape(n, d, n, d).transpose(0, 2, 1, 3)
    local = w.dx_d_mu(0.0, mu, pts)
    cross = w.d2_mu(0.0, mu, pts, pts)
    expected = cross / n**2
    expected[np.arange(n), np.arange(n)] += local / n
    assert np.allclose(H, expected, rtol=1e-10, atol=1e-12)


# --------------------------------------------------------------------------- finite differences against analytic derivatives


def cloud(max_n=12, max_d=3):
    return st.integers(1, max_d).flatmap(
        lambda d: arrays(np.float64, st.tuples(st.integers(1, max_n), st.just(d)), elements=st.floats(-2, 2))
    )


@settings(max_examples=25, deadline=None)
@given(cloud())
def test_fd_measure_derivative_matches_analytic(pts):
    mu = EmpiricalMeasure(pts)
    for w in cylinders.family(mu.d):
        exact = w.d_mu(0.0, mu, pts)
        fd = fd_dmu_all(w, 0.0, mu)
        scale = max(1.0, float(np.abs(exact).max()))
        assert np.abs(fd - exact).max() <= 1e-6 * scale, w.name


@settings(max_examples=25, deadline=None)
@given(cloud(), st.integers(0, 2**31 - 1))
def test_fd_second_action_matches_quadrature(pts, seed):
    mu = EmpiricalMeasure(pts)
    Y = np.random.default_rng(seed).standard_normal(pts.shape)
    for w in cylinders.family(mu.d):
        exact = d2_action_quadrature(w, 0.0, mu, Y)
        fd = fd_d2_action(w, 0.0, mu, Y)
        scale = max(1.0, abs(exact), float(np.mean(np.sum(Y * Y, axis=1))))
        assert abs(fd - exact) <= 1e-4 * scale, w.name


@settings(max_examples=20, deadline=None)
@given(cloud(max_n=8))
def test_second_measure_derivative_is_symmetric(pts):
    mu = EmpiricalMeasure(pts)
    for w in cylinders.family(mu.d):
        M = w.d2_mu(0.0, mu, pts, pts)
        assert np.allclose(M, M.transpose(1, 0, 3, 2), atol=1e-12)


@settings(max_examples=20, deadline=None)
@given(cloud(max_n=8), st.integers(1, 3), st.integers(0, 2**31 - 1))
def test_fast_quadratic_action_matches_generic_sum(pts, r, seed):
    mu = EmpiricalMeasure(pts)
    G = np.random.default_rng(seed).standard_normal((mu.n, mu.d, r))
    for w in cylinders.family(mu.d):
        generic = MeasureFunction(w.value, w.d_t, w.d_mu, w.dx_d_mu, w.d2_mu)
        assert w.double_trace(0.0, mu, G) == pytest.approx(generic.double_trace(0.0, mu, G), rel=1e-10, abs=1e-12)


@settings(max_examples=20, deadline=None)
@given(cloud(max_n=10), st.integers(0, 2**31 - 1))
def test_measure_functions_are_permutation_invariant(pts, seed):
    order = np.random.default_rng(seed).permutation(len(pts))
    a, b = EmpiricalMeasure(pts), EmpiricalMeasure(pts[order])
    for w in cylinders.family(a.d):
        assert w(0.0, a) == w(0.0, b)


# --------------------------------------------------------------------------- chain rule


def test_generator_terms_for_mean_squared_with_constant_drift():
    model = threshold_control(1, -1.0, 1.0, sigma=0.5)
    x = np.array([[0.0], [2.0]])
    terms = generator_terms(mean_squared([1.0]), 0.0, x, np.full((2, 1), 0.5), model)
    assert terms.drift_term == pytest.approx(2 * 1.0 * 0.5)
    assert terms.trace_term == 0.0
    assert terms.double_term == pytest.approx(0.5 * 0.25 * 2)
    assert terms.noise_vector == pytest.approx([2 * 1.0 * 0.5])


def test_chain_rule_exact_for_linear_mean():
    grid = uniform_grid(0, 1, 200)
    mu = EmpiricalMeasure(np.random.default_rng(0).standard_normal(32))
    traj = simulate_ensemble(mean_field_ou(1.5, 0.7), NO_CONTROL, 0.0, mu, sample_path(grid, 3))
    assert chain_rule_residual(linear_mean([1.0]), traj, mean_field_ou(1.5, 0.7)).max <= 1e-10


def test_chain_rule_residual_zero_for_frozen_dynamics():
    model = constant([0.0], [[0.0]])
    mu = EmpiricalMeasure(np.random.default_rng(1).standard_normal(16))
    traj = simulate_ensemble(model, NO_CONTROL, 0.0, mu, sample_path(uniform_grid(0, 1, 50), 2))
    for w in cylinders.family(1):
        assert chain_rule_residual(w, traj, model).max <= 1e-12


@pytest.mark.parametrize("u,sigma", [(1.0, 0.5), (0.5, 1.0), (-1.0, 0.3)])
def test_mean_squared_residual_has_closed_form(u, sigma):
    # per step the discrepancy is u^2 dt^2 + 2 u sigma dt dB
    model = threshold_control(1, -1.0, 1.0, sigma=sigma)
    fine = sample_path(uniform_grid(0, 1, 400), 9)
    B_T = fine.values()[-1, 0]
    mu = EmpiricalMeasure(np.random.default_rng(4).standard_normal(16))
    for factor in (1, 2, 4):
        path = fine.coarsen(factor)
        dt = 1.0 / path.n_steps
        traj = simulate_ensemble(model, constant_control([u], [(-1.0, 1.0)]), 0.0, mu, path)
        res = chain_rule_residual(mean_squared([1.0]), traj, model)
        assert res.terminal == pytest.approx(dt * abs(u * u + 2 * u * sigma * B_T), rel=1e-8)


def test_mean_squared_residual_is_first_order_with_realized_bracket():
    model = threshold_control(1, -1.0, 1.0, sigma=0.5)
    control = constant_control([1.0], [(-1.0, 1.0)])
    mu = EmpiricalMeasure(np.random.default_rng(5).standard_normal(16))
    fine = sample_path(uniform_grid(0, 1, 1000), 11)
    res = [chain_rule_residual(mean_squared([1.0]), simulate_ensemble(model, control, 0.0, mu, fine.coarsen(f)), model).terminal
           for f in (4, 2, 1)]
    assert 1.5 <= res[0] / res[1] <= 3 and 1.5 <= res[1] / res[2] <= 3


def test_dt_bracket_residual_decays_like_square_root():
    model = threshold_control(1, -1.0, 1.0, sigma=1.0)
    control = constant_control([0.0], [(-1.0, 1.0)])
    mu = EmpiricalMeasure([0.0, 1.0])
    means = np.zeros(3)
    for m in range(128):
        fine = sample_path(uniform_grid(0, 1, 400), 21, 1, m)
        for j, f in enumerate((4, 2, 1)):
            traj = simulate_ensemble(model, control, 0.0, mu, fine.coarsen(f))
            means[j] += chain_rule_residual(mean_squared([1.0]), traj, model, quadratic_variation="dt").terminal
    ratios = means[:-1] / means[1:]
    assert np.all((ratios > 1.15) & (ratios < 1.75)), ratios


def test_residual_is_invariant_under_particle_relabelling():
    model = mean_field_ou(2.0, 0.5)
    pts = np.random.default_rng(6).standard_normal(24)
    path = sample_path(uniform_grid(0, 1, 100), 12)
    w = second_moment(1)
    a = chain_rule_residual(w, simulate_ensemble(model, NO_CONTROL, 0.0, EmpiricalMeasure(pts), path), model)
    b = chain_rule_residual(w, simulate_ensemble(model, NO_CONTROL, 0.0, EmpiricalMeasure(pts[::-1]), path), model)
    assert np.allclose(a.residuals, b.residuals, rtol=1e-9, atol=1e-13)


def test_chain_rule_requires_derivatives_and_valid_bracket():
    model = constant([0.0], [[0.0]])
    traj = simulate_ensemble(model, NO_CONTROL, 0.0, EmpiricalMeasure([0.0]), sample_path(uniform_grid(0, 1, 4), 0))
    with pytest.raises(InvalidInputError):
        chain_rule_residual(MeasureFunction(lambda t, mu: 0.0), traj, model)
    with pytest.raises(InvalidInputError):
        chain_rule_residual(linear_mean([1.0]), traj, model, quadratic_variation="ito")


def test_residual_times_align_with_trajectory():
    model = mean_field_ou()
    traj = simulate_ensemble(model, NO_CONTROL, 0.0, EmpiricalMeasure([0.0, 1.0]), sample_path(uniform_grid(0, 1, 10), 0))
    res = chain_rule_residual(linear_mean([1.0]), traj, model)
    assert res.residuals.shape == (10,) and math.isclose(res.times[-1], 1.0)
