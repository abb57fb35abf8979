import math

import numpy as np
import pytest
import sympy as sp

from quenched.dynamics import (
    CoefficientModel,
    CommonNoisePath,
    ControlPolicy,
    bang_bang_control,
    check_h1,
    constant_control,
    default_control_family,
    feedback_control,
    measure_feedback_control,
    read_trajectories_csv,
    sample_initial,
    sample_path,
    simulate_ensemble,
    stability_probe,
    uniform_grid,
    write_trajectories_csv,
)
from quenched.errors import InvalidInputError, NumericBlowupError
from quenched.measures import EmpiricalMeasure, wasserstein2
from quenched.models import constant, crop_example, linear_drift, mean_field_ou, ou_exact_terminal, threshold_control

NO_CONTROL = constant_control([0.0], [(0.0, 0.0)])


def ou_closed_form(xi, theta, sigma, elapsed, b_increment):
    # conditional mean follows the common noise; deviations contract at rate theta
    m0 = xi.mean(axis=0)
    return m0 + sigma * b_increment + np.exp(-theta * elapsed) * (xi - m0)


def test_ou_closed_form_solves_the_dynamics_symbolically():
    s, t, theta, sigma, c, m_t = sp.symbols("s t theta sigma c m_t", real=True)
    B = sp.Function("B")
    m_s = m_t + sigma * (B(s) - B(t))
    X = m_s + sp.exp(-theta * (s - t)) * c
    # dX = sigma dB + theta (m - X) ds: the ds-part of dX minus the dB-part
    ds_part = sp.diff(X, s) - sigma * sp.diff(B(s), s)
    assert sp.simplify(ds_part - theta * (m_s - X)) == 0
    assert X.subs(s, t) == m_t + c


# --------------------------------------------------------------------------- paths


def test_zero_length_grid_has_no_increments():
    path = sample_path([0.0], seed=1)
    assert path.n_steps == 0 and path.values().shape == (1, 1)


def test_paths_deterministic_in_grid_and_seed():
    grid = uniform_grid(0, 1, 20)
    a, b = sample_path(grid, 5, 2, 3), sample_path(grid, 5, 2, 3)
    assert np.array_equal(a.increments, b.increments)
    assert not np.array_equal(a.increments, sample_path(grid, 6, 2, 3).increments)
    assert not np.array_equal(a.increments, sample_path(grid, 5, 2, 4).increments)


@pytest.mark.parametrize("grid", [[0.0, 0.5, 0.5], [1.0, 0.0], [0.0, np.nan]])
def test_non_monotone_grid_rejected(grid):
    with pytest.raises(InvalidInputError):
        sample_path(grid, 0)


def test_increment_statistics_within_clt_bands():
    dt, M, K = 0.01, 10_000, 8
    grid = uniform_grid(0, K * dt, K)
    inc = np.stack([sample_path(grid, 42, 1, m).increments[:, 0] for m in range(M)])
    assert np.all(np.abs(inc.mean(axis=0)) <= 5 * math.sqrt(dt / M))
    # variance of a sample variance of N(0, dt): 2 dt^2 / M
    assert np.all(np.abs(inc.var(axis=0) - dt) <= 5 * dt * math.sqrt(2 / M))
    cross = (inc[:, :-1] * inc[:, 1:]).mean(axis=0)
    assert np.all(np.abs(cross) <= 5 * dt / math.sqrt(M))


def test_coarsen_and_tail_preserve_values():
    path = sample_path(uniform_grid(0, 1, 12), 3, 2)
    coarse = path.coarsen(3)
    assert np.allclose(coarse.values(), path.values()[::3], atol=1e-15)
    tail = path.tail(0.5)
    assert tail.grid[0] == 0.5 and tail.n_steps == 6
    with pytest.raises(InvalidInputError):
        path.coarsen(5)


def test_path_npz_round_trip(tmp_path):
    path = sample_path(uniform_grid(0, 1, 7), 9, 2, (1, 2))
    path.save(tmp_path / "p.npz")
    back = CommonNoisePath.load(tmp_path / "p.npz")
    assert np.array_equal(back.increments, path.increments) and back.index == (1, 2) and back.seed == 9


# --------------------------------------------------------------------------- simulation examples


def test_frozen_dynamics_keep_states():
    model = constant([0.0], [[0.0]])
    mu = sample_initial("gaussian", 10, 1)
    traj = simulate_ensemble(model, NO_CONTROL, 0.0, mu, sample_path(uniform_grid(0, 1, 10), 0))
    assert np.array_equal(traj.states[-1], mu.points)


@pytest.mark.parametrize("K", [1, 7, 64])
def test_additive_noise_translates_the_law(K):
    sigma = 0.7
    model = constant([0.0], [[sigma]])
    mu = sample_initial("gaussian", 50, 2)
    path = sample_path(uniform_grid(0, 1, K), 3)
    term = simulate_ensemble(model, NO_CONTROL, 0.0, mu, path).terminal
    assert wasserstein2(term, mu.shifted(sigma * path.values()[-1])) <= 1e-12


def test_start_time_must_be_on_grid():
    model = constant([1.0], [[0.0]])
    path = sample_path(uniform_grid(0, 1, 10), 0)
    with pytest.raises(InvalidInputError):
        simulate_ensemble(model, NO_CONTROL, 0.05, EmpiricalMeasure([0.0]), path)


def test_dimension_checks():
    model = constant([1.0, 0.0], [[0.0, 0.0], [0.0, 0.0]])
    path = sample_path(uniform_grid(0, 1, 4), 0, dim=2)
    with pytest.raises(InvalidInputError):
        simulate_ensemble(model, NO_CONTROL, 0.0, EmpiricalMeasure([0.0]), path)


def test_blowup_reports_step():
    model = CoefficientModel(lambda t, x, mu, u: x**2, lambda t, x, mu, u: np.zeros((len(x), 1, 1)), 1, [(0, 0)])
    path = sample_path(uniform_grid(0, 10, 20), 0)
    with pytest.raises(NumericBlowupError) as info, np.errstate(over="ignore"):
        simulate_ensemble(model, NO_CONTROL, 0.0, EmpiricalMeasure([1e10]), path)
    assert info.value.step >= 0


def test_ou_matches_closed_form_and_converges_at_first_order():
    theta, sigma = 1.0, 0.5
    model = mean_field_ou(theta, sigma)
    mu = sample_initial("gaussian", 512, 4)
    fine = sample_path(uniform_grid(0, 1, 800), 8)
    errors = []
    for factor in (4, 2, 1):
        path = fine.coarsen(factor)
        term = simulate_ensemble(model, NO_CONTROL, 0.0, mu, path).terminal
        exact = ou_closed_form(mu.points, theta, sigma, 1.0, path.values()[-1])
        errors.append(wasserstein2(term, EmpiricalMeasure(exact)))
    assert errors[-1] < 1e-3
    for coarse, finer in zip(errors, errors[1:]):
        assert 1.5 <= coarse / finer <= 3.0


def test_library_closed_form_agrees_with_oracle():
    xi = np.random.default_rng(0).standard_normal((20, 1))
    assert np.allclose(ou_exact_terminal(xi, 1.3, 0.4, 0.7, [0.2]), ou_closed_form(xi, 1.3, 0.4, 0.7, 0.2), atol=1e-15)


def test_ou_particle_count_convergence():
    theta, sigma = 1.0, 0.5
    model = mean_field_ou(theta, sigma)
    grid = uniform_grid(0, 1, 50)
    errs = {}
    for n in (256, 1024, 4096):
        total = 0.0
        for m in range(64):
            path = sample_path(grid, 21, 1, m)
            mu = EmpiricalMeasure(np.random.default_rng((n, m)).standard_normal(n))
            term = simulate_ensemble(model, NO_CONTROL, 0.0, mu, path).terminal
            fresh = np.random.default_rng((n, m, 1)).standard_normal((16384, 1))
            exact = ou_closed_form(fresh - fresh.mean() + 0.0, theta, sigma, 1.0, path.values()[-1])
            total += wasserstein2(term, EmpiricalMeasure(exact))
        errs[n] = total / 64
    assert errs[256] > errs[1024] > errs[4096]


# --------------------------------------------------------------------------- structural properties


def _feedback_scenario():
    model = crop_example()
    ctrl = feedback_control(lambda t, x, mu, inc: 0.5 + 0.5 * np.tanh(mu.mean()[1] - x[:, 1]), [(0.0, 1.0)])
    mu = sample_initial("gaussian", 40, 7, mean=[1.0, 0.5], std=[0.3, 0.2])
    path = sample_path(uniform_grid(0, 2, 40), 11, dim=2)
    return model, ctrl, mu, path


def test_simulation_is_bitwise_deterministic():
    model, ctrl, mu, path = _feedback_scenario()
    a = simulate_ensemble(model, ctrl, 0.0, mu, path)
    b = simulate_ensemble(model, ctrl, 0.0, mu, path)
    assert np.array_equal(a.states, b.states)


def test_exchangeability():
    model, ctrl, mu, path = _feedback_scenario()
    perm = np.random.default_rng(0).permutation(mu.n)
    base = simulate_ensemble(model, ctrl, 0.0, mu, path).states
    permuted = simulate_ensemble(model, ctrl, 0.0, mu.permuted(perm), path).states
    assert np.array_equal(permuted, base[:, perm])


def test_uniform_bound():
    model, ctrl, mu, path = _feedback_scenario()
    states = simulate_ensemble(model, ctrl, 0.0, mu, path).states
    M = model.bound_M
    bound = np.linalg.norm(mu.points, axis=1).max() + M * 2.0 + M * np.linalg.norm(path.increments, axis=1).sum()
    assert np.linalg.norm(states, axis=2).max() <= bound


def test_ensemble_view():
    model, ctrl, mu, path = _feedback_scenario()
    traj = simulate_ensemble(model, ctrl, 0.0, mu, path)
    ens = traj[5]
    assert ens.time == traj.times[5] and ens.path_ref == path.ref
    assert np.array_equal(ens.initial_draws, mu.points)
    assert ens.as_measure().n == mu.n and len(list(traj)) == len(traj)


def test_start_midway_uses_tail_of_path():
    model = constant([1.0], [[1.0]])
    path = sample_path(uniform_grid(0, 1, 10), 2)
    traj = simulate_ensemble(model, NO_CONTROL, 0.5, EmpiricalMeasure([0.0]), path)
    assert len(traj.times) == 6
    assert traj.states[-1, 0, 0] == pytest.approx(0.5 + path.increments[5:, 0].sum(), abs=1e-14)


# --------------------------------------------------------------------------- controls


def test_clamping_is_counted():
    ctrl = feedback_control(lambda t, x, mu, inc: 3 * x, [(-1.0, 1.0)])
    u, clamped = ctrl.evaluate(0.0, np.array([[0.1], [0.5], [-2.0]]), None)
    assert np.allclose(u[:, 0], [0.3, 1.0, -1.0]) and clamped == 2


def test_measure_feedback_ignores_state():
    ctrl = measure_feedback_control(lambda t, mu, inc: mu.mean(), [(-5.0, 5.0)])
    x = np.array([[0.0], [4.0]])
    u, _ = ctrl.evaluate(0.0, x, EmpiricalMeasure(x))
    assert np.array_equal(u, [[2.0], [2.0]])


def test_bang_bang_switches():
    ctrl = bang_bang_control([1.0], [0.0], 0.5, [(0.0, 1.0)])
    x = np.zeros((1, 1))
    assert ctrl.evaluate(0.49, x, None)[0][0, 0] == 1.0
    assert ctrl.evaluate(0.5, x, None)[0][0, 0] == 0.0


def test_default_family_shape():
    family = default_control_family([(0.0, 1.0), (-1.0, 1.0)], levels=[3, 2], switch_times=[0.5])
    assert len(family) == 3 * 2 + 2
    assert {tuple(c.value) for c in family if c.kind == "open-loop-constant"} >= {(0.5, -1.0), (1.0, 1.0)}


def test_unknown_control_kind():
    with pytest.raises(InvalidInputError):
        ControlPolicy("magic", [(0, 1)], fn=lambda *a: 0)


# --------------------------------------------------------------------------- samplers and IO


def test_samplers():
    g = sample_initial("gaussian", 1000, 1, mean=[2.0, -1.0], std=0.5)
    assert g.d == 2 and np.allclose(g.mean(), [2.0, -1.0], atol=0.1)
    u = sample_initial("uniform-box", 100, 1, low=[0, 0], high=[1, 2])
    assert (u.points >= 0).all() and (u.points[:, 1] <= 2).all()
    p = sample_initial("discrete-points", 5, 0, points=[[0.0], [1.0]])
    assert p.points[:, 0].tolist() == [0, 1, 0, 1, 0]
    with pytest.raises(InvalidInputError):
        sample_initial("cauchy", 3)


def test_draw_seed_independent_of_path_seed():
    a = sample_initial("gaussian", 8, 3)
    b = sample_initial("gaussian", 8, 3)
    assert np.array_equal(a.points, b.points)
    assert not np.array_equal(a.points, sample_path(uniform_grid(0, 1, 8), 3).increments.T)


def test_trajectory_csv_round_trip(tmp_path):
    model, ctrl, mu, path = _feedback_scenario()
    trajs = [simulate_ensemble(model, ctrl, 0.0, mu, path), simulate_ensemble(model, ctrl, 1.0, mu, path)]
    write_trajectories_csv(tmp_path / "t.csv", trajs)
    header = (tmp_path / "t.csv").read_text().splitlines()[0]
    assert header == "path_id,step,time,particle,x_1,x_2"
    back = read_trajectories_csv(tmp_path / "t.csv")
    assert np.array_equal(back[0], trajs[0].states) and np.array_equal(back[1], trajs[1].states)


# --------------------------------------------------------------------------- stability


def test_stability_zero_perturbation_is_zero():
    model = mean_field_ou()
    rows = stability_probe(model, NO_CONTROL, 0.0, sample_initial("gaussian", 32, 0), [0.0], uniform_grid(0, 1, 20))
    assert rows[0].mean_w2_sq == 0.0


def test_stability_frozen_dynamics_shift():
    model = constant([0.0], [[0.0]])
    rows = stability_probe(model, NO_CONTROL, 0.0, sample_initial("gaussian", 32, 0), [0.5, 0.1],
                           uniform_grid(0, 1, 10), n_paths=4)
    assert [r.mean_w2_sq for r in rows] == pytest.approx([0.25, 0.01], abs=1e-14)


def test_stability_ou_shift_is_preserved_by_the_mean():
    # a uniform shift moves the conditional mean, which is a martingale under this drift
    model = mean_field_ou(1.0, 0.5)
    grid = uniform_grid(0, 1, 100)
    rows = stability_probe(model, NO_CONTROL, 0.0, sample_initial("gaussian", 64, 0), [0.2, 0.1, 0.05], grid)
    for r in rows:
        assert r.mean_w2_sq == pytest.approx(r.size**2, rel=1e-9)


def test_stability_ou_spread_contracts():
    theta, K = 1.0, 100
    model = mean_field_ou(theta, 0.5)
    grid = uniform_grid(0, 1, K)
    rows = stability_probe(model, NO_CONTROL, 0.0, sample_initial("gaussian", 64, 0), [0.2, 0.1, 0.05], grid,
                           perturb="spread")
    factor = (1 - theta / K) ** (2 * K)
    for r in rows:
        assert r.mean_w2_sq == pytest.approx(r.size**2 * factor, rel=1e-9)
    assert factor == pytest.approx(math.exp(-2 * theta), rel=0.02)
    assert rows[0].mean_w2_sq > rows[1].mean_w2_sq > rows[2].mean_w2_sq


def test_stability_worker_count_invariant():
    model, ctrl, mu, path = _feedback_scenario()
    grid = path.grid
    one = stability_probe(model, ctrl, 0.0, mu, [0.1], grid, n_paths=6, workers=1)
    many = stability_probe(model, ctrl, 0.0, mu, [0.1], grid, n_paths=6, workers=4)
    assert one == many


def test_stability_start_time():
    model = threshold_control(sigma=0.0)
    ctrl = constant_control([1.0], model.control_box)
    rows = stability_probe(model, ctrl, 0.0, sample_initial("gaussian", 16, 0), [0.1], uniform_grid(0, 1, 10),
                           perturb="start-time", n_paths=2)
    assert rows[0].mean_w2_sq == pytest.approx(0.01, abs=1e-12)


# --------------------------------------------------------------------------- (H1)


def test_check_h1_constant_coefficients():
    rep = check_h1(constant([1.0, 2.0], [[0.5, 0], [0, 0.5]]), budget=100)
    assert rep.max_lipschitz_ratio == 0.0 and rep.lipschitz_ok and rep.bound_ok


def test_check_h1_clipped_identity():
    rep = check_h1(linear_drift([[1.0]], clip=2.0), budget=300)
    assert rep.max_lipschitz_ratio <= 1.0 + 1e-12 and rep.lipschitz_ok and rep.bound_ok


def test_check_h1_ou_ratios():
    rep = check_h1(mean_field_ou(theta=2.0), budget=400)
    assert rep.max_x_ratio == pytest.approx(2.0, rel=1e-9)
    assert rep.max_mu_ratio == pytest.approx(2.0, rel=1e-9)
    assert rep.max_lipschitz_ratio <= 2.0 * (1 + 1e-12) and rep.lipschitz_ok
