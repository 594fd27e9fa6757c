import math

import numpy as np
import pytest
from pytest import approx

from errors import SupportViolation
from fieldkernel import DispersionSpec, StandardCutoff
from potentials import gaussian_well
from quadrature import ball_rule
from scattering import (ScatteringProblem, ScatteringSolution, build_variable_mass_cutoff, decay_constant,
                        diagonal_cell, evaluate_psi, free_kernel, helmholtz_residual, psi_gradient,
                        radial_decay_scan, read_tables, solve_ls, write_tables)

K = [1.0, 0.0, 0.0]


def weak_well(h=0.5):
    return ScatteringProblem(gaussian_well(0.5, 1.0, 3, truncate=2.0), K, h)


def amplitude(sol, problem, k_out):
    """sum_y e^{-i k_out y} v(y) Psi(y) h^3 on the lattice."""
    points = problem.points
    weights = problem.v(points) * sol.psi_on_grid.reshape(-1) * problem.h ** 3
    return complex(np.exp(-1j * (points @ np.asarray(k_out))) @ weights)


def test_problem_validation():
    with pytest.raises(ValueError):
        ScatteringProblem(gaussian_well(1.0, 1.0, 3), K, 0.5)
    with pytest.raises(ValueError):
        ScatteringProblem(gaussian_well(1.0, 1.0, 3, truncate=2.0), [0.0, 0.0, 0.0], 0.5)
    with pytest.raises(ValueError):
        ScatteringProblem(gaussian_well(1.0, 1.0, 3, truncate=2.0), K, 0.5, half_width=1.0)
    with pytest.raises(ValueError):
        solve_ls(weak_well(), method="jacobi")


def test_zero_potential_gives_the_plane_wave():
    problem = ScatteringProblem(gaussian_well(0.0, 1.0, 3, truncate=1.0), K, 0.5)
    sol = solve_ls(problem)
    assert np.array_equal(sol.psi_on_grid.reshape(-1), np.exp(1j * problem.points[:, 0]))
    far = np.array([[7.0, 1.0, -2.0]])
    assert evaluate_psi(sol, problem, far)[0] == np.exp(7.0j)
    assert decay_constant(sol, problem, far) == 0.0


def test_weak_well_born_and_collocation_agree():
    problem = weak_well()
    born = solve_ls(problem, method="born")
    dense = solve_ls(problem, method="collocation")
    assert born.method == "born" and dense.method == "collocation"
    assert born.born_norm < 1.0
    assert born.residual_norm < 1e-6
    assert dense.residual_norm < 1e-6
    assert np.max(np.abs(born.psi_on_grid - dense.psi_on_grid)) < 1e-6
    assert solve_ls(problem).method == "born"


def test_reciprocity_on_the_lattice():
    v = gaussian_well(1.0, 1.0, 3, center=(0.5, 0.0, 0.0), truncate=1.5)
    k_in, k_out = np.array([1.0, 0.0, 0.0]), np.array([0.0, 0.6, 0.8])
    problem = ScatteringProblem(v, k_in, 0.5)
    forward = amplitude(solve_ls(problem, method="collocation"), problem, k_out)
    reverse_problem = problem.with_k(-k_out)
    reverse = amplitude(solve_ls(reverse_problem, method="collocation"), reverse_problem, -k_in)
    assert abs(forward - reverse) < 1e-8 * abs(forward)


def test_diagonal_cell_small_kappa_limit():
    h = 0.5
    a = (3.0 / (4.0 * math.pi)) ** (1.0 / 3.0) * h
    assert abs(diagonal_cell(1e-3, h) - (-0.5 * a ** 2)) < 1e-4


def test_grid_refinement_moves_the_scattered_wave_little():
    far = np.array([[6.0, 0.0, 0.0], [0.0, 6.0, 0.0], [-6.0, 0.0, 0.0]])
    plane = np.exp(1j * far[:, 0])
    coarse_problem, fine_problem = weak_well(0.5), weak_well(0.25)
    coarse = evaluate_psi(solve_ls(coarse_problem), coarse_problem, far) - plane
    fine = evaluate_psi(solve_ls(fine_problem), fine_problem, far) - plane
    assert np.max(np.abs(coarse - fine)) < 0.25 * np.max(np.abs(fine))


def test_scattered_wave_decays_like_one_over_r():
    problem = weak_well()
    sol = solve_ls(problem)
    axes = np.vstack([np.eye(3), -np.eye(3)])
    near = decay_constant(sol, problem, 10.0 * axes)
    far = decay_constant(sol, problem, 20.0 * axes)
    assert near > 0.0
    assert far == approx(near, rel=0.2)


def test_helmholtz_residual_of_the_plane_wave_is_the_stencil_error():
    h = 0.5
    problem = ScatteringProblem(gaussian_well(0.0, 1.0, 3, truncate=1.0), K, h)
    expected = abs((2.0 - 2.0 * math.cos(h)) / h ** 2 - 1.0)
    assert helmholtz_residual(solve_ls(problem), problem) == approx(expected, rel=1e-9)


def test_gradient_matches_finite_differences():
    problem = weak_well()
    sol = solve_ls(problem)
    x = np.array([3.1, 0.4, -0.7])
    step = 1e-4
    grad = psi_gradient(sol, problem, x[None, :])[0]
    for mu in range(3):
        e = np.zeros(3)
        e[mu] = step
        fd = (evaluate_psi(sol, problem, (x + e)[None, :])[0]
              - evaluate_psi(sol, problem, (x - e)[None, :])[0]) / (2.0 * step)
        assert abs(grad[mu] - fd) < 1e-6


def test_tables_need_k_min():
    problem = weak_well()
    with pytest.raises(SupportViolation):
        build_variable_mass_cutoff(problem, StandardCutoff(3, 1.0), DispersionSpec(3, 1.0), 2)


def small_tables(depth):
    problem = ScatteringProblem(gaussian_well(depth, 1.0, 3, truncate=1.0), K, 0.5)
    cutoff = StandardCutoff(3, 1.0, omega_power=0.5, k_min=0.5)
    disp = DispersionSpec(3, 1.0)
    return problem, cutoff, disp, build_variable_mass_cutoff(problem, cutoff, disp, 2)


def test_zero_potential_tables_are_the_plane_wave_cutoff():
    problem, cutoff, disp, tables = small_tables(0.0)
    modes = cutoff.modes(disp, 2)
    M = len(modes)
    assert np.allclose(tables.table.reshape(M, -1, 3, 2), cutoff.rho(modes, problem.points), atol=1e-12)
    model = tables.to_model(cutoff)
    outside = np.array([[5.0, 0.0, 0.0]])
    assert np.array_equal(model.rho(modes, outside), cutoff.rho(modes, outside))
    assert np.allclose(model.rho(modes, problem.points[:7]), cutoff.rho(modes, problem.points[:7]), atol=1e-12)


def test_tables_survive_csv(tmp_path):
    _, _, _, tables = small_tables(0.5)
    write_tables(tables, tmp_path / "tables.csv", tmp_path / "tables.header.json")
    loaded = read_tables(tmp_path / "tables.csv", tmp_path / "tables.header.json")
    assert np.array_equal(loaded.table, tables.table)
    assert np.array_equal(loaded.k_nodes, tables.k_nodes)
    assert loaded.header["h"] == 0.5


def free_problem(h):
    return ScatteringProblem(gaussian_well(0.0, 1.0, 3, truncate=1.0), K, h, half_width=2.0)


def test_helmholtz_residual_drops_fourfold_per_halving():
    residuals = []
    for h in (0.5, 0.25, 0.125):
        problem = free_problem(h)
        residuals.append(helmholtz_residual(solve_ls(problem), problem))
    for coarse, fine in zip(residuals[:-1], residuals[1:]):
        assert 3.8 < coarse / fine < 4.2


def test_helmholtz_residual_flags_a_random_field():
    problem = free_problem(0.5)
    sol = solve_ls(problem)
    rng = np.random.default_rng(11)
    noise = np.exp(2j * math.pi * rng.random(problem.shape))
    assert helmholtz_residual(sol, problem, psi=noise) > 100.0 * helmholtz_residual(sol, problem)


def test_first_born_term_matches_quadrature():
    v = gaussian_well(0.5, 1.0, 3, truncate=3.0)
    problem = ScatteringProblem(v, K, 0.25)
    plane = ScatteringSolution(np.exp(1j * (problem.points @ problem.k)).reshape(problem.shape), "born", 0,
                               1.0, 0.0, 0.0)
    x = np.array([[6.0, 1.0, 0.0]])
    lattice = evaluate_psi(plane, problem, x)[0] - np.exp(6.0j)
    points, weights, _ = ball_rule(3, 0.0, 3.0, 40)
    oracle = np.sum(weights * free_kernel(x, points, problem.kappa) * v(points) * np.exp(1j * (points @ problem.k)))
    assert abs(lattice - oracle) < 1e-2 * abs(oracle)


def test_radial_decay_scan():
    problem = weak_well()
    sol = solve_ls(problem)
    scan = radial_decay_scan(sol, problem, (10.0, 20.0), n_dirs=16)
    assert [R for R, _ in scan] == [10.0, 20.0]
    assert scan[1][1] == approx(scan[0][1], rel=0.2)
    empty = ScatteringProblem(gaussian_well(0.0, 1.0, 3, truncate=1.0), K, 0.5)
    assert radial_decay_scan(solve_ls(empty), empty, (10.0,)) == [(10.0, 0.0)]
