import math

import numpy as np
import pytest
from pytest import approx

from errors import AlphaTooLarge, QuadratureFailure
from potentials import (DecompositionHints, W_a, alpha_curve, alpha_t, beta_lp_estimate, build_potential,
                        composite, constant, coulomb, decompose_E, empirical_exp_moment, gaussian_well,
                        harmonic, kato_ball_norm, kato_report, khasminskii_bound, legal_p, lp_norm,
                        lp_uniform_norm, polynomial, sigma_liminf, sum_potentials)

ORIGIN3 = np.zeros((1, 3))


def test_legal_p():
    assert legal_p(1, 1.0)
    assert not legal_p(1, 2.0)
    assert legal_p(3, 2.0)
    assert not legal_p(3, 1.5)


def test_build_potential_from_table():
    V = build_potential({"form": "coulomb", "a": 1.0, "b": 1.0}, 3)
    assert V.singular_points == ((0.0, 0.0, 0.0),)
    assert V([[2.0, 0.0, 0.0]])[0] == approx(-0.5)
    with pytest.raises(ValueError):
        build_potential({"form": "yukawa"}, 3)
    with pytest.raises(ValueError):
        build_potential({"form": "coulomb", "a": 1.0}, 3)


def test_sum_keeps_regular_and_singular_parts():
    V = composite([0.0, 0.0, 1.0], 1.0, 1.0, 3)
    x = np.array([[0.5, 0.0, 0.0]])
    assert V(x)[0] == approx(0.25 - 2.0)
    assert V.regular is not None and V.singular is not None


def test_unit_potential_ball_norm_matches_closed_form():
    r = 0.1
    assert kato_ball_norm(constant(1.0, 3), r, ORIGIN3) == approx(2.0 * math.pi * r ** 2, rel=1e-3)


def test_zero_potential_ball_norm():
    assert kato_ball_norm(constant(0.0, 3), 0.1, ORIGIN3) == 0.0


def test_coulomb_ball_norms_shrink():
    V = coulomb(1.0, 1.0, 3)
    norms = [kato_ball_norm(V, r, ORIGIN3) for r in (0.1, 0.05, 0.025)]
    assert norms[0] > norms[1] > norms[2] > 0.0
    assert norms[0] == approx(4.0 * math.pi * 0.1, rel=1e-3)


def test_strong_coulomb_ball_norm_diverges():
    with pytest.raises(QuadratureFailure):
        kato_ball_norm(coulomb(1.0, 2.5, 3), 0.1, ORIGIN3)


def test_kato_verdicts(seed):
    assert kato_report(coulomb(1.0, 1.0, 3), seed, mc=200).verdict == "kato"
    assert kato_report(coulomb(1.0, 2.5, 3), seed, mc=200).verdict == "not_kato"
    assert kato_report(constant(0.0, 3), seed, mc=200).verdict == "kato"


def test_alpha_t_of_bounded_potential(seed):
    assert alpha_t(constant(2.0, 2), 0.3, np.zeros((1, 2)), 100, seed) == approx(0.6, rel=1e-12)
    assert alpha_t(constant(0.0, 2), 0.3, np.zeros((1, 2)), 100, seed) == 0.0


def test_alpha_curve_decreases_with_t(seed):
    curve = alpha_curve(coulomb(1.0, 1.0, 3), (0.2, 0.1, 0.05), ORIGIN3, 2000, seed)
    values = [a for _, a in curve]
    assert values[0] < values[1] < values[2]
    # E^0 int_0^t |B_s|^{-1} ds = 2 sqrt(2t/pi) in d=3
    assert values[2] == approx(2.0 * math.sqrt(0.4 / math.pi), rel=0.2)


def test_khasminskii_bound_arithmetic():
    assert khasminskii_bound(None, 1.0, 0.0, 5.0) == (1.0, 0.0, 1.0)
    gamma, beta, bound = khasminskii_bound(None, 1.0, 0.5, 2.0)
    assert gamma == approx(2.0)
    assert beta == approx(math.log(2.0))
    assert bound == approx(8.0)
    with pytest.raises(AlphaTooLarge):
        khasminskii_bound(None, 1.0, 1.0, 1.0)


def test_khasminskii_bounds_the_exponential_moment(seed):
    V = coulomb(1.0, 1.0, 3, cutoff=10.0)
    t_star = 0.02
    a = alpha_t(V, t_star, ORIGIN3, 4000, seed)
    _, _, bound = khasminskii_bound(V, t_star, a, 0.2)
    moment = empirical_exp_moment(V, 0.2, ORIGIN3, 4000, seed.offset(10 ** 6))
    assert moment.mean <= bound + 3.0 * moment.stderr


def test_beta_lp_estimate_is_linear_in_the_potential():
    V = gaussian_well(1.0, 1.0, 3, truncate=4.0)
    W = gaussian_well(2.0, 1.0, 3, truncate=4.0)
    assert beta_lp_estimate(W, p=2.0) == approx(2.0 * beta_lp_estimate(V, p=2.0), rel=1e-6)
    assert beta_lp_estimate(V, p=2.0, norm=0.0) == 0.0


def test_lp_norms():
    # ||1_{B_1}||_2 in d=3 is the square root of the ball volume
    V = build_potential({"form": "square_well", "depth": 1.0, "radius": 1.0}, 3)
    assert lp_norm(V, 2.0) == approx(math.sqrt(4.0 * math.pi / 3.0), rel=1e-4)
    assert lp_uniform_norm(V, 2.0, ORIGIN3) == approx(math.sqrt(4.0 * math.pi / 3.0), rel=1e-3)


def test_harmonic_decomposition_is_trivial():
    decomp = decompose_E(harmonic(1))
    assert decomp.U_p_norm == 0.0
    assert decomp.W_inf == approx(0.0, abs=1e-12)
    grid = decomp.grid
    assert np.array_equal(decomp.W(grid) + decomp.U(grid), decomp.V(grid))


def test_coulomb_spike_goes_into_U():
    V = composite([0.0, 0.0, 1.0], 1.0, 1.0, 3)
    decomp = decompose_E(V, DecompositionHints(spike_radius=1.0))
    # ||U||_2^2 = 4 pi int_0^1 s^-2 s^2 ds
    assert decomp.U_p_norm == approx(math.sqrt(4.0 * math.pi), rel=1e-3)
    finite = np.isfinite(V(decomp.grid))
    assert np.array_equal((decomp.W(decomp.grid) + decomp.U(decomp.grid))[finite], V(decomp.grid)[finite])
    assert decomp.W([[2.0, 0.0, 0.0]])[0] == approx(4.0 - 0.5)


def test_u_norm_cap_shrinks_the_spike():
    V = composite([0.0, 0.0, 1.0], 1.0, 1.0, 3)
    decomp = decompose_E(V, DecompositionHints(spike_radius=1.0, u_norm_cap=1.0))
    assert decomp.U_p_norm <= 1.0 + 1e-6
    assert decomp.spike_radius < 1.0


def test_W_a_on_a_parabola():
    decomp = decompose_E(polynomial([0.0, 0.0, 1.0], 1))
    assert W_a(decomp, [4.0], 2.0) == approx(4.0)
    assert W_a(decomp, [1.0], 2.0) == approx(0.0, abs=1e-12)
    flat = decompose_E(constant(1.5, 2))
    assert W_a(flat, [3.0, -1.0], 0.5) == 1.5


def test_sigma_liminf_of_shapes():
    confining = sigma_liminf(decompose_E(polynomial([0.0, 0.0, 1.0], 2)), (10.0, 20.0, 40.0))
    assert confining.unbounded and confining.sigma == math.inf
    assert sigma_liminf(decompose_E(constant(3.0, 2)), (10.0, 20.0)).sigma == 3.0
    dip = sum_potentials([constant(3.0, 2), gaussian_well(2.0, 1.0, 2)])
    estimate = sigma_liminf(decompose_E(dip), (5.0, 10.0))
    assert not estimate.unbounded
    assert estimate.sigma == approx(3.0, abs=1e-9)
    assert decompose_E(dip).W_inf < estimate.sigma


@pytest.mark.parametrize("t", [0.5, 1.0, 2.0])
def test_khasminskii_bound_holds_on_a_line_of_starting_points(seed, t):
    V = coulomb(1.0, 1.0, 3, cutoff=10.0)
    grid = np.column_stack([np.linspace(0.0, 1.9, 20), np.zeros(20), np.zeros(20)])
    t_star = 0.05
    a = alpha_t(V, t_star, grid, 2000, seed)
    assert a < 1.0
    _, _, bound = khasminskii_bound(V, t_star, a, t)
    moment = empirical_exp_moment(V, t, grid, 2000, seed.offset(10 ** 6))
    assert moment.mean <= bound + 3.0 * moment.stderr


def test_alpha_t_is_subadditive(seed):
    V = coulomb(1.0, 1.0, 3)
    grid = np.array([[0.0, 0.0, 0.0], [0.5, 0.0, 0.0], [1.0, 0.0, 0.0]])
    values = [a for _, a in alpha_curve(V, (0.05, 0.1, 0.15, 0.2), grid, 4000, seed)]
    # alpha at 0.05 * (i + 1)
    for i, j in ((0, 0), (0, 1), (1, 1)):
        assert values[i + j + 1] <= values[i] + values[j]
    flat = constant(1.5, 3)
    assert alpha_t(flat, 0.4, ORIGIN3, 50, seed) == approx(2.0 * alpha_t(flat, 0.2, ORIGIN3, 50, seed), rel=1e-12)


def test_beta_lp_estimate_dominates_the_measured_rate(seed):
    V = gaussian_well(0.1, 1.0, 3, truncate=4.0)
    times = np.array([0.5, 1.0, 2.0, 4.0])
    logs = [math.log(empirical_exp_moment(V, t, ORIGIN3, 2000, seed).mean) for t in times]
    measured, _ = np.polyfit(times, logs, 1)
    assert measured > 0.0
    assert beta_lp_estimate(V, p=2.0) >= measured


def test_lower_w_inf_moves_the_well_into_W():
    W = constant(1.0, 1)
    U = gaussian_well(2.0, 0.5, 1, truncate=3.0)
    V = sum_potentials([W, U])
    plain = decompose_E(V, DecompositionHints(W=W, U=U))
    assert plain.W_inf == approx(1.0)
    assert plain.U_p_norm == approx(math.sqrt(math.pi), rel=1e-4)
    lowered = decompose_E(V, DecompositionHints(W=W, U=U, lower_w_inf=True, neighborhood_radius=5.0))
    assert lowered.W_inf == approx(-1.0, abs=1e-6)
    assert lowered.U_p_norm == 0.0
    grid = lowered.grid
    assert np.allclose(lowered.W(grid) + lowered.U(grid), V(grid), rtol=0.0, atol=1e-12)
