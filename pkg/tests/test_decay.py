import math

import numpy as np
import pytest
from pytest import approx

import decay
from decay import (DecayEnvelope, beta_fit, carmona_bound, carmona_constants, check_bound_chain,
                   confining2_rates, crossover_radius, envelope_confining1, envelope_confining2,
                   envelope_nonconfining, martingale_check, martingale_constant, nonconfining_decomposition,
                   nonconfining_rate, profile_bound_state, verify_envelope)
from errors import Divergence, GapViolation, GrowthViolation, ParameterInfeasible
from fieldkernel import DispersionSpec, StandardCutoff, build_kernel
from paths import SeedSpec
from potentials import (DecompositionHints, composite, constant, decompose_E, gaussian_well, harmonic,
                        polynomial, sum_potentials)
from semigroup import GridEstimate, gaussian, ground_energy


@pytest.fixture(scope="module")
def harmonic_profile():
    return profile_bound_state(harmonic(1), E_est=0.5, x_axes=[np.linspace(-5.0, 5.0, 41)], t_iter=1.0,
                               n_iter=20, mc=4000, seed=SeedSpec(7), dt_max=0.05)


def test_martingale_constant():
    assert martingale_constant(0.4, 1) >= 2.0
    assert martingale_constant(0.4, 3) >= 2.0
    assert martingale_constant(0.1, 3) < martingale_constant(0.4, 3)
    with pytest.raises(ValueError):
        martingale_constant(0.5, 1)


def test_martingale_check_holds(seed):
    check = martingale_check(0.4, 1.5, 1.0, 1, 4000, seed)
    assert check.holds
    assert check.empirical <= check.reflection + 3.0 * check.stderr
    assert check.reflection <= check.bound


def test_nonconfining_rate_arithmetic():
    assert nonconfining_rate(2.0, 1.0, 0.0, 0.5) == approx(1.0 / 32.0)


def test_confining2_rates_arithmetic():
    first, second = confining2_rates(0.4, 0.0, 0.0, 0.5, 2.0, 0.1)
    assert first == approx(0.4 / 1.6 - 0.05)
    assert second == approx(0.15)


def test_confining1_growth_constant():
    decomp = decompose_E(polynomial([0.0, 0.0, 1.0], 1))
    env = envelope_confining1(decomp, 0.0, 1, 1.0)
    assert env.params["c"] == approx(0.25, rel=1e-9)
    assert env.C2 == approx(0.4 / 64.0, rel=1e-9)
    assert env.beta_exp == 2.0
    with pytest.raises(GrowthViolation):
        envelope_confining1(decomp, 0.0, 1, 2.0)


def test_confining2_needs_a_reachable_level():
    decomp = decompose_E(polynomial([0.0, 0.0, 1.0], 1))
    env = envelope_confining2(decomp, 0.5)
    assert env.case == "confining2"
    assert env.C2 > 0.0
    first, second = confining2_rates(0.4, 0.0, decomp.W_inf, 0.5, env.params["c_level"], env.params["eps"])
    assert min(first, second) == approx(env.C2)
    with pytest.raises(ParameterInfeasible):
        envelope_confining2(decomp, 1e6)


def test_nonconfining_envelope():
    dip = sum_potentials([constant(3.0, 2), gaussian_well(2.0, 1.0, 2)])
    decomp = decompose_E(dip)
    env = envelope_nonconfining(decomp, 2.0, sigma=3.0)
    assert env.params["W_inf"] == approx(1.0)
    assert env.C2 == approx(1.0 / 32.0)
    assert env.params["alt_rate"] == approx(0.5 / (8.0 * math.sqrt(2.0)))
    with pytest.raises(GapViolation):
        envelope_nonconfining(decomp, 3.5, sigma=3.0)
    with pytest.raises(GapViolation):
        envelope_nonconfining(decompose_E(polynomial([0.0, 0.0, 1.0], 2)), 0.5)


def test_nonconfining_decomposition_caps_U():
    V = sum_potentials([constant(2.0, 3), composite([0.0], 1.0, 1.0, 3)])
    decomp = decompose_E(V, DecompositionHints(spike_radius=1.0))
    redone = nonconfining_decomposition(decomp, 1.0, 2.0)
    assert redone.U_p_norm <= 0.5 + 1e-6
    with pytest.raises(GapViolation):
        nonconfining_decomposition(decompose_E(constant(3.0, 2)), 1.0, 2.0)


def test_carmona_constants_trivial_without_U():
    constants = carmona_constants(decompose_E(harmonic(1)), 0.4)
    assert constants.method == "trivial"
    assert (constants.D1, constants.D2) == (1.0, 0.0)
    assert constants.D3 == approx(martingale_constant(0.4, 1) ** 0.25)


def test_carmona_constants_with_a_coulomb_spike(seed):
    decomp = decompose_E(composite([0.0, 0.0, 1.0], 1.0, 1.0, 3), DecompositionHints(spike_radius=1.0))
    khas = carmona_constants(decomp, 0.4, seed, mc=1000)
    assert khas.method == "khasminskii"
    assert khas.D1 >= 1.0 and khas.D2 > 0.0
    assert khas.provenance["alpha_t_star"] < 1.0
    lp = carmona_constants(decomp, 0.4, method="lp")
    assert lp.D1 == approx(2.0 ** 0.25)
    assert lp.D2 > 0.0
    with pytest.raises(ValueError):
        carmona_constants(decomp, 0.4, method="guess")


def test_carmona_bound_needs_positive_arguments():
    decomp = decompose_E(harmonic(1))
    assert carmona_bound([1.0], 1.0, 0.5, decomp, 0.5, 0.4, 1.0, 0.0, 1.0) > 0.0
    with pytest.raises(ValueError):
        carmona_bound([1.0], 0.0, 0.5, decomp, 0.5, 0.4, 1.0, 0.0, 1.0)


def test_beta_fit_of_exact_profiles():
    r = np.linspace(0.5, 3.0, 20)
    assert beta_fit(r, np.exp(-0.5 * r ** 2)) == approx(2.0)
    assert beta_fit(r, np.exp(-0.3 * r)) == approx(1.0)
    assert math.isnan(beta_fit(r[:1], np.exp(-r[:1])))


def test_harmonic_profile_is_gaussian(harmonic_profile):
    profile = harmonic_profile
    assert profile.n_iterations <= 20
    assert abs(profile.growth[-1] - 1.0) < 0.05
    radii = np.abs(profile.points[:, 0])
    window = (radii >= 1.0) & (radii <= 3.0)
    assert 1.8 <= beta_fit(radii[window], profile.values[window]) <= 2.2


def test_envelope_holds_on_the_harmonic_profile(harmonic_profile):
    decomp = decompose_E(harmonic(1))
    env = envelope_confining1(decomp, 0.5, 1, 0.5)
    report = verify_envelope(harmonic_profile, env, (1.0, 3.0))
    assert report["violations"] == []
    assert 1.8 <= report["beta_fit"] <= 2.2
    assert report["constants"]["C1"] > 0.0
    constants = carmona_constants(decomp, env.params["alpha_exp"])
    assert check_bound_chain(harmonic_profile, env, decomp, constants) == []
    with pytest.raises(ValueError):
        verify_envelope(harmonic_profile, env, (1.0, 9.0))


def test_crossover_radius():
    fast = DecayEnvelope("confining1", 1.0, 1.0, 2.0)
    slow = DecayEnvelope("nonconfining", 1.0, 0.1, 1.0)
    assert crossover_radius(fast, slow) == approx(0.1, abs=0.02)
    assert crossover_radius(slow, fast) is None


def test_nonconfining_envelope_lowers_W_inf_below_sigma():
    W = constant(1.0, 1)
    U = gaussian_well(2.0, 0.5, 1, truncate=3.0)
    decomp = decompose_E(sum_potentials([W, U]), DecompositionHints(W=W, U=U, neighborhood_radius=5.0))
    assert decomp.W_inf == approx(1.0)
    redone = nonconfining_decomposition(decomp, 0.0, 1.0)
    assert redone.hints.lower_w_inf
    assert redone.W_inf == approx(-1.0, abs=1e-6)
    env = envelope_nonconfining(decomp, 0.0, sigma=1.0)
    assert env.params["W_inf"] == approx(-1.0, abs=1e-6)
    assert env.C2 == approx(1.0 / 32.0, rel=1e-5)


def test_profile_is_symmetric_and_normalized(harmonic_profile):
    values, stderr = harmonic_profile.values, harmonic_profile.stderr
    assert np.max(values) == 1.0
    band = 6.0 * np.hypot(stderr, stderr[::-1]) + 0.02
    assert np.all(np.abs(values - values[::-1]) <= band)


def test_profile_does_not_depend_on_the_trial_scale():
    axes = [np.linspace(-3.0, 3.0, 13)]
    runs = [profile_bound_state(harmonic(1), E_est=0.5, x_axes=axes, n_iter=3, mc=500, seed=SeedSpec(5),
                                trial=gaussian([0.0], 2.0, amplitude=a), dt_max=0.05) for a in (1.0, 7.0)]
    assert np.allclose(runs[0].values, runs[1].values, rtol=1e-9, atol=1e-12)
    assert np.allclose(runs[0].growth, runs[1].growth, rtol=1e-9)


def scaled_semigroup(factor):
    """Stand-in for apply_Tt: factor * (phi + 0.01 k) on call k, so the shape never settles."""
    calls = []

    def apply(phi, t, V, kernel, alpha, points, mc, seed, dt_max, workers=1):
        calls.append(t)
        values = factor * (phi(points) + 0.01 * len(calls))
        return GridEstimate(points, values, np.zeros_like(values), t)

    return apply


def test_profile_reports_which_way_E_est_is_off(monkeypatch):
    axes = [np.linspace(-3.0, 3.0, 13)]
    monkeypatch.setattr(decay, "apply_Tt", scaled_semigroup(0.5))
    with pytest.raises(Divergence, match="shrinks.*below the ground energy"):
        profile_bound_state(harmonic(1), x_axes=axes, n_iter=10, seed=SeedSpec(1))
    monkeypatch.setattr(decay, "apply_Tt", scaled_semigroup(3.0))
    with pytest.raises(Divergence, match="grows.*above the ground energy"):
        profile_bound_state(harmonic(1), x_axes=axes, n_iter=10, seed=SeedSpec(1))


def test_one_envelope_covers_every_field_mass():
    V = harmonic(2)
    f = gaussian(np.zeros(2), 1.0)
    env = envelope_confining1(decompose_E(V), 1.0, 1, 0.5)
    axes = [np.linspace(-3.0, 3.0, 13)] * 2
    energies, profiles = [], []
    for m in (0.0, 0.5, 1.0):
        kernel = build_kernel(StandardCutoff(2, 1.0, omega_power=0.5), DispersionSpec(2, m), 6, 1e-3)
        est = ground_energy(f, V, kernel, 1.0, n_samples=4000, seed=SeedSpec(3), dt_max=0.05, residual_max=0.05)
        energies.append(est)
        profiles.append(profile_bound_state(V, kernel, 1.0, est.E0, axes, n_iter=10, mc=1000, seed=SeedSpec(4),
                                            dt_max=0.1))
    for light, heavy in zip(energies[:-1], energies[1:]):
        assert heavy.E0 <= light.E0 + 3.0 * math.hypot(light.E0_stderr, heavy.E0_stderr)
    window = (1.0, 2.5)
    shared = env.with_C1(max(verify_envelope(p, env, window)["constants"]["C1"] for p in profiles))
    for profile in profiles:
        assert verify_envelope(profile, shared, window, calibrate=False)["violations"] == []
