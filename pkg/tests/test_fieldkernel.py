import math

import numpy as np
import pytest
from pytest import approx

from errors import QuadratureFailure
from fieldkernel import (DispersionSpec, StandardCutoff, build_kernel, effective_action, field_norms,
                         mode_sample_check, polarization_vectors, second_moment_bound)
from paths import BrownianPath, TimeGrid, sample_path, sample_paths


def kernel_3d(m=1.0, order=4, rtol=1e-3):
    return build_kernel(StandardCutoff(3, 1.0, omega_power=0.5), DispersionSpec(3, m), order, rtol)


def test_polarizations_are_orthonormal_and_transverse():
    k = np.random.default_rng(7).normal(size=(50, 3))
    k[0] = [-1.0, 0.0, 0.0]
    pol = polarization_vectors(k)
    assert pol.shape == (50, 3, 2)
    gram = np.einsum("mdi,mdj->mij", pol, pol)
    assert np.allclose(gram, np.eye(2)[None], atol=1e-12)
    assert np.allclose(np.einsum("md,mdj->mj", k, pol), 0.0, atol=1e-12)


def test_standard_cutoff_needs_two_or_three_dimensions():
    with pytest.raises(ValueError):
        StandardCutoff(4, 1.0)


def test_missing_cutoff_diverges():
    with pytest.raises(QuadratureFailure):
        build_kernel(StandardCutoff(3, None), DispersionSpec(3, 1.0))


def test_infrared_divergences():
    with pytest.raises(QuadratureFailure):
        build_kernel(StandardCutoff(2, 1.0), DispersionSpec(2, 0.0))
    with pytest.raises(QuadratureFailure):
        build_kernel(StandardCutoff(3, 1.0, omega_power=1.5), DispersionSpec(3, 0.0))
    build_kernel(StandardCutoff(2, 1.0), DispersionSpec(2, 1.0), order=8)


def test_kernel_at_coincident_points_matches_closed_form():
    # sum_j e_j e_j^T integrated against 1/|k| over the unit ball: (1/2)(8 pi/3) I
    kernel = build_kernel(StandardCutoff(3, 1.0, omega_power=0.5), DispersionSpec(3, 0.0), order=8)
    W = kernel.evaluate(np.zeros(3), np.zeros(3), 0.0)
    assert np.allclose(W, (4.0 * math.pi / 3.0) * np.eye(3), rtol=1e-8, atol=1e-10)


def test_kernel_matrix_is_hermitian_and_positive(seed):
    kernel = kernel_3d()
    path = sample_path(np.zeros(3), TimeGrid(1.0, 6), seed)
    matrix = kernel.kernel_matrix(path.positions, path.grid.times)
    assert np.allclose(matrix, matrix.conj().T, atol=1e-12)
    eigenvalues = np.linalg.eigvalsh(matrix)
    assert eigenvalues.min() >= -1e-10 * eigenvalues.max()


def test_action_is_linear_in_alpha(seed):
    kernel = kernel_3d()
    path = sample_path(np.zeros(3), TimeGrid(1.0, 16), seed)
    one = effective_action(path, kernel, 1.0)
    assert effective_action(path, kernel, 2.5).value == approx(2.5 * one.value, rel=1e-12)
    assert effective_action(path, kernel, 0.0).value == 0.0
    assert one.value == approx(one.norm2 / 4.0)


def test_frozen_path_has_no_action():
    grid = TimeGrid(1.0, 8)
    path = BrownianPath.from_increments(np.ones(3), np.zeros((8, 3)), grid)
    assert effective_action(path, kernel_3d(), 1.0).norm2 == 0.0


def test_mode_recursion_matches_pair_sum(seed):
    kernel = kernel_3d()
    path = sample_path(np.zeros(3), TimeGrid(1.0, 12), seed)
    modes = effective_action(path, kernel, 1.0, method="modes")
    pairs = effective_action(path, kernel, 1.0, method="pairs")
    assert modes.norm2 == approx(pairs.norm2, rel=1e-9)


def test_bad_arguments(seed):
    kernel = kernel_3d()
    path = sample_path(np.zeros(3), TimeGrid(1.0, 4), seed)
    with pytest.raises(ValueError):
        effective_action(path, kernel, -1.0)
    with pytest.raises(ValueError):
        effective_action(path, kernel, 1.0, scheme="ito", method="pairs")
    with pytest.raises(ValueError):
        effective_action(path, kernel, 1.0, method="dense")


def test_mean_field_norm_is_half_the_moment_bound(seed):
    # Cross terms vanish for transverse polarizations: E||K_t||^2 = t (d-1) sum_m w |phi|^2 / omega
    kernel = kernel_3d()
    n = 1000
    batch = sample_paths(np.zeros((n, 3)), TimeGrid(1.0, 16), seed)
    norms = field_norms(batch, kernel)
    bound = second_moment_bound(kernel, 1.0)
    stderr = float(np.std(norms, ddof=1)) / math.sqrt(n)
    assert abs(float(np.mean(norms)) - 0.5 * bound) < 4.0 * stderr


def test_heavier_field_gives_smaller_norms(seed):
    light, heavy = kernel_3d(m=0.5), kernel_3d(m=3.0)
    batch = sample_paths(np.zeros((500, 3)), TimeGrid(1.0, 16), seed)
    assert float(np.mean(field_norms(batch, heavy))) < float(np.mean(field_norms(batch, light)))
    assert second_moment_bound(heavy, 1.0) < second_moment_bound(light, 1.0)


def test_field_norms_do_not_depend_on_workers(seed):
    kernel = kernel_3d()
    batch = sample_paths(np.zeros((64, 3)), TimeGrid(1.0, 8), seed)
    assert np.array_equal(field_norms(batch, kernel, workers=1), field_norms(batch, kernel, workers=3))


def test_sampled_field_matches_vacuum_reduction(seed):
    path = sample_path(np.zeros(3), TimeGrid(1.0, 16), seed)
    check = mode_sample_check(path, StandardCutoff(3, 1.0, omega_power=0.5), DispersionSpec(3, 1.0),
                              1.0, 4, 2000, seed.offset(99))
    assert abs(check.z_score) < 4.0
    assert abs(check.imag_mean) < 4.0 * check.imag_stderr + 1e-12


def test_kernel_shrinks_pointwise_with_the_field_mass():
    x = np.array([0.3, -0.2, 0.1])
    kernels = [kernel_3d(m=m, order=8) for m in (0.0, 0.5, 1.0, 3.0)]
    for tau in (0.0, 0.5, 2.0):
        matrices = [k.evaluate(x, x, tau) for k in kernels]
        for light, heavy in zip(matrices[:-1], matrices[1:]):
            gap = np.linalg.eigvalsh(light - heavy)
            assert gap.min() >= -1e-12
            assert np.trace(heavy).real < np.trace(light).real
