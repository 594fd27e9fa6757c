# quadrature.py
"""
Deterministic quadrature rules shared by the potentials, fieldkernel and
scattering modules.

All rules return (points, weights) numpy arrays. Radial rules can be graded
(s = r_max * u**grading) to absorb integrable power singularities at the
center of the ball.
"""

import math

import numpy as np
from scipy.special import gammaln


def gauss_legendre(a, b, n):
    """Gauss-Legendre nodes and weights on [a, b]."""
    nodes, weights = np.polynomial.legendre.leggauss(int(n))
    half = 0.5 * (b - a)
    return a + half * (nodes + 1.0), half * weights


def sphere_area(d):
    """Surface measure |S^{d-1}|."""
    return 2.0 * math.pi ** (d / 2.0) / math.exp(gammaln(d / 2.0))


def sphere_rule(d, n):
    """
    Directions on the unit sphere S^{d-1} with weights summing to |S^{d-1}|.

    d=1: the two directions +1 and -1.
    d=2: 2n equally spaced angles (trapezoid, spectral for periodic integrands).
    d=3: Gauss-Legendre in cos(theta) (n nodes) times 2n equally spaced azimuths.
    """
    if d == 1:
        return np.array([[1.0], [-1.0]]), np.array([1.0, 1.0])
    if d == 2:
        m = 2 * n
        phi = 2.0 * math.pi * (np.arange(m) + 0.5) / m
        dirs = np.stack([np.cos(phi), np.sin(phi)], axis=1)
        return dirs, np.full(m, 2.0 * math.pi / m)
    if d == 3:
        cos_t, w_t = gauss_legendre(-1.0, 1.0, n)
        m = 2 * n
        phi = 2.0 * math.pi * (np.arange(m) + 0.5) / m
        sin_t = np.sqrt(1.0 - cos_t ** 2)
        dirs = np.stack([
            np.outer(sin_t, np.cos(phi)).ravel(),
            np.outer(sin_t, np.sin(phi)).ravel(),
            np.repeat(cos_t, m),
        ], axis=1)
        weights = np.outer(w_t, np.full(m, 2.0 * math.pi / m)).ravel()
        return dirs, weights
    raise ValueError(f"sphere rule only implemented for d in (1, 2, 3), got d={d}")


def radial_rule(r_min, r_max, n, grading=1):
    """
    Radial nodes on [r_min, r_max]. With grading g > 1 the nodes follow
    s = r_min + (r_max - r_min) u**g which clusters them at r_min.
    """
    u, w = gauss_legendre(0.0, 1.0, n)
    span = r_max - r_min
    if grading == 1:
        return r_min + span * u, span * w
    s = r_min + span * u ** grading
    return s, span * grading * u ** (grading - 1) * w


def ball_rule(d, r_min, r_max, n, grading=1, center=None):
    """
    Product rule on the shell r_min <= |y - center| <= r_max in R^d.

    Returns points (M, d) and weights (M,) that already include the Jacobian
    s^{d-1}, plus the radii of every point (M,) for kernels that depend on |y|.
    """
    s, ws = radial_rule(r_min, r_max, n, grading)
    dirs, wd = sphere_rule(d, n)
    radii = np.repeat(s, len(wd))
    points = (s[:, None, None] * dirs[None, :, :]).reshape(-1, d)
    weights = np.outer(ws * s ** (d - 1), wd).ravel()
    if center is not None:
        points = points + np.asarray(center, dtype=float)
    return points, weights, radii


def fibonacci_sphere(d, n):
    """Roughly uniform directions on S^{d-1} without weights (shell scans)."""
    if d == 1:
        return np.array([[1.0], [-1.0]])
    if d == 2:
        phi = 2.0 * math.pi * np.arange(n) / n
        return np.stack([np.cos(phi), np.sin(phi)], axis=1)
    if d == 3:
        i = np.arange(n) + 0.5
        z = 1.0 - 2.0 * i / n
        r = np.sqrt(1.0 - z ** 2)
        phi = math.pi * (1.0 + 5.0 ** 0.5) * i
        return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)
    raise ValueError(f"shell scans only implemented for d in (1, 2, 3), got d={d}")
