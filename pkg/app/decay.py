# decay.py
"""
Pointwise exponential decay envelopes for bound states.

The envelopes start from the bound

    |phi(x)| <= D1 e^{D2 ||U||_p t} e^{Et} (D3 e^{-(alpha/4) a^2/t} e^{-t W_inf} + e^{-t W_a(x)}) ||phi||

valid for every t, a > 0 and 0 < alpha < 1/2, with (t, a) chosen as functions
of |x| per case. D1 and D2 come from Khasminskii's construction for 4U,
D3 = xi_alpha^(1/4) from the martingale inequality. Bound-state profiles are
obtained by Monte Carlo power iteration phi <- e^{tE} T_t phi.
"""

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import optimize, special

from errors import Divergence, GapViolation, GrowthViolation, ParameterInfeasible
from paths import TimeGrid, sample_paths
from potentials import (PotentialSpec, W_a, alpha_t, beta_lp_estimate, decompose_E,
                        khasminskii_bound, kato_grid, sigma_liminf)
from quadrature import fibonacci_sphere
from semigroup import DEFAULT_DT, apply_Tt, gaussian, grid_function

T_STAR_CANDIDATES = (0.1, 0.05, 0.02, 0.01, 0.005)
KHASMINSKII_ALPHA_TARGET = 0.5
C_LEVELS = tuple(np.geomspace(1e-2, 1e3, 31))
EPS_LEVELS = tuple(np.geomspace(1e-3, 1e1, 41))
GROWTH_TOL = 0.05
PROFILE_STALL = 5
REL_STDERR_MAX = 0.3


def martingale_constant(alpha_exp, d):
    """xi_alpha = sup_{z >= 0} 2 P(|N(0, I_d)| >= z) e^{alpha z^2}, for 0 < alpha < 1/2."""
    if not 0.0 < alpha_exp < 0.5:
        raise ValueError(f"martingale exponent must lie in (0, 1/2), got {alpha_exp}")

    def log_value(z):
        return math.log(2.0) + math.log(max(special.gammaincc(d / 2.0, z * z / 2.0), 1e-300)) + alpha_exp * z * z

    zs = np.linspace(0.0, 40.0, 4001)
    values = [log_value(z) for z in zs]
    k = int(np.argmax(values))
    lo, hi = zs[max(k - 1, 0)], zs[min(k + 1, len(zs) - 1)]
    if hi > lo:
        best = optimize.minimize_scalar(lambda z: -log_value(z), bounds=(lo, hi), method="bounded")
        return math.exp(max(values[k], -best.fun))
    return math.exp(values[k])


@dataclass(frozen=True)
class MartingaleCheck:
    empirical: float
    stderr: float
    reflection: float
    bound: float
    holds: bool


def martingale_check(alpha_exp, a, t, d, mc, seed, n_steps=256, workers=1):
    """
    Monte Carlo P(sup_{s<=t} |B_s| > a) from the origin against the reflection
    value 2 P(|B_t| >= a) and the bound xi_alpha e^{-alpha a^2/t}.
    """
    batch = sample_paths(np.zeros((mc, d)), TimeGrid(float(t), n_steps), seed, workers)
    hit = np.max(np.linalg.norm(batch.positions, axis=2), axis=1) > a
    empirical = float(np.mean(hit))
    stderr = float(np.std(hit, ddof=1) / math.sqrt(mc)) if mc > 1 else 0.0
    reflection = 2.0 * float(special.gammaincc(d / 2.0, a * a / (2.0 * t)))
    bound = martingale_constant(alpha_exp, d) * math.exp(-alpha_exp * a * a / t)
    holds = empirical <= bound + 3.0 * stderr
    logging.info("martingale check a=%g t=%g: P=%.4g +/- %.2g, reflection %.4g, bound %.4g",
                 a, t, empirical, stderr, reflection, bound)
    return MartingaleCheck(empirical, stderr, reflection, bound, holds)


@dataclass(frozen=True)
class CarmonaConstants:
    D1: float
    D2: float
    D3: float
    xi: float
    alpha_exp: float
    method: str
    provenance: dict = field(default_factory=dict)

    def to_dict(self):
        return {"D1": self.D1, "D2": self.D2, "D3": self.D3, "xi": self.xi, "alpha_exp": self.alpha_exp,
                "method": self.method, "provenance": self.provenance}


def carmona_constants(decomp, alpha_exp, seed=None, mc=2000, method="khasminskii", workers=1):
    """
    D1 e^{D2 ||U||_p t} >= (sup_x E^x[e^{-4 int U}])^(1/4) and D3 = xi_alpha^(1/4).

    method "khasminskii": gamma, beta from the Monte Carlo alpha_t* of 4U at the
    first t* in T_STAR_CANDIDATES with alpha_t* < 1/2; D1 = gamma^(1/4),
    D2 = beta / (4 ||U||_p). method "lp": the L^p estimate of beta for 4U with
    gamma = 2.
    """
    d = decomp.V.dim
    xi = martingale_constant(alpha_exp, d)
    D3 = xi ** 0.25
    u_norm = decomp.U_p_norm
    if u_norm == 0.0:
        return CarmonaConstants(1.0, 0.0, D3, xi, alpha_exp, "trivial", {"U_p_norm": 0.0})

    U4 = PotentialSpec(lambda x: 4.0 * decomp.U(x), d, f"4*{decomp.U.name}",
                       singular_points=decomp.V.singular_points)
    if method == "lp":
        beta = beta_lp_estimate(U4, p=decomp.p, norm=4.0 * u_norm)
        D1, D2 = 2.0 ** 0.25, beta / (4.0 * u_norm)
        provenance = {"U_p_norm": u_norm, "beta": beta, "gamma": 2.0}
    elif method == "khasminskii":
        if seed is None:
            raise ValueError("a seed is required for the Khasminskii constants")
        grid = kato_grid(U4)
        alpha_star, t_star = math.inf, None
        for t_star in T_STAR_CANDIDATES:
            alpha_star = alpha_t(U4, t_star, grid, mc, seed, workers=workers)
            if alpha_star < KHASMINSKII_ALPHA_TARGET:
                break
        gamma, beta, _ = khasminskii_bound(U4, t_star, alpha_star, t_star)
        D1, D2 = gamma ** 0.25, beta / (4.0 * u_norm)
        provenance = {"U_p_norm": u_norm, "t_star": t_star, "alpha_t_star": alpha_star, "gamma": gamma, "beta": beta}
    else:
        raise ValueError(f"unknown method {method!r}")
    logging.info("Carmona constants: D1=%.4g D2=%.4g D3=%.4g (%s)", D1, D2, D3, method)
    return CarmonaConstants(D1, D2, D3, xi, alpha_exp, method, provenance)


def carmona_bound(x, t, a, decomp, E, alpha_exp, D1, D2, D3):
    """D1 e^{D2 ||U||_p t} e^{Et} (D3 e^{-(alpha/4) a^2/t} e^{-t W_inf} + e^{-t W_a(x)})."""
    if not (t > 0 and a > 0):
        raise ValueError("t and a must be positive")
    prefactor = D1 * math.exp(D2 * decomp.U_p_norm * t + E * t)
    return prefactor * (D3 * math.exp(-(alpha_exp / 4.0) * a * a / t - t * decomp.W_inf)
                        + math.exp(-t * W_a(decomp, x, a)))


@dataclass(frozen=True)
class DecayEnvelope:
    case: str
    C1: float
    C2: float
    beta_exp: float
    params: dict = field(default_factory=dict)
    radius: float = 0.0

    def evaluate(self, x):
        r = np.linalg.norm(np.atleast_2d(np.asarray(x, dtype=float)), axis=1)
        return self.C1 * np.exp(-self.C2 * r ** self.beta_exp)

    def insertion(self, x, decomp):
        """(t, a) the envelope's case inserts into the Carmona bound at x; None where W_{|x|/2}(x) <= 0."""
        r = float(np.linalg.norm(x))
        a = r / 2.0
        if self.case == "confining1":
            floor = W_a(decomp, x, a)
            return (r / math.sqrt(floor), a) if floor > 0 else None
        return self.params["eps"] * r, a

    def with_C1(self, C1):
        return replace(self, C1=float(C1))

    def to_dict(self):
        return {"case": self.case, "C1": self.C1, "C2": self.C2, "beta_exp": self.beta_exp,
                "params": self.params, "radius": self.radius}


def _shell_points(d, R, n_dirs):
    return R * fibonacci_sphere(d, n_dirs)


def envelope_confining1(decomp, E, n, gamma, K_radius=0.0, alpha_exp=0.4, shell_radii=None, n_dirs=16):
    """
    Superexponential envelope for W >= gamma |x|^{2n} outside the ball of radius
    K_radius: C2 = alpha c/16, beta_exp = n + 1 with
    c = inf_{|x| > K_radius} W_{|x|/2}(x) / |x|^{2n} taken over the shells.
    """
    if not (n > 0 and gamma > 0):
        raise ValueError("need n > 0 and gamma > 0")
    if not 0.0 < alpha_exp < 0.5:
        raise ValueError(f"martingale exponent must lie in (0, 1/2), got {alpha_exp}")
    d = decomp.W.dim
    radii = shell_radii if shell_radii is not None else K_radius + np.linspace(0.5, 10.0, 20)
    c = math.inf
    for R in radii:
        if R <= K_radius:
            continue
        points = _shell_points(d, R, n_dirs)
        w = decomp.W(points)
        floor = gamma * R ** (2 * n)
        if np.any(w < floor * (1.0 - 1e-9)):
            raise GrowthViolation(f"W < {gamma:g}|x|^{2 * n:g} on the shell |x| = {R:g} (min {float(np.min(w)):.4g})")
        c = min(c, min(W_a(decomp, x, R / 2.0) for x in points) / R ** (2 * n))
    if not math.isfinite(c) or c <= 0:
        raise GrowthViolation(f"no positive growth constant outside radius {K_radius:g}")
    C2 = alpha_exp * c / 16.0
    logging.info("confining case 1: c=%.6g, C2=%.6g, exponent %g", c, C2, n + 1)
    return DecayEnvelope("confining1", 1.0, C2, float(n + 1),
                         {"n": n, "gamma": gamma, "c": c, "alpha_exp": alpha_exp, "E": E, "K_radius": K_radius},
                         radius=K_radius)


def confining2_rates(alpha_exp, u_norm, W_inf, E, c_level, eps):
    """The two exponent rates; both must be positive."""
    first = alpha_exp / (16.0 * eps) - eps * u_norm + eps * (W_inf - E)
    second = eps * (c_level - E - u_norm)
    return first, second


def envelope_confining2(decomp, E, c_level=None, eps=None, alpha_exp=0.4, R_max=50.0, n_radii=100, n_dirs=16):
    """
    Exponential envelope for W -> infinity. Scans (c_level, eps) over
    C_LEVELS x EPS_LEVELS (or the given values) for pairs meeting both rate
    conditions, with N the radius beyond which W_{|x|/2}(x) >= c_level on the
    scanned shells, and keeps the pair with the largest delta.
    """
    d = decomp.W.dim
    radii = np.linspace(R_max / n_radii, R_max, n_radii)
    floors = np.array([min(W_a(decomp, x, R / 2.0) for x in _shell_points(d, R, n_dirs)) for R in radii])
    # running min from the outside in: floor beyond each radius
    tail = np.minimum.accumulate(floors[::-1])[::-1]

    best = None
    for c in ([c_level] if c_level is not None else C_LEVELS):
        reached = np.flatnonzero(tail >= c)
        if len(reached) == 0:
            continue
        N = float(radii[reached[0]])
        for e in ([eps] if eps is not None else EPS_LEVELS):
            first, second = confining2_rates(alpha_exp, decomp.U_p_norm, decomp.W_inf, E, c, e)
            if first > 0 and second > 0:
                delta = min(first, second)
                if best is None or delta > best[0]:
                    best = (delta, float(c), float(e), N)
    if best is None:
        raise ParameterInfeasible(f"no (c, eps) pair on the scanned lattice gives positive rates at E={E:g}")
    delta, c, e, N = best
    logging.info("confining case 2: delta=%.6g with c=%.4g, eps=%.4g, N=%.4g", delta, c, e, N)
    return DecayEnvelope("confining2", 1.0, delta, 1.0,
                         {"delta": delta, "c_level": c, "eps": e, "N": N, "alpha_exp": alpha_exp, "E": E},
                         radius=N)


def nonconfining_rate(sigma, E, W_inf, beta):
    """(beta / (8 sqrt 2)) (Sigma - E) / sqrt(Sigma - W_inf)."""
    return beta / (8.0 * math.sqrt(2.0)) * (sigma - E) / math.sqrt(sigma - W_inf)


def nonconfining_decomposition(decomp, E, sigma):
    """decomp, redone so that ||U||_p <= (Sigma - E)/2 and W_inf < Sigma; GapViolation if that fails."""
    hints = decomp.hints
    cap = (sigma - E) / 2.0
    if decomp.U_p_norm > cap:
        logging.info("||U||_p=%.4g above (Sigma - E)/2=%.4g: decomposing again", decomp.U_p_norm, cap)
        hints = replace(hints, u_norm_cap=cap)
        decomp = decompose_E(decomp.V, hints)
    if sigma <= decomp.W_inf and not hints.lower_w_inf:
        hints = replace(hints, lower_w_inf=True)
        decomp = decompose_E(decomp.V, hints)
    if sigma <= decomp.W_inf:
        raise GapViolation(f"Sigma={sigma:.6g} <= W_inf={decomp.W_inf:.6g}")
    return decomp


def envelope_nonconfining(decomp, E, beta=0.5, sigma=None, R_list=(10.0, 20.0, 40.0, 80.0)):
    """
    Exponential envelope when Sigma > E and Sigma > W_inf. The decomposition
    is redone with ||U||_p <= (Sigma - E)/2 when needed, and with U near the
    minimizer of V moved into W when W_inf reaches Sigma. The rate with
    sqrt(E - W_inf) in the denominator is reported alongside when E > W_inf.
    """
    if not 0.0 < beta < 1.0:
        raise ValueError(f"beta must lie in (0, 1), got {beta}")
    if sigma is None:
        estimate = sigma_liminf(decomp, R_list)
        if estimate.unbounded:
            raise GapViolation("Sigma is unbounded: the potential is confining")
        sigma = estimate.sigma
    if sigma <= E:
        raise GapViolation(f"Sigma={sigma:.6g} <= E={E:.6g}")

    decomp = nonconfining_decomposition(decomp, E, sigma)
    C2 = nonconfining_rate(sigma, E, decomp.W_inf, beta)
    alpha_exp = beta * beta / 2.0
    eps = math.sqrt(alpha_exp / 16.0) / math.sqrt(sigma - decomp.W_inf)
    alt = (beta / (8.0 * math.sqrt(2.0)) * (sigma - E) / math.sqrt(E - decomp.W_inf)) if E > decomp.W_inf else None
    logging.info("non-confining case: C2=%.6g (alternative %s), Sigma=%.4g, W_inf=%.4g", C2, alt, sigma, decomp.W_inf)
    return DecayEnvelope("nonconfining", 1.0, C2, 1.0,
                         {"beta": beta, "sigma": sigma, "E": E, "W_inf": decomp.W_inf, "eps": eps,
                          "alpha_exp": alpha_exp, "U_p_norm": decomp.U_p_norm, "alt_rate": alt})


@dataclass(frozen=True, eq=False)
class BoundStateProfile:
    axes: tuple
    points: np.ndarray
    values: np.ndarray
    stderr: np.ndarray
    E_used: float
    t_iter: float
    n_iterations: int
    converged: bool
    growth: list

    def rows(self):
        """(x..., value, stderr) per grid point."""
        return [tuple(float(c) for c in x) + (float(v), float(s))
                for x, v, s in zip(self.points, self.values, self.stderr)]

    def l2_norm(self):
        """Trapezoid L^2 norm of the profile over the product grid."""
        shape = tuple(len(a) for a in self.axes)
        integral = np.abs(self.values.reshape(shape)) ** 2
        for axis in reversed(self.axes):
            integral = np.trapezoid(integral, axis, axis=-1)
        return float(math.sqrt(integral))


def profile_bound_state(V, kernel=None, alpha=0.0, E_est=0.0, x_axes=None, t_iter=1.0, n_iter=20, mc=4000,
                        seed=None, trial=None, dt_max=DEFAULT_DT, workers=1):
    """
    Power iteration phi_{k+1} = e^{t E} T_t phi_k on the product grid x_axes,
    normalized to max 1 after every step; phi_k is interpolated linearly
    between grid points and taken as zero outside. Every step reuses the same
    path family, so the iteration is one fixed linear map.
    """
    if seed is None:
        raise ValueError("a seed is required")
    axes = tuple(np.asarray(a, dtype=float) for a in x_axes)
    d = len(axes)
    points = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, d)
    trial = trial if trial is not None else gaussian(np.zeros(d), 2.0)
    values = np.asarray(trial(points), dtype=float)
    if np.any(values < 0) or not np.any(values > 0):
        raise ValueError("the trial function must be nonnegative and nonzero")
    values = values / np.max(values)
    stderr = np.zeros_like(values)
    scale = math.exp(t_iter * E_est)
    shape = tuple(len(a) for a in axes)

    growth, converged, k = [], False, 0
    for k in range(1, n_iter + 1):
        phi = grid_function(axes, values.reshape(shape))
        est = apply_Tt(phi, t_iter, V, kernel, alpha, points, mc, seed, dt_max, workers=workers)
        raw = scale * est.values
        peak = float(np.max(raw))
        if not peak > 0:
            raise Divergence(f"profile vanished at iteration {k}")
        growth.append(peak)
        new_values, new_stderr = raw / peak, scale * est.stderr / peak
        change = np.abs(new_values - values)
        band = 2.0 * np.sqrt(new_stderr ** 2 + stderr ** 2)
        values, stderr = new_values, new_stderr
        if k > 1 and np.all(change <= band):
            converged = True
            break
        recent = growth[-PROFILE_STALL:]
        if len(recent) == PROFILE_STALL and all(g > 1.0 + GROWTH_TOL for g in recent):
            raise Divergence(f"sup norm grows by {recent[-1]:.4g}x per step for {PROFILE_STALL} steps: "
                             f"E_est={E_est:g} lies above the ground energy")
        if len(recent) == PROFILE_STALL and all(g < 1.0 / (1.0 + GROWTH_TOL) for g in recent):
            raise Divergence(f"sup norm shrinks by {recent[-1]:.4g}x per step for {PROFILE_STALL} steps: "
                             f"E_est={E_est:g} lies below the ground energy")
    if not converged:
        logging.warning("profile iteration stopped after %d steps without settling", k)
    logging.info("bound state profile: %d iterations, last growth %.4g", k, growth[-1])
    return BoundStateProfile(axes, points, values, stderr, E_est, t_iter, k, converged, growth)


def _radii(points):
    return np.linalg.norm(points, axis=1)


def beta_fit(radii, values):
    """Slope of log(-log value) against log |x| on points with 0 < value < 1."""
    keep = (values > 0) & (values < 1) & (radii > 0)
    if np.sum(keep) < 2:
        return math.nan
    slope, _ = np.polyfit(np.log(radii[keep]), np.log(-np.log(values[keep])), 1)
    return float(slope)


def verify_envelope(profile, env, window, calibrate=True):
    """
    Calibrates C1 at the inner edge of the window (or keeps env.C1 with
    calibrate=False), then lists grid points in the window where the profile
    exceeds the envelope by more than three stderr. Points with relative
    stderr >= REL_STDERR_MAX are left out.
    """
    r_in, r_out = float(window[0]), float(window[1])
    radii = _radii(profile.points)
    if r_out > float(np.max(radii)) or r_in < 0 or r_in >= r_out:
        raise ValueError(f"window {window} is not inside the profile grid")
    inside = (radii >= r_in) & (radii <= r_out)
    with np.errstate(divide="ignore", invalid="ignore"):
        rel = np.where(profile.values > 0, profile.stderr / profile.values, np.inf)
    usable = inside & (rel < REL_STDERR_MAX)
    excluded = int(np.sum(inside & ~usable))
    if not np.any(usable):
        raise ValueError("no grid point in the window has a usable estimate")

    inner = usable & np.isclose(radii, np.min(radii[usable]))
    shape = env.with_C1(1.0).evaluate(profile.points)
    C1 = float(np.max(profile.values[inner] / shape[inner])) if calibrate else env.C1
    envelope = C1 * shape
    bad = usable & (profile.values - 3.0 * profile.stderr > envelope * (1.0 + 1e-12))
    violations = [{"x": profile.points[i].tolist(), "value": float(profile.values[i]),
                   "stderr": float(profile.stderr[i]), "envelope": float(envelope[i])}
                  for i in np.flatnonzero(bad)]
    fitted = beta_fit(radii[usable], profile.values[usable])
    logging.info("envelope %s: C1=%.4g, %d violations, beta_fit=%.4g (theory %g)", env.case, C1,
                 len(violations), fitted, env.beta_exp)
    return {
        "case": env.case,
        "constants": {"C1": C1, "C2": env.C2, "beta_exp": env.beta_exp, **env.params},
        "violations": violations,
        "beta_fit": fitted,
        "window": [r_in, r_out],
        "excluded": excluded,
    }


def check_bound_chain(profile, env, decomp, constants):
    """
    Profile points (x != 0) where phi(x) exceeds the Carmona bound at the
    envelope's (t(x), a(x)) by more than three stderr. The profile is scaled
    to unit L^2 norm first.
    """
    norm = profile.l2_norm()
    E = profile.E_used
    violations = []
    for x, value, err in zip(profile.points, profile.values, profile.stderr):
        if not np.linalg.norm(x) > 0:
            continue
        inserted = env.insertion(x, decomp)
        if inserted is None:
            continue
        t, a = inserted
        bound = carmona_bound(x, t, a, decomp, E, constants.alpha_exp, constants.D1, constants.D2, constants.D3)
        if (value - 3.0 * err) / norm > bound:
            violations.append({"x": x.tolist(), "value": float(value / norm), "bound": bound})
    return violations


def crossover_radius(env_fast, env_slow, R_max=50.0, n=5001):
    """Smallest |x| in (0, R_max] beyond which env_fast stays below env_slow, or None."""
    r = np.linspace(R_max / n, R_max, n)
    x = np.zeros((n, 1))
    x[:, 0] = r
    below = env_fast.evaluate(x) <= env_slow.evaluate(x)
    if not below[-1]:
        return None
    above = np.flatnonzero(~below)
    return float(r[above[-1] + 1]) if len(above) else float(r[0])
