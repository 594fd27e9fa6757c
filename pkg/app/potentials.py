# potentials.py
"""
External potentials and the scalar quantities derived from them.

A PotentialSpec wraps a vectorized callable on (N, d) arrays together with
the metadata the rest of the lab needs: singular points, declared class,
support. On top of it this module computes Kato ball norms and Brownian time
averages (the two Kato-class criteria), Khasminskii constants, L^p norms, and
the V = W + U splits with the W_inf, Sigma and W_a(x) values that feed the
decay envelopes.
"""

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np
from scipy import integrate, special
from scipy.interpolate import RegularGridInterpolator

from errors import NonFinite, NotInE, QuadratureFailure, AlphaTooLarge, WeightOverflow
from paths import TimeGrid, SeedSpec, sample_paths, line_integrals, cumulative_line_integrals
from quadrature import ball_rule, fibonacci_sphere, sphere_area

DECLARED_CLASSES = ("bounded", "L^p_with_p", "L1loc_positive", "kato_candidate")

# Kato verdict proxies.
KATO_DECAY_FACTOR = 1.5
KATO_ALPHA_MAX = 0.1
KATO_RTOL = 1e-3
DEFAULT_RADII = (0.1, 0.05, 0.025, 0.0125)
DEFAULT_T_LIST = (0.1, 0.02, 0.004, 0.001)
U_NORM_RTOL = 1e-4

# exp(-int V) above this is an overflow, not a sample.
LOG_WEIGHT_MAX = math.log(1e300)


def legal_p(d, p):
    """p = 1 when d = 1, p > d/2 when d >= 2."""
    if p is None or not math.isfinite(p):
        return False
    if d == 1:
        return p == 1
    return p > d / 2.0 and p >= 1


def default_p(d):
    return 1.0 if d == 1 else 2.0


@dataclass(frozen=True, eq=False)
class PotentialSpec:
    evaluate: Callable[[np.ndarray], np.ndarray]
    dim: int
    name: str = "V"
    singular_points: tuple = ()
    declared_class: str = "kato_candidate"
    p: Optional[float] = None
    params: dict = field(default_factory=dict)
    center: Optional[tuple] = None
    support_radius: Optional[float] = None
    # Sum potentials keep their non-singular and singular groups apart.
    regular: Optional["PotentialSpec"] = None
    singular: Optional["PotentialSpec"] = None

    def __post_init__(self):
        if int(self.dim) != self.dim or self.dim < 1:
            raise ValueError(f"dimension must be a positive integer, got {self.dim}")
        if self.declared_class not in DECLARED_CLASSES:
            raise ValueError(f"unknown potential class {self.declared_class!r}")
        if self.declared_class == "L^p_with_p" and not legal_p(self.dim, self.p):
            raise ValueError(f"p={self.p} is not admissible in d={self.dim} (need p=1 for d=1, p>d/2 otherwise)")

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            x = x.reshape(-1, self.dim)
        with np.errstate(all="ignore"):
            return np.asarray(self.evaluate(x), dtype=float).reshape(x.shape[0])

    @property
    def origin(self):
        return np.zeros(self.dim) if self.center is None else np.asarray(self.center, dtype=float)


def _radius(x, center):
    return np.linalg.norm(x - center, axis=1)


def _center(d, center):
    return np.zeros(d) if center is None else np.asarray(center, dtype=float).reshape(d)


def constant(c, d):
    c = float(c)
    return PotentialSpec(lambda x: np.full(x.shape[0], c), d, f"const({c:g})",
                         declared_class="bounded", params={"form": "constant", "c": c})


def polynomial(coeffs, d, center=None):
    """P(|x - center|) = sum_j coeffs[j] |x - center|^j."""
    coeffs = [float(a) for a in coeffs]
    c = _center(d, center)
    klass = "L1loc_positive" if all(a >= 0 for a in coeffs) else "kato_candidate"
    if len(coeffs) == 1:
        klass = "bounded"
    return PotentialSpec(lambda x: np.polynomial.polynomial.polyval(_radius(x, c), coeffs), d,
                         f"poly({','.join(f'{a:g}' for a in coeffs)})", declared_class=klass,
                         params={"form": "polynomial", "coeffs": coeffs}, center=tuple(c))


def harmonic(d, omega=1.0):
    return replace(polynomial([0.0, 0.0, 0.5 * omega ** 2], d), name=f"harmonic({omega:g})",
                   params={"form": "harmonic", "omega": float(omega)})


def coulomb(a, b, d, center=None, cutoff=None):
    """-a / |x - center|^b, optionally set to zero outside |x - center| <= cutoff."""
    a, b = float(a), float(b)
    c = _center(d, center)

    def evaluate(x):
        r = _radius(x, c)
        value = -a / r ** b
        if cutoff is not None:
            value = np.where(r <= cutoff, value, 0.0)
        return value

    singular = (tuple(c),) if a != 0.0 and b > 0.0 else ()
    return PotentialSpec(evaluate, d, f"coulomb({a:g},{b:g})", singular_points=singular,
                         declared_class="kato_candidate",
                         params={"form": "coulomb", "a": a, "b": b, "cutoff": cutoff},
                         center=tuple(c), support_radius=cutoff)


def gaussian_well(depth, width, d, center=None, truncate=None):
    """-depth * exp(-|x - center|^2 / width^2), zero beyond truncate when given."""
    depth, width = float(depth), float(width)
    c = _center(d, center)

    def evaluate(x):
        r = _radius(x, c)
        value = -depth * np.exp(-(r / width) ** 2)
        if truncate is not None:
            value = np.where(r <= truncate, value, 0.0)
        return value

    return PotentialSpec(evaluate, d, f"gauss({depth:g},{width:g})", declared_class="bounded",
                         params={"form": "gaussian_well", "depth": depth, "width": width, "truncate": truncate},
                         center=tuple(c), support_radius=truncate)


def square_well(depth, radius, d, center=None):
    depth, radius = float(depth), float(radius)
    c = _center(d, center)
    return PotentialSpec(lambda x: np.where(_radius(x, c) <= radius, -depth, 0.0), d,
                         f"square({depth:g},{radius:g})", declared_class="bounded",
                         params={"form": "square_well", "depth": depth, "radius": radius},
                         center=tuple(c), support_radius=radius)


def log_confining(lam, d):
    """lam * log(1 + |x|^2)."""
    lam = float(lam)
    return PotentialSpec(lambda x: lam * np.log1p(np.sum(x ** 2, axis=1)), d, f"logconf({lam:g})",
                         declared_class="L1loc_positive", params={"form": "log_confining", "lam": lam})


def tabulated(axes, values, fill_value=0.0, name="tabulated"):
    """Multilinear interpolation of values on the rectilinear grid spanned by axes."""
    axes = tuple(np.asarray(a, dtype=float) for a in axes)
    interpolator = RegularGridInterpolator(axes, np.asarray(values, dtype=float),
                                           bounds_error=False, fill_value=fill_value)
    return PotentialSpec(lambda x: interpolator(x), len(axes), name, declared_class="bounded",
                         params={"form": "tabulated", "shape": [len(a) for a in axes]})


def _fold(terms):
    if len(terms) == 1:
        return terms[0]

    def evaluate(x):
        total = terms[0](x)
        for term in terms[1:]:
            total = total + term(x)
        return total

    points = tuple(s for t in terms for s in t.singular_points)
    return PotentialSpec(evaluate, terms[0].dim, "+".join(t.name for t in terms), singular_points=points,
                         declared_class="bounded" if all(t.declared_class == "bounded" for t in terms)
                         else "kato_candidate",
                         params={"form": "sum", "terms": [t.params for t in terms]})


def sum_potentials(terms, name=None):
    """
    Sum of potentials. Terms without singular points are added first, then the
    singular ones, and the two groups are kept as .regular and .singular so the
    E-class split reproduces V bit for bit.
    """
    terms = list(terms)
    if not terms:
        raise ValueError("a sum needs at least one term")
    if len({t.dim for t in terms}) != 1:
        raise ValueError("all terms of a sum must share the dimension")
    regular_terms = [t for t in terms if not t.singular_points]
    singular_terms = [t for t in terms if t.singular_points]
    regular = _fold(regular_terms) if regular_terms else None
    singular = _fold(singular_terms) if singular_terms else None

    if regular is not None and singular is not None:
        evaluate = lambda x: regular(x) + singular(x)
    else:
        evaluate = (regular or singular).evaluate
    klass = "bounded" if all(t.declared_class == "bounded" for t in terms) else "kato_candidate"
    supports = [t.support_radius for t in terms]
    return PotentialSpec(evaluate, terms[0].dim, name or "+".join(t.name for t in terms),
                         singular_points=singular.singular_points if singular else (),
                         declared_class=klass, params={"form": "sum", "terms": [t.params for t in terms]},
                         support_radius=max(supports) if all(s is not None for s in supports) else None,
                         regular=regular, singular=singular)


def composite(coeffs, a, b, d):
    """P(|x|) - a/|x|^b, the polynomial-plus-Coulomb family."""
    return sum_potentials([polynomial(coeffs, d), coulomb(a, b, d)], name=f"poly-coulomb({a:g},{b:g})")


POTENTIAL_FORMS = {
    "constant": lambda t, d: constant(t["c"], d),
    "polynomial": lambda t, d: polynomial(t["coeffs"], d, t.get("center")),
    "harmonic": lambda t, d: harmonic(d, t.get("omega", 1.0)),
    "coulomb": lambda t, d: coulomb(t["a"], t["b"], d, t.get("center"), t.get("cutoff")),
    "gaussian_well": lambda t, d: gaussian_well(t["depth"], t["width"], d, t.get("center"), t.get("truncate")),
    "square_well": lambda t, d: square_well(t["depth"], t["radius"], d, t.get("center")),
    "log_confining": lambda t, d: log_confining(t["lam"], d),
    "tabulated": lambda t, d: tabulated(t["axes"], t["values"], t.get("fill_value", 0.0)),
    "sum": lambda t, d: sum_potentials([build_potential(term, d) for term in t["terms"]], t.get("name")),
}


def build_potential(table, d):
    """PotentialSpec from a config table {form = ..., <params>}."""
    form = table.get("form")
    if form not in POTENTIAL_FORMS:
        raise ValueError(f"unknown potential form {form!r} (known: {', '.join(sorted(POTENTIAL_FORMS))})")
    try:
        spec = POTENTIAL_FORMS[form](table, d)
    except KeyError as missing:
        raise ValueError(f"potential form {form!r} needs parameter {missing}") from None
    if "declared_class" in table:
        spec = replace(spec, declared_class=table["declared_class"], p=table.get("p"))
    return spec


# ---------------------------------------------------------------------------
# Quadrature over balls
# ---------------------------------------------------------------------------

def _ball_integral(integrand, d, center, radius, order, grading, breaks=()):
    edges = [0.0] + sorted(b for b in breaks if 0.0 < b < radius) + [radius]
    total = 0.0
    for i, (lo, hi) in enumerate(zip(edges[:-1], edges[1:])):
        points, weights, radii = ball_rule(d, lo, hi, order, grading if i == 0 else 1, center)
        with np.errstate(all="ignore"):
            total += float(np.dot(weights, integrand(points, radii)))
    return total


def converged_ball_integral(integrand, d, center, radius, order, grading=4, breaks=(), rtol=KATO_RTOL, what="integral"):
    """
    integral of integrand(points, |points - center|) over the ball, accepted
    only if doubling the order changes it by at most rtol (relative).
    """
    coarse = _ball_integral(integrand, d, center, radius, order, grading, breaks)
    fine = _ball_integral(integrand, d, center, radius, 2 * order, grading, breaks)
    if not (math.isfinite(coarse) and math.isfinite(fine)) or abs(fine - coarse) > rtol * abs(fine):
        raise QuadratureFailure(f"{what} does not converge under refinement ({coarse:.6g} vs {fine:.6g})")
    return fine


def kato_kernel(d):
    """lambda(x) as a function of |x|: 1 (d=1), -log|x| (d=2), |x|^(2-d) (d>=3)."""
    if d == 1:
        return np.ones_like
    if d == 2:
        return lambda s: -np.log(s)
    return lambda s: s ** (2.0 - d)


def kato_ball_norm(V, r, x_grid, order=24, grading=4, rtol=KATO_RTOL):
    """max over x_grid of int_{B_r(x)} |lambda(x - y) V(y)| dy."""
    if not r > 0:
        raise ValueError(f"ball radius must be positive, got {r}")
    lam = kato_kernel(V.dim)
    best = 0.0
    for x in np.atleast_2d(np.asarray(x_grid, dtype=float)):
        value = converged_ball_integral(lambda y, s: np.abs(lam(s) * V(y)), V.dim, x, r, order, grading,
                                        rtol=rtol, what=f"ball norm of {V.name} at {x.tolist()} (r={r:g})")
        best = max(best, value)
    return best


def lp_norm(V, p, radius=None, center=None, order=32, grading=4, rtol=1e-6):
    """
    (int |V|^p)^(1/p) over the ball of the given radius (default: the support
    radius of V, else 10) around center (default: first singular point, else
    the potential's center).
    """
    if center is None:
        center = V.singular_points[0] if V.singular_points else V.origin
    center = np.asarray(center, dtype=float)
    if radius is None:
        radius = V.support_radius if V.support_radius is not None else 10.0
    breaks = (V.support_radius,) if V.support_radius is not None else ()
    integral = converged_ball_integral(lambda y, s: np.abs(V(y)) ** p, V.dim, center, radius, order, grading,
                                       breaks=breaks, rtol=rtol, what=f"L^{p:g} norm of {V.name}")
    return integral ** (1.0 / p)


def lp_uniform_norm(V, p, x_grid, order=24, grading=4):
    """sup over x_grid of (int_{|x-y|<=1} |V(y)|^p dy)^(1/p)."""
    best = 0.0
    for x in np.atleast_2d(np.asarray(x_grid, dtype=float)):
        value = converged_ball_integral(lambda y, s: np.abs(V(y)) ** p, V.dim, x, 1.0, order, grading,
                                        what=f"local L^{p:g} norm of {V.name}")
        best = max(best, value ** (1.0 / p))
    return best


# ---------------------------------------------------------------------------
# Brownian time averages
# ---------------------------------------------------------------------------

def kato_grid(V):
    """Default sup_x grid: the singular points plus the potential's center."""
    points = [np.asarray(s, dtype=float) for s in V.singular_points] + [V.origin]
    return np.unique(np.vstack(points), axis=0)


def _batch_from_origin(V, grid, mc, seed, workers):
    return sample_paths(np.zeros((mc, V.dim)), grid, seed, workers)


def alpha_t(V, t, x_grid, mc, seed, n_steps=64, workers=1):
    """Monte Carlo sup over x_grid of E^x[int_0^t |V(B_s)| ds]."""
    if not t > 0:
        raise ValueError(f"t must be positive, got {t}")
    batch = _batch_from_origin(V, TimeGrid(float(t), n_steps), mc, seed, workers)
    best, best_err = 0.0, 0.0
    for x in np.atleast_2d(np.asarray(x_grid, dtype=float)):
        values = line_integrals(batch.translated(x), V, absolute=True)
        mean = float(np.mean(values))
        if mean > best:
            best, best_err = mean, float(np.std(values, ddof=1) / math.sqrt(mc)) if mc > 1 else 0.0
    logging.info("alpha_t %s t=%g: %.6g +/- %.2g (mc=%d)", V.name, t, best, best_err, mc)
    return best


def _time_columns(grid, t):
    """Grid column weights reproducing time t by linear interpolation."""
    position = t / grid.dt
    k = int(math.floor(position + 1e-9))
    if k >= grid.n_steps:
        return grid.n_steps, grid.n_steps, 0.0
    return k, k + 1, max(0.0, position - k)


def alpha_curve(V, t_list, x_grid, mc, seed, steps_per_min_t=16, workers=1):
    """
    (t, alpha_t) for every t in t_list from one family of paths on [0, max t]:
    prefix integrals of |V| are nondecreasing, so the curve is too.
    """
    times = sorted(float(t) for t in t_list)
    if not times or times[0] <= 0:
        raise ValueError("t_list must hold positive times")
    grid = TimeGrid.with_max_step(times[-1], times[0] / steps_per_min_t)
    batch = _batch_from_origin(V, grid, mc, seed, workers)
    sup = np.zeros(len(times))
    for x in np.atleast_2d(np.asarray(x_grid, dtype=float)):
        cumulative = cumulative_line_integrals(batch.translated(x), V, absolute=True)
        means = cumulative.mean(axis=0)
        for i, t in enumerate(times):
            lo, hi, frac = _time_columns(grid, t)
            sup[i] = max(sup[i], (1.0 - frac) * means[lo] + frac * means[hi])
    return [(t, float(a)) for t, a in zip(times, sup)]


def khasminskii_bound(V, t_star, alpha_tstar, t):
    """
    gamma = 1/(1 - alpha_t*), beta = log(gamma)/t*, bound = gamma^(floor(t/t*) + 1).
    """
    if alpha_tstar >= 1.0:
        raise AlphaTooLarge(f"alpha_t*={alpha_tstar:.4g} >= 1 for {getattr(V, 'name', V)} at t*={t_star:g}")
    if not t_star > 0 or t < 0:
        raise ValueError("need t* > 0 and t >= 0")
    gamma = 1.0 / (1.0 - alpha_tstar)
    beta = math.log(gamma) / t_star
    bound = gamma ** (math.floor(t / t_star + 1e-12) + 1)
    return gamma, beta, bound


@dataclass(frozen=True)
class MomentEstimate:
    mean: float
    stderr: float
    x: tuple
    n_samples: int


def empirical_exp_moment(V, t, x_grid, mc, seed, n_steps=64, mode="abs", workers=1):
    """
    sup over x_grid of E^x[exp(int_0^t |V|)] (mode="abs") or of
    E^x[exp(-int_0^t V)] (mode="minus").
    """
    if mode not in ("abs", "minus"):
        raise ValueError(f"unknown moment mode {mode!r}")
    batch = _batch_from_origin(V, TimeGrid(float(t), n_steps), mc, seed, workers)
    best = None
    for x in np.atleast_2d(np.asarray(x_grid, dtype=float)):
        integrals = line_integrals(batch.translated(x), V, absolute=(mode == "abs"))
        exponent = integrals if mode == "abs" else -integrals
        if np.max(exponent) > LOG_WEIGHT_MAX:
            raise WeightOverflow(f"exponential moment of {V.name} overflows at x={x.tolist()}, t={t:g}")
        weights = np.exp(exponent)
        mean = float(np.mean(weights))
        if best is None or mean > best.mean:
            stderr = float(np.std(weights, ddof=1) / math.sqrt(mc)) if mc > 1 else 0.0
            best = MomentEstimate(mean, stderr, tuple(x.tolist()), mc)
    logging.info("exp moment %s (%s) t=%g: %.6g +/- %.2g at x=%s", V.name, mode, t, best.mean, best.stderr, best.x)
    return best


def resolvent_kernel(d):
    """Integral kernel of (p^2/2 + 1)^(-1) as a function of r = |x - y|."""
    nu = d / 2.0 - 1.0
    return lambda r: 2.0 * (2.0 * math.pi) ** (-d / 2.0) * (math.sqrt(2.0) / r) ** nu * special.kv(nu, math.sqrt(2.0) * r)


def alpha_constant(d, p, T=1.0, eps=0.5):
    """C_T(eps) with alpha_T <= C_T(eps) ||V||_p."""
    if d == 1:
        return math.sqrt(2.0 * T / math.pi)
    q = p / (p - 1.0)
    far = T * (2.0 * math.pi) ** (-d / 2.0) * (2.0 * math.pi / q) ** (d / (2.0 * q))
    kernel = resolvent_kernel(d)
    near, _ = integrate.quad(lambda r: kernel(r) ** q * r ** (d - 1), 0.0, eps, limit=200)
    return far + math.exp(T) * (sphere_area(d) * near) ** (1.0 / q)


def beta_lp_estimate(V, p=None, T=1.0, eps=0.5, norm=None):
    """
    Upper estimate of the Khasminskii rate beta, linear in ||V||_p:
    (2 log 2 / T) C_T(eps) ||V||_p. Valid while C_T(eps) ||V||_p <= 1/2.
    """
    p = p if p is not None else (V.p if V.p is not None else default_p(V.dim))
    if not legal_p(V.dim, p):
        raise ValueError(f"p={p} is not admissible in d={V.dim}")
    norm = lp_norm(V, p) if norm is None else norm
    if norm == 0.0:
        return 0.0
    c_t = alpha_constant(V.dim, p, T, eps)
    if c_t * norm > 0.5:
        logging.warning("beta estimate for %s outside its range: C_T*||V||_%g = %.3g > 1/2", V.name, p, c_t * norm)
    return 2.0 * math.log(2.0) / T * c_t * norm


# ---------------------------------------------------------------------------
# Kato report
# ---------------------------------------------------------------------------

@dataclass
class KatoReport:
    potential: str
    radii: list
    ball_norms: list
    alpha_curve: list
    verdict: str
    tolerances: dict
    seeds: dict
    reasons: list = field(default_factory=list)

    def to_dict(self):
        return {
            "potential": self.potential,
            "radii": self.radii,
            "ball_norms": [n if math.isfinite(n) else "inf" for n in self.ball_norms],
            "alpha_curve": [[t, a] for t, a in self.alpha_curve],
            "verdict": self.verdict,
            "tolerances": self.tolerances,
            "seeds": self.seeds,
            "reasons": self.reasons,
        }


def kato_report(V, seed, radii=DEFAULT_RADII, t_list=DEFAULT_T_LIST, x_grid=None, mc=1000, workers=1):
    """
    Both Kato criteria on decreasing radii and times, with a verdict:
    kato when ball norms shrink by KATO_DECAY_FACTOR per halving (d>=2; only
    finiteness in d=1) and alpha at the smallest t is below KATO_ALPHA_MAX;
    not_kato when a ball norm diverges or stops decreasing; inconclusive otherwise.
    """
    x_grid = kato_grid(V) if x_grid is None else np.atleast_2d(np.asarray(x_grid, dtype=float))
    radii = sorted((float(r) for r in radii), reverse=True)
    norms = []
    for r in radii:
        try:
            norms.append(kato_ball_norm(V, r, x_grid))
        except QuadratureFailure as failure:
            logging.info("Ball norm treated as divergent: %s", failure)
            norms.append(math.inf)

    reasons = []
    finite = all(math.isfinite(n) for n in norms)
    if not finite:
        reasons.append("ball norm diverges")
        balls_pass, balls_fail = False, True
    elif V.dim == 1:
        balls_pass, balls_fail = True, False
    else:
        ratios = [a / b for a, b in zip(norms[:-1], norms[1:]) if b > 0]
        zero = all(n == 0.0 for n in norms)
        balls_pass = zero or (len(ratios) == len(norms) - 1 and all(q >= KATO_DECAY_FACTOR for q in ratios))
        balls_fail = not zero and any(q < 1.0 + 1e-3 for q in ratios)
        if not balls_pass:
            reasons.append(f"ball norm ratios per halving {['%.3g' % q for q in ratios]}")

    curve = []
    alpha_pass = False
    if finite:
        try:
            curve = alpha_curve(V, t_list, x_grid, mc, seed, workers=workers)
        except NonFinite as failure:
            reasons.append(str(failure))
        else:
            values = [a for _, a in curve]
            monotone = all(values[i] <= values[i + 1] for i in range(len(values) - 1))
            alpha_pass = monotone and values[0] < KATO_ALPHA_MAX
            if not alpha_pass:
                reasons.append(f"alpha at t={curve[0][0]:g} is {values[0]:.3g}")

    if balls_pass and alpha_pass:
        verdict = "kato"
    elif balls_fail:
        verdict = "not_kato"
    else:
        verdict = "inconclusive"
    logging.info("Kato verdict for %s: %s (ball norms %s)", V.name, verdict, ["%.4g" % n for n in norms])

    return KatoReport(
        potential=V.name,
        radii=radii,
        ball_norms=norms,
        alpha_curve=[(t, a) for t, a in sorted(curve)],
        verdict=verdict,
        tolerances={"decay_factor": KATO_DECAY_FACTOR, "alpha_max": KATO_ALPHA_MAX, "quadrature_rtol": KATO_RTOL},
        seeds={"master_seed": seed.master_seed, "sample_index": seed.sample_index, "mc": mc},
        reasons=reasons,
    )


# ---------------------------------------------------------------------------
# E-class decomposition
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DecompositionHints:
    W: Optional[PotentialSpec] = None
    U: Optional[PotentialSpec] = None
    p: Optional[float] = None
    spike_radius: float = 1.0
    # "singular": cut the singular part at spike_radius; "negative": move
    # min(V, 0) inside spike_radius of the center into U; "none": U = 0.
    rule: str = "singular"
    u_norm_cap: Optional[float] = None
    lower_w_inf: bool = False
    neighborhood_radius: float = 1.0
    grid_extent: float = 10.0
    grid_points: Optional[int] = None


@dataclass(frozen=True, eq=False)
class EDecomposition:
    V: PotentialSpec
    W: PotentialSpec
    U: PotentialSpec
    W_inf: float
    p: float
    U_p_norm: float
    w_argmin: tuple
    spike_radius: Optional[float]
    grid: np.ndarray
    hints: DecompositionHints


def evaluation_grid(d, extent, points=None, shells=()):
    """Lattice on [-extent, extent]^d plus points just outside the given (center, radius) shells."""
    points = points or {1: 2001, 2: 201, 3: 41}.get(d, 21)
    axis = extent * np.linspace(-1.0, 1.0, points)
    lattice = np.stack(np.meshgrid(*([axis] * d), indexing="ij"), axis=-1).reshape(-1, d)
    extra = [np.asarray(c, dtype=float) + r * (1.0 + 1e-9) * fibonacci_sphere(d, 64 if d > 1 else 2)
             for c, r in shells]
    return np.vstack([lattice] + extra) if extra else lattice


def _masked(name, d, base, mask_fn, keep_inside):
    """base where the mask holds (keep_inside) or where it does not."""
    if keep_inside:
        return PotentialSpec(lambda x: np.where(mask_fn(x), base(x), 0.0), d, name, declared_class="kato_candidate")
    return PotentialSpec(lambda x: np.where(mask_fn(x), 0.0, base(x)), d, name, declared_class="kato_candidate")


def _zero(d):
    return PotentialSpec(lambda x: np.zeros(x.shape[0]), d, "0", declared_class="bounded")


def _split(V, rule, radius):
    """(W, U, centers) for the hint rule at the given spike radius."""
    d = V.dim
    if rule == "singular" and V.singular_points:
        centers = [np.asarray(s, dtype=float) for s in V.singular_points]
        inside = lambda x: np.any([_radius(x, c) <= radius for c in centers], axis=0)
        sing = V.singular if V.singular is not None else V
        U = _masked(f"U[{sing.name}]", d, sing, inside, True)
        if V.regular is not None:
            reg = V.regular
            W = PotentialSpec(lambda x: reg(x) + np.where(inside(x), 0.0, sing(x)), d, f"W[{V.name}]",
                              declared_class="kato_candidate")
        elif V.singular is None:
            W = _masked(f"W[{V.name}]", d, V, inside, False)
        else:
            W = _masked(f"W[{V.name}]", d, sing, inside, False)
        return W, U, centers
    if rule == "negative":
        c = V.origin
        inside = lambda x: (_radius(x, c) <= radius) & (V(x) < 0.0)
        return (_masked(f"W[{V.name}]", d, V, inside, False), _masked(f"U[{V.name}]", d, V, inside, True), [c])
    return V, _zero(d), []


def _u_norm(U, p, centers, radius):
    if not centers or radius <= 0:
        return 0.0
    total = 0.0
    for c in centers:
        try:
            total += lp_norm(U, p, radius=radius, center=c, rtol=U_NORM_RTOL) ** p
        except QuadratureFailure as failure:
            raise NotInE(f"U is not in L^{p:g}: {failure}") from None
    return total ** (1.0 / p)


def decompose_E(V, hints=None):
    """
    V = W + U with W bounded below on the evaluation grid and U <= 0 in L^p.

    Explicit W/U in the hints are checked and used as given. Otherwise the
    singular part of V is cut at hints.spike_radius (rule "singular") or the
    negative part near the center is moved into U (rule "negative"). With
    u_norm_cap the spike radius is shrunk until ||U||_p <= cap; with
    lower_w_inf the part of U near the minimizer of V is moved back into W.
    """
    hints = hints or DecompositionHints()
    d = V.dim
    p = hints.p if hints.p is not None else (V.p if V.p is not None else default_p(d))
    if not legal_p(d, p):
        raise NotInE(f"p={p} is not admissible in d={d}")

    radius = hints.spike_radius
    if hints.W is not None and hints.U is not None:
        W, U, centers = hints.W, hints.U, []
        radius = None
    else:
        W, U, centers = _split(V, hints.rule, radius)

    if hints.u_norm_cap is not None and centers:
        cap = hints.u_norm_cap
        if _u_norm(U, p, centers, radius) > cap:
            lo, hi = 0.0, radius
            for _ in range(40):
                mid = 0.5 * (lo + hi)
                if _u_norm(_split(V, hints.rule, mid)[1], p, centers, mid) <= cap:
                    lo = mid
                else:
                    hi = mid
            radius = lo
            W, U, centers = _split(V, hints.rule, radius)
            logging.info("Spike radius shrunk to %.6g so that ||U||_%g <= %.4g", radius, p, cap)

    shells = [(c, radius) for c in centers] if radius else []
    grid = evaluation_grid(d, hints.grid_extent, hints.grid_points, shells)
    v_values = V(grid)
    finite = np.isfinite(v_values)

    if hints.lower_w_inf:
        y = grid[finite][np.argmin(v_values[finite])]
        near = lambda x: _radius(x, y) <= hints.neighborhood_radius
        W0, U0 = W, U
        W = PotentialSpec(lambda x: W0(x) + np.where(near(x), U0(x), 0.0), d, f"{W0.name}~", declared_class="kato_candidate")
        U = PotentialSpec(lambda x: np.where(near(x), 0.0, U0(x)), d, f"{U0.name}~", declared_class="kato_candidate")
        logging.info("Moved U within %.3g of %s into W", hints.neighborhood_radius, y.tolist())

    w_values, u_values = W(grid), U(grid)
    if np.any(u_values[np.isfinite(u_values)] > 0.0):
        raise NotInE("U must be nonpositive")
    mismatch = finite & (w_values + u_values != v_values)
    if np.any(mismatch):
        worst = float(np.max(np.abs(w_values + u_values - v_values)[mismatch]))
        if hints.W is None or worst > 1e-12 * (1.0 + float(np.max(np.abs(v_values[finite])))):
            raise NotInE(f"W + U does not reproduce V on the grid (max error {worst:.3g})")
    w_finite = np.isfinite(w_values)
    if not np.all(w_finite):
        raise NotInE("W is not finite on the evaluation grid")
    k = int(np.argmin(w_values))

    if hints.W is not None and hints.U is not None:
        try:
            u_norm = lp_norm(U, p, rtol=U_NORM_RTOL)
        except QuadratureFailure as failure:
            raise NotInE(f"U is not in L^{p:g}: {failure}") from None
    else:
        u_norm = _u_norm(U, p, centers, radius)

    decomp = EDecomposition(V=V, W=W, U=U, W_inf=float(w_values[k]), p=p, U_p_norm=u_norm,
                            w_argmin=tuple(grid[k].tolist()), spike_radius=radius, grid=grid, hints=hints)
    logging.info("E-decomposition of %s: W_inf=%.6g at %s, ||U||_%g=%.6g", V.name, decomp.W_inf,
                 decomp.w_argmin, p, u_norm)
    return decomp


def W_a(decomp, x, a, n_per_axis=None):
    """
    min of W over a lattice on the closed ball |y - x| <= a (spacing a/n per
    axis), plus the point of the ball nearest to the minimizer of W.
    """
    if not a > 0:
        raise ValueError(f"a must be positive, got {a}")
    d = decomp.W.dim
    x = np.asarray(x, dtype=float).reshape(d)
    n = n_per_axis or {1: 400, 2: 60, 3: 12}.get(d, 6)
    offsets = a * (np.arange(-n, n + 1) / n)
    lattice = np.stack(np.meshgrid(*([offsets] * d), indexing="ij"), axis=-1).reshape(-1, d)
    lattice = lattice[np.linalg.norm(lattice, axis=1) <= a]
    target = np.asarray(decomp.w_argmin, dtype=float)
    gap = np.linalg.norm(target - x)
    nearest = target if gap <= a else x + a * (target - x) / gap
    values = decomp.W(np.vstack([x + lattice, nearest[None, :]]))
    return float(np.min(values[np.isfinite(values)]))


@dataclass(frozen=True)
class SigmaEstimate:
    sigma: float
    radii: list
    sequence: list
    unbounded: bool


def sigma_liminf(decomp, R_list, n_dirs=256):
    """
    inf of W on the shells |x| = R for every R in R_list. Sigma is the value on
    the outermost shell, or +inf when the sequence increases with nondecreasing
    increments.
    """
    radii = [float(r) for r in R_list]
    if any(b <= a for a, b in zip(radii[:-1], radii[1:])):
        raise ValueError("R_list must be increasing")
    dirs = fibonacci_sphere(decomp.W.dim, n_dirs)
    sequence = [float(np.min(decomp.W(R * dirs))) for R in radii]
    increments = np.diff(sequence)
    unbounded = (len(increments) >= 2 and bool(np.all(increments > 1e-9))
                 and bool(np.all(np.diff(increments) >= -1e-9 * np.abs(increments[1:]))))
    sigma = math.inf if unbounded else sequence[-1]
    logging.info("Sigma for %s: %s over R=%s", decomp.V.name, sigma, radii)
    return SigmaEstimate(sigma, radii, sequence, unbounded)
