# semigroup.py
"""
Monte Carlo estimator of the vacuum-reduced semigroup

    (f, T_t g) = int dx f(x) E^x[ e^{-int_0^t V(B_s) ds} e^{-(alpha/4)||K_t||^2} g(B_t) ]

with the x-integral done by importance sampling from the Gaussian proposal
declared with f. Every sample i draws its path from substream seed.offset(i);
the proposal points come from a separate Philox key, drawn in index order.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.interpolate import RegularGridInterpolator

from errors import FitUnstable, WeightOverflow
from fieldkernel import effective_actions
from paths import PathBatch, SeedSpec, TimeGrid, line_integrals, sample_paths
from potentials import LOG_WEIGHT_MAX
from quadrature import gauss_legendre

DEFAULT_DT = 0.01
FIT_RESIDUAL_MAX = 1e-2
# Key offset for the proposal stream; paths keep the master key itself.
PROPOSAL_KEY = 0x9E3779B97F4A7C15
INNER_PRODUCT_ORDER = 48
INNER_PRODUCT_SPAN = 10.0


@dataclass(frozen=True, eq=False)
class TestFunction:
    """Real test function on (N, d) arrays with a Gaussian proposal N(center, width^2 I)."""
    evaluate: Callable[[np.ndarray], np.ndarray]
    center: np.ndarray
    width: float
    name: str = "f"

    __test__ = False

    def __post_init__(self):
        object.__setattr__(self, "center", np.asarray(self.center, dtype=float).reshape(-1))
        if not self.width > 0:
            raise ValueError(f"proposal width must be positive, got {self.width}")

    @property
    def dim(self):
        return self.center.shape[0]

    def __call__(self, x):
        return np.asarray(self.evaluate(np.atleast_2d(x)), dtype=float)

    def proposal_density(self, x):
        d = self.dim
        r2 = np.sum((x - self.center) ** 2, axis=1) / self.width ** 2
        return np.exp(-0.5 * r2) / (2.0 * math.pi * self.width ** 2) ** (d / 2.0)

    def sample_proposal(self, n, seed):
        key = SeedSpec((seed.master_seed + PROPOSAL_KEY) % 2 ** 64, seed.sample_index)
        return self.center + self.width * key.generator().standard_normal((n, self.dim))

    def scaled(self, factor):
        return TestFunction(lambda x: factor * self.evaluate(x), self.center, self.width, f"{factor:g}*{self.name}")


def gaussian(center, width, amplitude=1.0, name=None):
    """amplitude * exp(-|x - center|^2 / (2 width^2)), proposal of the same shape."""
    center = np.asarray(center, dtype=float).reshape(-1)
    return TestFunction(lambda x: amplitude * np.exp(-0.5 * np.sum((x - center) ** 2, axis=1) / width ** 2),
                        center, width, name or f"gauss({center.tolist()},{width:g})")


def normal_density(d, center=None, width=1.0):
    center = np.zeros(d) if center is None else center
    return gaussian(center, width, (2.0 * math.pi * width ** 2) ** (-d / 2.0), name="normal")


def grid_function(axes, values, name="tabulated"):
    """Linear interpolation of values on a product grid, zero outside it."""
    axes = tuple(np.asarray(a, dtype=float) for a in axes)
    values = np.asarray(values, dtype=float).reshape(tuple(len(a) for a in axes))
    interp = RegularGridInterpolator(axes, values, bounds_error=False, fill_value=0.0)
    return lambda x: interp(np.atleast_2d(x))


@dataclass(frozen=True, eq=False)
class MatrixElementEstimate:
    mean: float
    stderr: float
    n_samples: int
    t: float
    seed: SeedSpec
    alpha: float
    potential: str
    kernel: dict = None
    contributions: np.ndarray = field(default=None, repr=False)
    weights: np.ndarray = field(default=None, repr=False)

    def to_dict(self):
        return {
            "mean": self.mean,
            "stderr": self.stderr,
            "n_samples": self.n_samples,
            "t": self.t,
            "seed": {"master_seed": self.seed.master_seed, "sample_index": self.seed.sample_index},
            "alpha": self.alpha,
            "potential": self.potential,
            "kernel": self.kernel,
        }


def _stats(values):
    n = len(values)
    mean = float(np.mean(values))
    stderr = float(np.std(values, ddof=1) / math.sqrt(n)) if n > 1 else 0.0
    return mean, stderr


def _log_weights(batch, V, kernel, alpha, scheme, workers):
    """-int V - (alpha/4)||K_t||^2 per path; WeightOverflow when e^{-int V} passes 1e300."""
    exponent = np.zeros(len(batch))
    if V is not None:
        exponent -= line_integrals(batch, V)
        if np.max(exponent) > LOG_WEIGHT_MAX:
            raise WeightOverflow(f"e^(-int V) exceeds 1e300 for {V.name} at t={batch.grid.t_final:g}")
    if alpha > 0.0:
        if kernel is None:
            raise ValueError("a field kernel is needed for alpha > 0")
        exponent -= effective_actions(batch, kernel, alpha, scheme, workers)
    return exponent


def inner_product(f, g, order=INNER_PRODUCT_ORDER, span=INNER_PRODUCT_SPAN):
    """(f, g) by a tensor Gauss-Legendre rule on the box center_f +/- span * width_f."""
    nodes, weights = gauss_legendre(-span * f.width, span * f.width, order)
    d = f.dim
    grid = np.stack(np.meshgrid(*([nodes] * d), indexing="ij"), axis=-1).reshape(-1, d) + f.center
    w = np.prod(np.stack(np.meshgrid(*([weights] * d), indexing="ij"), axis=-1).reshape(-1, d), axis=1)
    return float(np.sum(w * f(grid) * np.asarray(g(grid), dtype=float)))


def _grid_for(t, dt_max, grid):
    if grid is not None:
        if abs(grid.t_final - t) > 1e-12 * max(1.0, t):
            raise ValueError(f"time grid ends at {grid.t_final}, not at t={t}")
        return grid
    return TimeGrid.with_max_step(float(t), dt_max)


def matrix_element(f, g, t, V=None, kernel=None, alpha=0.0, n_samples=10000, seed=None,
                   dt_max=DEFAULT_DT, grid=None, scheme="midpoint", workers=1):
    """
    Estimate (f, T_t g). f is a TestFunction (its proposal drives the x-integral),
    g any callable on (N, d) arrays. t = 0 gives (f, g) by quadrature.
    """
    if seed is None:
        raise ValueError("a seed is required")
    if t < 0:
        raise ValueError(f"t must be >= 0, got {t}")
    kernel_spec = kernel.spec() if kernel is not None else None
    name = V.name if V is not None else "0"
    if t == 0:
        value = inner_product(f, g)
        return MatrixElementEstimate(value, 0.0, 0, 0.0, seed, alpha, name, kernel_spec)

    grid = _grid_for(t, dt_max, grid)
    x = f.sample_proposal(n_samples, seed)
    batch = sample_paths(x, grid, seed, workers)
    weights = np.exp(_log_weights(batch, V, kernel, alpha, scheme, workers))
    contributions = f(x) / f.proposal_density(x) * weights * np.asarray(g(batch.positions[:, -1, :]), dtype=float)
    mean, stderr = _stats(contributions)
    logging.info("matrix_element t=%g alpha=%g V=%s: %.6g +/- %.2g (n=%d)", t, alpha, name, mean, stderr, n_samples)
    return MatrixElementEstimate(mean, stderr, n_samples, float(t), seed, alpha, name, kernel_spec,
                                 contributions, weights)


@dataclass(frozen=True, eq=False)
class GridEstimate:
    points: np.ndarray
    values: np.ndarray
    stderr: np.ndarray
    t: float
    weights: np.ndarray = field(default=None, repr=False)


def apply_Tt(f, t, V=None, kernel=None, alpha=0.0, x_grid=None, mc=10000, seed=None,
             dt_max=DEFAULT_DT, scheme="midpoint", workers=1):
    """
    (T_t f)(x) at every point of x_grid. One path family from the origin is
    translated to every x (common random numbers across the grid).
    """
    if seed is None:
        raise ValueError("a seed is required")
    points = np.atleast_2d(np.asarray(x_grid, dtype=float))
    d = points.shape[1]
    if t == 0:
        values = np.asarray(f(points), dtype=float)
        return GridEstimate(points, values, np.zeros_like(values), 0.0)

    grid = TimeGrid.with_max_step(float(t), dt_max)
    base = sample_paths(np.zeros((mc, d)), grid, seed, workers)
    invariant = kernel is None or alpha == 0.0 or kernel.model.translation_invariant
    shared = _log_weights(base, None, kernel, alpha, scheme, workers) if invariant else None

    values, errors, all_weights = np.empty(len(points)), np.empty(len(points)), []
    for i, x in enumerate(points):
        batch = base.translated(x)
        exponent = _log_weights(batch, V, None, 0.0, scheme, workers)
        exponent += shared if invariant else _log_weights(batch, None, kernel, alpha, scheme, workers)
        weights = np.exp(exponent)
        all_weights.append(weights)
        values[i], errors[i] = _stats(weights * np.asarray(f(batch.positions[:, -1, :]), dtype=float))
    logging.info("apply_Tt t=%g alpha=%g on %d points (mc=%d): max %.6g", t, alpha, len(points), mc,
                 float(np.max(values)))
    return GridEstimate(points, values, errors, float(t), np.stack(all_weights))


@dataclass(frozen=True)
class EnergyEstimate:
    E0: float
    E0_stderr: float
    fit_window: tuple
    fit_residual: float
    times: list
    log_elements: list
    log_stderr: list
    continuous_spectrum: bool

    def to_dict(self):
        return {
            "E0": self.E0,
            "E0_stderr": self.E0_stderr,
            "fit_window": list(self.fit_window),
            "fit_residual": self.fit_residual,
            "times": self.times,
            "log_elements": self.log_elements,
            "log_stderr": self.log_stderr,
            "continuous_spectrum": self.continuous_spectrum,
        }


def _prefix(batch, k):
    return PathBatch(batch.starts, batch.increments[:, :k], batch.positions[:, :k + 1],
                     TimeGrid(float(batch.grid.times[k]), k))


def _slope_stderr(x, sigma):
    """Standard error of the least-squares slope for independent errors sigma."""
    centered = x - np.mean(x)
    return float(math.sqrt(np.sum(centered ** 2 * sigma ** 2)) / np.sum(centered ** 2))


def _linear_fit(x, y):
    slope, intercept = np.polyfit(x, y, 1)
    residual = float(np.sqrt(np.mean((y - (slope * x + intercept)) ** 2)))
    return float(slope), residual


def ground_energy(f, V=None, kernel=None, alpha=0.0, t_list=(0.5, 1.0, 1.5, 2.0), n_samples=10000, seed=None,
                  dt_max=DEFAULT_DT, scheme="midpoint", residual_max=FIT_RESIDUAL_MAX, workers=1):
    """
    E0 as the least-squares slope of -log (f, T_t f) against t.

    All elements come from prefixes of one path family on [0, max t], so the
    sequence is strongly correlated and the slope noise stays small. The fit
    window is the largest run of consecutive times (at least three) whose
    RMS residual is within residual_max; ties go to the later window.
    """
    if seed is None:
        raise ValueError("a seed is required")
    times = sorted(float(t) for t in t_list)
    if len(times) < 3 or times[0] <= 0:
        raise ValueError("ground_energy needs at least three positive times")
    grid = TimeGrid.with_max_step(times[-1], dt_max)
    x = f.sample_proposal(n_samples, seed)
    batch = sample_paths(x, grid, seed, workers)
    prefactor = f(x) / f.proposal_density(x)

    logs, log_errs = [], []
    for t in times:
        k = max(1, int(round(t / grid.dt)))
        sub = _prefix(batch, k)
        weights = np.exp(_log_weights(sub, V, kernel, alpha, scheme, workers))
        mean, stderr = _stats(prefactor * weights * f(sub.positions[:, -1, :]))
        if not mean > 0:
            raise FitUnstable(f"(f, T_t f) = {mean:.3g} is not positive at t={t:g}")
        logs.append(-math.log(mean))
        log_errs.append(stderr / mean)

    t_arr, y_arr = np.asarray(times), np.asarray(logs)
    best = None
    for length in range(len(times), 2, -1):
        for start in range(len(times) - length, -1, -1):
            window = slice(start, start + length)
            slope, residual = _linear_fit(t_arr[window], y_arr[window])
            if residual <= residual_max:
                error = _slope_stderr(t_arr[window], np.asarray(log_errs)[window])
                best = (slope, error, residual, (times[start], times[start + length - 1]))
                break
        if best:
            break
    if best is None:
        _, residual = _linear_fit(t_arr, y_arr)
        raise FitUnstable(f"-log (f, T_t f) is not linear within {residual_max:g} on any window (residual {residual:.3g})")

    slope, error, residual, window = best
    # Spreading without a bound state: -log (f, T_t f) grows like log t, not like t.
    _, log_residual = _linear_fit(np.log(t_arr), y_arr)
    _, lin_residual = _linear_fit(t_arr, y_arr)
    continuous = bool(log_residual < lin_residual)
    logging.info("ground_energy: E0=%.6g +/- %.2g on window %s (residual %.2g)%s", slope, error, window, residual,
                 ", continuous spectrum suspected" if continuous else "")
    return EnergyEstimate(slope, error, window, residual, times, logs, log_errs, continuous)


@dataclass(frozen=True)
class LawCheck:
    law: str
    lhs: float
    rhs: float
    lhs_stderr: float
    rhs_stderr: float
    z_score: float
    detail: dict = field(default_factory=dict)

    def to_dict(self):
        return {"law": self.law, "lhs": self.lhs, "rhs": self.rhs, "lhs_stderr": self.lhs_stderr,
                "rhs_stderr": self.rhs_stderr, "z_score": self.z_score, "detail": self.detail}


def _z(a, a_err, b, b_err):
    diff = a - b
    scale = math.sqrt(a_err ** 2 + b_err ** 2)
    if diff == 0.0:
        return 0.0
    return diff / scale if scale > 0 else math.copysign(math.inf, diff)


def check_semigroup(f, g, s, t, V=None, kernel=None, alpha=0.0, x_axes=None, n_samples=10000, mc=10000,
                    seed=None, dt_max=DEFAULT_DT, scheme="midpoint", workers=1):
    """
    (f, T_s (T_t g)) against (f, T_{s+t} g). The inner T_t g is tabulated on
    the product grid x_axes and interpolated linearly. The tabulation noise
    (fully correlated across the grid) and the interpolation error measured
    against the every-other-point grid both go into the lhs error budget.

    At alpha > 0 the table T_t g is the vacuum-reduced operator, so the field
    correlation between [0, s] and [s, s+t] is dropped and the two sides differ.
    check_semigroup_split carries that coupling.
    """
    if seed is None:
        raise ValueError("a seed is required")
    rhs = matrix_element(f, g, s + t, V, kernel, alpha, n_samples, seed, dt_max, None, scheme, workers)
    if s == 0:
        return LawCheck("semigroup", rhs.mean, rhs.mean, rhs.stderr, rhs.stderr, 0.0, {"s": 0.0, "t": t})
    if x_axes is None:
        raise ValueError("x_axes is needed for the intermediate table")

    axes = [np.asarray(a, dtype=float) for a in x_axes]
    points = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, len(axes))
    inner_seed = seed.offset(n_samples)
    outer_seed = seed.offset(n_samples + mc)
    table = apply_Tt(g, t, V, kernel, alpha, points, mc, inner_seed, dt_max, scheme, workers)
    shape = tuple(len(a) for a in axes)
    h = grid_function(axes, table.values.reshape(shape))
    h_err = grid_function(axes, table.stderr.reshape(shape))
    coarse = grid_function([a[::2] for a in axes], table.values.reshape(shape)[tuple(slice(None, None, 2) for _ in axes)])

    lhs = matrix_element(f, h, s, V, kernel, alpha, n_samples, outer_seed, dt_max, None, scheme, workers)
    table_noise = matrix_element(f, h_err, s, V, kernel, alpha, n_samples, outer_seed, dt_max, None, scheme, workers)
    interp_gap = matrix_element(f, lambda x: np.abs(h(x) - coarse(x)), s, V, kernel, alpha, n_samples,
                                outer_seed, dt_max, None, scheme, workers)
    # Linear interpolation error drops 4x per halving; the coarse gap bounds it.
    interp_err = interp_gap.mean / 3.0
    lhs_err = math.sqrt(lhs.stderr ** 2 + table_noise.mean ** 2 + interp_err ** 2)
    z = _z(lhs.mean, lhs_err, rhs.mean, rhs.stderr)
    logging.info("semigroup s=%g t=%g: %.6g vs %.6g (z=%.2f)", s, t, lhs.mean, rhs.mean, z)
    return LawCheck("semigroup", lhs.mean, rhs.mean, lhs_err, rhs.stderr, z,
                    {"s": s, "t": t, "table_noise": table_noise.mean, "interpolation_error": interp_err})


def check_semigroup_split(f, g, s, t, V=None, kernel=None, alpha=0.0, n_samples=10000, seed=None,
                          dt_max=DEFAULT_DT, scheme="midpoint", workers=1):
    """
    Semigroup law with the field coupling carried across the split point.

    Every path of the (f, T_{s+t} g) estimate is cut at the grid point nearest
    s and continued from B_s on a fresh substream. The weight is taken over the
    whole joined path, so ||K_{s+t}||^2 keeps its cross term between [0, s]
    and [s, s+t]. The first segment is shared with the rhs, which makes the
    independent-error z conservative.
    """
    if seed is None:
        raise ValueError("a seed is required")
    rhs = matrix_element(f, g, s + t, V, kernel, alpha, n_samples, seed, dt_max, None, scheme, workers)
    if s == 0 or t == 0:
        return LawCheck("semigroup", rhs.mean, rhs.mean, rhs.stderr, rhs.stderr, 0.0, {"s": s, "t": t})

    grid = TimeGrid.with_max_step(float(s + t), dt_max)
    if grid.n_steps < 2:
        raise ValueError(f"dt_max={dt_max} leaves no interior split point on [0, {s + t}]")
    k = min(max(int(round(s / grid.dt)), 1), grid.n_steps - 1)
    x = f.sample_proposal(n_samples, seed)
    head = _prefix(sample_paths(x, grid, seed, workers), k)
    tail_grid = TimeGrid(grid.t_final - float(grid.times[k]), grid.n_steps - k)
    tail = sample_paths(head.positions[:, -1, :], tail_grid, seed.offset(2 * n_samples), workers)
    joined = PathBatch(x, np.concatenate([head.increments, tail.increments], axis=1),
                       np.concatenate([head.positions, tail.positions[:, 1:]], axis=1), grid)

    weights = np.exp(_log_weights(joined, V, kernel, alpha, scheme, workers))
    lhs_mean, lhs_err = _stats(f(x) / f.proposal_density(x) * weights * np.asarray(g(joined.positions[:, -1, :])))
    z = _z(lhs_mean, lhs_err, rhs.mean, rhs.stderr)
    logging.info("semigroup (joined paths) s=%g t=%g alpha=%g: %.6g vs %.6g (z=%.2f)", s, t, alpha, lhs_mean,
                 rhs.mean, z)
    return LawCheck("semigroup", lhs_mean, rhs.mean, lhs_err, rhs.stderr, z,
                    {"s": s, "t": t, "split_time": float(grid.times[k])})


def check_symmetry(f, g, t, V=None, kernel=None, alpha=0.0, n_samples=10000, seed=None,
                   dt_max=DEFAULT_DT, scheme="midpoint", workers=1):
    """(f, T_t g) against (g, T_t f), both from the same seed."""
    a = matrix_element(f, g, t, V, kernel, alpha, n_samples, seed, dt_max, None, scheme, workers)
    if g is f:
        return LawCheck("symmetry", a.mean, a.mean, a.stderr, a.stderr, 0.0, {"t": t})
    b = matrix_element(g, f, t, V, kernel, alpha, n_samples, seed, dt_max, None, scheme, workers)
    z = _z(a.mean, a.stderr, b.mean, b.stderr)
    logging.info("symmetry t=%g: %.6g vs %.6g (z=%.2f)", t, a.mean, b.mean, z)
    return LawCheck("symmetry", a.mean, b.mean, a.stderr, b.stderr, z, {"t": t})


@dataclass(frozen=True)
class DiamagneticCheck:
    with_field: float
    without_field: float
    holds: bool
    fraction_dominated: float
    n_samples: int

    def to_dict(self):
        return {"with_field": self.with_field, "without_field": self.without_field, "holds": self.holds,
                "fraction_dominated": self.fraction_dominated, "n_samples": self.n_samples}


def check_diamagnetic(f, g, t, V=None, kernel=None, alpha=1.0, n_samples=10000, seed=None,
                      dt_max=DEFAULT_DT, scheme="midpoint", workers=1):
    """
    Same paths with and without the field: every path weight with the field is
    the weight without it times e^{-(alpha/4)||K_t||^2} <= 1.
    """
    with_field = matrix_element(f, g, t, V, kernel, alpha, n_samples, seed, dt_max, None, scheme, workers)
    without = matrix_element(f, g, t, V, None, 0.0, n_samples, seed, dt_max, None, scheme, workers)
    if t == 0:
        return DiamagneticCheck(with_field.mean, without.mean, True, 1.0, 0)
    dominated = with_field.weights <= without.weights
    fraction = float(np.mean(dominated))
    holds = bool(np.all(dominated)) and with_field.mean <= without.mean
    logging.info("diamagnetic alpha=%g: %.6g <= %.6g on %.1f%% of samples", alpha, with_field.mean,
                 without.mean, 100.0 * fraction)
    return DiamagneticCheck(with_field.mean, without.mean, holds, fraction, n_samples)


def check_positivity(weights):
    """All sampled path weights finite and strictly positive."""
    weights = np.asarray(weights, dtype=float)
    return bool(np.all(np.isfinite(weights)) and np.all(weights > 0.0))


@dataclass(frozen=True)
class ContinuityCheck:
    times: list
    deviations: list
    shrinking: bool


def check_continuity(f, t_list, V=None, kernel=None, alpha=0.0, x_grid=None, mc=10000, seed=None,
                     dt_max=DEFAULT_DT, workers=1):
    """sup over x_grid of |T_t f - f| for shrinking t; the sequence should go to zero with t."""
    times = sorted((float(t) for t in t_list), reverse=True)
    points = np.atleast_2d(np.asarray(x_grid, dtype=float))
    target = f(points)
    deviations = []
    for t in times:
        est = apply_Tt(f, t, V, kernel, alpha, points, mc, seed, min(dt_max, t / 4.0), workers=workers)
        deviations.append(float(np.max(np.abs(est.values - target))))
    shrinking = all(b <= a for a, b in zip(deviations[:-1], deviations[1:]))
    return ContinuityCheck(times, deviations, shrinking)


@dataclass(frozen=True, eq=False)
class PointwiseBound:
    points: np.ndarray
    lhs: np.ndarray
    rhs: np.ndarray
    rhs_stderr: np.ndarray
    violations: int


def check_pointwise_bound(phi, E, t, V, x_grid, mc=10000, seed=None, dt_max=DEFAULT_DT, workers=1):
    """
    |phi(x)| <= e^{tE} E^x[e^{-int V} |phi(B_t)|] at every grid point, counting
    violations beyond three stderr. phi is a callable on (N, d) arrays.
    """
    points = np.atleast_2d(np.asarray(x_grid, dtype=float))
    magnitude = lambda x: np.abs(np.asarray(phi(x), dtype=float))
    est = apply_Tt(magnitude, t, V, None, 0.0, points, mc, seed, dt_max, workers=workers)
    scale = math.exp(t * E)
    lhs, rhs, err = magnitude(points), scale * est.values, scale * est.stderr
    violations = int(np.sum(lhs > rhs + 3.0 * err))
    return PointwiseBound(points, lhs, rhs, err, violations)


def discretization_scan(f, g, t, V=None, kernel=None, alpha=0.0, n_samples=10000, seed=None,
                        n_steps_list=(64, 128, 256), scheme="midpoint", workers=1):
    """Matrix elements at every step count, with successive differences."""
    estimates = [matrix_element(f, g, t, V, kernel, alpha, n_samples, seed, grid=TimeGrid(float(t), n),
                                scheme=scheme, workers=workers) for n in n_steps_list]
    differences = [abs(b.mean - a.mean) for a, b in zip(estimates[:-1], estimates[1:])]
    return estimates, differences
