# paths.py
"""
Discretized Brownian paths and the integrals taken along them.

A path is sampled on a TimeGrid from its own counter-based substream
(master_seed, sample_index), so a batch of paths is the same whatever order
or thread it was drawn on. Time integrals of potentials use the trapezoid
rule over path positions; Stratonovich integrals use the midpoint-of-position
rule, with the explicit Ito + divergence form kept as a cross-check.
"""

import logging
import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from errors import NonFinite
from workers import chunk_bounds, indexed_map

# Distance below which a path position counts as sitting on a singular point.
SINGULAR_TOL = 1e-12


@dataclass(frozen=True)
class TimeGrid:
    t_final: float
    n_steps: int

    def __post_init__(self):
        if not (self.t_final > 0.0) or not math.isfinite(self.t_final):
            raise ValueError(f"t_final must be positive and finite, got {self.t_final}")
        if int(self.n_steps) != self.n_steps or self.n_steps < 1:
            raise ValueError(f"n_steps must be a positive integer, got {self.n_steps}")

    @property
    def dt(self):
        return self.t_final / self.n_steps

    @property
    def times(self):
        # k/n first, then scale: the last point is t_final exactly.
        return self.t_final * (np.arange(self.n_steps + 1) / self.n_steps)

    @classmethod
    def with_max_step(cls, t_final, dt_max):
        """Smallest grid on [0, t_final] whose step does not exceed dt_max."""
        n_steps = max(1, int(math.ceil(t_final / dt_max - 1e-9)))
        return cls(float(t_final), n_steps)

    def index_of(self, t):
        """Grid index of time t; t must sit on the grid."""
        k = int(round(t / self.dt))
        if k < 0 or k > self.n_steps or abs(k * self.dt - t) > 1e-9 * self.t_final:
            raise ValueError(f"t={t} is not a point of the grid (dt={self.dt})")
        return k


@dataclass(frozen=True)
class SeedSpec:
    master_seed: int
    sample_index: int = 0

    def __post_init__(self):
        if not 0 <= int(self.master_seed) < 2 ** 64:
            raise ValueError(f"master_seed must fit in 64 bits, got {self.master_seed}")
        if not 0 <= int(self.sample_index) < 2 ** 64:
            raise ValueError(f"sample_index must fit in 64 bits, got {self.sample_index}")

    def generator(self):
        """
        Philox stream keyed by master_seed; the sample index occupies the top
        64-bit word of the 256-bit counter, so substreams never overlap.
        """
        bit_generator = np.random.Philox(key=int(self.master_seed),
                                         counter=int(self.sample_index) << 192)
        return np.random.Generator(bit_generator)

    def offset(self, k):
        return SeedSpec(self.master_seed, self.sample_index + int(k))


@dataclass(frozen=True, eq=False)
class BrownianPath:
    start: np.ndarray
    increments: np.ndarray
    positions: np.ndarray
    grid: TimeGrid

    @property
    def dim(self):
        return self.start.shape[0]

    @classmethod
    def from_increments(cls, start, increments, grid):
        start = np.asarray(start, dtype=float).reshape(-1)
        increments = np.asarray(increments, dtype=float).reshape(grid.n_steps, start.shape[0])
        # Sequential accumulation: positions[k+1] == positions[k] + increments[k] bit for bit.
        positions = np.cumsum(np.vstack([start[None, :], increments]), axis=0)
        return cls(start, increments, positions, grid)


@dataclass(frozen=True, eq=False)
class PathBatch:
    """N paths on a shared grid: starts (N, d), increments (N, n, d), positions (N, n+1, d)."""
    starts: np.ndarray
    increments: np.ndarray
    positions: np.ndarray
    grid: TimeGrid

    def __len__(self):
        return self.starts.shape[0]

    @property
    def dim(self):
        return self.starts.shape[1]

    def path(self, i):
        return BrownianPath(self.starts[i], self.increments[i], self.positions[i], self.grid)

    @classmethod
    def from_path(cls, path):
        return cls(path.start[None, :], path.increments[None, :, :], path.positions[None, :, :], path.grid)

    def translated(self, x):
        """Same increments moved by x. Positions are shifted copies, not re-accumulated."""
        x = np.asarray(x, dtype=float)
        return PathBatch(self.starts + x, self.increments, self.positions + x, self.grid)


@dataclass(frozen=True)
class VectorField:
    """Vector field f: R^d -> R^d on (N, d) arrays, with optional divergence (N,)."""
    value: Callable[[np.ndarray], np.ndarray]
    divergence: Optional[Callable[[np.ndarray], np.ndarray]] = None
    name: str = "field"


def _draw_increments(n_steps, dim, dt, seed):
    return seed.generator().standard_normal((n_steps, dim)) * math.sqrt(dt)


def sample_path(x0, grid, seed):
    """One Brownian path from x0 on grid, drawn from the substream of seed."""
    x0 = np.asarray(x0, dtype=float).reshape(-1)
    if x0.shape[0] < 1:
        raise ValueError("dimension must be at least 1")
    increments = _draw_increments(grid.n_steps, x0.shape[0], grid.dt, seed)
    return BrownianPath.from_increments(x0, increments, grid)


def sample_paths(starts, grid, seed, workers=1):
    """
    Batch of paths; path i starts at starts[i] and uses substream seed.offset(i).
    Bit-identical to calling sample_path for every i.
    """
    starts = np.atleast_2d(np.asarray(starts, dtype=float))
    n_paths, dim = starts.shape

    def draw(start, stop):
        return np.stack([_draw_increments(grid.n_steps, dim, grid.dt, seed.offset(i))
                         for i in range(start, stop)]) if stop > start else np.empty((0, grid.n_steps, dim))

    increments = np.concatenate(indexed_map(draw, chunk_bounds(n_paths), workers), axis=0)
    positions = np.cumsum(np.concatenate([starts[:, None, :], increments], axis=1), axis=1)
    return PathBatch(starts, increments, positions, grid)


def evaluate_along(V, points, dt):
    """
    V at path points (..., d). Points that sit on a declared singular point are
    moved by sqrt(dt) along a fixed unit vector before evaluation.
    """
    shape = points.shape[:-1]
    flat = points.reshape(-1, points.shape[-1])
    if V.singular_points:
        unit = np.full(flat.shape[1], 1.0 / math.sqrt(flat.shape[1]))
        for s in V.singular_points:
            hit = np.linalg.norm(flat - np.asarray(s, dtype=float), axis=1) < SINGULAR_TOL
            if np.any(hit):
                flat = flat.copy()
                flat[hit] += math.sqrt(dt) * unit
    with np.errstate(all="ignore"):
        values = np.asarray(V(flat), dtype=float)
    if not np.all(np.isfinite(values)):
        bad = flat[~np.isfinite(values)][0]
        raise NonFinite(f"potential {V.name} is not finite at {bad.tolist()}")
    return values.reshape(shape)


def line_integrals(batch, V, absolute=False):
    """Trapezoid approximations of int_0^t V(B_s) ds for every path in the batch."""
    dt = batch.grid.dt
    values = evaluate_along(V, batch.positions, dt)
    if absolute:
        values = np.abs(values)
    return dt * (0.5 * values[:, 0] + values[:, 1:-1].sum(axis=1) + 0.5 * values[:, -1])


def cumulative_line_integrals(batch, V, absolute=False):
    """Running trapezoid integrals at every grid time, shape (N, n+1); column 0 is zero."""
    dt = batch.grid.dt
    values = evaluate_along(V, batch.positions, dt)
    if absolute:
        values = np.abs(values)
    steps = 0.5 * dt * (values[:, 1:] + values[:, :-1])
    return np.concatenate([np.zeros((len(batch), 1)), np.cumsum(steps, axis=1)], axis=1)


def potential_line_integral(path, V):
    """int_0^t V(B_s) ds along one path (trapezoid over positions)."""
    return float(line_integrals(PathBatch.from_path(path), V)[0])


def _field_values(field, points):
    flat = points.reshape(-1, points.shape[-1])
    with np.errstate(all="ignore"):
        values = np.asarray(field.value(flat), dtype=float).reshape(points.shape)
    if not np.all(np.isfinite(values)):
        raise NonFinite(f"vector field {field.name} is not finite along the path")
    return values


def _divergence_values(field, points):
    if field.divergence is None:
        raise ValueError(f"vector field {field.name} has no divergence")
    flat = points.reshape(-1, points.shape[-1])
    with np.errstate(all="ignore"):
        values = np.asarray(field.divergence(flat), dtype=float).reshape(points.shape[:-1])
    if not np.all(np.isfinite(values)):
        raise NonFinite(f"divergence of {field.name} is not finite along the path")
    return values


def stratonovich_integrals(batch, field):
    """Midpoint rule: sum_k f((X_k + X_{k+1})/2) . dB_k, one value per path."""
    mids = 0.5 * (batch.positions[:, :-1, :] + batch.positions[:, 1:, :])
    return np.sum(_field_values(field, mids) * batch.increments, axis=(1, 2))


def ito_integrals(batch, field):
    """Left-point rule: sum_k f(X_k) . dB_k."""
    return np.sum(_field_values(field, batch.positions[:, :-1, :]) * batch.increments, axis=(1, 2))


def stratonovich_via_ito_integrals(batch, field):
    """Ito sum plus half the trapezoid time integral of the divergence."""
    dt = batch.grid.dt
    div = _divergence_values(field, batch.positions)
    correction = 0.5 * dt * (0.5 * div[:, 0] + div[:, 1:-1].sum(axis=1) + 0.5 * div[:, -1])
    return ito_integrals(batch, field) + correction


def stratonovich_integral(path, field, scheme="midpoint"):
    """
    Stratonovich integral of field along one path.

    scheme="midpoint" is the default; scheme="ito" evaluates the Ito sum plus
    half the divergence integral and needs field.divergence.
    """
    batch = PathBatch.from_path(path)
    if scheme == "midpoint":
        return float(stratonovich_integrals(batch, field)[0])
    if scheme == "ito":
        return float(stratonovich_via_ito_integrals(batch, field)[0])
    raise ValueError(f"unknown Stratonovich scheme {scheme!r}")


def ito_integral(path, field):
    return float(ito_integrals(PathBatch.from_path(path), field)[0])


def quadratic_variation(batch):
    """sum_k |dB_k|^2 per path."""
    return np.sum(batch.increments ** 2, axis=(1, 2))


def stratonovich_second_moment_bound(batch, field):
    """
    Right side of the second moment bound for the Stratonovich integral,
    int_0^t E[2 |f(B_s)|^2 + 1/2 (div f(B_s))^2] ds, with the expectation
    taken over the batch and the time integral by the trapezoid rule.
    """
    dt = batch.grid.dt
    f = _field_values(field, batch.positions)
    div = _divergence_values(field, batch.positions)
    integrand = np.mean(2.0 * np.sum(f ** 2, axis=2) + 0.5 * div ** 2, axis=0)
    bound = float(dt * (0.5 * integrand[0] + integrand[1:-1].sum() + 0.5 * integrand[-1]))
    logging.debug("Second moment bound for %s over %d paths: %.6g", field.name, len(batch), bound)
    return bound
