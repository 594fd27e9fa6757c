# scattering.py
"""
Lippmann-Schwinger solver for the variable-mass cutoff functions.

Psi(k, x) = e^{ikx} - (1/4pi) int e^{i|k||x-y|} v(y) Psi(k, y) / |x-y| dy

is collocated on a cubic lattice of spacing h. Off-diagonal cells use the
point kernel times h^3; the diagonal cell integrates 1/|x-y| exactly over the
ball with the cell's volume. The lattice operator is a discrete convolution
applied by FFT. Born (Neumann) iteration is tried first; a dense solve on the
support points (or GMRES above DENSE_LIMIT unknowns) takes over when it does
not converge.
"""

import csv
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.signal import fftconvolve
from scipy.sparse.linalg import LinearOperator, gmres

from errors import BornDivergence, SingularQuadrature, SupportViolation
from fieldkernel import StandardCutoff, TabulatedCutoff, polarization_vectors
from quadrature import fibonacci_sphere
from workers import indexed_map

SOLVER_TOL = 1e-8
BORN_MAX_ITER = 500
BORN_NORM_ITER = 30
DENSE_LIMIT = 2000
TABLE_COLUMNS = ("k_index", "x_index", "mu", "j", "re", "im")


def free_kernel(x, y, kappa):
    """-(1/4pi) e^{i kappa |x-y|} / |x-y| for x != y."""
    r = np.linalg.norm(np.asarray(x, dtype=float) - np.asarray(y, dtype=float), axis=-1)
    return -np.exp(1j * kappa * r) / (4.0 * math.pi * r)


def diagonal_cell(kappa, h):
    """
    -(1/4pi) int_{|y| < a} e^{i kappa |y|} / |y| dy with a the radius of the ball
    of volume h^3: -[e^{i kappa a}(a/(i kappa) + 1/kappa^2) - 1/kappa^2].
    """
    a = (3.0 / (4.0 * math.pi)) ** (1.0 / 3.0) * h
    value = -(np.exp(1j * kappa * a) * (a / (1j * kappa) + 1.0 / kappa ** 2) - 1.0 / kappa ** 2)
    if not np.isfinite(value):
        raise SingularQuadrature(f"diagonal cell integral is not finite (kappa={kappa}, h={h})")
    return complex(value)


@dataclass(frozen=True, eq=False)
class ScatteringProblem:
    v: object
    k: np.ndarray
    h: float
    half_width: float = None
    far_points: np.ndarray = None

    def __post_init__(self):
        k = np.asarray(self.k, dtype=float).reshape(-1)
        object.__setattr__(self, "k", k)
        if self.v.dim != 3 or k.shape[0] != 3:
            raise ValueError("the Lippmann-Schwinger solver is three-dimensional")
        if not np.linalg.norm(k) > 0.0:
            raise ValueError("wave vector must be nonzero")
        if self.v.support_radius is None:
            raise ValueError(f"potential {self.v.name} has no declared compact support")
        if not self.h > 0:
            raise ValueError(f"grid spacing must be positive, got {self.h}")
        reach = float(np.max(np.abs(self.v.origin))) + self.v.support_radius
        width = reach if self.half_width is None else float(self.half_width)
        if width < reach:
            raise ValueError(f"grid half width {width} does not cover the support (needs {reach})")
        object.__setattr__(self, "half_width", width)

    @property
    def kappa(self):
        return float(np.linalg.norm(self.k))

    @property
    def n_half(self):
        return int(math.ceil(self.half_width / self.h - 1e-9))

    @property
    def axis(self):
        n = self.n_half
        return self.h * np.arange(-n, n + 1)

    @property
    def points(self):
        axis = self.axis
        return np.stack(np.meshgrid(axis, axis, axis, indexing="ij"), axis=-1).reshape(-1, 3)

    @property
    def shape(self):
        n = 2 * self.n_half + 1
        return (n, n, n)

    def with_k(self, k):
        return ScatteringProblem(self.v, k, self.h, self.half_width, self.far_points)


@dataclass(frozen=True, eq=False)
class ScatteringSolution:
    psi_on_grid: np.ndarray
    method: str
    iterations: int
    condition: float
    residual_norm: float
    born_norm: float


def _kernel_array(problem):
    """Kernel times h^3 on all lattice offsets (-2n..2n)^3, diagonal cell at the center."""
    n = problem.n_half
    offsets = problem.h * np.arange(-2 * n, 2 * n + 1)
    grid = np.stack(np.meshgrid(offsets, offsets, offsets, indexing="ij"), axis=-1)
    r = np.linalg.norm(grid, axis=-1)
    with np.errstate(divide="ignore", invalid="ignore"):
        kernel = -np.exp(1j * problem.kappa * r) / (4.0 * math.pi * r) * problem.h ** 3
    kernel[2 * n, 2 * n, 2 * n] = diagonal_cell(problem.kappa, problem.h)
    return kernel


class _LatticeOperator:
    """f -> sum_j K(x_i - x_j) v_j f_j on the whole lattice."""

    def __init__(self, problem):
        self.kernel = _kernel_array(problem)
        self.v = problem.v(problem.points).reshape(problem.shape)
        self.shape = problem.shape

    def __call__(self, f):
        return fftconvolve(self.kernel, self.v * f, mode="valid")


def _plane_wave(problem, points=None):
    points = problem.points if points is None else points
    return np.exp(1j * (points @ problem.k))


def _residual(op, psi, psi0):
    return float(np.max(np.abs(psi - psi0 - op(psi))))


def born_norm_estimate(op, shape, iterations=BORN_NORM_ITER):
    """Power iteration estimate of the norm of f -> K(v f)."""
    f = np.ones(shape, dtype=complex)
    estimate = 0.0
    for _ in range(iterations):
        g = op(f)
        norm = float(np.linalg.norm(g))
        if norm == 0.0:
            return 0.0
        estimate = norm / float(np.linalg.norm(f))
        f = g / norm
    return estimate


def _born(op, psi0, tol, max_iter):
    psi = psi0.copy()
    history = []
    for iteration in range(1, max_iter + 1):
        new = psi0 + op(psi)
        change = float(np.max(np.abs(new - psi)))
        psi = new
        history.append(change)
        if not math.isfinite(change):
            break
        if change <= tol * max(1.0, float(np.max(np.abs(psi)))):
            return psi, iteration
        if len(history) > 5 and all(b > a for a, b in zip(history[-6:-1], history[-5:])):
            raise BornDivergence(f"Born iteration diverging after {iteration} steps (change {change:.3g})")
    raise BornDivergence(f"Born iteration hit the cap of {max_iter} steps (change {history[-1]:.3g})")


def _collocation(problem, op, psi0, tol):
    """Solve on the support points, then extend to the lattice with one operator application."""
    points = problem.points
    v_flat = op.v.reshape(-1)
    support = np.flatnonzero(v_flat != 0.0)
    rhs = psi0.reshape(-1)[support]
    condition = math.nan
    if len(support) <= DENSE_LIMIT:
        xs = points[support]
        with np.errstate(divide="ignore", invalid="ignore"):
            K = free_kernel(xs[:, None, :], xs[None, :, :], problem.kappa) * problem.h ** 3
        np.fill_diagonal(K, diagonal_cell(problem.kappa, problem.h))
        A = np.eye(len(support), dtype=complex) - K * v_flat[support][None, :]
        psi_support = np.linalg.solve(A, rhs)
        condition = float(np.linalg.cond(A))
        iterations = 1
    else:
        def matvec(x):
            full = np.zeros(problem.shape, dtype=complex).reshape(-1)
            full[support] = x
            return x - op(full.reshape(problem.shape)).reshape(-1)[support]

        A = LinearOperator((len(support), len(support)), matvec=matvec, dtype=complex)
        counter = {"n": 0}
        psi_support, info = gmres(A, rhs, rtol=tol * 1e-2, atol=0.0, restart=100, maxiter=200,
                                  callback=lambda _: counter.__setitem__("n", counter["n"] + 1),
                                  callback_type="pr_norm")
        if info != 0:
            logging.warning("GMRES stopped with info=%d after %d iterations", info, counter["n"])
        iterations = counter["n"]
    full = np.zeros(problem.shape, dtype=complex).reshape(-1)
    full[support] = psi_support
    psi = psi0 + op(full.reshape(problem.shape))
    return psi, iterations, condition


def solve_ls(problem, method="auto", tol=SOLVER_TOL, max_iter=BORN_MAX_ITER):
    """
    Psi on the lattice of problem. method: "born", "collocation" or "auto"
    (Born first, collocation when Born diverges).
    """
    if method not in ("auto", "born", "collocation"):
        raise ValueError(f"unknown method {method!r}")
    psi0 = _plane_wave(problem).reshape(problem.shape)
    op = _LatticeOperator(problem)
    if not np.any(op.v):
        return ScatteringSolution(psi0, "born", 0, 1.0, 0.0, 0.0)

    born_norm = born_norm_estimate(op, problem.shape)
    logging.info("Lippmann-Schwinger |k|=%.4g h=%.4g: Born operator norm ~ %.4g", problem.kappa, problem.h, born_norm)
    condition = math.nan
    if method in ("auto", "born"):
        try:
            psi, iterations = _born(op, psi0, tol, max_iter)
            used = "born"
        except BornDivergence as failure:
            if method == "born":
                raise
            logging.warning("%s; falling back to collocation", failure)
            psi, iterations, condition = _collocation(problem, op, psi0, tol)
            used = "collocation"
    else:
        psi, iterations, condition = _collocation(problem, op, psi0, tol)
        used = "collocation"

    residual = _residual(op, psi, psi0)
    logging.info("Solved by %s in %d iterations, residual %.3g", used, iterations, residual)
    return ScatteringSolution(psi, used, iterations, condition, residual, born_norm)


def _support_sources(sol, problem):
    points = problem.points
    v_flat = problem.v(points)
    support = np.flatnonzero(v_flat != 0.0)
    return points[support], v_flat[support] * sol.psi_on_grid.reshape(-1)[support] * problem.h ** 3


def evaluate_psi(sol, problem, points, chunk=512):
    """Psi at arbitrary points by one application of the integral operator to the lattice solution."""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    sources, strength = _support_sources(sol, problem)
    out = _plane_wave(problem, points)
    if len(sources) == 0:
        return out
    diag = diagonal_cell(problem.kappa, problem.h) / problem.h ** 3
    for lo in range(0, len(points), chunk):
        block = points[lo:lo + chunk]
        r = np.linalg.norm(block[:, None, :] - sources[None, :, :], axis=-1)
        with np.errstate(divide="ignore", invalid="ignore"):
            kernel = np.where(r > 0.0, -np.exp(1j * problem.kappa * r) / (4.0 * math.pi * r), diag)
        out[lo:lo + chunk] += kernel @ strength
    return out


def psi_gradient(sol, problem, points, chunk=512):
    """
    d/dx_mu Psi = i k_mu e^{ikx} + (1/4pi) sum (1/r - i|k|)(x_mu - y_mu) e^{i|k|r} v Psi h^3 / r^2,
    shape (N, 3). The coincident source, if any, drops out by symmetry.
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    sources, strength = _support_sources(sol, problem)
    kappa = problem.kappa
    out = 1j * problem.k[None, :] * _plane_wave(problem, points)[:, None]
    for lo in range(0, len(points), chunk):
        block = points[lo:lo + chunk]
        diff = block[:, None, :] - sources[None, :, :]
        r = np.linalg.norm(diff, axis=-1)
        with np.errstate(divide="ignore", invalid="ignore"):
            radial = np.where(r > 0.0, (1.0 / r - 1j * kappa) * np.exp(1j * kappa * r) / r ** 2, 0.0)
        out[lo:lo + chunk] += np.einsum("nsm,ns,s->nm", diff, radial, strength) / (4.0 * math.pi)
    return out


def helmholtz_residual(sol, problem, psi=None):
    """max over interior lattice points of |(-Delta_h + v - |k|^2) Psi| with the 7-point stencil."""
    psi = sol.psi_on_grid if psi is None else psi
    h = problem.h
    v = problem.v(problem.points).reshape(problem.shape)
    center = psi[1:-1, 1:-1, 1:-1]
    laplacian = (psi[2:, 1:-1, 1:-1] + psi[:-2, 1:-1, 1:-1] + psi[1:-1, 2:, 1:-1] + psi[1:-1, :-2, 1:-1]
                 + psi[1:-1, 1:-1, 2:] + psi[1:-1, 1:-1, :-2] - 6.0 * center) / h ** 2
    residual = -laplacian + (v[1:-1, 1:-1, 1:-1] - problem.kappa ** 2) * center
    return float(np.max(np.abs(residual)))


def decay_constant(sol, problem, far_points):
    """max over far_points of |Psi - e^{ikx}| (1 + |x|^2)^(1/2)."""
    far_points = np.atleast_2d(np.asarray(far_points, dtype=float))
    scattered = evaluate_psi(sol, problem, far_points) - _plane_wave(problem, far_points)
    return float(np.max(np.abs(scattered) * np.sqrt(1.0 + np.sum(far_points ** 2, axis=1))))


def radial_decay_scan(sol, problem, radii, n_dirs=64):
    """decay_constant on shells |x| = R, one value per radius."""
    dirs = fibonacci_sphere(3, n_dirs)
    return [(float(R), decay_constant(sol, problem, R * dirs)) for R in radii]


@dataclass(frozen=True, eq=False)
class CutoffTables:
    k_nodes: np.ndarray
    k_weights: np.ndarray
    x_axes: tuple
    table: np.ndarray
    header: dict

    def to_model(self, fallback):
        return TabulatedCutoff(self.k_nodes, self.k_weights, self.x_axes, self.table, fallback, self.header)


def build_variable_mass_cutoff(problem, cutoff, disp, order, method="auto", workers=1):
    """
    rho_mu^j(k, x) = phi(|k|) e_mu(k, j) conj(Psi(k, x)) / omega^omega_power on
    the cutoff's k-nodes times the problem lattice. cutoff must keep k = 0 out
    of its support (k_min > 0).
    """
    if not isinstance(cutoff, StandardCutoff):
        raise ValueError("the profile for a variable-mass cutoff is a StandardCutoff")
    if cutoff.k_min <= 0.0 and float(cutoff.phi_hat(np.array([0.0]))[0]) != 0.0:
        raise SupportViolation("cutoff profile has mass at k = 0: set k_min > 0")
    modes = cutoff.modes(disp, order)
    pol = polarization_vectors(modes.k)
    amp = cutoff.amplitude_of(modes)

    def solve_range(start, stop):
        out = []
        for m in range(start, stop):
            sol = solve_ls(problem.with_k(modes.k[m]), method=method)
            out.append(np.conj(sol.psi_on_grid))
        return out

    conj_psi = [psi for block in indexed_map(solve_range, [(m, m + 1) for m in range(len(modes))], workers)
                for psi in block]
    table = (amp[:, None, None, None, None, None]
             * np.stack(conj_psi)[..., None, None]
             * pol[:, None, None, None, :, :])
    header = {
        "cutoff": cutoff.spec(),
        "m": disp.m,
        "h": problem.h,
        "half_width": problem.half_width,
        "potential": problem.v.params,
        "order": order,
        "x_axis": problem.axis.tolist(),
        "k_nodes": modes.k.tolist(),
        "k_weights": modes.weights.tolist(),
    }
    logging.info("Tabulated variable-mass cutoff: %d modes x %d points", len(modes), problem.points.shape[0])
    return CutoffTables(modes.k, modes.weights, (problem.axis,) * 3, table, header)


def write_tables(tables, csv_path, json_path):
    """CSV rows (k_index, x_index, mu, j, re, im) plus a JSON header."""
    csv_path, json_path = Path(csv_path), Path(json_path)
    M = tables.table.shape[0]
    flat = tables.table.reshape(M, -1, tables.table.shape[-2], tables.table.shape[-1])
    with csv_path.open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(TABLE_COLUMNS)
        for k_index in range(M):
            for x_index in range(flat.shape[1]):
                for mu in range(flat.shape[2]):
                    for j in range(flat.shape[3]):
                        value = flat[k_index, x_index, mu, j]
                        writer.writerow((k_index, x_index, mu, j, repr(float(value.real)), repr(float(value.imag))))
    json_path.write_text(json.dumps(tables.header, sort_keys=True, indent=2), encoding="utf-8")


def read_tables(csv_path, json_path):
    header = json.loads(Path(json_path).read_text(encoding="utf-8"))
    axis = np.asarray(header["x_axis"], dtype=float)
    k_nodes = np.asarray(header["k_nodes"], dtype=float)
    n, M = len(axis), len(k_nodes)
    table = np.zeros((M, n ** 3, 3, 2), dtype=complex)
    with Path(csv_path).open(newline="", encoding="utf-8") as handle:
        reader = csv.reader(handle)
        if tuple(next(reader)) != TABLE_COLUMNS:
            raise ValueError(f"{csv_path}: unexpected header")
        for row in reader:
            k_index, x_index, mu, j = (int(v) for v in row[:4])
            table[k_index, x_index, mu, j] = complex(float(row[4]), float(row[5]))
    return CutoffTables(k_nodes, np.asarray(header["k_weights"], dtype=float), (axis,) * 3,
                        table.reshape(M, n, n, n, 3, 2), header)
