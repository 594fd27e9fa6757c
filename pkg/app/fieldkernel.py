# fieldkernel.py
"""
Vacuum reduction of the quantized field factor.

Between Fock vacua the field factor e^{i sqrt(alpha) A(K_t)} averages to
exp(-(alpha/4) sum_j ||K_t^j||^2), and ||K_t||^2 is a double stochastic
integral along the path with pair kernel

    W_{mu nu}(x, y, tau) = sum_j int conj(rho_mu^j(k, x)) rho_nu^j(k, y) e^{-tau omega(k)} dk.

The k-integral is done on a fixed quadrature (modes). Along a path the pair
sum over time steps is evaluated per mode with the recursion
S_a = e^{-dt omega} (S_{a-1} + c_{a-1}), which is exact for the
e^{-|t_a - t_b| omega} coupling and costs O(n) instead of O(n^2).
"""

import logging
import math
from abc import ABC, abstractmethod
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import RegularGridInterpolator

from errors import NegativeAction, QuadratureFailure
from paths import PathBatch
from quadrature import ball_rule
from workers import chunk_bounds, indexed_map

DEFAULT_K_ORDER = 32
KERNEL_RTOL = 1e-6
NEGATIVE_ACTION_TOL = 1e-6
# Gaussian profiles are cut at this many Lambda.
GAUSSIAN_SPAN = 6.0
# Upper bound on complex entries held at once when vectorizing over paths.
BLOCK_ENTRIES = 2 ** 22


@dataclass(frozen=True)
class DispersionSpec:
    d: int
    m: float = 0.0

    def __post_init__(self):
        if self.d < 1:
            raise ValueError(f"dimension must be positive, got {self.d}")
        if not self.m >= 0.0:
            raise ValueError(f"field mass must be >= 0, got {self.m}")

    def omega(self, k):
        k = np.asarray(k, dtype=float)
        return np.sqrt(np.sum(k ** 2, axis=-1) + self.m ** 2)


@dataclass(frozen=True, eq=False)
class ModeSet:
    k: np.ndarray
    weights: np.ndarray
    omega: np.ndarray
    order: int

    def __len__(self):
        return self.k.shape[0]


def polarization_vectors(k):
    """
    Orthonormal basis of the plane orthogonal to each k, shape (M, d, d-1),
    from the Householder reflection taking e_1 onto k/|k|.
    """
    k = np.atleast_2d(np.asarray(k, dtype=float))
    khat = k / np.linalg.norm(k, axis=1, keepdims=True)
    sign = np.where(khat[:, 0] >= 0.0, 1.0, -1.0)
    v = khat.copy()
    v[:, 0] += sign
    vv = np.sum(v * v, axis=1)
    d = k.shape[1]
    reflection = np.eye(d)[None, :, :] - 2.0 * v[:, :, None] * v[:, None, :] / vv[:, None, None]
    return reflection[:, :, 1:]


class CutoffModel(ABC):
    """rho_mu^j(k, x) on a mode set; j runs over d-1 polarizations."""

    kind = "abstract"

    def __init__(self, d):
        self.d = int(d)

    @property
    def j_count(self):
        return self.d - 1

    @abstractmethod
    def modes(self, disp, order):
        """Quadrature nodes, weights and omega for the k-integral."""

    @abstractmethod
    def rho(self, modes, x):
        """Complex array (M, N, d, J) of rho_mu^j(k_m, x_n)."""

    def divergence(self, modes, x):
        """sum_mu d/dx_mu rho_mu^j(k_m, x_n), shape (M, N, J)."""
        return np.zeros((len(modes), np.atleast_2d(x).shape[0], self.j_count), dtype=complex)

    @property
    def translation_invariant(self):
        return False

    @abstractmethod
    def spec(self):
        """Plain dict describing the model (hashed for caches and ledgers)."""

    def coefficients(self, modes, X, dX):
        """c[p, m, a, j] = sum_mu rho_mu^j(k_m, X[p, a]) dX[p, a, mu]."""
        P, n, d = X.shape
        rho = self.rho(modes, X.reshape(-1, d)).reshape(len(modes), P, n, d, self.j_count)
        return np.einsum("mpndj,pnd->pmnj", rho, dX)

    def divergence_coefficients(self, modes, X):
        P, n, d = X.shape
        div = self.divergence(modes, X.reshape(-1, d)).reshape(len(modes), P, n, self.j_count)
        return np.transpose(div, (1, 0, 2, 3))


class StandardCutoff(CutoffModel):
    """
    rho_mu^j(k, x) = phi(|k|) e_mu(k, j) e^{-ikx} / omega(k)^omega_power with a
    sharp (1_{|k| <= Lambda}) or gaussian (e^{-|k|^2 / 2 Lambda^2}) profile.
    omega_power = 1 is the literal product of the two 1/sqrt(omega) factors;
    0.5 is the usual convention.
    """

    kind = "standard_pf"

    def __init__(self, d, cutoff, profile="sharp", omega_power=1.0, amplitude=1.0, k_min=0.0):
        super().__init__(d)
        if self.d not in (2, 3):
            raise ValueError(f"standard cutoff needs d in (2, 3), got {d}")
        if profile not in ("sharp", "gaussian"):
            raise ValueError(f"unknown cutoff profile {profile!r}")
        self.cutoff = None if cutoff is None else float(cutoff)
        self.profile = profile
        self.omega_power = float(omega_power)
        self.amplitude = float(amplitude)
        self.k_min = float(k_min)

    @property
    def translation_invariant(self):
        return True

    @property
    def k_max(self):
        return self.cutoff if self.profile == "sharp" else GAUSSIAN_SPAN * self.cutoff

    def phi_hat(self, kabs):
        if self.profile == "sharp":
            return np.where(kabs <= self.cutoff, self.amplitude, 0.0)
        return self.amplitude * np.exp(-0.5 * (kabs / self.cutoff) ** 2)

    def amplitude_of(self, modes):
        kabs = np.linalg.norm(modes.k, axis=1)
        return self.phi_hat(kabs) / modes.omega ** self.omega_power

    def modes(self, disp, order):
        if self.cutoff is None:
            raise QuadratureFailure("standard cutoff has no UV cutoff Lambda: the k-integral does not converge")
        # |rho|^2 k^(d-1) ~ k^(d-1-2p) at k = 0 when m = 0: grade the radial nodes.
        singular_ir = disp.m == 0.0 and self.k_min == 0.0 and self.d - 1 - 2 * self.omega_power < 0
        k, weights, _ = ball_rule(self.d, self.k_min, self.k_max, order, grading=4 if singular_ir else 1)
        return ModeSet(k, weights, disp.omega(k), order)

    def rho(self, modes, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        phase = np.exp(-1j * (modes.k @ x.T))
        pol = polarization_vectors(modes.k)
        amp = self.amplitude_of(modes)
        return (amp[:, None, None, None] * phase[:, :, None, None]) * pol[:, None, :, :]

    def coefficients(self, modes, X, dX):
        phase = np.exp(-1j * np.einsum("md,pnd->pmn", modes.k, X))
        proj = np.einsum("mdj,pnd->pmnj", polarization_vectors(modes.k), dX)
        return self.amplitude_of(modes)[None, :, None, None] * phase[..., None] * proj

    def divergence_coefficients(self, modes, X):
        # k . e(k, j) = 0
        return np.zeros((X.shape[0], len(modes), X.shape[1], self.j_count), dtype=complex)

    def spec(self):
        return {"kind": self.kind, "d": self.d, "cutoff": self.cutoff, "profile": self.profile,
                "omega_power": self.omega_power, "amplitude": self.amplitude, "k_min": self.k_min}


class TabulatedCutoff(CutoffModel):
    """
    Variable-mass cutoff: rho tabulated on fixed k-nodes times a cubic x-lattice
    (built by the scattering module), linearly interpolated in x. Outside the
    lattice the fallback model (the plane-wave cutoff) is used.
    """

    kind = "variable_mass_table"

    def __init__(self, k_nodes, k_weights, x_axes, table, fallback, header=None):
        super().__init__(len(x_axes))
        self.k_nodes = np.asarray(k_nodes, dtype=float)
        self.k_weights = np.asarray(k_weights, dtype=float)
        self.x_axes = tuple(np.asarray(a, dtype=float) for a in x_axes)
        # table[m, ix, iy, iz, mu, j]
        self.table = np.asarray(table, dtype=complex)
        self.fallback = fallback
        self.header = header or {}
        values = np.moveaxis(self.table, 0, self.d)
        self._re = RegularGridInterpolator(self.x_axes, values.real, bounds_error=False, fill_value=None)
        self._im = RegularGridInterpolator(self.x_axes, values.imag, bounds_error=False, fill_value=None)
        spacing = [a[1] - a[0] for a in self.x_axes]
        div = sum(np.gradient(self.table[..., mu, :], spacing[mu], axis=1 + mu) for mu in range(self.d))
        div_values = np.moveaxis(div, 0, self.d)
        self._div_re = RegularGridInterpolator(self.x_axes, div_values.real, bounds_error=False, fill_value=None)
        self._div_im = RegularGridInterpolator(self.x_axes, div_values.imag, bounds_error=False, fill_value=None)

    def modes(self, disp, order):
        return ModeSet(self.k_nodes, self.k_weights, disp.omega(self.k_nodes), order)

    def _inside(self, x):
        return np.all([(x[:, i] >= a[0]) & (x[:, i] <= a[-1]) for i, a in enumerate(self.x_axes)], axis=0)

    def rho(self, modes, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        out = self.fallback.rho(modes, x)
        inside = self._inside(x)
        if np.any(inside):
            values = self._re(x[inside]) + 1j * self._im(x[inside])
            out[:, inside] = np.moveaxis(values, 1, 0)
        return out

    def divergence(self, modes, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        out = np.zeros((len(modes), x.shape[0], self.j_count), dtype=complex)
        inside = self._inside(x)
        if np.any(inside):
            values = self._div_re(x[inside]) + 1j * self._div_im(x[inside])
            out[:, inside] = np.moveaxis(values, 1, 0)
        return out

    def spec(self):
        return {"kind": self.kind, "d": self.d, "header": self.header, "modes": int(self.k_nodes.shape[0])}


@dataclass(frozen=True, eq=False)
class FieldKernel:
    model: CutoffModel
    disp: DispersionSpec
    modes: ModeSet
    quadrature: dict = field(default_factory=dict)

    def evaluate(self, x, y, tau):
        """W_{mu nu}(x, y, tau) as a complex (d, d) matrix."""
        if tau < 0:
            raise ValueError("tau must be >= 0")
        rx = self.model.rho(self.modes, np.asarray(x, dtype=float)[None, :])[:, 0]
        ry = self.model.rho(self.modes, np.asarray(y, dtype=float)[None, :])[:, 0]
        w = self.modes.weights * np.exp(-tau * self.modes.omega)
        return np.einsum("m,mij,mkj->ik", w, rx.conj(), ry)

    def kernel_matrix(self, points, times, chunk=128):
        """
        Hermitian (n d, n d) matrix [W_{mu nu}(x_a, x_b, |t_a - t_b|)] over the
        given points and times.
        """
        points = np.atleast_2d(np.asarray(points, dtype=float))
        times = np.asarray(times, dtype=float)
        n, d = points.shape
        rho = self.model.rho(self.modes, points)
        gaps = np.abs(times[:, None] - times[None, :])
        out = np.zeros((n, n, d, d), dtype=complex)
        for lo in range(0, len(self.modes), chunk):
            hi = min(lo + chunk, len(self.modes))
            decay = self.modes.weights[lo:hi, None, None] * np.exp(-gaps[None] * self.modes.omega[lo:hi, None, None])
            out += np.einsum("mab,maij,mbkj->abik", decay, rho[lo:hi].conj(), rho[lo:hi])
        return np.transpose(out, (0, 2, 1, 3)).reshape(n * d, n * d)

    def spec(self):
        return {"model": self.model.spec(), "d": self.disp.d, "m": self.disp.m, "quadrature": self.quadrature}


def build_kernel(model, disp, order=DEFAULT_K_ORDER, rtol=KERNEL_RTOL):
    """
    FieldKernel on a k-quadrature of the given order, accepted only if doubling
    the order moves W(0, 0, 0) and W(0, r0, 0) by less than rtol (relative).
    """
    if model.d != disp.d:
        raise ValueError(f"cutoff model is {model.d}-dimensional, dispersion {disp.d}-dimensional")
    if isinstance(model, StandardCutoff):
        if model.cutoff is None:
            raise QuadratureFailure("Lambda missing: the k-integral of the kernel diverges")
        if disp.m == 0.0 and model.k_min == 0.0 and model.d - 2.0 * model.omega_power <= 0.0:
            raise QuadratureFailure(
                f"infrared divergence: m=0 and omega_power={model.omega_power:g} in d={model.d}")

    modes = model.modes(disp, order)
    kernel = FieldKernel(model, disp, modes, {"order": order, "modes": len(modes), "rtol": rtol})
    if isinstance(model, StandardCutoff):
        fine = FieldKernel(model, disp, model.modes(disp, 2 * order))
        origin = np.zeros(model.d)
        offset_point = np.zeros(model.d)
        offset_point[0] = 1.0 / model.k_max
        for y in (origin, offset_point):
            coarse_value, fine_value = kernel.evaluate(origin, y, 0.0), fine.evaluate(origin, y, 0.0)
            scale = max(float(np.max(np.abs(fine_value))), 1e-300)
            error = float(np.max(np.abs(fine_value - coarse_value))) / scale
            if error > rtol:
                raise QuadratureFailure(f"kernel quadrature of order {order} off by {error:.3g} relative")
    logging.info("Built %s kernel: %d modes, m=%g", model.kind, len(modes), disp.m)
    return kernel


def quadratic_form(c, weights, decay):
    """
    sum_m weights[m] sum_j sum_{a,b} conj(c_a) c_b decay[m]^|a-b| for c of
    shape (..., M, n, J); returns shape (...).
    """
    lead = c.shape[:-3]
    M, n, J = c.shape[-3:]
    carry = np.zeros(lead + (M, J), dtype=complex)
    total = np.zeros(lead + (M, J))
    rate = decay[:, None]
    for a in range(n):
        ca = c[..., a, :]
        total += ca.real ** 2 + ca.imag ** 2 + 2.0 * (ca.conj() * carry).real
        carry = rate * (carry + ca)
    return np.einsum("...mj,m->...", total, weights)


@dataclass(frozen=True)
class EffectiveAction:
    value: float
    norm2: float
    alpha: float
    scheme: str
    blocks: dict


def _path_blocks(kernel, batch, scheme):
    """Per-path ||K_t||^2 split into dB.dB, dB.ds and ds.ds blocks."""
    model, modes = kernel.model, kernel.modes
    dt = batch.grid.dt
    decay = np.exp(-dt * modes.omega)
    if scheme == "midpoint":
        mids = 0.5 * (batch.positions[:, :-1, :] + batch.positions[:, 1:, :])
        bb = quadratic_form(model.coefficients(modes, mids, batch.increments), modes.weights, decay)
        zero = np.zeros_like(bb)
        return bb, zero, zero, bb
    if scheme == "ito":
        left = batch.positions[:, :-1, :]
        c_b = model.coefficients(modes, left, batch.increments)
        c_s = 0.5 * dt * model.divergence_coefficients(modes, left)
        bb = quadratic_form(c_b, modes.weights, decay)
        ss = quadratic_form(c_s, modes.weights, decay)
        total = quadratic_form(c_b + c_s, modes.weights, decay)
        return bb, total - bb - ss, ss, total
    raise ValueError(f"unknown scheme {scheme!r}")


def _checked(norm2, what):
    if norm2 < -NEGATIVE_ACTION_TOL:
        raise NegativeAction(f"||K_t||^2 = {norm2:.3g} < 0 for {what}")
    return max(norm2, 0.0)


def effective_action(path, kernel, alpha, scheme="midpoint", method="modes"):
    """
    (alpha/4) sum_j ||K_t^j||^2 along one path.

    method="modes" uses the per-mode recursion; method="pairs" forms the literal
    double sum of dX_a . W(X_a*, X_b*, |t_a - t_b|) . dX_b (midpoint scheme only).
    """
    if alpha < 0:
        raise ValueError(f"alpha must be >= 0, got {alpha}")
    batch = PathBatch.from_path(path)
    if method == "pairs":
        if scheme != "midpoint":
            raise ValueError("the pair sum is only implemented for the midpoint scheme")
        mids = 0.5 * (path.positions[:-1] + path.positions[1:])
        times = path.grid.times[:-1] + 0.5 * path.grid.dt
        flat = path.increments.reshape(-1)
        norm2 = float(np.real(flat @ kernel.kernel_matrix(mids, times) @ flat))
        blocks = {"dB_dB": norm2, "dB_ds": 0.0, "ds_ds": 0.0}
    elif method == "modes":
        bb, bs, ss, total = (float(v[0]) for v in _path_blocks(kernel, batch, scheme))
        norm2 = total
        blocks = {"dB_dB": bb, "dB_ds": bs, "ds_ds": ss}
    else:
        raise ValueError(f"unknown method {method!r}")
    norm2 = _checked(norm2, f"{kernel.model.kind} ({scheme})")
    return EffectiveAction((alpha / 4.0) * norm2, norm2, alpha, scheme, blocks)


def field_norms(batch, kernel, scheme="midpoint", workers=1):
    """sum_j ||K_t^j||^2 for every path of the batch, in path order."""
    per_path = len(kernel.modes) * batch.grid.n_steps * max(kernel.model.j_count, 1)
    block = max(1, BLOCK_ENTRIES // per_path)

    def run(start, stop):
        sub = PathBatch(batch.starts[start:stop], batch.increments[start:stop],
                        batch.positions[start:stop], batch.grid)
        return _path_blocks(kernel, sub, scheme)[3]

    norms = np.concatenate(indexed_map(run, chunk_bounds(len(batch), block), workers))
    worst = float(np.min(norms)) if len(norms) else 0.0
    if worst < -NEGATIVE_ACTION_TOL:
        raise NegativeAction(f"||K_t||^2 = {worst:.3g} < 0 on a sampled path")
    if worst < 0.0:
        logging.debug("Clamped %d slightly negative field norms", int(np.sum(norms < 0)))
    return np.maximum(norms, 0.0)


def effective_actions(batch, kernel, alpha, scheme="midpoint", workers=1):
    """(alpha/4) ||K_t||^2 per path."""
    if alpha < 0:
        raise ValueError(f"alpha must be >= 0, got {alpha}")
    if alpha == 0.0:
        return np.zeros(len(batch))
    return (alpha / 4.0) * field_norms(batch, kernel, scheme, workers)


def second_moment_bound(kernel, t, batch=None):
    """
    sum_j int_0^t E[2 sum_mu ||rho_mu^j(., B_s)||^2 + 1/2 ||div rho^j(., B_s)||^2] ds.

    Translation invariant models give t times the value at the origin; other
    models average along the batch (time integral by the trapezoid rule).
    """
    modes = kernel.modes
    d = kernel.disp.d

    def integrand(points):
        rho = kernel.model.rho(modes, points)
        div = kernel.model.divergence(modes, points)
        local = 2.0 * np.sum(np.abs(rho) ** 2, axis=(2, 3)) + 0.5 * np.sum(np.abs(div) ** 2, axis=2)
        return modes.weights @ local

    if kernel.model.translation_invariant or batch is None:
        return float(t * integrand(np.zeros((1, d)))[0])
    values = integrand(batch.positions.reshape(-1, d)).reshape(len(batch), -1).mean(axis=0)
    dt = batch.grid.dt
    return float(dt * (0.5 * values[0] + values[1:-1].sum() + 0.5 * values[-1]))


@dataclass(frozen=True)
class ModeCheck:
    closed_form: float
    sampled: float
    stderr: float
    imag_mean: float
    imag_stderr: float
    z_score: float
    n_field_samples: int


def mode_sample_check(path, model, disp, alpha, M_modes, n_field_samples, seed, workers=1):
    """
    Draw the Gaussian field directly on the k-modes and compare the empirical
    mean of e^{i sqrt(alpha) A(K_t)} with exp(-(alpha/4) ||K_t||^2).

    Each (mode, polarization) carries a stationary complex Ornstein-Uhlenbeck
    process with E[xi_a conj(xi_b)] = e^{-|t_a - t_b| omega}; field sample i
    uses substream seed.offset(i).
    """
    kernel = FieldKernel(model, disp, model.modes(disp, M_modes), {"order": M_modes})
    batch = PathBatch.from_path(path)
    mids = 0.5 * (batch.positions[:, :-1, :] + batch.positions[:, 1:, :])
    c = model.coefficients(kernel.modes, mids, batch.increments)[0]
    norm2 = _checked(float(quadratic_form(c, kernel.modes.weights, np.exp(-path.grid.dt * kernel.modes.omega))),
                     "mode check")
    closed = math.exp(-(alpha / 4.0) * norm2)

    M, n, J = c.shape
    rate = np.exp(-path.grid.dt * kernel.modes.omega)[:, None]
    kick = np.sqrt(1.0 - rate ** 2)
    root_w = np.sqrt(kernel.modes.weights)[:, None]
    scale = math.sqrt(alpha)

    def draw(start, stop):
        out = np.empty((stop - start, 2))
        for i in range(start, stop):
            normals = seed.offset(i).generator().standard_normal((n, M, J, 2)) * math.sqrt(0.5)
            eta = normals[..., 0] + 1j * normals[..., 1]
            xi = eta[0]
            total = 0.0 + 0.0j
            for a in range(n):
                if a > 0:
                    xi = rate * xi + kick * eta[a]
                total += np.sum(root_w * c[:, a, :].conj() * xi)
            x = scale * total.real
            out[i - start] = (math.cos(x), math.sin(x))
        return out

    samples = np.concatenate(indexed_map(draw, chunk_bounds(n_field_samples, 256), workers))
    mean = float(np.mean(samples[:, 0]))
    imag = float(np.mean(samples[:, 1]))
    denom = math.sqrt(n_field_samples) if n_field_samples > 1 else 1.0
    stderr = float(np.std(samples[:, 0], ddof=1)) / denom if n_field_samples > 1 else 0.0
    imag_stderr = float(np.std(samples[:, 1], ddof=1)) / denom if n_field_samples > 1 else 0.0
    z = 0.0 if stderr == 0.0 else (mean - closed) / stderr
    logging.info("Mode check: closed %.6g sampled %.6g +/- %.2g (z=%.2f)", closed, mean, stderr, z)
    return ModeCheck(closed, mean, stderr, imag, imag_stderr, z, n_field_samples)
