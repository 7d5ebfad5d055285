"""Independent ground-truth generators used to validate every estimate.

Nothing here shares a code path with the generator, trainer, or estimator it
checks: the closed-form oscillator kernel, the spectral sum, the banded
Cholesky partition function, the nested Gauss-Hermite quadrature, the discrete
enumeration, and the Metropolis chain are all separate routes to the same
physics.  All functions are deterministic given their seeds.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
import scipy.linalg

from .lattice import LatticeSpec, PathBatch, Potential, potential_value

__all__ = [
    "OracleError",
    "SpectralResult",
    "SpectralKernelValue",
    "ho_exact_kernel",
    "ho_exact_log_kernel",
    "free_particle_kernel",
    "ho_ground_state_density",
    "harmonic_spectrum",
    "exact_diagonalization",
    "spectral_kernel",
    "gaussian_lattice_partition",
    "gauss_hermite_partition",
    "brute_force_partition",
    "metropolis_acceptance",
    "metropolis_sampler",
]


class OracleError(RuntimeError):
    """An oracle could not produce a trustworthy value."""


# ----------------------------------------------------------------------------
# closed-form kernels
# ----------------------------------------------------------------------------

def ho_exact_log_kernel(x_i: float, x_f: float, T: float, m: float = 1.0,
                        omega: float = 1.0, hbar: float = 1.0) -> float:
    """log of the imaginary-time harmonic-oscillator kernel (Mehler form).

    K = sqrt(m w / (2 pi hbar sinh wT))
        * exp(-(m w / (2 hbar sinh wT)) [(x_i^2 + x_f^2) cosh wT - 2 x_i x_f]);
    evaluated in log space so large wT never overflows.
    """
    if not (T > 0 and omega > 0):
        raise ValueError("T and omega must be positive")
    wt = omega * T
    if wt > 350.0:
        # ln sinh wt = wt - ln 2 + ln(1 - e^{-2wt}); coth and csch expanded too
        log_sinh = wt - math.log(2.0) + math.log1p(-math.exp(-2.0 * wt))
        coth = 1.0 + 2.0 * math.exp(-2.0 * wt) / (1.0 - math.exp(-2.0 * wt))
        csch = 2.0 * math.exp(-wt) / (1.0 - math.exp(-2.0 * wt))
    else:
        s = math.sinh(wt)
        log_sinh = math.log(s)
        coth = math.cosh(wt) / s
        csch = 1.0 / s
    pref = 0.5 * (math.log(m * omega / (2.0 * math.pi * hbar)) - log_sinh)
    expo = -(m * omega / (2.0 * hbar)) * (
        (x_i * x_i + x_f * x_f) * coth - 2.0 * x_i * x_f * csch
    )
    return pref + expo


def ho_exact_kernel(x_i: float, x_f: float, T: float, m: float = 1.0,
                    omega: float = 1.0, hbar: float = 1.0) -> float:
    return math.exp(ho_exact_log_kernel(x_i, x_f, T, m, omega, hbar))


def free_particle_kernel(x_i: float, x_f: float, T: float, m: float = 1.0,
                         hbar: float = 1.0) -> float:
    """Gaussian heat kernel sqrt(m/(2 pi hbar T)) exp(-m (xf-xi)^2/(2 hbar T))."""
    return math.sqrt(m / (2.0 * math.pi * hbar * T)) * math.exp(
        -m * (x_f - x_i) ** 2 / (2.0 * hbar * T)
    )


def ho_ground_state_density(x, m: float = 1.0, omega: float = 1.0,
                            hbar: float = 1.0):
    """|psi_0|^2 of the harmonic oscillator: a Gaussian of variance hbar/(2 m w)."""
    x = np.asarray(x, dtype=float)
    return np.sqrt(m * omega / (math.pi * hbar)) * np.exp(-m * omega * x * x / hbar)


# ----------------------------------------------------------------------------
# spectral representation
# ----------------------------------------------------------------------------

@dataclass
class SpectralResult:
    """Eigenvalues (ascending) and grid eigenfunctions, L2-normalized with dx."""

    energies: np.ndarray
    states: np.ndarray          # (n_points, n_states)
    grid: np.ndarray
    dx: float

    def __post_init__(self):
        if np.any(np.diff(self.energies) < -1e-12):
            raise ValueError("eigenvalues must be ascending")

    @property
    def n_states(self) -> int:
        return self.states.shape[1]


@dataclass
class SpectralKernelValue:
    value: float
    truncation_bound: float


def harmonic_spectrum(omega: float, m: float = 1.0, hbar: float = 1.0,
                      grid: Optional[np.ndarray] = None,
                      n_states: int = 64) -> SpectralResult:
    """Analytic Hermite-function eigenbasis of the harmonic oscillator.

    Built with the normalized three-term recurrence, which is stable to high
    order; energies are hbar w (n + 1/2).
    """
    if grid is None:
        grid = np.linspace(-12.0, 12.0, 4001)
    grid = np.asarray(grid, dtype=float)
    xi = np.sqrt(m * omega / hbar) * grid
    psi = np.empty((grid.size, n_states))
    psi[:, 0] = (m * omega / (math.pi * hbar)) ** 0.25 * np.exp(-0.5 * xi * xi)
    if n_states > 1:
        psi[:, 1] = math.sqrt(2.0) * xi * psi[:, 0]
    for n in range(2, n_states):
        psi[:, n] = (math.sqrt(2.0 / n) * xi * psi[:, n - 1]
                     - math.sqrt((n - 1) / n) * psi[:, n - 2])
    # continuum-normalized already: int |psi|^2 dx = 1
    energies = hbar * omega * (np.arange(n_states) + 0.5)
    dx = float(grid[1] - grid[0])
    return SpectralResult(energies=energies, states=psi, grid=grid, dx=dx)


def exact_diagonalization(pot: Potential, grid: Tuple[float, float, int],
                          m: float = 1.0, hbar: float = 1.0,
                          n_states: int = 32) -> SpectralResult:
    """Finite-difference eigensolve of the 1-D Hamiltonian on a box.

    Central-difference kinetic matrix plus diagonal potential; symmetric
    tridiagonal eigensolve for the lowest ``n_states`` pairs.  Fails if the
    requested states have not decayed below 1e-8 (relative) at the boundary.
    """
    x_min, x_max, n_points = grid
    n_points = int(n_points)
    if n_points < 64:
        raise ValueError("exact diagonalization needs at least 64 grid points")
    x = np.linspace(x_min, x_max, n_points)
    dx = x[1] - x[0]
    kin = hbar * hbar / (2.0 * m * dx * dx)
    diag = 2.0 * kin + potential_value(pot, x)
    off = np.full(n_points - 1, -kin)
    energies, states = scipy.linalg.eigh_tridiagonal(
        diag, off, select="i", select_range=(0, n_states - 1)
    )
    # L2-normalize with the grid weight
    norms = np.sqrt((states * states).sum(axis=0) * dx)
    states = states / norms
    edge = np.maximum(np.abs(states[0, :]), np.abs(states[-1, :]))
    peak = np.abs(states).max(axis=0)
    if np.any(edge > 1e-8 * peak):
        bad = int(np.argmax(edge / peak))
        raise OracleError(
            f"state {bad} has boundary amplitude {edge[bad]:.2e} "
            f"(peak {peak[bad]:.2e}); enlarge the box"
        )
    return SpectralResult(energies=energies, states=states, grid=x, dx=float(dx))


def spectral_kernel(spec: SpectralResult, x_i: float, x_f: float, T: float,
                    hbar: float = 1.0,
                    n_terms: Optional[int] = None) -> SpectralKernelValue:
    """Truncated spectral sum sum_n e^{-T E_n/hbar} psi_n(x_i) psi_n(x_f).

    Endpoint values come from cubic interpolation between grid nodes (linear
    interpolation is too coarse for strongly oscillatory excited states).  The
    reported truncation bound is e^{-T E_n/hbar} max|psi|^2 for the first
    omitted level.
    """
    from scipy.interpolate import CubicSpline
    if n_terms is None:
        n_terms = spec.n_states
    if n_terms > spec.n_states:
        raise ValueError(f"requested {n_terms} terms, only {spec.n_states} available")
    interp = CubicSpline(spec.grid, spec.states[:, :n_terms], axis=0)
    psi_i = interp(x_i)
    psi_f = interp(x_f)
    weights = np.exp(-T * spec.energies[:n_terms] / hbar)
    value = float(np.sum(weights * psi_i * psi_f))
    if n_terms < spec.n_states:
        bound = float(np.exp(-T * spec.energies[n_terms] / hbar)
                      * np.abs(spec.states).max() ** 2)
    else:
        bound = float(np.exp(-T * spec.energies[-1] / hbar)
                      * np.abs(spec.states).max() ** 2)
    return SpectralKernelValue(value=value, truncation_bound=bound)


# ----------------------------------------------------------------------------
# lattice partition functions
# ----------------------------------------------------------------------------

def _harmonic_quadratic_form(lat: LatticeSpec, omega: float, m: float,
                             hbar: float):
    """Hessian (of S_E/hbar), linear term, and constant of the pinned action.

    Interior coordinates u: S_E(u)/hbar = 1/2 u^T M u - b^T u + c.  Built from
    first principles here so the oracle stays independent of the action code.
    """
    d = lat.n_tau - 2
    dt = lat.delta_tau
    kin = m / (dt * hbar)
    diag = np.full(d, 2.0 * kin + dt * m * omega * omega / hbar)
    off = np.full(d - 1, -kin)
    b = np.zeros(d)
    b[0] = kin * lat.x_start
    b[-1] += kin * lat.x_end
    c = 0.5 * kin * (lat.x_start ** 2 + lat.x_end ** 2) + \
        0.25 * dt * m * omega * omega * (lat.x_start ** 2 + lat.x_end ** 2) / hbar
    return diag, off, b, c


def gaussian_lattice_partition(lat: LatticeSpec, omega: float,
                               m: Optional[float] = None,
                               hbar: Optional[float] = None
                               ) -> Tuple[float, float]:
    """Exact (ln Z_lattice, S_Emin) for the pinned quadratic action.

    The interior integral is Gaussian: ln Z = (d/2) ln(2 pi) - (1/2) ln det M
    - S_Emin/hbar with M the tridiagonal Hessian of S_E/hbar.  Banded Cholesky
    supplies both the determinant and the minimizer.  omega = 0 is the free
    particle.
    """
    if omega < 0:
        raise ValueError("omega must be >= 0")
    m = lat.mass if m is None else m
    hbar = lat.hbar if hbar is None else hbar
    d = lat.n_tau - 2
    diag, off, b, c = _harmonic_quadratic_form(lat, omega, m, hbar)
    ab = np.zeros((2, d))
    ab[0, 1:] = off
    ab[1, :] = diag
    try:
        chol = scipy.linalg.cholesky_banded(ab, lower=False)
    except scipy.linalg.LinAlgError as err:
        raise OracleError(f"interior Hessian not positive definite: {err}") from err
    log_det = 2.0 * float(np.sum(np.log(chol[1, :])))
    u_star = scipy.linalg.cho_solve_banded((chol, False), b)
    s_min_over_hbar = c - 0.5 * float(b @ u_star)
    ln_z = 0.5 * d * math.log(2.0 * math.pi) - 0.5 * log_det - s_min_over_hbar
    return ln_z, s_min_over_hbar * hbar


def gauss_hermite_partition(lat: LatticeSpec, pot: Potential,
                            n_nodes: Optional[int] = None,
                            scale: Optional[float] = None) -> float:
    """ln Z_lattice by nested Gauss-Hermite quadrature over interior stamps.

    Each interior integral is a 1-D Gauss-Hermite rule around the linear
    interpolant; the link factors are propagated stamp by stamp.  A single
    d-dimensional tensor-product rule would need a correlated proposal to
    converge on the stiff kinetic coupling, so the quadrature is nested
    instead; the rule per dimension is still Gauss-Hermite.  The default
    proposal scale suits near-quadratic actions whose paths stay close to the
    interpolant; pass ``scale`` explicitly for strongly off-center targets.
    """
    dt = lat.delta_tau
    m, hbar = lat.mass, lat.hbar
    link_width = math.sqrt(hbar * dt / m)
    if scale is None:
        # bridge-marginal width plus a fraction of the endpoint separation
        scale = max(0.45 * math.sqrt(hbar * lat.total_time / m), 3.0 * link_width) \
            + 0.15 * abs(lat.x_end - lat.x_start)
    if n_nodes is None:
        # node spacing near the center must resolve the link factors; the
        # Golub-Welsch weights underflow past ~350 nodes, which caps the rule
        # (full precision holds for coarse lattices, where this oracle is used)
        need = 0.5 * (2.5 * math.pi * math.sqrt(2.0) * scale / link_width) ** 2
        n_nodes = int(min(max(128, math.ceil(need)), 350))
    t_nodes, t_weights = np.polynomial.hermite.hermgauss(n_nodes)
    base = lat.linear_interpolant()

    def link_log(xa, xb, va_weight, vb_weight, va, vb):
        kin = -0.5 * m * (xb - xa) ** 2 / (dt * hbar)
        return kin - dt * (va_weight * va + vb_weight * vb) / hbar

    # log phi over the nodes of the first interior stamp
    centers = [base[k] + math.sqrt(2.0) * scale * t_nodes
               for k in range(1, lat.n_tau - 1)]
    vals = [potential_value(pot, ck) for ck in centers]
    v_start = potential_value(pot, lat.x_start)
    v_end = potential_value(pot, lat.x_end)
    log_w = np.log(t_weights) + t_nodes * t_nodes + 0.5 * math.log(2.0) + math.log(scale)

    log_phi = link_log(lat.x_start, centers[0], 0.5, 0.5, v_start, vals[0])
    for k in range(1, lat.n_tau - 2):
        xa = centers[k - 1][:, None]
        xb = centers[k][None, :]
        step = (-0.5 * m * (xb - xa) ** 2 / (dt * hbar)
                - dt * 0.5 * (vals[k - 1][:, None] + vals[k][None, :]) / hbar)
        contrib = log_phi[:, None] + log_w[:, None] + step
        mx = contrib.max(axis=0)
        log_phi = mx + np.log(np.exp(contrib - mx).sum(axis=0))
    last = log_phi + log_w + link_log(
        centers[-1], lat.x_end, 0.5, 0.5, vals[-1], v_end
    )
    mx = last.max()
    return float(mx + math.log(np.exp(last - mx).sum()))


def brute_force_partition(lat: LatticeSpec, pot: Potential,
                          position_grid) -> Tuple[float, np.ndarray]:
    """Exact sum over all discrete interior configurations.

    Positions at each interior stamp are restricted to ``position_grid``;
    returns (ln Z_discrete, normalized probability table of shape grid^d).
    The action is recomputed inline from the link/trapezoid definition so
    this oracle does not call the lattice action code it is used to check.
    """
    grid = np.asarray(position_grid, dtype=float)
    d = lat.n_tau - 2
    n_cfg = grid.size ** d
    if n_cfg > 1e7:
        raise OracleError(f"enumeration budget exceeded: {n_cfg:.3g} configurations")
    dt = lat.delta_tau
    m, hbar = lat.mass, lat.hbar
    v_grid = potential_value(pot, grid)
    v_ends = potential_value(pot, np.array([lat.x_start, lat.x_end]))

    log_w = np.empty(n_cfg)
    chunk = 1 << 18
    for start in range(0, n_cfg, chunk):
        idx = np.arange(start, min(start + chunk, n_cfg))
        coords = np.array(np.unravel_index(idx, (grid.size,) * d))  # (d, chunk)
        xs = grid[coords]
        s = np.zeros(idx.size)
        prev = np.full(idx.size, lat.x_start)
        for k in range(d):
            s += 0.5 * m * (xs[k] - prev) ** 2 / dt
            s += dt * v_grid[coords[k]]
            prev = xs[k]
        s += 0.5 * m * (lat.x_end - prev) ** 2 / dt
        s += dt * 0.5 * (v_ends[0] + v_ends[1])
        log_w[idx] = -s / hbar
    mx = log_w.max()
    ln_z = mx + math.log(np.exp(log_w - mx).sum())
    probs = np.exp(log_w - ln_z).reshape((grid.size,) * d)
    return float(ln_z), probs


# ----------------------------------------------------------------------------
# Metropolis chain on the exact target
# ----------------------------------------------------------------------------

def metropolis_acceptance(delta_action: float, hbar: float) -> float:
    """min(1, exp(-dS/hbar)); the textbook acceptance rule."""
    if delta_action <= 0:
        return 1.0
    return math.exp(-delta_action / hbar)


def metropolis_sampler(lat: LatticeSpec, pot: Potential, n_sweeps: int,
                       step_width: float, rng: np.random.Generator,
                       burn_in: int = 0, thin: int = 1,
                       initial: Optional[np.ndarray] = None
                       ) -> Tuple[PathBatch, float]:
    """Single-site Metropolis chain targeting exp(-S_E/hbar), endpoints fixed.

    Symmetric uniform proposals of half-width ``step_width``; interior sites
    are updated in sweep order.  Returns thinned post-burn-in samples and the
    overall acceptance rate; a rate outside [0.2, 0.8] emits a tuning warning.
    """
    dt = lat.delta_tau
    m, hbar = lat.mass, lat.hbar
    x = lat.linear_interpolant() if initial is None else np.array(initial, dtype=float)
    if x.shape != (lat.n_tau,):
        raise ValueError("initial path has the wrong length")
    x = x.copy()
    x[0], x[-1] = lat.x_start, lat.x_end

    kept = []
    n_acc = 0
    n_prop = 0
    interior = range(1, lat.n_tau - 1)
    for sweep in range(n_sweeps):
        shifts = rng.uniform(-step_width, step_width, size=lat.n_tau - 2)
        us = rng.random(lat.n_tau - 2)
        for j, k in enumerate(interior):
            old = x[k]
            new = old + shifts[j]
            local_old = (0.5 * m * ((old - x[k - 1]) ** 2 + (x[k + 1] - old) ** 2) / dt
                         + dt * potential_value(pot, old))
            local_new = (0.5 * m * ((new - x[k - 1]) ** 2 + (x[k + 1] - new) ** 2) / dt
                         + dt * potential_value(pot, new))
            n_prop += 1
            if us[j] < metropolis_acceptance(local_new - local_old, hbar):
                x[k] = new
                n_acc += 1
        if sweep >= burn_in and (sweep - burn_in) % thin == 0:
            kept.append(x.copy())
    rate = n_acc / max(n_prop, 1)
    if not (0.2 <= rate <= 0.8):
        warnings.warn(
            f"Metropolis acceptance rate {rate:.2f} outside [0.2, 0.8]; "
            f"retune step_width", RuntimeWarning, stacklevel=2,
        )
    return PathBatch(positions=np.array(kept)), rate
