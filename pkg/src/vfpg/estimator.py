"""Physics from trained generators: kernels, densities, error bars, diagnostics.

The kernel estimate is exp(-F/hbar) with F the sampled mean free energy of the
generated ensemble.  Raw kernel values carry a lattice-measure prefactor that
cancels under trace normalization, so scans are reported both raw and divided
by the trace of the diagonal kernel (cubic-spline fit integrated with a
composite Simpson rule).  Uncertainties across independent training runs
follow dK = K dF / (hbar sqrt(N_r)); plotted bars are two standard deviations.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional, Tuple

import numpy as np
from scipy.integrate import simpson
from scipy.interpolate import CubicSpline

from .lattice import LatticeSpec, Potential, action_batch, minimal_action_path, euclidean_action
from .model import ModelParams, sample_paths

__all__ = [
    "EstimationError",
    "PropagatorEstimate",
    "ScanResult",
    "DensityResult",
    "ScatterDiagnostic",
    "free_energy_from_samples",
    "estimate_free_energy",
    "estimate_propagator",
    "error_bars",
    "trace_from_diagonal",
    "propagator_scan",
    "ground_state_density",
    "scatter_from_samples",
    "scatter_diagnostic",
]

_KERNEL_LOG_LIMIT = 700.0


class EstimationError(RuntimeError):
    """An estimate could not be formed or failed a sanity constraint."""


@dataclass
class PropagatorEstimate:
    """Kernel value with its free energy and run-to-run uncertainty."""

    log_value: float
    free_energy: float
    uncertainty: float
    x_start: float
    x_end: float
    total_time: float
    n_runs: int = 1
    log_space_only: bool = False

    @property
    def value(self) -> float:
        if self.log_space_only:
            raise EstimationError(
                f"kernel underflows double precision (log K = {self.log_value:.3g}); "
                "use log_value"
            )
        return math.exp(self.log_value)


def free_energy_from_samples(actions, log_qs, hbar: float) -> Tuple[float, float]:
    """Mean and ensemble standard deviation of F = S + hbar log q."""
    s = np.asarray(actions, dtype=float)
    q = np.asarray(log_qs, dtype=float)
    if s.shape != q.shape or s.ndim != 1:
        raise ValueError("actions and log_qs must be matching 1-D arrays")
    if s.size < 2:
        raise ValueError("need at least 2 samples for a free-energy estimate")
    f = s + hbar * q
    return float(f.mean()), float(f.std(ddof=1))


def _sampled_free_energies(model: ModelParams, lat: LatticeSpec, pot: Potential,
                           n_samples: int, rng: np.random.Generator,
                           chunk: int = 1024):
    actions = []
    log_qs = []
    paths_all = []
    remaining = n_samples
    while remaining > 0:
        b = min(chunk, remaining)
        z = rng.standard_normal((b, model.latent_dim))
        batch = sample_paths(model, z, lat, rng)
        batch.action = action_batch(batch.positions, lat, pot)
        actions.append(batch.action)
        log_qs.append(batch.log_q)
        paths_all.append(batch.positions)
        remaining -= b
    return (np.concatenate(actions), np.concatenate(log_qs),
            np.concatenate(paths_all, axis=0))


def estimate_free_energy(model: ModelParams, lat: LatticeSpec, pot: Potential,
                         n_samples: int, rng: np.random.Generator
                         ) -> Tuple[float, float]:
    """Monte Carlo mean and ensemble std of F over freshly generated paths."""
    if n_samples < 2:
        raise ValueError("n_samples must be >= 2")
    actions, log_qs, _ = _sampled_free_energies(model, lat, pot, n_samples, rng)
    return free_energy_from_samples(actions, log_qs, lat.hbar)


def estimate_propagator(model: ModelParams, lat: LatticeSpec, pot: Potential,
                        n_samples: int, rng: np.random.Generator
                        ) -> PropagatorEstimate:
    """Single-run kernel estimate exp(-F/hbar) with normalization factor one."""
    f_mean, f_std = estimate_free_energy(model, lat, pot, n_samples, rng)
    log_k = -f_mean / lat.hbar
    log_space = abs(log_k) > _KERNEL_LOG_LIMIT
    sem = f_std / math.sqrt(n_samples)
    unc = 0.0 if log_space else math.exp(log_k) * sem / lat.hbar
    return PropagatorEstimate(
        log_value=log_k, free_energy=f_mean, uncertainty=unc,
        x_start=lat.x_start, x_end=lat.x_end, total_time=lat.total_time,
        n_runs=1, log_space_only=log_space,
    )


def error_bars(run_free_energies, hbar: float) -> Tuple[float, float]:
    """Kernel and its uncertainty from N_r independent training runs.

    K comes from the mean free energy; dK = K * std(F) / (hbar sqrt(N_r)).
    The 1/hbar factor is what first-order propagation of exp(-F/hbar)
    requires; at hbar = 1 it reduces to the plain K dF / sqrt(N_r) form.
    """
    f = np.asarray(run_free_energies, dtype=float)
    if f.ndim != 1 or f.size < 2:
        raise ValueError("need free energies from at least 2 runs")
    k = math.exp(-f.mean() / hbar)
    df = float(f.std(ddof=1))
    return k, k * df / (hbar * math.sqrt(f.size))


# ----------------------------------------------------------------------------
# trace normalization and densities
# ----------------------------------------------------------------------------

def trace_from_diagonal(xs, kernel_values, n_fine: int = 801) -> float:
    """integral of K(x, x) dx: cubic-spline fit, composite Simpson on a fine grid.

    Kernel values span many decades across the scan, so the spline runs in log
    space whenever all values are positive; that keeps the fit smooth and the
    integrand nonnegative.  Zero values fall back to a linear-space spline with
    small interpolation dips clipped (substantial negative area fails the fit).
    """
    x = np.asarray(xs, dtype=float)
    k = np.asarray(kernel_values, dtype=float)
    if x.ndim != 1 or x.shape != k.shape:
        raise ValueError("diagonal scan must be matching 1-D arrays")
    if x.size < 5:
        raise EstimationError("trace integration needs at least 5 grid points")
    if np.any(np.diff(x) <= 0):
        raise ValueError("diagonal grid must be strictly increasing")
    if np.any(k < 0):
        raise EstimationError("negative kernel values in the diagonal scan")
    fine = np.linspace(x[0], x[-1], n_fine)
    if np.all(k > 0):
        vals = np.exp(CubicSpline(x, np.log(k))(fine))
        return float(simpson(vals, x=fine))
    vals = CubicSpline(x, k)(fine)
    neg_area = -float(simpson(np.minimum(vals, 0.0), x=fine))
    pos_area = float(simpson(np.maximum(vals, 0.0), x=fine))
    if neg_area > 0.01 * max(pos_area, 1e-300):
        raise EstimationError("spline fit of the diagonal kernel dips negative")
    return float(simpson(np.maximum(vals, 0.0), x=fine))


@dataclass
class ScanResult:
    """Trace-normalized kernel scan, raw values retained."""

    x: np.ndarray
    k_raw: np.ndarray
    k_norm: np.ndarray
    err2sigma: np.ndarray
    trace: float
    diag_x: np.ndarray
    diag_k: np.ndarray


def propagator_scan(x_start: float, scan_points, diagonal_points,
                    kernel_fn: Callable[[float, float], Tuple[float, float]]
                    ) -> ScanResult:
    """Raw and trace-normalized kernel over endpoint configurations.

    ``kernel_fn(x_i, x_f)`` returns (raw kernel, one-sigma uncertainty) for
    one endpoint pair; campaigns back it with one trained model per pair,
    tests can inject closed forms.  The scan runs over final positions with
    ``x_start`` held fixed; the diagonal points feed the trace.  Uncertainty
    on the normalized value propagates both the point error and the trace
    error to first order, treating per-point errors as independent.
    """
    scan = np.asarray(scan_points, dtype=float)
    diag = np.asarray(diagonal_points, dtype=float)
    diag_res = np.array([kernel_fn(x, x) for x in diag], dtype=float)
    diag_k, diag_err = diag_res[:, 0], diag_res[:, 1]
    trace = trace_from_diagonal(diag, diag_k)
    scan_res = np.array([kernel_fn(x_start, xf) for xf in scan], dtype=float)
    k_raw, k_err = scan_res[:, 0], scan_res[:, 1]
    k_norm = k_raw / trace
    # d(k/tr) = dk/tr - k dtr/tr^2
    w = _simpson_weights(diag)
    dtr = math.sqrt(float(np.sum((w * diag_err) ** 2)))
    err = np.sqrt((k_err / trace) ** 2 + (k_raw * dtr / trace**2) ** 2)
    return ScanResult(x=scan, k_raw=k_raw, k_norm=k_norm, err2sigma=2.0 * err,
                      trace=trace, diag_x=diag, diag_k=diag_k)


def _simpson_weights(x: np.ndarray) -> np.ndarray:
    """Effective quadrature weights used for the trace-error propagation."""
    # trapezoid weights are accurate enough for propagating uncertainties
    w = np.zeros_like(x)
    dx = np.diff(x)
    w[:-1] += 0.5 * dx
    w[1:] += 0.5 * dx
    return w


@dataclass
class DensityResult:
    x: np.ndarray
    rho: np.ndarray
    err2sigma: np.ndarray
    norm: float


def ground_state_density(xs, kernel_values, errors=None,
                         lat: Optional[LatticeSpec] = None) -> DensityResult:
    """Normalized diagonal kernel: converges to |psi_0|^2 for long total time.

    The caller is responsible for the projection condition (total time large
    against hbar over the spectral gap); the same spline-plus-Simpson
    quadrature as the trace supplies the normalization.
    """
    x = np.asarray(xs, dtype=float)
    k = np.asarray(kernel_values, dtype=float)
    if np.any(k < 0):
        raise EstimationError("negative kernel values cannot form a density")
    norm = trace_from_diagonal(x, k)
    rho = k / norm
    if errors is None:
        err = np.zeros_like(rho)
    else:
        e = np.asarray(errors, dtype=float)
        w = _simpson_weights(x)
        dnorm = math.sqrt(float(np.sum((w * e) ** 2)))
        err = np.sqrt((e / norm) ** 2 + (k * dnorm / norm**2) ** 2)
    return DensityResult(x=x, rho=rho, err2sigma=2.0 * err, norm=norm)


# ----------------------------------------------------------------------------
# log-probability vs action scatter
# ----------------------------------------------------------------------------

@dataclass
class ScatterDiagnostic:
    """Per-path shifted action, shifted log-probability, and distance to F."""

    s_shift: np.ndarray
    logq_shift: np.ndarray
    d: np.ndarray
    free_energy: float
    s_min: float
    offset: float

    def __post_init__(self):
        if np.any(self.d < 0):
            raise ValueError("distances must be nonnegative")


def scatter_from_samples(actions, log_qs, hbar: float,
                         s_min_candidate: Optional[float] = None
                         ) -> ScatterDiagnostic:
    """Scatter coordinates from sampled (action, log q) pairs.

    Both axes are shifted: action by the smallest action seen (optionally
    including an externally supplied minimum), log q by
    b = (-F + S_min)/hbar, so the exact-distribution reference line is
    logq_shift = -s_shift.
    """
    s = np.asarray(actions, dtype=float)
    q = np.asarray(log_qs, dtype=float)
    f = s + hbar * q
    f_mean = float(f.mean())
    s_min = float(s.min())
    if s_min_candidate is not None:
        s_min = min(s_min, float(s_min_candidate))
    offset = (-f_mean + s_min) / hbar
    return ScatterDiagnostic(
        s_shift=(s - s_min) / hbar,
        logq_shift=q + offset,
        d=np.abs(f - f_mean),
        free_energy=f_mean,
        s_min=s_min,
        offset=offset,
    )


def scatter_diagnostic(model: ModelParams, lat: LatticeSpec, pot: Potential,
                       n_paths: int = 10_000,
                       rng: Optional[np.random.Generator] = None
                       ) -> ScatterDiagnostic:
    """Scatter of generated paths in the (action, log q) plane.

    S_min is the smaller of the ensemble minimum and the stationary-path
    action, so recorded actions never undercut it.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    actions, log_qs, _ = _sampled_free_energies(model, lat, pot, n_paths, rng)
    s_cl = euclidean_action(minimal_action_path(lat, pot, tolerance=1e-8), lat, pot)
    return scatter_from_samples(actions, log_qs, lat.hbar, s_min_candidate=s_cl)
