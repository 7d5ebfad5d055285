"""Imaginary-time lattice, potentials, and the discretized Euclidean action.

A path is a length-``n_tau`` sequence of positions on a uniform imaginary-time
grid spanning ``[0, total_time]``.  Positions stay continuous; only time is
discretized.  The action uses forward differences for the kinetic term (one
term per link) and the trapezoidal rule for the potential term, which is exact
for constant potentials and second-order accurate for smooth paths.

The statistical weight of a path is exp(-S_E/hbar); the kernel normalization
is fixed to one, so only trace-normalized quantities are compared against
reference curves.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

__all__ = [
    "LatticeSpec",
    "Potential",
    "PathBatch",
    "ConvergenceError",
    "potential_value",
    "potential_derivative",
    "euclidean_action",
    "action_batch",
    "target_log_density_unnormalized",
    "minimal_action_path",
]


class ConvergenceError(RuntimeError):
    """Raised when an iterative solve does not reach its tolerance."""


@dataclass(frozen=True)
class LatticeSpec:
    """Uniform imaginary-time grid with fixed endpoints.

    ``n_tau`` counts the time stamps (so there are ``n_tau - 1`` links) and
    ``delta_tau = total_time / (n_tau - 1)``.
    """

    n_tau: int
    total_time: float
    x_start: float
    x_end: float
    hbar: float = 1.0
    mass: float = 1.0

    def __post_init__(self):
        if self.n_tau < 3:
            raise ValueError(f"n_tau must be >= 3, got {self.n_tau}")
        if not (self.total_time > 0):
            raise ValueError(f"total_time must be > 0, got {self.total_time}")
        if not (self.hbar > 0):
            raise ValueError(f"hbar must be > 0, got {self.hbar}")
        if not (self.mass > 0):
            raise ValueError(f"mass must be > 0, got {self.mass}")
        for name in ("x_start", "x_end"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"{name} must be finite")
        # delta_tau * (n_tau - 1) must reproduce total_time to rounding level
        dt = self.total_time / (self.n_tau - 1)
        if abs(dt * (self.n_tau - 1) - self.total_time) > 4 * np.finfo(float).eps * self.total_time:
            raise ValueError("inconsistent grid: delta_tau * (n_tau - 1) != total_time")

    @property
    def delta_tau(self) -> float:
        return self.total_time / (self.n_tau - 1)

    def times(self) -> np.ndarray:
        return np.linspace(0.0, self.total_time, self.n_tau)

    def linear_interpolant(self) -> np.ndarray:
        """Straight line from x_start to x_end; the free-particle minimizer."""
        return np.linspace(self.x_start, self.x_end, self.n_tau)


@dataclass(frozen=True)
class Potential:
    """Tagged one-dimensional potential; every variant reduces to a polynomial.

    ``coeffs`` are ascending by power, so V(x) = sum_k coeffs[k] x^k.
    Construction fails unless the potential is confining (even top power with a
    positive leading coefficient, or the zero polynomial for a free particle).
    """

    kind: str
    coeffs: tuple = ()
    omega: Optional[float] = None

    def __post_init__(self):
        c = np.asarray(self.coeffs, dtype=float)
        if c.size and not np.all(np.isfinite(c)):
            raise ValueError("potential coefficients must be finite")
        # strip trailing zeros to find the true top power
        nz = np.nonzero(c)[0]
        if nz.size:
            top = nz[-1]
            if top % 2 != 0 or c[top] <= 0:
                raise ValueError(
                    "potential is not confining: top power must be even with a "
                    "positive coefficient"
                )
        object.__setattr__(self, "coeffs", tuple(float(v) for v in c))

    @classmethod
    def harmonic(cls, omega: float, mass: float = 1.0) -> "Potential":
        """V(x) = (1/2) m omega^2 x^2."""
        if not (omega > 0):
            raise ValueError(f"harmonic frequency must be > 0, got {omega}")
        return cls(kind="harmonic", coeffs=(0.0, 0.0, 0.5 * mass * omega**2), omega=float(omega))

    @classmethod
    def double_well(cls, alpha: float, beta: float) -> "Potential":
        """V(x) = alpha x^4 + beta x^2 (two wells when beta < 0 < alpha)."""
        return cls(kind="double_well", coeffs=(0.0, 0.0, beta, 0.0, alpha))

    @classmethod
    def polynomial(cls, coeffs) -> "Potential":
        return cls(kind="polynomial", coeffs=tuple(float(c) for c in coeffs))

    @classmethod
    def free(cls) -> "Potential":
        return cls(kind="free", coeffs=())

    def derivative_coeffs(self) -> np.ndarray:
        c = np.asarray(self.coeffs, dtype=float)
        if c.size <= 1:
            return np.zeros(1)
        return c[1:] * np.arange(1, c.size)

    def second_derivative_coeffs(self) -> np.ndarray:
        d = self.derivative_coeffs()
        if d.size <= 1:
            return np.zeros(1)
        return d[1:] * np.arange(1, d.size)


def potential_value(pot: Potential, x):
    """Evaluate V(x) by Horner's rule; rejects non-finite positions."""
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)):
        raise ValueError("position must be finite")
    if not pot.coeffs:
        return np.zeros_like(x) if x.ndim else 0.0
    val = np.polynomial.polynomial.polyval(x, np.asarray(pot.coeffs))
    return float(val) if x.ndim == 0 else val


def potential_derivative(pot: Potential, x):
    """dV/dx, used by the minimal-action solve."""
    x = np.asarray(x, dtype=float)
    val = np.polynomial.polynomial.polyval(x, pot.derivative_coeffs())
    return float(val) if x.ndim == 0 else val


def _ordered_sum(values: np.ndarray, axis: int = -1) -> np.ndarray:
    # left-to-right accumulation: bit-reproducible and order-fixed
    return np.cumsum(values, axis=axis).take(-1, axis=axis)


def euclidean_action(path, lat: LatticeSpec, pot: Potential) -> float:
    """Discretized Euclidean action of a single path.

    Kinetic term: sum over links of (m/2) ((x_{k+1}-x_k)/dtau)^2 dtau.
    Potential term: trapezoidal rule, endpoint values weighted by 1/2.
    Summation is left-to-right so results are reproducible per platform.
    """
    x = np.asarray(path, dtype=float)
    if x.ndim != 1 or x.shape[0] != lat.n_tau:
        raise ValueError(f"path length {x.shape} does not match n_tau={lat.n_tau}")
    if not np.all(np.isfinite(x)):
        raise ValueError("path contains non-finite positions")
    return float(action_batch(x[None, :], lat, pot)[0])


def action_batch(paths: np.ndarray, lat: LatticeSpec, pot: Potential) -> np.ndarray:
    """Vectorized action for a (batch, n_tau) array of paths."""
    x = np.asarray(paths, dtype=float)
    if x.ndim != 2 or x.shape[1] != lat.n_tau:
        raise ValueError(f"paths shape {x.shape} does not match n_tau={lat.n_tau}")
    if not np.all(np.isfinite(x)):
        raise ValueError("paths contain non-finite positions")
    dt = lat.delta_tau
    dx = np.diff(x, axis=1)
    kinetic = (0.5 * lat.mass / dt) * _ordered_sum(dx * dx, axis=1)
    v = potential_value(pot, x)
    w = np.ones(lat.n_tau)
    w[0] = w[-1] = 0.5
    potential = dt * _ordered_sum(v * w, axis=1)
    return kinetic + potential


def target_log_density_unnormalized(path, lat: LatticeSpec, pot: Potential) -> float:
    """log of the unnormalized path weight: -S_E/hbar."""
    return -euclidean_action(path, lat, pot) / lat.hbar


def _interior_gradient(x: np.ndarray, lat: LatticeSpec, pot: Potential) -> np.ndarray:
    dt = lat.delta_tau
    lap = 2.0 * x[1:-1] - x[:-2] - x[2:]
    return (lat.mass / dt) * lap + dt * potential_derivative(pot, x[1:-1])


def minimal_action_path(
    lat: LatticeSpec,
    pot: Potential,
    tolerance: float = 1e-8,
    max_iter: int = 50_000,
) -> np.ndarray:
    """Stationary path of the discretized action with endpoints held fixed.

    Deterministic gradient descent with backtracking line search, started from
    the linear interpolant.  Barzilai-Borwein step guesses with a nonmonotone
    (last-10 reference) backtracking rule handle the stiff kinetic coupling.
    Converged when the sup norm of the interior gradient is at or below
    ``tolerance``.
    """
    x = lat.linear_interpolant()
    g = _interior_gradient(x, lat, pot)
    gnorm = np.max(np.abs(g)) if g.size else 0.0
    if gnorm <= tolerance:
        return x
    s = euclidean_action(x, lat, pot)
    recent = [s]
    step = lat.delta_tau / (2.0 * lat.mass)  # inverse of the kinetic diagonal
    prev_x_int = None
    prev_g = None
    for _ in range(max_iter):
        if prev_g is not None:
            dx = x[1:-1] - prev_x_int
            dg = g - prev_g
            denom = float(dx @ dg)
            if denom > 0:
                step = float(dx @ dx) / denom
        prev_x_int = x[1:-1].copy()
        prev_g = g.copy()
        gsq = float(g @ g)
        reference = max(recent)
        t = step
        for _ in range(60):
            x_new = x.copy()
            x_new[1:-1] = x[1:-1] - t * g
            s_new = euclidean_action(x_new, lat, pot)
            if s_new <= reference - 1e-4 * t * gsq:
                break
            t *= 0.5
        else:
            raise ConvergenceError(
                f"line search failed at gradient norm {np.max(np.abs(g)):.3e}"
            )
        x, s = x_new, s_new
        recent.append(s)
        if len(recent) > 10:
            recent.pop(0)
        g = _interior_gradient(x, lat, pot)
        gnorm = np.max(np.abs(g))
        if gnorm <= tolerance:
            return x
    raise ConvergenceError(
        f"minimal-action solve did not converge: |grad|_inf = {gnorm:.3e} "
        f"after {max_iter} iterations (tolerance {tolerance:.1e})"
    )


@dataclass
class PathBatch:
    """A batch of discretized paths with optional per-path action and log q."""

    positions: np.ndarray
    action: Optional[np.ndarray] = None
    log_q: Optional[np.ndarray] = None

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=float)
        if self.positions.ndim != 2:
            raise ValueError("positions must be a (batch, n_tau) array")
        if not np.all(np.isfinite(self.positions)):
            raise ValueError("positions must be finite")
        n = self.positions.shape[0]
        for name in ("action", "log_q"):
            v = getattr(self, name)
            if v is not None:
                v = np.asarray(v, dtype=float)
                if v.shape != (n,):
                    raise ValueError(f"{name} must have shape ({n},)")
                setattr(self, name, v)

    @property
    def batch_size(self) -> int:
        return self.positions.shape[0]

    @property
    def n_tau(self) -> int:
        return self.positions.shape[1]
