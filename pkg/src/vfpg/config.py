"""Experiment configuration: a strict line-based ``key = value`` format.

Lines are UTF-8, ``#`` starts a comment, keys are validated against the known
set, and every parse error carries its line number.  ``render_config`` writes
a file that parses back to an equal configuration; resolved configurations are
echoed into each output directory so any run can be repeated exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Optional, Tuple

import numpy as np

from .lattice import LatticeSpec, Potential
from .training import TrainConfig

__all__ = ["ConfigError", "ExperimentConfig", "parse_config", "render_config",
           "EXPERIMENT_KINDS"]

EXPERIMENT_KINDS = ("train", "scan", "ground-state", "diagnose", "oracle")
POTENTIAL_KINDS = ("harmonic", "double_well", "polynomial", "free")


class ConfigError(ValueError):
    """Configuration text that cannot be turned into a valid experiment."""


@dataclass(frozen=True)
class ExperimentConfig:
    kind: str
    potential: str = "harmonic"
    omega: float = 1.0
    alpha: float = 0.05
    beta: float = -1.0
    coefficients: Tuple[float, ...] = ()
    n_tau: int = 32
    total_time: float = 0.5
    x_start: float = 0.0
    x_end: float = 1.0
    hbar: float = 1.0
    mass: float = 1.0
    learning_rate: float = 1e-4
    latent_samples: int = 2048
    batch_size: int = 128
    max_epochs: int = 3000
    hidden_size: int = 64
    n_components: int = 0          # 0: one component per batch row
    penalty_weight: float = 1.0
    checkpoint_interval: int = 0
    seed: int = 0
    n_runs: int = 10
    scan_grid: Tuple[float, float, int] = (-2.0, 2.0, 9)
    trace_grid: Optional[Tuple[float, float, int]] = None   # None: automatic
    n_estimate_samples: int = 2048
    n_scatter_paths: int = 10_000
    parallel_runs: bool = True
    make_plots: bool = True
    midpoint_start: bool = False

    def __post_init__(self):
        if self.kind not in EXPERIMENT_KINDS:
            raise ConfigError(f"kind must be one of {EXPERIMENT_KINDS}, "
                              f"got {self.kind!r}")
        if self.potential not in POTENTIAL_KINDS:
            raise ConfigError(f"potential must be one of {POTENTIAL_KINDS}")
        if self.n_runs < 1:
            raise ConfigError("n_runs must be >= 1")
        for name in ("scan_grid", "trace_grid"):
            g = getattr(self, name)
            if g is not None:
                lo, hi, n = g
                if not (hi > lo) or n < 2:
                    raise ConfigError(f"{name} must be increasing with >= 2 points")
        # constructing the pieces validates their own invariants early
        self.build_lattice()
        self.build_potential()
        if self.kind != "oracle":
            self.build_train_config()

    def build_potential(self) -> Potential:
        if self.potential == "harmonic":
            return Potential.harmonic(self.omega, self.mass)
        if self.potential == "double_well":
            return Potential.double_well(self.alpha, self.beta)
        if self.potential == "polynomial":
            if not self.coefficients:
                raise ConfigError("polynomial potential needs coefficients")
            return Potential.polynomial(self.coefficients)
        return Potential.free()

    def build_lattice(self, x_start: Optional[float] = None,
                      x_end: Optional[float] = None) -> LatticeSpec:
        return LatticeSpec(
            n_tau=self.n_tau, total_time=self.total_time,
            x_start=self.x_start if x_start is None else x_start,
            x_end=self.x_end if x_end is None else x_end,
            hbar=self.hbar, mass=self.mass,
        )

    def build_train_config(self, x_start: Optional[float] = None,
                           x_end: Optional[float] = None,
                           seed: Optional[int] = None) -> TrainConfig:
        return TrainConfig(
            lattice=self.build_lattice(x_start, x_end),
            potential=self.build_potential(),
            learning_rate=self.learning_rate,
            latent_sample_count=self.latent_samples,
            batch_size=self.batch_size,
            max_epochs=self.max_epochs,
            seed=self.seed if seed is None else seed,
            hidden_size=self.hidden_size,
            n_components=self.n_components if self.n_components > 0 else None,
            penalty_weight=self.penalty_weight,
            midpoint_start=self.midpoint_start,
        )

    def scan_points(self) -> np.ndarray:
        lo, hi, n = self.scan_grid
        return np.linspace(lo, hi, n)


_INT_KEYS = {"n_tau", "latent_samples", "batch_size", "max_epochs",
             "hidden_size", "n_components", "checkpoint_interval", "seed",
             "n_runs", "n_estimate_samples", "n_scatter_paths"}
_FLOAT_KEYS = {"omega", "alpha", "beta", "total_time", "x_start", "x_end",
               "hbar", "mass", "learning_rate", "penalty_weight"}
_BOOL_KEYS = {"parallel_runs", "make_plots", "midpoint_start"}
_GRID_KEYS = {"scan_grid", "trace_grid"}
_STR_KEYS = {"kind", "potential"}
_LIST_KEYS = {"coefficients"}
_ALL_KEYS = _INT_KEYS | _FLOAT_KEYS | _BOOL_KEYS | _GRID_KEYS | _STR_KEYS | _LIST_KEYS


def _parse_grid(text: str):
    if text.strip().lower() == "auto":
        return None
    parts = text.split(":")
    if len(parts) != 3:
        raise ValueError("expected start:stop:count or auto")
    return (float(parts[0]), float(parts[1]), int(parts[2]))


def _parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("true", "yes", "1", "on"):
        return True
    if t in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def parse_config(text: str) -> ExperimentConfig:
    """Parse configuration text; every failure names its line number."""
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, _, val = line.partition("=")
        key, val = key.strip(), val.strip()
        if key not in _ALL_KEYS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        try:
            if key in _INT_KEYS:
                values[key] = int(val)
            elif key in _FLOAT_KEYS:
                values[key] = float(val)
            elif key in _BOOL_KEYS:
                values[key] = _parse_bool(val)
            elif key in _GRID_KEYS:
                values[key] = _parse_grid(val)
            elif key in _LIST_KEYS:
                values[key] = tuple(float(v) for v in val.split(",") if v.strip())
            else:
                values[key] = val
        except ValueError as err:
            raise ConfigError(f"line {lineno}: bad value for {key!r}: {err}") from err
    if "kind" not in values:
        raise ConfigError("missing key: kind")
    try:
        return ExperimentConfig(**values)
    except ConfigError:
        raise
    except ValueError as err:
        raise ConfigError(str(err)) from err


def render_config(config: ExperimentConfig) -> str:
    """Write a configuration so that parse(render(c)) == c."""
    lines = []
    for f in fields(config):
        v = getattr(config, f.name)
        if f.name in _GRID_KEYS:
            text = "auto" if v is None else f"{v[0]:.17g}:{v[1]:.17g}:{v[2]}"
        elif f.name in _LIST_KEYS:
            if not v:
                continue
            text = ",".join(format(c, ".17g") for c in v)
        elif isinstance(v, bool):
            text = "true" if v else "false"
        elif isinstance(v, float):
            text = format(v, ".17g")
        else:
            text = str(v)
        lines.append(f"{f.name} = {text}")
    return "\n".join(lines) + "\n"
