"""Experiment orchestration: campaigns, CSV/figure emission, manifests.

A scan trains one generator per endpoint pair, ``n_runs`` times with distinct
seeds, and converts the per-run free energies into kernel values with error
bars.  All randomness descends from the master seed through documented
counters: the per-run training seed is drawn from the entropy tuple
(master seed, point index, run index), and inside a run stream 0 initializes
parameters, stream 1 drives sampling, stream 2 drives estimation.

Every experiment writes ``resolved.cfg`` (the fully resolved configuration)
and ``MANIFEST`` (sha256 of every artifact, with a status line); re-running a
completed experiment reproduces byte-identical CSV files.
"""

from __future__ import annotations

import hashlib
import math
import os
from dataclasses import dataclass, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import figures, oracles
from .config import ExperimentConfig, render_config
from .estimator import (error_bars, estimate_free_energy,
                        ground_state_density, propagator_scan,
                        scatter_diagnostic)
from .lattice import Potential
from .training import batch_rng, train

__all__ = ["run_experiment", "run_point_campaign", "PointResult",
            "emit_plot_data", "auto_trace_grid", "derive_run_seed"]

_TRACE_CUTOFF = 1e-4
_TRACE_POINTS = 17


def _limit_blas_threads():
    try:
        from threadpoolctl import threadpool_limits
        return threadpool_limits(limits=1)
    except ImportError:  # pragma: no cover - present in the supported env
        import contextlib
        return contextlib.nullcontext()


def derive_run_seed(master_seed: int, point_index: int, run_index: int) -> int:
    """Counter-based seed split: entropy tuple (master, point, run)."""
    ss = np.random.SeedSequence(entropy=[int(master_seed), int(point_index),
                                         int(run_index)])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


@dataclass
class PointResult:
    """Per-endpoint-pair campaign outcome."""

    x_start: float
    x_end: float
    f_runs: np.ndarray
    kernel: float
    kernel_err: float          # one sigma
    endpoint_dev: Tuple[float, float]

    @property
    def f_mean(self) -> float:
        return float(self.f_runs.mean())


def _train_and_estimate(args) -> Dict[str, float]:
    """One training run plus a fresh-sample free-energy estimate (worker)."""
    config, x_start, x_end, run_seed = args
    with _limit_blas_threads():
        tc = config.build_train_config(x_start=x_start, x_end=x_end,
                                       seed=run_seed)
        model, stats = train(tc)
        rng = batch_rng(run_seed, 2)
        f_mean, f_std = estimate_free_energy(
            model, tc.lattice, tc.potential, config.n_estimate_samples, rng
        )
    return {
        "f": f_mean,
        "f_std": f_std,
        "dev_start": stats.endpoint_dev_start[-1] if stats.n_epochs else 0.0,
        "dev_end": stats.endpoint_dev_end[-1] if stats.n_epochs else 0.0,
    }


def run_point_campaign(config: ExperimentConfig,
                       pairs: Sequence[Tuple[float, float]],
                       master_seed: int) -> List[PointResult]:
    """Train ``n_runs`` independent generators per endpoint pair.

    Runs execute in a process pool when ``parallel_runs`` is set; outputs are
    independent of the execution order.
    """
    jobs = []
    for p_idx, (xi, xf) in enumerate(pairs):
        for r_idx in range(config.n_runs):
            jobs.append((config, float(xi), float(xf),
                         derive_run_seed(master_seed, p_idx, r_idx)))
    if config.parallel_runs and len(jobs) > 1 and (os.cpu_count() or 1) > 1:
        import multiprocessing as mp
        with mp.get_context("fork").Pool(processes=os.cpu_count()) as pool:
            outputs = pool.map(_train_and_estimate, jobs, chunksize=1)
    else:
        outputs = [_train_and_estimate(j) for j in jobs]
    results = []
    for p_idx, (xi, xf) in enumerate(pairs):
        runs = outputs[p_idx * config.n_runs:(p_idx + 1) * config.n_runs]
        f_runs = np.array([r["f"] for r in runs])
        if config.n_runs >= 2:
            kernel, err = error_bars(f_runs, config.hbar)
        else:
            kernel = math.exp(-f_runs[0] / config.hbar)
            err = kernel * runs[0]["f_std"] / (
                config.hbar * math.sqrt(config.n_estimate_samples))
        results.append(PointResult(
            x_start=float(xi), x_end=float(xf), f_runs=f_runs,
            kernel=kernel, kernel_err=err,
            endpoint_dev=(float(np.mean([r["dev_start"] for r in runs])),
                          float(np.mean([r["dev_end"] for r in runs]))),
        ))
    return results


def auto_trace_grid(config: ExperimentConfig) -> np.ndarray:
    """Uniform diagonal grid spanning where the kernel exceeds 1e-4 of peak.

    The span comes from the spectral diagonal kernel of an exact
    diagonalization, so the rule works for any confining potential.
    """
    if config.trace_grid is not None:
        lo, hi, n = config.trace_grid
        return np.linspace(lo, hi, n)
    pot = config.build_potential()
    spec = _reference_spectrum(config, pot)
    xs = spec.grid
    diag = np.zeros_like(xs)
    t_over_h = config.total_time / config.hbar
    weights = np.exp(-t_over_h * (spec.energies - spec.energies[0]))
    for n_state, w in enumerate(weights):
        if w < 1e-12:
            break
        diag += w * spec.states[:, n_state] ** 2
    mask = diag > _TRACE_CUTOFF * diag.max()
    lo, hi = xs[mask][0], xs[mask][-1]
    return np.linspace(lo, hi, _TRACE_POINTS)


def _reference_spectrum(config: ExperimentConfig, pot: Potential,
                        n_states: int = 24):
    # box wide enough for the requested states to decay at the edges;
    # the decay check is strict, so grow the box until it passes
    width = 12.0
    if pot.kind == "harmonic":
        width = 1.6 * math.sqrt(2.0 * (n_states + 0.5) * config.hbar
                                / (config.mass * config.omega)) + 2.0
    elif pot.kind == "double_well":
        width = 2.5 * math.sqrt(abs(config.beta) / (2.0 * config.alpha)) + 8.0
    box = max(width, abs(config.x_start) + 4.0, abs(config.x_end) + 4.0)
    for _ in range(6):
        try:
            return oracles.exact_diagonalization(
                pot, (-box, box, 2001), m=config.mass, hbar=config.hbar,
                n_states=n_states,
            )
        except oracles.OracleError:
            box *= 1.5
    raise oracles.OracleError("could not find a box with decayed eigenstates")


# ----------------------------------------------------------------------------
# artifact emission
# ----------------------------------------------------------------------------

def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def emit_plot_data(path: str, header: str, rows: Sequence[Sequence[float]]) -> None:
    """Bit-stable CSV: header row, 17-significant-digit values, LF endings."""
    lines = [header]
    lines.extend(",".join(_fmt(v) for v in row) for row in rows)
    with open(path, "w", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


class _Workspace:
    """Output directory with manifest bookkeeping."""

    def __init__(self, out_dir: str):
        self.out_dir = out_dir
        os.makedirs(out_dir, exist_ok=True)
        self.files: List[str] = []

    def path(self, name: str) -> str:
        self.files.append(name)
        return os.path.join(self.out_dir, name)

    def write_manifest(self, status: str) -> None:
        lines = ["vfpg-manifest 1", f"status {status}"]
        for name in sorted(set(self.files)):
            full = os.path.join(self.out_dir, name)
            if not os.path.exists(full):
                continue
            digest = hashlib.sha256(open(full, "rb").read()).hexdigest()
            lines.append(f"file {digest} {name}")
        with open(os.path.join(self.out_dir, "MANIFEST"), "w", newline="\n") as fh:
            fh.write("\n".join(lines) + "\n")


def run_experiment(config: ExperimentConfig, out_dir: str) -> List[str]:
    """Execute one experiment kind; returns the artifact list.

    Partial outputs are retained with an ``incomplete`` manifest if anything
    fails.
    """
    ws = _Workspace(out_dir)
    with open(ws.path("resolved.cfg"), "w", newline="\n") as fh:
        fh.write(render_config(config))
    try:
        if config.kind == "train":
            _run_train(config, ws)
        elif config.kind == "scan":
            _run_scan(config, ws)
        elif config.kind == "ground-state":
            _run_ground_state(config, ws)
        elif config.kind == "diagnose":
            _run_diagnose(config, ws)
        elif config.kind == "oracle":
            _run_oracle(config, ws)
        else:  # pragma: no cover - kinds validated at parse time
            raise ValueError(f"unknown kind {config.kind!r}")
    except Exception:
        ws.write_manifest("incomplete")
        raise
    ws.write_manifest("complete")
    return sorted(set(ws.files + ["MANIFEST"]))


def _run_train(config: ExperimentConfig, ws: _Workspace) -> None:
    tc = config.build_train_config()
    if config.checkpoint_interval > 0:
        tc = replace(tc, checkpoint_interval=config.checkpoint_interval,
                     checkpoint_dir=ws.out_dir)
    else:
        tc = replace(tc, checkpoint_dir=ws.out_dir)
    with _limit_blas_threads():
        model, stats = train(tc)
    with open(ws.path("runstats.csv"), "w", newline="\n") as fh:
        fh.write(stats.to_csv())
    ws.files.append("checkpoint_final.bin")
    if config.checkpoint_interval > 0:
        for epoch in range(config.checkpoint_interval, config.max_epochs + 1,
                           config.checkpoint_interval):
            ws.files.append(f"checkpoint_{epoch:06d}.bin")
    if config.make_plots:
        figures.plot_free_energy(stats, ws.path("free_energy.png"))


def _oracle_normalized_scan(config: ExperimentConfig, scan_xs: np.ndarray,
                            ) -> Optional[np.ndarray]:
    """Continuum trace-normalized kernel along the scan, where known exactly."""
    if config.potential != "harmonic":
        return None
    kw = dict(m=config.mass, omega=config.omega, hbar=config.hbar)
    raw = np.array([oracles.ho_exact_kernel(config.x_start, x,
                                            config.total_time, **kw)
                    for x in scan_xs])
    # exact trace of the oscillator kernel: sum of e^{-T E_n / hbar}
    r = math.exp(-config.total_time * config.omega)
    trace = math.exp(-0.5 * config.total_time * config.omega) / (1.0 - r)
    return raw / trace


def _run_scan(config: ExperimentConfig, ws: _Workspace) -> None:
    scan_xs = config.scan_points()
    diag_xs = auto_trace_grid(config)
    pairs = [(config.x_start, float(x)) for x in scan_xs]
    pairs += [(float(x), float(x)) for x in diag_xs]
    results = run_point_campaign(config, pairs, config.seed)
    lookup = {(r.x_start, r.x_end): r for r in results}

    def kernel_fn(xi: float, xf: float) -> Tuple[float, float]:
        r = lookup[(xi, xf)]
        return r.kernel, r.kernel_err

    scan = propagator_scan(config.x_start, scan_xs, diag_xs, kernel_fn)
    emit_plot_data(ws.path("scan.csv"), "x_f,K_raw,K_norm,err2sigma",
                   [(x, kr, kn, e) for x, kr, kn, e in
                    zip(scan.x, scan.k_raw, scan.k_norm, scan.err2sigma)])
    emit_plot_data(ws.path("scan_runs.csv"), "x_start,x_end,run,F",
                   [(r.x_start, r.x_end, i, f)
                    for r in results for i, f in enumerate(r.f_runs)])
    overlay = _oracle_normalized_scan(config, scan_xs)
    if overlay is not None:
        emit_plot_data(ws.path("scan_oracle.csv"), "x,value",
                       list(zip(scan_xs, overlay)))
    if config.make_plots:
        figures.plot_scan(scan, scan_xs, overlay, ws.path("scan.png"))


def _density_overlay(config: ExperimentConfig, xs: np.ndarray) -> np.ndarray:
    if config.potential == "harmonic":
        return oracles.ho_ground_state_density(xs, m=config.mass,
                                               omega=config.omega,
                                               hbar=config.hbar)
    spec = _reference_spectrum(config, config.build_potential())
    psi0 = np.interp(xs, spec.grid, spec.states[:, 0])
    return psi0 ** 2


def _run_ground_state(config: ExperimentConfig, ws: _Workspace) -> None:
    diag_xs = auto_trace_grid(config)
    pairs = [(float(x), float(x)) for x in diag_xs]
    results = run_point_campaign(config, pairs, config.seed)
    k = np.array([r.kernel for r in results])
    err = np.array([r.kernel_err for r in results])
    density = ground_state_density(diag_xs, k, err)
    emit_plot_data(ws.path("density.csv"), "x,rho,err2sigma",
                   list(zip(density.x, density.rho, density.err2sigma)))
    emit_plot_data(ws.path("density_runs.csv"), "x,run,F",
                   [(r.x_end, i, f)
                    for r in results for i, f in enumerate(r.f_runs)])
    overlay = _density_overlay(config, diag_xs)
    emit_plot_data(ws.path("density_oracle.csv"), "x,value",
                   list(zip(diag_xs, overlay)))
    spec = _reference_spectrum(config, config.build_potential())
    gap = float(spec.energies[1] - spec.energies[0])
    with open(ws.path("projection_check.txt"), "w", newline="\n") as fh:
        fh.write(
            "ground-state projection requires total_time >> hbar/gap\n"
            f"total_time = {_fmt(config.total_time)}\n"
            f"hbar_over_gap = {_fmt(config.hbar / gap) if gap > 0 else 'inf'}\n"
        )
    if config.make_plots:
        figures.plot_density(density, overlay, ws.path("density.png"))


def _run_diagnose(config: ExperimentConfig, ws: _Workspace) -> None:
    tc = config.build_train_config(seed=derive_run_seed(config.seed, 0, 0))
    with _limit_blas_threads():
        model, stats = train(tc)
        diag = scatter_diagnostic(model, tc.lattice, tc.potential,
                                  n_paths=config.n_scatter_paths,
                                  rng=batch_rng(tc.seed, 2))
    emit_plot_data(ws.path("scatter.csv"), "s_shift,logq_shift,d",
                   list(zip(diag.s_shift, diag.logq_shift, diag.d)))
    with open(ws.path("runstats.csv"), "w", newline="\n") as fh:
        fh.write(stats.to_csv())
    if config.make_plots:
        figures.plot_scatter(diag, ws.path("scatter.png"))


def _run_oracle(config: ExperimentConfig, ws: _Workspace) -> None:
    pot = config.build_potential()
    spec = _reference_spectrum(config, pot)
    xs = np.linspace(spec.grid[0], spec.grid[-1], 401)
    psi0 = np.interp(xs, spec.grid, spec.states[:, 0])
    emit_plot_data(ws.path("ed_density.csv"), "x,value",
                   list(zip(xs, psi0 ** 2)))
    emit_plot_data(ws.path("ed_levels.csv"), "x,value",
                   [(float(n), float(e)) for n, e in enumerate(spec.energies)])
    curves = {"ed_density": (xs, psi0 ** 2)}
    if config.potential == "harmonic":
        scan_xs = config.scan_points()
        kernel = np.array([
            oracles.ho_exact_kernel(config.x_start, x, config.total_time,
                                    m=config.mass, omega=config.omega,
                                    hbar=config.hbar)
            for x in scan_xs
        ])
        emit_plot_data(ws.path("exact_kernel.csv"), "x,value",
                       list(zip(scan_xs, kernel)))
        curves["exact_kernel"] = (scan_xs, kernel)
    lat = config.build_lattice()
    if config.potential in ("harmonic", "free"):
        omega = config.omega if config.potential == "harmonic" else 0.0
        ln_z, s_min = oracles.gaussian_lattice_partition(lat, omega)
        emit_plot_data(ws.path("lattice_partition.csv"), "x,value",
                       [(0.0, ln_z), (1.0, s_min)])
    if config.make_plots:
        figures.plot_oracle_curves(curves, ws.path("oracle.png"))
