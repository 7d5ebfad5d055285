import math

import numpy as np
import pytest

from vfpg.estimator import (EstimationError, error_bars, estimate_free_energy,
                            estimate_propagator, free_energy_from_samples,
                            ground_state_density, propagator_scan,
                            scatter_diagnostic, scatter_from_samples,
                            trace_from_diagonal)
from vfpg.lattice import LatticeSpec, Potential
from vfpg.model import init_model
from vfpg import oracles as orc
from vfpg.training import batch_rng

from helpers import DiscreteToy


def make_lat(**kwargs):
    base = dict(n_tau=8, total_time=0.5, x_start=0.0, x_end=1.0)
    base.update(kwargs)
    return LatticeSpec(**base)


class TestFreeEnergy:
    def test_exact_target_constant_f(self):
        # q equal to the exact discrete target: F constant, zero spread
        lat = LatticeSpec(n_tau=5, total_time=1.0, x_start=0.0, x_end=1.0)
        toy = DiscreteToy(lat, Potential.harmonic(1.0), np.linspace(-1.5, 2, 5))
        rng = np.random.default_rng(0)
        idx = rng.choice(toy.flat_probs.size, size=512, p=toy.flat_probs)
        f_mean, f_std = free_energy_from_samples(
            toy.actions[idx], toy.log_target[idx], lat.hbar)
        assert f_mean == pytest.approx(-toy.ln_z, abs=1e-10)
        assert f_std == pytest.approx(0.0, abs=1e-10)

    def test_monte_carlo_scaling(self):
        # doubling the sample count shrinks the SEM by about sqrt(2)
        model = init_model(np.random.default_rng(1), n_tau=8, hidden_size=8,
                           n_components=3)
        lat = make_lat()
        pot = Potential.harmonic(1.0)
        sems = {}
        for n in (400, 800):
            means = []
            for trial in range(30):
                rng = np.random.default_rng(1000 + trial)
                f, _ = estimate_free_energy(model, lat, pot, n, rng)
                means.append(f)
            sems[n] = np.std(means, ddof=1)
        ratio = sems[400] / sems[800]
        assert 1.1 < ratio < 1.8

    def test_requires_two_samples(self):
        model = init_model(np.random.default_rng(2), n_tau=8, hidden_size=8,
                           n_components=2)
        with pytest.raises(ValueError):
            estimate_free_energy(model, make_lat(), Potential.harmonic(1.0),
                                 1, np.random.default_rng(0))

    def test_free_energy_ratio_invariant_under_hbar_rescale(self):
        # rescaling hbar and S together leaves F/hbar unchanged
        s = np.array([1.0, 2.0, 3.0])
        q = np.array([-0.5, -1.0, -2.0])
        f1, _ = free_energy_from_samples(s, q, 1.0)
        f2, _ = free_energy_from_samples(2.0 * s, q, 2.0)
        assert f2 / 2.0 == pytest.approx(f1, rel=1e-14)


class TestPropagator:
    def test_unit_and_inverse_e(self):
        # F = 0 -> K = 1; F = hbar -> K = 1/e (via the samples route)
        k0, _ = error_bars(np.array([0.0, 0.0]), 1.0)
        assert k0 == 1.0
        k1, _ = error_bars(np.array([1.0, 1.0]), 1.0)
        assert k1 == pytest.approx(math.exp(-1.0), rel=1e-14)

    def test_variational_inequality_against_partition(self):
        # any generator's kernel estimate stays below the exact partition
        lat = make_lat(n_tau=8)
        pot = Potential.harmonic(1.0)
        ln_z, _ = orc.gaussian_lattice_partition(lat, omega=1.0)
        model = init_model(np.random.default_rng(3), n_tau=8, hidden_size=8,
                           n_components=3)
        est = estimate_propagator(model, lat, pot, 4096,
                                  np.random.default_rng(4))
        sem = 3.0 * est.uncertainty
        assert est.log_value <= ln_z + 3.0 * sem
        assert 0.0 < math.exp(est.log_value) <= math.exp(ln_z)

    def test_log_space_fallback(self):
        model = init_model(np.random.default_rng(5), n_tau=8, hidden_size=8,
                           n_components=2)
        lat = make_lat(hbar=0.001)  # F/hbar is enormous
        est = estimate_propagator(model, lat, Potential.harmonic(1.0), 64,
                                  np.random.default_rng(6))
        assert est.log_space_only
        with pytest.raises(EstimationError):
            _ = est.value


class TestErrorBars:
    def test_identical_runs_zero_bar(self):
        k, dk = error_bars(np.full(10, 2.3), 1.0)
        assert dk == 0.0

    def test_paper_arithmetic(self):
        # K = 0.5, dF = 0.1, N_r = 10, hbar = 1 -> dK = 0.5*0.1/sqrt(10)
        f = -math.log(0.5)
        rng = np.random.default_rng(7)
        draws = rng.standard_normal(10)
        draws = (draws - draws.mean()) / draws.std(ddof=1)  # mean 0, std 1
        k, dk = error_bars(f + 0.1 * draws, 1.0)
        assert k == pytest.approx(0.5, rel=1e-12)
        assert dk == pytest.approx(0.5 * 0.1 / math.sqrt(10), rel=1e-9)

    def test_quadrupling_runs_halves_bar(self):
        rng = np.random.default_rng(8)
        base = rng.standard_normal(10)
        base = (base - base.mean()) / base.std(ddof=1)
        f10 = 1.0 + 0.2 * base
        f40 = np.concatenate([f10] * 4)
        # same spread, four times the runs
        std40 = f40.std(ddof=1)
        k10, dk10 = error_bars(f10, 1.0)
        k40, dk40 = error_bars(f40, 1.0)
        expected = dk10 * (f40.std(ddof=1) / f10.std(ddof=1)) / 2.0
        assert dk40 == pytest.approx(expected, rel=1e-12)

    def test_hbar_factor(self):
        f = np.array([1.0, 1.2, 0.8])
        k2, dk2 = error_bars(f, 2.0)
        assert k2 == pytest.approx(math.exp(-0.5), rel=1e-12)
        assert dk2 == pytest.approx(k2 * f.std(ddof=1) / (2.0 * math.sqrt(3)),
                                    rel=1e-12)

    def test_needs_two_runs(self):
        with pytest.raises(ValueError):
            error_bars(np.array([1.0]), 1.0)


class TestTraceAndScan:
    def test_constant_kernel_normalizes_to_uniform(self):
        xs = np.linspace(-3.0, 3.0, 17)
        scan = propagator_scan(0.0, xs, xs, lambda xi, xf: (0.7, 0.0))
        assert np.allclose(scan.k_norm, 1.0 / 6.0, rtol=1e-6)

    def test_exact_harmonic_scan_matches_closed_form(self):
        xs = np.linspace(-2.0, 2.0, 9)
        diag = np.linspace(-6.2, 6.2, 33)

        def kfn(xi, xf):
            return orc.ho_exact_kernel(xi, xf, 0.5), 0.0

        scan = propagator_scan(0.0, xs, diag, kfn)
        r = math.exp(-0.5)
        exact_trace = math.exp(-0.25) / (1.0 - r)
        assert scan.trace == pytest.approx(exact_trace, rel=1e-4)
        expected = np.array([orc.ho_exact_kernel(0.0, x, 0.5) for x in xs])
        assert np.allclose(scan.k_norm, expected / exact_trace, rtol=1e-3)

    def test_symmetric_potential_symmetric_scan(self):
        xs = np.linspace(-2.0, 2.0, 9)
        diag = np.linspace(-6.0, 6.0, 25)

        def kfn(xi, xf):
            return orc.ho_exact_kernel(xi, xf, 0.5), 0.01

        scan = propagator_scan(0.0, xs, diag, kfn)
        assert np.allclose(scan.k_norm, scan.k_norm[::-1], rtol=1e-12)

    def test_normalized_diagonal_integrates_to_one(self):
        diag = np.linspace(-6.2, 6.2, 33)

        def kfn(xi, xf):
            return orc.ho_exact_kernel(xi, xf, 0.5), 0.0

        scan = propagator_scan(0.0, diag, diag, kfn)
        total = np.trapezoid(scan.diag_k / scan.trace, diag)
        assert total == pytest.approx(1.0, abs=1e-3)

    def test_trace_needs_five_points(self):
        with pytest.raises(EstimationError):
            trace_from_diagonal(np.linspace(0, 1, 4), np.ones(4))

    def test_negative_kernel_rejected(self):
        xs = np.linspace(-1, 1, 9)
        vals = np.ones(9)
        vals[4] = -0.1
        with pytest.raises(EstimationError):
            trace_from_diagonal(xs, vals)


class TestGroundStateDensity:
    def test_exact_kernel_gives_near_analytic_variance(self):
        # omega = 5, T = 1: diagonal kernel variance 1/(2 w tanh(w T/2));
        # the projection residual keeps it within 1.5e-3 of hbar/(2 m w) = 0.1
        xs = np.linspace(-1.5, 1.5, 61)
        k = np.array([orc.ho_exact_kernel(x, x, 1.0, omega=5.0) for x in xs])
        density = ground_state_density(xs, k)
        var = float(np.trapezoid(density.rho * xs**2, xs))
        assert abs(var - 0.1) < 1.5e-3
        assert var == pytest.approx(1.0 / (2.0 * 5.0 * math.tanh(2.5)), abs=2e-4)

    def test_uniform_input_uniform_density(self):
        xs = np.linspace(-2.0, 2.0, 21)
        density = ground_state_density(xs, np.full(21, 3.3))
        assert np.allclose(density.rho, 0.25, rtol=1e-6)

    def test_density_nonnegative_and_normalized(self):
        xs = np.linspace(-4.0, 4.0, 33)
        k = np.array([orc.ho_exact_kernel(x, x, 2.0, omega=1.0) for x in xs])
        density = ground_state_density(xs, k, errors=0.02 * k)
        assert np.all(density.rho >= 0)
        assert np.trapezoid(density.rho, xs) == pytest.approx(1.0, abs=1e-3)
        assert np.all(density.err2sigma >= 0)

    def test_double_well_peaks_near_wells(self):
        # exact-diagonalization density peaks within 0.1 of +-sqrt(10)
        ed = orc.exact_diagonalization(Potential.double_well(0.05, -1.0),
                                       (-12, 12, 2400), n_states=2)
        rho = ed.states[:, 0] ** 2
        density = ground_state_density(ed.grid, rho)
        right = density.x > 1.0
        peak = density.x[right][np.argmax(density.rho[right])]
        assert abs(peak - math.sqrt(10.0)) < 0.1

    def test_negative_values_flagged(self):
        xs = np.linspace(-1, 1, 9)
        vals = np.ones(9)
        vals[0] = -1e-3
        with pytest.raises(EstimationError):
            ground_state_density(xs, vals)


class TestScatterDiagnostic:
    def test_exact_toy_model_all_on_line(self):
        lat = LatticeSpec(n_tau=5, total_time=1.0, x_start=0.0, x_end=1.0)
        toy = DiscreteToy(lat, Potential.harmonic(1.0), np.linspace(-1.5, 2, 5))
        rng = np.random.default_rng(9)
        idx = rng.choice(toy.flat_probs.size, size=2000, p=toy.flat_probs)
        diag = scatter_from_samples(toy.actions[idx], toy.log_target[idx],
                                    lat.hbar)
        assert np.max(diag.d) < 1e-10
        # reference line: logq_shift = -s_shift
        assert np.max(np.abs(diag.logq_shift + diag.s_shift)) < 1e-10

    def test_distance_definition(self):
        rng = np.random.default_rng(10)
        s = rng.uniform(1.0, 5.0, size=100)
        q = rng.normal(-2.0, 0.5, size=100)
        diag = scatter_from_samples(s, q, hbar=1.0)
        f = s + q
        assert np.allclose(diag.d, np.abs(f - f.mean()), atol=1e-14)

    def test_external_minimum_respected(self):
        s = np.array([2.0, 3.0, 4.0])
        q = np.array([-1.0, -1.0, -1.0])
        diag = scatter_from_samples(s, q, 1.0, s_min_candidate=1.5)
        assert diag.s_min == 1.5
        assert np.all(diag.s_shift >= 0.4999)

    def test_model_scatter_shapes_and_min(self):
        lat = make_lat(n_tau=8)
        pot = Potential.harmonic(1.0)
        model = init_model(np.random.default_rng(11), n_tau=8, hidden_size=8,
                           n_components=3)
        diag = scatter_diagnostic(model, lat, pot, n_paths=500,
                                  rng=np.random.default_rng(12))
        assert diag.s_shift.shape == (500,)
        assert np.all(diag.s_shift >= 0)
        assert np.all(diag.d >= 0)
