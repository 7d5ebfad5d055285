import math

import numpy as np
import pytest

from vfpg.lattice import (ConvergenceError, LatticeSpec, PathBatch, Potential,
                          action_batch, euclidean_action, minimal_action_path,
                          potential_value, target_log_density_unnormalized)


def make_lat(n_tau=32, total_time=0.5, x_start=0.0, x_end=1.0, hbar=1.0, mass=1.0):
    return LatticeSpec(n_tau=n_tau, total_time=total_time, x_start=x_start,
                       x_end=x_end, hbar=hbar, mass=mass)


class TestLatticeSpec:
    def test_delta_tau_consistency(self):
        lat = make_lat(n_tau=17, total_time=1.3)
        assert lat.delta_tau * (lat.n_tau - 1) == pytest.approx(1.3, abs=1e-15)

    @pytest.mark.parametrize("kwargs", [
        dict(n_tau=2), dict(total_time=0.0), dict(total_time=-1.0),
        dict(hbar=0.0), dict(hbar=-0.5), dict(mass=0.0),
        dict(x_start=float("nan")),
    ])
    def test_invalid_specs_rejected(self, kwargs):
        base = dict(n_tau=8, total_time=1.0, x_start=0.0, x_end=1.0)
        base.update(kwargs)
        with pytest.raises(ValueError):
            LatticeSpec(**base)


class TestPotential:
    def test_harmonic_minimum(self):
        # m = 1 folded in: V(x) = x^2/2
        pot = Potential.harmonic(1.0)
        assert potential_value(pot, 0.0) == 0.0
        assert potential_value(pot, 2.0) == pytest.approx(2.0)

    def test_double_well_stationary_value(self):
        # V(x) = a x^4 + b x^2 has V(sqrt(-b/2a)) = -b^2/(4a)
        pot = Potential.double_well(0.05, -1.0)
        assert potential_value(pot, math.sqrt(10.0)) == pytest.approx(-5.0, abs=1e-12)
        assert potential_value(pot, 0.0) == 0.0

    def test_confinement_required(self):
        with pytest.raises(ValueError):
            Potential.polynomial([0.0, 0.0, -1.0])      # inverted parabola
        with pytest.raises(ValueError):
            Potential.polynomial([0.0, 1.0])             # odd top power
        with pytest.raises(ValueError):
            Potential.harmonic(0.0)
        Potential.polynomial([1.0, -2.0, 0.0, 0.0, 3.0])  # confining quartic

    def test_nonfinite_position_rejected(self):
        with pytest.raises(ValueError):
            potential_value(Potential.harmonic(1.0), float("inf"))


class TestEuclideanAction:
    def test_constant_zero_path(self):
        lat = make_lat(x_start=0.0, x_end=0.0)
        assert euclidean_action(np.zeros(32), lat, Potential.harmonic(3.7)) == 0.0

    def test_constant_unit_path_trapezoid_exact(self):
        # trapezoid of a constant is exact: S = T * V(1) = 0.5 * 0.5
        lat = make_lat(x_start=1.0, x_end=1.0)
        s = euclidean_action(np.ones(32), lat, Potential.harmonic(1.0))
        assert s == pytest.approx(0.25, abs=1e-15)

    def test_linear_path_against_independent_quadrature(self):
        lat = make_lat()
        pot = Potential.harmonic(1.0)
        path = lat.linear_interpolant()
        s = euclidean_action(path, lat, pot)
        # independent evaluation: exact kinetic + trapezoid of V by fsum
        kinetic = (path[-1] - path[0]) ** 2 * lat.mass / (2.0 * lat.total_time)
        assert kinetic == pytest.approx(1.0)
        weights = [0.5] + [1.0] * (lat.n_tau - 2) + [0.5]
        potential = lat.delta_tau * math.fsum(
            w * 0.5 * x * x for w, x in zip(weights, path))
        assert s == pytest.approx(kinetic + potential, rel=1e-14)

    def test_length_and_finiteness_checks(self):
        lat = make_lat()
        pot = Potential.harmonic(1.0)
        with pytest.raises(ValueError):
            euclidean_action(np.zeros(31), lat, pot)
        bad = np.zeros(32)
        bad[5] = np.inf
        with pytest.raises(ValueError):
            euclidean_action(bad, lat, pot)

    def test_action_bounded_below_by_potential_minimum(self):
        lat = make_lat(x_start=-0.3, x_end=0.8)
        pot = Potential.double_well(0.05, -1.0)
        rng = np.random.default_rng(0)
        paths = rng.normal(size=(200, 32)) * 2.0
        paths[:, 0], paths[:, -1] = lat.x_start, lat.x_end
        s = action_batch(paths, lat, pot)
        v_min = -5.0  # double-well minimum
        assert np.all(s >= lat.total_time * v_min - 1e-12)

    def test_reversal_symmetry(self):
        # equal endpoints and an even potential: reversing a path keeps S
        lat = make_lat(x_start=0.7, x_end=0.7)
        pot = Potential.double_well(0.05, -1.0)
        rng = np.random.default_rng(1)
        for _ in range(20):
            p = rng.normal(size=32)
            p[0] = p[-1] = 0.7
            assert euclidean_action(p, lat, pot) == pytest.approx(
                euclidean_action(p[::-1].copy(), lat, pot), rel=1e-12)

    def test_hbar_scaling_exact(self):
        pot = Potential.harmonic(1.0)
        rng = np.random.default_rng(2)
        p = rng.normal(size=32)
        p[0], p[-1] = 0.0, 1.0
        vals = {}
        for hbar in (0.5, 1.0, 2.0):
            lat = make_lat(hbar=hbar)
            vals[hbar] = target_log_density_unnormalized(p, lat, pot)
        # powers of two make the 1/c scaling exact in floating point
        assert vals[0.5] == 2.0 * vals[1.0]
        assert vals[2.0] == 0.5 * vals[1.0]

    def test_grid_refinement_second_order(self):
        # smooth continuum path sampled at N and 2N-1 stamps
        pot = Potential.harmonic(1.0)

        def smooth(tau):
            return np.sin(2.0 * np.pi * tau / 0.5) * 0.3 + 2.0 * tau

        def action_at(n):
            lat = make_lat(n_tau=n)
            tau = lat.times()
            return euclidean_action(smooth(tau), lat, pot), lat

        ref, _ = action_at(4097)
        errs = []
        for n in (33, 65, 129):
            s, _ = action_at(n)
            errs.append(abs(s - ref))
        orders = [math.log2(errs[i] / errs[i + 1]) for i in range(len(errs) - 1)]
        assert min(orders) >= 1.8


class TestMinimalActionPath:
    def test_free_particle_linear(self):
        lat = make_lat(n_tau=16, x_start=-1.0, x_end=2.0)
        p = minimal_action_path(lat, Potential.free(), tolerance=1e-12)
        assert np.allclose(p, lat.linear_interpolant(), atol=1e-10)

    def test_harmonic_zero_endpoints(self):
        lat = make_lat(x_start=0.0, x_end=0.0)
        p = minimal_action_path(lat, Potential.harmonic(1.0), tolerance=1e-12)
        assert np.allclose(p, 0.0, atol=1e-10)

    def test_harmonic_profile_matches_continuum(self):
        # continuum stationarity gives x(tau) = sinh(w tau)/sinh(w T)
        pot = Potential.harmonic(1.0)
        errs = []
        for n in (32, 64):
            lat = make_lat(n_tau=n)
            p = minimal_action_path(lat, pot, tolerance=1e-10)
            tau = lat.times()
            exact = np.sinh(tau) / math.sinh(0.5)
            errs.append(np.max(np.abs(p - exact)))
        assert errs[0] <= 1e-3
        assert errs[1] <= 0.5 * errs[0]  # at least first-order shrink observed

    def test_endpoints_exact(self):
        lat = make_lat(x_start=-0.4, x_end=1.3)
        p = minimal_action_path(lat, Potential.harmonic(2.0))
        assert p[0] == lat.x_start and p[-1] == lat.x_end

    def test_beats_interpolant_and_perturbations(self):
        lat = make_lat()
        pot = Potential.harmonic(1.0)
        p = minimal_action_path(lat, pot, tolerance=1e-10)
        s_star = euclidean_action(p, lat, pot)
        assert s_star <= euclidean_action(lat.linear_interpolant(), lat, pot)
        rng = np.random.default_rng(3)
        for _ in range(100):
            q = p.copy()
            q[1:-1] += rng.normal(scale=1e-2, size=lat.n_tau - 2)
            assert euclidean_action(q, lat, pot) >= s_star

    def test_nonconvergence_reports_gradient_norm(self):
        lat = make_lat()
        with pytest.raises(ConvergenceError, match="grad"):
            minimal_action_path(lat, Potential.harmonic(1.0),
                                tolerance=1e-10, max_iter=3)


class TestPathBatch:
    def test_shape_validation(self):
        with pytest.raises(ValueError):
            PathBatch(positions=np.zeros(5))
        with pytest.raises(ValueError):
            PathBatch(positions=np.zeros((2, 5)), action=np.zeros(3))
        with pytest.raises(ValueError):
            PathBatch(positions=np.full((2, 5), np.nan))

    def test_action_spot_check(self):
        lat = make_lat(n_tau=5, total_time=1.0)
        pot = Potential.harmonic(1.0)
        rng = np.random.default_rng(4)
        pos = rng.normal(size=(6, 5))
        batch = PathBatch(positions=pos, action=action_batch(pos, lat, pot))
        for i in (0, 3, 5):
            assert batch.action[i] == pytest.approx(
                euclidean_action(pos[i], lat, pot), rel=1e-14)
