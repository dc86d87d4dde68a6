import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mvlab.noise import NoiseSpec, h_norm
from mvlab.spectral import SpectralError, SpectralField, TorusGrid
from mvlab.steady import (PotentialSpec, concentrated_density, dimension_constant, fourier_potential, free_energy,
                          gibbs_map, linear_stability_threshold, locate_transition, lyapunov_bound,
                          perturbed_uniform, phase_transition_criterion, spectrum_L, stability_report,
                          steady_state_fixed_point, unstable_modes)

G = TorusGrid(2, 16)
W1 = fourier_potential(PotentialSpec("single_mode", k=(1, 1)), G)
NOISE = NoiseSpec.shells(2, {1: 1.0}, K=1.0)


class TestPotentials:
    def test_single_mode_coefficients(self):
        for k in [(1, 1), (-1, 1), (1, -1), (-1, -1)]:
            assert W1[k] == pytest.approx(-0.5)
        assert np.sum(np.abs(W1.coeffs) ** 2) == pytest.approx(1.0)
        assert np.count_nonzero(W1.coeffs) == 4

    def test_physical_form(self):
        x = G.points.reshape(G.shape + (2,))
        expected = -2.0 * np.cos(2 * np.pi * x[..., 0]) * np.cos(2 * np.pi * x[..., 1])
        np.testing.assert_allclose(W1.to_physical(), expected, atol=1e-14)

    def test_two_mode_coefficients(self):
        W = fourier_potential(PotentialSpec("two_mode", ell=(1, 1)), G)
        assert W[(1, 1)] == pytest.approx(-np.sqrt(2) / 4)
        assert W[(2, -2)] == pytest.approx(-np.sqrt(2) / 4)
        assert np.sum(np.abs(W.coeffs) ** 2) == pytest.approx(1.0)

    def test_explicit_table_symmetrized(self):
        W = fourier_potential(PotentialSpec("explicit", table=(((1, 0), 0.3), ((0, 2), -0.1))), G)
        assert W[(-1, 0)] == 0.3 and W[(0, -2)] == -0.1

    @pytest.mark.parametrize("spec", [PotentialSpec("single_mode", k=(1, 0)),
                                      PotentialSpec("two_mode", ell=(1, 1), k=(3, 3)),
                                      PotentialSpec("explicit")])
    def test_invalid_potentials(self, spec):
        with pytest.raises(SpectralError):
            fourier_potential(spec, G)

    def test_dimension_mismatch(self):
        with pytest.raises(SpectralError):
            fourier_potential(PotentialSpec("single_mode", k=(1, 1, 1)), G)


class TestLinearAnalysis:
    def test_criterion_and_threshold(self):
        c = phase_transition_criterion(W1)
        assert c.has_negative_mode and c.witnesses == [(-1, -1), (-1, 1), (1, -1), (1, 1)]
        assert linear_stability_threshold(W1) == pytest.approx(0.5)
        assert not phase_transition_criterion(SpectralField.zeros(G)).has_negative_mode

    def test_spectrum(self):
        spec = dict(spectrum_L(W1, 0.3, 2))
        assert spec[(1, 1)] == pytest.approx(8 * np.pi**2 * 0.2)
        assert spec[(1, 0)] == pytest.approx(-4 * np.pi**2 * 0.3)
        assert spec[(0, 2)] == pytest.approx(-16 * np.pi**2 * 0.3)
        assert len(spec) == 12

    def test_dimension_constants(self):
        assert dimension_constant(2) == pytest.approx(1 / 64)
        assert dimension_constant(3) == pytest.approx(1 / 80)
        with pytest.raises(ValueError):
            dimension_constant(1)

    def test_unstable_modes(self):
        modes, cw = unstable_modes(W1, 0.2)
        assert len(modes) == 4 and cw == pytest.approx(2 * 0.3)
        assert unstable_modes(W1, 0.5) == ([], 0.0)

    def test_noise_norm_used_in_thresholds(self):
        assert h_norm(NOISE, -1.0, squared=True) == pytest.approx(4.0)

    def test_critical_intensity(self):
        # K²(ν′) = (1 - 2ν′ - (0.3 - ν′)) / (4/64) = 16(0.7 - ν′), minimized at the top of the ν′ grid
        rep = stability_report(W1, 0.3, NOISE)
        assert rep.nu_prime == pytest.approx(0.3 * 199.5 / 200)
        assert rep.K_crit == pytest.approx(np.sqrt(16 * (0.7 - rep.nu_prime)), rel=1e-12)
        assert rep.K_crit == pytest.approx(2.5322, abs=1e-4)
        i = np.argmin(np.abs(rep.nu_grid - 0.25))
        assert rep.K_sq_grid[i] == pytest.approx(16 * (0.7 - rep.nu_grid[i]))
        assert rep.max_eigenvalue == pytest.approx(8 * np.pi**2 * 0.2)
        assert rep.as_dict()["nu_crit_candidates"]["linear_instability"] == pytest.approx(0.5)

    def test_no_threshold_when_stable(self):
        assert stability_report(W1, 0.6, NOISE).K_crit == 0.0

    @pytest.mark.parametrize("mult,expected", [(1.0, 0.0), (1.5, -19.776)])
    def test_lyapunov_bound_values(self, mult, expected):
        Kc = stability_report(W1, 0.3, NOISE).K_crit
        bound, e = lyapunov_bound(W1, 0.3, NOISE.with_K(mult * Kc))
        assert e == pytest.approx(0.29925)
        assert bound == pytest.approx(expected, abs=1e-3)

    @settings(max_examples=25, deadline=None)
    @given(st.floats(0.0, 5.0))
    def test_lyapunov_bound_closed_form(self, K):
        bound, e = lyapunov_bound(W1, 0.3, NOISE.with_K(K))
        assert bound == pytest.approx(-(2 * np.pi) ** 2 * (-0.7 + e + K**2 / 16), abs=1e-9)


class TestSteadyStates:
    def test_uniform_free_energy_zero(self):
        one = SpectralField.constant(G)
        assert free_energy(one, 0.3, W1) == pytest.approx(0.0, abs=1e-15)
        np.testing.assert_allclose(gibbs_map(one, 0.3, W1).coeffs, one.coeffs, atol=1e-15)

    def test_free_energy_interaction_term(self):
        rho = perturbed_uniform(G, {(1, 1): 0.05})
        phys = rho.to_physical()
        entropy = np.mean(phys * np.log(phys))
        # coefficients at ±(1,1) of size 0.05, each weighted by Ŵ = -1/2
        assert free_energy(rho, 0.3, W1) == pytest.approx(0.3 * entropy - 0.5 * 0.5 * 2 * 0.05**2)

    def test_nonuniform_state_below_threshold(self):
        res = steady_state_fixed_point(0.3, W1, perturbed_uniform(G, {(1, 1): 0.05}))
        assert res.converged
        assert res.order_parameter((1, 1)) > 0.05
        np.testing.assert_allclose(gibbs_map(res.rho, 0.3, W1).coeffs, res.rho.coeffs, atol=1e-9)
        assert free_energy(res.rho, 0.3, W1) < 0.0
        assert res.rho.mean == pytest.approx(1.0)

    def test_uniform_state_above_threshold(self):
        res = steady_state_fixed_point(0.6, W1, concentrated_density(G, W1, 4.0))
        assert res.converged
        assert res.order_parameter((1, 1)) < 1e-8

    def test_fixed_point_argument_checks(self):
        with pytest.raises(ValueError):
            steady_state_fixed_point(0.0, W1, SpectralField.constant(G))
        with pytest.raises(ValueError):
            steady_state_fixed_point(0.3, W1, SpectralField.constant(G), damping=0.0)
        with pytest.raises(ValueError):
            steady_state_fixed_point(0.3, W1, SpectralField.constant(G, 2.0))
        with pytest.raises(ValueError):
            perturbed_uniform(G, {(1, 0): 0.6})

    def test_locate_transition(self):
        nu = locate_transition(0.3, 0.6, lambda v: v < 0.4321, width=1e-3)
        assert abs(nu - 0.4321) < 1e-3
        with pytest.raises(ValueError):
            locate_transition(0.5, 0.6, lambda v: v < 0.4321)
