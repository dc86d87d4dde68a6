import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mvlab.noise import (NoiseSpec, brownian_path, covariance_matrix, gaussians_to_increments, h_norm,
                         ito_coefficient, make_basis, mode_amplitudes, sample_increment, velocity_field,
                         wong_zakai)
from mvlab.rng import CounterStream
from mvlab.spectral import SpectralError, TorusGrid, div, evaluate


def unit_shell(d=2, K=1.0):
    return NoiseSpec.shells(d, {1: 1.0}, K=K)


class TestSpec:
    def test_primaries_half_lattice(self):
        spec = NoiseSpec.shells(2, {1: 1.0, 2: 0.5}, K=1.0)
        assert len(spec.active) == 8
        assert [tuple(k) for k in spec.primaries] == [(1, 0), (0, 1), (1, 1), (1, -1)]
        assert spec.n_real == 8

    def test_validation(self):
        with pytest.raises(ValueError):
            NoiseSpec.shells(1, {1: 1.0}, K=1.0)
        with pytest.raises(ValueError):
            NoiseSpec.shells(2, {1: 1.0}, K=-1.0)

    def test_power_law(self):
        spec = NoiseSpec.power_law(2, 2.0, 2.0, 2, K=1.0)
        assert spec.theta(1) == pytest.approx(2.0)
        assert spec.theta(4) == pytest.approx(0.5)

    def test_covariance_unit_shell(self):
        # four modes ±e1, ±e2, each contributing the projector onto the other axis
        np.testing.assert_allclose(covariance_matrix(unit_shell(2)), 2 * np.eye(2))
        np.testing.assert_allclose(covariance_matrix(unit_shell(3)), 4 * np.eye(3))
        assert ito_coefficient(unit_shell(2)) == 2.0

    def test_h_norms(self):
        spec = NoiseSpec.shells(2, {1: 1.0, 2: 1.0}, K=1.0)
        assert h_norm(spec, -1.0, squared=True) == pytest.approx(4 * 1.0 + 4 * 0.5)
        assert h_norm(unit_shell(), -1.0, squared=True) == 4.0
        assert h_norm(unit_shell(), 0.0) == pytest.approx(2.0)


class TestBasis:
    @settings(max_examples=30, deadline=None)
    @given(d=st.sampled_from([2, 3, 4]), n=st.integers(1, 2))
    def test_orthonormal_and_transverse(self, d, n):
        spec = NoiseSpec.power_law(d, 1.0, 1.0, n, K=1.0)
        basis = make_basis(spec)
        for k, vecs in zip(spec.primaries, basis.vectors):
            np.testing.assert_allclose(vecs @ vecs.T, np.eye(d - 1), atol=1e-12)
            np.testing.assert_allclose(vecs @ k, 0.0, atol=1e-12)

    def test_negative_mode_shares_basis(self):
        basis = make_basis(unit_shell(3))
        np.testing.assert_array_equal(basis.for_mode((0, 0, -1)), basis.for_mode((0, 0, 1)))
        with pytest.raises(KeyError):
            basis.for_mode((2, 0, 0))


class TestIncrements:
    def test_complex_variance(self):
        spec = unit_shell()
        z = CounterStream(1).normal_block(0, 20000, spec.n_real)
        inc = gaussians_to_increments(spec, z, 0.01)
        assert np.mean(np.abs(inc) ** 2) == pytest.approx(0.01, rel=0.02)
        assert np.mean(inc.real**2) == pytest.approx(0.005, rel=0.03)

    def test_conjugate_lookup(self):
        inc = sample_increment(unit_shell(), 0.1, CounterStream(2), step=3)
        assert inc.at((-1, 0)) == np.conj(inc.at((1, 0)))
        with pytest.raises(KeyError):
            inc.at((2, 0))

    def test_velocity_divergence_free_and_real(self):
        spec = NoiseSpec.shells(3, {1: 1.0, 2: 0.7, 3: 0.3}, K=2.0)
        g = TorusGrid(3, 8)
        V = velocity_field(spec, make_basis(spec), sample_increment(spec, 1e-3, CounterStream(0)), g)
        # exact in d = 2; rounding-level for Gram–Schmidt bases in d = 3
        assert np.max(np.abs(div(V).coeffs)) <= 1e-14 * np.max(np.abs(V.coeffs))
        assert np.max(np.abs(np.fft.ifftn(V.coeffs, axes=(1, 2, 3)).imag)) < 1e-15

    def test_pointwise_energy(self):
        # E|ΔV(x)|² = 2K²Δt tr Q at every x
        spec = unit_shell(K=1.5)
        basis = make_basis(spec)
        dt = 1e-2
        z = CounterStream(4).normal_block(0, 40000, spec.n_real)
        amps = mode_amplitudes(spec, basis, gaussians_to_increments(spec, z, dt))
        x = np.array([0.1, 0.7])
        ph = np.exp(2j * np.pi * spec.primaries @ x)
        V = 2 * np.real(np.einsum("npd,p->nd", amps, ph))
        expected = 2 * spec.K**2 * dt * np.trace(covariance_matrix(spec))
        assert np.mean(np.sum(V**2, axis=1)) == pytest.approx(expected, rel=0.03)

    def test_divergence_exactly_zero_in_2d(self):
        spec = NoiseSpec.shells(2, {1: 1.0, 2: 0.5, 5: 0.25}, K=1.0)
        V = velocity_field(spec, make_basis(spec), sample_increment(spec, 1e-3, CounterStream(1)), TorusGrid(2, 16))
        assert np.max(np.abs(div(V).coeffs)) == 0.0

    def test_grid_too_small(self):
        spec = NoiseSpec.shells(2, {4: 1.0}, K=1.0)
        with pytest.raises(SpectralError):
            velocity_field(spec, make_basis(spec), sample_increment(spec, 1e-3, CounterStream(0)), TorusGrid(2, 4))


class TestWongZakai:
    def test_breakpoints_on_brownian_path(self):
        spec = unit_shell()
        st_ = CounterStream(9)
        path = wong_zakai(spec, 0.5, 4, st_, base_level=8)
        B = brownian_path(spec, 0.5, 8, st_)
        np.testing.assert_array_equal(path.values_at_breakpoints(), B[::16])
        np.testing.assert_allclose(path(0.125), B[32])

    def test_linear_between_breakpoints(self):
        path = wong_zakai(unit_shell(), 1.0, 3, CounterStream(1))
        a, b = path(0.25), path(0.375)
        np.testing.assert_allclose(path(0.3125), 0.5 * (a + b))
        np.testing.assert_allclose(path.derivative(0.3), (b - a) / 0.125)

    def test_levels_share_fine_path(self):
        path = wong_zakai(unit_shell(), 1.0, 6, CounterStream(1), base_level=10)
        coarse = path.at_level(2)
        np.testing.assert_array_equal(coarse.values_at_breakpoints(), path.values_at_breakpoints()[::16])
        with pytest.raises(ValueError):
            path.at_level(11)

    def test_quadratic_variation(self):
        spec = unit_shell()
        B = brownian_path(spec, 4.0, 10, CounterStream(3))
        qv = np.sum(np.abs(np.diff(B, axis=0)) ** 2, axis=0)
        np.testing.assert_allclose(qv, 4.0, rtol=0.1)

    def test_velocity_evaluation_matches_sum(self):
        spec = unit_shell()
        g = TorusGrid(2, 8)
        basis = make_basis(spec)
        inc = sample_increment(spec, 1.0, CounterStream(0))
        V = velocity_field(spec, basis, inc, g)
        x = np.array([[0.3, 0.9]])
        amps = mode_amplitudes(spec, basis, inc.values)
        direct = 2 * np.real(np.sum(amps * np.exp(2j * np.pi * spec.primaries @ x[0])[:, None], axis=0))
        np.testing.assert_allclose(evaluate(V, x)[0], direct, atol=1e-12)
