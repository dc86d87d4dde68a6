import numpy as np
import pytest

from mvlab.noise import NoiseSpec, wong_zakai
from mvlab.rng import CounterStream
from mvlab.solver import (ControlPath, ModelParams, NoiseStreams, SolverBlowup, SolverConfig, div_sparse_product,
                          run_controlled, run_linearized, run_pure_transport, run_spde)
from mvlab.spectral import SpectralError, SpectralField, TorusGrid, to_physical, to_spectral
from mvlab.steady import PotentialSpec, fourier_potential

G = TorusGrid(2, 16)


def single_mode(grid=G):
    return fourier_potential(PotentialSpec("single_mode", k=(1, 1)), grid)


def noise(K):
    return NoiseSpec.shells(2, {1: 1.0}, K=K)


def reference_deterministic(rho0, nu, W, T, n):
    """Independent pseudo-spectral RK4 with physical-space products (no integrating factor)."""
    g = rho0.grid
    ax = (0, 1)

    def rhs(c):
        u = np.fft.ifftn(c * g.size).real
        gw = [np.fft.ifftn(g.deriv[i] * W.coeffs * c * g.size).real for i in range(2)]
        flux = [np.fft.fftn(u * gw[i], axes=ax) / g.size for i in range(2)]
        return np.where(g.dealias_mask, nu * g.lap * c + g.deriv[0] * flux[0] + g.deriv[1] * flux[1], 0.0)

    c = rho0.coeffs.copy()
    h = T / n
    for _ in range(n):
        k1 = rhs(c)
        k2 = rhs(c + 0.5 * h * k1)
        k3 = rhs(c + 0.5 * h * k2)
        k4 = rhs(c + h * k3)
        c = c + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
    return c


class TestConfig:
    def test_dt_must_divide_T(self):
        with pytest.raises(ValueError):
            SolverConfig(G, 0.3, 1.0).n_steps

    def test_unknown_scheme(self):
        with pytest.raises(ValueError):
            SolverConfig(G, 0.1, 1.0, scheme="rk4")

    def test_potential_must_be_even_and_real(self):
        W = SpectralField.zeros(G)
        W.coeffs[G.index_of((1, 0))] = -0.5
        with pytest.raises(SpectralError):
            ModelParams(0.3, W, noise(0.0))
        W.coeffs[G.index_of((-1, 0))] = -0.5j
        with pytest.raises(SpectralError):
            ModelParams(0.3, W, noise(0.0))

    def test_grid_too_small_for_noise(self):
        g = TorusGrid(2, 4)
        p = ModelParams(0.3, SpectralField.zeros(g), noise(1.0))
        with pytest.raises(SpectralError):
            run_spde(SpectralField.constant(g), p, SolverConfig(g, 0.1, 0.1), NoiseStreams(0))

    def test_streams_required(self):
        p = ModelParams(0.3, single_mode(), noise(1.0))
        with pytest.raises(ValueError):
            run_spde(SpectralField.constant(G), p, SolverConfig(G, 0.1, 0.1))


class TestDeterministic:
    def test_heat_decay_exact(self):
        p = ModelParams(1.0, SpectralField.zeros(G), noise(0.0))
        r0 = SpectralField.from_modes(G, {(1, 0): 0.05, (2, 1): 0.02j}, mean=1.0)
        tr = run_spde(r0, p, SolverConfig(G, 1e-3, 0.1, keep_fields=True))
        f = tr.final()
        assert f[(1, 0)] == pytest.approx(0.05 * np.exp(-4 * np.pi**2 * 0.1), rel=1e-12)
        assert f[(2, 1)] == pytest.approx(0.02j * np.exp(-20 * np.pi**2 * 0.1), rel=1e-12)

    @pytest.mark.parametrize("scheme,order", [("strang", 2), ("ito_em", 1)])
    def test_converges_to_independent_rk4(self, scheme, order):
        W = single_mode()
        p = ModelParams(0.3, W, noise(0.0))
        r0 = SpectralField.from_modes(G, {(1, 1): 0.1, (1, 0): 0.05}, mean=1.0)
        ref = reference_deterministic(r0, 0.3, W, 0.1, 2000)
        errs = []
        for dt in (1e-3, 5e-4, 2.5e-4):
            tr = run_spde(r0, p, SolverConfig(G, dt, 0.1, scheme=scheme, keep_fields=True, record_every=10**6))
            errs.append(np.max(np.abs(tr.final().coeffs - ref)))
        slopes = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
        assert np.all(np.abs(slopes - order) < 0.1)
        assert errs[-1] < 5e-3 * np.max(np.abs(ref - r0.coeffs))

    def test_linearized_growth_rate(self):
        # unstable mode (1,1): λ = -|2πk|²(ν + Ŵ) = 8π² · 0.2
        p = ModelParams(0.3, single_mode(), noise(0.0))
        v0 = SpectralField.from_modes(G, {(1, 1): 0.01})
        tr = run_linearized(v0, p, SolverConfig(G, 1e-3, 0.2, keep_fields=True))
        rate = np.log(abs(tr.final()[(1, 1)]) / 0.01) / 0.2
        assert rate == pytest.approx(8 * np.pi**2 * 0.2, rel=1e-12)

    def test_linearized_requires_mean_free(self):
        p = ModelParams(0.3, single_mode(), noise(0.0))
        with pytest.raises(ValueError):
            run_linearized(SpectralField.constant(G), p, SolverConfig(G, 1e-3, 0.01))

    def test_free_energy_decreases(self):
        p = ModelParams(0.6, single_mode(), noise(0.0))
        r0 = SpectralField.from_modes(G, {(1, 1): 0.2, (0, 1): 0.1}, mean=1.0)
        tr = run_spde(r0, p, SolverConfig(G, 1e-3, 0.2, record_every=10), free_energy=True)
        assert np.all(np.diff(tr.diagnostics["free_energy"][0]) < 0)

    def test_rescaled_model_same_solution(self):
        p = ModelParams(0.3, single_mode(), noise(0.0))
        r0 = SpectralField.from_modes(G, {(1, 1): 0.1}, mean=1.0)
        a = run_spde(r0, p, SolverConfig(G, 1e-3, 0.1, keep_fields=True)).final()
        b = run_spde(r0, p.rescaled(), SolverConfig(G, 3e-4, 0.03, keep_fields=True)).final()
        np.testing.assert_allclose(a.coeffs, b.coeffs, atol=1e-13)

    def test_blowup_cap(self):
        p = ModelParams(0.01, single_mode(), noise(0.0))
        v0 = SpectralField.from_modes(G, {(1, 1): 1.0})
        with pytest.raises(SolverBlowup):
            run_linearized(v0, p, SolverConfig(G, 1e-3, 1.0, blowup_cap=10.0))

    def test_zero_control_matches_deterministic(self):
        p = ModelParams(0.3, single_mode(), noise(1.0))
        r0 = SpectralField.from_modes(G, {(1, 1): 0.1}, mean=1.0)
        a = run_controlled(r0, p, ControlPath.zero(p.noise), SolverConfig(G, 1e-3, 0.1, keep_fields=True)).final()
        ref = reference_deterministic(r0, 0.3, p.W, 0.1, 2000)
        np.testing.assert_allclose(a.coeffs, ref, rtol=0, atol=1e-7)


class TestNoise:
    @pytest.mark.parametrize("scheme", ["ito_em", "strang"])
    def test_uniform_state_invariant(self, scheme):
        p = ModelParams(0.3, single_mode(), noise(2.0))
        one = SpectralField.constant(G)
        tr = run_spde(one, p, SolverConfig(G, 1e-3, 0.05, scheme=scheme, keep_fields=True), NoiseStreams(1, 2))
        assert np.max(np.abs(tr.fields[-1] - one.coeffs)) < (1e-15 if scheme == "strang" else 1e-300)

    def test_mass_exact_for_ito_scheme(self):
        p = ModelParams(0.3, single_mode(), noise(1.0))
        r0 = SpectralField.from_modes(G, {(1, 1): 0.1, (1, 0): 0.05}, mean=1.0)
        tr = run_spde(r0, p, SolverConfig(G, 1e-3, 0.1), NoiseStreams(2, 3))
        assert np.all(tr.diagnostics["mass"] == 1.0)

    def test_strang_mass_drift_is_small(self):
        # the pull-back re-samples on the grid, so mass moves at truncation level
        p = ModelParams(0.3, single_mode(), noise(1.0))
        r0 = SpectralField.from_modes(G, {(1, 1): 0.1, (1, 0): 0.05}, mean=1.0)
        tr = run_spde(r0, p, SolverConfig(G, 1e-3, 0.1, scheme="strang"), NoiseStreams(2, 3))
        assert np.max(np.abs(tr.diagnostics["mass"] - 1.0)) < 1e-5

    def test_members_independent_of_batching(self):
        p = ModelParams(0.3, single_mode(), noise(1.0))
        r0 = SpectralField.from_modes(G, {(1, 1): 0.1}, mean=1.0)
        cfg = SolverConfig(G, 1e-3, 0.05, keep_fields=True)
        both = run_spde(r0, p, cfg, NoiseStreams(5, 2))
        second = run_spde(r0, p, cfg, NoiseStreams(5, 1, first_member=1))
        np.testing.assert_array_equal(both.fields[-1, 1], second.fields[-1, 0])

    def test_sparse_product_matches_fft(self, rng):
        g = TorusGrid(2, 24)
        c = np.zeros(g.shape, dtype=complex)
        band = np.max(np.abs(g.kvec), axis=0) <= 5
        c[band] = rng.standard_normal(band.sum()) + 1j * rng.standard_normal(band.sum())
        u = to_spectral(g, to_physical(SpectralField(g, 0.5 * (c + np.conj(c[g.neg_index()])))))
        ks = np.array([[1, 0], [-1, 0], [0, 2], [0, -2]])
        a = rng.standard_normal(2) + 1j * rng.standard_normal(2)
        amps = np.array([[[0, a[0]], [0, np.conj(a[0])], [a[1], 0], [np.conj(a[1]), 0]]])
        vel = np.zeros((2,) + g.shape, dtype=complex)
        for k, amp in zip(ks, amps[0]):
            vel[(slice(None),) + g.index_of(k)] = amp
        prod = [to_spectral(g, to_physical(u) * to_physical(SpectralField(g, vel[i]))).coeffs for i in range(2)]
        ref = g.deriv[0] * prod[0] + g.deriv[1] * prod[1]
        out = div_sparse_product(u.coeffs[None], ks, amps, g)[0]
        np.testing.assert_allclose(out, ref, atol=1e-12)

    def test_pure_transport_refinement_shares_path(self):
        g = TorusGrid(2, 32)
        u0 = SpectralField.from_modes(g, {(1, 0): 0.05})
        s = noise(0.1)
        outs = []
        for f in (1, 2):
            tr = run_pure_transport(u0, s, SolverConfig(g, 1e-3 / f, 0.1, keep_fields=True, record_every=10**6),
                                    NoiseStreams(0, factor=2 // f))
            outs.append(tr.final() * float(np.exp(tr.log_scale[0])))
        assert (outs[0] - outs[1]).norm(0) < 0.05 * u0.norm(0)

    def test_wong_zakai_control_runs(self):
        p = ModelParams(0.3, single_mode(), noise(0.5))
        path = wong_zakai(p.noise, 0.1, 5, CounterStream(0))
        r0 = SpectralField.from_modes(G, {(1, 1): 0.1}, mean=1.0)
        tr = run_controlled(r0, p, ControlPath.from_wong_zakai(path), SolverConfig(G, 1e-3, 0.1))
        assert np.all(tr.diagnostics["mass"] == pytest.approx(1.0, abs=1e-14))
