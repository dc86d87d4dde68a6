import numpy as np
import pytest

from mvlab.flow import (BrownianDriver, FlowError, backward_characteristics, grid_points, integrate_characteristics,
                        pullback, transport_scalar)
from mvlab.noise import NoiseSpec, wong_zakai
from mvlab.rng import CounterStream
from mvlab.spectral import SpectralField, TorusGrid


def spec(K):
    return NoiseSpec.shells(2, {1: 1.0}, K=K)


@pytest.fixture
def pts():
    return np.random.default_rng(0).random((50, 2))


class TestDriver:
    def test_coarsen_sums_fine_increments(self):
        s = spec(1.0)
        fine = BrownianDriver(s, 0.01, CounterStream(1))
        coarse = fine.coarsen(4)
        np.testing.assert_allclose(coarse.block(2, 3), fine.block(8, 12).reshape(3, 4, 2, 1).sum(axis=1))

    def test_fixed_increments_horizon(self):
        d = BrownianDriver.zero(spec(1.0), 0.1, 5)
        assert d.horizon == pytest.approx(0.5)
        with pytest.raises(FlowError):
            d.block(3, 3)

    def test_bad_arguments(self):
        with pytest.raises(FlowError):
            BrownianDriver(spec(1.0), 0.0, CounterStream(0))
        with pytest.raises(FlowError):
            BrownianDriver(spec(1.0), 0.1)


class TestCharacteristics:
    def test_zero_noise_is_identity(self, pts):
        fm = integrate_characteristics(spec(0.0), BrownianDriver(spec(0.0), 0.1, CounterStream(0)), pts, 1.0)
        np.testing.assert_array_equal(fm.points, pts)

    def test_single_mode_step_exact_for_all_schemes(self, pts):
        # one excited mode k = (1, 0): the velocity points along e2 and depends on x1 only
        s = spec(1.0)
        inc = np.zeros((1, 2, 1), dtype=complex)
        inc[0, 0, 0] = 0.3 + 0.1j
        drv = BrownianDriver.from_increments(s, 0.01, inc)
        out = {sch: integrate_characteristics(s, drv, pts, 0.01, scheme=sch).unwrapped
               for sch in ("heun", "euler", "shear")}
        c = np.sqrt(2) * (inc[0, 0, 0] * np.array([0.0, 1.0]))
        exact = pts - 2 * np.real(np.exp(2j * np.pi * pts[:, :1]) * c)
        for x in out.values():
            np.testing.assert_allclose(x, exact, atol=1e-14)

    def test_shear_volume_preserving(self, pts):
        s = spec(0.25)
        fm = integrate_characteristics(s, BrownianDriver(s, 1e-3, CounterStream(7)), pts, 1.0, scheme="shear",
                                       jacobian=True)
        assert np.max(np.abs(fm.det() - 1)) < 1e-9

    def test_heun_jacobian_matches_finite_differences(self, pts):
        s = spec(0.5)
        drv = BrownianDriver(s, 1e-2, CounterStream(3))
        fm = integrate_characteristics(s, drv, pts[:5], 0.2, jacobian=True)
        h = 1e-6
        for j in range(2):
            e = np.zeros(2)
            e[j] = h
            xp = integrate_characteristics(s, drv, pts[:5] + e, 0.2).unwrapped
            xm = integrate_characteristics(s, drv, pts[:5] - e, 0.2).unwrapped
            np.testing.assert_allclose((xp - xm) / (2 * h), fm.jacobian()[:, :, j], atol=1e-6)

    def test_shear_backward_is_exact_inverse(self, pts):
        s = spec(0.5)
        drv = BrownianDriver(s, 1e-3, CounterStream(2))
        fwd = integrate_characteristics(s, drv, pts, 0.5, scheme="shear")
        back = backward_characteristics(s, drv, fwd.unwrapped, 0.5, scheme="shear")
        np.testing.assert_allclose(back.unwrapped, pts, atol=1e-12)

    def test_euler_and_heun_converge_on_shared_path(self, pts):
        s = spec(0.1)
        base = BrownianDriver(s, 2.0**-12, CounterStream(7))
        gaps = []
        for f in (16, 4, 1):
            d = base.coarsen(f)
            a = integrate_characteristics(s, d, pts, 0.5, scheme="euler").unwrapped
            b = integrate_characteristics(s, d, pts, 0.5, scheme="heun").unwrapped
            gaps.append(np.abs(a - b).max())
        assert gaps[0] > gaps[1] > gaps[2]

    def test_wong_zakai_converges_monotonically(self, pts):
        s = spec(0.1)
        st = CounterStream(7)
        ref = integrate_characteristics(s, BrownianDriver(s, 2.0**-12, st), pts, 0.5).unwrapped
        wz = wong_zakai(s, 0.5, 12, st, base_level=12)
        gaps = [np.abs(integrate_characteristics(s, wz.at_level(m), pts, 0.5, substeps=8).unwrapped - ref).max()
                for m in (4, 6, 8)]
        assert gaps[0] > gaps[1] > gaps[2]

    def test_wong_zakai_horizon(self, pts):
        s = spec(0.1)
        wz = wong_zakai(s, 0.5, 4, CounterStream(0))
        with pytest.raises(FlowError):
            integrate_characteristics(s, wz, pts, 1.0)

    def test_mismatched_driver(self, pts):
        with pytest.raises(FlowError):
            integrate_characteristics(spec(1.0), BrownianDriver(NoiseSpec.shells(2, {2: 1.0}, K=1.0), 0.1,
                                                                CounterStream(0)), pts, 0.1)

    def test_dt_must_divide(self, pts):
        s = spec(1.0)
        with pytest.raises(FlowError):
            integrate_characteristics(s, BrownianDriver(s, 0.3, CounterStream(0)), pts, 1.0)


class TestTransport:
    def test_constant_is_invariant(self):
        g = TorusGrid(2, 16)
        s = spec(1.0)
        u = transport_scalar(SpectralField.constant(g, 2.0), s, BrownianDriver(s, 1e-2, CounterStream(0)), 0.2)
        np.testing.assert_allclose(u.coeffs, SpectralField.constant(g, 2.0).coeffs, atol=1e-14)

    def test_pullback_identity(self):
        g = TorusGrid(2, 16)
        u0 = SpectralField.from_modes(g, {(1, 2): 0.3, (3, -1): 0.1j})
        np.testing.assert_allclose(pullback(u0, grid_points(g).reshape(-1, 2)).coeffs, u0.coeffs, atol=1e-14)

    def test_pure_translation_mode(self):
        # constant-in-space velocity is not in the noise, but a shift of grid points is exact on the series
        g = TorusGrid(2, 16)
        u0 = SpectralField.from_modes(g, {(1, 0): 0.5})
        pre = grid_points(g).reshape(-1, 2) - np.array([0.25, 0.0])
        u = pullback(u0, pre)
        assert u[(1, 0)] == pytest.approx(0.5 * np.exp(-2j * np.pi * 0.25))
