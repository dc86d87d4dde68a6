import numpy as np
import pytest

from mvlab.spectral import TorusGrid


@pytest.fixture
def grid2():
    return TorusGrid(2, 16)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_real_field(grid, rng, band=None):
    """Coefficients of a random real field, optionally band-limited."""
    from mvlab.spectral import SpectralField, to_spectral

    x = rng.standard_normal(grid.shape)
    f = to_spectral(grid, x)
    if band is not None:
        keep = np.max(np.abs(grid.kvec), axis=0) <= band
        f = SpectralField(grid, np.where(keep, f.coeffs, 0.0))
    return f


def pytest_terminal_summary(terminalreporter):
    from test_acceptance import LINES

    if LINES:
        terminalreporter.section("acceptance criteria")
        for name in sorted(LINES, key=lambda c: int(c[1:])):
            terminalreporter.write_line(LINES[name])
