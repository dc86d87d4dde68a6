"""Fourier representation of real fields on the unit torus T^d.

Coefficients follow the convention û(k) = ∫ u(x) e^{-2πi k·x} dx, stored as a
full complex tensor in numpy FFT ordering. Differential operators and
dealiasing never touch the Nyquist plane (index M/2 on any axis); the plain
transforms keep it so that a physical -> spectral -> physical roundtrip is
exact.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

SYMMETRY_TOL = 1e-10


class SpectralError(ValueError):
    """Raised for invalid fields: non-finite data, broken symmetry, grid mismatch."""


@dataclass(frozen=True)
class TorusGrid:
    """Uniform grid with ``M`` points per axis on the unit torus of dimension ``d``."""

    d: int
    M: int

    def __post_init__(self):
        if self.d < 2:
            raise SpectralError(f"dimension must be >= 2, got {self.d}")
        if self.M < 4 or self.M % 2:
            raise SpectralError(f"M must be even and >= 4, got {self.M}")

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.M,) * self.d

    @property
    def size(self) -> int:
        return self.M**self.d

    @cached_property
    def freqs(self) -> np.ndarray:
        """Integer wavenumbers along one axis, FFT ordering."""
        return np.fft.fftfreq(self.M, 1.0 / self.M).astype(int)

    @cached_property
    def kvec(self) -> np.ndarray:
        """Integer wavevectors, shape (d, M, ..., M)."""
        return np.array(np.meshgrid(*([self.freqs] * self.d), indexing="ij"))

    @cached_property
    def ksq(self) -> np.ndarray:
        return np.sum(self.kvec**2, axis=0)

    @cached_property
    def nyquist(self) -> np.ndarray:
        """Boolean mask of the Nyquist planes."""
        return np.any(np.abs(self.kvec) == self.M // 2, axis=0)

    @cached_property
    def dealias_mask(self) -> np.ndarray:
        """True on modes kept by the 2/3 rule (all |k_i| <= M/3)."""
        return np.all(np.abs(self.kvec) <= self.M // 3, axis=0)

    @cached_property
    def deriv(self) -> np.ndarray:
        """Multipliers 2πi k_j with the Nyquist plane zeroed, shape (d, M, ..., M)."""
        k = np.where(self.nyquist, 0, self.kvec)
        return 2j * np.pi * k

    @cached_property
    def lap(self) -> np.ndarray:
        return np.where(self.nyquist, 0.0, -((2 * np.pi) ** 2) * self.ksq)

    @cached_property
    def points(self) -> np.ndarray:
        """Grid nodes, shape (M^d, d), first axis varying slowest."""
        x = np.arange(self.M) / self.M
        mesh = np.meshgrid(*([x] * self.d), indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)

    def index_of(self, k) -> tuple[int, ...]:
        """Array index of an integer wavevector (raises if outside the stored set)."""
        k = tuple(int(v) for v in k)
        if len(k) != self.d:
            raise SpectralError(f"wavevector {k} has wrong dimension for d={self.d}")
        if any(v <= -self.M // 2 or v > self.M // 2 for v in k):
            raise SpectralError(f"wavevector {k} not representable on M={self.M}")
        return tuple(v % self.M for v in k)

    def neg_index(self) -> tuple[np.ndarray, ...]:
        """Fancy index mapping each stored k to the location of -k."""
        idx = (-np.arange(self.M)) % self.M
        return np.ix_(*([idx] * self.d))


@dataclass(frozen=True, eq=False)
class SpectralField:
    """Real scalar or vector field held as Fourier coefficients.

    ``coeffs`` has shape ``grid.shape`` (scalar) or ``(d,) + grid.shape``
    (vector). Instances are treated as immutable values.
    """

    grid: TorusGrid
    coeffs: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.coeffs, dtype=complex)
        if c.shape not in (self.grid.shape, (self.grid.d,) + self.grid.shape):
            raise SpectralError(f"coefficient shape {c.shape} does not match grid {self.grid}")
        object.__setattr__(self, "coeffs", c)

    @property
    def is_vector(self) -> bool:
        return self.coeffs.ndim == self.grid.d + 1

    @property
    def mean(self):
        """Mean mode û(0) (a vector for vector fields)."""
        return self.coeffs[(...,) + (0,) * self.grid.d]

    def __getitem__(self, k) -> complex:
        return self.coeffs[(...,) + self.grid.index_of(k)]

    def _binary(self, other, op):
        if isinstance(other, SpectralField):
            _same_grid(self, other)
            return SpectralField(self.grid, op(self.coeffs, other.coeffs))
        return NotImplemented

    def __add__(self, other):
        if np.isscalar(other):
            c = self.coeffs.copy()
            c[(...,) + (0,) * self.grid.d] += other
            return SpectralField(self.grid, c)
        return self._binary(other, np.add)

    __radd__ = __add__

    def __sub__(self, other):
        if np.isscalar(other):
            return self + (-other)
        return self._binary(other, np.subtract)

    def __mul__(self, a):
        if np.isscalar(a):
            return SpectralField(self.grid, self.coeffs * a)
        return NotImplemented

    __rmul__ = __mul__

    def __neg__(self):
        return SpectralField(self.grid, -self.coeffs)

    def to_physical(self) -> np.ndarray:
        return to_physical(self)

    def norm(self, s: float = 0.0) -> float:
        return sobolev_norm(self, s)

    @classmethod
    def zeros(cls, grid: TorusGrid, vector: bool = False) -> "SpectralField":
        shape = ((grid.d,) if vector else ()) + grid.shape
        return cls(grid, np.zeros(shape, dtype=complex))

    @classmethod
    def constant(cls, grid: TorusGrid, value: float = 1.0) -> "SpectralField":
        f = cls.zeros(grid)
        f.coeffs[(0,) * grid.d] = value
        return f

    @classmethod
    def from_modes(cls, grid: TorusGrid, modes: dict, mean: float = 0.0) -> "SpectralField":
        """Build a real field from ``{k: coefficient}``; -k is filled by conjugation."""
        f = cls.constant(grid, mean)
        for k, value in modes.items():
            f.coeffs[grid.index_of(k)] = value
            f.coeffs[grid.index_of(tuple(-v for v in k))] = np.conj(value)
        return f

    @classmethod
    def from_function(cls, grid: TorusGrid, func) -> "SpectralField":
        """Sample ``func(x1, ..., xd)`` on the grid nodes and transform."""
        x = np.arange(grid.M) / grid.M
        mesh = np.meshgrid(*([x] * grid.d), indexing="ij")
        return to_spectral(grid, func(*mesh))


def _same_grid(a: SpectralField, b: SpectralField):
    if a.grid != b.grid:
        raise SpectralError(f"grid mismatch: {a.grid} vs {b.grid}")


def _check_finite(u: SpectralField):
    if not np.all(np.isfinite(u.coeffs)):
        raise SpectralError("field has non-finite coefficients")


def symmetry_defect(coeffs: np.ndarray, grid: TorusGrid) -> float:
    """max |û(k) - conj(û(-k))|, zero for real fields."""
    flipped = coeffs[(...,) + grid.neg_index()]
    return float(np.max(np.abs(coeffs - np.conj(flipped)), initial=0.0))


def to_spectral(grid: TorusGrid, samples: np.ndarray) -> SpectralField:
    """Forward transform of real samples (last d axes are the grid)."""
    samples = np.asarray(samples)
    if np.iscomplexobj(samples):
        scale = max(np.max(np.abs(samples)), 1.0)
        if np.max(np.abs(samples.imag)) > SYMMETRY_TOL * scale:
            raise SpectralError("physical samples must be real")
        samples = samples.real
    if not np.all(np.isfinite(samples)):
        raise SpectralError("physical samples contain non-finite values")
    axes = tuple(range(-grid.d, 0))
    return SpectralField(grid, np.fft.fftn(samples, axes=axes) / grid.size)


def to_physical(u: SpectralField) -> np.ndarray:
    """Inverse transform; refuses coefficients that do not describe a real field."""
    _check_finite(u)
    scale = max(float(np.max(np.abs(u.coeffs), initial=0.0)), 1e-300)
    if symmetry_defect(u.coeffs, u.grid) > SYMMETRY_TOL * scale:
        raise SpectralError("coefficients violate conjugate symmetry")
    axes = tuple(range(-u.grid.d, 0))
    return np.fft.ifftn(u.coeffs * u.grid.size, axes=axes).real


def sobolev_norm(u: SpectralField, s: float) -> float:
    """Homogeneous norm (Σ_{k≠0} |2πk|^{2s} |û(k)|²)^{1/2}; the mean mode is ignored."""
    _check_finite(u)
    if not np.isfinite(s):
        raise SpectralError("Sobolev index must be finite")
    g = u.grid
    weight = np.zeros(g.shape)
    nz = g.ksq > 0
    weight[nz] = ((2 * np.pi) ** 2 * g.ksq[nz]) ** s
    return float(np.sqrt(np.sum(weight * np.abs(u.coeffs) ** 2)))


def convolve(W: SpectralField, rho: SpectralField) -> SpectralField:
    """Periodic convolution W∗ρ (coefficientwise product)."""
    _same_grid(W, rho)
    if W.is_vector:
        raise SpectralError("convolution kernel must be scalar")
    return SpectralField(rho.grid, W.coeffs * rho.coeffs)


def grad(u: SpectralField) -> SpectralField:
    if u.is_vector:
        raise SpectralError("grad expects a scalar field")
    return SpectralField(u.grid, u.grid.deriv * u.coeffs)


def div(u: SpectralField) -> SpectralField:
    if not u.is_vector:
        raise SpectralError("div expects a vector field")
    return SpectralField(u.grid, np.sum(u.grid.deriv * u.coeffs, axis=0))


def laplacian(u: SpectralField) -> SpectralField:
    return SpectralField(u.grid, u.grid.lap * u.coeffs)


def dealias(u: SpectralField) -> SpectralField:
    """2/3 rule: zero every mode with some |k_i| > M/3."""
    return SpectralField(u.grid, np.where(u.grid.dealias_mask, u.coeffs, 0.0))


def evaluate(u: SpectralField, points: np.ndarray) -> np.ndarray:
    """Evaluate the trigonometric series of ``u`` at arbitrary torus points.

    Direct summation over the nonzero band of coefficients, contracted one axis
    at a time. ``points`` has shape (N, d); returns (N,) for scalars and (N, d)
    for vector fields.
    """
    coeffs = np.asarray(u.coeffs)
    if u.is_vector:
        return np.stack([evaluate(SpectralField(u.grid, c), points) for c in coeffs], axis=-1)
    return eval_series(coeffs, u.grid, points)


def band_limit(coeffs: np.ndarray, grid: TorusGrid) -> int:
    """Largest |k_i| carrying a nonzero coefficient."""
    nz = np.abs(coeffs) > 0
    if not nz.any():
        return 0
    return int(np.max(np.abs(grid.kvec[:, nz])))


def eval_series(coeffs: np.ndarray, grid: TorusGrid, points: np.ndarray, band: int | None = None) -> np.ndarray:
    points = np.atleast_2d(points)
    band = band_limit(coeffs, grid) if band is None else band
    ks = np.arange(-band, band + 1)
    sub = coeffs[np.ix_(*([ks % grid.M] * grid.d))]
    # exp(2πi k x_j) per axis, shape (N, 2b+1)
    phase = [np.exp(2j * np.pi * np.outer(points[:, j], ks)) for j in range(grid.d)]
    n = len(points)
    m = len(ks)
    acc = (phase[-1] @ sub.reshape(-1, m).T).reshape((n,) + (m,) * (grid.d - 1))
    for j in range(grid.d - 2, -1, -1):
        acc = np.einsum("n...k,nk->n...", acc, phase[j])
    return acc.real
