"""Weakly interacting particles with common transport noise.

Each particle moves by

    dX^i = -(1/N) Σ_{j≠i} ∇W(X^i - X^j) dt + √(2ν) dB̃^i - ΔV(X^i),

with ΔV the common noise velocity increment applied in the same way as the
stochastic characteristics, so that the empirical measure and the SPDE solution
driven by the same common stream are coupled pathwise. The interaction force is
evaluated as a mode sum over the (few) nonzero coefficients of W.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .flow import BrownianDriver, ModeField, _step
from .rng import CounterStream
from .solver import ModelParams, NoiseStreams, Trajectory
from .spectral import SpectralError, SpectralField, band_limit

COMMON_SCHEMES = ("shear", "heun", "euler")


class StreamMismatch(ValueError):
    """Raised when a comparison is requested between runs driven by different common noise."""


@dataclass
class ParticleEnsemble:
    positions: np.ndarray
    idiosyncratic: CounterStream
    common: CounterStream

    def __post_init__(self):
        x = np.atleast_2d(np.asarray(self.positions, dtype=float))
        if x.shape[0] < 1:
            raise ValueError("need at least one particle")
        if not np.all(np.isfinite(x)):
            raise ValueError("non-finite particle positions")
        self.positions = np.mod(x, 1.0)

    @property
    def N(self) -> int:
        return self.positions.shape[0]

    @property
    def d(self) -> int:
        return self.positions.shape[1]

    @classmethod
    def from_density(cls, rho0: SpectralField, N: int, seed: int, common: CounterStream | None = None,
                     member: int = 0) -> "ParticleEnsemble":
        """Draw N particles from ``rho0`` and attach idiosyncratic/common streams for ``seed``."""
        init = CounterStream(seed, member, "particles-init")
        x = sample_density(rho0, N, init)
        idio = CounterStream(seed, member, "idiosyncratic")
        common = CounterStream(seed, 0, "noise") if common is None else common
        return cls(x, idio, common)


@dataclass
class ModeTable:
    """μ̂(k) on a fixed list of wavevectors, values shape (..., len(ks))."""

    ks: np.ndarray
    values: np.ndarray

    def __getitem__(self, k) -> complex:
        k = np.asarray(k)
        hit = np.where(np.all(self.ks == k, axis=1))[0]
        if len(hit) == 0:
            raise KeyError(f"mode {tuple(k)} not tabulated")
        return self.values[..., hit[0]]


def mode_list(d: int, kmax: float, include_zero: bool = True) -> np.ndarray:
    r = int(np.floor(kmax))
    g = np.array(np.meshgrid(*([np.arange(-r, r + 1)] * d), indexing="ij")).reshape(d, -1).T
    sq = np.sum(g**2, axis=1)
    keep = sq <= kmax * kmax + 1e-12
    if not include_zero:
        keep &= sq > 0
    g = g[keep]
    return g[np.lexsort(g.T[::-1])]


def empirical_modes(positions: np.ndarray, kmax: float) -> ModeTable:
    """μ̂^N(k) = (1/N) Σ_i e^{-2πi k·X^i} for |k| <= kmax."""
    x = np.atleast_2d(positions)
    ks = mode_list(x.shape[1], kmax)
    vals = np.exp(-2j * np.pi * (x @ ks.T)).mean(axis=0)
    vals[np.all(ks == 0, axis=1)] = 1.0
    return ModeTable(ks, vals)


def _cdf_coeffs(x_prev: np.ndarray, coeffs: np.ndarray, ks: np.ndarray, j: int):
    """Fourier coefficients in x_j of the marginal density given x_1..x_{j-1}."""
    sel = np.all(ks[:, j + 1:] == 0, axis=1)
    ksel = ks[sel]
    csel = coeffs[sel]
    m = np.unique(ksel[:, j])
    phase = np.exp(2j * np.pi * (x_prev @ ksel[:, :j].T)) if j > 0 else np.ones((len(x_prev), len(ksel)))
    out = np.zeros((len(x_prev), len(m)), dtype=complex)
    for col, mm in enumerate(m):
        pick = ksel[:, j] == mm
        out[:, col] = phase[:, pick] @ csel[pick]
    return m, out


def sample_density(rho: SpectralField, N: int, stream: CounterStream, tol: float = 1e-12) -> np.ndarray:
    """Exact inverse-CDF sampling coordinate by coordinate from a positive trigonometric density."""
    g = rho.grid
    if rho.to_physical().min() <= 0:
        raise ValueError("sampling density must be positive")
    if abs(rho.mean - 1.0) > 1e-10:
        raise ValueError("sampling density must have mean one")
    b = band_limit(rho.coeffs, g)
    r = np.arange(-b, b + 1)
    ks = np.array(np.meshgrid(*([r] * g.d), indexing="ij")).reshape(g.d, -1).T
    coeffs = np.array([rho[k] for k in ks])
    nz = np.abs(coeffs) > 0
    ks, coeffs = ks[nz], coeffs[nz]
    u = stream.uniforms(0, N * g.d).reshape(N, g.d)
    x = np.zeros((N, g.d))
    for j in range(g.d):
        m, c = _cdf_coeffs(x[:, :j], coeffs, ks, j)
        c0 = c[:, m == 0][:, 0].real
        mz = m != 0
        cm = c[:, mz]
        mm = m[mz]

        def cdf(t):
            val = c0 * t
            if len(mm):
                val = val + ((np.exp(2j * np.pi * np.outer(t, mm)) - 1) / (2j * np.pi * mm) * cm).sum(axis=1).real
            return val / c0

        lo = np.zeros(N)
        hi = np.ones(N)
        target = u[:, j]
        for _ in range(60):
            mid = 0.5 * (lo + hi)
            below = cdf(mid) < target
            lo = np.where(below, mid, lo)
            hi = np.where(below, hi, mid)
            if np.max(hi - lo) < tol:
                break
        x[:, j] = 0.5 * (lo + hi)
    return x


class _Force:
    """-∇(W∗μ^N)(x) by mode sums over the nonzero coefficients of W."""

    def __init__(self, W: SpectralField):
        g = W.grid
        vals = W.coeffs.real
        nz = np.argwhere((np.abs(vals) > 0) & (g.ksq > 0))
        self.ks = g.kvec[(slice(None),) + tuple(nz.T)].T.astype(float)
        self.w = vals[tuple(nz.T)]
        if len(self.w) > 512:
            raise SpectralError("mode-sum force expects a potential with few modes")
        self.grad_at_zero = np.sum(2j * np.pi * self.ks * self.w[:, None], axis=0).real

    def __call__(self, x: np.ndarray) -> np.ndarray:
        if len(self.w) == 0:
            return np.zeros_like(x)
        e = np.exp(2j * np.pi * (x @ self.ks.T))  # (N, S)
        mu = np.conj(e).mean(axis=0)
        coef = (2j * np.pi) * self.w * mu  # (S,)
        F = -(e * coef) @ self.ks
        # drop the j = i term: -(1/N)∇W(0) was included in the mode sum
        return F.real + self.grad_at_zero / len(x)


@dataclass
class ParticleTrajectory:
    times: np.ndarray
    modes: ModeTable
    positions: np.ndarray
    common_key: np.ndarray = field(repr=False)
    N: int = 0


def simulate_particles(ens: ParticleEnsemble, params: ModelParams, T: float, dt: float, kmax: float = 2,
                       record_every: int = 1, common_scheme: str = "shear") -> ParticleTrajectory:
    """Euler steps for drift and idiosyncratic noise, then the common transport map of the step."""
    if common_scheme not in COMMON_SCHEMES:
        raise ValueError(f"unknown common scheme {common_scheme!r}")
    if ens.d != params.noise.d:
        raise ValueError("particle and noise dimensions differ")
    n = int(round(T / dt))
    if abs(n * dt - T) > 1e-9 * max(1.0, T):
        raise ValueError(f"dt={dt} does not divide T={T}")
    x = ens.positions.copy()
    N, d = x.shape
    force = _Force(params.W)
    spec = params.noise
    noisy = spec.K > 0 and spec.nontrivial
    if noisy:
        field_ = ModeField(spec)
        driver = BrownianDriver(spec, dt, ens.common)
    sig = np.sqrt(2.0 * params.nu * dt)
    times = [0.0]
    tables = [empirical_modes(x, kmax).values]
    block = 64
    for i in range(n):
        if i % block == 0:
            incs = field_.amplitudes(driver.block(i, block)) if noisy else None
        x = x + dt * force(x)
        if sig > 0:
            x = x + sig * ens.idiosyncratic.normals(i, N * d).reshape(N, d)
        if noisy:
            x, _ = _step(field_, x, incs[i % block], common_scheme, -1.0, None)
        x = np.mod(x, 1.0)
        if not np.all(np.isfinite(x)):
            raise ValueError(f"non-finite particle positions at step {i + 1}")
        if (i + 1) % record_every == 0 or i + 1 == n:
            times.append((i + 1) * dt)
            tables.append(empirical_modes(x, kmax).values)
    ks = mode_list(d, kmax)
    return ParticleTrajectory(np.array(times), ModeTable(ks, np.array(tables)), x, ens.common.key.copy(), N)


@dataclass
class ComparisonReport:
    max_error: float
    per_mode: dict
    per_time: np.ndarray
    times: np.ndarray


def compare_to_spde(run: ParticleTrajectory, spde: Trajectory, streams: NoiseStreams, kmax: float = 2,
                    member: int = 0) -> ComparisonReport:
    """max over shared sample times and 0 < |k| <= kmax of |μ̂^N(t,k) - ρ̂(t,k)|.

    ``streams`` are the noise streams the SPDE run used; the particle run's
    common stream must be the same source or the comparison is refused.
    """
    key = streams.stream(member).key
    if not np.array_equal(key, run.common_key) or streams.factor != 1:
        raise StreamMismatch("particle common noise and SPDE noise come from different streams")
    if spde.fields is None:
        raise ValueError("SPDE trajectory must keep fields")
    ks = mode_list(spde.grid.d, kmax, include_zero=False)
    errs = []
    used = []
    for ti, t in enumerate(run.times):
        j = np.where(np.abs(spde.times - t) < 1e-9)[0]
        if len(j) == 0:
            continue
        f = spde.fields[j[0], member]
        rho = np.array([f[spde.grid.index_of(k)] for k in ks])
        mu = np.array([run.modes[k][ti] for k in ks])
        errs.append(np.abs(mu - rho))
        used.append(t)
    if not errs:
        raise ValueError("no common sample times between the runs")
    errs = np.array(errs)
    per_mode = {tuple(int(v) for v in k): float(errs[:, i].max()) for i, k in enumerate(ks)}
    return ComparisonReport(float(errs.max()), per_mode, errs.max(axis=1), np.array(used))
