"""Divergence-free, white-in-time Gaussian velocity noise on the torus.

The velocity increment over a step is

    ΔV(x) = √2 K Σ_k Σ_j θ_k a_k^(j) e_k(x) ΔB^(j)(k),

summed over the active wavevectors 0 < |k| <= n. Independent complex
Gaussians live on the primary half-lattice (first nonzero coordinate
positive) and are mirrored to -k by conjugation, so ΔV is real. Each complex
increment has E|ΔB|² = Δt, split evenly between real and imaginary parts.
With this convention the one-point covariance is E[ΔV ΔVᵀ] = 2K²Δt·Q with
Q = Σ_k θ_k² P_k summed over all active k (both signs).
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .rng import CounterStream
from .spectral import SpectralError, SpectralField, TorusGrid


@dataclass(frozen=True)
class NoiseSpec:
    """Radial coloring θ, truncation radius ``n`` and intensity ``K``.

    ``coloring`` maps |k|² to θ. Shells not listed carry θ = 0. ``alpha`` is
    the regularity the coloring is meant to have; it is recorded only.
    """

    d: int
    coloring: tuple[tuple[int, float], ...]
    n: int
    K: float
    alpha: float | None = None

    def __post_init__(self):
        if self.d < 2:
            raise ValueError("noise requires d >= 2")
        if self.K < 0:
            raise ValueError("noise intensity must be nonnegative")
        if self.n < 0:
            raise ValueError("truncation radius must be nonnegative")
        object.__setattr__(self, "coloring", tuple(sorted((int(a), float(b)) for a, b in self.coloring)))

    @classmethod
    def shells(cls, d: int, values: dict, K: float, n: int | None = None, alpha=None) -> "NoiseSpec":
        """θ given per shell, ``values = {|k|²: θ}``; ``n`` defaults to the outermost shell."""
        if n is None:
            n = int(np.ceil(np.sqrt(max(values)))) if values else 0
        return cls(d, tuple(values.items()), n, K, alpha)

    @classmethod
    def power_law(cls, d: int, c: float, beta: float, n: int, K: float, alpha=None) -> "NoiseSpec":
        """θ_k = c |k|^{-β} on every shell with |k| <= n."""
        sq = sorted({sum(v * v for v in k) for k in _lattice(d, n)})
        return cls(d, tuple((s, c * s ** (-beta / 2)) for s in sq), n, K, alpha)

    def with_K(self, K: float) -> "NoiseSpec":
        return NoiseSpec(self.d, self.coloring, self.n, K, self.alpha)

    def theta(self, ksq: int) -> float:
        return dict(self.coloring).get(int(ksq), 0.0)

    @cached_property
    def active(self) -> np.ndarray:
        """All active wavevectors, shape (A, d)."""
        table = dict(self.coloring)
        ks = [k for k in _lattice(self.d, self.n) if table.get(sum(v * v for v in k), 0.0) != 0.0]
        return np.array(ks, dtype=int).reshape(-1, self.d)

    @cached_property
    def primaries(self) -> np.ndarray:
        """Active wavevectors on the canonical half-lattice, shape (P, d)."""
        ks = [k for k in map(tuple, self.active) if _is_primary(k)]
        ks.sort(key=lambda k: (sum(v * v for v in k), [-v for v in k]))
        return np.array(ks, dtype=int).reshape(-1, self.d)

    @cached_property
    def thetas(self) -> np.ndarray:
        """θ on the primaries."""
        return np.array([self.theta(int(k @ k)) for k in self.primaries])

    @property
    def n_real(self) -> int:
        """Number of real Gaussians per step (two per complex increment)."""
        return 2 * len(self.primaries) * (self.d - 1)

    @property
    def nontrivial(self) -> bool:
        return len(self.primaries) > 0


def _lattice(d: int, n: int):
    r = range(-n, n + 1)
    for k in itertools.product(r, repeat=d):
        s = sum(v * v for v in k)
        if 0 < s <= n * n:
            yield k


def _is_primary(k) -> bool:
    for v in k:
        if v != 0:
            return v > 0
    return False


@dataclass(frozen=True, eq=False)
class ModeBasis:
    """Orthonormal bases of k^⊥ for each primary mode; -k reuses the same vectors."""

    primaries: np.ndarray
    vectors: np.ndarray  # (P, d-1, d)

    def for_mode(self, k) -> np.ndarray:
        k = np.asarray(k, dtype=int)
        key = k if _is_primary(tuple(k)) else -k
        hits = np.where(np.all(self.primaries == key, axis=1))[0]
        if len(hits) == 0:
            raise KeyError(f"mode {tuple(k)} is not active")
        return self.vectors[hits[0]]


def _perp_basis(k: np.ndarray) -> np.ndarray:
    d = len(k)
    kf = k.astype(float)
    if d == 2:
        return (np.array([-kf[1], kf[0]]) / np.linalg.norm(kf))[None, :]
    basis = [kf / np.linalg.norm(kf)]
    # seed with the axis least aligned with k, then the remaining axes in order
    first = int(np.argmin(np.abs(kf)))
    order = [first] + [i for i in range(d) if i != first]
    out = []
    for i in order:
        v = np.zeros(d)
        v[i] = 1.0
        for b in basis:
            v = v - (v @ b) * b
        nv = np.linalg.norm(v)
        if nv > 1e-10:
            v = v / nv
            basis.append(v)
            out.append(v)
        if len(out) == d - 1:
            break
    return np.array(out)


def make_basis(spec: NoiseSpec) -> ModeBasis:
    P = len(spec.primaries)
    vecs = np.zeros((P, spec.d - 1, spec.d))
    for p, k in enumerate(spec.primaries):
        vecs[p] = _perp_basis(k)
    return ModeBasis(spec.primaries, vecs)


@dataclass(frozen=True, eq=False)
class NoiseIncrement:
    """Complex increments ΔB^(j)(k) on the primaries, shape (..., P, d-1)."""

    spec: NoiseSpec
    dt: float
    values: np.ndarray

    def at(self, k, j: int = 0) -> complex:
        """Increment for any active k (conjugated for non-primary k)."""
        k = np.asarray(k, dtype=int)
        prim = _is_primary(tuple(k))
        key = k if prim else -k
        p = np.where(np.all(self.spec.primaries == key, axis=1))[0]
        if len(p) == 0:
            raise KeyError(f"mode {tuple(k)} is not active")
        v = self.values[..., p[0], j]
        return v if prim else np.conj(v)


def gaussians_to_increments(spec: NoiseSpec, z: np.ndarray, dt: float) -> np.ndarray:
    """Map real standard normals (..., n_real) to complex increments (..., P, d-1)."""
    P = len(spec.primaries)
    z = np.asarray(z).reshape(z.shape[:-1] + (P, spec.d - 1, 2))
    return (z[..., 0] + 1j * z[..., 1]) * np.sqrt(dt / 2.0)


def sample_increment(spec: NoiseSpec, dt: float, stream: CounterStream, step: int = 0) -> NoiseIncrement:
    """Increment for one step; identical (stream, step) pairs give identical draws."""
    if dt < 0:
        raise ValueError("dt must be nonnegative")
    if not spec.nontrivial:
        return NoiseIncrement(spec, dt, np.zeros((0, spec.d - 1), dtype=complex))
    z = stream.normals(step, spec.n_real)
    return NoiseIncrement(spec, dt, gaussians_to_increments(spec, z, dt))


def mode_amplitudes(spec: NoiseSpec, basis: ModeBasis, values: np.ndarray) -> np.ndarray:
    """Vector amplitudes c_p = √2 K θ_p Σ_j a_p^(j) ΔB_p^(j), shape (..., P, d)."""
    c = np.einsum("...pj,pjd->...pd", values, basis.vectors)
    return np.sqrt(2.0) * spec.K * spec.thetas[:, None] * c


def check_grid(spec: NoiseSpec, grid: TorusGrid):
    if spec.d != grid.d:
        raise SpectralError(f"noise dimension {spec.d} does not match grid dimension {grid.d}")
    if len(spec.primaries) and np.max(np.abs(spec.primaries)) >= grid.M // 2:
        raise SpectralError(f"grid M={grid.M} too small for truncation radius n={spec.n}")


def velocity_field(spec: NoiseSpec, basis: ModeBasis, incr: NoiseIncrement, grid: TorusGrid) -> SpectralField:
    """Real divergence-free vector field ΔV for one increment (unbatched)."""
    check_grid(spec, grid)
    coeffs = np.zeros((grid.d,) + grid.shape, dtype=complex)
    if spec.nontrivial:
        amps = mode_amplitudes(spec, basis, incr.values)
        for k, c in zip(spec.primaries, amps):
            coeffs[(slice(None),) + grid.index_of(k)] = c
            coeffs[(slice(None),) + grid.index_of(-k)] = np.conj(c)
    return SpectralField(grid, coeffs)


def covariance_matrix(spec: NoiseSpec) -> np.ndarray:
    """Q = Σ_{active k} θ_k² (I - k⊗k/|k|²)."""
    Q = np.zeros((spec.d, spec.d))
    I = np.eye(spec.d)
    for k in spec.active:
        th = spec.theta(int(k @ k))
        Q += th**2 * (I - np.outer(k, k) / (k @ k))
    return Q


def ito_coefficient(spec: NoiseSpec) -> float:
    """Scalar q with covariance_matrix = q·I (isotropic part, trace/d)."""
    return float(np.trace(covariance_matrix(spec)) / spec.d)


def h_norm(spec: NoiseSpec, alpha: float, squared: bool = False) -> float:
    """‖θ‖_{h^α} over the active modes (Σ |k|^{2α} θ_k²)^{1/2}."""
    total = 0.0
    for k in spec.active:
        s = int(k @ k)
        total += float(s) ** alpha * spec.theta(s) ** 2
    return total if squared else float(np.sqrt(total))


@dataclass(frozen=True, eq=False)
class WongZakaiPath:
    """Dyadic piecewise-linear interpolation of a Brownian path.

    The Brownian path is sampled at the fine resolution 2^-base_level from
    ``stream`` (step index = fine step) and is shared by every level m <= base_level.
    """

    spec: NoiseSpec
    T: float
    m: int
    base_level: int
    fine: np.ndarray = field(repr=False)  # B at fine nodes, (S+1, P, d-1)

    @property
    def h(self) -> float:
        return 2.0**-self.m

    @property
    def breakpoints(self) -> np.ndarray:
        n = int(np.ceil(self.T / self.h - 1e-12))
        return np.arange(n + 1) * self.h

    def values_at_breakpoints(self) -> np.ndarray:
        stride = 2 ** (self.base_level - self.m)
        n = len(self.breakpoints)
        return self.fine[: (n - 1) * stride + 1 : stride]

    def __call__(self, t: float) -> np.ndarray:
        if t < 0 or t > self.T + 1e-12:
            raise ValueError(f"t={t} outside [0, {self.T}]")
        B = self.values_at_breakpoints()
        s = t / self.h
        i = min(int(np.floor(s)), len(B) - 2)
        w = s - i
        return (1 - w) * B[i] + w * B[i + 1]

    def derivative(self, t: float) -> np.ndarray:
        B = self.values_at_breakpoints()
        i = min(int(np.floor(t / self.h)), len(B) - 2)
        return (B[i + 1] - B[i]) / self.h

    def segments(self):
        """Yield (t0, h, ΔB) over consecutive segments covering [0, T]."""
        B = self.values_at_breakpoints()
        for i in range(len(B) - 1):
            yield i * self.h, self.h, B[i + 1] - B[i]

    def at_level(self, m: int) -> "WongZakaiPath":
        if m > self.base_level:
            raise ValueError("cannot refine beyond the base level")
        return WongZakaiPath(self.spec, self.T, m, self.base_level, self.fine)

    def fine_increments(self) -> np.ndarray:
        return np.diff(self.fine, axis=0)


def brownian_path(spec: NoiseSpec, T: float, level: int, stream: CounterStream) -> np.ndarray:
    """Cumulative complex Brownian values at the nodes j·2^-level, j = 0..ceil(T 2^level)."""
    dt = 2.0**-level
    S = int(np.ceil(T / dt - 1e-12))
    P = len(spec.primaries)
    B = np.zeros((S + 1, P, spec.d - 1), dtype=complex)
    if P:
        z = stream.normal_block(0, S, spec.n_real)
        B[1:] = np.cumsum(gaussians_to_increments(spec, z, dt), axis=0)
    return B


def wong_zakai(spec: NoiseSpec, T: float, m: int, stream: CounterStream, base_level: int | None = None) -> WongZakaiPath:
    if T <= 0 or m < 0:
        raise ValueError("need T > 0 and m >= 0")
    base_level = max(m, 10) if base_level is None else base_level
    if base_level < m:
        raise ValueError("base_level must be >= m")
    return WongZakaiPath(spec, T, m, base_level, brownian_path(spec, T, base_level, stream))
