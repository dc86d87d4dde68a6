"""Deterministic mean-field analysis: potentials, free energy, steady states and thresholds."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Literal

import numpy as np

from .noise import NoiseSpec, h_norm
from .spectral import SpectralError, SpectralField, TorusGrid, to_spectral

ZERO_TOL = 1e-12
NU_GRID = 200


# ---------------------------------------------------------------------------
# potentials


@dataclass(frozen=True)
class PotentialSpec:
    """Interaction potential given by name or by an explicit Fourier table.

    ``single_mode``: W = -N Π cos(2πk_i x_i); ``two_mode``: the same product
    for ``k`` and for ``ell`` with k = 2·ell and a shared constant. Named forms
    are normalized to ‖W‖_{L²} = 1. ``explicit`` takes ``table`` as pairs
    (k, Ŵ(k)); -k is filled by symmetry.
    """

    form: Literal["single_mode", "two_mode", "explicit"]
    k: tuple[int, ...] | None = None
    ell: tuple[int, ...] | None = None
    table: tuple = ()

    @property
    def d(self) -> int:
        if self.form == "single_mode":
            return len(self.k)
        if self.form == "two_mode":
            return len(self.ell)
        return len(self.table[0][0])

    @property
    def modes(self) -> list[tuple[int, ...]]:
        if self.form == "single_mode":
            return [tuple(self.k)]
        if self.form == "two_mode":
            return [tuple(self.ell), tuple(2 * v for v in self.ell)]
        return []

    @property
    def normalization(self) -> float:
        """Shared constant N of the named forms, fixed by ‖W‖_{L²} = 1."""
        d = self.d
        # each product of cosines has L² norm 2^{-d/2}
        return 2.0 ** (d / 2.0) / np.sqrt(len(self.modes))


def _check_named(spec: PotentialSpec):
    if spec.form == "single_mode":
        if spec.k is None:
            raise SpectralError("single_mode potential needs k")
    elif spec.form == "two_mode":
        if spec.ell is None:
            raise SpectralError("two_mode potential needs ell (k = 2·ell)")
        if spec.k is not None and tuple(spec.k) != tuple(2 * v for v in spec.ell):
            raise SpectralError("two_mode potential requires k = 2·ell")
    elif spec.form == "explicit":
        if not spec.table:
            raise SpectralError("explicit potential needs a nonempty table")
        return
    else:
        raise SpectralError(f"unknown potential form {spec.form!r}")
    for m in spec.modes:
        if len(m) < 2 or any(v == 0 for v in m):
            raise SpectralError(f"wavevector {m} must have d >= 2 nonzero components for the product form")


def fourier_potential(spec: PotentialSpec, grid: TorusGrid) -> SpectralField:
    """Exact Fourier coefficients of the potential on ``grid``."""
    _check_named(spec)
    if spec.d != grid.d:
        raise SpectralError(f"potential dimension {spec.d} does not match grid dimension {grid.d}")
    W = SpectralField.zeros(grid)
    if spec.form == "explicit":
        for k, value in spec.table:
            value = float(np.real(value))
            W.coeffs[grid.index_of(k)] = value
            W.coeffs[grid.index_of(tuple(-v for v in k))] = value
        return W
    N = spec.normalization
    for m in spec.modes:
        for signs in itertools.product((1, -1), repeat=grid.d):
            W.coeffs[grid.index_of(tuple(s * v for s, v in zip(signs, m)))] += -N * 2.0**-grid.d
    return W


# ---------------------------------------------------------------------------
# linear analysis


@dataclass(frozen=True)
class Criterion:
    has_negative_mode: bool
    witnesses: list


def phase_transition_criterion(W: SpectralField, tol: float = ZERO_TOL) -> Criterion:
    """Whether some retained Ŵ(k), k ≠ 0, is below -tol, and which ones."""
    g = W.grid
    vals = W.coeffs.real
    hits = np.argwhere((vals < -tol) & (g.ksq > 0))
    wit = sorted(tuple(int(v) for v in g.kvec[(slice(None),) + tuple(h)]) for h in hits)
    return Criterion(bool(wit), wit)


def spectrum_L(W: SpectralField, nu: float, kmax: float) -> list[tuple[tuple[int, ...], float]]:
    """λ_k = -|2πk|²(ν + Ŵ(k)) for 0 < |k| <= kmax, sorted by |k| then k."""
    if not nu > 0:
        raise ValueError("ν must be positive")
    g = W.grid
    r = int(np.floor(kmax))
    out = []
    for k in itertools.product(range(-r, r + 1), repeat=g.d):
        s = sum(v * v for v in k)
        if s == 0 or s > kmax * kmax:
            continue
        try:
            w = float(W[k].real)
        except SpectralError:
            w = 0.0
        out.append((k, -(2 * np.pi) ** 2 * s * (nu + w)))
    out.sort(key=lambda kv: (sum(v * v for v in kv[0]), kv[0]))
    return out


def linear_stability_threshold(W: SpectralField) -> float:
    """ν below which the uniform state is linearly unstable: -min_k Ŵ(k) (0 if none negative)."""
    vals = W.coeffs.real[W.grid.ksq > 0]
    return float(max(0.0, -vals.min())) if vals.size else 0.0


def dimension_constant(d: int) -> float:
    if d < 2:
        raise ValueError("d must be >= 2")
    base = {2: 1.0 / 32.0, 3: 3.0 / 160.0}.get(d, (d - 3) / (10.0 * d * (d - 1)))
    return (d - 1) / d * base


def unstable_modes(W: SpectralField, eta: float) -> tuple[list, float]:
    """Λ = {k ≠ 0 : η + Ŵ(k) < 0} and C_W = max_Λ |η + Ŵ(k)||k|² (0 when Λ is empty)."""
    g = W.grid
    vals = W.coeffs.real
    sel = (eta + vals < 0) & (g.ksq > 0)
    if not sel.any():
        return [], 0.0
    modes = sorted(tuple(int(v) for v in g.kvec[(slice(None),) + tuple(h)]) for h in np.argwhere(sel))
    cw = float(np.max(np.abs(eta + vals[sel]) * g.ksq[sel]))
    return modes, cw


@dataclass
class StabilityReport:
    nu: float
    nu_prime: float
    unstable: list
    C_W: float
    C_d: float
    theta_hm1_sq: float
    spectrum: list
    K_crit: float
    nu_grid: np.ndarray = field(repr=False)
    K_sq_grid: np.ndarray = field(repr=False)
    nu_crit_candidates: dict = field(default_factory=dict)

    @property
    def max_eigenvalue(self) -> float:
        return max((lam for _, lam in self.spectrum), default=-np.inf)

    def as_dict(self) -> dict:
        return {
            "nu": self.nu,
            "nu_prime": self.nu_prime,
            "unstable_modes": [list(k) for k in self.unstable],
            "C_W": self.C_W,
            "C_d": self.C_d,
            "theta_hm1_sq": self.theta_hm1_sq,
            "K_crit": self.K_crit,
            "max_eigenvalue": self.max_eigenvalue,
            "nu_crit_candidates": self.nu_crit_candidates,
        }


def _nu_grid(nu: float, n: int = NU_GRID) -> np.ndarray:
    return nu * (np.arange(n) + 0.5) / n


def _refine(nu: float, grid: np.ndarray, values: np.ndarray, best: int) -> np.ndarray:
    lo = grid[max(best - 1, 0)]
    hi = grid[min(best + 1, len(grid) - 1)]
    hi = min(hi, nu * (1 - 1e-9))
    return np.linspace(lo, hi, NU_GRID)


def k_squared_threshold(W: SpectralField, nu: float, nu_prime: float, theta_hm1_sq: float, C_d: float) -> float:
    _, cw = unstable_modes(W, nu_prime)
    num = cw - (nu - nu_prime)
    if num <= 0:
        return 0.0
    if theta_hm1_sq == 0:
        return np.inf
    return num / (theta_hm1_sq * C_d)


def stability_report(W: SpectralField, nu: float, noise: NoiseSpec, kmax: float | None = None) -> StabilityReport:
    """Unstable modes, growth constants and the sufficient noise intensity K_crit.

    K²(ν′) = max(0, (C_W^{(ν′)} - (ν-ν′)) / (‖θ‖²_{h⁻¹} C_d)) is minimized over
    a grid of ν′ in (0, ν), refined once around the minimizer. ‖θ‖ is the
    norm of the truncated coloring actually simulated.
    """
    if not nu > 0:
        raise ValueError("ν must be positive")
    d = W.grid.d
    Cd = dimension_constant(d)
    th = h_norm(noise, -1.0, squared=True)
    grid = _nu_grid(nu)
    ksq = np.array([k_squared_threshold(W, nu, e, th, Cd) for e in grid])
    best = int(np.argmin(ksq))
    fine = _refine(nu, grid, ksq, best)
    fine_ksq = np.array([k_squared_threshold(W, nu, e, th, Cd) for e in fine])
    allg = np.concatenate([grid, fine])
    allk = np.concatenate([ksq, fine_ksq])
    order = np.argsort(allg)
    allg, allk = allg[order], allk[order]
    i = int(np.argmin(allk))
    modes, cw = unstable_modes(W, allg[i])
    kmax = kmax if kmax is not None else max(2.0, float(np.sqrt(W.grid.ksq[np.abs(W.coeffs) > 0].max(initial=1))))
    return StabilityReport(
        nu=nu,
        nu_prime=float(allg[i]),
        unstable=modes,
        C_W=cw,
        C_d=Cd,
        theta_hm1_sq=th,
        spectrum=spectrum_L(W, nu, kmax),
        K_crit=float(np.sqrt(allk[i])),
        nu_grid=allg,
        K_sq_grid=allk,
        nu_crit_candidates={"linear_instability": linear_stability_threshold(W)},
    )


def lyapunov_bound(W: SpectralField, nu: float, noise: NoiseSpec) -> tuple[float, float]:
    """Upper bound -(2π)²γ* on the top exponent and the maximizing ν′.

    γ(ν′) = -C_W^{(ν′)} + (ν-ν′) + ‖θ‖²_{h⁻¹} C_d K², maximized over the ν′ grid.
    """
    Cd = dimension_constant(W.grid.d)
    th = h_norm(noise, -1.0, squared=True)
    noise_term = th * Cd * noise.K**2

    def gamma(e):
        return -unstable_modes(W, e)[1] + (nu - e) + noise_term

    grid = _nu_grid(nu)
    vals = np.array([gamma(e) for e in grid])
    best = int(np.argmax(vals))
    fine = _refine(nu, grid, vals, best)
    fvals = np.array([gamma(e) for e in fine])
    if fvals.max() > vals[best]:
        g, e = float(fvals.max()), float(fine[np.argmax(fvals)])
    else:
        g, e = float(vals[best]), float(grid[best])
    return -(2 * np.pi) ** 2 * g, e


# ---------------------------------------------------------------------------
# free energy and steady states


def free_energy(rho: SpectralField, nu: float, W: SpectralField) -> float:
    """ν∫ρ log ρ + ½ Σ_k Ŵ(k)|ρ̂(k)|² (entropy by grid quadrature)."""
    if rho.grid != W.grid:
        raise SpectralError("density and potential grids differ")
    phys = rho.to_physical()
    if phys.min() <= 0:
        raise ValueError(f"free energy needs a positive density (min = {phys.min():.3g})")
    entropy = float(np.mean(phys * np.log(np.maximum(phys, 1e-12))))
    interaction = 0.5 * float(np.sum(W.coeffs.real * np.abs(rho.coeffs) ** 2))
    return nu * entropy + interaction


def gibbs_map(rho: SpectralField, nu: float, W: SpectralField) -> SpectralField:
    """ρ ↦ exp(-(W∗ρ)/ν)/Z with Z making the mean one."""
    g = rho.grid
    pot = SpectralField(g, W.coeffs * rho.coeffs).to_physical()
    pot -= pot.min()
    w = np.exp(-pot / nu)
    return to_spectral(g, w / w.mean())


@dataclass
class FixedPointResult:
    rho: SpectralField
    converged: bool
    iterations: int
    residual: float

    def order_parameter(self, k) -> float:
        return float(abs(self.rho[k]))


def steady_state_fixed_point(nu: float, W: SpectralField, rho_init: SpectralField, damping: float = 0.5,
                             tol: float = 1e-10, max_iter: int = 10_000) -> FixedPointResult:
    """Damped Picard iteration ρ ← (1-λ)ρ + λ·Gibbs(ρ); non-convergence is reported, not raised."""
    if not nu > 0:
        raise ValueError("ν must be positive")
    if not 0 < damping <= 1:
        raise ValueError("damping must lie in (0, 1]")
    phys = rho_init.to_physical()
    if phys.min() <= 0:
        raise ValueError("initial density must be positive")
    if abs(rho_init.mean - 1.0) > 1e-10:
        raise ValueError("initial density must have mean one")
    rho = rho_init
    res = np.inf
    for it in range(1, max_iter + 1):
        new = rho * (1 - damping) + gibbs_map(rho, nu, W) * damping
        res = (new - rho).norm(0)
        rho = new
        if res < tol:
            return FixedPointResult(rho, True, it, res)
    return FixedPointResult(rho, False, max_iter, res)


def perturbed_uniform(grid: TorusGrid, modes: dict) -> SpectralField:
    """1 + Σ 2Re(c_k e_k), checked positive."""
    rho = SpectralField.from_modes(grid, modes, mean=1.0)
    if rho.to_physical().min() <= 0:
        raise ValueError("perturbation makes the density nonpositive")
    return rho


def concentrated_density(grid: TorusGrid, W: SpectralField, beta: float) -> SpectralField:
    """Gibbs-like density exp(-β W)/Z, a strongly nonuniform starting point for the iteration."""
    w = np.exp(-beta * W.to_physical())
    return to_spectral(grid, w / w.mean())


def locate_transition(nu_lo: float, nu_hi: float, predicate, width: float = 1e-2, max_iter: int = 40) -> float:
    """Bisection for the ν where ``predicate(ν)`` (nonuniform state exists) switches from True to False."""
    lo, hi = nu_lo, nu_hi
    if not predicate(lo) or predicate(hi):
        raise ValueError("bracket does not straddle the transition")
    for _ in range(max_iter):
        if hi - lo <= width:
            break
        mid = 0.5 * (lo + hi)
        if predicate(mid):
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)
