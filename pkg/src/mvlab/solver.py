"""Time stepping for the noisy McKean–Vlasov equation and its relatives.

The state is held in Fourier space as a batch of ensemble members, shape
(E, M, ..., M), in the same layout as :class:`SpectralField`. Writing
ρ = m + u with m the (conserved) mean, the drift splits into a diagonal part
-|2πk|²(ν + m Ŵ(k)) that is integrated exactly and the quadratic remainder
∇·(u ∇W∗u). Products with the noise velocity (and with ∇W∗u when W has few
modes) are computed as exact shifted sums in Fourier space, so no transform
is needed inside a step. The state is kept 2/3-dealiased.

Schemes:

* ``ito_em``: ρ ← e^{(L-κ|2πk|²)dt}(ρ + dt·Q(ρ) + ∇·(ρ ΔV)), the Itô form
  with the corrector κ = K²q taken from the covariance of the simulated noise;
* ``strang``: half deterministic step (exponential RK2), exact transport of
  the grid values along the shear flow of the step increment, half step.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.special import logsumexp

from .flow import BrownianDriver, ModeField
from .noise import NoiseSpec, WongZakaiPath, check_grid, ito_coefficient, make_basis
from .rng import CounterStream
from .spectral import SpectralError, SpectralField, TorusGrid, eval_series, symmetry_defect

log = logging.getLogger(__name__)

SCHEMES = ("ito_em", "strang")
SPARSE_W_MAX = 64
NEGATIVE_FLAG = -1e-3


class SolverBlowup(RuntimeError):
    """Raised when a run becomes non-finite or exceeds the configured L² cap."""


@dataclass(frozen=True, eq=False)
class ModelParams:
    nu: float
    W: SpectralField
    noise: NoiseSpec

    def __post_init__(self):
        if not self.nu >= 0:
            raise ValueError("diffusivity must be nonnegative")
        if self.W.is_vector:
            raise SpectralError("interaction potential must be scalar")
        c = self.W.coeffs
        scale = max(float(np.max(np.abs(c), initial=0.0)), 1.0)
        if np.max(np.abs(c.imag), initial=0.0) > 1e-12 * scale:
            raise SpectralError("potential coefficients must be real (W even)")
        if symmetry_defect(c, self.W.grid) > 1e-12 * scale:
            raise SpectralError("potential must be even: Ŵ(k) = Ŵ(-k)")
        if self.noise.d != self.W.grid.d:
            raise SpectralError("noise and potential dimensions differ")

    @property
    def grid(self) -> TorusGrid:
        return self.W.grid

    def with_noise(self, noise: NoiseSpec) -> "ModelParams":
        return ModelParams(self.nu, self.W, noise)

    def with_K(self, K: float) -> "ModelParams":
        return ModelParams(self.nu, self.W, self.noise.with_K(K))

    def rescaled(self) -> "ModelParams":
        """Unit-diffusivity model (W/ν, K/√ν), solved in time ν·t."""
        return ModelParams(1.0, self.W * (1.0 / self.nu), self.noise.with_K(self.noise.K / np.sqrt(self.nu)))


@dataclass(frozen=True)
class SolverConfig:
    grid: TorusGrid
    dt: float
    T: float
    scheme: str = "ito_em"
    record_every: int = 1
    blowup_cap: float = 1e3
    keep_fields: bool = False

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.T < 0:
            raise ValueError("T must be nonnegative")
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown scheme {self.scheme!r}; expected one of {SCHEMES}")
        if self.record_every < 1:
            raise ValueError("record_every must be >= 1")

    @property
    def n_steps(self) -> int:
        n = int(round(self.T / self.dt))
        if abs(n * self.dt - self.T) > 1e-9 * max(1.0, self.T):
            raise ValueError(f"dt={self.dt} does not divide T={self.T}")
        return n


@dataclass(frozen=True)
class NoiseStreams:
    """One counter stream per ensemble member: (seed, member, purpose).

    ``factor`` > 1 samples the path on a step dt/factor and sums, so runs with
    different dt on the same streams see the same Brownian path.
    """

    seed: int
    members: int = 1
    purpose: str = "noise"
    first_member: int = 0
    factor: int = 1

    def stream(self, e: int) -> CounterStream:
        return CounterStream(self.seed, self.first_member + e, self.purpose)

    def refined(self, factor: int) -> "NoiseStreams":
        return NoiseStreams(self.seed, self.members, self.purpose, self.first_member, self.factor * factor)

    def drivers(self, spec: NoiseSpec, dt: float) -> list[BrownianDriver]:
        return [BrownianDriver(spec, dt, self.stream(e), factor=self.factor) for e in range(self.members)]


@dataclass(eq=False)
class Trajectory:
    """Recorded diagnostics, shape (members, samples) per name."""

    grid: TorusGrid
    times: np.ndarray
    diagnostics: dict
    fields: np.ndarray | None = None
    log_scale: np.ndarray | None = None
    flags: list = field(default_factory=list)

    @property
    def members(self) -> int:
        return next(iter(self.diagnostics.values())).shape[0]

    def field(self, sample: int = -1, member: int = 0) -> SpectralField:
        if self.fields is None:
            raise ValueError("fields were not kept; set keep_fields=True")
        return SpectralField(self.grid, self.fields[sample, member])

    def final(self, member: int = 0) -> SpectralField:
        return self.field(-1, member)

    def ensemble_mean_log(self, name: str) -> np.ndarray:
        """log of the ensemble mean of exp(diagnostic) for log-valued diagnostics."""
        d = self.diagnostics[name]
        return logsumexp(d, axis=0) - np.log(d.shape[0])


# ---------------------------------------------------------------------------
# Fourier-space building blocks


def _shift(a: np.ndarray, k, d: int) -> np.ndarray:
    """b(k') = a(k' - k) on the trailing d axes."""
    return np.roll(a, shift=tuple(int(v) for v in k), axis=tuple(range(-d, 0)))


def div_sparse_product(u: np.ndarray, ks: np.ndarray, amps: np.ndarray, grid: TorusGrid) -> np.ndarray:
    """Fourier coefficients of ∇·(u g) for g = Σ_s amps_s e_{k_s}.

    ``u`` has shape (E,) + grid.shape, ``amps`` (E, S, d). Exact as long as the
    shifted band stays inside the grid (checked by the caller).
    """
    out = np.zeros_like(u)
    for s, k in enumerate(ks):
        a = amps[:, s, :]
        if not np.any(a):
            continue
        mult = np.tensordot(a, grid.deriv, axes=(1, 0))  # (E,) + shape
        out += mult * _shift(u, k, grid.d)
    return out


class _Dynamics:
    """Diagonal operator, quadratic term and noise coupling for one model on one grid."""

    def __init__(self, params: ModelParams, grid: TorusGrid, mean: float, quadratic: bool, noise: bool = True):
        if params.grid != grid:
            raise SpectralError(f"potential grid {params.grid} differs from solver grid {grid}")
        self.grid = grid
        self.params = params
        self.quadratic = quadratic
        self.mask = grid.dealias_mask
        band = grid.M // 3
        What = params.W.coeffs.real
        self.L = np.where(self.mask, grid.lap * (params.nu + mean * What), 0.0)
        spec = params.noise
        self.noisy = noise and spec.K > 0 and spec.nontrivial
        self.kappa = spec.K**2 * ito_coefficient(spec) if self.noisy else 0.0
        if self.noisy:
            check_grid(spec, grid)
            if band + int(np.max(np.abs(spec.primaries))) >= grid.M // 2:
                raise SpectralError(f"grid M={grid.M} too small for noise truncation n={spec.n} with 2/3 dealiasing")
            self.field = ModeField(spec, make_basis(spec))
            self.noise_ks = np.concatenate([spec.primaries, -spec.primaries])
        nz = np.argwhere((np.abs(What) > 0) & (grid.ksq > 0))
        self.w_idx = tuple(nz.T)
        self.w_ks = grid.kvec[(slice(None),) + self.w_idx].T.copy()
        self.w_vals = What[self.w_idx]
        self.sparse_W = len(nz) <= SPARSE_W_MAX and (
            len(nz) == 0 or band + int(np.max(np.abs(self.w_ks))) < grid.M // 2
        )
        self.What = What

    def nonlinear(self, rho: np.ndarray) -> np.ndarray:
        """∇·(u ∇W∗u) with u = ρ minus its mean, dealiased."""
        if not self.quadratic or len(self.w_vals) == 0:
            return np.zeros_like(rho)
        g = self.grid
        u = rho.copy()
        u[(slice(None),) + (0,) * g.d] = 0.0
        if self.sparse_W:
            uw = u[(slice(None),) + self.w_idx]  # (E, S)
            amps = (2j * np.pi) * uw[:, :, None] * (self.w_vals[:, None] * self.w_ks)[None]
            out = div_sparse_product(u, self.w_ks, amps, g)
        else:
            axes = tuple(range(-g.d, 0))
            grad_phys = np.fft.ifftn(g.deriv * (self.What * u)[:, None], axes=axes).real * g.size
            u_phys = np.fft.ifftn(u, axes=axes).real * g.size
            flux = np.fft.fftn(grad_phys * u_phys[:, None], axes=axes) / g.size
            out = np.sum(g.deriv * flux, axis=1)
        return np.where(self.mask, out, 0.0)

    def noise_amps(self, incr: np.ndarray) -> np.ndarray:
        """(E, P, d-1) increments -> (E, 2P, d) amplitudes on ±k."""
        c = self.field.amplitudes(incr)
        return np.concatenate([c, np.conj(c)], axis=1)

    def noise_term(self, rho: np.ndarray, incr: np.ndarray) -> np.ndarray:
        return div_sparse_product(rho, self.noise_ks, self.noise_amps(incr), self.grid)

    def transport_step(self, rho: np.ndarray, incr: np.ndarray) -> np.ndarray:
        """Exact pull-back of each member along the inverse shear flow of one step."""
        g = self.grid
        pts = g.points
        amps = self.field.amplitudes(incr)
        band = g.M // 3
        out = np.empty_like(rho)
        for e in range(rho.shape[0]):
            x = pts.copy()
            half = 0.5 * amps[e]
            P = len(half)
            # the forward step is dX = -ΔV composed symmetrically; invert it
            for p in list(range(P)) + list(range(P - 1, -1, -1)):
                x, _ = self.field.shear(x, half, p, +1.0)
            vals = eval_series(rho[e], g, np.mod(x, 1.0), band).reshape(g.shape)
            out[e] = np.fft.fftn(vals) / g.size
        return np.where(self.mask, out, 0.0)


def _initial_batch(rho0, grid: TorusGrid, members: int) -> np.ndarray:
    if isinstance(rho0, SpectralField):
        if rho0.grid != grid:
            raise SpectralError("initial field grid differs from solver grid")
        if rho0.is_vector:
            raise SpectralError("initial datum must be scalar")
        c = rho0.coeffs[None]
    else:
        c = np.asarray([f.coeffs for f in rho0])
        if len(c) != members:
            raise ValueError("one initial field per member required")
    if not np.all(np.isfinite(c)):
        raise SpectralError("initial datum has non-finite coefficients")
    c = np.where(grid.dealias_mask, c, 0.0)
    return np.broadcast_to(c, (members,) + grid.shape).astype(complex).copy()


def _weights(grid: TorusGrid, s: float) -> np.ndarray:
    w = np.zeros(grid.shape)
    nz = grid.ksq > 0
    w[nz] = ((2 * np.pi) ** 2 * grid.ksq[nz]) ** s
    return w


class _Recorder:
    def __init__(self, grid: TorusGrid, cfg: SolverConfig, members: int, nu=None, W=None, free_energy=False, log_mode=False):
        self.grid = grid
        self.cfg = cfg
        self.members = members
        self.log_mode = log_mode
        self.wm1 = _weights(grid, -1.0)
        self.w0 = _weights(grid, 0.0)
        self.nu = nu
        self.W = W
        self.free_energy = free_energy
        self.times = []
        self.rows = []
        self.fields = [] if cfg.keep_fields else None
        self.flags = []

    def record(self, t: float, rho: np.ndarray, log_scale=None):
        g = self.grid
        axes = tuple(range(-g.d, 0))
        mass = rho[(slice(None),) + (0,) * g.d].real
        a2 = np.abs(rho) ** 2
        hm1 = np.sum(self.wm1 * a2, axis=axes)
        l2 = np.sum(self.w0 * a2, axis=axes)
        row = {"mass": mass}
        if self.log_mode:
            ls = np.zeros(len(rho)) if log_scale is None else log_scale
            with np.errstate(divide="ignore"):
                row["log_hm1_sq"] = np.log(hm1) + 2 * ls
                row["log_l2_sq"] = np.log(l2) + 2 * ls
        else:
            phys = np.fft.ifftn(rho, axes=axes).real * g.size
            row["min"] = phys.reshape(len(rho), -1).min(axis=1)
            row["hm1"] = np.sqrt(hm1)
            row["l2"] = np.sqrt(l2)
            ls = np.zeros(len(rho)) if log_scale is None else log_scale
            with np.errstate(divide="ignore"):
                row["log_l2"] = 0.5 * np.log(l2) + ls
            if self.free_energy:
                from .steady import free_energy

                fe = []
                for e in range(len(rho)):
                    try:
                        fe.append(free_energy(SpectralField(g, rho[e]), self.nu, self.W))
                    except ValueError:
                        fe.append(np.nan)
                row["free_energy"] = np.array(fe)
            if np.any(row["min"] < NEGATIVE_FLAG):
                self.flags.append((t, "negative density excursion", float(row["min"].min())))
        self.times.append(t)
        self.rows.append(row)
        if self.fields is not None:
            self.fields.append(rho.copy())

    def check(self, t: float, rho: np.ndarray, cap_l2: bool = True):
        if not np.all(np.isfinite(rho)):
            raise SolverBlowup(f"non-finite state at t={t:.6g}")
        if cap_l2:
            g = self.grid
            norm = np.sqrt(np.max(np.sum(np.abs(rho) ** 2, axis=tuple(range(-g.d, 0)))))
            if norm > self.cfg.blowup_cap:
                raise SolverBlowup(f"‖ρ‖_L² = {norm:.3g} exceeds cap {self.cfg.blowup_cap:g} at t={t:.6g}")

    def trajectory(self, log_scale=None) -> Trajectory:
        names = self.rows[0].keys()
        diags = {n: np.stack([r[n] for r in self.rows], axis=1) for n in names}
        fields = np.stack(self.fields) if self.fields is not None else None
        return Trajectory(self.grid, np.array(self.times), diags, fields, log_scale, self.flags)


class _IncrementFeed:
    """Blocked per-member increments for consecutive steps."""

    def __init__(self, drivers, block: int = 256):
        self.drivers = drivers
        self.block = block
        self.start = None
        self.buf = None

    def __call__(self, step: int) -> np.ndarray:
        if self.start is None or not (self.start <= step < self.start + self.block):
            self.start = step - step % self.block
            self.buf = np.stack([d.block(self.start, self.block) for d in self.drivers], axis=1)
        return self.buf[step - self.start]


def _integrate(dyn: _Dynamics, rho: np.ndarray, cfg: SolverConfig, streams: NoiseStreams | None, rec: _Recorder,
               renormalize: bool = False, cap_l2: bool = True, renorm_steps: int = 0):
    dt = cfg.dt
    n = cfg.n_steps
    E = rho.shape[0]
    if dyn.noisy:
        if streams is None:
            raise ValueError("noise streams required when K > 0")
        if streams.members != E:
            raise ValueError(f"{streams.members} noise streams for {E} members")
        feed = _IncrementFeed(streams.drivers(dyn.params.noise, dt))
    log_scale = np.zeros(E)
    if cfg.scheme == "ito_em":
        Efull = np.exp((dyn.L + dyn.kappa * dyn.grid.lap) * dt) * dyn.mask
    else:
        Efull_half = np.exp(dyn.L * dt / 2.0) * dyn.mask

    def half_step(r, h, Eh):
        # exponential (Lawson) RK2 over h
        a = dyn.nonlinear(r)
        if not dyn.quadratic or not np.any(a):
            return Eh * r
        u1 = Eh * (r + h * a)
        return Eh * r + 0.5 * h * (Eh * a + dyn.nonlinear(u1))

    rec.record(0.0, rho, log_scale)
    for i in range(n):
        if cfg.scheme == "ito_em":
            rhs = rho.copy()
            if dyn.quadratic:
                rhs += dt * dyn.nonlinear(rho)
            if dyn.noisy:
                rhs += dyn.noise_term(rho, feed(i))
            rho = Efull * rhs
        else:
            rho = half_step(rho, dt / 2.0, Efull_half)
            if dyn.noisy:
                rho = dyn.transport_step(rho, feed(i))
            rho = half_step(rho, dt / 2.0, Efull_half)
        t = (i + 1) * dt
        if renormalize or renorm_steps:
            scale = np.sqrt(np.sum(np.abs(rho) ** 2, axis=tuple(range(1, rho.ndim))))
            if renorm_steps and (i + 1) % renorm_steps == 0:
                big = scale > 0
            else:
                big = (scale > 1e50) | ((scale < 1e-50) & (scale > 0))
            if np.any(big):
                rho[big] /= scale[big].reshape((-1,) + (1,) * (rho.ndim - 1))
                log_scale[big] += np.log(scale[big])
        if (i + 1) % cfg.record_every == 0 or i + 1 == n:
            rec.check(t, rho, cap_l2)
            rec.record(t, rho, log_scale)
    return rho, log_scale


def run_spde(rho0, params: ModelParams, cfg: SolverConfig, streams: NoiseStreams | None = None,
             free_energy: bool = False) -> Trajectory:
    """Integrate dρ = [νΔρ + ∇·(ρ∇W∗ρ)]dt + √2K∇·(ρ∘dξ) for every member.

    ``rho0`` is one SpectralField (shared by all members) or a list with one
    field per member.
    """
    members = streams.members if streams is not None else 1
    rho = _initial_batch(rho0, cfg.grid, members)
    mean = rho[(slice(None),) + (0,) * cfg.grid.d].real
    if np.ptp(mean) > 1e-14:
        raise ValueError("all members must share the same mass")
    dyn = _Dynamics(params, cfg.grid, float(mean[0]), quadratic=True)
    rec = _Recorder(cfg.grid, cfg, members, params.nu, params.W, free_energy)
    _integrate(dyn, rho, cfg, streams, rec)
    return rec.trajectory()


def run_linearized(v0, params: ModelParams, cfg: SolverConfig, streams: NoiseStreams | None = None,
                   renormalize: bool = False, renorm_steps: int = 0) -> Trajectory:
    """Integrate dv = [νΔv + ΔW∗v]dt + √2K∇·(v∘dξ) around the uniform state.

    With ``renormalize`` members are rescaled when their norm leaves
    [1e-50, 1e50]; with ``renorm_steps`` every that many steps. The accumulated
    log scale is included in the ``log_l2`` diagnostic.
    """
    members = streams.members if streams is not None else 1
    v = _initial_batch(v0, cfg.grid, members)
    if np.max(np.abs(v[(slice(None),) + (0,) * cfg.grid.d])) > 0:
        raise ValueError("linearized dynamics require a mean-free initial datum")
    dyn = _Dynamics(params, cfg.grid, 1.0, quadratic=False)
    rec = _Recorder(cfg.grid, cfg, members)
    rescaled = renormalize or renorm_steps > 0
    _, ls = _integrate(dyn, v, cfg, streams, rec, renormalize=renormalize, cap_l2=not rescaled,
                       renorm_steps=renorm_steps)
    traj = rec.trajectory(ls)
    return traj


def run_pure_transport(u0, spec: NoiseSpec, cfg: SolverConfig, streams: NoiseStreams | None = None) -> Trajectory:
    """Integrate du = √2K∇·(u∘dξ); diagnostics are log squared norms (log_hm1_sq, log_l2_sq).

    Members are renormalized internally when their scale leaves [1e-50, 1e50];
    the recorded logs include the accumulated scale, so ensemble means of the
    squared norms can be formed with :meth:`Trajectory.ensemble_mean_log`.
    """
    grid = cfg.grid
    members = streams.members if streams is not None else 1
    u = _initial_batch(u0, grid, members)
    params = ModelParams(0.0, SpectralField.zeros(grid), spec)
    dyn = _Dynamics(params, grid, 0.0, quadratic=False)
    rec = _Recorder(grid, cfg, members, log_mode=True)
    _, ls = _integrate(dyn, u, cfg, streams, rec, renormalize=True, cap_l2=False)
    return rec.trajectory(ls)


# ---------------------------------------------------------------------------
# deterministic controlled equation


class ControlPath:
    """Deterministic divergence-free velocity h(t) = Σ_p 2Re(c_p(t) e_{k_p}).

    ``rates(t)`` returns the complex increments per unit time on the primaries
    of ``spec`` (shape (P, d-1)); the amplitudes carry the √2Kθ_k a_k factor,
    matching the noise velocity with dB replaced by the control.
    """

    def __init__(self, spec: NoiseSpec, rates: Callable[[float], np.ndarray]):
        self.spec = spec
        self.rates = rates
        self.field = ModeField(spec, make_basis(spec))
        self.ks = np.concatenate([spec.primaries, -spec.primaries])

    @classmethod
    def zero(cls, spec: NoiseSpec) -> "ControlPath":
        P = len(spec.primaries)
        return cls(spec, lambda t: np.zeros((P, spec.d - 1), dtype=complex))

    @classmethod
    def constant(cls, spec: NoiseSpec, rate: np.ndarray) -> "ControlPath":
        rate = np.asarray(rate, dtype=complex)
        return cls(spec, lambda t: rate)

    @classmethod
    def from_wong_zakai(cls, path: WongZakaiPath) -> "ControlPath":
        """Frozen Wong–Zakai realization used as a deterministic control."""
        T = path.T

        def rates(t):
            return path.derivative(min(max(t, 0.0), T - 1e-12))

        return cls(path.spec, rates)

    def amplitudes(self, t: float) -> np.ndarray:
        c = self.field.amplitudes(self.rates(t))
        return np.concatenate([c, np.conj(c)], axis=0)


def run_controlled(rho0: SpectralField, params: ModelParams, control: ControlPath, cfg: SolverConfig,
                   scale: float = 1.0, free_energy: bool = False) -> Trajectory:
    """Integrate ∂ρ = s(νΔρ + ∇·(ρ∇W∗ρ)) + √2K∇·(ρh) with exponential RK4 (s = ``scale``)."""
    grid = cfg.grid
    rho = _initial_batch(rho0, grid, 1)
    mean = float(rho[(0,) + (0,) * grid.d].real)
    dyn = _Dynamics(params, grid, mean, quadratic=True, noise=False)
    if control.spec.d != grid.d:
        raise SpectralError("control dimension differs from grid")
    if len(control.ks) and grid.M // 3 + int(np.max(np.abs(control.ks))) >= grid.M // 2:
        raise SpectralError("grid too small for the control modes")
    dt = cfg.dt
    L = scale * dyn.L
    E2 = np.exp(L * dt / 2) * dyn.mask
    E1 = np.exp(L * dt) * dyn.mask

    def f(r, t):
        out = scale * dyn.nonlinear(r) if dyn.quadratic else 0.0
        amps = control.amplitudes(t)[None]
        return np.where(dyn.mask, out + div_sparse_product(r, control.ks, amps, grid), 0.0)

    rec = _Recorder(grid, cfg, 1, params.nu, params.W, free_energy)
    rec.record(0.0, rho)
    n = cfg.n_steps
    for i in range(n):
        t = i * dt
        k1 = f(rho, t)
        k2 = f(E2 * (rho + 0.5 * dt * k1), t + dt / 2)
        k3 = f(E2 * rho + 0.5 * dt * k2, t + dt / 2)
        k4 = f(E1 * rho + dt * E2 * k3, t + dt)
        rho = E1 * rho + dt / 6.0 * (E1 * k1 + 2 * E2 * (k2 + k3) + k4)
        if (i + 1) % cfg.record_every == 0 or i + 1 == n:
            rec.check((i + 1) * dt, rho)
            rec.record((i + 1) * dt, rho)
    return rec.trajectory()
