"""Stochastic characteristics of the transport noise and the flows they generate.

Points move by dX = -ΔV(X) with ΔV the noise velocity increment (Stratonovich
product). Three white-noise schemes are provided:

* ``heun``: predictor-corrector, the default Stratonovich scheme;
* ``euler``: explicit Itô Euler–Maruyama (no drift correction is needed
  because the covariance of the noise is spatially homogeneous);
* ``shear``: composition of the exact flows of the single-mode fields. Each
  mode field depends on x only through k·x, which it leaves invariant, so its
  flow over a step is the explicit shear x ↦ x - V_k(x) with determinant one
  and explicit inverse. Modes are applied in a symmetric order with half
  increments.

Wong–Zakai paths are integrated as ODEs with a classical RK4 step inside each
linear segment.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .noise import ModeBasis, NoiseSpec, WongZakaiPath, gaussians_to_increments, make_basis, mode_amplitudes
from .rng import CounterStream
from .spectral import SpectralError, SpectralField, TorusGrid, eval_series, to_spectral

SCHEMES = ("heun", "euler", "shear")


class FlowError(ValueError):
    """Invalid driver/spec combination or a flow that left the finite range."""


@dataclass(frozen=True, eq=False)
class FlowMap:
    """A time-t flow sampled at material points.

    ``points`` are wrapped to [0, 1)^d; ``unwrapped`` keeps the lift to R^d so
    displacements can be compared without wrap-around artifacts.
    """

    t: float
    start: np.ndarray
    unwrapped: np.ndarray
    jac: np.ndarray | None = None
    direction: str = "forward"

    @property
    def points(self) -> np.ndarray:
        return np.mod(self.unwrapped, 1.0)

    @property
    def displacement(self) -> np.ndarray:
        return self.unwrapped - self.start

    def jacobian(self) -> np.ndarray:
        if self.jac is None:
            raise FlowError("Jacobian tracking was not enabled for this flow")
        return self.jac

    def det(self) -> np.ndarray:
        return np.linalg.det(self.jacobian())


# ---------------------------------------------------------------------------
# drivers


class BrownianDriver:
    """Step increments of the complex mode Brownian motions.

    The path is sampled on a fine step ``dt / factor``: fine step ``i`` draws
    from the counter window ``offset + i`` of ``stream``, and each driver step
    sums ``factor`` consecutive fine increments. Drivers on the same stream
    therefore see the same Brownian path whatever their step, and a driver can
    be restarted anywhere.
    """

    def __init__(self, spec: NoiseSpec, dt: float, stream: CounterStream | None = None, offset: int = 0,
                 increments=None, factor: int = 1):
        if dt <= 0:
            raise FlowError("dt must be positive")
        if factor < 1:
            raise FlowError("factor must be a positive integer")
        if stream is None and increments is None:
            raise FlowError("driver needs a stream or explicit increments")
        self.spec = spec
        self.dt = float(dt)
        self.stream = stream
        self.offset = int(offset)
        self.factor = int(factor)
        self._fixed = None if increments is None else np.asarray(increments, dtype=complex)

    @classmethod
    def from_increments(cls, spec: NoiseSpec, dt: float, increments) -> "BrownianDriver":
        """Driver replaying explicit increments of shape (steps, P, d-1)."""
        return cls(spec, dt, increments=increments)

    @classmethod
    def zero(cls, spec: NoiseSpec, dt: float, steps: int) -> "BrownianDriver":
        return cls(spec, dt, increments=np.zeros((steps, len(spec.primaries), spec.d - 1), dtype=complex))

    def coarsen(self, factor: int) -> "BrownianDriver":
        """Same Brownian path observed with a step ``factor`` times longer."""
        if self._fixed is not None:
            n = len(self._fixed) // factor
            fixed = self._fixed[: n * factor].reshape((n, factor) + self._fixed.shape[1:]).sum(axis=1)
            return BrownianDriver(self.spec, self.dt * factor, increments=fixed)
        return BrownianDriver(self.spec, self.dt * factor, self.stream, self.offset, factor=self.factor * factor)

    @property
    def horizon(self) -> float:
        if self._fixed is None:
            return np.inf
        return len(self._fixed) * self.dt

    def block(self, start: int, count: int) -> np.ndarray:
        """Increments for steps start..start+count-1, shape (count, P, d-1)."""
        P = len(self.spec.primaries)
        if self._fixed is not None:
            if start + count > len(self._fixed):
                raise FlowError("driver horizon does not cover the requested time")
            return self._fixed[start : start + count]
        if P == 0:
            return np.zeros((count, 0, self.spec.d - 1), dtype=complex)
        f = self.factor
        z = self.stream.normal_block(self.offset + start * f, count * f, self.spec.n_real)
        fine = gaussians_to_increments(self.spec, z, self.dt / f)
        if f == 1:
            return fine
        return fine.reshape((count, f) + fine.shape[1:]).sum(axis=1)


def _n_steps(t_end: float, dt: float) -> int:
    n = int(round(t_end / dt))
    if n < 0 or abs(n * dt - t_end) > 1e-9 * max(1.0, t_end):
        raise FlowError(f"dt={dt} does not divide t_end={t_end}")
    return n


# ---------------------------------------------------------------------------
# field evaluation at points


class ModeField:
    """Noise velocity field given by vector amplitudes on primary modes.

    V(x) = Σ_p 2 Re(c_p e^{2πi k_p·x}) with c_p ⊥ k_p.
    """

    def __init__(self, spec: NoiseSpec, basis: ModeBasis | None = None):
        self.spec = spec
        self.basis = make_basis(spec) if basis is None else basis
        self.k = spec.primaries.astype(float)

    def amplitudes(self, incr: np.ndarray) -> np.ndarray:
        return mode_amplitudes(self.spec, self.basis, incr)

    def phase(self, x: np.ndarray) -> np.ndarray:
        return np.exp(2j * np.pi * (x @ self.k.T))

    def velocity(self, x: np.ndarray, amps: np.ndarray) -> np.ndarray:
        return 2.0 * (self.phase(x) @ amps).real

    def velocity_and_gradient(self, x: np.ndarray, amps: np.ndarray):
        """V(x) (N, d) and DV(x)[n, i, j] = ∂_j V_i (N, d, d)."""
        e = self.phase(x)
        v = 2.0 * (e @ amps).real
        # ∂_j of 2Re(c_i e) = 2Re(2πi k_j c_i e)
        dv = 2.0 * np.einsum("np,pi,pj->nij", 2j * np.pi * e, amps, self.k).real
        return v, dv

    def shear(self, x: np.ndarray, amps: np.ndarray, p: int, sign: float, jac=None):
        """Exact flow of the single-mode field p: x ↦ x + sign·V_p(x)."""
        e = np.exp(2j * np.pi * (x @ self.k[p]))
        c = amps[p]
        v = 2.0 * np.outer(e, c).real
        if jac is not None:
            dv = 2.0 * np.einsum("n,i,j->nij", 2j * np.pi * e, c, self.k[p]).real
            jac = jac + sign * dv @ jac
        return x + sign * v, jac


def _step(field: ModeField, x, amps, scheme: str, sign: float, jac):
    """One step of dX = sign·ΔV(X)."""
    if scheme == "euler":
        if jac is None:
            return x + sign * field.velocity(x, amps), None
        v, dv = field.velocity_and_gradient(x, amps)
        return x + sign * v, jac + sign * dv @ jac
    if scheme == "heun":
        if jac is None:
            v0 = field.velocity(x, amps)
            y = x + sign * v0
            return x + 0.5 * sign * (v0 + field.velocity(y, amps)), None
        v0, d0 = field.velocity_and_gradient(x, amps)
        y = x + sign * v0
        jy = jac + sign * d0 @ jac
        v1, d1 = field.velocity_and_gradient(y, amps)
        return x + 0.5 * sign * (v0 + v1), jac + 0.5 * sign * (d0 @ jac + d1 @ jy)
    if scheme == "shear":
        half = 0.5 * amps
        P = len(amps)
        for p in list(range(P)) + list(range(P - 1, -1, -1)):
            x, jac = field.shear(x, half, p, sign, jac)
        return x, jac
    raise FlowError(f"unknown scheme {scheme!r}; expected one of {SCHEMES}")


def _inverse_step(field: ModeField, x, amps, scheme: str, sign: float):
    """Inverse (or time-reversed approximation) of one forward step."""
    if scheme == "shear":
        half = 0.5 * amps
        P = len(amps)
        # exact inverse: undo the symmetric composition in reverse order
        for p in list(range(P)) + list(range(P - 1, -1, -1)):
            x, _ = field.shear(x, half, p, -sign, None)
        return x
    return _step(field, x, amps, scheme, -sign, None)[0]


def _rk4_segment(field: ModeField, x, amps_rate, h: float, substeps: int, sign: float, jac):
    """RK4 for dX/dt = sign·U(X) over time h, with U the frozen segment velocity."""
    dt = h / substeps
    for _ in range(substeps):
        if jac is None:
            k1 = field.velocity(x, amps_rate)
            k2 = field.velocity(x + 0.5 * dt * sign * k1, amps_rate)
            k3 = field.velocity(x + 0.5 * dt * sign * k2, amps_rate)
            k4 = field.velocity(x + dt * sign * k3, amps_rate)
            x = x + sign * dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
            continue
        k1, g1 = field.velocity_and_gradient(x, amps_rate)
        j1 = g1 @ jac
        k2, g2 = field.velocity_and_gradient(x + 0.5 * dt * sign * k1, amps_rate)
        j2 = g2 @ (jac + 0.5 * dt * sign * j1)
        k3, g3 = field.velocity_and_gradient(x + 0.5 * dt * sign * k2, amps_rate)
        j3 = g3 @ (jac + 0.5 * dt * sign * j2)
        k4, g4 = field.velocity_and_gradient(x + dt * sign * k3, amps_rate)
        j4 = g4 @ (jac + dt * sign * j3)
        x = x + sign * dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        jac = jac + sign * dt / 6.0 * (j1 + 2 * j2 + 2 * j3 + j4)
    return x, jac


def _check_driver(spec: NoiseSpec, driver):
    if driver.spec.d != spec.d or not np.array_equal(driver.spec.primaries, spec.primaries):
        raise FlowError("driver was built for a different noise spec")


def integrate_characteristics(
    spec: NoiseSpec,
    driver,
    points: np.ndarray,
    t_end: float,
    dt: float | None = None,
    scheme: str = "heun",
    jacobian: bool = False,
    start_time: float = 0.0,
    substeps: int = 4,
) -> FlowMap:
    """Flow of dX = -√2K Σ θ_k a_k e_k(X) ∘ dB from ``start_time`` to ``start_time + t_end``.

    ``driver`` is a :class:`BrownianDriver` (white noise, step = driver.dt) or a
    :class:`WongZakaiPath` (piecewise-linear path, RK4 with ``substeps`` per
    segment). ``dt`` must match the driver step for white-noise drivers.
    """
    _check_driver(spec, driver)
    x0 = np.atleast_2d(np.asarray(points, dtype=float))
    if x0.shape[-1] != spec.d:
        raise FlowError(f"points have dimension {x0.shape[-1]}, noise has {spec.d}")
    field = ModeField(spec)
    jac = np.broadcast_to(np.eye(spec.d), x0.shape[:-1] + (spec.d, spec.d)).copy() if jacobian else None
    x = x0.copy()
    if spec.K == 0 or not spec.nontrivial:
        return FlowMap(t_end, x0, x, jac)

    if isinstance(driver, WongZakaiPath):
        h = driver.h
        i0 = _n_steps(start_time, h)
        n = _n_steps(t_end, h)
        if (i0 + n) * h > driver.T + 1e-12:
            raise FlowError("Wong–Zakai horizon does not cover t_end")
        B = driver.values_at_breakpoints()
        for i in range(i0, i0 + n):
            rate = field.amplitudes((B[i + 1] - B[i]) / h)
            x, jac = _rk4_segment(field, x, rate, h, substeps, -1.0, jac)
    else:
        if dt is not None and abs(dt - driver.dt) > 1e-15:
            raise FlowError("dt must equal the driver step")
        i0 = _n_steps(start_time, driver.dt)
        n = _n_steps(t_end, driver.dt)
        incs = driver.block(i0, n)
        amps_all = field.amplitudes(incs)
        for i in range(n):
            x, jac = _step(field, x, amps_all[i], scheme, -1.0, jac)
    if not np.all(np.isfinite(x)):
        raise FlowError("characteristics produced non-finite positions")
    return FlowMap(t_end, x0, x, jac)


def backward_characteristics(
    spec: NoiseSpec, driver, points: np.ndarray, t_end: float, scheme: str = "heun", start_time: float = 0.0, substeps: int = 4
) -> FlowMap:
    """Preimages φ⁻¹(t_end, x) by running the steps in reverse with reversed sign.

    Exact for ``shear`` (up to rounding); for the other schemes each step is
    replaced by the same scheme with the negated increment.
    """
    _check_driver(spec, driver)
    x0 = np.atleast_2d(np.asarray(points, dtype=float))
    field = ModeField(spec)
    x = x0.copy()
    if spec.K == 0 or not spec.nontrivial:
        return FlowMap(t_end, x0, x, None, "backward")
    if isinstance(driver, WongZakaiPath):
        h = driver.h
        i0 = _n_steps(start_time, h)
        n = _n_steps(t_end, h)
        B = driver.values_at_breakpoints()
        for i in range(i0 + n - 1, i0 - 1, -1):
            rate = field.amplitudes((B[i + 1] - B[i]) / h)
            x, _ = _rk4_segment(field, x, rate, h, substeps, +1.0, None)
    else:
        i0 = _n_steps(start_time, driver.dt)
        n = _n_steps(t_end, driver.dt)
        amps_all = field.amplitudes(driver.block(i0, n))
        for i in range(n - 1, -1, -1):
            x = _inverse_step(field, x, amps_all[i], scheme, -1.0)
    if not np.all(np.isfinite(x)):
        raise FlowError("characteristics produced non-finite positions")
    return FlowMap(t_end, x0, x, None, "backward")


def pullback(u0: SpectralField, preimages: np.ndarray) -> SpectralField:
    """u0 evaluated at the given preimages of the grid nodes, transformed back."""
    g = u0.grid
    vals = eval_series(u0.coeffs, g, np.mod(preimages, 1.0)).reshape(g.shape)
    return to_spectral(g, vals)


def transport_scalar(
    u0: SpectralField, spec: NoiseSpec, driver, t_end: float, dt: float | None = None, scheme: str = "heun"
) -> SpectralField:
    """u_t = u0∘φ_t⁻¹ on the grid of u0 (semi-Lagrangian, exact series evaluation)."""
    if u0.is_vector:
        raise SpectralError("transport_scalar expects a scalar field")
    if spec.d != u0.grid.d:
        raise SpectralError("noise and field dimensions differ")
    if spec.K == 0 or not spec.nontrivial:
        return u0
    if dt is not None and not isinstance(driver, WongZakaiPath) and abs(dt - driver.dt) > 1e-15:
        raise FlowError("dt must equal the driver step")
    fm = backward_characteristics(spec, driver, u0.grid.points, t_end, scheme)
    return pullback(u0, fm.unwrapped)


def grid_points(grid: TorusGrid) -> np.ndarray:
    return grid.points
