"""Velocity field ``(hbar/m) Im[grad psi / psi]`` and probability current.

Grid fields use spectral derivatives on periodic grids and central
differences on Dirichlet grids.  Off-grid values interpolate psi and
grad psi separately (cubic in space, linear in time) and divide afterwards,
which keeps the field homogeneous of degree zero in psi.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .propagator import FrameSeries, PropagatorSpec
from .state import Grid, PhysicalParams, SpinorWaveFunction, WaveFunction

__all__ = [
    "NodeEncounterError",
    "NodePolicy",
    "VelocityField",
    "NonlocalityResult",
    "gradient",
    "laplacian",
    "velocity_grid",
    "velocity_spinor_grid",
    "current_grid",
    "guidance_fields",
    "velocity_at",
    "nonlocality_probe",
    "continuity_residual",
    "series_from_states",
]


class NodeEncounterError(ArithmeticError):
    """Velocity requested where the density is below the node threshold."""

    def __init__(self, q, t, density=None):
        self.q = np.asarray(q)
        self.t = t
        self.density = density
        super().__init__(f"node encountered at q={np.round(self.q, 6).tolist()}, t={t:.6g}")


@dataclass(frozen=True)
class NodePolicy:
    """``eps_rel`` scales the mean grid density to give the node threshold;
    ``speed_cap`` is in domain lengths (largest axis) per unit time."""

    eps_rel: float = 1e-12
    speed_cap: float = 1e3

    def __post_init__(self):
        if not self.eps_rel > 0 or not self.speed_cap > 0:
            raise ValueError("node threshold and speed cap must be positive")

    def threshold(self, rho: np.ndarray) -> float:
        return self.eps_rel * float(np.mean(rho))

    def cap(self, grid: Grid) -> float:
        return self.speed_cap * max(grid.lengths)


@dataclass(frozen=True, eq=False)
class VelocityField:
    grid: Grid
    v: np.ndarray  # (dim, *shape)
    mask: np.ndarray
    clamped: int = 0


def gradient(amps: np.ndarray, grid: Grid) -> np.ndarray:
    """Per-axis derivative of a grid field, shape ``(dim, *grid.shape)``.

    Spectral on periodic grids (Nyquist mode dropped); second-order central
    differences with zero walls on Dirichlet grids.
    """
    out = np.empty((grid.dim,) + grid.shape, dtype=np.result_type(amps, np.complex128))
    if grid.periodic:
        # real and imaginary parts separately, so a real field has an exactly real derivative
        parts = (amps.real, amps.imag) if np.iscomplexobj(amps) else (amps,)
        for k in range(grid.dim):
            n = grid.shape[k]
            ik = 1j * 2 * np.pi * np.fft.rfftfreq(n, grid.dx[k])
            ik[-1] = 0.0 if n % 2 == 0 else ik[-1]
            sh = [1] * grid.dim
            sh[k] = -1
            ik = ik.reshape(sh)
            d = [np.fft.irfft(np.fft.rfft(p, axis=k) * ik, n=n, axis=k) for p in parts]
            out[k] = d[0] + 1j * d[1] if len(d) == 2 else d[0]
    else:
        for k in range(grid.dim):
            pad = [(0, 0)] * grid.dim
            pad[k] = (1, 1)
            p = np.pad(amps, pad)
            hi = [slice(None)] * grid.dim
            lo = [slice(None)] * grid.dim
            hi[k] = slice(2, None)
            lo[k] = slice(None, -2)
            out[k] = (p[tuple(hi)] - p[tuple(lo)]) / (2 * grid.dx[k])
    if not np.iscomplexobj(amps):
        return out.real
    return out


def laplacian(values: np.ndarray, grid: Grid, axis: int) -> np.ndarray:
    """Second derivative along ``axis``: spectral (periodic) or 3-point (Dirichlet)."""
    if grid.periodic:
        kk = grid.wavenumbers[axis]
        sh = [1] * grid.dim
        sh[axis] = -1
        out = np.fft.ifftn(np.fft.fftn(values) * (-(kk**2)).reshape(sh))
    else:
        pad = [(0, 0)] * grid.dim
        pad[axis] = (1, 1)
        p = np.pad(values, pad)
        sl = lambda a, b: tuple(slice(a, b) if k == axis else slice(None) for k in range(grid.dim))
        out = (p[sl(2, None)] - 2 * p[sl(1, -1)] + p[sl(None, -2)]) / grid.dx[axis] ** 2
    return out.real if not np.iscomplexobj(values) else out


def _finish(grid, num, rho, params, policy):
    policy = policy or NodePolicy()
    eps = policy.threshold(rho)
    mask = rho >= eps
    hom = params.hbar_over_m()
    v = np.zeros((grid.dim,) + grid.shape)
    safe = np.where(mask, rho, 1.0)
    for k in range(grid.dim):
        v[k] = np.where(mask, hom[k] * num[k] / safe, 0.0)
    speed = np.sqrt(np.sum(v**2, axis=0))
    cap = policy.cap(grid)
    over = speed > cap
    if np.any(over):
        v = np.where(over, v * (cap / np.where(over, speed, 1.0)), v)
    if not np.all(np.isfinite(v[:, mask])):
        raise FloatingPointError("non-finite velocity on unmasked points")
    return VelocityField(grid, v, mask, int(over.sum()))


def velocity_grid(psi: WaveFunction, params: PhysicalParams | None = None,
                  policy: NodePolicy | None = None) -> VelocityField:
    """Bohmian velocity on every grid point; masked where density < threshold."""
    params = params or psi.params
    a = psi.amplitudes
    d = gradient(a, psi.grid)
    num = a.real[None] * d.imag - a.imag[None] * d.real
    return _finish(psi.grid, num, a.real**2 + a.imag**2, params, policy)


def velocity_spinor_grid(psi: SpinorWaveFunction, params: PhysicalParams | None = None,
                         policy: NodePolicy | None = None) -> VelocityField:
    """Velocity from the two-component scalar product ``Im[psi^+ grad psi] / psi^+ psi``."""
    params = params or psi.params
    grid = psi.grid
    num = np.zeros((grid.dim,) + grid.shape)
    rho = np.zeros(grid.shape)
    for c in range(psi.amplitudes.shape[0]):
        a = psi.amplitudes[c]
        num = num + np.imag(np.conj(a)[None] * gradient(a, grid))
        rho = rho + np.abs(a) ** 2
    return _finish(grid, num, rho, params, policy)


def current_grid(psi: WaveFunction, params: PhysicalParams | None = None) -> np.ndarray:
    """Probability current ``(hbar/m) Im[conj(psi) grad psi]``, shape ``(dim, *shape)``."""
    params = params or psi.params
    a = psi.amplitudes
    d = gradient(a, psi.grid)
    hom = params.hbar_over_m()
    return np.stack([hom[k] * np.imag(np.conj(a) * d[k]) for k in range(psi.grid.dim)])


def series_from_states(states, times=None, potential=None) -> FrameSeries:
    """Wrap ready-made states (uniformly spaced in time) as a :class:`FrameSeries`."""
    states = list(states)
    grid, params = states[0].grid, states[0].params
    frames = np.stack([s.amplitudes for s in states])
    if times is None:
        times = np.array([s.time for s in states], dtype=float)
        if len(states) > 1 and np.all(times == times[0]):
            times = np.arange(len(states), dtype=float)
    times = np.asarray(times, dtype=float)
    spacing = float(times[1] - times[0]) if len(times) > 1 else 1.0
    spec = PropagatorSpec("split-step", dt=spacing, total_time=max(spacing, float(times[-1] - times[0])),
                          frame_stride=1)
    pot = np.zeros(grid.shape) if potential is None else np.asarray(potential, dtype=float)
    return FrameSeries(grid, params, frames, times, spec, pot)


def guidance_fields(series: FrameSeries) -> np.ndarray:
    """``(nframes, 1 + dim, *shape)`` array of psi and its derivatives; cached on the series."""
    cached = series._cache.get("guidance")
    if cached is not None:
        return cached
    grid = series.grid
    out = np.empty((len(series), 1 + grid.dim) + grid.shape, dtype=np.complex128)
    for i in range(len(series)):
        a = np.asarray(series.frames[i])
        out[i, 0] = a
        out[i, 1:] = gradient(a, grid)
    series._cache["guidance"] = out
    return out


def _check_span(series, t):
    t0, t1 = float(series.times[0]), float(series.times[-1])
    if not (t0 - 1e-12 <= t <= t1 + 1e-12):
        raise ValueError(f"t={t} outside the series span [{t0}, {t1}]")


def _check_points(grid, q):
    q = np.atleast_2d(np.asarray(q, dtype=float))
    if q.shape[1] != grid.dim:
        raise ValueError(f"points must have {grid.dim} coordinates")
    lo, hi = np.asarray(grid.lower), np.asarray(grid.upper)
    bad = np.any((q < lo) | (q >= hi), axis=1)
    if np.any(bad):
        raise ValueError(f"point {q[np.argmax(bad)].tolist()} outside the grid")
    return q


def node_threshold(series: FrameSeries, policy: NodePolicy | None = None) -> float:
    """Absolute density threshold for a series (uses the mean density of frame 0)."""
    policy = policy or NodePolicy()
    return policy.threshold(np.abs(np.asarray(series.frames[0])) ** 2)


def velocity_at(series: FrameSeries, t: float, q, policy: NodePolicy | None = None) -> np.ndarray:
    """Velocity at off-grid point(s) ``q`` and time ``t``.

    ``q`` of shape ``(dim,)`` returns ``(dim,)``; ``(n, dim)`` returns
    ``(n, dim)``.  Raises :class:`NodeEncounterError` if the interpolated
    density at any point is below the node threshold.
    """
    grid = series.grid
    single = np.ndim(q) == 1
    _check_span(series, t)
    pts = _check_points(grid, q)
    F = kernels.interpolate(guidance_fields(series), series.times, grid.lower, grid.dx, grid.shape,
                            grid.periodic, float(t), pts)
    psi = F[:, 0]
    # re^2 + im^2 rather than abs()**2: symmetric in the parts, so a quarter-turn phase is exact
    rho = psi.real**2 + psi.imag**2
    eps = node_threshold(series, policy)
    bad = ~(rho >= eps)
    if np.any(bad):
        i = int(np.argmax(bad))
        raise NodeEncounterError(pts[i], t, float(rho[i]))
    hom = series.params.hbar_over_m()
    # Im[conj(psi) dpsi] written out, so swapping or negating the parts is exact
    v = np.stack([hom[k] * (psi.real * F[:, 1 + k].imag - psi.imag * F[:, 1 + k].real) / rho
                  for k in range(grid.dim)], axis=1)
    return v[0] if single else v


@dataclass(frozen=True)
class NonlocalityResult:
    q1: float
    q2: np.ndarray
    velocities: np.ndarray
    spread: float


def nonlocality_probe(psi2: WaveFunction, q1: float, q2_list, policy: NodePolicy | None = None) -> NonlocalityResult:
    """Velocity of particle 1 at ``x1 = q1`` for each partner position ``x2`` in ``q2_list``.

    ``spread`` is ``max - min`` of the returned velocities; it vanishes for
    product states and not, in general, for entangled ones.
    """
    if psi2.grid.dim != 2:
        raise ValueError("nonlocality_probe needs a two-particle (2D) configuration grid")
    series = series_from_states([psi2], times=[psi2.time])
    q2 = np.asarray(q2_list, dtype=float).reshape(-1)
    pts = np.column_stack([np.full(q2.size, float(q1)), q2])
    v = velocity_at(series, psi2.time, pts, policy)[:, 0]
    return NonlocalityResult(float(q1), q2, v, float(v.max() - v.min()))


def continuity_residual(series: FrameSeries, i: int) -> np.ndarray:
    """``d rho/dt + div J`` at interior frame ``i`` (central difference in time)."""
    if not 0 < i < len(series) - 1:
        raise ValueError("continuity residual needs an interior frame")
    dt = series.frame_spacing
    rho_m = np.abs(np.asarray(series.frames[i - 1])) ** 2
    rho_p = np.abs(np.asarray(series.frames[i + 1])) ** 2
    J = current_grid(series.frame(i))
    div = sum(gradient(J[k], series.grid)[k] for k in range(series.grid.dim))
    return (rho_p - rho_m) / (2 * dt) + div
