"""Amplitude/phase decomposition, quantum potential and classical comparisons.

The quantum potential and force computed here are diagnostics: trajectories
in :mod:`pilotwave.ensemble` are driven by the first-order velocity field,
never by the force.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from . import kernels
from .guidance import NodeEncounterError, NodePolicy, gradient, laplacian, node_threshold, velocity_at
from .propagator import FrameSeries, PropagatorSpec, evolve
from .state import Grid, GridSpec, PhysicalParams, Potential, WaveFunction, init_gaussian, make_grid

__all__ = [
    "PolarFields",
    "ComponentWarning",
    "ClassicalPath",
    "BoundaryExitError",
    "polar_decompose",
    "quantum_potential",
    "quantum_force",
    "hj_residual",
    "second_order_trajectory",
    "classical_trajectory",
    "ClassicalLimitScenario",
    "classical_limit_study",
]


class ComponentWarning(UserWarning):
    """The valid region splits into several components; phases are comparable only within one."""


class BoundaryExitError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class PolarFields:
    R: np.ndarray
    S: np.ndarray  # NaN off the mask
    U: np.ndarray  # NaN off the mask
    mask: np.ndarray
    labels: np.ndarray  # component id per point, 0 off the mask
    n_components: int
    hbar: float

    def reconstruct(self) -> np.ndarray:
        return np.where(self.mask, self.R * np.exp(1j * np.nan_to_num(self.S) / self.hbar), 0.0)


def _wrap(d):
    """Map phase differences into (-pi, pi]."""
    return np.pi - np.mod(np.pi - d, 2 * np.pi)


def _flood_unwrap(phase, mask, labels, seeds):
    """Unwrap ``phase`` by breadth-first wavefronts from each component seed.

    Every newly reached point takes its phase from the first neighbour (in
    axis order, minus before plus) on the previous wavefront.
    """
    out = np.full(phase.shape, np.nan)
    visited = np.zeros(phase.shape, dtype=bool)
    for seed in seeds:
        out[seed] = phase[seed]
        visited[seed] = True
    front = np.zeros(phase.shape, dtype=bool)
    for seed in seeds:
        front[seed] = True
    ndim = phase.ndim
    while front.any():
        new_front = np.zeros_like(front)
        for axis in range(ndim):
            for shift in (1, -1):
                # candidate points whose neighbour at -shift lies on the front
                src = np.roll(front, shift, axis=axis)
                src_val = np.roll(out, shift, axis=axis)
                src_phase = np.roll(phase, shift, axis=axis)
                # disallow wrap-around neighbours
                edge = [slice(None)] * ndim
                edge[axis] = slice(0, 1) if shift == 1 else slice(-1, None)
                src[tuple(edge)] = False
                cand = src & mask & ~visited & ~new_front
                if cand.any():
                    out[cand] = src_val[cand] + _wrap(phase[cand] - src_phase[cand])
                    new_front |= cand
        visited |= new_front
        front = new_front
    return out


def polar_decompose(psi: WaveFunction, policy: NodePolicy | None = None,
                    params: PhysicalParams | None = None) -> PolarFields:
    """``psi = R exp(iS/hbar)`` with ``S`` unwrapped over the valid (non-node) region.

    Each connected component of the mask is unwrapped from its own density
    maximum; a :class:`ComponentWarning` is issued when there is more than
    one, since relative phase offsets between components are undetermined.
    """
    policy = policy or NodePolicy()
    params = params or psi.params
    a = psi.amplitudes
    rho = np.abs(a) ** 2
    mask = rho >= policy.threshold(rho)
    labels, ncomp = ndimage.label(mask)
    if ncomp > 1:
        warnings.warn(f"valid region has {ncomp} components; S is comparable only within one",
                      ComponentWarning, stacklevel=2)
    seeds = []
    for c in range(1, ncomp + 1):
        r = np.where(labels == c, rho, -1.0)
        seeds.append(np.unravel_index(int(np.argmax(r)), rho.shape))
    phase = np.angle(a)
    unwrapped = _flood_unwrap(phase, mask, labels, seeds)
    turns = np.round((unwrapped - phase) / (2 * np.pi))
    S = np.where(mask, params.hbar * (phase + 2 * np.pi * np.nan_to_num(turns)), np.nan)
    R = np.abs(a)
    U = _quantum_potential(R, mask, psi.grid, params)
    return PolarFields(R, S, U, mask, labels, int(ncomp), params.hbar)


def _quantum_potential(R, mask, grid, params):
    U = np.zeros(grid.shape)
    safe = np.where(mask, R, 1.0)
    for k, m in enumerate(params.masses):
        U = U - params.hbar**2 / (2 * m) * laplacian(R, grid, k) / safe
    return np.where(mask, U, np.nan)


def quantum_potential(psi: WaveFunction, params: PhysicalParams | None = None,
                      policy: NodePolicy | None = None) -> np.ndarray:
    """``U = -sum_k hbar^2/(2 m_k) lap_k R / R`` on the grid (NaN near nodes)."""
    params = params or psi.params
    policy = policy or NodePolicy()
    R = np.abs(psi.amplitudes)
    mask = R**2 >= policy.threshold(R**2)
    U = _quantum_potential(R, mask, psi.grid, params)
    if not np.all(np.isfinite(U[mask])):
        raise FloatingPointError("non-finite quantum potential on valid points")
    return U


# -- off-grid force -----------------------------------------------------------

def _amplitude_fields(series: FrameSeries, i: int) -> np.ndarray:
    """Fields ``[R, d_j R, d_kk R, d_j d_kk R]`` for frame ``i`` (cached)."""
    cache = series._cache.setdefault("amplitude", {})
    if i in cache:
        return cache[i]
    grid = series.grid
    d = grid.dim
    R = np.abs(np.asarray(series.frames[i]))
    dR = gradient(R, grid)
    lap = np.stack([laplacian(R, grid, k) for k in range(d)])
    dlap = np.stack([gradient(lap[k], grid) for k in range(d)])  # [k, j]
    fields = [R] + [dR[j] for j in range(d)] + [lap[k] for k in range(d)]
    fields += [dlap[k, j] for k in range(d) for j in range(d)]
    out = np.stack(fields).astype(np.complex128)
    if len(cache) > 64:
        cache.clear()
    cache[i] = out
    return out


def _bracket(series, t):
    nf = len(series)
    if nf == 1:
        return [0], np.asarray(series.times[:1], dtype=float)
    x = (t - series.times[0]) / series.frame_spacing
    if x < -1e-9 or x > nf - 1 + 1e-9:
        raise ValueError(f"t={t} outside the series span")
    j = min(max(int(math.floor(x)), 0), nf - 2)
    return [j, j + 1], np.asarray(series.times[j:j + 2], dtype=float)


def quantum_force(series: FrameSeries, t: float, q, params: PhysicalParams | None = None,
                  policy: NodePolicy | None = None) -> np.ndarray:
    """``-grad U`` at ``(t, q)``, composed from interpolated R and its derivatives.

    Accepts one point ``(dim,)`` or many ``(n, dim)``.
    """
    grid = series.grid
    params = params or series.params
    single = np.ndim(q) == 1
    pts = np.atleast_2d(np.asarray(q, dtype=float))
    idx, times = _bracket(series, float(t))
    fields = np.stack([_amplitude_fields(series, i) for i in idx])
    F = kernels.interpolate(fields, times, grid.lower, grid.dx, grid.shape, grid.periodic, float(t), pts).real
    d = grid.dim
    R = F[:, 0]
    eps = node_threshold(series, policy)
    bad = ~(R * R >= eps)
    if np.any(bad):
        i = int(np.argmax(bad))
        raise NodeEncounterError(pts[i], t, float(R[i] ** 2))
    dR = F[:, 1:1 + d]
    lap = F[:, 1 + d:1 + 2 * d]
    dlap = F[:, 1 + 2 * d:].reshape(-1, d, d)  # [n, k, j]
    force = np.zeros_like(pts)
    for k, m in enumerate(params.masses):
        c = params.hbar**2 / (2 * m)
        for j in range(d):
            force[:, j] += c * (dlap[:, k, j] / R - lap[:, k] * dR[:, j] / (R * R))
    return force[0] if single else force


def _potential_gradient_fields(series: FrameSeries) -> np.ndarray:
    g = series._cache.get("grad_v")
    if g is None:
        grid = series.grid
        gv = np.gradient(np.asarray(series.potential, dtype=float), *grid.dx, edge_order=2)
        if grid.dim == 1:
            gv = [gv]
        g = np.stack([np.stack(gv)]).astype(np.complex128)
        series._cache["grad_v"] = g
    return g


def _classical_force(series, pts):
    grid = series.grid
    g = _potential_gradient_fields(series)
    return -kernels.interpolate(g, series.times[:1], grid.lower, grid.dx, grid.shape, grid.periodic,
                                float(series.times[0]), pts).real


def hj_residual(series: FrameSeries, t: float, policy: NodePolicy | None = None) -> np.ndarray:
    """Residual of ``dS/dt + |grad S|^2/2m + V + U`` at interior frame time ``t``.

    ``dS/dt`` is a central difference of the unwrapped phase between the
    neighbouring frames; ``grad S`` uses second-order differences.  NaN off
    the valid region.
    """
    i = series.index_of(t)
    if not 0 < i < len(series) - 1:
        raise ValueError("hj_residual needs an interior frame time")
    params = series.params
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ComponentWarning)
        pm = polar_decompose(series.frame(i - 1), policy)
        p0 = polar_decompose(series.frame(i), policy)
        pp = polar_decompose(series.frame(i + 1), policy)
    if not pm.n_components == p0.n_components == pp.n_components:
        raise ValueError("phase components differ between adjacent frames")
    hb = params.hbar
    dS = pp.S - pm.S
    # unwrapping anchors differ between frames by whole turns
    raw = hb * _wrap(np.angle(np.asarray(series.frames[i + 1])) - np.angle(np.asarray(series.frames[i - 1])))
    for c in range(1, p0.n_components + 1):
        sel = (p0.labels == c) & np.isfinite(dS)
        if sel.any():
            turns = np.round(np.median((dS[sel] - raw[sel]) / (2 * np.pi * hb)))
            dS[p0.labels == c] -= 2 * np.pi * hb * turns
    dSdt = dS / (2 * series.frame_spacing)
    gS = np.gradient(p0.S, *series.grid.dx, edge_order=2)
    if series.grid.dim == 1:
        gS = [gS]
    kin = sum(g**2 / (2 * m) for g, m in zip(gS, params.masses))
    res = dSdt + kin + series.potential + p0.U
    return np.where(p0.mask, res, np.nan)


@dataclass
class SecondOrderPath:
    times: np.ndarray
    q: np.ndarray  # (nframes, dim)
    v: np.ndarray
    status: str = "ok"


def second_order_trajectory(series: FrameSeries, q0, params: PhysicalParams | None = None, *,
                            v0=None, base_dt: float = 1e-2, policy: NodePolicy | None = None) -> SecondOrderPath:
    """Integrate ``m d2Q/dt2 = -grad(V + U)`` with RK4, recording at frame times.

    The initial velocity defaults to the guiding-field value at ``q0``;
    passing a different ``v0`` shows that the second-order law alone does not
    reproduce the guided motion.
    """
    params = params or series.params
    grid = series.grid
    q = np.asarray(q0, dtype=float).reshape(grid.dim)
    t0 = float(series.times[0])
    v = velocity_at(series, t0, q, policy) if v0 is None else np.asarray(v0, dtype=float).reshape(grid.dim)
    m = np.asarray(params.masses)
    spacing = series.frame_spacing
    sub = max(1, int(math.ceil(spacing / base_dt - 1e-9)))
    h = spacing / sub
    nf = len(series)
    Q = np.full((nf, grid.dim), np.nan)
    Vv = np.full((nf, grid.dim), np.nan)
    Q[0], Vv[0] = q, v

    def acc(t, x):
        x = np.asarray(x)
        if grid.periodic:
            x = np.asarray(grid.lower) + np.mod(x - np.asarray(grid.lower), np.asarray(grid.lengths))
        elif not grid.contains(x):
            raise BoundaryExitError(f"path left the grid at t={t:.6g}")
        f = quantum_force(series, t, x, params, policy) + _classical_force(series, x[None])[0]
        return f / m

    status = "ok"
    try:
        for j in range(nf - 1):
            for s in range(sub):
                t = t0 + j * spacing + s * h
                k1x, k1v = v, acc(t, q)
                k2x, k2v = v + 0.5 * h * k1v, acc(t + 0.5 * h, q + 0.5 * h * k1x)
                k3x, k3v = v + 0.5 * h * k2v, acc(t + 0.5 * h, q + 0.5 * h * k2x)
                k4x, k4v = v + h * k3v, acc(t + h, q + h * k3x)
                q = q + h / 6.0 * (k1x + 2 * k2x + 2 * k3x + k4x)
                v = v + h / 6.0 * (k1v + 2 * k2v + 2 * k3v + k4v)
            Q[j + 1], Vv[j + 1] = q, v
    except NodeEncounterError:
        status = "node_abort"
    except BoundaryExitError:
        status = "boundary_exit"
    return SecondOrderPath(np.asarray(series.times, dtype=float), Q, Vv, status)


@dataclass
class ClassicalPath:
    times: np.ndarray
    q: np.ndarray
    p: np.ndarray
    energy: np.ndarray


def classical_trajectory(V, q0, p0, params: PhysicalParams, T: float, dt: float, grid: Grid) -> ClassicalPath:
    """Newtonian path ``m d2Q/dt2 = -grad V`` by RK4 on the interpolated grid potential.

    Raises :class:`BoundaryExitError` if the path leaves the grid.
    """
    vals = V.values(grid, params) if isinstance(V, Potential) else np.asarray(V, dtype=float)
    gv = np.gradient(vals, *grid.dx, edge_order=2)
    if grid.dim == 1:
        gv = [gv]
    gfields = np.stack([np.stack(gv)]).astype(np.complex128)
    vfield = vals[None, None].astype(np.complex128)
    lower, dx, shape = grid.lower, grid.dx, grid.shape
    m = np.asarray(params.masses)
    t0 = np.zeros(1)

    def force(x):
        if not grid.contains(x):
            raise BoundaryExitError(f"classical path left the grid at q={x.tolist()}")
        return -kernels.interpolate(gfields, t0, lower, dx, shape, False, 0.0, x[None]).real[0]

    def pot(x):
        return float(kernels.interpolate(vfield, t0, lower, dx, shape, False, 0.0, x[None]).real[0, 0])

    nsteps = int(round(T / dt))
    q = np.asarray(q0, dtype=float).reshape(grid.dim)
    p = np.asarray(p0, dtype=float).reshape(grid.dim)
    qs = np.empty((nsteps + 1, grid.dim))
    ps = np.empty_like(qs)
    en = np.empty(nsteps + 1)
    qs[0], ps[0] = q, p
    en[0] = float(np.sum(p**2 / (2 * m))) + pot(q)
    for n in range(nsteps):
        k1q, k1p = p / m, force(q)
        k2q, k2p = (p + 0.5 * dt * k1p) / m, force(q + 0.5 * dt * k1q)
        k3q, k3p = (p + 0.5 * dt * k2p) / m, force(q + 0.5 * dt * k2q)
        k4q, k4p = (p + dt * k3p) / m, force(q + dt * k3q)
        q = q + dt / 6.0 * (k1q + 2 * k2q + 2 * k3q + k4q)
        p = p + dt / 6.0 * (k1p + 2 * k2p + 2 * k3p + k4p)
        qs[n + 1], ps[n + 1] = q, p
        en[n + 1] = float(np.sum(p**2 / (2 * m))) + pot(q)
    return ClassicalPath(dt * np.arange(nsteps + 1), qs, ps, en)


@dataclass
class ClassicalLimitScenario:
    """1D packet in a potential whose strength scales with the mass.

    With ``V = scale * potential`` and the packet's mean velocity held fixed,
    the Newtonian path is the same for every mass scale, while quantum
    effects shrink as ``hbar/m``.  The de Broglie wavelength shrinks as
    ``1/scale`` too, so frame spacing (and ``dt`` if needed) is divided by
    the scale to keep time interpolation of the frames accurate.

    The packet width is ``sigma * scale**(-width_exponent)``.  With the
    default 1/2 the packet occupies a phase-space cell of fixed shape in
    units of ``hbar/m``; at fixed width the ensemble folds at the turning
    points and the guided path from the packet centre does not approach the
    Newtonian one however heavy the particle.
    """

    grid: GridSpec
    potential: Potential
    center: float
    sigma: float
    velocity: float = 0.0
    hbar: float = 1.0
    mass: float = 1.0
    dt: float = 5e-4
    total_time: float = 3.0
    frame_spacing: float = 1e-2
    width_exponent: float = 0.5
    policy: NodePolicy = field(default_factory=NodePolicy)
    force_samples: int = 200


def _ladder_steps(sc, vmax, s):
    spacing = sc.frame_spacing / s
    dt = min(sc.dt, spacing, 0.5 * math.pi * sc.hbar / vmax if vmax > 0 else sc.dt)
    stride = max(1, int(math.ceil(spacing / dt - 1e-9)))
    return spacing / stride, stride


def classical_limit_study(scenario: ClassicalLimitScenario, scale_factors=(1, 10, 100)) -> list[dict]:
    """For each mass scale: max |Bohmian - Newtonian| from the packet centre and
    the ratio ``max|F_quantum| / max|F_classical|`` along the Bohmian path."""
    from .ensemble import EnsembleSpec, integrate_trajectory

    sc = scenario
    grid = make_grid(sc.grid)
    rows = []
    for s in scale_factors:
        s = float(s)
        m = sc.mass * s
        params = PhysicalParams(sc.hbar, (m,))
        pot = Potential(sc.potential.kind, sc.potential.args, sc.potential.scale * s)
        sigma = sc.sigma * s ** (-sc.width_exponent)
        psi = init_gaussian(grid, sc.center, sigma, m * sc.velocity / sc.hbar, params)
        vmax = float(np.max(np.abs(pot.values(grid, params))))
        dt, stride = _ladder_steps(sc, vmax, s)
        series = evolve(psi, pot, PropagatorSpec("split-step", dt, sc.total_time, stride))
        spacing = series.frame_spacing
        ens = EnsembleSpec(n_trajectories=1, base_dt=spacing, policy=sc.policy)
        tr = integrate_trajectory(series, [sc.center], ens)
        ok = tr.status[0] == kernels.OK
        qb = tr.paths[0, :, 0]
        v0 = velocity_at(series, series.times[0], [sc.center], sc.policy)[0]
        sub = max(1, int(math.ceil(spacing / sc.dt - 1e-9)))
        cl = classical_trajectory(pot, [sc.center], [m * v0], params,
                                  spacing * (len(series) - 1), spacing / sub, grid)
        qn = cl.q[::sub, 0]
        dev = float(np.nanmax(np.abs(qb - qn))) if ok else float("nan")
        idx = np.flatnonzero(np.isfinite(qb))
        idx = idx[:: max(1, len(idx) // sc.force_samples)]
        pts = qb[idx][:, None]
        fq = np.array([abs(quantum_force(series, series.times[i], p, params, sc.policy)[0])
                       for i, p in zip(idx, pts)])
        fc = np.abs(_classical_force(series, pts)[:, 0])
        ratio = float(fq.max() / fc.max()) if fc.max() > 0 else float("inf")
        rows.append({
            "scale": s, "mass": m, "sigma": sigma, "max_deviation": dev, "force_ratio": ratio,
            "frame_spacing": spacing, "dt": dt, "status": "ok" if ok else "failed",
        })
    return rows
