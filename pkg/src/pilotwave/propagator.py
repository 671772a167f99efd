"""Time evolution of wave functions: Strang split-step Fourier and 1D Crank-Nicolson."""
from __future__ import annotations

import math
import tempfile
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.linalg import solve_banded

from . import io
from .state import Grid, PhysicalParams, Potential, WaveFunction, _tail_mass

__all__ = [
    "PropagatorError",
    "BoundaryContaminationError",
    "FrameSpacingWarning",
    "PropagatorSpec",
    "FrameSeries",
    "SplitStepper",
    "CrankNicolsonStepper",
    "step_split_spectral",
    "step_crank_nicolson",
    "evolve",
    "energy",
    "kinetic_phase",
]

#: abort when this much probability reaches the outermost cells
BOUNDARY_MASS_LIMIT = 1e-6
#: frames are held in memory up to this many bytes, then spilled to disk
FRAME_MEMORY_BUDGET = 512 * 1024**2
#: frame-to-frame change (modulo global phase) above which spacing is too coarse
FRAME_CHANGE_LIMIT = 0.1


class PropagatorError(RuntimeError):
    pass


class BoundaryContaminationError(PropagatorError):
    pass


class FrameSpacingWarning(UserWarning):
    pass


@dataclass(frozen=True)
class PropagatorSpec:
    method: str = "split-step"
    dt: float = 1e-3
    total_time: float = 1.0
    frame_stride: int = 10

    def __post_init__(self):
        if self.method not in ("split-step", "crank-nicolson"):
            raise ValueError(f"unknown propagation method {self.method!r}")
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if not self.total_time >= self.dt:
            raise ValueError("total_time must be at least dt")
        if int(self.frame_stride) < 1:
            raise ValueError("frame_stride must be >= 1")

    @property
    def frame_spacing(self) -> float:
        return self.dt * self.frame_stride

    @property
    def n_frames(self) -> int:
        # tolerate total_time being an exact multiple up to rounding
        return int(math.floor(self.total_time / self.frame_spacing + 1e-9)) + 1


def _potential_array(V, grid, params):
    if V is None:
        return np.zeros(grid.shape)
    if isinstance(V, Potential):
        return V.values(grid, params)
    v = np.asarray(V, dtype=float)
    if v.shape != grid.shape:
        raise ValueError(f"potential shape {v.shape} does not match grid {grid.shape}")
    return v


def kinetic_phase(grid: Grid, params: PhysicalParams, dt: float) -> np.ndarray:
    """``exp(-i * sum_k hbar k_k^2 / (2 m_k) * dt)`` on the FFT mode grid."""
    kin = np.zeros(grid.shape)
    for k, (kk, m) in enumerate(zip(grid.wavenumbers, params.masses)):
        sh = [1] * grid.dim
        sh[k] = -1
        kin = kin + (params.hbar * kk**2 / (2 * m)).reshape(sh)
    return np.exp(-1j * kin * dt)


class SplitStepper:
    """Strang splitting ``V/2 - T - V/2`` on a periodic grid."""

    def __init__(self, grid: Grid, params: PhysicalParams, V, dt: float):
        if not grid.periodic:
            raise PropagatorError("split-step propagation needs a periodic grid")
        self.V = _potential_array(V, grid, params)
        vmax = float(np.max(np.abs(self.V))) if self.V.size else 0.0
        if not dt * vmax / params.hbar < np.pi:
            raise PropagatorError(
                f"phase-wrap guard violated: dt*max|V|/hbar = {dt * vmax / params.hbar:.3g} >= pi"
            )
        self.dt = dt
        self.half_v = np.exp(-0.5j * self.V * dt / params.hbar)
        self.kin = kinetic_phase(grid, params, dt)

    def step(self, amps: np.ndarray) -> np.ndarray:
        a = self.half_v * amps
        a = np.fft.ifftn(self.kin * np.fft.fftn(a))
        a = self.half_v * a
        return a


class CrankNicolsonStepper:
    """Crank-Nicolson on a 1D grid with homogeneous Dirichlet walls.

    Unknowns are grid points 1..N-1; point 0 and the (absent) point N are
    walls where psi vanishes.
    """

    residual_tol = 1e-12

    def __init__(self, grid: Grid, params: PhysicalParams, V, dt: float):
        if grid.dim != 1:
            raise PropagatorError("Crank-Nicolson is implemented for 1D grids only")
        self.V = _potential_array(V, grid, params)
        dx = grid.dx[0]
        hb, m = params.hbar, params.masses[0]
        n = grid.shape[0] - 1
        c = hb**2 / (2 * m * dx**2)
        diag_h = 2 * c + self.V[1:]
        off_h = -c * np.ones(n - 1)
        z = 0.5j * dt / hb
        # banded storage for solve_banded: rows = upper, diag, lower
        self.lhs = np.zeros((3, n), dtype=complex)
        self.lhs[0, 1:] = z * off_h
        self.lhs[1] = 1 + z * diag_h
        self.lhs[2, :-1] = z * off_h
        self.rhs_diag = 1 - z * diag_h
        self.rhs_off = -z * off_h
        self.dt = dt

    def _apply(self, diag, off, x):
        y = diag * x
        y[:-1] += off * x[1:]
        y[1:] += off * x[:-1]
        return y

    def step(self, amps: np.ndarray) -> np.ndarray:
        x = amps[1:]
        b = self._apply(self.rhs_diag, self.rhs_off, x)
        try:
            y = solve_banded((1, 1), self.lhs, b, check_finite=False)
        except np.linalg.LinAlgError as exc:
            raise PropagatorError(f"Crank-Nicolson solve failed: {exc}") from exc
        lhs_off = self.lhs[0, 1:]
        r = self._apply(self.lhs[1], lhs_off, y) - b
        scale = max(float(np.max(np.abs(b))), 1e-300)
        if float(np.max(np.abs(r))) / scale > self.residual_tol:
            raise PropagatorError("Crank-Nicolson linear solve did not reach residual tolerance")
        out = np.empty_like(amps)
        out[0] = 0.0
        out[1:] = y
        return out


def _stepper(method, grid, params, V, dt):
    if method == "split-step":
        return SplitStepper(grid, params, V, dt)
    return CrankNicolsonStepper(grid, params, V, dt)


def step_split_spectral(psi: WaveFunction, V, dt: float) -> WaveFunction:
    """One Strang split-step of length ``dt``."""
    st = SplitStepper(psi.grid, psi.params, V, dt)
    out = st.step(psi.amplitudes)
    if not np.all(np.isfinite(out)):
        raise PropagatorError("non-finite amplitudes after split step")
    return psi.with_amplitudes(out, time=psi.time + dt)


def step_crank_nicolson(psi: WaveFunction, V, dt: float) -> WaveFunction:
    """One Crank-Nicolson step of length ``dt`` (1D, Dirichlet walls)."""
    st = CrankNicolsonStepper(psi.grid, psi.params, V, dt)
    return psi.with_amplitudes(st.step(psi.amplitudes), time=psi.time + dt)


def energy(psi: WaveFunction, V=None) -> float:
    """``<psi|H|psi>`` with a spectral kinetic term (periodic) or 3-point Laplacian (Dirichlet)."""
    grid, params = psi.grid, psi.params
    a = psi.amplitudes
    v = _potential_array(V, grid, params)
    if grid.periodic:
        ak = np.fft.fftn(a)
        kin = np.zeros(grid.shape)
        for k, (kk, m) in enumerate(zip(grid.wavenumbers, params.masses)):
            sh = [1] * grid.dim
            sh[k] = -1
            kin = kin + (params.hbar**2 * kk**2 / (2 * m)).reshape(sh)
        t = float(np.sum(kin * np.abs(ak) ** 2) / grid.size * grid.cell_volume)
    else:
        dx = grid.dx[0]
        lap = np.zeros_like(a)
        p = np.concatenate([a, [0.0]])
        lap[1:] = (p[2:] - 2 * p[1:-1] + p[:-2]) / dx**2
        t = float(np.real(np.vdot(a, -params.hbar**2 / (2 * params.masses[0]) * lap)) * dx)
    return t + float(np.sum(v * np.abs(a) ** 2) * grid.cell_volume)


@dataclass(eq=False)
class FrameSeries:
    """Stored snapshots ``psi(t_i)`` on a uniform time lattice.

    ``frames`` may be an in-memory array or a read-only memory map.
    """

    grid: Grid
    params: PhysicalParams
    frames: np.ndarray
    times: np.ndarray
    spec: PropagatorSpec
    potential: np.ndarray
    max_frame_change: float = 0.0
    _cache: dict = field(default_factory=dict, repr=False)

    def __len__(self):
        return len(self.times)

    @property
    def boundary(self) -> str:
        return self.grid.boundary

    @property
    def frame_spacing(self) -> float:
        return float(self.times[1] - self.times[0]) if len(self.times) > 1 else self.spec.frame_spacing

    def frame(self, i: int) -> WaveFunction:
        return WaveFunction(self.grid, self.params, np.asarray(self.frames[i]), float(self.times[i]))

    def index_of(self, t: float, tol: float = 1e-9) -> int:
        i = int(round((t - self.times[0]) / self.frame_spacing)) if len(self.times) > 1 else 0
        if not 0 <= i < len(self.times) or abs(self.times[i] - t) > tol * max(1.0, abs(t)):
            raise ValueError(f"t={t} is not a frame time")
        return i

    def save(self, path, every: int = 1) -> Path:
        """Write the frames (every ``every``-th one) as a field directory plus ``potential.bin``."""
        extra = {
            "params": {"hbar": self.params.hbar, "masses": list(self.params.masses)},
            "propagator": {
                "method": self.spec.method,
                "dt": self.spec.dt,
                "total_time": self.spec.total_time,
                "frame_stride": self.spec.frame_stride,
            },
        }
        extra["propagator"]["frame_stride"] *= int(every)
        path = io.write_fields(path, self.frames[::every], "complex-scalar", self.grid, self.times[::every], extra)
        np.ascontiguousarray(self.potential, dtype="<f8").tofile(Path(path) / "potential.bin")
        return path

    @classmethod
    def load(cls, path, mmap: bool = True) -> "FrameSeries":
        from .state import GridSpec, make_grid

        data, m = io.read_fields(path, mmap=mmap)
        g = m["grid"]
        grid = make_grid(GridSpec(tuple(g["lower"]), tuple(g["upper"]), tuple(g["points"]), g["boundary"]))
        params = PhysicalParams(m["params"]["hbar"], tuple(m["params"]["masses"]))
        spec = PropagatorSpec(**m["propagator"])
        pot_file = Path(path) / "potential.bin"
        pot = np.fromfile(pot_file, dtype="<f8").reshape(grid.shape) if pot_file.exists() else np.zeros(grid.shape)
        return cls(grid, params, data, np.asarray(m["times"]), spec, pot)


def _phase_free_change(a, b, dv):
    ov = abs(np.vdot(a, b)) * dv
    return math.sqrt(max(0.0, 2.0 - 2.0 * ov))


def evolve(psi0: WaveFunction, V, spec: PropagatorSpec, *, memory_budget: int = FRAME_MEMORY_BUDGET,
           spill_dir=None, boundary_limit: float = BOUNDARY_MASS_LIMIT) -> FrameSeries:
    """Propagate ``psi0`` and store frames at ``t0 + i * dt * frame_stride``.

    Raises :class:`BoundaryContaminationError` when more than
    ``boundary_limit`` probability (beyond what was there at the start)
    reaches the two outermost cells of a periodic grid.  Frames beyond ``memory_budget`` bytes are written to a
    memory-mapped file in ``spill_dir`` (a temporary directory by default).
    """
    grid, params = psi0.grid, psi0.params
    if spec.method == "crank-nicolson" and grid.boundary != "dirichlet":
        raise PropagatorError("Crank-Nicolson needs a grid with boundary='dirichlet'")
    if spec.method == "split-step" and not grid.periodic:
        raise PropagatorError("split-step needs a periodic grid")
    stepper = _stepper(spec.method, grid, params, V, spec.dt)
    nf = spec.n_frames
    shape = (nf, *grid.shape)
    nbytes = int(np.prod(shape)) * 16
    if nbytes > memory_budget:
        spill = Path(spill_dir) if spill_dir else Path(tempfile.mkdtemp(prefix="pilotwave-frames-"))
        spill.mkdir(parents=True, exist_ok=True)
        frames = np.lib.format.open_memmap(spill / "frames.npy", mode="w+", dtype="<c16", shape=shape)
    else:
        frames = np.empty(shape, dtype=np.complex128)
    times = psi0.time + spec.frame_spacing * np.arange(nf)
    a = np.array(psi0.amplitudes)
    frames[0] = a
    max_change = 0.0
    dv = grid.cell_volume
    # states that are periodic by construction (plane waves) start with mass
    # at the edges; only growth beyond the initial tail counts
    tail0 = _tail_mass(grid, np.abs(a) ** 2) if grid.periodic else 0.0
    for i in range(1, nf):
        for _ in range(spec.frame_stride):
            a = stepper.step(a)
        if not np.all(np.isfinite(a)):
            raise PropagatorError(f"non-finite amplitudes by t={times[i]:.6g}")
        if grid.periodic:
            tail = _tail_mass(grid, np.abs(a) ** 2)
            if tail - tail0 > boundary_limit:
                raise BoundaryContaminationError(
                    f"boundary mass {tail:.2e} exceeds {boundary_limit:g} at t={times[i]:.6g}"
                )
        max_change = max(max_change, _phase_free_change(frames[i - 1], a, dv))
        frames[i] = a
    if max_change > FRAME_CHANGE_LIMIT:
        warnings.warn(
            f"frame-to-frame change {max_change:.3f} exceeds {FRAME_CHANGE_LIMIT}; "
            "reduce frame_stride for trajectory work",
            FrameSpacingWarning,
            stacklevel=2,
        )
    if isinstance(frames, np.memmap):
        frames.flush()
    pot = np.ascontiguousarray(stepper.V)
    return FrameSeries(grid, params, frames, times, spec, pot, max_change)
