"""Configuration-space grids, wave functions and potentials.

Everything here is immutable after construction: amplitude arrays are
flagged read-only so frames and fields can be shared freely between
workers.
"""
from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

__all__ = [
    "GridError",
    "StateError",
    "BoundaryTailWarning",
    "PhysicalParams",
    "GridSpec",
    "Grid",
    "WaveFunction",
    "SpinorWaveFunction",
    "Potential",
    "make_grid",
    "init_gaussian",
    "init_plane_wave",
    "superpose",
    "norm",
    "inner",
    "density",
]

#: default cap on the total number of grid points
MAX_GRID_POINTS = 1 << 22
#: initial packets may not put more than this much probability near the edge
TAIL_MASS_LIMIT = 1e-10


class GridError(ValueError):
    """Invalid grid specification."""


class StateError(ValueError):
    """Invalid wave-function construction or algebra."""


class BoundaryTailWarning(UserWarning):
    """An initial packet has non-negligible mass at the grid boundary."""


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class PhysicalParams:
    hbar: float = 1.0
    masses: tuple[float, ...] = (1.0,)

    def __post_init__(self):
        object.__setattr__(self, "masses", tuple(float(m) for m in self.masses))
        if not self.hbar > 0:
            raise ValueError(f"hbar must be positive, got {self.hbar}")
        if not self.masses or any(not m > 0 for m in self.masses):
            raise ValueError(f"masses must all be positive, got {self.masses}")

    @classmethod
    def natural(cls, dim: int) -> "PhysicalParams":
        return cls(1.0, (1.0,) * dim)

    def hbar_over_m(self) -> np.ndarray:
        return self.hbar / np.asarray(self.masses)


@dataclass(frozen=True)
class GridSpec:
    """Declarative grid description.

    ``boundary`` is ``"periodic"`` (spectral propagation) or ``"dirichlet"``
    (hard walls just outside ``lower`` and at ``upper``; 1D Crank-Nicolson).
    """

    lower: tuple[float, ...]
    upper: tuple[float, ...]
    points: tuple[int, ...]
    boundary: str = "periodic"
    max_points: int = MAX_GRID_POINTS

    @property
    def dim(self) -> int:
        return len(self.points)


@dataclass(frozen=True, eq=False)
class Grid:
    lower: tuple[float, ...]
    upper: tuple[float, ...]
    shape: tuple[int, ...]
    boundary: str

    def __post_init__(self):
        # derived, cached arrays
        axes = tuple(
            _readonly(lo + self.dx[k] * np.arange(n))
            for k, (lo, n) in enumerate(zip(self.lower, self.shape))
        )
        wavenumbers = tuple(
            _readonly(2 * np.pi * np.fft.fftfreq(n, d=self.dx[k]))
            for k, n in enumerate(self.shape)
        )
        object.__setattr__(self, "axes", axes)
        object.__setattr__(self, "wavenumbers", wavenumbers)

    @property
    def dim(self) -> int:
        return len(self.shape)

    @property
    def dx(self) -> tuple[float, ...]:
        return tuple((hi - lo) / n for lo, hi, n in zip(self.lower, self.upper, self.shape))

    @property
    def lengths(self) -> tuple[float, ...]:
        return tuple(hi - lo for lo, hi in zip(self.lower, self.upper))

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    @property
    def cell_volume(self) -> float:
        return float(np.prod(self.dx))

    @property
    def periodic(self) -> bool:
        return self.boundary == "periodic"

    def mesh(self) -> tuple[np.ndarray, ...]:
        return np.meshgrid(*self.axes, indexing="ij")

    def contains(self, q: Sequence[float]) -> bool:
        q = np.asarray(q, dtype=float).reshape(-1)
        if q.size != self.dim:
            return False
        return bool(np.all(q >= self.lower) and np.all(q < self.upper))

    def same_as(self, other: "Grid") -> bool:
        return (
            self.shape == other.shape
            and self.lower == other.lower
            and self.upper == other.upper
            and self.boundary == other.boundary
        )

    def to_dict(self) -> dict:
        return {
            "lower": list(self.lower),
            "upper": list(self.upper),
            "points": list(self.shape),
            "boundary": self.boundary,
        }

    def __repr__(self):
        return f"Grid(lower={self.lower}, upper={self.upper}, shape={self.shape}, boundary={self.boundary!r})"


def make_grid(spec: GridSpec) -> Grid:
    """Build a uniform tensor-product grid from ``spec``.

    Spacing along axis ``k`` is ``(upper - lower) / N_k``; the upper bound is
    excluded from the point set.
    """
    dim = spec.dim
    if not 1 <= dim <= 3:
        raise GridError(f"grid dimension must be 1-3, got {dim}")
    if len(spec.lower) != dim or len(spec.upper) != dim:
        raise GridError("lower/upper/points must all have one entry per axis")
    for k, (lo, hi, n) in enumerate(zip(spec.lower, spec.upper, spec.points)):
        if not hi > lo:
            raise GridError(f"axis {k}: upper bound {hi} must exceed lower bound {lo}")
        if n < 16:
            raise GridError(f"axis {k}: need at least 16 points, got {n}")
        if n & (n - 1):
            raise GridError(f"axis {k}: point count {n} is not a power of two")
    total = int(np.prod(spec.points))
    if total > spec.max_points:
        raise GridError(f"grid has {total} points, above the memory cap of {spec.max_points}")
    if spec.boundary not in ("periodic", "dirichlet"):
        raise GridError(f"unknown boundary {spec.boundary!r}")
    return Grid(
        tuple(float(v) for v in spec.lower),
        tuple(float(v) for v in spec.upper),
        tuple(int(v) for v in spec.points),
        spec.boundary,
    )


def _integrate(grid: Grid, values: np.ndarray) -> float:
    return float(np.sum(values) * grid.cell_volume)


@dataclass(frozen=True, eq=False)
class WaveFunction:
    """Complex amplitude field on a grid.

    Use :meth:`from_array` to build one; it normalizes by default.
    """

    grid: Grid
    params: PhysicalParams
    amplitudes: np.ndarray
    time: float = 0.0
    meta: dict = field(default_factory=dict)

    ncomp = 1

    def __post_init__(self):
        amps = np.asarray(self.amplitudes, dtype=np.complex128)
        expected = self._expected_shape()
        if amps.shape != expected:
            raise StateError(f"amplitude shape {amps.shape} does not match grid shape {expected}")
        if len(self.params.masses) != self.grid.dim:
            raise StateError(
                f"{len(self.params.masses)} masses given for a {self.grid.dim}-dimensional grid"
            )
        if not np.all(np.isfinite(amps)):
            raise StateError("amplitudes contain non-finite values")
        object.__setattr__(self, "amplitudes", _readonly(amps))

    def _expected_shape(self):
        return self.grid.shape

    @classmethod
    def from_array(cls, grid, params, amplitudes, time=0.0, normalize=True, **meta):
        amps = np.array(amplitudes, dtype=np.complex128)
        if grid.boundary == "dirichlet":
            amps = _dirichlet_clean(amps, grid)
        if normalize:
            rho = np.abs(amps) ** 2
            n = np.sqrt(_integrate(grid, rho if rho.ndim == grid.dim else rho.sum(0)))
            if not n > 1e-12 or not np.isfinite(n):
                raise StateError(f"cannot normalize a state with norm {n:g}")
            amps = amps / n
        return cls(grid, params, amps, float(time), dict(meta))

    def with_amplitudes(self, amplitudes, time=None, normalize=False):
        t = self.time if time is None else time
        return type(self).from_array(self.grid, self.params, amplitudes, t, normalize=normalize)

    def density(self) -> np.ndarray:
        return density(self)

    def norm(self) -> float:
        return norm(self)

    def __mul__(self, c):
        return self.with_amplitudes(self.amplitudes * complex(c))

    __rmul__ = __mul__


def _dirichlet_clean(amps, grid):
    # wall node at index 0 of every axis
    if grid.dim == 1 and amps.ndim == 1:
        amps = amps.copy()
        amps[0] = 0.0
    return amps


@dataclass(frozen=True, eq=False)
class SpinorWaveFunction(WaveFunction):
    """Two-component wave function; amplitudes have shape ``(2, *grid.shape)``."""

    ncomp = 2

    def _expected_shape(self):
        return (2,) + self.grid.shape

    @classmethod
    def from_components(cls, up: WaveFunction | np.ndarray, down: WaveFunction | np.ndarray,
                        grid=None, params=None, normalize=True):
        if isinstance(up, WaveFunction):
            grid = grid or up.grid
            params = params or up.params
            up = up.amplitudes
        if isinstance(down, WaveFunction):
            down = down.amplitudes
        return cls.from_array(grid, params, np.stack([np.asarray(up), np.asarray(down)]),
                              normalize=normalize)


def density(psi: WaveFunction) -> np.ndarray:
    """Position probability density ``|psi|^2`` (summed over spinor components)."""
    rho = np.abs(psi.amplitudes) ** 2
    if psi.ncomp > 1:
        rho = rho.sum(axis=0)
    return rho


def norm(psi: WaveFunction) -> float:
    return float(np.sqrt(_integrate(psi.grid, density(psi))))


def _check_compatible(a: WaveFunction, b: WaveFunction):
    if not a.grid.same_as(b.grid):
        raise StateError("wave functions live on different grids")
    if a.amplitudes.shape != b.amplitudes.shape:
        raise StateError(f"shape mismatch {a.amplitudes.shape} vs {b.amplitudes.shape}")


def inner(psi1: WaveFunction, psi2: WaveFunction) -> complex:
    """``<psi1|psi2>`` by grid quadrature (antilinear in the first slot)."""
    _check_compatible(psi1, psi2)
    return complex(np.vdot(psi1.amplitudes, psi2.amplitudes) * psi1.grid.cell_volume)


def superpose(psi1: WaveFunction, psi2: WaveFunction, c1: complex, c2: complex) -> WaveFunction:
    """Normalized ``c1*psi1 + c2*psi2``.

    When the inputs are orthogonal (``|<psi1|psi2>| < 1e-8``) the result's
    ``meta["branch_weights"]`` holds ``|c_i|^2 ||psi_i||^2`` divided by the
    pre-normalization squared norm.
    """
    _check_compatible(psi1, psi2)
    if psi1.params != psi2.params:
        raise StateError("wave functions carry different physical parameters")
    raw = complex(c1) * psi1.amplitudes + complex(c2) * psi2.amplitudes
    n2 = _integrate(psi1.grid, np.abs(raw) ** 2 if psi1.ncomp == 1 else (np.abs(raw) ** 2).sum(0))
    if not np.sqrt(n2) >= 1e-12:
        raise StateError(f"superposition cancels to norm {np.sqrt(n2):.3g}")
    meta = {}
    if abs(inner(psi1, psi2)) < 1e-8:
        w1 = abs(c1) ** 2 * norm(psi1) ** 2 / n2
        w2 = abs(c2) ** 2 * norm(psi2) ** 2 / n2
        meta["branch_weights"] = (w1, w2)
    out = type(psi1).from_array(psi1.grid, psi1.params, raw, psi1.time, normalize=True)
    out.meta.update(meta)
    return out


def _tail_mass(grid: Grid, rho: np.ndarray, width: int = 2) -> float:
    """Probability in the outermost ``width`` cells of every axis."""
    mask = np.zeros(grid.shape, dtype=bool)
    for k in range(grid.dim):
        sl = [slice(None)] * grid.dim
        sl[k] = slice(0, width)
        mask[tuple(sl)] = True
        sl[k] = slice(grid.shape[k] - width, None)
        mask[tuple(sl)] = True
    return _integrate(grid, rho[mask])


def init_gaussian(grid: Grid, center, sigma, momentum=None, params: PhysicalParams | None = None,
                  *, tail_limit: float = TAIL_MASS_LIMIT, strict_tail: bool = False) -> WaveFunction:
    """Normalized Gaussian packet.

    ``sigma`` is the per-axis standard deviation of ``|psi|^2`` and
    ``momentum`` the per-axis wave vector ``k`` (the packet carries mean
    momentum ``hbar*k``).

    Packets with more than ``tail_limit`` probability in the two outermost
    cells of any axis emit :class:`BoundaryTailWarning`, or raise
    :class:`StateError` when ``strict_tail`` is set.
    """
    dim = grid.dim
    center = np.broadcast_to(np.asarray(center, dtype=float), (dim,))
    sigma = np.broadcast_to(np.asarray(sigma, dtype=float), (dim,))
    momentum = np.zeros(dim) if momentum is None else np.broadcast_to(np.asarray(momentum, dtype=float), (dim,))
    params = params or PhysicalParams.natural(dim)
    if not grid.contains(center):
        raise StateError(f"center {tuple(center)} lies outside the grid")
    for k in range(dim):
        if sigma[k] < 4 * grid.dx[k] * (1 - 1e-12):
            raise StateError(
                f"axis {k}: sigma={sigma[k]:g} under-resolved, need >= 4*dx = {4 * grid.dx[k]:g}"
            )
    amp = np.ones(grid.shape, dtype=np.complex128)
    for k, x in enumerate(grid.mesh()):
        amp = amp * np.exp(-((x - center[k]) ** 2) / (4 * sigma[k] ** 2) + 1j * momentum[k] * x)
    psi = WaveFunction.from_array(grid, params, amp)
    tail = _tail_mass(grid, density(psi))
    if tail > tail_limit:
        msg = f"packet has tail mass {tail:.2e} at the grid boundary (limit {tail_limit:g})"
        if strict_tail:
            raise StateError(msg)
        warnings.warn(msg, BoundaryTailWarning, stacklevel=2)
    return psi


def init_plane_wave(grid: Grid, momentum, params: PhysicalParams | None = None) -> WaveFunction:
    """Normalized ``exp(i k.q)``; exact on a periodic grid only when ``k`` is a grid mode."""
    params = params or PhysicalParams.natural(grid.dim)
    momentum = np.broadcast_to(np.asarray(momentum, dtype=float), (grid.dim,))
    phase = sum(k * x for k, x in zip(momentum, grid.mesh()))
    return WaveFunction.from_array(grid, params, np.exp(1j * phase))


# -- potentials ---------------------------------------------------------------

_POTENTIAL_KINDS = ("free", "harmonic", "barrier", "double_slit", "quartic", "tabulated")


@dataclass(frozen=True, eq=False)
class Potential:
    """Real potential-energy field, described declaratively.

    ``kind`` selects a preset; ``args`` holds its parameters:

    - ``free``: no parameters
    - ``harmonic``: ``omega`` (per axis), optional ``center``; uses the masses
    - ``quartic``: ``a2``, ``a4``, optional ``center``; ``V = a2 x^2 + a4 x^4`` on axis 0
    - ``barrier``: ``height``, ``width``, ``center``, optional ``axis``
    - ``double_slit``: ``separation``, ``slit_width``, ``wall_position``,
      ``wall_height``, optional ``wall_thickness``; the wall is normal to axis 0
    - ``tabulated``: ``values`` array in grid order

    ``scale`` multiplies the realized values.
    """

    kind: str = "free"
    args: dict = field(default_factory=dict)
    scale: float = 1.0

    def __post_init__(self):
        if self.kind not in _POTENTIAL_KINDS:
            raise ValueError(f"unknown potential kind {self.kind!r}; choose from {_POTENTIAL_KINDS}")

    @classmethod
    def from_csv(cls, path: str | Path) -> "Potential":
        """Load tabulated values; every numeric cell in reading order, axis 0 slowest."""
        vals = []
        with open(path, newline="") as fh:
            for row in csv.reader(fh):
                vals.extend(float(c) for c in row if c.strip())
        return cls("tabulated", {"values": np.asarray(vals)})

    def values(self, grid: Grid, params: PhysicalParams | None = None) -> np.ndarray:
        params = params or PhysicalParams.natural(grid.dim)
        a = self.args
        X = grid.mesh()
        if self.kind == "free":
            v = np.zeros(grid.shape)
        elif self.kind == "harmonic":
            omega = np.broadcast_to(np.asarray(a.get("omega", 1.0), dtype=float), (grid.dim,))
            center = np.broadcast_to(np.asarray(a.get("center", 0.0), dtype=float), (grid.dim,))
            v = sum(0.5 * m * w**2 * (x - c) ** 2 for m, w, c, x in zip(params.masses, omega, center, X))
        elif self.kind == "quartic":
            x = X[0] - float(a.get("center", 0.0))
            v = float(a.get("a2", 0.0)) * x**2 + float(a.get("a4", 0.0)) * x**4
        elif self.kind == "barrier":
            axis = int(a.get("axis", 0))
            x = X[axis]
            v = np.where(np.abs(x - float(a.get("center", 0.0))) <= 0.5 * float(a["width"]),
                         float(a["height"]), 0.0)
        elif self.kind == "double_slit":
            v = self._double_slit(grid, X)
        else:
            v = np.asarray(a["values"], dtype=float)
            if v.size != grid.size:
                raise ValueError(f"tabulated potential has {v.size} values, grid has {grid.size}")
            v = v.reshape(grid.shape)
        v = np.asarray(v, dtype=float) * self.scale
        if v.shape != grid.shape:
            v = np.broadcast_to(v, grid.shape).copy()
        if not np.all(np.isfinite(v)):
            raise ValueError("potential has non-finite values")
        return _readonly(v)

    def _double_slit(self, grid, X):
        if grid.dim != 2:
            raise ValueError("double_slit potential needs a 2D grid")
        a = self.args
        x, y = X
        thick = float(a.get("wall_thickness", 2 * grid.dx[0]))
        in_wall = np.abs(x - float(a["wall_position"])) < 0.5 * thick
        half_sep = 0.5 * float(a["separation"])
        half_w = 0.5 * float(a["slit_width"])
        in_slit = (np.abs(y - half_sep) < half_w) | (np.abs(y + half_sep) < half_w)
        return np.where(in_wall & ~in_slit, float(a["wall_height"]), 0.0)

    def gradient(self, grid: Grid, params: PhysicalParams | None = None) -> np.ndarray:
        """Per-axis gradient ``(dim, *shape)`` by second-order finite differences."""
        v = self.values(grid, params)
        g = np.gradient(v, *grid.dx, edge_order=2)
        if grid.dim == 1:
            g = [g]
        return _readonly(np.stack(g))

    def to_dict(self) -> dict:
        args = {k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in self.args.items()}
        return {"kind": self.kind, "scale": self.scale, **args}
