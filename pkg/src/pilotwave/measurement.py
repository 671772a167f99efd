"""Conditional wave functions and a two-variable pointer experiment.

The configuration grid is 2D: axis 0 is the measured system ``x`` and axis 1
the pointer ``y``.  During the interaction phase the pair evolves under
``V_int = g * x * y``, which kicks the pointer by a momentum proportional to
``x``; afterwards the pointer drifts freely (or in an optional harmonic trap,
used to force branches back together).  Each initial branch packet is also
evolved on its own, so the final state can be checked against its branch
decomposition.
"""
from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import kernels
from .ensemble import EnsembleSpec, TrajectorySet, integrate_ensemble, sample_equilibrium
from .guidance import NodePolicy, gradient
from .propagator import FrameSeries, PropagatorSpec, evolve
from .state import (GridSpec, PhysicalParams, WaveFunction, density, inner, init_gaussian, make_grid)

__all__ = [
    "MeasurementError",
    "PointerExperimentSpec",
    "BranchDecomposition",
    "ConditionalWaveFunction",
    "PointerExperiment",
    "CollapseReport",
    "RevivalReport",
    "conditional_wavefunction",
    "run_pointer_experiment",
    "effective_collapse_report",
    "branch_revival_probe",
]

OVERLAP_THRESHOLD = 1e-6
ORTHOGONALITY_LIMIT = 1e-8


class MeasurementError(RuntimeError):
    """The experiment does not produce separated branches (or a slice is empty)."""


@dataclass(frozen=True)
class PointerExperimentSpec:
    """Declarative pointer experiment.

    The system starts in ``sum_a c_a psi_a(x)`` with Gaussian branch packets
    of width ``system_sigma`` centred at ``branch_centers``; the pointer in a
    Gaussian of width ``pointer_sigma`` at ``y = 0``.  ``coefficients`` are
    normalized on use.  ``pointer_trap`` is the angular frequency of an
    optional harmonic pointer trap during the drift phase (0 = free drift).
    """

    branch_centers: tuple = (-4.0, 4.0)
    coefficients: tuple = (0.5**0.5, 0.5**0.5)
    system_sigma: float = 0.4
    system_mass: float = 20.0
    pointer_sigma: float = 0.625
    pointer_mass: float = 4.0
    coupling: float = 1.5
    interaction_time: float = 2.0
    drift_time: float = 1.5
    pointer_trap: float = 0.0
    x_grid: tuple = (-12.0, 12.0, 256)
    y_grid: tuple = (-16.0, 16.0, 256)
    hbar: float = 1.0
    dt: float = 2e-3
    frame_stride: int = 10
    n_runs: int = 2000
    seed: int = 0
    base_dt: float = 1e-2
    overlap_threshold: float = OVERLAP_THRESHOLD
    n_threads: int = 1

    def __post_init__(self):
        if len(self.branch_centers) != len(self.coefficients) or not self.branch_centers:
            raise ValueError("branch_centers and coefficients must have the same, nonzero length")
        if not sum(abs(complex(c)) ** 2 for c in self.coefficients) > 0:
            raise ValueError("coefficients must not all vanish")
        spacing = self.dt * self.frame_stride
        for name in ("interaction_time", "drift_time"):
            v = getattr(self, name)
            if v < 0 or abs(v / spacing - round(v / spacing)) > 1e-9:
                raise ValueError(f"{name} must be a nonnegative multiple of dt*frame_stride={spacing:g}")
        if self.n_runs < 1:
            raise ValueError("n_runs must be positive")

    @property
    def weights(self) -> np.ndarray:
        c = np.asarray([complex(v) for v in self.coefficients])
        return np.abs(c) ** 2 / np.sum(np.abs(c) ** 2)

    @property
    def normalized_coefficients(self) -> np.ndarray:
        c = np.asarray([complex(v) for v in self.coefficients])
        return c / math.sqrt(float(np.sum(np.abs(c) ** 2)))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["coefficients"] = [[float(complex(c).real), float(complex(c).imag)] for c in self.coefficients]
        return d


@dataclass(frozen=True)
class ConditionalWaveFunction:
    """``Psi(x, Y)`` as a function of ``x``: raw slice, its norm and the normalized state."""

    Y: float
    raw: np.ndarray
    norm: float
    psi: WaveFunction


def conditional_wavefunction(Psi: WaveFunction, Y: float, policy: NodePolicy | None = None) -> ConditionalWaveFunction:
    """Slice a two-variable state at pointer position ``Y`` (cubic interpolation in ``y``).

    Raises :class:`MeasurementError` when the slice norm is below the node
    threshold, i.e. when ``Y`` sits where the pointer has no support.
    """
    grid = Psi.grid
    if grid.dim != 2:
        raise ValueError("conditional_wavefunction needs a 2D (system, pointer) grid")
    lo, hi = grid.lower[1], grid.upper[1]
    if not lo <= Y < hi:
        raise ValueError(f"Y={Y} outside the pointer range [{lo}, {hi})")
    x = grid.axes[0]
    pts = np.column_stack([x, np.full(x.size, float(Y))])
    fields = np.asarray(Psi.amplitudes, dtype=np.complex128)[None, None]
    raw = kernels.interpolate(fields, np.zeros(1), grid.lower, grid.dx, grid.shape, grid.periodic,
                              0.0, pts)[:, 0]
    policy = policy or NodePolicy()
    nrm = math.sqrt(float(np.sum(np.abs(raw) ** 2)) * grid.dx[0])
    threshold = policy.threshold(density(Psi)) * grid.lengths[0]
    if not nrm**2 >= threshold:
        raise MeasurementError(f"conditional slice at Y={Y} has norm^2 {nrm**2:.3e} below the node threshold")
    xgrid = make_grid(GridSpec((grid.lower[0],), (grid.upper[0],), (grid.shape[0],), grid.boundary))
    params = PhysicalParams(Psi.params.hbar, (Psi.params.masses[0],))
    psi = WaveFunction.from_array(xgrid, params, raw, Psi.time, normalize=True)
    return ConditionalWaveFunction(float(Y), raw, nrm, psi)


@dataclass(eq=False)
class BranchDecomposition:
    """Per-branch series and their pointer regions.

    ``regions`` holds ``len(branches) - 1`` sorted boundaries in ``y``;
    ``region_of_branch[a]`` is the region index that labels branch ``a``.
    ``overlap[i]`` is, at frame ``i``, the largest fraction of any branch's
    own mass lying outside its region.
    """

    branches: list
    coefficients: np.ndarray
    weights: np.ndarray
    regions: np.ndarray
    region_of_branch: np.ndarray
    overlap: np.ndarray
    y_means: np.ndarray
    threshold: float

    @property
    def separated(self) -> np.ndarray:
        return self.overlap < self.threshold

    def separation_index(self):
        """First frame from which branches stay separated, or ``None``."""
        sep = self.separated
        if not sep[-1]:
            return None
        bad = np.flatnonzero(~sep)
        return int(bad[-1] + 1) if bad.size else 0

    def label(self, y) -> np.ndarray:
        """Branch index for pointer positions ``y`` (the pointer variable ``Z = F(Y)``)."""
        reg = np.searchsorted(self.regions, np.asarray(y, dtype=float), side="right")
        inv = np.empty(len(self.region_of_branch), dtype=np.int64)
        inv[self.region_of_branch] = np.arange(len(self.region_of_branch))
        return inv[reg]


@dataclass(eq=False)
class PointerExperiment:
    spec: PointerExperimentSpec
    series: FrameSeries
    segments: list
    decomposition: BranchDecomposition
    trajectories: TrajectorySet
    labels: np.ndarray
    counts: np.ndarray
    frequencies: np.ndarray
    sigma: np.ndarray
    timings: dict = field(default_factory=dict)

    @property
    def born_ok(self) -> bool:
        return bool(np.all(np.abs(self.frequencies - self.decomposition.weights) <= 3 * self.sigma + 1e-15))

    def label_history(self) -> np.ndarray:
        """``(n, nframes)`` labels of every path at every frame (-1 after failure)."""
        y = self.trajectories.paths[:, :, 1]
        out = np.full(y.shape, -1, dtype=np.int64)
        ok = np.isfinite(y)
        out[ok] = self.decomposition.label(y[ok])
        return out

    def switches(self) -> dict:
        """Label changes between consecutive frames, split by whether supports were disjoint."""
        lab = self.label_history()
        sep = self.decomposition.separated
        both = (lab[:, 1:] >= 0) & (lab[:, :-1] >= 0)
        change = both & (lab[:, 1:] != lab[:, :-1])
        disjoint = sep[1:] & sep[:-1]
        return {
            "total": int(change.sum()),
            "while_disjoint": int(change[:, disjoint].sum()),
            "during_overlap": int(change[:, ~disjoint].sum()),
            "paths_switching": int(change.any(axis=1).sum()),
        }

    def summary(self) -> dict:
        dec = self.decomposition
        si = dec.separation_index()
        return {
            "spec": self.spec.to_dict(),
            "branch_weights": dec.weights.tolist(),
            "outcome_counts": self.counts.tolist(),
            "outcome_frequencies": self.frequencies.tolist(),
            "binomial_sigma": self.sigma.tolist(),
            "born_rule_within_3_sigma": self.born_ok,
            "regions": dec.regions.tolist(),
            "overlap_curve": {"times": self.series.times.tolist(), "overlap": dec.overlap.tolist()},
            "separation_time": None if si is None else float(self.series.times[si]),
            "final_overlap": float(dec.overlap[-1]),
            "label_switches": self.switches(),
            "status_counts": self.trajectories.counts(),
        }


def _grids(spec):
    gs = GridSpec((spec.x_grid[0], spec.y_grid[0]), (spec.x_grid[1], spec.y_grid[1]),
                  (int(spec.x_grid[2]), int(spec.y_grid[2])))
    return make_grid(gs)


def _branch_states(spec, grid, params):
    out = []
    for c in spec.branch_centers:
        out.append(init_gaussian(grid, (float(c), 0.0), (spec.system_sigma, spec.pointer_sigma), params=params))
    for a in range(len(out)):
        for b in range(a + 1, len(out)):
            if abs(inner(out[a], out[b])) >= ORTHOGONALITY_LIMIT:
                raise ValueError(f"branches {a} and {b} overlap: |<a|b>| = {abs(inner(out[a], out[b])):.2e}")
    return out


def _phase_potentials(spec, grid, params):
    X, Y = grid.mesh()
    v_int = spec.coupling * X * Y
    v_drift = 0.5 * params.masses[1] * spec.pointer_trap**2 * Y**2
    return v_int, v_drift


def _evolve_phases(psi0, spec, v_int, v_drift, boundary_limit):
    segs = []
    psi = psi0
    for V, T in ((v_int, spec.interaction_time), (v_drift, spec.drift_time)):
        if T <= 0:
            continue
        s = evolve(psi, V, PropagatorSpec("split-step", spec.dt, T, spec.frame_stride),
                   boundary_limit=boundary_limit)
        segs.append(s)
        psi = s.frame(len(s) - 1)
    if not segs:
        raise ValueError("interaction_time + drift_time must be positive")
    frames = np.concatenate([segs[0].frames] + [s.frames[1:] for s in segs[1:]])
    times = np.concatenate([segs[0].times] + [s.times[1:] for s in segs[1:]])
    total = float(times[-1] - times[0])
    pspec = PropagatorSpec("split-step", spec.dt, total, spec.frame_stride)
    # the merged series carries the last phase's potential
    merged = FrameSeries(psi0.grid, psi0.params, frames, times, pspec, segs[-1].potential,
                         max(s.max_frame_change for s in segs))
    return merged, segs


def _decompose(spec, grid, branch_series, coefs):
    nb = len(branch_series)
    nf = len(branch_series[0])
    dx, dy = grid.dx
    y = grid.axes[1]
    marg = np.empty((nb, nf, y.size))
    for a, s in enumerate(branch_series):
        for i in range(nf):
            marg[a, i] = np.sum(np.abs(np.asarray(s.frames[i])) ** 2, axis=0) * dx
    means = np.sum(marg * y, axis=2) / np.sum(marg, axis=2)
    weights = np.abs(coefs) ** 2
    if nb == 1:
        regions = np.empty(0)
        rob = np.zeros(1, dtype=np.int64)
        overlap = np.zeros(nf)
    else:
        spread = means.max(axis=0) - means.min(axis=0)
        k = int(np.argmax(spread))
        order = np.argsort(means[:, k], kind="stable")
        m = means[order, k]
        regions = 0.5 * (m[1:] + m[:-1])
        rob = np.empty(nb, dtype=np.int64)
        rob[order] = np.arange(nb)
        reg = np.searchsorted(regions, y, side="right")
        overlap = np.empty(nf)
        for i in range(nf):
            out = [float(np.sum(marg[a, i][reg != rob[a]]) / np.sum(marg[a, i])) for a in range(nb)]
            overlap[i] = max(out)
    return BranchDecomposition(branch_series, coefs, weights, regions, rob, overlap, means,
                               spec.overlap_threshold)


def run_pointer_experiment(spec: PointerExperimentSpec, *, require_separation: bool = True,
                           boundary_limit: float = 1e-6) -> PointerExperiment:
    """Evolve the pointer experiment, integrate ``n_runs`` guided paths and label outcomes.

    Outcomes are read from the final pointer position through the region
    classifier.  Raises :class:`MeasurementError` if ``require_separation``
    and the branches are not separated at the final time.
    """
    timings = {}
    t_start = time.perf_counter()
    grid = _grids(spec)
    params = PhysicalParams(spec.hbar, (spec.system_mass, spec.pointer_mass))
    coefs = spec.normalized_coefficients
    branches0 = _branch_states(spec, grid, params)
    amps = sum(c * b.amplitudes for c, b in zip(coefs, branches0))
    Psi0 = WaveFunction.from_array(grid, params, amps, 0.0, normalize=True)
    v_int, v_drift = _phase_potentials(spec, grid, params)
    series, segments = _evolve_phases(Psi0, spec, v_int, v_drift, boundary_limit)
    branch_series = [_evolve_phases(b, spec, v_int, v_drift, boundary_limit)[0] for b in branches0]
    timings["evolve"] = time.perf_counter() - t_start

    dec = _decompose(spec, grid, branch_series, coefs)
    if require_separation and not dec.separated[-1]:
        raise MeasurementError(
            f"branch supports do not separate: final overlap mass {dec.overlap[-1]:.2e} "
            f"exceeds {spec.overlap_threshold:g}"
        )

    t0 = time.perf_counter()
    pts = sample_equilibrium(Psi0, spec.n_runs, spec.seed)
    ens = EnsembleSpec(spec.n_runs, spec.seed, base_dt=min(spec.base_dt, series.frame_spacing),
                       n_threads=spec.n_threads)
    tset = integrate_ensemble(series, pts, ens, streams=np.arange(spec.n_runs))
    timings["integrate"] = time.perf_counter() - t0

    nb = len(coefs)
    labels = np.full(spec.n_runs, -1, dtype=np.int64)
    ok = tset.ok
    labels[ok] = dec.label(tset.paths[ok, -1, 1])
    n_ok = int(ok.sum())
    counts = np.bincount(labels[ok], minlength=nb)
    freq = counts / max(n_ok, 1)
    sigma = np.sqrt(dec.weights * (1 - dec.weights) / max(n_ok, 1))
    return PointerExperiment(spec, series, segments, dec, tset, labels, counts, freq, sigma, timings)


@dataclass
class CollapseReport:
    """Per-frame diagnostics along one path.

    ``occupied`` is the branch whose region holds ``Y_t``; ``cross_mass`` is
    the share of the conditional wave function's norm carried by the other
    branches; ``velocity_share`` is ``|v(Psi) - v(c_a Psi_a)| / |v(Psi)|``
    at ``(X_t, Y_t)``; ``effective`` marks frames where the branches are
    separated, so that an effective wave function exists.
    """

    path: int
    times: np.ndarray
    occupied: np.ndarray
    cross_mass: np.ndarray
    velocity_share: np.ndarray
    effective: np.ndarray
    excluded: bool = False

    def to_dict(self) -> dict:
        return {k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in self.__dict__.items()}


def _branch_fields(dec, i, grid):
    out = []
    for s in dec.branches:
        cache = s._cache.setdefault("branch_fields", {})
        f = cache.get(i)
        if f is None:
            a = np.asarray(s.frames[i])
            f = np.concatenate([a[None], gradient(a, grid)])
            cache[i] = f
        out.append(f)
    return out


def _local_fields(dec, i, grid, pts):
    """Per-branch ``(psi, grad psi)`` at ``pts`` (frame ``i``), shape ``(nb, npts, 1 + dim)``."""
    fields = _branch_fields(dec, i, grid)
    t = np.zeros(1)
    return np.stack([kernels.interpolate(f[None], t, grid.lower, grid.dx, grid.shape, grid.periodic, 0.0, pts)
                     for f in fields])


def _velocity(F, hom):
    psi = F[:, 0]
    rho = np.abs(psi) ** 2
    return np.stack([hom[k] * np.imag(np.conj(psi) * F[:, 1 + k]) / rho for k in range(F.shape[1] - 1)], axis=1)


def effective_collapse_report(exp: PointerExperiment, path: int, frames=None) -> CollapseReport:
    """Collapse diagnostics along path ``path`` at the given frame indices (default: all)."""
    dec = exp.decomposition
    grid = exp.series.grid
    tset = exp.trajectories
    nf = len(exp.series)
    frames = np.arange(nf) if frames is None else np.asarray(frames, dtype=np.int64)
    q = tset.paths[path][frames]
    c = dec.coefficients
    hom = exp.series.params.hbar_over_m()
    occ = np.full(len(frames), -1, dtype=np.int64)
    cross = np.full(len(frames), np.nan)
    share = np.full(len(frames), np.nan)
    excluded = tset.status[path] != kernels.OK
    x = grid.axes[0]
    xs = np.empty((x.size, 2))
    xs[:, 0] = x
    for j, i in enumerate(frames):
        if not np.all(np.isfinite(q[j])):
            continue
        a = int(dec.label(q[j, 1:2])[0])
        occ[j] = a
        # conditional wave function at Y_t, split into branches
        xs[:, 1] = q[j, 1]
        Fx = _local_fields(dec, i, grid, xs)[:, :, 0] * c[:, None]
        total = float(np.sum(np.abs(Fx.sum(axis=0)) ** 2))
        rest = Fx.sum(axis=0) - Fx[a]
        cross[j] = float(np.sum(np.abs(rest) ** 2)) / total if total > 0 else np.nan
        # guiding field at the actual configuration, with and without the other branches
        Fq = _local_fields(dec, i, grid, q[j][None]) * c[:, None, None]
        v_all = _velocity(Fq.sum(axis=0), hom)[0]
        v_own = _velocity(Fq[a], hom)[0]
        den = float(np.linalg.norm(v_all))
        share[j] = float(np.linalg.norm(v_all - v_own)) / den if den > 0 else 0.0
    return CollapseReport(path, np.asarray(exp.series.times)[frames], occ, cross, share,
                          dec.separated[frames].copy(), bool(excluded))


@dataclass
class RevivalReport:
    times: np.ndarray
    overlap: np.ndarray
    overlap_window: list
    switches: dict
    switch_times: np.ndarray
    revival_switches: int = 0

    @property
    def switches_only_during_overlap(self) -> bool:
        return self.switches["while_disjoint"] == 0

    def to_dict(self) -> dict:
        return {
            "times": self.times.tolist(),
            "overlap": self.overlap.tolist(),
            "overlap_window": self.overlap_window,
            "switches": self.switches,
            "switch_times": self.switch_times.tolist(),
            "revival_switches": self.revival_switches,
            "switches_only_during_overlap": self.switches_only_during_overlap,
        }


def _windows(times, mask):
    out = []
    start = None
    for t, m in zip(times, mask):
        if m and start is None:
            start = float(t)
        if not m and start is not None:
            out.append([start, float(prev)])
            start = None
        prev = t
    if start is not None:
        out.append([start, float(times[-1])])
    return out


def branch_revival_probe(spec: PointerExperimentSpec, exp: PointerExperiment | None = None) -> RevivalReport:
    """Overlap of branch pointer supports over time and label switches.

    Use a spec with ``pointer_trap > 0`` (or a short drift) so the branches
    come back together; switches are expected only inside the overlap windows.
    """
    exp = exp or run_pointer_experiment(spec, require_separation=False)
    dec = exp.decomposition
    times = np.asarray(exp.series.times)
    ov = dec.overlap
    # windows after the first separation; before it the branches never parted
    sep = dec.separated
    first = int(np.argmax(sep)) if sep.any() else len(sep)
    mask = ~sep
    mask[:first] = False
    lab = exp.label_history()
    change = (lab[:, 1:] >= 0) & (lab[:, :-1] >= 0) & (lab[:, 1:] != lab[:, :-1])
    cols = np.nonzero(change)[1]
    sw_times = times[1:][cols]
    # switches after the branches had parted: the step ends inside a re-overlap window
    revival = int(np.sum(mask[1:][cols]))
    return RevivalReport(times, ov, _windows(times, mask), exp.switches(), np.sort(sw_times), revival)
