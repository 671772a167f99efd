"""Quantum-equilibrium sampling, trajectory ensembles and equivariance statistics."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats

from . import io, kernels
from .guidance import NodePolicy, guidance_fields, node_threshold
from .propagator import FrameSeries
from .state import Grid, WaveFunction, density

__all__ = [
    "SamplingError",
    "InsufficientSamplesError",
    "EnsembleSpec",
    "TrajectorySet",
    "EquivarianceReport",
    "stream_generator",
    "sample_equilibrium",
    "integrate_trajectory",
    "integrate_ensemble",
    "equivariance_check",
    "non_crossing_check",
    "marginal_cdf",
]

STATUS_NAMES = {kernels.OK: "ok", kernels.NODE_ABORT: "node_abort", kernels.BOUNDARY_EXIT: "boundary_exit"}
MIN_ACCEPTANCE = 1e-4


class SamplingError(RuntimeError):
    pass


class InsufficientSamplesError(ValueError):
    pass


@dataclass(frozen=True)
class EnsembleSpec:
    n_trajectories: int = 1000
    master_seed: int = 0
    integrator: str = "rk4"
    base_dt: float = 1e-2
    node_retry_shrink: float = 0.5
    max_retries: int = 4
    policy: NodePolicy = field(default_factory=NodePolicy)
    n_threads: int = 1

    def __post_init__(self):
        if self.n_trajectories < 1:
            raise ValueError("n_trajectories must be >= 1")
        if self.integrator != "rk4":
            raise ValueError(f"unsupported integrator {self.integrator!r}")
        if not self.base_dt > 0:
            raise ValueError("base_dt must be positive")
        if not 0 < self.node_retry_shrink < 1:
            raise ValueError("node_retry_shrink must lie in (0, 1)")
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")
        if not 0 <= int(self.master_seed) < 2**64:
            raise ValueError("master_seed must be a 64-bit unsigned integer")


def stream_generator(master_seed: int, stream: int) -> np.random.Generator:
    """Independent counter-based stream: Philox keyed by ``master_seed + stream * 2**64``."""
    return np.random.Generator(np.random.Philox(key=int(master_seed) + (int(stream) << 64)))


def sample_equilibrium(psi: WaveFunction, n: int, master_seed: int, *, first_stream: int = 0,
                       batch: int = 64) -> np.ndarray:
    """Draw ``n`` configurations from ``|psi|^2`` by rejection sampling.

    Each draw ``i`` uses its own stream ``first_stream + i``: a grid cell is
    proposed uniformly, accepted with probability ``rho_cell / max(rho)``,
    and the point is placed uniformly inside the cell (cells are centred on
    grid points).  Returns an ``(n, dim)`` array.
    """
    grid = psi.grid
    rho = density(psi)
    rho_max = float(rho.max())
    acceptance = float(rho.mean()) / rho_max
    if acceptance < MIN_ACCEPTANCE:
        raise SamplingError(
            f"expected acceptance rate {acceptance:.2e} below {MIN_ACCEPTANCE:g}; "
            "the density is too peaked for a uniform proposal, use an importance proposal"
        )
    flat = rho.reshape(-1)
    shape = np.asarray(grid.shape)
    strides = np.array([int(np.prod(grid.shape[k + 1:])) for k in range(grid.dim)])
    lower = np.asarray(grid.lower)
    dx = np.asarray(grid.dx)
    d = grid.dim
    out = np.empty((n, d))
    for i in range(n):
        rng = stream_generator(master_seed, first_stream + i)
        while True:
            u = rng.random((batch, 2 * d + 1))
            idx = np.minimum((u[:, :d] * shape).astype(np.int64), shape - 1)
            cell = idx @ strides
            hit = np.flatnonzero(u[:, 2 * d] * rho_max < flat[cell])
            if hit.size:
                h = hit[0]
                out[i] = lower + (idx[h] + u[h, d:2 * d] - 0.5) * dx
                break
    if grid.periodic:
        L = np.asarray(grid.lengths)
        out = lower + np.mod(out - lower, L)
    return out


@dataclass(eq=False)
class TrajectorySet:
    """Ensemble of paths recorded at the frame times of a series."""

    paths: np.ndarray  # (n, nframes, dim)
    times: np.ndarray
    status: np.ndarray  # kernel status codes
    streams: np.ndarray  # sampling stream per path, -1 if supplied externally
    wraps: np.ndarray
    clamps: np.ndarray
    grid: Grid | None = None

    def __len__(self):
        return self.paths.shape[0]

    @property
    def ok(self) -> np.ndarray:
        return self.status == kernels.OK

    def status_names(self) -> list[str]:
        return [STATUS_NAMES[int(s)] for s in self.status]

    def counts(self) -> dict:
        return {name: int(np.sum(self.status == code)) for code, name in STATUS_NAMES.items()}

    def positions(self, frame: int, only_ok: bool = True) -> np.ndarray:
        p = self.paths[:, frame]
        return p[self.ok] if only_ok else p

    def subset(self, idx) -> "TrajectorySet":
        return TrajectorySet(self.paths[idx], self.times, self.status[idx], self.streams[idx],
                             self.wraps[idx], self.clamps[idx], self.grid)

    def to_csv(self, path, frames=None) -> Path:
        """One row per path per recorded frame: path id, time, coordinates, status."""
        path = Path(path)
        frames = range(len(self.times)) if frames is None else frames
        d = self.paths.shape[2]
        names = self.status_names()
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["path_id", "time"] + [f"q{k}" for k in range(d)] + ["status"])
            for i in range(len(self)):
                for f in frames:
                    w.writerow([i, repr(float(self.times[f]))]
                               + [repr(float(c)) for c in self.paths[i, f]] + [names[i]])
        return path

    def save(self, path) -> Path:
        """Dense paths in the binary field format: one record per frame of shape (n, dim)."""
        extra = {
            "status": self.status_names(),
            "streams": self.streams.tolist(),
            "wraps": self.wraps.tolist(),
            "clamps": self.clamps.tolist(),
        }
        records = np.ascontiguousarray(np.transpose(self.paths, (1, 0, 2)))
        return io.write_fields(path, records, "real-vector", self.grid, self.times, extra)


def integrate_ensemble(series: FrameSeries, points, spec: EnsembleSpec, *, streams=None,
                       backend=None) -> TrajectorySet:
    """Integrate the guiding equation from every row of ``points``.

    Failures never abort the ensemble; they are recorded per path in
    ``status``.  Results are independent of batching and thread count.
    """
    grid = series.grid
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    if pts.shape[1] != grid.dim:
        raise ValueError(f"points must have {grid.dim} coordinates")
    lo, hi = np.asarray(grid.lower), np.asarray(grid.upper)
    if np.any((pts < lo) | (pts >= hi)):
        raise ValueError("all starting points must lie inside the grid")
    spacing = series.frame_spacing
    if len(series) > 1 and spec.base_dt > spacing * (1 + 1e-9):
        raise ValueError(f"base_dt={spec.base_dt} exceeds the frame spacing {spacing}")
    substeps = max(1, int(math.ceil(spacing / spec.base_dt - 1e-9))) if len(series) > 1 else 1
    kern = kernels.get_backend(backend)
    paths, status, wraps, clamps = kern.integrate_paths(
        guidance_fields(series), np.asarray(series.times, dtype=float), grid.lower, grid.dx,
        grid.shape, grid.periodic, series.params.hbar_over_m(), pts, substeps,
        spec.node_retry_shrink, spec.max_retries, node_threshold(series, spec.policy),
        spec.policy.cap(grid), spec.n_threads,
    )
    streams = np.full(len(pts), -1, dtype=np.int64) if streams is None else np.asarray(streams, dtype=np.int64)
    return TrajectorySet(paths, np.asarray(series.times, dtype=float), status, streams, wraps, clamps, grid)


def integrate_trajectory(series: FrameSeries, q0, spec: EnsembleSpec, **kw) -> TrajectorySet:
    """Single-path convenience wrapper around :func:`integrate_ensemble`."""
    return integrate_ensemble(series, np.reshape(np.asarray(q0, dtype=float), (1, -1)), spec, **kw)


# -- statistics ---------------------------------------------------------------

def marginal_cdf(rho: np.ndarray, grid: Grid, axis: int):
    """CDF of the axis marginal of a cell-centred piecewise-constant density."""
    other = tuple(k for k in range(grid.dim) if k != axis)
    m = rho.sum(axis=other) if other else rho
    m = m / m.sum()
    edges = grid.axes[axis] - 0.5 * grid.dx[axis]
    edges = np.append(edges, edges[-1] + grid.dx[axis])
    cum = np.concatenate([[0.0], np.cumsum(m)])
    cum[-1] = 1.0

    def cdf(x):
        return np.interp(x, edges, cum, left=0.0, right=1.0)

    return cdf, edges, cum


def _cell_index(grid, pts):
    idx = np.floor((pts - np.asarray(grid.lower)) / np.asarray(grid.dx) + 0.5).astype(np.int64)
    shape = np.asarray(grid.shape)
    if grid.periodic:
        return np.mod(idx, shape)
    return np.clip(idx, 0, shape - 1)


def _chi2(rho, grid, pts, bins_per_axis, min_expected=20.0):
    """Chi-square of sample counts against the grid density on quantile bins."""
    n = len(pts)
    p = rho / rho.sum()
    cells = _cell_index(grid, pts)
    bin_of_cell = []
    for k in range(grid.dim):
        _, _, cum = marginal_cdf(rho, grid, k)
        # bin edges at cell boundaries nearest to the marginal quantiles
        qs = np.linspace(0, 1, bins_per_axis + 1)[1:-1]
        cut = np.unique(np.searchsorted(cum[1:], qs))
        bin_of_cell.append(np.searchsorted(cut, np.arange(grid.shape[k]), side="left"))
    nb = [int(b.max()) + 1 for b in bin_of_cell]
    mesh = np.meshgrid(*bin_of_cell, indexing="ij")
    joint = np.ravel_multi_index(tuple(mesh), nb)
    expected = np.bincount(joint.ravel(), weights=p.ravel(), minlength=int(np.prod(nb))) * n
    sample_bins = np.ravel_multi_index(tuple(bin_of_cell[k][cells[:, k]] for k in range(grid.dim)), nb)
    observed = np.bincount(sample_bins, minlength=int(np.prod(nb))).astype(float)
    keep = expected >= min_expected
    e = list(expected[keep])
    o = list(observed[keep])
    rest_e, rest_o = expected[~keep].sum(), observed[~keep].sum()
    if rest_e >= 5.0:
        e.append(rest_e)
        o.append(rest_o)
    elif e:
        j = int(np.argmin(e))
        e[j] += rest_e
        o[j] += rest_o
    e, o = np.asarray(e), np.asarray(o)
    if len(e) < 2:
        return 0.0, 0, 1.0
    chi2 = float(np.sum((o - e) ** 2 / e))
    dof = len(e) - 1
    return chi2, dof, float(stats.chi2.sf(chi2, dof))


@dataclass
class EquivarianceReport:
    checkpoints: list
    alpha: float
    chi2_alpha: float
    passed: bool

    def to_dict(self) -> dict:
        return {"alpha": self.alpha, "chi2_alpha": self.chi2_alpha, "passed": self.passed,
                "checkpoints": self.checkpoints}

    def max_ks(self) -> float:
        return max(max(c["ks"]) for c in self.checkpoints)

    def write(self, path) -> Path:
        io.write_json(path, self.to_dict())
        return Path(path)


def equivariance_check(tset: TrajectorySet, series: FrameSeries, checkpoints=None, *,
                       alpha: float = 0.01, chi2_alpha: float = 1e-3, bins_per_axis: int | None = None,
                       min_samples: int = 100, ks_limit: float | None = None) -> EquivarianceReport:
    """Compare the ensemble at each checkpoint with ``|psi_t|^2``.

    Per-axis marginal Kolmogorov-Smirnov statistics are tested against the
    ``1 - alpha`` quantile of the KS distribution for the ok-sample size;
    a chi-square on joint quantile bins (every kept bin expects at least 20
    counts) is tested at ``chi2_alpha``.  A fixed ``ks_limit`` replaces the
    KS quantile when given.
    """
    ok = tset.ok
    n = int(ok.sum())
    if n < min_samples:
        raise InsufficientSamplesError(f"only {n} ok trajectories, need at least {min_samples}")
    grid = series.grid
    if checkpoints is None:
        frames = list(range(len(series)))
    else:
        frames = [series.index_of(float(t)) for t in checkpoints]
    if bins_per_axis is None:
        bins_per_axis = max(2, min(int(n / 20.0) // 2, 40 if grid.dim == 1 else int(round((n / 40.0) ** (1.0 / grid.dim)))))
    crit = float(stats.kstwo.ppf(1 - alpha, n)) if ks_limit is None else float(ks_limit)
    results = []
    passed = True
    for f in frames:
        pts = tset.paths[ok, f]
        rho = np.abs(np.asarray(series.frames[f])) ** 2
        ks, pv = [], []
        for k in range(grid.dim):
            cdf, _, _ = marginal_cdf(rho, grid, k)
            r = stats.kstest(pts[:, k], cdf)
            ks.append(float(r.statistic))
            pv.append(float(r.pvalue))
        chi2, dof, chi2_p = _chi2(rho, grid, pts, bins_per_axis)
        ok_f = all(s < crit for s in ks) and chi2_p >= chi2_alpha
        passed &= ok_f
        results.append({
            "time": float(series.times[f]), "frame": int(f), "n": n, "ks": ks, "ks_pvalue": pv,
            "ks_critical": crit, "chi2": chi2, "chi2_dof": dof, "chi2_pvalue": chi2_p, "passed": bool(ok_f),
        })
    return EquivarianceReport(results, alpha, chi2_alpha, bool(passed))


def non_crossing_check(tset: TrajectorySet) -> bool:
    """True iff the ordering of all ok 1D paths is the same at every recorded frame."""
    if tset.paths.shape[2] != 1:
        raise ValueError("non-crossing is defined for 1D ensembles only")
    p = tset.paths[tset.ok, :, 0]
    if p.shape[0] < 2:
        return True
    if tset.grid is not None and tset.grid.periodic:
        p = np.unwrap(p, period=tset.grid.lengths[0], axis=1)
    order = np.argsort(p[:, 0], kind="stable")
    q = p[order]
    return bool(np.all(np.diff(q, axis=0) >= 0.0))
