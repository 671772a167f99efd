"""Static SVG exports for a run directory.

Three figures are written to ``<run>/plots/``:

- ``density_paths.svg``: ``|psi|^2`` heatmap with trajectory overlay (1D:
  space-time picture with checkpoint markers; 2D: one panel per checkpoint,
  paths drawn up to that time).  Each path of the last panel is one
  ``<polyline>``-like path element inside a group with id ``traj-<i>``.
- ``ks_vs_time.svg``: per-axis KS statistic against its limit.
- ``quantum_potential.svg``: ``U`` profiles at the polar checkpoints (1D),
  or the core range of ``U`` against time (2D).

Figures whose inputs were not produced by the run are skipped with a notice.
"""
from __future__ import annotations

import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .. import io  # noqa: E402
from ..propagator import FrameSeries  # noqa: E402
from .runner import MANIFEST  # noqa: E402

__all__ = ["export_plots", "PlotError", "PLOT_FILES"]

PLOT_FILES = ("density_paths.svg", "ks_vs_time.svg", "quantum_potential.svg")
_RC = {"svg.hashsalt": "pilotwave", "svg.fonttype": "none", "font.size": 9}


class PlotError(FileNotFoundError):
    """A run artifact needed for plotting is missing."""


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise PlotError(f"missing artifact {path.name} ({what}) in {path.parent}")
    return path


def _save(fig, path):
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def _load_paths(run: Path, max_paths: int):
    data, m = io.read_fields(run / "trajectories", mmap=False)
    paths = np.transpose(data, (1, 0, 2))  # (n, nframes, dim)
    ok = np.array([s == "ok" for s in m["status"]])
    idx = np.flatnonzero(ok)[:max_paths]
    return paths[idx], np.asarray(m["times"])


def _density_paths(run, man, out, notices):
    cfg = man["config"]
    n_show = int(cfg.get("output", {}).get("plot_paths", 40))
    have_frames = (run / "frames" / io.MANIFEST).exists()
    have_paths = (run / "trajectories" / io.MANIFEST).exists()
    if not have_paths:
        notices.append("density_paths.svg skipped: run has no trajectory ensemble")
        return None
    paths, ptimes = _load_paths(run, n_show)
    series = FrameSeries.load(run / "frames") if have_frames else None
    if series is None:
        notices.append("density heatmap omitted: frames were not saved (output.save_frames = false)")
    dim = paths.shape[2]
    path = out / "density_paths.svg"
    with plt.rc_context(_RC):
        if dim == 1:
            fig, ax = plt.subplots(figsize=(6.5, 4.2))
            if series is not None:
                rho = np.abs(np.asarray(series.frames)) ** 2
                g = series.grid
                ax.imshow(rho.T, origin="lower", aspect="auto", cmap="Greys",
                          extent=(series.times[0], series.times[-1], g.lower[0], g.upper[0]))
            for i, p in enumerate(paths):
                (ln,) = ax.plot(ptimes, p[:, 0], lw=0.6, color="tab:red", alpha=0.8)
                ln.set_gid(f"traj-{i}")
            lo, hi = np.nanmin(paths), np.nanmax(paths)
            pad = 0.25 * (hi - lo + 1.0)
            ax.set_ylim(lo - pad, hi + pad)
            ax.set_xlabel("t")
            ax.set_ylabel("x")
            ax.set_title(f"{man['scenario']}: |psi|^2 and {len(paths)} paths")
        elif dim == 2:
            nck = 4
            fidx = np.unique(np.linspace(0, len(ptimes) - 1, nck).round().astype(int))
            fig, axes = plt.subplots(1, len(fidx), figsize=(3.0 * len(fidx), 3.2), squeeze=False)
            for j, f in enumerate(fidx):
                ax = axes[0, j]
                t = ptimes[f]
                if series is not None:
                    k = int(np.argmin(np.abs(series.times - t)))
                    g = series.grid
                    ax.imshow((np.abs(np.asarray(series.frames[k])) ** 2).T, origin="lower", cmap="Greys",
                              extent=(g.lower[0], g.upper[0], g.lower[1], g.upper[1]), aspect="auto")
                last = j == len(fidx) - 1
                for i, p in enumerate(paths):
                    (ln,) = ax.plot(p[: f + 1, 0], p[: f + 1, 1], lw=0.5, color="tab:red", alpha=0.8)
                    if last:
                        ln.set_gid(f"traj-{i}")
                ax.set_title(f"t = {t:.3g}")
                ax.set_xlabel("q0")
                if j == 0:
                    ax.set_ylabel("q1")
            fig.suptitle(f"{man['scenario']}: |psi|^2 and {len(paths)} paths")
        else:
            notices.append("density_paths.svg skipped: plots support 1D and 2D configuration spaces")
            return None
        fig.tight_layout()
        _save(fig, path)
    return path


def _ks(run, man, out, notices):
    if "equivariance" not in man.get("analyses", {}):
        notices.append("ks_vs_time.svg skipped: run has no equivariance analysis")
        return None
    d = json.loads(_require(run / "equivariance.json", "equivariance report").read_text())
    cks = d.get("checkpoints")
    if not cks:
        notices.append("ks_vs_time.svg skipped: equivariance report has no checkpoints")
        return None
    t = [c["time"] for c in cks]
    ks = np.array([c["ks"] for c in cks])
    crit = [c["ks_critical"] for c in cks]
    path = out / "ks_vs_time.svg"
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(5.5, 3.5))
        for k in range(ks.shape[1]):
            ax.plot(t, ks[:, k], marker="o", ms=3, label=f"axis {k}")
        ax.plot(t, crit, ls="--", color="k", lw=0.8, label="limit")
        ax.set_xlabel("t")
        ax.set_ylabel("KS statistic")
        ax.set_ylim(0, max(max(crit), float(ks.max())) * 1.2)
        ax.legend()
        ax.set_title(f"{man['scenario']}: equivariance (n = {cks[0]['n']})")
        fig.tight_layout()
        _save(fig, path)
    return path


def _quantum_potential(run, man, out, notices):
    if "polar" not in man.get("analyses", {}):
        notices.append("quantum_potential.svg skipped: run has no polar analysis")
        return None
    _require(run / "polar.json", "polar report")
    U, m = io.read_fields(_require(run / "polar", "quantum potential records"), mmap=False)
    g = m["grid"]
    times = m["times"]
    path = out / "quantum_potential.svg"
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(5.5, 3.5))
        if len(g["points"]) == 1:
            n = g["points"][0]
            x = g["lower"][0] + (g["upper"][0] - g["lower"][0]) / n * np.arange(n)
            for rec, t in zip(U, times):
                ax.plot(x, rec, lw=0.9, label=f"t = {t:.3g}")
            finite = U[np.isfinite(U)]
            if finite.size:
                lo, hi = np.percentile(finite, [1, 99])
                pad = 0.1 * (hi - lo + 1e-12)
                ax.set_ylim(lo - pad, hi + pad)
            ax.set_xlabel("x")
            ax.legend(fontsize=7)
        else:
            lo = [np.nanpercentile(r, 1) for r in U]
            hi = [np.nanpercentile(r, 99) for r in U]
            ax.fill_between(times, lo, hi, alpha=0.4, label="1-99 percentile of U")
            ax.set_xlabel("t")
            ax.legend()
        ax.set_ylabel("U")
        ax.set_title(f"{man['scenario']}: quantum potential")
        fig.tight_layout()
        _save(fig, path)
    return path


def export_plots(run_dir) -> tuple[list[Path], list[str]]:
    """Write the figures for ``run_dir``; returns ``(files, notices)``.

    Raises :class:`PlotError` when the manifest or an artifact promised by it
    is missing.
    """
    run = Path(run_dir)
    man = json.loads(_require(run / MANIFEST, "run manifest").read_text())
    out = run / "plots"
    out.mkdir(exist_ok=True)
    notices: list[str] = []
    files = []
    for fn in (_density_paths, _ks, _quantum_potential):
        p = fn(run, man, out, notices)
        if p is not None:
            files.append(p)
    return files, notices
