"""Execute a scenario: evolve, sample, integrate, analyse, and write a run directory.

Run directory layout::

    manifest.json          config echo, artifact checksums, timings, verdicts
    config.toml            canonical config
    frames/                stored wave-function frames (binary field format)
    trajectories/          dense paths (binary field format)
    trajectories.csv       paths at the CSV checkpoints
    <analysis>.json        one report per analysis (plus extra files)

Checksums cover every artifact except ``manifest.json`` and ``plots/``.
Artifacts never contain timings, thread counts or backend names, so the
checksums depend only on the config and the tool version.
"""
from __future__ import annotations

import gc
import math
import platform
import shutil
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .. import __version__, io, kernels
from ..ensemble import (EnsembleSpec, InsufficientSamplesError, equivariance_check, integrate_ensemble,
                        integrate_trajectory, non_crossing_check, sample_equilibrium)
from ..guidance import NodePolicy, nonlocality_probe, velocity_grid, velocity_spinor_grid
from ..measurement import (PointerExperimentSpec, branch_revival_probe, effective_collapse_report,
                           run_pointer_experiment)
from ..polar import (ClassicalLimitScenario, ComponentWarning, classical_limit_study, hj_residual,
                     polar_decompose, second_order_trajectory)
from ..propagator import PropagatorSpec, evolve
from ..state import (PhysicalParams, SpinorWaveFunction, WaveFunction, init_gaussian, make_grid, GridSpec)
from .config import ScenarioConfig, canonical_dict, canonical_toml

__all__ = ["RunManifest", "RunError", "run_scenario", "build_initial", "verify_run", "MANIFEST"]

MANIFEST = "manifest.json"
_UNHASHED = {MANIFEST}
_UNHASHED_DIRS = {"plots"}


class RunError(RuntimeError):
    """A compute phase failed; ``phase`` names it."""

    def __init__(self, phase: str, exc: BaseException):
        self.phase = phase
        self.cause = exc
        super().__init__(f"{phase}: {type(exc).__name__}: {exc}")


@dataclass
class RunManifest:
    directory: Path
    data: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return bool(self.data.get("passed"))

    @property
    def checksums(self) -> dict:
        return self.data.get("artifacts", {})


def _coef(c):
    return complex(c[0], c[1])


def _gauss(grid, pk, params):
    return init_gaussian(grid, pk["center"], pk["sigma"], pk["momentum"], params)


def build_initial(cfg: ScenarioConfig, grid, params):
    """Wave function described by ``cfg.initial`` (normalized)."""
    ini = cfg.initial
    kind = ini["kind"]
    if kind == "gaussian":
        return _gauss(grid, ini, params)
    if kind == "spinor":
        up = _coef(ini["up"]["coefficient"]) * _gauss(grid, ini["up"], params).amplitudes
        down = _coef(ini["down"]["coefficient"]) * _gauss(grid, ini["down"], params).amplitudes
        return SpinorWaveFunction.from_components(up, down, grid=grid, params=params)
    amps = np.zeros(grid.shape, dtype=np.complex128)
    states = []
    for term in ini["terms"]:
        if kind == "superposition":
            a = _gauss(grid, term, params).amplitudes
        else:
            parts = []
            for j, part in enumerate(("a", "b")):
                g1 = make_grid(GridSpec((grid.lower[j],), (grid.upper[j],), (grid.shape[j],), grid.boundary))
                p1 = PhysicalParams(params.hbar, (params.masses[j],))
                parts.append(_gauss(g1, term[part], p1).amplitudes)
            a = np.multiply.outer(parts[0], parts[1])
        states.append(a)
        amps = amps + _coef(term["coefficient"]) * a
    psi = WaveFunction.from_array(grid, params, amps, 0.0, normalize=True)
    dv = grid.cell_volume
    orth = all(abs(np.vdot(states[i], states[j]) * dv) < 1e-8
               for i in range(len(states)) for j in range(i + 1, len(states)))
    if orth and len(states) > 1:
        w = np.array([abs(_coef(t["coefficient"])) ** 2 for t in ini["terms"]])
        psi.meta["branch_weights"] = (w / w.sum()).tolist()
    return psi


def _checkpoint_frames(nf, count):
    count = max(1, min(int(count), nf))
    return sorted({int(round(x)) for x in np.linspace(0, nf - 1, count)})


def _policy(cfg):
    return NodePolicy(cfg.ensemble["eps_rel"], cfg.ensemble["speed_cap"])


def _ensemble_spec(cfg, threads):
    e = cfg.ensemble
    return EnsembleSpec(e["n"], cfg.seed, e["integrator"], e["base_dt"], e["node_retry_shrink"], e["max_retries"],
                        _policy(cfg), threads)


# ---------------------------------------------------------------- analyses

def _equivariance(cfg, ctx, out):
    opts = cfg.analyses["equivariance"]
    series, tset = ctx["series"], ctx["tset"]
    frames = _checkpoint_frames(len(series), opts.get("checkpoints", 11))
    times = [float(series.times[f]) for f in frames]
    try:
        rep = equivariance_check(tset, series, times, alpha=opts.get("alpha", 0.01),
                                 chi2_alpha=opts.get("chi2_alpha", 1e-3), ks_limit=opts.get("ks_limit"))
    except InsufficientSamplesError as e:
        d = {"passed": False, "error": str(e), "status_counts": tset.counts()}
        io.write_json(out / "equivariance.json", d)
        return d
    d = rep.to_dict()
    d["max_ks"] = rep.max_ks()
    d["status_counts"] = tset.counts()
    d["wraps"] = int(tset.wraps.sum())
    d["clamps"] = int(tset.clamps.sum())
    if series.grid.dim == 1:
        d["non_crossing"] = non_crossing_check(tset)
        d["passed"] = bool(d["passed"] and d["non_crossing"])
    io.write_json(out / "equivariance.json", d)
    return d


def _polar(cfg, ctx, out):
    opts = cfg.analyses["polar"]
    series = ctx["series"]
    policy = _policy(cfg)
    frames = _checkpoint_frames(len(series), opts.get("checkpoints", 5))
    rows, U_rec = [], []
    rec_err = 0.0
    for f in frames:
        psi = series.frame(f)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", ComponentWarning)
            pf = polar_decompose(psi, policy)
        err = float(np.max(np.abs(pf.reconstruct() - psi.amplitudes)[pf.mask]))
        rec_err = max(rec_err, err)
        rho = pf.R**2
        core = pf.mask & (rho >= 1e-4 * rho.max())
        vu = (series.potential + pf.U)[core]
        row = {"time": float(series.times[f]), "frame": int(f), "components": pf.n_components,
               "reconstruction_error": err, "U_min_core": float(np.min(pf.U[core])),
               "U_max_core": float(np.max(pf.U[core])), "V_plus_U_spread_core": float(vu.max() - vu.min())}
        if 0 < f < len(series) - 1:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", ComponentWarning)
                r = hj_residual(series, float(series.times[f]), policy)
            row["hj_residual_max_core"] = float(np.nanmax(np.abs(r[core])))
        rows.append(row)
        U_rec.append(np.where(pf.mask, pf.U, np.nan))
    io.write_fields(out / "polar", np.stack(U_rec), "real-scalar", series.grid,
                    [float(series.times[f]) for f in frames], {"field": "quantum_potential"})
    d = {"checkpoints": rows, "max_reconstruction_error": rec_err}
    passed = rec_err < 1e-12
    tol = opts.get("hj_tolerance")
    if tol is not None:
        hj = max((r["hj_residual_max_core"] for r in rows if "hj_residual_max_core" in r), default=0.0)
        d["max_hj_residual_core"] = hj
        passed &= hj < tol
    if "q0" in opts:
        q0 = opts["q0"]
        ens = EnsembleSpec(1, cfg.seed, base_dt=min(cfg.ensemble["base_dt"], series.frame_spacing),
                           policy=policy)
        first = integrate_trajectory(series, q0, ens)
        second = second_order_trajectory(series, q0, policy=policy, base_dt=ens.base_dt)
        dev = float(np.nanmax(np.abs(second.q - first.paths[0])))
        tol2 = opts.get("second_order_tolerance", 1e-3)
        d["second_order"] = {"q0": q0, "status": second.status, "max_deviation": dev, "tolerance": tol2}
        passed &= second.status == "ok" and first.status[0] == kernels.OK and dev < tol2
        if "mismatch_v0" in opts:
            bad = second_order_trajectory(series, q0, v0=opts["mismatch_v0"], policy=policy, base_dt=ens.base_dt)
            mdev = float(np.nanmax(np.abs(bad.q - first.paths[0])))
            d["second_order"]["mismatch"] = {"v0": opts["mismatch_v0"], "max_deviation": mdev}
            passed &= mdev > 0.1
    d["passed"] = bool(passed)
    io.write_json(out / "polar.json", d)
    return d


def _classical_limit(cfg, ctx, out):
    opts = cfg.analyses["classical-limit"]
    ini = cfg.initial
    prop = cfg.propagator
    m = cfg.params.masses[0]
    sc = ClassicalLimitScenario(
        grid=cfg.grid, potential=cfg.potential_object(), center=ini["center"][0], sigma=ini["sigma"][0],
        velocity=cfg.params.hbar * ini["momentum"][0] / m, hbar=cfg.params.hbar, mass=m, dt=prop["dt"],
        total_time=prop["total_time"], frame_spacing=opts.get("frame_spacing", prop["dt"] * prop["frame_stride"]),
        width_exponent=opts.get("width_exponent", 0.5), policy=_policy(cfg),
    )
    rows = classical_limit_study(sc, opts.get("scale_factors", [1.0, 10.0, 100.0]))
    devs = [r["max_deviation"] for r in rows]
    decreasing = all(np.isfinite(devs)) and all(b < a for a, b in zip(devs, devs[1:]))
    ok = all(r["status"] == "ok" for r in rows)
    d = {"rows": rows, "strictly_decreasing": bool(decreasing), "passed": bool(decreasing and ok)}
    io.write_json(out / "classical_limit.json", d)
    with open(out / "classical_limit.csv", "w") as fh:
        keys = ["scale", "mass", "sigma", "max_deviation", "force_ratio", "frame_spacing", "dt", "status"]
        fh.write(",".join(keys) + "\n")
        for r in rows:
            fh.write(",".join(repr(r[k]) if isinstance(r[k], float) else str(r[k]) for k in keys) + "\n")
    return d


def _pointer_spec(cfg, opts, weight=None, **over):
    terms = cfg.initial["terms"]
    g = cfg.grid
    coefs = [_coef(t["coefficient"]) for t in terms]
    if weight is not None:
        if len(terms) != 2:
            raise ValueError("measurement weights need exactly two branches")
        coefs = [math.sqrt(weight), math.sqrt(1.0 - weight)]
    kw = dict(
        branch_centers=tuple(t["a"]["center"][0] for t in terms),
        coefficients=tuple(coefs),
        system_sigma=terms[0]["a"]["sigma"][0],
        system_mass=cfg.params.masses[0],
        pointer_sigma=terms[0]["b"]["sigma"][0],
        pointer_mass=cfg.params.masses[1],
        x_grid=(g.lower[0], g.upper[0], g.points[0]),
        y_grid=(g.lower[1], g.upper[1], g.points[1]),
        hbar=cfg.params.hbar,
        seed=cfg.seed,
    )
    for k, name in (("coupling", "coupling"), ("interaction_time", "interaction_time"),
                    ("drift_time", "drift_time"), ("dt", "dt"), ("frame_stride", "frame_stride"),
                    ("base_dt", "base_dt"), ("overlap_threshold", "overlap_threshold"), ("runs", "n_runs")):
        if k in opts:
            kw[name] = opts[k]
    kw.update(over)
    return PointerExperimentSpec(**kw)


def _measurement(cfg, ctx, out, threads):
    opts = cfg.analyses["measurement"]
    weights = opts.get("weights", [None])
    root = out / "measurement"
    root.mkdir(exist_ok=True)
    runs = []
    passed = True
    for w in weights:
        spec = _pointer_spec(cfg, opts, w, n_threads=threads)
        exp = run_pointer_experiment(spec)
        s = exp.summary()
        s.pop("spec")
        last = len(exp.series) - 1
        cross, share = [], []
        for p in np.flatnonzero(exp.trajectories.ok):
            r = effective_collapse_report(exp, int(p), frames=[last])
            cross.append(r.cross_mass[0])
            share.append(r.velocity_share[0])
        s["final_cross_branch_mass_max"] = float(np.nanmax(cross)) if cross else None
        s["final_velocity_share_max"] = float(np.nanmax(share)) if share else None
        s["weight"] = None if w is None else float(w)
        ok = (s["born_rule_within_3_sigma"] and s["label_switches"]["while_disjoint"] == 0
              and s["final_overlap"] < spec.overlap_threshold
              and cross and s["final_cross_branch_mass_max"] < 1e-6
              and s["final_velocity_share_max"] < 1e-8)
        s["passed"] = bool(ok)
        passed &= bool(ok)
        tag = "single" if w is None else f"w{w:g}"
        sub = root / tag
        sub.mkdir(exist_ok=True)
        exp.trajectories.to_csv(sub / "trajectories.csv",
                                _checkpoint_frames(len(exp.series), cfg.output["csv_checkpoints"]))
        runs.append(s)
        del exp
        gc.collect()
    d = {"runs": runs}
    if opts.get("revival", False):
        spec = _pointer_spec(cfg, opts, weights[0], pointer_trap=opts.get("revival_trap", 0.75),
                             drift_time=opts.get("revival_drift", 3.5),
                             n_runs=int(opts.get("revival_runs", opts.get("runs", 2000))), n_threads=threads,
                             frame_stride=max(1, int(opts.get("frame_stride", 10)) // 2))
        rev = branch_revival_probe(spec)
        rd = rev.to_dict()
        rd["passed"] = bool(rev.switches_only_during_overlap and rev.revival_switches > 0)
        d["revival"] = rd
        passed &= rd["passed"]
        gc.collect()
    d["passed"] = bool(passed)
    io.write_json(out / "measurement.json", d)
    return d


def _nonlocality(cfg, ctx, out):
    opts = cfg.analyses["nonlocality"]
    psi = ctx["psi0"]
    policy = _policy(cfg)
    res = nonlocality_probe(psi, opts["q1"], opts["q2"], policy)
    d = {"q1": res.q1, "q2": res.q2.tolist(), "velocities": res.velocities.tolist(), "spread": res.spread}
    lim = opts.get("product_limit", 1e-12)
    terms = cfg.initial.get("terms", [])
    if len(terms) > 1:
        # first term alone is a product state, whose spread must vanish; it is
        # probed within two widths of its own packet centres
        grid, params = psi.grid, psi.params
        sub = ScenarioConfig(**{**cfg.__dict__, "initial": {"kind": "two-particle", "terms": terms[:1]}})
        a, b = terms[0]["a"], terms[0]["b"]
        rq2 = (b["center"][0] + b["sigma"][0] * np.linspace(-2.0, 2.0, 9)).tolist()
        ref = nonlocality_probe(build_initial(sub, grid, params), a["center"][0], rq2, policy)
        d["product_reference"] = {"q1": a["center"][0], "q2": rq2, "spread": ref.spread}
        d["product_reference_spread"] = ref.spread
        d["passed"] = bool(res.spread > opts.get("min_spread", 0.1) and ref.spread < lim)
    else:
        d["passed"] = bool(res.spread < lim)
    io.write_json(out / "nonlocality.json", d)
    return d


def _velocity(cfg, ctx, out):
    psi = ctx["psi0"]
    policy = _policy(cfg)
    vf = velocity_spinor_grid(psi, policy=policy) if isinstance(psi, SpinorWaveFunction) else velocity_grid(
        psi, policy=policy)
    io.write_fields(out / "velocity", vf.v[None], "real-vector", psi.grid, [0.0])
    speed = np.sqrt(np.sum(vf.v**2, axis=0))
    d = {"max_speed": float(speed[vf.mask].max()) if vf.mask.any() else 0.0,
         "masked_points": int((~vf.mask).sum()), "clamped_points": vf.clamped,
         "passed": bool(np.all(np.isfinite(vf.v)))}
    io.write_json(out / "velocity.json", d)
    return d


# ---------------------------------------------------------------- driver

def _artifacts(directory: Path) -> dict:
    out = {}
    for p in sorted(directory.rglob("*")):
        if not p.is_file():
            continue
        rel = p.relative_to(directory)
        if rel.as_posix() in _UNHASHED or rel.parts[0] in _UNHASHED_DIRS:
            continue
        out[rel.as_posix()] = io.sha256_file(p)
    return out


def run_scenario(cfg: ScenarioConfig, out_dir=None, *, threads: int = 1, backend: str | None = None,
                 log=None) -> RunManifest:
    """Run every phase of ``cfg`` and write the run directory.

    Raises :class:`RunError` naming the failed phase; analysis failures are
    recorded in the manifest (``passed = False``) rather than raised.
    """
    log = log or (lambda msg: None)
    out = Path(out_dir or cfg.output.get("directory") or Path("runs") / cfg.name)
    if out.exists():
        shutil.rmtree(out)
    out.mkdir(parents=True)
    timings = {}
    ctx = {"warnings": []}
    phase = "setup"

    def tick(name, t0):
        timings[name] = round(time.perf_counter() - t0, 6)

    try:
        t0 = time.perf_counter()
        (out / "config.toml").write_text(canonical_toml(cfg))
        grid = make_grid(cfg.grid)
        params = cfg.params
        psi0 = build_initial(cfg, grid, params)
        ctx["psi0"] = psi0
        tick("setup", t0)

        analyses = cfg.analyses
        needs_series = bool({"equivariance", "polar"} & set(analyses))
        if needs_series:
            phase = "evolve"
            log(f"[{cfg.name}] evolving")
            t0 = time.perf_counter()
            p = cfg.propagator
            spec = PropagatorSpec(p["method"], p["dt"], p["total_time"], p["frame_stride"])
            with warnings.catch_warnings(record=True) as caught:
                warnings.simplefilter("always")
                series = evolve(psi0, cfg.potential_object(), spec)
            ctx["warnings"] += [f"evolve: {w.message}" for w in caught]
            ctx["series"] = series
            if cfg.output["save_frames"]:
                series.save(out / "frames", every=cfg.output["frame_every"])
            tick("evolve", t0)

        if "equivariance" in analyses:
            phase = "sample"
            log(f"[{cfg.name}] sampling {cfg.ensemble['n']} configurations")
            t0 = time.perf_counter()
            ens = _ensemble_spec(cfg, threads)
            pts = sample_equilibrium(psi0, ens.n_trajectories, cfg.seed)
            tick("sample", t0)
            phase = "integrate"
            log(f"[{cfg.name}] integrating paths")
            t0 = time.perf_counter()
            tset = integrate_ensemble(series, pts, ens, streams=np.arange(ens.n_trajectories), backend=backend)
            ctx["tset"] = tset
            tset.save(out / "trajectories")
            tset.to_csv(out / "trajectories.csv", _checkpoint_frames(len(series), cfg.output["csv_checkpoints"]))
            tick("integrate", t0)

        verdicts = {}
        runners = {
            "equivariance": _equivariance,
            "polar": _polar,
            "classical-limit": _classical_limit,
            "nonlocality": _nonlocality,
            "velocity": _velocity,
        }
        for name in analyses:
            phase = f"analysis:{name}"
            log(f"[{cfg.name}] analysis {name}")
            t0 = time.perf_counter()
            with warnings.catch_warnings(record=True) as caught:
                warnings.simplefilter("always")
                if name == "measurement":
                    d = _measurement(cfg, ctx, out, threads)
                else:
                    d = runners[name](cfg, ctx, out)
            ctx["warnings"] += [f"{name}: {w.message}" for w in caught if not issubclass(w.category, ComponentWarning)]
            verdicts[name] = bool(d["passed"])
            tick(name, t0)
    except Exception as e:  # noqa: BLE001 - re-raised with the phase attached
        raise RunError(phase, e) from e

    data = {
        "tool": "pilotwave",
        "version": __version__,
        "scenario": cfg.name,
        "config": canonical_dict(cfg),
        "artifacts": _artifacts(out),
        "analyses": verdicts,
        "passed": all(verdicts.values()),
        "warnings": sorted(set(ctx["warnings"])),
        "timings": timings,
        "runtime": {"backend": backend or kernels.BACKEND, "threads": threads, "python": platform.python_version()},
    }
    io.write_json(out / MANIFEST, data)
    return RunManifest(out, data)


def verify_run(directory) -> tuple[bool, list[str]]:
    """Recompute artifact checksums; returns ``(ok, problems)``."""
    directory = Path(directory)
    man = directory / MANIFEST
    if not man.exists():
        raise FileNotFoundError(f"{man} not found")
    import json

    with open(man) as fh:
        data = json.load(fh)
    expected = data.get("artifacts", {})
    actual = _artifacts(directory)
    problems = []
    for rel, h in expected.items():
        if rel not in actual:
            problems.append(f"missing artifact {rel}")
        elif actual[rel] != h:
            problems.append(f"checksum mismatch {rel}")
    for rel in actual:
        if rel not in expected:
            problems.append(f"unlisted file {rel}")
    return not problems, problems
