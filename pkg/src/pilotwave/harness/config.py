"""Scenario configuration: TOML parsing, validation and canonical form.

The grammar is documented in ``docs/formats.md``.  Parsing never stops at
the first problem: every validation error is collected and reported
together as ``section.key: message`` lines.
"""
from __future__ import annotations

import math
import re
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import tomli_w

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

from ..state import GridSpec, PhysicalParams, Potential

__all__ = ["ConfigError", "ScenarioConfig", "parse_config", "load_config", "canonical_dict", "canonical_toml",
           "ANALYSES", "INITIAL_KINDS"]

ANALYSES = ("equivariance", "polar", "classical-limit", "measurement", "nonlocality", "velocity")
INITIAL_KINDS = ("gaussian", "superposition", "two-particle", "spinor")
_NEEDS_EVOLUTION = {"equivariance", "polar"}
_POTENTIAL_KEYS = {
    "free": {},
    "harmonic": {"omega": "vec", "center": "vec"},
    "quartic": {"a2": "float", "a4": "float", "center": "float"},
    "barrier": {"height": "float", "width": "float", "center": "float", "axis": "int"},
    "double_slit": {"separation": "float", "slit_width": "float", "wall_position": "float",
                    "wall_height": "float", "wall_thickness": "float"},
    "tabulated": {"file": "str", "values": "list"},
}
_REQUIRED_POTENTIAL = {
    "barrier": ("height", "width"),
    "double_slit": ("separation", "slit_width", "wall_position", "wall_height"),
}


class ConfigError(ValueError):
    """Syntax or validation failure; ``errors`` lists every problem found."""

    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("invalid scenario configuration:\n" + "\n".join(f"  - {e}" for e in self.errors))


@dataclass
class ScenarioConfig:
    name: str
    seed: int
    description: str
    grid: GridSpec
    params: PhysicalParams
    potential: dict
    initial: dict
    propagator: dict | None
    ensemble: dict
    analyses: dict
    output: dict
    base_dir: Path = field(default=Path("."), compare=False)

    @property
    def dim(self) -> int:
        return len(self.grid.points)

    def potential_object(self) -> Potential:
        d = dict(self.potential)
        kind = d.pop("kind")
        scale = d.pop("scale", 1.0)
        if kind == "tabulated" and "file" in d:
            p = Path(d.pop("file"))
            pot = Potential.from_csv(p if p.is_absolute() else self.base_dir / p)
            return Potential("tabulated", pot.args, scale)
        return Potential(kind, d, scale)


class _Checker:
    def __init__(self):
        self.errors: list[str] = []

    def err(self, path, msg):
        self.errors.append(f"{path}: {msg}")

    def table(self, doc, key, path, required=False):
        v = doc.get(key)
        if v is None:
            if required:
                self.err(path, "missing section")
            return {}
        if not isinstance(v, dict):
            self.err(path, "must be a table")
            return {}
        return v

    def unknown(self, tbl, allowed, path):
        for k in tbl:
            if k not in allowed:
                self.err(f"{path}.{k}", "unknown key")

    def num(self, tbl, key, path, default=None, *, required=False, positive=False, nonneg=False, integer=False):
        p = f"{path}.{key}" if path else key
        if key not in tbl:
            if required:
                self.err(p, "required")
            return default
        v = tbl[key]
        if isinstance(v, bool) or not isinstance(v, (int, float)) or (integer and not isinstance(v, int)):
            self.err(p, f"must be {'an integer' if integer else 'a number'}")
            return default
        if not math.isfinite(v):
            self.err(p, "must be finite")
            return default
        if positive and not v > 0:
            self.err(p, "must be positive")
            return default
        if nonneg and v < 0:
            self.err(p, "must be nonnegative")
            return default
        return int(v) if integer else float(v)

    def vec(self, tbl, key, path, dim, default=None, *, required=False, positive=False):
        p = f"{path}.{key}"
        if key not in tbl:
            if required:
                self.err(p, "required")
            return default
        v = tbl[key]
        if isinstance(v, (int, float)) and not isinstance(v, bool):
            v = [v] * dim
        if not isinstance(v, list) or not all(isinstance(x, (int, float)) and not isinstance(x, bool) for x in v):
            self.err(p, "must be a number or a list of numbers")
            return default
        if len(v) != dim:
            self.err(p, f"needs {dim} entries, got {len(v)}")
            return default
        if not all(math.isfinite(x) for x in v):
            self.err(p, "entries must be finite")
            return default
        if positive and not all(x > 0 for x in v):
            self.err(p, "entries must be positive")
            return default
        return [float(x) for x in v]

    def string(self, tbl, key, path, default=None, *, required=False, choices=None):
        p = f"{path}.{key}" if path else key
        if key not in tbl:
            if required:
                self.err(p, "required")
            return default
        v = tbl[key]
        if not isinstance(v, str):
            self.err(p, "must be a string")
            return default
        if choices is not None and v not in choices:
            self.err(p, f"must be one of {', '.join(choices)}")
            return default
        return v

    def boolean(self, tbl, key, path, default):
        if key not in tbl:
            return default
        v = tbl[key]
        if not isinstance(v, bool):
            self.err(f"{path}.{key}", "must be true or false")
            return default
        return v

    def coefficient(self, tbl, key, path, default=(1.0, 0.0)):
        if key not in tbl:
            return list(default)
        v = tbl[key]
        if isinstance(v, (int, float)) and not isinstance(v, bool):
            return [float(v), 0.0]
        if (isinstance(v, list) and len(v) == 2
                and all(isinstance(x, (int, float)) and not isinstance(x, bool) for x in v)):
            return [float(v[0]), float(v[1])]
        self.err(f"{path}.{key}", "must be a number or [re, im]")
        return list(default)


def _syntax_error(e: Exception) -> ConfigError:
    line = getattr(e, "lineno", None)
    col = getattr(e, "colno", None)
    msg = getattr(e, "msg", None) or str(e)
    if line is None:
        m = re.search(r"line (\d+), column (\d+)", str(e))
        if m:
            line, col = int(m.group(1)), int(m.group(2))
    msg = re.sub(r"\s*\(at line \d+, column \d+\)", "", msg)
    return ConfigError([f"syntax error at line {line}, column {col}: {msg}"])


def _grid(c, doc):
    t = c.table(doc, "grid", "grid", required=True)
    c.unknown(t, {"lower", "upper", "points", "boundary"}, "grid")
    pts = t.get("points")
    if isinstance(pts, int) and not isinstance(pts, bool):
        pts = [pts]
    dim = len(pts) if isinstance(pts, list) else 0
    if not isinstance(pts, list) or not all(isinstance(n, int) and not isinstance(n, bool) for n in pts):
        c.err("grid.points", "required: an integer or list of integers")
        return None
    if not 1 <= dim <= 3:
        c.err("grid.points", f"configuration dimension must be 1-3, got {dim}")
        return None
    ok = True
    for n in pts:
        if n < 16 or n & (n - 1):
            c.err("grid.points", f"{n} is not a power of two >= 16")
            ok = False
    lo = c.vec(t, "lower", "grid", dim, required=True)
    hi = c.vec(t, "upper", "grid", dim, required=True)
    bc = c.string(t, "boundary", "grid", "periodic", choices=("periodic", "dirichlet"))
    if lo is not None and hi is not None and any(h <= l for l, h in zip(lo, hi)):
        c.err("grid", "upper must exceed lower on every axis")
        ok = False
    if bc == "dirichlet" and dim != 1:
        c.err("grid.boundary", "dirichlet walls are supported in 1D only")
        ok = False
    if not ok or lo is None or hi is None or bc is None:
        return None
    return GridSpec(tuple(lo), tuple(hi), tuple(pts), bc)


def _params(c, doc, dim):
    t = c.table(doc, "params", "params")
    c.unknown(t, {"hbar", "masses"}, "params")
    hbar = c.num(t, "hbar", "params", 1.0, positive=True)
    masses = c.vec(t, "masses", "params", dim, [1.0] * dim, positive=True)
    return PhysicalParams(hbar if hbar is not None else 1.0, tuple(masses or [1.0] * dim))


def _potential(c, doc, dim, base_dir):
    t = c.table(doc, "potential", "potential")
    kind = c.string(t, "kind", "potential", "free", choices=tuple(_POTENTIAL_KEYS))
    if kind is None:
        return {"kind": "free", "scale": 1.0}
    keys = _POTENTIAL_KEYS[kind]
    c.unknown(t, {"kind", "scale", *keys}, "potential")
    out = {"kind": kind, "scale": c.num(t, "scale", "potential", 1.0)}
    for k in _REQUIRED_POTENTIAL.get(kind, ()):
        if k not in t:
            c.err(f"potential.{k}", f"required for kind {kind!r}")
    for k, typ in keys.items():
        if k not in t:
            continue
        if typ == "vec":
            v = c.vec(t, k, "potential", dim)
        elif typ == "float":
            v = c.num(t, k, "potential")
        elif typ == "int":
            v = c.num(t, k, "potential", integer=True)
            if v is not None and not 0 <= v < dim:
                c.err(f"potential.{k}", f"axis must lie in 0..{dim - 1}")
        elif typ == "str":
            v = c.string(t, k, "potential")
            if v is not None and not (Path(v) if Path(v).is_absolute() else base_dir / v).exists():
                c.err(f"potential.{k}", f"file {v!r} not found")
        else:
            v = t[k]
            if not isinstance(v, list):
                c.err(f"potential.{k}", "must be a list")
        if v is not None:
            out[k] = v
    if kind == "tabulated" and ("file" in t) == ("values" in t):
        c.err("potential", "tabulated potentials need exactly one of 'file' or 'values'")
    if kind == "double_slit" and dim != 2:
        c.err("potential.kind", "double_slit needs a 2D grid")
    if kind == "quartic" and dim != 1:
        c.err("potential.kind", "quartic acts on axis 0 of a 1D grid")
    return out


def _packet(c, t, path, dim, grid, extra=()):
    c.unknown(t, {"center", "sigma", "momentum", "coefficient", *extra}, path)
    center = c.vec(t, "center", path, dim, required=True)
    sigma = c.vec(t, "sigma", path, dim, required=True, positive=True)
    mom = c.vec(t, "momentum", path, dim, [0.0] * dim)
    if grid is not None and center is not None:
        for k, (x, lo, hi) in enumerate(zip(center, grid.lower, grid.upper)):
            if not lo <= x < hi:
                c.err(f"{path}.center", f"axis {k} value {x} outside the grid [{lo}, {hi})")
    if grid is not None and sigma is not None:
        for k, s in enumerate(sigma):
            dx = (grid.upper[k] - grid.lower[k]) / grid.points[k]
            if s < 4 * dx:
                c.err(f"{path}.sigma", f"axis {k}: sigma {s} under-resolved (needs >= 4*dx = {4 * dx:g})")
    return {"center": center, "sigma": sigma, "momentum": mom}


def _initial(c, doc, dim, grid):
    t = c.table(doc, "initial", "initial", required=True)
    kind = c.string(t, "kind", "initial", "gaussian", choices=INITIAL_KINDS)
    if kind is None:
        return {"kind": "gaussian"}
    out = {"kind": kind}
    if kind == "gaussian":
        out.update(_packet(c, t, "initial", dim, grid, extra=("kind",)))
        return out
    if kind == "spinor":
        c.unknown(t, {"kind", "up", "down"}, "initial")
        for part in ("up", "down"):
            sub = c.table(t, part, f"initial.{part}", required=True)
            if sub:
                pk = _packet(c, sub, f"initial.{part}", dim, grid)
                pk["coefficient"] = c.coefficient(sub, "coefficient", f"initial.{part}")
                out[part] = pk
        return out
    c.unknown(t, {"kind", "terms"}, "initial")
    terms = t.get("terms")
    if not isinstance(terms, list) or not terms or not all(isinstance(x, dict) for x in terms):
        c.err("initial.terms", "required: an array of tables ([[initial.terms]])")
        return out
    out["terms"] = []
    if kind == "two-particle" and dim != 2:
        c.err("initial.kind", "two-particle states need a 2D configuration grid (x1, x2)")
        return out
    sub_grid = None
    for i, term in enumerate(terms):
        p = f"initial.terms[{i}]"
        coef = c.coefficient(term, "coefficient", p)
        if kind == "superposition":
            pk = _packet(c, term, p, dim, grid)
        else:
            c.unknown(term, {"coefficient", "a", "b"}, p)
            pk = {}
            for j, part in enumerate(("a", "b")):
                sub = c.table(term, part, f"{p}.{part}", required=True)
                if sub:
                    if grid is not None:
                        sub_grid = GridSpec((grid.lower[j],), (grid.upper[j],), (grid.points[j],), grid.boundary)
                    pk[part] = _packet(c, sub, f"{p}.{part}", 1, sub_grid)
        pk["coefficient"] = coef
        out["terms"].append(pk)
    if all(tm["coefficient"] == [0.0, 0.0] for tm in out["terms"]):
        c.err("initial.terms", "all coefficients vanish")
    return out


def _propagator(c, doc, grid):
    if "propagator" not in doc:
        return None
    t = c.table(doc, "propagator", "propagator")
    c.unknown(t, {"method", "dt", "total_time", "frame_stride"}, "propagator")
    default = "crank-nicolson" if grid is not None and grid.boundary == "dirichlet" else "split-step"
    method = c.string(t, "method", "propagator", default, choices=("split-step", "crank-nicolson"))
    out = {
        "method": method,
        "dt": c.num(t, "dt", "propagator", 1e-3, positive=True),
        "total_time": c.num(t, "total_time", "propagator", 1.0, positive=True),
        "frame_stride": c.num(t, "frame_stride", "propagator", 10, integer=True, positive=True),
    }
    if grid is not None and method is not None:
        if method == "crank-nicolson" and grid.boundary != "dirichlet":
            c.err("propagator.method", "crank-nicolson needs grid.boundary = 'dirichlet'")
        if method == "split-step" and grid.boundary != "periodic":
            c.err("propagator.method", "split-step needs a periodic grid")
    if out["dt"] and out["total_time"] and out["frame_stride"]:
        if out["dt"] * out["frame_stride"] > out["total_time"] * (1 + 1e-9):
            c.err("propagator", "dt * frame_stride exceeds total_time (fewer than two frames)")
    return out


def _ensemble(c, doc):
    t = c.table(doc, "ensemble", "ensemble")
    c.unknown(t, {"n", "integrator", "base_dt", "node_retry_shrink", "max_retries", "eps_rel", "speed_cap"},
              "ensemble")
    out = {
        "n": c.num(t, "n", "ensemble", 1000, integer=True, positive=True),
        "integrator": c.string(t, "integrator", "ensemble", "rk4", choices=("rk4",)),
        "base_dt": c.num(t, "base_dt", "ensemble", 1e-2, positive=True),
        "node_retry_shrink": c.num(t, "node_retry_shrink", "ensemble", 0.5, positive=True),
        "max_retries": c.num(t, "max_retries", "ensemble", 4, integer=True, nonneg=True),
        "eps_rel": c.num(t, "eps_rel", "ensemble", 1e-12, positive=True),
        "speed_cap": c.num(t, "speed_cap", "ensemble", 1e3, positive=True),
    }
    if out["node_retry_shrink"] is not None and not out["node_retry_shrink"] < 1:
        c.err("ensemble.node_retry_shrink", "must lie in (0, 1)")
    return out


_ANALYSIS_KEYS = {
    "equivariance": {"checkpoints": "int+", "alpha": "p", "chi2_alpha": "p", "ks_limit": "pos"},
    "polar": {"checkpoints": "int+", "q0": "vec", "second_order_tolerance": "pos", "hj_tolerance": "pos",
              "mismatch_v0": "vec"},
    "classical-limit": {"scale_factors": "list+", "frame_spacing": "pos", "width_exponent": "nonneg"},
    "measurement": {"weights": "plist", "runs": "int+", "coupling": "pos", "interaction_time": "pos",
                    "drift_time": "pos", "dt": "pos", "frame_stride": "int+", "base_dt": "pos",
                    "overlap_threshold": "pos", "revival": "bool", "revival_trap": "pos", "revival_drift": "pos",
                    "revival_runs": "int+"},
    "nonlocality": {"q1": "float", "q2": "list", "min_spread": "pos", "product_limit": "pos"},
    "velocity": {},
}


def _analysis(c, doc, dim, initial, has_prop):
    t = c.table(doc, "analysis", "analysis")
    run = t.get("run", [])
    allowed = {"run", *ANALYSES}
    c.unknown(t, allowed, "analysis")
    if not isinstance(run, list) or not all(isinstance(x, str) for x in run):
        c.err("analysis.run", "must be a list of analysis names")
        run = []
    out = {}
    for name in run:
        if name not in ANALYSES:
            c.err("analysis.run", f"unknown analysis {name!r}; choose from {', '.join(ANALYSES)}")
            continue
        if name in out:
            c.err("analysis.run", f"{name!r} listed twice")
            continue
        sub = c.table(t, name, f"analysis.{name}")
        path = f"analysis.{name}"
        c.unknown(sub, set(_ANALYSIS_KEYS[name]), path)
        opts = {}
        for k, typ in _ANALYSIS_KEYS[name].items():
            if k not in sub:
                continue
            if typ == "int+":
                v = c.num(sub, k, path, integer=True, positive=True)
            elif typ == "pos":
                v = c.num(sub, k, path, positive=True)
            elif typ == "nonneg":
                v = c.num(sub, k, path, nonneg=True)
            elif typ == "float":
                v = c.num(sub, k, path)
            elif typ == "p":
                v = c.num(sub, k, path, positive=True)
                if v is not None and not v < 1:
                    c.err(f"{path}.{k}", "must lie in (0, 1)")
            elif typ == "vec":
                v = c.vec(sub, k, path, dim)
            elif typ == "bool":
                v = c.boolean(sub, k, path, None)
            else:
                v = sub[k]
                if (not isinstance(v, list) or not v
                        or not all(isinstance(x, (int, float)) and not isinstance(x, bool) for x in v)):
                    c.err(f"{path}.{k}", "must be a nonempty list of numbers")
                    v = None
                else:
                    v = [float(x) for x in v]
                    if typ == "list+" and not all(x > 0 for x in v):
                        c.err(f"{path}.{k}", "entries must be positive")
                    if typ == "plist" and not all(0 < x <= 1 for x in v):
                        c.err(f"{path}.{k}", "entries must lie in (0, 1]")
            if v is not None:
                opts[k] = v
        out[name] = opts
        if name in _NEEDS_EVOLUTION and not has_prop:
            c.err(f"analysis.{name}", "needs a [propagator] section")
    kind = initial.get("kind")
    if kind == "spinor" and set(out) - {"velocity"}:
        c.err("analysis.run", "spinor states support only the 'velocity' analysis (no spinor propagation)")
    if "nonlocality" in out:
        if dim != 2:
            c.err("analysis.nonlocality", "needs a two-particle (2D) configuration grid")
        for k in ("q1", "q2"):
            if k not in out["nonlocality"]:
                c.err(f"analysis.nonlocality.{k}", "required")
    if "measurement" in out:
        if kind != "two-particle":
            c.err("analysis.measurement", "needs initial.kind = 'two-particle' (system x pointer)")
        else:
            _check_pointer_terms(c, initial)
    if "classical-limit" in out:
        if dim != 1 or kind != "gaussian":
            c.err("analysis.classical-limit", "needs a 1D gaussian initial state")
        if not has_prop:
            c.err("analysis.classical-limit", "needs a [propagator] section (dt, total_time)")
    return out


def _check_pointer_terms(c, initial):
    terms = initial.get("terms") or []
    a_sig = {tuple(tm["a"]["sigma"] or ()) for tm in terms if "a" in tm}
    b = {(tuple(tm["b"]["center"] or ()), tuple(tm["b"]["sigma"] or ())) for tm in terms if "b" in tm}
    if len(a_sig) > 1:
        c.err("initial.terms", "measurement branches must share one system width")
    if len(b) > 1:
        c.err("initial.terms", "measurement branches must share one pointer packet")
    if any(tm.get("b", {}).get("center") not in (None, [0.0]) for tm in terms):
        c.err("initial.terms", "the pointer packet must start at y = 0")


def _output(c, doc):
    t = c.table(doc, "output", "output")
    c.unknown(t, {"directory", "save_frames", "frame_every", "csv_checkpoints", "plot_paths"}, "output")
    return {
        "directory": c.string(t, "directory", "output", None),
        "save_frames": c.boolean(t, "save_frames", "output", True),
        "frame_every": c.num(t, "frame_every", "output", 1, integer=True, positive=True),
        "csv_checkpoints": c.num(t, "csv_checkpoints", "output", 11, integer=True, positive=True),
        "plot_paths": c.num(t, "plot_paths", "output", 40, integer=True, positive=True),
    }


def parse_config(text: str, base_dir=".") -> ScenarioConfig:
    """Parse and validate a scenario.  Raises :class:`ConfigError` listing all problems."""
    try:
        doc = tomllib.loads(text)
    except tomllib.TOMLDecodeError as e:
        raise _syntax_error(e) from None
    base_dir = Path(base_dir)
    c = _Checker()
    c.unknown(doc, {"name", "seed", "description", "grid", "params", "potential", "initial", "propagator",
                    "ensemble", "analysis", "output"}, "config")
    name = c.string(doc, "name", "", required=True)
    if name is not None and not re.fullmatch(r"[A-Za-z0-9][A-Za-z0-9_.+-]*", name):
        c.err("name", "use letters, digits and . _ + - only")
    seed = None
    if "seed" not in doc:
        c.err("seed", "required (all randomness derives from it)")
    elif isinstance(doc["seed"], bool) or not isinstance(doc["seed"], int) or not 0 <= doc["seed"] < 2**63:
        c.err("seed", "must be an integer in [0, 2**63)")
    else:
        seed = doc["seed"]
    desc = c.string(doc, "description", "", "")
    grid = _grid(c, doc)
    dim = len(grid.points) if grid is not None else 1
    params = _params(c, doc, dim)
    potential = _potential(c, doc, dim, base_dir)
    initial = _initial(c, doc, dim, grid)
    prop = _propagator(c, doc, grid)
    ens = _ensemble(c, doc)
    analyses = _analysis(c, doc, dim, initial, prop is not None)
    output = _output(c, doc)
    if prop and ens.get("base_dt") and prop["dt"] and prop["frame_stride"] and "equivariance" in analyses:
        spacing = prop["dt"] * prop["frame_stride"]
        if ens["base_dt"] > spacing * (1 + 1e-9):
            c.err("ensemble.base_dt", f"{ens['base_dt']:g} exceeds the frame spacing dt * frame_stride = {spacing:g}")
    if c.errors:
        raise ConfigError(c.errors)
    return ScenarioConfig(name, seed, desc or "", grid, params, potential, initial, prop, ens, analyses, output,
                          base_dir)


def load_config(path) -> ScenarioConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise ConfigError([f"{path}: cannot read ({e.strerror})"]) from None
    return parse_config(text, base_dir=path.parent)


def _clean(v):
    if isinstance(v, dict):
        return {k: _clean(x) for k, x in sorted(v.items()) if x is not None}
    if isinstance(v, (list, tuple)):
        return [_clean(x) for x in v]
    if isinstance(v, np.generic):
        return v.item()
    return v


def canonical_dict(cfg: ScenarioConfig) -> dict:
    """Fully explicit, key-sorted form of a config (defaults filled in)."""
    g = cfg.grid
    d = {
        "name": cfg.name,
        "seed": cfg.seed,
        "description": cfg.description,
        "grid": {"lower": list(g.lower), "upper": list(g.upper), "points": list(g.points), "boundary": g.boundary},
        "params": {"hbar": cfg.params.hbar, "masses": list(cfg.params.masses)},
        "potential": dict(cfg.potential),
        "initial": cfg.initial,
        "ensemble": cfg.ensemble,
        "analysis": {"run": list(cfg.analyses), **cfg.analyses},
        "output": cfg.output,
    }
    if cfg.propagator is not None:
        d["propagator"] = cfg.propagator
    return _clean(d)


def canonical_toml(cfg: ScenarioConfig) -> str:
    return tomli_w.dumps(canonical_dict(cfg))
