"""Compiled vs NumPy kernels: off-grid interpolation and ensemble integration.

Usage::

    python benchmarks/bench_kernels.py [--n 2000] [--repeat 3] [--json out.json]

Both backends are run on the same inputs; the script also checks that their
outputs are bitwise identical.
"""
from __future__ import annotations

import argparse
import json
import time

import numpy as np

from pilotwave import GridSpec, PropagatorSpec, evolve, init_gaussian, make_grid
from pilotwave.ensemble import EnsembleSpec, integrate_ensemble, sample_equilibrium
from pilotwave.guidance import guidance_fields
from pilotwave.kernels import get_backend


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return min(times), out


def cases():
    g1 = make_grid(GridSpec((-32.0,), (32.0,), (256,)))
    s1 = evolve(init_gaussian(g1, 0.0, 1.0, 1.0), None, PropagatorSpec("split-step", 1e-3, 2.0, 10))
    g2 = make_grid(GridSpec((-12.0, -12.0), (12.0, 12.0), (128, 128)))
    s2 = evolve(init_gaussian(g2, (0.0, 0.0), (1.0, 1.5), (1.0, 0.0)), None, PropagatorSpec("split-step", 1e-3, 1.0, 10))
    return {"1d": s1, "2d": s2}


def run(n, repeat):
    rows = []
    for name, series in cases().items():
        grid = series.grid
        pts = sample_equilibrium(series.frame(0), n, 7)
        fields = guidance_fields(series)
        t_mid = 0.5 * float(series.times[1])
        for label, call in (
            ("interpolate", lambda b: get_backend(b).interpolate(fields, series.times, grid.lower, grid.dx,
                                                                 grid.shape, grid.periodic, t_mid, pts)),
            ("integrate", lambda b: integrate_ensemble(series, pts, EnsembleSpec(n, 7), backend=b).paths),
        ):
            res = {}
            for backend in ("numpy", "cython"):
                try:
                    get_backend(backend)
                except ImportError:
                    continue
                res[backend] = best_of(lambda: call(backend), repeat)
            row = {"case": name, "kernel": label, "n": n}
            row.update({f"{b}_s": round(t, 5) for b, (t, _) in res.items()})
            if len(res) == 2:
                a, b = res["numpy"][1], res["cython"][1]
                row["speedup"] = round(res["numpy"][0] / res["cython"][0], 2)
                row["identical"] = bool(np.array_equal(a, b, equal_nan=True))
            rows.append(row)
    return rows


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=2000)
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--json")
    args = ap.parse_args()
    rows = run(args.n, args.repeat)
    print(f"{'case':5s} {'kernel':12s} {'numpy [s]':>10s} {'cython [s]':>11s} {'speedup':>8s} identical")
    for r in rows:
        print(f"{r['case']:5s} {r['kernel']:12s} {r.get('numpy_s', float('nan')):10.4f} "
              f"{r.get('cython_s', float('nan')):11.4f} {r.get('speedup', float('nan')):8.2f} {r.get('identical', '-')}")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(rows, fh, indent=2)


if __name__ == "__main__":
    main()
