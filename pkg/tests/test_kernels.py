import json
import os
import subprocess
import sys
import warnings

import numpy as np
import pytest

from pilotwave import kernels
from pilotwave.ensemble import EnsembleSpec, integrate_ensemble, sample_equilibrium
from pilotwave.guidance import guidance_fields
from pilotwave.propagator import PropagatorSpec, evolve
from pilotwave.state import GridSpec, Potential, init_gaussian, make_grid

try:
    kernels.get_backend("cython")
    HAVE_EXT = True
except ImportError:
    HAVE_EXT = False

needs_ext = pytest.mark.skipif(not HAVE_EXT, reason="compiled kernels not built")


def series(dim, boundary="periodic"):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        if dim == 1:
            g = make_grid(GridSpec((-16.0,), (16.0,), (256,), boundary))
            psi = init_gaussian(g, -1.0, 1.0, 1.5)
            method = "split-step" if boundary == "periodic" else "crank-nicolson"
            return evolve(psi, Potential("harmonic", {"omega": 0.3}), PropagatorSpec(method, 1e-3, 0.5, 10))
        g = make_grid(GridSpec((-8.0, -8.0), (8.0, 8.0), (64, 64)))
        psi = init_gaussian(g, (0.5, -0.5), (1.0, 1.2), (1.0, -0.5))
        return evolve(psi, None, PropagatorSpec("split-step", 1e-3, 0.3, 10))


class TestInterpolation:
    def test_exact_on_nodes(self):
        s = series(1)
        F = guidance_fields(s)
        g = s.grid
        pts = g.axes[0][::17][:, None]
        out = kernels.interpolate(F, s.times, g.lower, g.dx, g.shape, g.periodic, float(s.times[3]), pts)
        assert np.max(np.abs(out[:, 0] - F[3, 0, ::17])) < 1e-14

    def test_cubic_polynomial_reproduced(self):
        g = make_grid(GridSpec((0.0,), (1.0,), (64,), "dirichlet"))
        x = g.axes[0]
        f = (1 + 2 * x - 3 * x**2 + 0.5 * x**3).astype(complex)
        F = np.stack([f[None], f[None]])
        q = np.linspace(0.1, 0.9, 13)[:, None]
        out = kernels.interpolate(F, np.array([0.0, 1.0]), g.lower, g.dx, g.shape, False, 0.4, q)
        exact = 1 + 2 * q[:, 0] - 3 * q[:, 0] ** 2 + 0.5 * q[:, 0] ** 3
        assert np.max(np.abs(out[:, 0] - exact)) < 1e-13

    def test_linear_in_time(self):
        g = make_grid(GridSpec((0.0,), (1.0,), (32,)))
        F = np.stack([np.full((1, 32), 1.0 + 0j), np.full((1, 32), 3.0 + 0j)])
        out = kernels.interpolate(F, np.array([0.0, 2.0]), g.lower, g.dx, g.shape, True, 0.5, [[0.3]])
        assert out[0, 0] == pytest.approx(1.5)


@needs_ext
class TestBackendParity:
    @pytest.mark.parametrize("dim,boundary", [(1, "periodic"), (1, "dirichlet"), (2, "periodic")])
    def test_interpolate_bitwise(self, dim, boundary):
        s = series(dim, boundary)
        F = guidance_fields(s)
        g = s.grid
        rng = np.random.default_rng(0)
        pts = rng.uniform(np.asarray(g.lower) + 1, np.asarray(g.upper) - 1, size=(200, dim))
        args = (F, s.times, g.lower, g.dx, g.shape, g.periodic, 0.137, pts)
        a = kernels.get_backend("numpy").interpolate(*args)
        b = kernels.get_backend("cython").interpolate(*args)
        assert np.array_equal(a, b)

    @pytest.mark.parametrize("dim", [1, 2])
    def test_integrate_bitwise(self, dim):
        s = series(dim)
        pts = sample_equilibrium(s.frame(0), 300, 9)
        spec = EnsembleSpec(300, base_dt=5e-3)
        a = integrate_ensemble(s, pts, spec, backend="numpy")
        b = integrate_ensemble(s, pts, spec, backend="cython")
        assert np.array_equal(a.paths, b.paths, equal_nan=True)
        assert np.array_equal(a.status, b.status)
        assert np.array_equal(a.wraps, b.wraps) and np.array_equal(a.clamps, b.clamps)

    def test_threads_bitwise(self):
        s = series(2)
        pts = sample_equilibrium(s.frame(0), 200, 4)
        a = integrate_ensemble(s, pts, EnsembleSpec(200, base_dt=5e-3, n_threads=1), backend="cython")
        b = integrate_ensemble(s, pts, EnsembleSpec(200, base_dt=5e-3, n_threads=4), backend="cython")
        assert np.array_equal(a.paths, b.paths, equal_nan=True)


def test_unknown_backend():
    with pytest.raises(ValueError):
        kernels.get_backend("fortran")


def test_pure_environment_selects_numpy():
    code = "import json, pilotwave.kernels as k; print(json.dumps(k.BACKEND))"
    env = {**os.environ, "PILOTWAVE_PURE": "1"}
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert json.loads(out.stdout) == "numpy"
