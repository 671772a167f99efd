"""Guided-particle trajectories on a configuration-space grid.

Wave functions are propagated by split-step Fourier (periodic) or
Crank-Nicolson (1D, hard walls); particle paths follow the first-order
velocity field of the stored frames.  Modules:

- :mod:`pilotwave.state`: grids, wave functions, potentials
- :mod:`pilotwave.propagator`: time evolution and frame storage
- :mod:`pilotwave.guidance`: velocity field and probability current
- :mod:`pilotwave.ensemble`: equilibrium sampling, path integration, equivariance tests
- :mod:`pilotwave.polar`: amplitude/phase split, quantum potential, classical comparison
- :mod:`pilotwave.measurement`: conditional wave functions and the pointer experiment
- :mod:`pilotwave.harness`: scenario configs, runner, plots and the ``pilotwave`` CLI
"""
from .state import (
    GridSpec,
    Grid,
    PhysicalParams,
    Potential,
    SpinorWaveFunction,
    WaveFunction,
    make_grid,
    init_gaussian,
    init_plane_wave,
    density,
    norm,
    inner,
    superpose,
)
from .propagator import FrameSeries, PropagatorSpec, evolve, energy
from .guidance import NodePolicy, velocity_grid, velocity_at, current_grid
from .ensemble import EnsembleSpec, TrajectorySet, sample_equilibrium, integrate_ensemble, equivariance_check
from .kernels import BACKEND

__version__ = "0.1.0"

__all__ = [
    "GridSpec",
    "Grid",
    "PhysicalParams",
    "Potential",
    "WaveFunction",
    "SpinorWaveFunction",
    "make_grid",
    "init_gaussian",
    "init_plane_wave",
    "density",
    "norm",
    "inner",
    "superpose",
    "FrameSeries",
    "PropagatorSpec",
    "evolve",
    "energy",
    "NodePolicy",
    "velocity_grid",
    "velocity_at",
    "current_grid",
    "EnsembleSpec",
    "TrajectorySet",
    "sample_equilibrium",
    "integrate_ensemble",
    "equivariance_check",
    "BACKEND",
    "__version__",
]
