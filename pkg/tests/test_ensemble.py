import warnings

import numpy as np
import pytest

import oracles
from pilotwave.ensemble import (EnsembleSpec, InsufficientSamplesError, SamplingError, TrajectorySet,
                                equivariance_check, integrate_ensemble, integrate_trajectory, non_crossing_check,
                                sample_equilibrium)
from pilotwave.guidance import series_from_states
from pilotwave.propagator import PropagatorSpec, evolve
from pilotwave.state import GridSpec, PhysicalParams, Potential, WaveFunction, init_gaussian, make_grid


def quiet_evolve(*a, **kw):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return evolve(*a, **kw)


@pytest.fixture(scope="module")
def free():
    g = make_grid(GridSpec((-32.0,), (32.0,), (512,)))
    return quiet_evolve(init_gaussian(g, 0.0, 1.0), None, PropagatorSpec("split-step", 1e-3, 2.0, 10))


class TestSampling:
    def test_mean_and_spread(self):
        g = make_grid(GridSpec((-10.0,), (10.0,), (512,)))
        psi = init_gaussian(g, 1.5, 0.8)
        n = 20000
        q = sample_equilibrium(psi, n, 7)[:, 0]
        assert abs(q.mean() - 1.5) < 4 * 0.8 / np.sqrt(n)
        assert abs(q.std() / 0.8 - 1) < 0.02
        assert oracles.ks_vs_normal(q, 1.5, 0.8) < oracles.ks_critical(n, 0.001)

    def test_2d_marginals(self):
        g = make_grid(GridSpec((-8.0, -8.0), (8.0, 8.0), (128, 128)))
        psi = init_gaussian(g, (1.0, -1.0), (1.0, 0.6))
        q = sample_equilibrium(psi, 5000, 3)
        assert q.shape == (5000, 2)
        assert oracles.ks_vs_normal(q[:, 0], 1.0, 1.0) < oracles.ks_critical(5000, 0.001)
        assert oracles.ks_vs_normal(q[:, 1], -1.0, 0.6) < oracles.ks_critical(5000, 0.001)

    def test_single_draw(self):
        psi = init_gaussian(make_grid(GridSpec((-10.0,), (10.0,), (256,))), 0.0, 1.0)
        q = sample_equilibrium(psi, 1, 0)
        assert q.shape == (1, 1)

    def test_prefix_and_streams(self):
        psi = init_gaussian(make_grid(GridSpec((-10.0,), (10.0,), (256,))), 0.0, 1.0)
        a = sample_equilibrium(psi, 50, 11)
        b = sample_equilibrium(psi, 20, 11)
        c = sample_equilibrium(psi, 30, 11, first_stream=20)
        assert np.array_equal(a[:20], b)
        assert np.array_equal(a[20:], c)
        assert not np.array_equal(a, sample_equilibrium(psi, 50, 12))

    def test_low_acceptance(self):
        g = make_grid(GridSpec((-100.0,), (100.0,), (1 << 17,)))
        psi = init_gaussian(g, 0.0, 4 * g.dx[0])
        with pytest.raises(SamplingError):
            sample_equilibrium(psi, 10, 0)


class TestPaths:
    def test_ground_state_is_static(self):
        g = make_grid(GridSpec((-10.0,), (10.0,), (256,)))
        psi = init_gaussian(g, 0.0, np.sqrt(0.5))
        s = quiet_evolve(psi, Potential("harmonic"), PropagatorSpec("split-step", 1e-3, 2.0, 10))
        t = integrate_ensemble(s, [[-1.0], [0.3], [1.7]], EnsembleSpec(3, base_dt=1e-2))
        # the discrete ground state differs from the continuum one at O(dt^2, dx^4)
        assert np.max(np.abs(t.paths[:, :, 0] - t.paths[:, :1, 0])) < 1e-6

    def test_free_spreading_path(self, free):
        t = integrate_trajectory(free, [1.0], EnsembleSpec(1, base_dt=1e-2))
        assert abs(t.paths[0, -1, 0] - np.sqrt(2)) < 1e-4
        assert np.max(np.abs(t.paths[0, :, 0] - oracles.free_bohm_path(1.0, free.times))) < 1e-4

    def test_moving_packet(self):
        g = make_grid(GridSpec((-40.0,), (40.0,), (1024,)))
        s = quiet_evolve(init_gaussian(g, -5.0, 2.0, 3.0), None, PropagatorSpec("split-step", 1e-3, 2.0, 5))
        q0 = np.array([[-6.0], [-5.0], [-3.5]])
        t = integrate_ensemble(s, q0, EnsembleSpec(3, base_dt=5e-3))
        for j in range(3):
            ref = oracles.free_bohm_path(q0[j, 0], s.times, -5.0, 2.0, 3.0)
            assert np.max(np.abs(t.paths[j, :, 0] - ref)) < 1e-4

    def test_base_dt_converged(self, free):
        a = integrate_trajectory(free, [1.0], EnsembleSpec(1, base_dt=1e-2)).paths
        b = integrate_trajectory(free, [1.0], EnsembleSpec(1, base_dt=1e-3)).paths
        assert np.max(np.abs(a - b)) < 1e-8

    def test_base_dt_exceeds_spacing(self, free):
        with pytest.raises(ValueError):
            integrate_trajectory(free, [1.0], EnsembleSpec(1, base_dt=0.5))

    def test_single_member_matches_ensemble(self, free):
        pts = np.linspace(-2, 2, 7)[:, None]
        ens = integrate_ensemble(free, pts, EnsembleSpec(7, base_dt=1e-2))
        one = integrate_trajectory(free, pts[3], EnsembleSpec(1, base_dt=1e-2))
        assert np.array_equal(one.paths[0], ens.paths[3])

    def test_permutation_invariant(self, free):
        pts = np.linspace(-2, 2, 9)[:, None]
        perm = np.random.default_rng(1).permutation(9)
        a = integrate_ensemble(free, pts, EnsembleSpec(9, base_dt=1e-2))
        b = integrate_ensemble(free, pts[perm], EnsembleSpec(9, base_dt=1e-2))
        assert np.array_equal(a.paths[perm], b.paths)

    def test_thread_independent(self, free):
        pts = np.linspace(-2, 2, 33)[:, None]
        a = integrate_ensemble(free, pts, EnsembleSpec(33, base_dt=1e-2))
        b = integrate_ensemble(free, pts, EnsembleSpec(33, base_dt=1e-2, n_threads=3))
        assert np.array_equal(a.paths, b.paths)

    def test_node_start_is_recorded(self):
        g = make_grid(GridSpec((-10.0,), (10.0,), (256,)))
        x = g.axes[0]
        psi = WaveFunction.from_array(g, PhysicalParams(), (x * np.exp(-(x**2) / 2)).astype(complex))
        s = series_from_states([psi, psi.with_amplitudes(psi.amplitudes, time=0.1)], times=[0.0, 0.1])
        t = integrate_ensemble(s, [[0.0], [1.0]], EnsembleSpec(2, base_dt=0.01))
        assert t.status_names() == ["node_abort", "ok"]
        assert t.counts() == {"ok": 1, "node_abort": 1, "boundary_exit": 0}

    def test_start_outside(self, free):
        with pytest.raises(ValueError):
            integrate_trajectory(free, [40.0], EnsembleSpec(1))

    def test_spec_validation(self):
        for kw in ({"n_trajectories": 0}, {"integrator": "euler"}, {"base_dt": 0.0},
                   {"node_retry_shrink": 1.0}, {"max_retries": -1}, {"master_seed": -1}):
            with pytest.raises(ValueError):
                EnsembleSpec(**kw)


class TestStatistics:
    @pytest.fixture(scope="class")
    def ens(self, free):
        n = 4000
        pts = sample_equilibrium(free.frame(0), n, 2024)
        return integrate_ensemble(free, pts, EnsembleSpec(n, base_dt=1e-2))

    def test_initial_ks(self, ens, free):
        rep = equivariance_check(ens, free, [0.0])
        assert rep.checkpoints[0]["ks"][0] < 1.63 / np.sqrt(len(ens))

    def test_equivariant_in_time(self, ens, free):
        rep = equivariance_check(ens, free)
        assert rep.passed
        assert len(rep.checkpoints) == len(free)

    def test_shifted_ensemble_fails(self, ens, free):
        shifted = TrajectorySet(ens.paths + 1.0, ens.times, ens.status, ens.streams, ens.wraps, ens.clamps, ens.grid)
        rep = equivariance_check(shifted, free, [0.0])
        assert not rep.passed
        # a one-sigma shift of a normal sample has KS distance 2 Phi(1/2) - 1 = 0.383
        assert rep.max_ks() > 0.2

    def test_insufficient(self, ens, free):
        with pytest.raises(InsufficientSamplesError):
            equivariance_check(ens.subset(np.arange(50)), free)

    def test_non_crossing(self, ens):
        assert non_crossing_check(ens)

    def test_crossing_detected(self, free):
        t = integrate_ensemble(free, [[-1.0], [1.0]], EnsembleSpec(2, base_dt=1e-2))
        swapped = t.paths.copy()
        swapped[:, -1] = swapped[::-1, -1]
        bad = TrajectorySet(swapped, t.times, t.status, t.streams, t.wraps, t.clamps, t.grid)
        assert not non_crossing_check(bad)
        assert non_crossing_check(t.subset([0]))

    def test_csv(self, ens, tmp_path):
        p = ens.subset(np.arange(5)).to_csv(tmp_path / "t.csv")
        lines = p.read_text().splitlines()
        assert lines[0] == "path_id,time,q0,status"
        assert len(lines) == 1 + 5 * len(ens.times)
