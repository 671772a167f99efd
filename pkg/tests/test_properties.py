"""Invariants checked over generated inputs."""
import warnings

import numpy as np
from hypothesis import assume, given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from pilotwave.ensemble import sample_equilibrium
from pilotwave.guidance import NodePolicy, current_grid, series_from_states, velocity_at, velocity_grid
from pilotwave.harness import canonical_toml, parse_config
from pilotwave.io import read_fields, write_fields
from pilotwave.propagator import step_split_spectral
from pilotwave.state import GridSpec, PhysicalParams, init_gaussian, inner, make_grid, norm, superpose

G1 = make_grid(GridSpec((-10.0,), (10.0,), (128,)))
GW = make_grid(GridSpec((-20.0,), (20.0,), (256,)))  # packet tails far below roundoff at the seam
G2 = make_grid(GridSpec((-5.0, -5.0), (5.0, 5.0), (64, 64)))

centers = st.floats(-2.0, 2.0)
sigmas = st.floats(0.7, 2.0)
momenta = st.floats(-3.0, 3.0)
phases = st.floats(0.0, 2 * np.pi)


def packet(c, s, k, grid=G1):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return init_gaussian(grid, c, s, k)


@given(centers, sigmas, momenta, phases)
def test_global_phase_leaves_velocity(c, s, k, phi):
    psi = packet(c, s, k)
    rot = psi.with_amplitudes(np.exp(1j * phi) * psi.amplitudes)
    a, b = velocity_grid(psi), velocity_grid(rot)
    m = a.mask & b.mask & (np.abs(G1.axes[0] - c) < 3 * s)
    assert np.max(np.abs(a.v[0][m] - b.v[0][m])) < 1e-9


@given(centers, sigmas, momenta)
def test_density_integrates_to_one(c, s, k):
    assert abs(norm(packet(c, s, k)) - 1) < 1e-12


@given(centers, centers, sigmas, st.floats(0.2, 2.0), phases)
def test_superpose_is_linear(c1, c2, s, r, phi):
    a, b = packet(c1, s, 0.5), packet(c2, s, -0.5)
    coef = r * np.exp(1j * phi)
    assume(abs(1 + coef * inner(a, b)) > 0.05)
    out = superpose(a, b, 1.0, coef)
    direct = a.amplitudes + coef * b.amplitudes
    direct = direct / np.sqrt(np.sum(np.abs(direct) ** 2) * G1.dx[0])
    assert np.max(np.abs(out.amplitudes - direct)) < 1e-12


@given(centers, sigmas, momenta, st.floats(0.1, 10.0), phases)
def test_velocity_homogeneous(c, s, k, r, phi):
    psi = packet(c, s, k)
    scaled = psi.with_amplitudes(r * np.exp(1j * phi) * psi.amplitudes)
    q = np.array([[c - s], [c], [c + 0.7 * s]])
    a = velocity_at(series_from_states([psi]), psi.time, q)
    b = velocity_at(series_from_states([scaled]), psi.time, q)
    assert np.max(np.abs(a - b)) < 1e-10


@given(centers, sigmas, momenta, st.integers(-4, 4))
def test_galilei_boost(c, s, k, n):
    boost = 2 * np.pi * n / GW.lengths[0]
    psi = packet(c, s, k, GW)
    moved = psi.with_amplitudes(psi.amplitudes * np.exp(1j * boost * GW.axes[0]))
    # on grid nodes, so interpolation of the faster phase adds no error
    x = GW.axes[0]
    q = x[np.abs(x - c) < s][:, None]
    a = velocity_at(series_from_states([psi]), 0.0, q)
    b = velocity_at(series_from_states([moved]), 0.0, q)
    assert np.max(np.abs(b - a - boost)) < 1e-8


@given(st.tuples(centers, centers), st.tuples(sigmas, sigmas), st.tuples(momenta, momenta),
       st.floats(0.5, 3.0), st.floats(0.5, 3.0))
def test_current_is_density_times_velocity(c, s, k, m1, m2):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        psi = init_gaussian(G2, c, s, k, PhysicalParams(1.0, (m1, m2)))
    vf = velocity_grid(psi)
    J = current_grid(psi)
    rho = np.abs(psi.amplitudes) ** 2
    # the speed cap deliberately breaks J = rho v on clamped tail points
    free = vf.mask & (np.sqrt(np.sum(vf.v**2, axis=0)) < NodePolicy().cap(G2) * (1 - 1e-9))
    for ax in range(2):
        assert np.max(np.abs(J[ax] - rho * vf.v[ax])[free]) < 1e-12


@given(hnp.arrays(np.float64, 128, elements=st.floats(-50.0, 50.0)), centers, sigmas, momenta,
       st.floats(1e-4, 5e-2))
def test_split_step_unitary(V, c, s, k, dt):
    psi = packet(c, s, k)
    out = step_split_spectral(psi, V, dt)
    assert abs(norm(out) - 1) < 1e-12


@given(centers, sigmas, st.integers(0, 2**63 - 1), st.integers(1, 40))
def test_sampling_deterministic(c, s, seed, n):
    psi = packet(c, s, 0.0)
    a = sample_equilibrium(psi, n, seed)
    b = sample_equilibrium(psi, n, seed)
    assert np.array_equal(a, b)
    assert np.all((a >= G1.lower[0]) & (a < G1.upper[0]))


@st.composite
def configs(draw):
    n = draw(st.sampled_from([64, 128, 256]))
    half = draw(st.floats(8.0, 40.0))
    dx = 2 * half / n
    sigma = draw(st.floats(4 * dx + 1e-6, max(4 * dx + 1e-3, half / 6)))
    center = draw(st.floats(-half / 4, half / 4))
    stride = draw(st.integers(1, 20))
    dt = draw(st.sampled_from([1e-3, 2e-3, 5e-3]))
    steps = draw(st.integers(1, 10)) * stride
    kind = draw(st.sampled_from(["free", "harmonic"]))
    seed = draw(st.integers(0, 2**63 - 1))
    runs = draw(st.lists(st.sampled_from(["equivariance", "velocity", "polar"]), unique=True))
    return f"""
name = "gen"
seed = {seed}
[grid]
points = {n}
lower = {-half!r}
upper = {half!r}
[potential]
kind = "{kind}"
[initial]
center = {center!r}
sigma = {sigma!r}
[propagator]
dt = {dt!r}
total_time = {dt * steps!r}
frame_stride = {stride}
[ensemble]
base_dt = {dt * stride!r}
[analysis]
run = {runs!r}
""".replace("'", '"')


@given(configs())
def test_config_canonical_round_trip(text):
    cfg = parse_config(text)
    canon = canonical_toml(cfg)
    again = parse_config(canon)
    assert again == cfg
    assert canonical_toml(again) == canon


@given(hnp.arrays(np.complex128, st.tuples(st.integers(1, 4), st.just(16)),
                  elements=st.complex_numbers(max_magnitude=1e6, allow_nan=False, allow_infinity=False)))
def test_field_format_round_trip(records):
    import tempfile
    from pathlib import Path

    g = make_grid(GridSpec((0.0,), (1.0,), (16,)))
    times = np.arange(len(records)) * 0.5
    with tempfile.TemporaryDirectory() as tmp:
        path = write_fields(Path(tmp) / "f", records, "complex-scalar", g, times)
        back, man = read_fields(path, mmap=False)
        raw = (Path(path) / "records.bin").read_bytes()
    assert np.array_equal(back, records)
    assert man["times"] == times.tolist()
    assert raw == records.astype("<c16").tobytes(order="C")
