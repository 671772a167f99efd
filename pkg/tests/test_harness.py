import json

import numpy as np
import pytest

from pilotwave.harness import ConfigError, canonical_toml, load_config, parse_config, run_scenario, verify_run
from pilotwave.harness.cli import main, shipped_scenarios
from pilotwave.harness.plots import PlotError, export_plots
from pilotwave.io import read_fields

SMALL = """
name = "small"
seed = 7

[grid]
points = 128
lower = -16.0
upper = 16.0

[initial]
center = 0.5
sigma = 1.0
momentum = 0.5

[propagator]
dt = 1e-3
total_time = 0.4
frame_stride = 20

[ensemble]
n = 400
base_dt = 1e-2

[analysis]
run = ["equivariance", "velocity"]

[output]
plot_paths = 12
"""


def small(**replace):
    text = SMALL
    for old, new in replace.items():
        text = text.replace(old, new)
    return text


@pytest.fixture(scope="module")
def small_run(tmp_path_factory):
    return run_scenario(parse_config(SMALL), tmp_path_factory.mktemp("runs") / "small")


class TestConfig:
    def test_defaults(self):
        cfg = parse_config('name = "m"\nseed = 1\n[grid]\npoints = 64\nlower = -8.0\nupper = 8.0\n'
                           '[initial]\ncenter = 0.0\nsigma = 1.0\n')
        assert cfg.params.hbar == 1.0
        assert tuple(cfg.params.masses) == (1.0,)
        assert cfg.potential["kind"] == "free"
        assert not cfg.analyses
        assert cfg.ensemble["n"] == 1000

    def test_missing_seed(self):
        with pytest.raises(ConfigError) as e:
            parse_config(small(**{"seed = 7\n": ""}))
        assert any(line.startswith("seed:") for line in e.value.errors)

    def test_under_resolved_sigma(self):
        with pytest.raises(ConfigError, match="sigma"):
            parse_config(small(**{"sigma = 1.0": "sigma = 0.9"}))

    def test_errors_collected(self):
        text = small(**{"points = 128": "points = 100", "dt = 1e-3": "dt = -1.0", "[ensemble]": "[ensemble]\nbogus = 1"})
        with pytest.raises(ConfigError) as e:
            parse_config(text)
        joined = "\n".join(e.value.errors)
        assert len(e.value.errors) >= 3
        assert "grid.points" in joined and "propagator.dt" in joined and "ensemble.bogus" in joined

    def test_syntax_error_position(self):
        with pytest.raises(ConfigError, match="line 2, column"):
            parse_config('name = "x"\nseed = = 3\n')

    def test_base_dt_exceeds_frames(self):
        with pytest.raises(ConfigError, match="base_dt"):
            parse_config(small(**{"base_dt = 1e-2": "base_dt = 0.05"}))

    def test_unknown_analysis(self):
        with pytest.raises(ConfigError, match="analysis"):
            parse_config(small(**{'"velocity"]': '"telepathy"]'}))

    @pytest.mark.parametrize("name", sorted(shipped_scenarios()))
    def test_canonical_round_trip(self, name):
        cfg = load_config(shipped_scenarios()[name])
        text = canonical_toml(cfg)
        assert canonical_toml(parse_config(text)) == text


class TestRun:
    def test_layout(self, small_run):
        d = small_run.directory
        for rel in ("manifest.json", "config.toml", "frames/records.bin", "frames/potential.bin",
                    "trajectories/records.bin", "trajectories.csv", "equivariance.json", "velocity/records.bin"):
            assert (d / rel).exists(), rel
        assert small_run.passed
        assert set(small_run.data["analyses"]) == {"equivariance", "velocity"}

    def test_fields_readable(self, small_run):
        frames, man = read_fields(small_run.directory / "frames")
        assert man["kind"] == "complex-scalar" and frames.shape == (21, 128)
        assert abs(np.sum(np.abs(frames[-1]) ** 2) * 0.25 - 1) < 1e-10
        paths, tman = read_fields(small_run.directory / "trajectories")
        assert paths.shape == (21, 400, 1)
        assert tman["status"].count("ok") == 400

    def test_csv_rows(self, small_run):
        lines = (small_run.directory / "trajectories.csv").read_text().splitlines()
        assert lines[0] == "path_id,time,q0,status"
        assert len(lines) == 1 + 400 * 11

    def test_deterministic(self, small_run, tmp_path):
        again = run_scenario(parse_config(SMALL), tmp_path / "again", threads=2, backend="numpy")
        assert again.checksums == small_run.checksums

    def test_seed_changes_paths(self, small_run, tmp_path):
        other = run_scenario(parse_config(small(**{"seed = 7": "seed = 8"})), tmp_path / "other")
        assert other.checksums["trajectories/records.bin"] != small_run.checksums["trajectories/records.bin"]
        assert other.checksums["frames/records.bin"] == small_run.checksums["frames/records.bin"]

    def test_verify_detects_tampering(self, tmp_path):
        man = run_scenario(parse_config(SMALL), tmp_path / "t")
        assert verify_run(man.directory) == (True, [])
        with open(man.directory / "trajectories.csv", "a") as fh:
            fh.write("0,0.0,0.0,ok\n")
        ok, problems = verify_run(man.directory)
        assert not ok and problems == ["checksum mismatch trajectories.csv"]


class TestCli:
    def write(self, tmp_path, text):
        p = tmp_path / "c.toml"
        p.write_text(text)
        return str(p)

    def test_pass(self, tmp_path, capsys):
        assert main(["run", self.write(tmp_path, SMALL), "-o", str(tmp_path / "r"), "-q"]) == 0
        assert "equivariance     PASS" in capsys.readouterr().out
        assert main(["verify", str(tmp_path / "r")]) == 0

    def test_analysis_failure(self, tmp_path):
        text = SMALL.replace("[output]", "[analysis.equivariance]\nks_limit = 1e-6\n\n[output]")
        assert main(["run", self.write(tmp_path, text), "-o", str(tmp_path / "r"), "-q"]) == 1

    def test_config_error(self, tmp_path, capsys):
        assert main(["run", self.write(tmp_path, "seed = [\n"), "-q"]) == 2
        assert "line" in capsys.readouterr().err
        assert main(["run", str(tmp_path / "absent.toml")]) == 2

    def test_runtime_error(self, tmp_path, capsys):
        # a fast packet reaches the periodic seam within the run
        text = small(**{"momentum = 0.5": "momentum = 6.0", "total_time = 0.4": "total_time = 3.0"})
        assert main(["run", self.write(tmp_path, text), "-o", str(tmp_path / "r"), "-q"]) == 3
        assert "runtime error" in capsys.readouterr().err

    def test_verify_missing(self, tmp_path):
        assert main(["verify", str(tmp_path)]) == 3

    def test_list(self, capsys):
        assert main(["list"]) == 0
        out = capsys.readouterr().out
        for name in shipped_scenarios():
            assert name in out
        assert "INVALID" not in out

    def test_shipped_count(self):
        assert len(shipped_scenarios()) == 8


class TestPlots:
    def test_export(self, small_run, capsys):
        assert main(["plot", str(small_run.directory)]) == 0
        out = capsys.readouterr().out
        plots = small_run.directory / "plots"
        svg = (plots / "density_paths.svg").read_text()
        assert svg.count('id="traj-') == 12
        assert (plots / "ks_vs_time.svg").exists()
        assert not (plots / "quantum_potential.svg").exists()
        assert "notice" in out and "polar" in out
        # plots are outside the checksummed set
        assert verify_run(small_run.directory)[0]

    def test_plots_deterministic(self, small_run):
        files, _ = export_plots(small_run.directory)
        first = [f.read_bytes() for f in files]
        files, _ = export_plots(small_run.directory)
        assert [f.read_bytes() for f in files] == first
        assert len(files) == 2

    def test_missing_run(self, tmp_path):
        with pytest.raises(PlotError):
            export_plots(tmp_path)
        assert main(["plot", str(tmp_path)]) == 3


def test_manifest_contents(small_run):
    data = json.loads((small_run.directory / "manifest.json").read_text())
    for key in ("tool", "version", "scenario", "config", "artifacts", "analyses", "passed", "warnings", "timings",
                "runtime"):
        assert key in data
    assert "manifest.json" not in data["artifacts"]
    assert all(len(h) == 64 for h in data["artifacts"].values())
