import os
import sys
from pathlib import Path

import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, str(Path(__file__).parent))

settings.register_profile("default", deadline=None, max_examples=25,
                          suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture])
settings.register_profile("thorough", deadline=None, max_examples=300,
                          suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


class ShippedRuns:
    """Runs each shipped scenario at most once per session (single thread)."""

    def __init__(self, root: Path):
        self.root = root
        self.runs = {}

    def __call__(self, name: str, threads: int = 1):
        key = (name, threads)
        if key not in self.runs:
            from pilotwave.harness import load_config, run_scenario
            from pilotwave.harness.cli import shipped_scenarios

            cfg = load_config(shipped_scenarios()[name])
            self.runs[key] = run_scenario(cfg, self.root / f"{name}-t{threads}", threads=threads)
        return self.runs[key]


@pytest.fixture(scope="session")
def shipped_run(tmp_path_factory):
    return ShippedRuns(tmp_path_factory.mktemp("shipped"))


ACCEPTANCE_LINES: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[k])
