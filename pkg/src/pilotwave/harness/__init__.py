"""Scenario configs, the run pipeline, plots and the ``pilotwave`` command line."""
from .config import ConfigError, ScenarioConfig, canonical_toml, load_config, parse_config
from .runner import RunError, RunManifest, run_scenario, verify_run

__all__ = ["ConfigError", "ScenarioConfig", "canonical_toml", "load_config", "parse_config", "RunError",
           "RunManifest", "run_scenario", "verify_run"]
