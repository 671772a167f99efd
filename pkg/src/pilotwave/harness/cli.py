"""``pilotwave`` command line.

Verbs::

    pilotwave run <config.toml | scenario-name> [-o DIR] [--threads N] [--backend B]
    pilotwave list
    pilotwave plot <run-dir>
    pilotwave verify <run-dir>

Exit codes: 0 pass, 1 analysis failure (or checksum mismatch), 2 configuration
error, 3 runtime error.
"""
from __future__ import annotations

import argparse
import sys
from importlib import resources
from pathlib import Path

from .config import ConfigError, load_config
from .runner import RunError, run_scenario, verify_run

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2, 3


def shipped_scenarios() -> dict[str, Path]:
    """Name -> path of every scenario bundled with the package."""
    root = resources.files("pilotwave") / "scenarios"
    return {p.name[:-5]: Path(str(p)) for p in sorted(root.iterdir(), key=lambda p: p.name)
            if p.name.endswith(".toml")}


def _resolve(target: str) -> Path:
    p = Path(target)
    if p.exists():
        return p
    shipped = shipped_scenarios()
    if target in shipped:
        return shipped[target]
    raise ConfigError([f"config: {target!r} is neither a file nor a shipped scenario "
                       f"(see 'pilotwave list')"])


def _err(msg):
    print(msg, file=sys.stderr)


def cmd_run(args) -> int:
    try:
        cfg = load_config(_resolve(args.config))
    except ConfigError as e:
        _err(str(e))
        return EXIT_CONFIG
    except OSError as e:
        _err(f"cannot read config: {e}")
        return EXIT_CONFIG
    log = (lambda m: None) if args.quiet else (lambda m: print(m, file=sys.stderr))
    try:
        man = run_scenario(cfg, args.output, threads=args.threads, backend=args.backend, log=log)
    except RunError as e:
        _err(f"runtime error in phase {e}")
        return EXIT_RUNTIME
    for name, ok in man.data["analyses"].items():
        print(f"{name:16s} {'PASS' if ok else 'FAIL'}")
    print(f"run directory: {man.directory}")
    return EXIT_OK if man.passed else EXIT_FAIL


def cmd_list(args) -> int:
    for name, path in shipped_scenarios().items():
        try:
            cfg = load_config(path)
            print(f"{name:24s} {', '.join(cfg.analyses):40s} {cfg.description}")
        except ConfigError as e:  # a broken shipped file is a packaging bug, still list it
            print(f"{name:24s} INVALID: {e.errors[0]}")
    return EXIT_OK


def cmd_plot(args) -> int:
    from .plots import PlotError, export_plots

    try:
        files, notices = export_plots(args.run_dir)
    except PlotError as e:
        _err(str(e))
        return EXIT_RUNTIME
    for n in notices:
        print(f"notice: {n}")
    for f in files:
        print(f)
    return EXIT_OK


def cmd_verify(args) -> int:
    try:
        ok, problems = verify_run(args.run_dir)
    except FileNotFoundError as e:
        _err(str(e))
        return EXIT_RUNTIME
    for p in problems:
        print(p)
    print("checksums OK" if ok else f"{len(problems)} problem(s)")
    return EXIT_OK if ok else EXIT_FAIL


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="pilotwave", description="Guided-particle trajectory simulator")
    sub = ap.add_subparsers(dest="verb", required=True)
    r = sub.add_parser("run", help="run a scenario (TOML path or shipped name)")
    r.add_argument("config")
    r.add_argument("-o", "--output", help="run directory (default: output.directory or runs/<name>)")
    r.add_argument("--threads", type=int, default=1, help="worker threads for path integration")
    r.add_argument("--backend", choices=("cython", "numpy"), help="kernel backend (default: best available)")
    r.add_argument("-q", "--quiet", action="store_true")
    r.set_defaults(func=cmd_run)
    sub.add_parser("list", help="list shipped scenarios").set_defaults(func=cmd_list)
    p = sub.add_parser("plot", help="write SVG figures for a run directory")
    p.add_argument("run_dir")
    p.set_defaults(func=cmd_plot)
    v = sub.add_parser("verify", help="re-check artifact checksums against the manifest")
    v.add_argument("run_dir")
    v.set_defaults(func=cmd_verify)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if getattr(args, "threads", 1) < 1:
        _err("--threads must be >= 1")
        return EXIT_CONFIG
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
