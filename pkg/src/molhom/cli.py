"""Command-line entry point.

    molhom hom --config run.cfg --seed 3 --out results/
    molhom temp-sweep --duration 0.05
    molhom tomo
    molhom fit --config fit.cfg
    molhom peres

The output directory is, in order of precedence: ``--out``, the
MOLHOM_OUT environment variable, ``output`` in the config file, then
``./molhom-out/<scenario>``.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

from molhom import __version__
from molhom.config import ConfigError, ExperimentConfig, check_warnings, validate_config
from molhom.model import InvalidParameterError
from molhom.scenarios import ScenarioError, run_scenario

OUT_ENV = "MOLHOM_OUT"

COMMANDS = {
    "hom": "hom",
    "temp-sweep": "temperature_sweep",
    "tomo": "tomography",
    "fit": "fit",
    "peres": "peres",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="molhom",
                                     description="Single-molecule two-photon interference runs.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "hom": "orthogonal and parallel histograms, fits, contrast",
        "temp-sweep": "coalescence probability versus temperature",
        "tomo": "simulated polarization tomography and MLE reconstruction",
        "fit": "fit a histogram CSV (fit.histogram in the config)",
        "peres": "partial-transpose test of a density matrix JSON",
    }
    for name, text in helps.items():
        p = sub.add_parser(name, help=text)
        p.add_argument("--config", type=Path, help="key = value configuration file")
        p.add_argument("--seed", type=int, help="override run.seed")
        p.add_argument("--out", type=Path, help="output directory")
        p.add_argument("--duration", type=float, help="override run.duration (seconds)")
    return parser


def resolve_config(args) -> tuple[ExperimentConfig, list[str]]:
    """Validated config with command-line overrides, plus warnings."""
    cfg, _ = validate_config(args.config.read_text() if args.config else "")
    overrides = {"scenario": COMMANDS[args.command]}
    problems = []
    if args.seed is not None:
        if args.seed < 0:
            problems.append("--seed: must be >= 0")
        overrides["run_seed"] = args.seed
    if args.duration is not None:
        if not args.duration > 0:
            problems.append("--duration: must be positive")
        overrides["run_duration"] = args.duration
    cfg = cfg.with_overrides(**overrides)
    if cfg.scenario == "fit" and cfg.fit.histogram is None:
        problems.append("fit.histogram: required for the fit command")
    if problems:
        raise ConfigError(problems)
    return cfg, check_warnings(cfg)


def output_dir(args, cfg: ExperimentConfig) -> Path:
    if args.out is not None:
        return args.out
    if os.environ.get(OUT_ENV):
        return Path(os.environ[OUT_ENV])
    if cfg.output:
        return Path(cfg.output)
    return Path("molhom-out") / cfg.scenario


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg, notes = resolve_config(args)
    except ConfigError as exc:
        where = f"{args.config}: " if args.config else ""
        for line in exc.diagnostics:
            print(f"error: {where}{line}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: cannot read config: {exc}", file=sys.stderr)
        return 2
    for note in notes:
        print(f"warning: {note}", file=sys.stderr)
    try:
        manifest = run_scenario(cfg, output_dir(args, cfg))
    except (ScenarioError, InvalidParameterError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    for path in manifest.paths:
        print(path)
    return 0


if __name__ == "__main__":
    sys.exit(main())
