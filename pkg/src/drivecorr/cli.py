"""Command-line entry point.

Exit codes: 0 success, 2 usage/config/input error, 3 runtime error.
Settings resolve as built-in defaults, then ``--config`` YAML, then flags.
"""

from __future__ import annotations

import argparse
import sys
from typing import Optional, Sequence

from . import pipeline
from .config import ConfigError, add_config_flags, build_config, load_config_file
from .datamodel import DatasetError
from .online_scoring import EpisodeError
from .simworld.policy import PolicySpecError
from .simworld.track import TrackError
from .textio import ParseError
from .uncertainty import FitError

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 2, 3
USAGE_ERRORS = (ConfigError, ParseError, DatasetError, EpisodeError, FitError, PolicySpecError, TrackError, FileNotFoundError)

COMMANDS = {
    "simulate": "run the policy family on the tracks and write a study directory",
    "score-offline": "offline metric CSV for a study directory or one prediction dataset",
    "score-online": "online metric CSV for a study directory or one episode file",
    "fit-uwe": "fit the uncertainty-weighted error against the driving score",
    "correlate": "offline x online correlation CSV and scatter files",
    "report": "score-offline, score-online, fit-uwe and correlate over a study directory",
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS)
    common.add_argument("--config", metavar="PATH", help="YAML file with any of the keys below")
    add_config_flags(common)

    parser = argparse.ArgumentParser(
        prog="drivecorr",
        description="Offline driving metrics, uncertainty-weighted error and offline/online correlation studies.",
        epilog="Precedence: built-in defaults < --config file < command-line flags.",
        parents=[common],
    )
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    for name, help_text in COMMANDS.items():
        sp = sub.add_parser(name, help=help_text, description=help_text, parents=[common])
        if name in ("score-offline", "score-online", "fit-uwe", "correlate", "report"):
            sp.add_argument("input", nargs="?", default=None, help="study directory (or single file for score-*)")
    return parser


def _run(args: argparse.Namespace) -> None:
    ns = dict(vars(args))
    command = ns.pop("command")
    target = ns.pop("input", None)
    file_values = load_config_file(ns.pop("config")) if "config" in ns else {}
    if target is not None and command in ("fit-uwe", "correlate", "report"):
        ns["study"] = target
    cfg = build_config(file_values, ns)

    if command == "simulate":
        manifest = pipeline.simulate(cfg)
        print(f"wrote {len(manifest['artifacts'])} artifacts to {cfg.out}")
    elif command == "score-offline":
        reports = pipeline.score_offline(cfg, target)
        print(f"scored {len(reports)} prediction dataset(s) -> {cfg.out}/offline_metrics.csv")
    elif command == "score-online":
        scores = pipeline.score_online(cfg, target)
        print(f"scored {len(scores)} policy episode set(s) -> {cfg.out}/online_metrics.csv")
    elif command == "fit-uwe":
        uwe_cfg, diag = pipeline.fit(cfg)
        print(f"gamma={uwe_cfg.gamma:g} in-sample r={diag.in_sample_pearson:.3f} -> {cfg.out}/uwe_config.txt")
    elif command == "correlate":
        rep = pipeline.correlate_study(cfg)
        print(f"{len(rep.entries)} correlation entries -> {cfg.out}/correlation.csv")
    elif command == "report":
        rep = pipeline.report(cfg)
        print(f"{len(rep.entries)} correlation entries -> {cfg.out}/correlation.csv")


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        _run(args)
    except USAGE_ERRORS as exc:
        print(f"drivecorr: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001 - every other failure is a runtime error
        print(f"drivecorr: runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
