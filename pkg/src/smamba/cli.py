"""``smamba`` command-line entry point.

Exit codes: 0 success, 2 configuration or input error, 3 artifact mismatch,
4 numerical divergence.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import experiments
from .config import load_config
from .exceptions import (
    ArtifactMismatchError,
    ComputationError,
    ConfigError,
    DimensionError,
    DivergenceError,
    LoadError,
    ProtocolError,
)

EXIT_OK, EXIT_CONFIG, EXIT_MISMATCH, EXIT_DIVERGED = 0, 2, 3, 4

logger = logging.getLogger("smamba")


def _add_config_args(p: argparse.ArgumentParser, top: bool = False) -> None:
    # accepted before or after the subcommand; the subparser must not clobber a global value
    default = None if top else argparse.SUPPRESS
    p.add_argument("-c", "--config", default=default, help="INI run configuration")
    p.add_argument(
        "-s", "--set", dest="overrides", action="append", default=[] if top else argparse.SUPPRESS,
        metavar="SECTION.KEY=VALUE", help="override one config value (repeatable; wins over the file)",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="smamba", description="S-Mamba forecasting experiments")
    parser.add_argument("-v", "--verbose", action="store_true")
    _add_config_args(parser, top=True)
    sub = parser.add_subparsers(dest="command", required=True)

    for name, help_ in [
        ("train", "train one model and write report, summary and checkpoint"),
        ("ablate", "train the VC x TD ablation grid"),
        ("reorder-exp", "train on original / aperiodic-middle / aperiodic-end variate orders"),
        ("generalize-exp", "train on a variate subset, evaluate on all variates"),
        ("bench", "wall-time scaling in the variate count"),
        ("datagen", "write the configured synthetic dataset as CSV"),
    ]:
        _add_config_args(sub.add_parser(name, help=help_))

    p = sub.add_parser("eval", help="evaluate a checkpoint on the configured data")
    _add_config_args(p)
    p.add_argument("--checkpoint", required=True)

    p = sub.add_parser("forecast", help="forecast the steps after a CSV's last window")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--csv", required=True)
    p.add_argument("--output", help="output CSV (default: forecast-s<seed>.csv next to the checkpoint)")
    return parser


def _run(args) -> dict | str:
    if args.command == "forecast":
        from . import checkpoint

        if args.output is None:
            model, _ = checkpoint.load(args.checkpoint)
            args.output = Path(args.checkpoint).parent / f"forecast-s{model.config.seed}.csv"
        return str(experiments.run_forecast(args.checkpoint, args.csv, args.output))

    config = load_config(args.config, args.overrides)
    if args.command == "datagen":
        if config.synthetic is None:
            raise ConfigError("datagen needs a [synthetic] section")
        return str(experiments.run_datagen(config))
    if args.command == "eval":
        return experiments.run_eval(config, args.checkpoint)
    runner = {
        "train": experiments.run_train,
        "ablate": experiments.run_ablate,
        "reorder-exp": experiments.run_reorder,
        "generalize-exp": experiments.run_generalize,
        "bench": experiments.run_bench,
    }[args.command]
    return runner(config)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        result = _run(args)
    except (ConfigError, LoadError, ProtocolError, FileNotFoundError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except (ArtifactMismatchError, DimensionError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_MISMATCH
    except (DivergenceError, ComputationError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_DIVERGED
    print(result if isinstance(result, str) else json.dumps(result, sort_keys=True))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
