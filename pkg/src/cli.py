"""
Command-line entry point.

    latentact-id run --scenario <name> [--config <path>] --seed <u64> [--out <dir>]
    latentact-id validate --config <path>
    latentact-id list-scenarios

Every command prints one JSON envelope on stdout. Exit status: 0 on
success, 1 when a scenario ran but failed a check, 2 on an error.
"""

import argparse
import logging
import sys

from config import LOG_FORMAT, logger, package_version
from env_config import load_environment, log_level
from harness import (
    list_scenarios,
    load_config_file,
    normalize_config,
    run_scenario,
    validate_config,
    with_overrides,
)
from utils.errors import INVALID_CONFIG, LatentActError
from utils.formatting import format_error_response, format_success_response

EXIT_OK = 0
EXIT_FAILED_CHECKS = 1
EXIT_ERROR = 2


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="latentact-id",
        description="Run latent-action identifiability scenarios and write reports.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {package_version()}")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one scenario")
    run.add_argument("--scenario", help="registered scenario name")
    run.add_argument("--config", help="TOML or JSON scenario config")
    run.add_argument("--seed", type=int, help="u64 seed; overrides the config")
    run.add_argument("--out", help="output directory; overrides the config")

    validate = sub.add_parser("validate", help="normalize a config and print it")
    validate.add_argument("--config", required=True)

    sub.add_parser("list-scenarios", help="list registered scenarios")
    return parser


def _run(args) -> tuple[str, int]:
    raw = load_config_file(args.config) if args.config else {}
    if args.scenario:
        if raw.get("scenario") not in (None, args.scenario):
            raise LatentActError(
                INVALID_CONFIG,
                f"--scenario {args.scenario} disagrees with config scenario {raw['scenario']}",
                field="scenario",
            )
        raw["scenario"] = args.scenario
    if args.seed is not None and "seed" not in raw:
        raw["seed"] = args.seed
    config = with_overrides(normalize_config(raw), seed=args.seed, out_dir=args.out)
    report = run_scenario(config)
    status = EXIT_OK if report.passed else EXIT_FAILED_CHECKS
    return format_success_response(report.summary()), status


def main(argv=None) -> int:
    load_environment()
    logging.basicConfig(level=log_level(), format=LOG_FORMAT, stream=sys.stderr)
    args = build_parser().parse_args(argv)
    try:
        if args.command == "run":
            text, status = _run(args)
        elif args.command == "validate":
            config = validate_config(args.config)
            text, status = format_success_response({"config": config.to_dict()}), EXIT_OK
        else:
            text, status = format_success_response({"scenarios": list_scenarios()}), EXIT_OK
    except LatentActError as e:
        logger.error(str(e))
        print(format_error_response(e.code, e.message, e.details or None))
        return EXIT_ERROR
    print(text)
    return status


if __name__ == "__main__":
    sys.exit(main())
