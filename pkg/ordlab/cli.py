import argparse
import json
import logging
import os
import sys

from ordlab import __version__, logger
from ordlab.config import CONFIG_SCHEMA, ConfigError, config_hash, load_config
from ordlab.experiments import run

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_RUNTIME = 2
EXIT_ORACLE = 3


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ordlab",
        description="Compression order experiments on synthetic layered models.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--verbose", action="store_true", help="log debug details to stderr")
    commands = parser.add_subparsers(dest="command", required=True)

    run_parser = commands.add_parser("run", help="run the configured experiment and write artifacts")
    run_parser.add_argument("--config", required=True, help="JSON or YAML experiment configuration")
    run_parser.add_argument("--jobs", type=int, default=os.cpu_count() or 1, help="worker processes")
    run_parser.add_argument("--out", default=None, help="output directory (overrides output_dir)")

    validate_parser = commands.add_parser("validate", help="check a configuration without running it")
    validate_parser.add_argument("--config", required=True)

    commands.add_parser("schema", help="print the configuration JSON schema")
    return parser


def _configure_logging(verbose: bool) -> None:
    for old in [h for h in logger.handlers if type(h) is logging.StreamHandler]:
        logger.removeHandler(old)
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    logger.addHandler(handler)
    logger.setLevel(logging.DEBUG if verbose else logging.INFO)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    _configure_logging(args.verbose)

    if args.command == "schema":
        print(json.dumps(CONFIG_SCHEMA, indent=2))
        return EXIT_OK

    try:
        config = load_config(args.config)
    except ConfigError as exc:
        print(exc, file=sys.stderr)
        return EXIT_CONFIG

    if args.command == "validate":
        print(f"{args.config}: valid {config.kind} configuration (hash {config_hash(config)})")
        return EXIT_OK

    if args.jobs < 1:
        print(f"--jobs must be >= 1, got {args.jobs}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        result, paths = run(config, out=args.out, n_jobs=args.jobs)
    except Exception as exc:
        logger.error(f"{config.kind} run failed: {type(exc).__name__}: {exc}")
        logger.debug("Traceback", exc_info=True)
        return EXIT_RUNTIME

    out_dir = paths["report.csv"].parent
    print(f"{config.kind}: wrote {', '.join(sorted(paths))} to {out_dir}")
    if result.passed is False:
        logger.error(f"{config.kind} acceptance check failed")
        return EXIT_ORACLE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
