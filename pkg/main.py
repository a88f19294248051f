import argparse
import logging
import sys
from typing import List, Optional

from config import settings
from errors import HdrtError, MissingInputError

# Import command groups
import commands_data
import commands_eval
import commands_train

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2
EXIT_MISSING_INPUT = 3


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hdrt",
        description="IR-guided HDR imaging: dataset construction, HDRTNet training and evaluation",
    )
    parser.add_argument(
        "--log-level",
        default=settings.LOG_LEVEL,
        choices=["DEBUG", "INFO", "WARNING", "ERROR"],
        type=str.upper,
        help=f"diagnostic verbosity on stderr (default {settings.LOG_LEVEL})",
    )
    subparsers = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    commands_data.register(subparsers)
    commands_eval.register(subparsers)
    commands_train.register(subparsers)
    return parser


def run(argv: Optional[List[str]] = None) -> int:
    """Parse ``argv``, run one subcommand and return its exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        # --help exits 0, usage errors exit 2
        return EXIT_OK if not e.code else EXIT_USAGE

    logging.basicConfig(level=args.log_level, format=settings.LOG_FORMAT, stream=sys.stderr, force=True)

    try:
        args.handler(args)
    except (MissingInputError, FileNotFoundError) as e:
        logger.error(f"{args.command}: missing input: {e}")
        return EXIT_MISSING_INPUT
    except HdrtError as e:
        logger.error(f"{args.command}: {type(e).__name__}: {e}")
        return EXIT_FAILURE
    except Exception as e:
        logger.exception(f"{args.command}: unexpected failure: {e}")
        return EXIT_FAILURE
    return EXIT_OK


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
