import argparse
import sys
from typing import List, Optional

from pydantic import ValidationError

from grokking_lab.commands import COMMAND_GROUPS
from grokking_lab.core.config import settings
from grokking_lab.core.exceptions import LabError
from grokking_lab.utils.logger import setup_logger


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="grokking-lab",
        description=f"{settings.APP_NAME}: circuit efficiency, grokking and ungrokking experiments",
    )
    subparsers = parser.add_subparsers(dest="command", required=True)

    # Include command groups
    for group in COMMAND_GROUPS:
        group.register(subparsers)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    logger = setup_logger("grokking_lab")
    args = build_parser().parse_args(argv)
    try:
        return args.handler(args) or 0
    except LabError as exc:
        logger.error(f"{args.command} failed: {exc}")
        return exc.exit_code
    except (ValidationError, ValueError) as exc:
        logger.error(f"{args.command}: invalid input: {exc}")
        return 1
    # Global exception handler
    except Exception as exc:
        logger.exception(f"Global exception: {exc}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
