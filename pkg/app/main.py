"""
Modular Prompt Lab - command-line entry point
"""
import logging
import sys
from typing import List, Optional

from app.cli import cli_router
from app.config import settings
from app.core.errors import Mp2Error
from app.core.logging import configure_logging

logger = logging.getLogger(__name__)


def main(argv: Optional[List[str]] = None) -> int:
    """Parse arguments, run the subcommand and map errors to exit codes"""
    configure_logging(settings.LOG_LEVEL, settings.LOG_FORMAT)
    args = cli_router().parse_args(argv)
    logger.debug(f"{settings.PROJECT_NAME}: running {args.command}")
    try:
        return args.func(args)
    except Mp2Error as e:
        logger.error(f"{type(e).__name__}: {e.message}")
        return e.exit_code
    except OSError as e:
        logger.error(f"I/O error: {e}")
        return 4


if __name__ == "__main__":
    sys.exit(main())
