# tools/log.py

import os
import sys

from dotenv import load_dotenv
from loguru import logger

load_dotenv()

DEFAULT_LEVEL = os.getenv("SAFESPARSE_LOG_LEVEL", "INFO")

LOG_FORMAT = (
    "<green>{time:HH:mm:ss}</green> | <level>{level: <7}</level> | "
    "<cyan>{name}</cyan> - <level>{message}</level>"
)


def configure_logging(level: str | None = None) -> str:
    """
    Install a single stderr sink at the requested level.

    Library modules only emit records; sinks are configured once here by
    the entry point.
    """
    level = (level or DEFAULT_LEVEL).upper()
    logger.remove()
    logger.add(sys.stderr, level=level, format=LOG_FORMAT)
    return level
