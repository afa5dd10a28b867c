"""Structured logging: one powertools Logger per process, JSON lines on stderr."""

import logging
import sys

from aws_lambda_powertools import Logger

from .config import settings

SERVICE = "knnadapt"

_logger: Logger | None = None


def get_logger() -> Logger:
    global _logger
    if _logger is None:
        level = "DEBUG" if settings.debug else settings.log_level
        _logger = Logger(
            service=SERVICE,
            level=level,
            logger_handler=logging.StreamHandler(sys.stderr),
        )
    return _logger


def set_level(level: str) -> None:
    get_logger().setLevel(level.upper())
