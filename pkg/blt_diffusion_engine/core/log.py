import logging
import os
import sys

from pythonjsonlogger import jsonlogger

_CONFIGURED = set()
_LEVEL = os.environ.get("BLTD_LOG_LEVEL", "INFO")


def set_level(level: str):
    """Apply a level to every logger created so far and to future ones."""
    global _LEVEL
    _LEVEL = os.environ.get("BLTD_LOG_LEVEL", level).upper()
    for name in _CONFIGURED:
        logging.getLogger(name).setLevel(_LEVEL)


def get_logger(name: str) -> logging.Logger:
    logger = logging.getLogger(name)
    if name in _CONFIGURED:
        return logger

    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(jsonlogger.JsonFormatter("%(asctime)s %(levelname)s %(name)s %(message)s"))
    logger.addHandler(handler)
    logger.setLevel(_LEVEL)
    logger.propagate = False
    _CONFIGURED.add(name)
    return logger
