import logging

from moss.config import LOG_LEVEL

# Component loggers are children of "moss" (moss.hostd, moss.pipeline, ...) so the
# record name tells which side of the host/container seam emitted a line.
logger = logging.getLogger("moss")
if not logger.handlers:
    handler = logging.StreamHandler()
    handler.setFormatter(
        logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s")
    )
    logger.addHandler(handler)
logger.setLevel(LOG_LEVEL)
logger.propagate = False


def get_logger(component: str) -> logging.Logger:
    """Get the logger for one moss component, e.g. ``get_logger("hostd")``."""
    return logger.getChild(component)
