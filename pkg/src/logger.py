import json
import logging
import os
import sys
from typing import Any


def setup_logger() -> logging.Logger:
    """Configure and return logger with level from environment."""
    log_level = os.getenv("VP_LOG_LEVEL", "INFO").upper()

    logging.basicConfig(
        format="%(asctime)s [%(levelname)s] %(message)s",
        datefmt="%H:%M:%S",
    )

    logger = logging.getLogger("volprint")
    logger.setLevel(getattr(logging, log_level, logging.INFO))

    report = logging.getLogger("volprint.report")
    if not report.handlers:
        handler = logging.StreamHandler(sys.stderr)
        handler.setFormatter(logging.Formatter("%(message)s"))
        report.addHandler(handler)
        report.propagate = False
    report.setLevel(logging.INFO)

    return logging.getLogger("volprint")


def emit_report(event: str, **fields: Any) -> None:
    """Write one JSON-lines build report record to stderr."""
    record = {"event": event, **fields}
    logging.getLogger("volprint.report").info(json.dumps(record, sort_keys=True))
