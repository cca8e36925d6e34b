"""JSON-lines logging: one {timestamp, level, event, fields} object per line."""

from __future__ import annotations

import datetime as _dt
import json
import logging
import sys

ROOT_LOGGER = "corpoint"
LEVELS = {"debug": logging.DEBUG, "info": logging.INFO,
          "warning": logging.WARNING, "error": logging.ERROR}


class JsonLineFormatter(logging.Formatter):
    def format(self, record: logging.LogRecord) -> str:
        ts = _dt.datetime.fromtimestamp(record.created, tz=_dt.timezone.utc)
        out = {
            "timestamp": ts.isoformat(timespec="milliseconds"),
            "level": record.levelname.lower(),
            "event": record.getMessage(),
            "fields": getattr(record, "fields", {}),
        }
        return json.dumps(out, separators=(",", ":"), default=str)


def setup(level: str = "info", stream=None) -> logging.Logger:
    """Route corpoint.* log records as JSON lines to stderr (or stream)."""
    logger = logging.getLogger(ROOT_LOGGER)
    logger.setLevel(LEVELS.get(level, logging.INFO))
    handler = logging.StreamHandler(stream or sys.stderr)
    handler.setFormatter(JsonLineFormatter())
    logger.handlers = [handler]
    logger.propagate = False
    return logger


def log_event(logger: logging.Logger, level: str, event: str, **fields) -> None:
    logger.log(LEVELS.get(level, logging.INFO), event, extra={"fields": fields})
