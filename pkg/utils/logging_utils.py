import json
import logging
import sys
from datetime import datetime, timezone
from typing import Any, Optional

EVENT_FIELDS_ATTR = "event_fields"


class JsonLineFormatter(logging.Formatter):
    """Formats each record as a single JSON object on one line"""

    def format(self, record: logging.LogRecord) -> str:
        payload = {
            "time": datetime.fromtimestamp(record.created, tz=timezone.utc).isoformat(timespec="milliseconds"),
            "level": record.levelname.lower(),
            "logger": record.name,
            "event": record.getMessage(),
        }
        fields = getattr(record, EVENT_FIELDS_ATTR, None)
        if fields:
            payload.update(fields)
        if record.exc_info:
            payload["exception"] = self.formatException(record.exc_info)
        return json.dumps(payload, default=str, sort_keys=False)


def configure_logging(level: int = logging.INFO, stream=None) -> None:
    """Route all harness loggers to stderr as line-delimited JSON.

    Args:
        level (int): Minimum level to emit.
        stream: Target stream, stderr when None.
    """
    handler = logging.StreamHandler(stream or sys.stderr)
    handler.setFormatter(JsonLineFormatter())
    root = logging.getLogger()
    for existing in list(root.handlers):
        root.removeHandler(existing)
    root.addHandler(handler)
    root.setLevel(level)


def log_event(logger: logging.Logger, event: str, level: int = logging.INFO,
              exc_info: Optional[Any] = None, **fields: Any) -> None:
    """Log `event` with structured key/value fields"""
    logger.log(level, event, exc_info=exc_info, extra={EVENT_FIELDS_ATTR: fields})


def utc_timestamp() -> str:
    """Current UTC time in ISO-8601 form"""
    return datetime.now(timezone.utc).isoformat(timespec="seconds")
