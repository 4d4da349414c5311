"""JSON-lines logging so warnings (empty bags, skipped classes) are machine-checkable."""

from __future__ import annotations

import json
import logging
import sys

_RESERVED = set(vars(logging.makeLogRecord({})))


class JsonFormatter(logging.Formatter):
    def format(self, record: logging.LogRecord) -> str:
        payload = {"level": record.levelname, "logger": record.name, "event": record.getMessage()}
        for key, value in vars(record).items():
            if key not in _RESERVED and not key.startswith("_"):
                payload[key] = value
        return json.dumps(payload, default=str, sort_keys=True)


def get_logger(name: str) -> logging.Logger:
    return logging.getLogger(f"mmfuse.{name}")


def configure(level: int = logging.INFO, stream=None) -> None:
    root = logging.getLogger("mmfuse")
    for handler in list(root.handlers):
        if getattr(handler, "_mmfuse", False):
            root.removeHandler(handler)
    handler = logging.StreamHandler(stream or sys.stderr)
    handler.setFormatter(JsonFormatter())
    handler._mmfuse = True
    root.addHandler(handler)
    root.setLevel(level)
