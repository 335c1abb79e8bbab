"""
Logging setup and line-delimited metrics records
"""
import json
import logging
import sys
from pathlib import Path
from typing import IO, Optional

from app.schemas.training import MetricRecord


class JsonFormatter(logging.Formatter):
    """Render each log record as one JSON object per line"""

    def format(self, record: logging.LogRecord) -> str:
        payload = {
            "time": self.formatTime(record, "%Y-%m-%dT%H:%M:%S"),
            "level": record.levelname,
            "logger": record.name,
            "message": record.getMessage(),
        }
        if record.exc_info:
            payload["exc"] = self.formatException(record.exc_info)
        return json.dumps(payload)


def configure_logging(level: str = "INFO", fmt: str = "text") -> None:
    """Install a single stream handler on the root logger"""
    handler = logging.StreamHandler(sys.stderr)
    if fmt == "json":
        handler.setFormatter(JsonFormatter())
    else:
        handler.setFormatter(
            logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s")
        )
    root = logging.getLogger()
    root.handlers = [handler]
    root.setLevel(level.upper())


class MetricsLogger:
    """Append MetricRecords to a JSON-lines file (or keep them in memory)"""

    def __init__(self, path: Optional[Path] = None):
        self.path = path
        self.records: list[MetricRecord] = []
        self._fh: Optional[IO[str]] = None
        if path is not None:
            path.parent.mkdir(parents=True, exist_ok=True)
            self._fh = open(path, "a", encoding="utf-8")

    def log(self, record: MetricRecord) -> None:
        self.records.append(record)
        if self._fh is not None:
            self._fh.write(record.model_dump_json() + "\n")
            self._fh.flush()

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None

    def __enter__(self) -> "MetricsLogger":
        return self

    def __exit__(self, *exc) -> None:
        self.close()
