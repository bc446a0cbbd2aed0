"""
Logging setup for the command-line entry points.

Console output keeps the house format and goes to stdout (stderr is reserved
for the one-line error record); each command also appends JSON-lines records
to ``<work_dir>/logs/pipeline.jsonl``.
"""

import sys
import json
import logging
from pathlib import Path
from typing import Optional

CONSOLE_FORMAT = "%(asctime)s  %(levelname)-8s  %(message)s"
CONSOLE_DATEFMT = "%Y-%m-%d %H:%M:%S"


class JsonLinesFormatter(logging.Formatter):
    """One JSON object per record; ``extra={"context": {...}}`` is merged in."""

    def format(self, record: logging.LogRecord) -> str:
        payload = {
            "time": self.formatTime(record, CONSOLE_DATEFMT),
            "level": record.levelname,
            "logger": record.name,
            "message": record.getMessage(),
        }
        context = getattr(record, "context", None)
        if isinstance(context, dict):
            payload.update(context)
        if record.exc_info:
            payload["exception"] = self.formatException(record.exc_info)
        return json.dumps(payload, sort_keys=True, default=str)


def setup_logging(verbose: bool = False, jsonl_path: Optional[Path] = None) -> None:
    root = logging.getLogger()
    for handler in list(root.handlers):
        root.removeHandler(handler)
        if isinstance(handler, logging.FileHandler):
            handler.close()
    root.setLevel(logging.DEBUG if verbose else logging.INFO)

    console = logging.StreamHandler(sys.stdout)
    console.setFormatter(logging.Formatter(CONSOLE_FORMAT, datefmt=CONSOLE_DATEFMT))
    root.addHandler(console)

    if jsonl_path is not None:
        jsonl_path = Path(jsonl_path)
        jsonl_path.parent.mkdir(parents=True, exist_ok=True)
        file_handler = logging.FileHandler(jsonl_path, encoding="utf-8")
        file_handler.setFormatter(JsonLinesFormatter())
        root.addHandler(file_handler)

    # torch / PIL chatter
    logging.getLogger("PIL").setLevel(logging.WARNING)
    logging.getLogger("kaleido").setLevel(logging.WARNING)
