"""
Dataset I/O helpers
===================
Small, dependency-light helpers shared by every stage that touches disk.

- JSON / JSON-lines written with sorted keys so reruns are byte-identical
- every write goes to a temp file first and is moved into place with
  ``os.replace`` so concurrent readers never see partial files
- arrays are stored as gzip-compressed ``.npy`` with the gzip mtime pinned to 0
- ``record_key`` builds readable, collision-safe file stems (slug + digest)
"""

import io
import os
import gzip
import json
import hashlib
import logging
import tempfile
from pathlib import Path
from typing import Any, Iterable, Optional

import numpy as np
import pandas as pd

from common.errors import MissingInputError

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Atomic writes
# ---------------------------------------------------------------------------

def _atomic_write_bytes(path: Path, payload: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def canonical_json(data: Any) -> str:
    return json.dumps(data, sort_keys=True, ensure_ascii=False, separators=(",", ":"))


def save_json(path: Path, data: Any) -> None:
    """Save data as a formatted JSON file (sorted keys, atomic)."""
    text = json.dumps(data, indent=2, sort_keys=True, ensure_ascii=False) + "\n"
    _atomic_write_bytes(path, text.encode("utf-8"))


def load_json(path: Path) -> Any:
    path = Path(path)
    if not path.exists():
        raise MissingInputError(f"File not found: {path}")
    return json.loads(path.read_text(encoding="utf-8"))


def write_jsonl(path: Path, records: Iterable[dict]) -> int:
    lines = [canonical_json(r) for r in records]
    payload = ("\n".join(lines) + ("\n" if lines else "")).encode("utf-8")
    _atomic_write_bytes(path, payload)
    return len(lines)


def read_jsonl(path: Path) -> list[dict]:
    path = Path(path)
    if not path.exists():
        raise MissingInputError(f"File not found: {path}")
    with path.open(encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def write_text(path: Path, text: str) -> None:
    _atomic_write_bytes(path, text.encode("utf-8"))


# ---------------------------------------------------------------------------
# Arrays
# ---------------------------------------------------------------------------

def array_digest(array: np.ndarray) -> str:
    """sha256 over dtype, shape and the C-ordered bytes of an array."""
    array = np.ascontiguousarray(array)
    h = hashlib.sha256()
    h.update(str(array.dtype).encode())
    h.update(str(array.shape).encode())
    h.update(array.tobytes())
    return h.hexdigest()


def save_array(path: Path, array: np.ndarray) -> str:
    """Write ``array`` as gzip-compressed .npy; returns its content digest."""
    buf = io.BytesIO()
    np.save(buf, np.ascontiguousarray(array), allow_pickle=False)
    out = io.BytesIO()
    with gzip.GzipFile(fileobj=out, mode="wb", mtime=0, filename="") as gz:
        gz.write(buf.getvalue())
    _atomic_write_bytes(path, out.getvalue())
    return array_digest(array)


def load_array(path: Path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise MissingInputError(f"Array file not found: {path}")
    with gzip.open(path, "rb") as gz:
        return np.load(io.BytesIO(gz.read()), allow_pickle=False)


# ---------------------------------------------------------------------------
# Keys and tables
# ---------------------------------------------------------------------------

def config_hash(data: Any) -> str:
    return hashlib.sha256(canonical_json(data).encode("utf-8")).hexdigest()


def record_key(slug: str, params: dict) -> str:
    """Filesystem-safe stem: readable slug + short digest of the params."""
    digest = hashlib.md5(canonical_json(params).encode()).hexdigest()[:12]
    slug = slug.strip("/").replace("/", "_").replace(" ", "-")[:60]
    return f"{slug}__{digest}"


def append_csv(path: Path, rows: list[dict], columns: Optional[list[str]] = None) -> None:
    """Append rows to a CSV, writing the header only when the file is new."""
    if not rows:
        return
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    df = pd.DataFrame(rows, columns=columns)
    df.to_csv(path, mode="a", header=not path.exists(), index=False)
