"""Content-addressed verdict cache.

Entries are keyed by SHA-256 over the prompt bytes and the model hint. The
directory cache stores one JSON file per key and writes via temp file + rename.
"""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
import threading
from pathlib import Path
from typing import Any, Protocol


def cache_key(prompt: str, model_hint: str) -> str:
    h = hashlib.sha256()
    h.update(prompt.encode("utf-8"))
    h.update(b"\0")
    h.update(model_hint.encode("utf-8"))
    return h.hexdigest()


class VerdictCache(Protocol):
    def get(self, key: str) -> dict[str, Any] | None: ...

    def put(self, key: str, entry: dict[str, Any]) -> None: ...

    def put_failure(self, key: str, raw_text: str, error: str) -> None: ...


class MemoryCache:
    def __init__(self) -> None:
        self._entries: dict[str, dict[str, Any]] = {}
        self.failures: dict[str, dict[str, str]] = {}
        self._lock = threading.Lock()

    def get(self, key: str) -> dict[str, Any] | None:
        with self._lock:
            return self._entries.get(key)

    def put(self, key: str, entry: dict[str, Any]) -> None:
        with self._lock:
            self._entries[key] = entry

    def put_failure(self, key: str, raw_text: str, error: str) -> None:
        with self._lock:
            self.failures[key] = {"raw_text": raw_text, "error": error}

    def __len__(self) -> int:
        return len(self._entries)


class NullCache:
    """Never hits; used when caching is disabled."""

    def get(self, key: str) -> dict[str, Any] | None:
        return None

    def put(self, key: str, entry: dict[str, Any]) -> None:
        pass

    def put_failure(self, key: str, raw_text: str, error: str) -> None:
        pass


class DirectoryCache:
    def __init__(self, root: str | Path) -> None:
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self._locks: dict[str, threading.Lock] = {}
        self._guard = threading.Lock()

    def _lock_for(self, key: str) -> threading.Lock:
        with self._guard:
            return self._locks.setdefault(key, threading.Lock())

    def _path(self, key: str) -> Path:
        return self.root / f"{key}.json"

    def get(self, key: str) -> dict[str, Any] | None:
        try:
            return json.loads(self._path(key).read_text(encoding="utf-8"))
        except FileNotFoundError:
            return None
        except json.JSONDecodeError:
            # a damaged entry is treated as a miss and overwritten
            return None

    def _write(self, path: Path, payload: dict[str, Any]) -> None:
        fd, tmp = tempfile.mkstemp(dir=self.root, prefix=".tmp-", suffix=".json")
        try:
            with os.fdopen(fd, "w", encoding="utf-8") as fh:
                json.dump(payload, fh, sort_keys=True, ensure_ascii=False)
            os.replace(tmp, path)
        except BaseException:
            Path(tmp).unlink(missing_ok=True)
            raise

    def put(self, key: str, entry: dict[str, Any]) -> None:
        with self._lock_for(key):
            self._write(self._path(key), entry)

    def put_failure(self, key: str, raw_text: str, error: str) -> None:
        failed = self.root / "failed"
        failed.mkdir(exist_ok=True)
        with self._lock_for(key):
            self._write(failed / f"{key}.json", {"raw_text": raw_text, "error": error})
