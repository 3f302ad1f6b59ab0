"""File-backed secrets store for service key material.

One JSON file mapping secret names to base64url values, mode 0600.
Holds signing seeds, QR MAC keys, and pseudonym keys - never PII.
"""

from __future__ import annotations

import json
import os
import threading
from pathlib import Path
from typing import Callable, Dict, Optional

from ..canonical import b64u, b64u_decode


class SecretsStore:
    def __init__(self, path: Path):
        self.path = Path(path)
        self._lock = threading.Lock()
        self._data: Dict[str, str] = {}
        if self.path.exists():
            self._data = json.loads(self.path.read_text())

    def get(self, name: str) -> Optional[bytes]:
        with self._lock:
            value = self._data.get(name)
        return b64u_decode(value) if value is not None else None

    def put(self, name: str, value: bytes) -> None:
        with self._lock:
            self._data[name] = b64u(value)
            self._write()

    def get_or_create(self, name: str, factory: Callable[[], bytes]) -> bytes:
        with self._lock:
            if name not in self._data:
                self._data[name] = b64u(factory())
                self._write()
            return b64u_decode(self._data[name])

    def get_json(self, name: str) -> Optional[dict]:
        raw = self.get(name)
        return json.loads(raw) if raw is not None else None

    def put_json(self, name: str, value: dict) -> None:
        self.put(name, json.dumps(value, sort_keys=True).encode("utf-8"))

    def _write(self) -> None:
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.path.write_text(json.dumps(self._data, indent=1, sort_keys=True))
        os.chmod(self.path, 0o600)
