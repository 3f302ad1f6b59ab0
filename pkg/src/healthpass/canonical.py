"""Canonical wire encoding shared by every module.

Every envelope in the system serializes to canonical JSON: sorted keys,
no insignificant whitespace, UTF-8. Binary fields ride as unpadded
base64url strings, timestamps as integer Unix seconds, and every
top-level envelope carries a version field ``"v": 1``.

Canonicalization must be stable: serialize -> parse -> serialize is
byte-identical, which is what makes signatures and ledger digests over
these bytes meaningful.
"""

from __future__ import annotations

import base64
import hashlib
import json
from typing import Any

WIRE_VERSION = 1


def canonical_json(obj: Any) -> bytes:
    """Serialize to canonical JSON bytes (sorted keys, compact, UTF-8)."""
    return json.dumps(
        obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False
    ).encode("utf-8")


def from_json(data: bytes | str) -> Any:
    return json.loads(data)


def b64u(raw: bytes) -> str:
    """Encode bytes as base64url without padding."""
    return base64.urlsafe_b64encode(raw).rstrip(b"=").decode("ascii")


def b64u_decode(text: str) -> bytes:
    """Decode unpadded base64url; strict.

    Rejects any input that is not the canonical encoding of its decoded
    bytes (padding characters, trailing-bit aliases), so each byte string
    has exactly one wire form.
    """
    if not isinstance(text, str):
        raise ValueError("base64url field must be a string")
    pad = -len(text) % 4
    try:
        raw = base64.urlsafe_b64decode(text + "=" * pad)
    except Exception as exc:
        raise ValueError(f"invalid base64url: {exc}") from exc
    if b64u(raw) != text:
        raise ValueError("non-canonical base64url encoding")
    return raw


def sha256(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()
