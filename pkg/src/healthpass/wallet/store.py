"""Encrypted wallet container.

Contents (holder signing seed, credentials with their claims and
receipts, access/refresh tokens, sign counter) serialize to canonical
JSON and are sealed with ChaCha20-Poly1305 under a key derived from the
passphrase via Argon2id (64 MiB, 3 iterations, 1 lane). The file holds
only {version, KDF parameters, salt, nonce, ciphertext}; plaintext
never touches disk, and a wrong passphrase fails authenticated
decryption rather than yielding garbage.

The file is exclusively flocked while a command holds it open.
"""

from __future__ import annotations

import fcntl
import json
import os
import secrets
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives.ciphers.aead import ChaCha20Poly1305
from cryptography.hazmat.primitives.kdf.argon2 import Argon2id

from ..canonical import b64u, b64u_decode, canonical_json

KDF_NAME = "argon2id"
KDF_MEMORY_KIB = 64 * 1024
KDF_ITERATIONS = 3
KDF_LANES = 1
SALT_LEN = 16
NONCE_LEN = 12


class DecryptFailed(ValueError):
    """Wrong passphrase or corrupted container."""


class WalletLocked(RuntimeError):
    """Another process holds the wallet file."""


class WalletMissing(FileNotFoundError):
    """No wallet container at the given path."""


@dataclass
class WalletData:
    holder_seed: bytes
    did: str
    credentials: List[dict] = field(default_factory=list)
    tokens: Dict[str, dict] = field(default_factory=dict)
    authn: Dict[str, object] = field(default_factory=lambda: {"counter": 0})
    meta: Dict[str, str] = field(default_factory=dict)

    def to_wire(self) -> dict:
        return {
            "v": 1,
            "holder_seed": b64u(self.holder_seed),
            "did": self.did,
            "credentials": self.credentials,
            "tokens": self.tokens,
            "authn": self.authn,
            "meta": self.meta,
        }

    @classmethod
    def from_wire(cls, data: dict) -> "WalletData":
        return cls(
            holder_seed=b64u_decode(data["holder_seed"]),
            did=data["did"],
            credentials=list(data.get("credentials", [])),
            tokens=dict(data.get("tokens", {})),
            authn=dict(data.get("authn", {"counter": 0})),
            meta=dict(data.get("meta", {})),
        )

    def find_credentials(self, credential_type: Optional[str] = None) -> List[dict]:
        items = self.credentials
        if credential_type:
            items = [c for c in items if c["credential"]["credential_type"] == credential_type]
        return items

    def has_observation(self, observation_id: str) -> bool:
        return any(c.get("observation_id") == observation_id for c in self.credentials)


def _derive_key(passphrase: str, salt: bytes, params: dict) -> bytes:
    return Argon2id(
        salt=salt,
        length=32,
        iterations=int(params["iterations"]),
        lanes=int(params["lanes"]),
        memory_cost=int(params["memory_kib"]),
    ).derive(passphrase.encode("utf-8"))


class WalletStore:
    def __init__(self, path: Path):
        self.path = Path(path)
        self._lock_fh = None

    def exists(self) -> bool:
        return self.path.exists()

    def create(self, passphrase: str, data: WalletData) -> None:
        if self.path.exists():
            raise FileExistsError(f"wallet already exists at {self.path}")
        self.save(passphrase, data)

    def save(self, passphrase: str, data: WalletData) -> None:
        salt = secrets.token_bytes(SALT_LEN)
        nonce = secrets.token_bytes(NONCE_LEN)
        params = {
            "name": KDF_NAME,
            "memory_kib": KDF_MEMORY_KIB,
            "iterations": KDF_ITERATIONS,
            "lanes": KDF_LANES,
        }
        key = _derive_key(passphrase, salt, params)
        ciphertext = ChaCha20Poly1305(key).encrypt(nonce, canonical_json(data.to_wire()), None)
        container = {
            "v": 1,
            "kdf": {**params, "salt": b64u(salt)},
            "nonce": b64u(nonce),
            "ciphertext": b64u(ciphertext),
        }
        self.path.parent.mkdir(parents=True, exist_ok=True)
        tmp = self.path.with_suffix(self.path.suffix + ".tmp")
        tmp.write_text(json.dumps(container, indent=1))
        os.replace(tmp, self.path)

    def open(self, passphrase: str) -> WalletData:
        if not self.path.exists():
            raise WalletMissing(str(self.path))
        container = json.loads(self.path.read_text())
        kdf = container["kdf"]
        key = _derive_key(passphrase, b64u_decode(kdf["salt"]), kdf)
        try:
            plaintext = ChaCha20Poly1305(key).decrypt(
                b64u_decode(container["nonce"]), b64u_decode(container["ciphertext"]), None
            )
        except InvalidTag as exc:
            raise DecryptFailed("authenticated decryption failed") from exc
        return WalletData.from_wire(json.loads(plaintext))

    # -- exclusive file lock -----------------------------------------------------

    def acquire_lock(self) -> None:
        lock_path = self.path.with_suffix(self.path.suffix + ".lock")
        lock_path.parent.mkdir(parents=True, exist_ok=True)
        self._lock_fh = open(lock_path, "w")
        try:
            fcntl.flock(self._lock_fh, fcntl.LOCK_EX | fcntl.LOCK_NB)
        except OSError as exc:
            self._lock_fh.close()
            self._lock_fh = None
            raise WalletLocked(f"wallet {self.path} is locked by another process") from exc

    def release_lock(self) -> None:
        if self._lock_fh is not None:
            fcntl.flock(self._lock_fh, fcntl.LOCK_UN)
            self._lock_fh.close()
            self._lock_fh = None

    def __enter__(self) -> "WalletStore":
        self.acquire_lock()
        return self

    def __exit__(self, *exc) -> None:
        self.release_lock()
