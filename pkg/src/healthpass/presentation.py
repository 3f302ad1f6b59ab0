"""QR presentation layer: key registry, MAC-sealed payloads, verification.

A payload is the canonical JSON body of {version, key id, issued/expiry
times, nonce, mode, embedded presentation, inclusion-proof reference}
sealed with HMAC-SHA-256 under the registry's active symmetric key and
encoded as

    base64url(body) "." base64url(mac)

Dynamic payloads live 60 seconds by default; static payloads live as
long as the embedded credential. The whole encoded string must fit in
2953 bytes (version-40 byte-mode QR capacity).

Verification runs decode -> mac -> expiry -> presentation -> ledger
inclusion, reporting the first failure. When no head history is
supplied (offline verifier), the ledger check is skipped and flagged
rather than failed; the embedded proof still lets any verifier with
published heads complete the check without contacting the ledger.

Rotated MAC keys stay verify-only for a grace period (twice the dynamic
TTL) and are then purged. The registry also tracks holder/issuer public
keys and push tokens for the notification queue.
"""

from __future__ import annotations

import hmac as hmac_mod
import secrets
import threading
import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

from .canonical import WIRE_VERSION, b64u, b64u_decode, canonical_json, from_json
from .ledger import CalendarHead, InclusionProof, verify_inclusion
from .vc import Mode, Presentation, verify_presentation

QR_CAPACITY_BYTES = 2953
DYNAMIC_TTL_SECONDS = 60
NONCE_LEN = 16

MALFORMED = "Malformed"
MAC_INVALID = "MacInvalid"
EXPIRED = "Expired"
PRESENTATION_INVALID = "PresentationInvalid"
LEDGER_MISMATCH = "LedgerMismatch"


class PayloadTooLarge(ValueError):
    """Encoded payload exceeds QR byte-mode capacity."""


class NoActiveKey(RuntimeError):
    """Registry has no active sealing key."""


class NoPushToken(KeyError):
    """Notification requested for a user with no registered push token."""


@dataclass
class QrKey:
    key_id: str
    secret: bytes
    not_before: int
    retired_at: Optional[int] = None  # set on rotation
    grace_until: Optional[int] = None  # verify-only window end


@dataclass
class KeyRegistry:
    """Token-server state: QR sealing keys, holder/issuer public keys,
    push tokens, and the simulated notification queues."""

    dynamic_ttl: int = DYNAMIC_TTL_SECONDS
    qr_keys: Dict[str, QrKey] = field(default_factory=dict)
    active_key_id: Optional[str] = None
    holder_keys: Dict[str, bytes] = field(default_factory=dict)
    issuer_keys: Dict[str, bytes] = field(default_factory=dict)
    push_tokens: Dict[str, str] = field(default_factory=dict)
    _queues: Dict[str, List[dict]] = field(default_factory=dict)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    # -- key lifecycle ---------------------------------------------------------

    def ensure_active_key(self, now: int) -> str:
        with self._lock:
            if self.active_key_id is None:
                return self._new_key_locked(now)
            return self.active_key_id

    def rotate_qr_key(self, now: int) -> str:
        """Retire the active key (verify-only until its grace period ends)
        and install a fresh one."""
        with self._lock:
            grace = 2 * self.dynamic_ttl
            if self.active_key_id is not None:
                old = self.qr_keys[self.active_key_id]
                old.retired_at = now
                old.grace_until = now + grace
            return self._new_key_locked(now)

    def _new_key_locked(self, now: int) -> str:
        key_id = f"k-{secrets.token_hex(4)}"
        self.qr_keys[key_id] = QrKey(key_id=key_id, secret=secrets.token_bytes(32), not_before=now)
        self.active_key_id = key_id
        return key_id

    def active_key(self, now: int) -> QrKey:
        with self._lock:
            if self.active_key_id is None:
                raise NoActiveKey("no active QR sealing key; rotate or seed one")
            return self.qr_keys[self.active_key_id]

    def key_for_verify(self, key_id: str, now: int) -> Optional[QrKey]:
        """Look up a key for MAC verification; purges keys past grace."""
        with self._lock:
            key = self.qr_keys.get(key_id)
            if key is None:
                return None
            if key.grace_until is not None and now >= key.grace_until:
                del self.qr_keys[key_id]
                return None
            return key

    # -- public key management -------------------------------------------------

    def register_holder(self, did: str, public_key: bytes) -> None:
        with self._lock:
            self.holder_keys[did] = public_key

    def trust_issuer(self, did: str, public_key: bytes) -> None:
        with self._lock:
            self.issuer_keys[did] = public_key

    def issuer_key_for(self, did: str) -> Optional[bytes]:
        with self._lock:
            return self.issuer_keys.get(did)

    # -- push notifications ------------------------------------------------------

    def register_push(self, user: str, token: str) -> None:
        """Register or replace a push token; deliveries go only to the
        queue of the token active at delivery time."""
        with self._lock:
            self.push_tokens[user] = token
            self._queues.setdefault(token, [])

    def notify(self, user: str, event: dict) -> None:
        with self._lock:
            token = self.push_tokens.get(user)
            if token is None:
                raise NoPushToken(user)
            self._queues.setdefault(token, []).append(event)

    def feed(self, user: str) -> List[dict]:
        with self._lock:
            token = self.push_tokens.get(user)
            if token is None:
                raise NoPushToken(user)
            return list(self._queues.get(token, []))

    # -- persistence -----------------------------------------------------------

    def to_state(self) -> dict:
        with self._lock:
            return {
                "dynamic_ttl": self.dynamic_ttl,
                "active_key_id": self.active_key_id,
                "qr_keys": {
                    kid: {
                        "secret": b64u(k.secret),
                        "not_before": k.not_before,
                        "retired_at": k.retired_at,
                        "grace_until": k.grace_until,
                    }
                    for kid, k in self.qr_keys.items()
                },
                "holder_keys": {d: b64u(k) for d, k in self.holder_keys.items()},
                "issuer_keys": {d: b64u(k) for d, k in self.issuer_keys.items()},
                "push_tokens": dict(self.push_tokens),
            }

    @classmethod
    def from_state(cls, state: dict) -> "KeyRegistry":
        reg = cls(dynamic_ttl=state.get("dynamic_ttl", DYNAMIC_TTL_SECONDS))
        reg.active_key_id = state.get("active_key_id")
        for kid, k in state.get("qr_keys", {}).items():
            reg.qr_keys[kid] = QrKey(
                key_id=kid,
                secret=b64u_decode(k["secret"]),
                not_before=k["not_before"],
                retired_at=k.get("retired_at"),
                grace_until=k.get("grace_until"),
            )
        reg.holder_keys = {d: b64u_decode(k) for d, k in state.get("holder_keys", {}).items()}
        reg.issuer_keys = {d: b64u_decode(k) for d, k in state.get("issuer_keys", {}).items()}
        reg.push_tokens = dict(state.get("push_tokens", {}))
        for token in reg.push_tokens.values():
            reg._queues.setdefault(token, [])
        return reg

    def export_verifier_bundle(self, heads: Optional[Sequence[CalendarHead]]) -> dict:
        """Everything an out-of-band verifier needs: MAC keys (active +
        grace), trusted issuer keys, and optionally the head history."""
        with self._lock:
            bundle = {
                "v": WIRE_VERSION,
                "dynamic_ttl": self.dynamic_ttl,
                "active_key_id": self.active_key_id,
                "qr_keys": {
                    kid: {
                        "secret": b64u(k.secret),
                        "not_before": k.not_before,
                        "retired_at": k.retired_at,
                        "grace_until": k.grace_until,
                    }
                    for kid, k in self.qr_keys.items()
                },
                "issuer_keys": {d: b64u(k) for d, k in self.issuer_keys.items()},
            }
        if heads is not None:
            bundle["heads"] = [h.head.hex() for h in heads]
        return bundle

    @classmethod
    def from_verifier_bundle(cls, bundle: dict) -> "KeyRegistry":
        reg = cls.from_state(
            {
                "dynamic_ttl": bundle.get("dynamic_ttl", DYNAMIC_TTL_SECONDS),
                "active_key_id": bundle.get("active_key_id"),
                "qr_keys": bundle.get("qr_keys", {}),
                "issuer_keys": bundle.get("issuer_keys", {}),
            }
        )
        return reg


def heads_from_bundle(bundle: dict) -> Optional[List[CalendarHead]]:
    if "heads" not in bundle:
        return None
    return [CalendarHead(batch_id=i, head=bytes.fromhex(h)) for i, h in enumerate(bundle["heads"])]


# --- payloads -----------------------------------------------------------------


@dataclass
class QrPayload:
    kid: str
    iat: int
    exp: int
    nonce: bytes
    mode: Mode
    presentation: Presentation
    proof: Optional[InclusionProof]
    mac: Optional[bytes] = None

    def body(self) -> dict:
        out = {
            "v": WIRE_VERSION,
            "kid": self.kid,
            "iat": self.iat,
            "exp": self.exp,
            "nonce": b64u(self.nonce),
            "mode": self.mode.value,
            "pres": self.presentation.to_wire(),
        }
        if self.proof is not None:
            out["proof_ref"] = self.proof.to_wire()
        return out

    def encode(self) -> str:
        if self.mac is None:
            raise ValueError("payload is unsealed")
        return b64u(canonical_json(self.body())) + "." + b64u(self.mac)


@dataclass(frozen=True)
class VerifiedStatus:
    outcome: str  # "accept" | "reject"
    reason: Optional[str] = None
    detail: Optional[str] = None
    claims: Optional[Dict[str, str]] = None
    credential_type: Optional[str] = None
    subject: Optional[str] = None
    mode: Optional[str] = None
    checked_at: int = 0
    ledger_check: str = "skipped"  # "passed" | "skipped" | "failed"

    @property
    def accepted(self) -> bool:
        return self.outcome == "accept"

    def __bool__(self) -> bool:
        return self.accepted

    def to_wire(self) -> dict:
        return {
            "v": WIRE_VERSION,
            "outcome": self.outcome,
            "reason": self.reason,
            "detail": self.detail,
            "claims": self.claims,
            "credential_type": self.credential_type,
            "subject": self.subject,
            "mode": self.mode,
            "checked_at": self.checked_at,
            "ledger_check": self.ledger_check,
        }


def mint_qr(
    presentation: Presentation,
    proof: Optional[InclusionProof],
    registry: KeyRegistry,
    kind: str,
    now: int,
) -> str:
    """Seal a presentation (plus its ledger proof) into an encoded payload.

    ``kind`` is "dynamic" (default TTL 60 s) or "static" (TTL = embedded
    credential expiry).
    """
    if kind not in ("dynamic", "static"):
        raise ValueError(f"kind must be 'dynamic' or 'static', got {kind!r}")
    key = registry.active_key(now)
    exp = now + registry.dynamic_ttl if kind == "dynamic" else presentation.credential.expires_at
    payload = QrPayload(
        kid=key.key_id,
        iat=now,
        exp=exp,
        nonce=presentation.nonce,
        mode=presentation.mode,
        presentation=presentation,
        proof=proof,
    )
    body_bytes = canonical_json(payload.body())
    payload.mac = hmac_mod.new(key.secret, body_bytes, "sha256").digest()
    encoded = payload.encode()
    if len(encoded.encode("ascii")) > QR_CAPACITY_BYTES:
        raise PayloadTooLarge(
            f"encoded payload is {len(encoded)} bytes; QR capacity is {QR_CAPACITY_BYTES}"
        )
    return encoded


def verify_qr(
    encoded: str | bytes,
    registry: KeyRegistry,
    heads: Optional[Sequence[CalendarHead]],
    now: int,
) -> VerifiedStatus:
    """Check a payload end to end; needs no interactive input.

    Check order: decode, MAC, expiry, presentation, ledger inclusion.
    With ``heads`` absent the ledger check is skipped-and-flagged, not
    failed (offline verifier policy).
    """

    def reject(reason: str, detail: Optional[str] = None, ledger_check: str = "skipped") -> VerifiedStatus:
        return VerifiedStatus(
            outcome="reject", reason=reason, detail=detail, checked_at=now, ledger_check=ledger_check
        )

    if isinstance(encoded, bytes):
        try:
            encoded = encoded.decode("ascii")
        except UnicodeDecodeError:
            return reject(MALFORMED, "payload is not ASCII")
    parts = encoded.strip().split(".")
    if len(parts) != 2:
        return reject(MALFORMED, "expected body.mac")
    try:
        body_bytes = b64u_decode(parts[0])
        mac = b64u_decode(parts[1])
    except ValueError as exc:
        return reject(MALFORMED, str(exc))

    try:
        body = from_json(body_bytes)
        if not isinstance(body, dict):
            raise ValueError("body is not an object")
    except ValueError as exc:
        return reject(MALFORMED, f"body is not JSON: {exc}")

    kid = body.get("kid")
    key = registry.key_for_verify(kid, now) if isinstance(kid, str) else None
    if key is None:
        return reject(MAC_INVALID, f"unknown or purged key {kid!r}")
    expected = hmac_mod.new(key.secret, canonical_json(body), "sha256").digest()
    if not hmac_mod.compare_digest(expected, mac):
        return reject(MAC_INVALID)

    try:
        exp = int(body["exp"])
        iat = int(body["iat"])
    except (KeyError, TypeError, ValueError):
        return reject(MALFORMED, "bad iat/exp")
    if now >= exp:
        return reject(EXPIRED, f"payload expired at {exp}")

    try:
        pres = Presentation.from_wire(body["pres"])
        nonce = b64u_decode(body["nonce"])
    except (KeyError, TypeError, ValueError) as exc:
        return reject(MALFORMED, f"bad presentation: {exc}")

    issuer_key = registry.issuer_key_for(pres.credential.issuer.uri)
    if issuer_key is None:
        return reject(PRESENTATION_INVALID, "untrusted issuer")
    result = verify_presentation(pres, issuer_key, expected_nonce=nonce, now=now)
    if not result:
        return reject(PRESENTATION_INVALID, result.reason)

    ledger_check = "skipped"
    if heads is not None:
        proof_wire = body.get("proof_ref")
        if proof_wire is None:
            return reject(LEDGER_MISMATCH, "payload carries no ledger proof", "failed")
        try:
            proof = InclusionProof.from_wire(proof_wire)
        except (KeyError, TypeError, ValueError) as exc:
            return reject(LEDGER_MISMATCH, f"bad proof: {exc}", "failed")
        if proof.leaf_digest != pres.credential.digest():
            return reject(LEDGER_MISMATCH, "proof leaf is not this credential", "failed")
        check = verify_inclusion(proof, heads)
        if not check:
            return reject(LEDGER_MISMATCH, check.reason, "failed")
        ledger_check = "passed"

    return VerifiedStatus(
        outcome="accept",
        claims=result.claims,
        credential_type=result.credential_type.value if result.credential_type else None,
        subject=result.subject,
        mode=result.mode.value if result.mode else None,
        checked_at=now,
        ledger_check=ledger_check,
    )
