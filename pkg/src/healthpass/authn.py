"""Challenge-response authentication with signed extension envelopes.

Registration binds a user to an authenticator public key (self-attested:
the enclosed key signs the registration challenge). After that, every
application payload travels inside a SignedEnvelope: the authenticator
signs

    SHA-256(challenge || canonical(client_context) || payload || counter_be8)

so releasing the payload to the caller carries the same consent
semantics as the authentication gesture itself. Challenges are 32
random bytes, single-use, and expire; sign counters must strictly
increase, which flags cloned authenticators.

Sessions ride an ephemeral X25519 exchange: both sides derive
HKDF(shared_secret, salt=transcript_hash) and confirm with an HMAC over
the transcript; the ephemeral private keys are dropped right after
derivation, so no persisted material can recompute a past session key.

The server side never sees a biometric: the "gesture" is whatever
unlocks the client's signing key locally.
"""

from __future__ import annotations

import hmac as hmac_mod
import secrets
import threading
import time
from dataclasses import dataclass
from typing import Callable, Dict, Optional, Tuple

from cryptography.hazmat.primitives import hashes
from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey
from cryptography.hazmat.primitives.asymmetric.x25519 import (
    X25519PrivateKey,
    X25519PublicKey,
)
from cryptography.hazmat.primitives.kdf.hkdf import HKDF

from .canonical import b64u, b64u_decode, canonical_json, sha256
from .vc import _ed25519_verify

CHALLENGE_LEN = 32
CREDENTIAL_ID_LEN = 16
DEFAULT_CHALLENGE_TTL = 120

CHALLENGE_INVALID = "ChallengeInvalid"
SIGNATURE_INVALID = "SignatureInvalid"
COUNTER_REGRESSION = "CounterRegression"

_SESSION_INFO = b"healthpass-session-v1"
_CONFIRM_TAG = b"confirm"


class AttestationInvalid(ValueError):
    """Registration attestation does not verify under the enclosed key."""


class ChallengeError(ValueError):
    """No live registration challenge for this registration attempt."""


class UnknownUser(KeyError):
    """No authenticator registered for this user."""


class SessionNotAuthorized(PermissionError):
    """establish_session called without a preceding accepted 'session' auth."""


@dataclass
class Challenge:
    value: bytes
    user_id: str
    operation: str
    issued_at: int
    ttl_seconds: int
    used: bool = False

    def expired(self, now: float) -> bool:
        return now >= self.issued_at + self.ttl_seconds


@dataclass
class AuthenticatorRecord:
    user_id: str
    credential_id: bytes
    public_key: bytes
    sign_counter: int
    registered_at: int


@dataclass
class SignedEnvelope:
    challenge: bytes
    client_context: dict
    payload: bytes
    counter: int
    signature: bytes

    def to_wire(self) -> dict:
        return {
            "v": 1,
            "challenge": b64u(self.challenge),
            "client_context": self.client_context,
            "payload": b64u(self.payload),
            "counter": self.counter,
            "signature": b64u(self.signature),
        }

    @classmethod
    def from_wire(cls, data: dict) -> "SignedEnvelope":
        return cls(
            challenge=b64u_decode(data["challenge"]),
            client_context=dict(data["client_context"]),
            payload=b64u_decode(data["payload"]),
            counter=int(data["counter"]),
            signature=b64u_decode(data["signature"]),
        )


def envelope_message(
    challenge: bytes, client_context: dict, payload: bytes, counter: int
) -> bytes:
    """Digest the authenticator signs for an envelope."""
    return sha256(
        challenge
        + canonical_json(client_context)
        + payload
        + counter.to_bytes(8, "big")
    )


def sign_envelope(
    key: Ed25519PrivateKey,
    challenge: bytes,
    client_context: dict,
    payload: bytes,
    counter: int,
) -> SignedEnvelope:
    """Client-side helper: build and sign an extension envelope."""
    sig = key.sign(envelope_message(challenge, client_context, payload, counter))
    return SignedEnvelope(challenge, client_context, payload, counter, sig)


def client_context(
    operation: str,
    origin: str,
    timestamp: int,
    geolocation: Optional[str] = None,
    device: Optional[str] = None,
) -> dict:
    """Context map carried in envelopes. Absent values are recorded as
    null, never invented."""
    return {
        "origin": origin,
        "operation": operation,
        "timestamp": timestamp,
        "geolocation": geolocation,
        "device": device,
    }


@dataclass(frozen=True)
class AuthnResult:
    accepted: bool
    reason: Optional[str] = None
    payload: Optional[bytes] = None
    user_id: Optional[str] = None

    def __bool__(self) -> bool:
        return self.accepted


@dataclass
class Session:
    session_id: str
    user_id: str
    key: bytes


def _derive_session_key(shared: bytes, transcript: bytes) -> bytes:
    return HKDF(
        algorithm=hashes.SHA256(), length=32, salt=transcript, info=_SESSION_INFO
    ).derive(shared)


def _confirm_mac(key: bytes, transcript: bytes) -> bytes:
    return hmac_mod.new(key, _CONFIRM_TAG + transcript, "sha256").digest()


class SessionClient:
    """Holder side of the ephemeral key exchange."""

    def __init__(self) -> None:
        eph = X25519PrivateKey.generate()
        self.public = eph.public_key().public_bytes_raw()
        self._eph: Optional[X25519PrivateKey] = eph

    def complete(self, server_public: bytes, confirm: bytes) -> Session:
        """Derive the session key, check the server's confirmation MAC,
        and discard the ephemeral private key."""
        if self._eph is None:
            raise RuntimeError("handshake already completed")
        shared = self._eph.exchange(X25519PublicKey.from_public_bytes(server_public))
        self._eph = None  # ephemeral gone; key not recomputable from here on
        transcript = sha256(self.public + server_public)
        key = _derive_session_key(shared, transcript)
        if not hmac_mod.compare_digest(_confirm_mac(key, transcript), confirm):
            raise SessionNotAuthorized("key-confirmation MAC mismatch")
        return Session(session_id=secrets.token_hex(8), user_id="", key=key)


class RelyingParty:
    """Server-side registration, assertion, and session state.

    Challenge consumption is atomic test-and-consume: any finish_auth
    attempt that reaches verification burns the cited challenge, accepted
    or not. Counter updates happen under the same lock.
    """

    def __init__(
        self,
        clock: Callable[[], float] = time.time,
        challenge_ttl: int = DEFAULT_CHALLENGE_TTL,
    ):
        self._clock = clock
        self.challenge_ttl = challenge_ttl
        self._lock = threading.Lock()
        self._records: Dict[str, AuthenticatorRecord] = {}
        self._challenges: Dict[bytes, Challenge] = {}
        self._sessions: Dict[str, Session] = {}
        self._session_grants: Dict[str, bool] = {}

    # -- registration ---------------------------------------------------------

    def begin_register(self, user_id: str) -> Challenge:
        return self._new_challenge(user_id, "register")

    def register(
        self, user_id: str, public_key: bytes, attestation_signature: bytes
    ) -> AuthenticatorRecord:
        """Store an authenticator record after checking the self-attestation
        (the enclosed key's signature over the live registration challenge)."""
        with self._lock:
            ch = self._take_challenge_locked(user_id, "register")
        if ch is None:
            raise ChallengeError("no live registration challenge for user")
        if len(public_key) != 32 or not _ed25519_verify(
            public_key, attestation_signature, ch.value
        ):
            raise AttestationInvalid("attestation does not verify under enclosed key")
        record = AuthenticatorRecord(
            user_id=user_id,
            credential_id=secrets.token_bytes(CREDENTIAL_ID_LEN),
            public_key=public_key,
            sign_counter=0,
            registered_at=int(self._clock()),
        )
        with self._lock:
            self._records[user_id] = record
        return record

    # -- assertion ------------------------------------------------------------

    def begin_auth(self, user_id: str, operation: str) -> Challenge:
        with self._lock:
            if user_id not in self._records:
                raise UnknownUser(user_id)
        return self._new_challenge(user_id, operation)

    def finish_auth(self, envelope: SignedEnvelope) -> AuthnResult:
        """Verify an envelope; on accept, release the payload bytes.

        The cited challenge is consumed whether or not verification
        succeeds, so replays always land on ChallengeInvalid.
        """
        with self._lock:
            ch = self._challenges.get(envelope.challenge)
            if ch is None or ch.used or ch.expired(self._clock()):
                return AuthnResult(False, CHALLENGE_INVALID)
            ch.used = True
            record = self._records.get(ch.user_id)
        if record is None:
            return AuthnResult(False, CHALLENGE_INVALID)
        if envelope.client_context.get("operation") != ch.operation:
            return AuthnResult(False, CHALLENGE_INVALID)
        message = envelope_message(
            envelope.challenge, envelope.client_context, envelope.payload, envelope.counter
        )
        if not _ed25519_verify(record.public_key, envelope.signature, message):
            return AuthnResult(False, SIGNATURE_INVALID)
        with self._lock:
            if envelope.counter <= record.sign_counter:
                return AuthnResult(False, COUNTER_REGRESSION)
            record.sign_counter = envelope.counter
            if ch.operation == "session":
                self._session_grants[ch.user_id] = True
        return AuthnResult(True, payload=envelope.payload, user_id=ch.user_id)

    # -- sessions -------------------------------------------------------------

    def establish_session(
        self, user_id: str, client_public: bytes
    ) -> Tuple[bytes, bytes, Session]:
        """Server side of the ephemeral exchange; requires a preceding
        accepted finish_auth for operation "session".

        Returns (server_public, confirmation_mac, session). The server's
        ephemeral private key is discarded before returning.
        """
        with self._lock:
            if not self._session_grants.pop(user_id, False):
                raise SessionNotAuthorized(
                    "establish_session requires an accepted 'session' assertion"
                )
        eph = X25519PrivateKey.generate()
        server_public = eph.public_key().public_bytes_raw()
        shared = eph.exchange(X25519PublicKey.from_public_bytes(client_public))
        del eph  # forward secrecy: ephemeral never outlives derivation
        transcript = sha256(client_public + server_public)
        key = _derive_session_key(shared, transcript)
        session = Session(session_id=secrets.token_hex(8), user_id=user_id, key=key)
        with self._lock:
            self._sessions[session.session_id] = session
        return server_public, _confirm_mac(key, transcript), session

    def session(self, session_id: str) -> Optional[Session]:
        with self._lock:
            return self._sessions.get(session_id)

    # -- introspection --------------------------------------------------------

    def record(self, user_id: str) -> Optional[AuthenticatorRecord]:
        with self._lock:
            return self._records.get(user_id)

    def registered(self, user_id: str) -> bool:
        return self.record(user_id) is not None

    def persistable_state(self) -> dict:
        """Durable server state: records only. Challenges, grants, and
        session keys are deliberately volatile; no ephemeral key material
        ever appears here."""
        with self._lock:
            return {
                u: {
                    "credential_id": b64u(r.credential_id),
                    "public_key": b64u(r.public_key),
                    "sign_counter": r.sign_counter,
                    "registered_at": r.registered_at,
                }
                for u, r in self._records.items()
            }

    def load_state(self, state: dict) -> None:
        with self._lock:
            for u, r in state.items():
                self._records[u] = AuthenticatorRecord(
                    user_id=u,
                    credential_id=b64u_decode(r["credential_id"]),
                    public_key=b64u_decode(r["public_key"]),
                    sign_counter=int(r["sign_counter"]),
                    registered_at=int(r["registered_at"]),
                )

    # -- internals ------------------------------------------------------------

    def _new_challenge(self, user_id: str, operation: str) -> Challenge:
        ch = Challenge(
            value=secrets.token_bytes(CHALLENGE_LEN),
            user_id=user_id,
            operation=operation,
            issued_at=int(self._clock()),
            ttl_seconds=self.challenge_ttl,
        )
        with self._lock:
            self._challenges[ch.value] = ch
        return ch

    def _take_challenge_locked(self, user_id: str, operation: str) -> Optional[Challenge]:
        """Find, validate, and consume the newest live challenge for
        (user, operation). Caller holds the lock."""
        live = [
            c
            for c in self._challenges.values()
            if c.user_id == user_id
            and c.operation == operation
            and not c.used
            and not c.expired(self._clock())
        ]
        if not live:
            return None
        ch = max(live, key=lambda c: c.issued_at)
        ch.used = True
        return ch
