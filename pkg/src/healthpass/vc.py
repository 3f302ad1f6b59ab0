"""Credential data model: DIDs, salted-hash claims, issuance, presentation.

A credential binds a subject DID to a set of claims without carrying the
claim plaintext: each claim is committed as

    commitment[name] = SHA-256(salt || name || 0x1F || value)

with a fresh random 16-byte salt per claim. The issuer signs the
canonical credential body (Ed25519 over canonical JSON), so any party
holding the issuer's public key can check authenticity and expiry while
the claim values stay with the holder. A presentation re-attaches a
chosen subset of (name, value, salt) triples; verifiers re-hash each
triple against the committed digest, check the holder's signature under
the subject DID's key, and match the challenge nonce.

The 0x1F separator between name and value prevents boundary ambiguity
("a"||"bc" vs "ab"||"c"); the salt prefix makes commitments hiding for
low-entropy values.
"""

from __future__ import annotations

import hmac
import secrets
import uuid
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Dict, Iterable, Mapping, Optional

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)

from .canonical import WIRE_VERSION, b64u, b64u_decode, canonical_json, sha256

DID_METHOD = "key"
ED25519_MULTICODEC = b"\xed\x01"
PROOF_SUITE = "Ed25519-2020-canonical-json"
SALT_LEN = 16
NONCE_LEN = 16
SIGNATURE_LEN = 64

# Claim names that must never be revealed in a de-identified presentation.
IDENTITY_CLAIMS = frozenset({"full_name", "date_of_birth", "document_number", "address"})

# Rejection reasons for credential verification.
BAD_SIGNATURE = "BadSignature"
EXPIRED = "Expired"
ISSUER_MISMATCH = "IssuerMismatch"
# Rejection reasons for presentation verification.
CREDENTIAL_INVALID = "CredentialInvalid"
COMMITMENT_MISMATCH = "CommitmentMismatch"
HOLDER_SIGNATURE_INVALID = "HolderSignatureInvalid"
NONCE_MISMATCH = "NonceMismatch"


class InvalidKey(ValueError):
    """Raised for malformed public key material."""


class InvalidTtl(ValueError):
    """Raised when a credential lifetime is non-positive."""


class UnknownClaim(KeyError):
    """Raised when a reveal set names a claim the credential lacks."""


class DisclosurePolicyViolation(ValueError):
    """Raised when a de-identified presentation would reveal identity claims."""


# --- base58btc (multibase 'z') ----------------------------------------------
# The base58 package is not available in this environment; the codec is
# small enough to carry here.

_B58_ALPHABET = "123456789ABCDEFGHJKLMNPQRSTUVWXYZabcdefghijkmnopqrstuvwxyz"
_B58_INDEX = {c: i for i, c in enumerate(_B58_ALPHABET)}


def _b58encode(raw: bytes) -> str:
    num = int.from_bytes(raw, "big")
    out = ""
    while num:
        num, rem = divmod(num, 58)
        out = _B58_ALPHABET[rem] + out
    pad = len(raw) - len(raw.lstrip(b"\x00"))
    return "1" * pad + out


def _b58decode(text: str) -> bytes:
    num = 0
    for ch in text:
        if ch not in _B58_INDEX:
            raise ValueError(f"invalid base58 character {ch!r}")
        num = num * 58 + _B58_INDEX[ch]
    raw = num.to_bytes((num.bit_length() + 7) // 8, "big")
    pad = len(text) - len(text.lstrip("1"))
    return b"\x00" * pad + raw


# --- DIDs --------------------------------------------------------------------


@dataclass(frozen=True)
class Did:
    """Deterministic identifier derived from an Ed25519 public key.

    Two DIDs are equal iff their public keys are equal; the key is
    recoverable from the identifier, so no resolution network exists.
    """

    method: str
    key_id: str

    @property
    def uri(self) -> str:
        return f"did:{self.method}:{self.key_id}"

    def public_key(self) -> bytes:
        """Recover the 32-byte Ed25519 public key encoded in this DID."""
        if not self.key_id.startswith("z"):
            raise InvalidKey("key_id is not multibase base58btc")
        try:
            raw = _b58decode(self.key_id[1:])
        except ValueError as exc:
            raise InvalidKey(str(exc)) from exc
        if not raw.startswith(ED25519_MULTICODEC) or len(raw) != 34:
            raise InvalidKey("key_id does not encode an Ed25519 public key")
        return raw[2:]

    @classmethod
    def from_uri(cls, uri: str) -> "Did":
        parts = uri.split(":")
        if len(parts) != 3 or parts[0] != "did" or parts[1] != DID_METHOD:
            raise InvalidKey(f"unsupported DID: {uri!r}")
        did = cls(method=parts[1], key_id=parts[2])
        did.public_key()  # validate eagerly
        return did

    def __str__(self) -> str:
        return self.uri


def derive_did(public_key: bytes) -> Did:
    """Derive the DID for a 32-byte Ed25519 public key. Deterministic."""
    if not isinstance(public_key, (bytes, bytearray)) or len(public_key) != 32:
        raise InvalidKey("Ed25519 public key must be exactly 32 bytes")
    key_id = "z" + _b58encode(ED25519_MULTICODEC + bytes(public_key))
    return Did(method=DID_METHOD, key_id=key_id)


def _ed25519_verify(public_key: bytes, signature: bytes, message: bytes) -> bool:
    try:
        Ed25519PublicKey.from_public_bytes(public_key).verify(signature, message)
        return True
    except (InvalidSignature, ValueError):
        return False


# --- Claims ------------------------------------------------------------------


@dataclass(frozen=True)
class Claim:
    value: str
    salt: bytes

    def __post_init__(self) -> None:
        if len(self.salt) != SALT_LEN:
            raise ValueError(f"salt must be {SALT_LEN} bytes")


def commitment(name: str, value: str, salt: bytes) -> bytes:
    """SHA-256(salt || name || 0x1F || value) over UTF-8 encodings."""
    return sha256(salt + name.encode("utf-8") + b"\x1f" + value.encode("utf-8"))


class ClaimSet:
    """Ordered (canonically sorted) map of claim name -> (value, salt)."""

    def __init__(self, items: Mapping[str, Claim]):
        self._items: Dict[str, Claim] = dict(sorted(items.items()))
        salts = [c.salt for c in self._items.values()]
        if len(set(salts)) != len(salts):
            raise ValueError("claim salts must be unique within a credential")

    @classmethod
    def fresh(cls, claims: Mapping[str, str]) -> "ClaimSet":
        """Build a claim set with a fresh random salt per claim."""
        return cls({n: Claim(v, secrets.token_bytes(SALT_LEN)) for n, v in claims.items()})

    def names(self) -> list[str]:
        return list(self._items)

    def __contains__(self, name: str) -> bool:
        return name in self._items

    def __len__(self) -> int:
        return len(self._items)

    def __getitem__(self, name: str) -> Claim:
        return self._items[name]

    def items(self) -> Iterable[tuple[str, Claim]]:
        return self._items.items()

    def values_map(self) -> Dict[str, str]:
        return {n: c.value for n, c in self._items.items()}

    def subset(self, names: Iterable[str]) -> "ClaimSet":
        return ClaimSet({n: self._items[n] for n in names})

    def commitments(self) -> Dict[str, bytes]:
        return {n: commitment(n, c.value, c.salt) for n, c in self._items.items()}

    def to_wire(self) -> Dict[str, Dict[str, str]]:
        return {n: {"value": c.value, "salt": b64u(c.salt)} for n, c in self._items.items()}

    @classmethod
    def from_wire(cls, data: Mapping[str, Mapping[str, str]]) -> "ClaimSet":
        return cls({n: Claim(e["value"], b64u_decode(e["salt"])) for n, e in data.items()})

    def __eq__(self, other: object) -> bool:
        return isinstance(other, ClaimSet) and self._items == other._items


# --- Credentials -------------------------------------------------------------


class CredentialType(str, Enum):
    IDENTITY = "Identity"
    TEST_RESULT = "TestResult"
    VACCINATION = "Vaccination"


@dataclass(frozen=True)
class CredentialProof:
    suite: str
    verification_method: Did
    signature: bytes

    def __post_init__(self) -> None:
        if len(self.signature) != SIGNATURE_LEN:
            raise ValueError(f"signature must be {SIGNATURE_LEN} bytes")

    def to_wire(self) -> dict:
        return {
            "suite": self.suite,
            "verification_method": self.verification_method.uri,
            "signature": b64u(self.signature),
        }

    @classmethod
    def from_wire(cls, data: Mapping) -> "CredentialProof":
        return cls(
            suite=data["suite"],
            verification_method=Did.from_uri(data["verification_method"]),
            signature=b64u_decode(data["signature"]),
        )


@dataclass
class VerifiableCredential:
    """Signed claim container. ``claims`` travels only with the holder;
    the signed body carries commitments alone."""

    id: str
    credential_type: CredentialType
    issuer: Did
    subject: Did
    issued_at: int
    expires_at: int
    commitments: Dict[str, bytes]
    proof: Optional[CredentialProof] = None
    claims: Optional[ClaimSet] = field(default=None, compare=False)

    def signing_body(self) -> dict:
        return {
            "v": WIRE_VERSION,
            "id": self.id,
            "credential_type": self.credential_type.value,
            "issuer": self.issuer.uri,
            "subject": self.subject.uri,
            "issued_at": self.issued_at,
            "expires_at": self.expires_at,
            "commitments": {n: b64u(c) for n, c in sorted(self.commitments.items())},
        }

    def to_wire(self, include_claims: bool = False) -> dict:
        body = self.signing_body()
        if self.proof is not None:
            body["proof"] = self.proof.to_wire()
        if include_claims and self.claims is not None:
            body["claims"] = self.claims.to_wire()
        return body

    @classmethod
    def from_wire(cls, data: Mapping) -> "VerifiableCredential":
        if data.get("v") != WIRE_VERSION:
            raise ValueError(f"unsupported credential envelope version {data.get('v')!r}")
        return cls(
            id=data["id"],
            credential_type=CredentialType(data["credential_type"]),
            issuer=Did.from_uri(data["issuer"]),
            subject=Did.from_uri(data["subject"]),
            issued_at=int(data["issued_at"]),
            expires_at=int(data["expires_at"]),
            commitments={n: b64u_decode(c) for n, c in data["commitments"].items()},
            proof=CredentialProof.from_wire(data["proof"]) if "proof" in data else None,
            claims=ClaimSet.from_wire(data["claims"]) if "claims" in data else None,
        )

    def canonical_bytes(self) -> bytes:
        """Canonical form including the proof, excluding holder-side claims.

        This is the form whose SHA-256 gets anchored on the ledger.
        """
        return canonical_json(self.to_wire(include_claims=False))

    def digest(self) -> bytes:
        return sha256(self.canonical_bytes())

    def without_claims(self) -> "VerifiableCredential":
        return replace(self, claims=None)


@dataclass(frozen=True)
class VerificationResult:
    accepted: bool
    reason: Optional[str] = None

    def __bool__(self) -> bool:
        return self.accepted


def issue_credential(
    claims: Mapping[str, str],
    ctype: CredentialType,
    issuer_key: Ed25519PrivateKey,
    subject: Did,
    ttl_seconds: int,
    now: int,
) -> VerifiableCredential:
    """Issue a signed credential committing to ``claims`` with fresh salts.

    The returned credential carries the claim set (value + salt per claim)
    for delivery to the holder; the signature covers commitments only.
    """
    if ttl_seconds <= 0:
        raise InvalidTtl(f"ttl_seconds must be positive, got {ttl_seconds}")
    claim_set = ClaimSet.fresh(claims)
    issuer_did = derive_did(issuer_key.public_key().public_bytes_raw())
    vc = VerifiableCredential(
        id=str(uuid.uuid4()),
        credential_type=ctype,
        issuer=issuer_did,
        subject=subject,
        issued_at=int(now),
        expires_at=int(now) + int(ttl_seconds),
        commitments=claim_set.commitments(),
        claims=claim_set,
    )
    signature = issuer_key.sign(canonical_json(vc.signing_body()))
    vc.proof = CredentialProof(
        suite=PROOF_SUITE, verification_method=issuer_did, signature=signature
    )
    return vc


def verify_credential(
    vc: VerifiableCredential, issuer_pubkey: bytes, now: int
) -> VerificationResult:
    """Accept iff the issuer signature holds, the credential is unexpired
    (``now < expires_at``; the expiry instant itself is expired), and the
    issuer matches the proof's verification method."""
    if vc.proof is None or vc.proof.suite != PROOF_SUITE:
        return VerificationResult(False, BAD_SIGNATURE)
    expected_issuer = derive_did(issuer_pubkey)
    if vc.issuer != expected_issuer or vc.proof.verification_method != vc.issuer:
        return VerificationResult(False, ISSUER_MISMATCH)
    if not _ed25519_verify(issuer_pubkey, vc.proof.signature, canonical_json(vc.signing_body())):
        return VerificationResult(False, BAD_SIGNATURE)
    if now >= vc.expires_at:
        return VerificationResult(False, EXPIRED)
    return VerificationResult(True)


# --- Presentations -----------------------------------------------------------


class Mode(str, Enum):
    IDENTIFIED = "identified"
    DEIDENTIFIED = "deidentified"


@dataclass
class Presentation:
    """Holder-signed disclosure of selected claims, bound to a nonce."""

    credential: VerifiableCredential
    revealed: ClaimSet
    mode: Mode
    nonce: bytes
    created_at: int
    holder_signature: Optional[bytes] = None

    def body(self) -> dict:
        return {
            "v": WIRE_VERSION,
            "credential": self.credential.to_wire(include_claims=False),
            "revealed": self.revealed.to_wire(),
            "mode": self.mode.value,
            "nonce": b64u(self.nonce),
            "created_at": self.created_at,
        }

    def signed_message(self) -> bytes:
        """Canonical presentation body followed by the raw verifier nonce."""
        return canonical_json(self.body()) + self.nonce

    def to_wire(self) -> dict:
        out = self.body()
        if self.holder_signature is not None:
            out["holder_signature"] = b64u(self.holder_signature)
        return out

    @classmethod
    def from_wire(cls, data: Mapping) -> "Presentation":
        if data.get("v") != WIRE_VERSION:
            raise ValueError(f"unsupported presentation version {data.get('v')!r}")
        nonce = b64u_decode(data["nonce"])
        if len(nonce) != NONCE_LEN:
            raise ValueError(f"nonce must be {NONCE_LEN} bytes")
        return cls(
            credential=VerifiableCredential.from_wire(data["credential"]),
            revealed=ClaimSet.from_wire(data["revealed"]),
            mode=Mode(data["mode"]),
            nonce=nonce,
            created_at=int(data["created_at"]),
            holder_signature=(
                b64u_decode(data["holder_signature"])
                if "holder_signature" in data
                else None
            ),
        )


def derive_presentation(
    vc: VerifiableCredential,
    reveal: Iterable[str],
    mode: Mode,
    holder_key: Ed25519PrivateKey,
    nonce: bytes,
    now: int,
    identity_claims: frozenset[str] = IDENTITY_CLAIMS,
) -> Presentation:
    """Derive a holder-signed presentation revealing ``reveal`` claims.

    De-identified mode refuses to reveal any claim in ``identity_claims``.
    """
    if vc.claims is None:
        raise UnknownClaim("credential carries no holder claims to reveal")
    if len(nonce) != NONCE_LEN:
        raise ValueError(f"nonce must be {NONCE_LEN} bytes")
    reveal = set(reveal)
    for name in reveal:
        if name not in vc.claims:
            raise UnknownClaim(name)
    if mode is Mode.DEIDENTIFIED:
        leaked = reveal & identity_claims
        if leaked:
            raise DisclosurePolicyViolation(
                f"de-identified presentation cannot reveal {sorted(leaked)}"
            )
    pres = Presentation(
        credential=vc.without_claims(),
        revealed=vc.claims.subset(reveal),
        mode=mode,
        nonce=nonce,
        created_at=int(now),
    )
    pres.holder_signature = holder_key.sign(pres.signed_message())
    return pres


@dataclass(frozen=True)
class PresentationResult:
    accepted: bool
    reason: Optional[str] = None
    claims: Optional[Dict[str, str]] = None
    credential_type: Optional[CredentialType] = None
    subject: Optional[str] = None
    mode: Optional[Mode] = None

    def __bool__(self) -> bool:
        return self.accepted


def verify_presentation(
    p: Presentation,
    issuer_pubkey: bytes,
    expected_nonce: bytes,
    now: int,
) -> PresentationResult:
    """Accept iff the embedded credential verifies, every revealed triple
    re-hashes to its commitment, the holder signature holds under the
    subject DID's key, and the nonce matches the verifier's challenge."""
    cred_check = verify_credential(p.credential, issuer_pubkey, now)
    if not cred_check:
        return PresentationResult(False, CREDENTIAL_INVALID)
    for name, claim in p.revealed.items():
        expected = p.credential.commitments.get(name)
        if expected is None or not hmac.compare_digest(
            commitment(name, claim.value, claim.salt), expected
        ):
            return PresentationResult(False, COMMITMENT_MISMATCH)
    if p.holder_signature is None:
        return PresentationResult(False, HOLDER_SIGNATURE_INVALID)
    try:
        holder_pub = p.credential.subject.public_key()
    except InvalidKey:
        return PresentationResult(False, HOLDER_SIGNATURE_INVALID)
    if not _ed25519_verify(holder_pub, p.holder_signature, p.signed_message()):
        return PresentationResult(False, HOLDER_SIGNATURE_INVALID)
    if not hmac.compare_digest(p.nonce, expected_nonce):
        return PresentationResult(False, NONCE_MISMATCH)
    return PresentationResult(
        True,
        claims=p.revealed.values_map(),
        credential_type=p.credential.credential_type,
        subject=p.credential.subject.uri,
        mode=p.mode,
    )
