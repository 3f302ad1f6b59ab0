"""Identity vetting pipeline: MRZ validation, face matching, authority
lookup, identity credential minting, and PII disposal.

The machine-readable zone parser handles the two-line 44-character
passport format. Check digits use the weighted scheme: weights 7,3,1
repeating, character values 0-9 -> 0-9, A-Z -> 10-35, '<' -> 0, sum
mod 10. Weights are coprime to 10, so any single digit-to-digit
substitution in a checked field shifts the digit; alphabetic
substitutions whose value difference is a multiple of 10 (e.g. 'A' vs
'0') are a known escape of the mod-10 scheme.

Face matching and the issuing-authority check are pluggable callables;
the bundled defaults are deterministic test doubles (byte-equality
match, hashed-document-number lookup table). Nothing in this module
retains document images, MRZ text, or claim plaintext once the
credential has been delivered; sessions scrub themselves.
"""

from __future__ import annotations

import hashlib
import json
import secrets
from dataclasses import dataclass, field
from datetime import date, datetime, timezone
from enum import Enum
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple

from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey

from .authn import SignedEnvelope
from .ledger import AppendReceipt, Ledger
from .vc import CredentialType, Did, VerifiableCredential, issue_credential

MRZ_LINE_LEN = 44
MRZ_CHARSET = set("ABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789<")
CHECK_WEIGHTS = (7, 3, 1)
DEFAULT_FACE_THRESHOLD = 0.85
IDENTITY_TTL_SECONDS = 365 * 24 * 3600

REASON_FACE_MISMATCH = "FaceMismatch"
REASON_AUTHORITY_NOT_FOUND = "AuthorityNotFound"
REASON_AUTHORITY_REVOKED = "AuthorityRevoked"


class MrzFormat(ValueError):
    """Line length or character set violation."""


class MrzChecksum(ValueError):
    """A check digit failed; carries the offending field name."""

    def __init__(self, field_name: str):
        super().__init__(f"check digit failed for {field_name}")
        self.field = field_name


class OracleUnavailable(RuntimeError):
    """The face-match oracle failed; the caller may retry."""


class ConsentMissing(ValueError):
    """Credential mint attempted without a consent attestation."""


class VettingIncomplete(ValueError):
    """Credential mint attempted without a Verified vetting decision."""


def char_value(ch: str) -> int:
    if ch == "<":
        return 0
    if "0" <= ch <= "9":
        return ord(ch) - ord("0")
    if "A" <= ch <= "Z":
        return ord(ch) - ord("A") + 10
    raise MrzFormat(f"invalid MRZ character {ch!r}")


def check_digit(data: str) -> int:
    """Weighted check digit: sum(value * weight) mod 10, weights 7,3,1."""
    return sum(char_value(c) * CHECK_WEIGHTS[i % 3] for i, c in enumerate(data)) % 10


@dataclass(frozen=True)
class MrzRecord:
    document_type: str
    issuing_state: str
    surname: str
    given_names: str
    document_number: str
    document_number_cd: int
    nationality: str
    birth_date: str  # YYMMDD
    birth_date_cd: int
    sex: str
    expiry_date: str  # YYMMDD
    expiry_date_cd: int
    optional_data: str
    composite_cd: int

    def full_name(self) -> str:
        return f"{self.given_names} {self.surname}".strip()

    def birth_date_iso(self, today: Optional[date] = None) -> str:
        return _expand_date(self.birth_date, pivot_future=False, today=today)

    def expiry_date_iso(self, today: Optional[date] = None) -> str:
        return _expand_date(self.expiry_date, pivot_future=True, today=today)


def _expand_date(yymmdd: str, pivot_future: bool, today: Optional[date]) -> str:
    today = today or datetime.now(timezone.utc).date()
    yy, mm, dd = int(yymmdd[0:2]), int(yymmdd[2:4]), int(yymmdd[4:6])
    century = 2000
    if not pivot_future and 2000 + yy > today.year:
        century = 1900
    return f"{century + yy:04d}-{mm:02d}-{dd:02d}"


def _validate_date(yymmdd: str, label: str) -> None:
    mm, dd = int(yymmdd[2:4]), int(yymmdd[4:6])
    if not (1 <= mm <= 12 and 1 <= dd <= 31):
        raise MrzFormat(f"{label} is not a valid YYMMDD date: {yymmdd!r}")


def _clean(text: str) -> str:
    return text.replace("<", " ").strip()


def parse_mrz(line1: str, line2: str) -> MrzRecord:
    """Parse and checksum-validate a two-line 44-character MRZ.

    Validates the document-number, birth-date, expiry-date, and composite
    check digits; raises MrzChecksum naming the first failing field.
    """
    for i, line in enumerate((line1, line2), start=1):
        if len(line) != MRZ_LINE_LEN:
            raise MrzFormat(f"line {i} must be {MRZ_LINE_LEN} characters, got {len(line)}")
        bad = set(line) - MRZ_CHARSET
        if bad:
            raise MrzFormat(f"line {i} contains invalid characters {sorted(bad)!r}")

    doc_number = line2[0:9]
    doc_cd = line2[9]
    nationality = line2[10:13]
    birth = line2[13:19]
    birth_cd = line2[19]
    sex = line2[20]
    expiry = line2[21:27]
    expiry_cd = line2[27]
    optional = line2[28:42]
    optional_cd = line2[42]
    composite_cd = line2[43]

    checks = [
        ("document_number", doc_number, doc_cd),
        ("birth_date", birth, birth_cd),
        ("expiry_date", expiry, expiry_cd),
        ("composite", line2[0:10] + line2[13:20] + line2[21:43], composite_cd),
    ]
    for field_name, data, cd in checks:
        if not cd.isdigit() or check_digit(data) != int(cd):
            raise MrzChecksum(field_name)

    if not birth.isdigit():
        raise MrzFormat(f"birth_date must be numeric: {birth!r}")
    if not expiry.isdigit():
        raise MrzFormat(f"expiry_date must be numeric: {expiry!r}")
    _validate_date(birth, "birth_date")
    _validate_date(expiry, "expiry_date")

    name_field = line1[5:44]
    surname, _, given = name_field.partition("<<")
    return MrzRecord(
        document_type=_clean(line1[0:2]),
        issuing_state=_clean(line1[2:5]),
        surname=_clean(surname),
        given_names=_clean(given),
        document_number=_clean(doc_number),
        document_number_cd=int(doc_cd),
        nationality=_clean(nationality),
        birth_date=birth,
        birth_date_cd=int(birth_cd),
        sex=_clean(sex) or "X",
        expiry_date=expiry,
        expiry_date_cd=int(expiry_cd),
        optional_data=_clean(optional),
        composite_cd=int(composite_cd),
    )


def derive_age(birth_iso: str, today: date) -> int:
    born = date.fromisoformat(birth_iso)
    return today.year - born.year - ((today.month, today.day) < (born.month, born.day))


# --- vetting -------------------------------------------------------------


class AuthorityStatus(str, Enum):
    CONFIRMED = "Confirmed"
    NOT_FOUND = "NotFound"
    REVOKED = "Revoked"


class Decision(str, Enum):
    VERIFIED = "Verified"
    REJECTED = "Rejected"


FaceMatchOracle = Callable[[bytes, bytes], float]
AuthorityLookup = Callable[[str], AuthorityStatus]


def hash_equality_oracle(doc_photo: bytes, selfie: bytes) -> float:
    """Deterministic test double: 1.0 iff the images are byte-identical."""
    return 1.0 if hashlib.sha256(doc_photo).digest() == hashlib.sha256(selfie).digest() else 0.0


class MockAuthority:
    """File-configured issuing-authority lookup.

    The table maps SHA-256(document_number) hex -> status, so the
    configuration file itself never holds a document number.
    """

    def __init__(self, table: Optional[Dict[str, AuthorityStatus]] = None):
        self._table = table or {}

    @staticmethod
    def _key(document_number: str) -> str:
        return hashlib.sha256(document_number.encode("utf-8")).hexdigest()

    def add(self, document_number: str, status: AuthorityStatus) -> None:
        self._table[self._key(document_number)] = status

    def __call__(self, document_number: str) -> AuthorityStatus:
        return self._table.get(self._key(document_number), AuthorityStatus.NOT_FOUND)

    @classmethod
    def from_file(cls, path: Path) -> "MockAuthority":
        data = json.loads(Path(path).read_text())
        return cls({k: AuthorityStatus(v) for k, v in data.items()})

    def to_file(self, path: Path) -> None:
        Path(path).write_text(
            json.dumps({k: v.value for k, v in self._table.items()}, indent=1)
        )


@dataclass(frozen=True)
class VettingResult:
    face_match_score: float
    face_threshold: float
    authority_status: AuthorityStatus
    decision: Decision
    reasons: Tuple[str, ...] = ()


def vet_identity(
    mrz: MrzRecord,
    doc_photo: bytes,
    selfie: bytes,
    oracle: FaceMatchOracle,
    authority: AuthorityLookup,
    threshold: float = DEFAULT_FACE_THRESHOLD,
) -> VettingResult:
    """Face-match and authority-check an already-valid MRZ.

    Verified requires score >= threshold and authority Confirmed; the
    reasons list names every failed check.
    """
    try:
        score = float(oracle(doc_photo, selfie))
    except Exception as exc:
        raise OracleUnavailable(f"face-match oracle failed: {exc}") from exc
    status = authority(mrz.document_number)
    reasons: List[str] = []
    if score < threshold:
        reasons.append(REASON_FACE_MISMATCH)
    if status is AuthorityStatus.NOT_FOUND:
        reasons.append(REASON_AUTHORITY_NOT_FOUND)
    elif status is AuthorityStatus.REVOKED:
        reasons.append(REASON_AUTHORITY_REVOKED)
    decision = Decision.VERIFIED if not reasons else Decision.REJECTED
    return VettingResult(
        face_match_score=score,
        face_threshold=threshold,
        authority_status=status,
        decision=decision,
        reasons=tuple(reasons),
    )


# --- consent and minting ---------------------------------------------------


@dataclass
class ConsentAttestation:
    user: Did
    scope: str
    context: dict
    envelope: SignedEnvelope

    def __post_init__(self) -> None:
        if "timestamp" not in self.context or self.context["timestamp"] is None:
            raise ValueError("consent context must carry a timestamp")


def identity_claims_from_mrz(mrz: MrzRecord, today: Optional[date] = None) -> Dict[str, str]:
    return {
        "full_name": mrz.full_name(),
        "date_of_birth": mrz.birth_date_iso(today),
        "document_number": mrz.document_number,
        "nationality": mrz.nationality,
        "document_expiry": mrz.expiry_date_iso(today),
    }


def mint_identity_credential(
    vetting: VettingResult,
    mrz: MrzRecord,
    subject_did: Did,
    issuer_key: Ed25519PrivateKey,
    ledger: Ledger,
    consent: Optional[ConsentAttestation],
    now: int,
    ttl_seconds: int = IDENTITY_TTL_SECONDS,
) -> Tuple[VerifiableCredential, AppendReceipt]:
    """Mint the identity credential and anchor its digest.

    Appends exactly one digest (SHA-256 of the canonical credential) to
    the ledger. The caller owns discarding images/MRZ/claim plaintext
    afterwards; this function keeps no state.
    """
    if consent is None:
        raise ConsentMissing("identity credential requires a consent attestation")
    if vetting.decision is not Decision.VERIFIED:
        raise VettingIncomplete(f"vetting decision is {vetting.decision.value}")
    claims = identity_claims_from_mrz(
        mrz, today=datetime.fromtimestamp(now, tz=timezone.utc).date()
    )
    vc = issue_credential(
        claims, CredentialType.IDENTITY, issuer_key, subject_did, ttl_seconds, now
    )
    receipt = ledger.append(vc.digest())
    return vc, receipt


# --- server-side onboarding session ----------------------------------------


@dataclass
class OnboardingSession:
    """Volatile holder of one onboarding run's PII. Never persisted;
    scrub() drops every sensitive reference."""

    session_id: str = field(default_factory=lambda: secrets.token_hex(8))
    user: Optional[Did] = None
    mrz: Optional[MrzRecord] = None
    doc_photo: Optional[bytes] = None
    selfie: Optional[bytes] = None
    consent: Optional[ConsentAttestation] = None
    vetting: Optional[VettingResult] = None

    def scrub(self) -> None:
        self.mrz = None
        self.doc_photo = None
        self.selfie = None
        self.consent = None
        self.vetting = None
