"""Mock EHR hub and client: OAuth2 code flow, observation retrieval,
rationalization into one canonical schema, and anonymized export.

The hub stands in for the external EMR/EHR aggregation service. It
authenticates portal users (passwords stored salted-hashed; the
plaintext never persists anywhere), issues single-use authorization
codes bound to (client, scope, patient), exchanges them for opaque
bearer tokens with rotating single-use refresh tokens, and serves raw
observation payloads in two seeded dialects:

  * "bundle" - nested resource style (resourceType/code.coding/
    effectiveDateTime/valueCodeableConcept...)
  * "flat"   - lab-export style (record_type/test_type/result/
    collected_at...)

rationalize() maps either dialect onto CanonicalObservation; anything
else is an UnmappableDialect, and missing required fields are
IncompleteRecord - no silent drops. anonymize() replaces the patient
reference with an HMAC pseudonym under a rotating org key (linkable
within a key epoch, unlinkable across), truncates the effective time to
a date, and carries only coarse geography.
"""

from __future__ import annotations

import hashlib
import hmac
import json
import secrets
import threading
import time
from dataclasses import dataclass
from datetime import datetime, timezone
from enum import Enum
from pathlib import Path
from typing import Callable, Dict, FrozenSet, List, Optional, Set, Tuple

DEFAULT_CODE_TTL = 60
DEFAULT_TOKEN_TTL = 3600
DEFAULT_EPOCH_SECONDS = 30 * 24 * 3600
OBSERVATION_SCOPE = "observations"
PSEUDONYM_LEN = 16


class ClientInvalid(ValueError):
    """Unknown OAuth client."""


class ClientMismatch(ValueError):
    """Code redeemed by a different client than it was issued to."""


class CodeInvalid(ValueError):
    """Authorization or refresh grant is consumed, expired, or unknown."""


class CodeConsumed(CodeInvalid):
    """Authorization code was already redeemed."""


class CodeExpired(CodeInvalid):
    """Authorization code outlived its 60-second window."""


class ScopeDenied(PermissionError):
    """Requested scope exceeds the granted scope."""


class TokenExpired(PermissionError):
    """Bearer token past its expiry."""


class TokenInvalid(PermissionError):
    """Bearer token unknown."""


class PatientMismatch(PermissionError):
    """Token is bound to a different patient than requested."""


class PortalAuthFailed(PermissionError):
    """Portal username/password rejected."""


class UnmappableDialect(ValueError):
    """Raw payload matches no registered dialect."""


class IncompleteRecord(ValueError):
    """Raw payload lacks a required field."""


# --- canonical observation ---------------------------------------------------


class ObservationKind(str, Enum):
    PCR_TEST = "PcrTest"
    ANTIGEN_TEST = "AntigenTest"
    ANTIBODY_TEST = "AntibodyTest"
    VACCINATION = "Vaccination"


class ObservationResult(str, Enum):
    NEGATIVE = "Negative"
    POSITIVE = "Positive"
    DETECTED = "Detected"
    NOT_DETECTED = "NotDetected"
    ADMINISTERED = "Administered"


ALLOWED_RESULTS: Dict[ObservationKind, FrozenSet[ObservationResult]] = {
    ObservationKind.PCR_TEST: frozenset(
        {ObservationResult.NEGATIVE, ObservationResult.POSITIVE}
    ),
    ObservationKind.ANTIGEN_TEST: frozenset(
        {ObservationResult.NEGATIVE, ObservationResult.POSITIVE}
    ),
    ObservationKind.ANTIBODY_TEST: frozenset(
        {ObservationResult.DETECTED, ObservationResult.NOT_DETECTED}
    ),
    ObservationKind.VACCINATION: frozenset({ObservationResult.ADMINISTERED}),
}

# Bundled terminology table: canonical short codes per kind.
CODE_TABLE: Dict[ObservationKind, str] = {
    ObservationKind.PCR_TEST: "94500-6",
    ObservationKind.ANTIGEN_TEST: "94558-4",
    ObservationKind.ANTIBODY_TEST: "94762-2",
    ObservationKind.VACCINATION: "IMM-COVID",
}


@dataclass(frozen=True)
class CanonicalObservation:
    kind: ObservationKind
    result: ObservationResult
    code: str
    effective_at: int
    performer: str
    vaccine_product: Optional[str] = None
    dose_number: Optional[int] = None

    def __post_init__(self) -> None:
        if self.result not in ALLOWED_RESULTS[self.kind]:
            raise ValueError(
                f"result {self.result.value} not allowed for kind {self.kind.value}"
            )

    def identity(self) -> str:
        """Stable dedupe key for one real-world observation event."""
        parts = f"{self.kind.value}|{self.code}|{self.effective_at}|{self.performer}|{self.dose_number}"
        return hashlib.sha256(parts.encode("utf-8")).hexdigest()[:24]

    def to_wire(self) -> dict:
        out = {
            "kind": self.kind.value,
            "result": self.result.value,
            "code": self.code,
            "effective_at": self.effective_at,
            "performer": self.performer,
        }
        if self.vaccine_product is not None:
            out["vaccine_product"] = self.vaccine_product
        if self.dose_number is not None:
            out["dose_number"] = self.dose_number
        return out

    @classmethod
    def from_wire(cls, data: dict) -> "CanonicalObservation":
        return cls(
            kind=ObservationKind(data["kind"]),
            result=ObservationResult(data["result"]),
            code=data["code"],
            effective_at=int(data["effective_at"]),
            performer=data["performer"],
            vaccine_product=data.get("vaccine_product"),
            dose_number=data.get("dose_number"),
        )


def _parse_time(value: str, context: str) -> int:
    try:
        return int(datetime.fromisoformat(value.replace("Z", "+00:00")).timestamp())
    except (ValueError, AttributeError, TypeError) as exc:
        raise IncompleteRecord(f"{context}: bad or missing effective time") from exc


_BUNDLE_TEST_KINDS = {
    "94500-6": ObservationKind.PCR_TEST,
    "94558-4": ObservationKind.ANTIGEN_TEST,
    "94762-2": ObservationKind.ANTIBODY_TEST,
}
_BUNDLE_RESULTS = {
    "260385009": ObservationResult.NEGATIVE,  # negative
    "10828004": ObservationResult.POSITIVE,  # positive
    "260373001": ObservationResult.DETECTED,  # detected
    "260415000": ObservationResult.NOT_DETECTED,  # not detected
}
_FLAT_TEST_KINDS = {
    "PCR": ObservationKind.PCR_TEST,
    "ANTIGEN": ObservationKind.ANTIGEN_TEST,
    "ANTIBODY": ObservationKind.ANTIBODY_TEST,
}
_FLAT_RESULTS = {
    "NEGATIVE": ObservationResult.NEGATIVE,
    "POSITIVE": ObservationResult.POSITIVE,
    "DETECTED": ObservationResult.DETECTED,
    "NOT_DETECTED": ObservationResult.NOT_DETECTED,
}


def _rationalize_bundle(payload: dict) -> CanonicalObservation:
    rtype = payload.get("resourceType")
    if rtype == "Immunization":
        occurrence = payload.get("occurrenceDateTime")
        if not occurrence:
            raise IncompleteRecord("Immunization: missing occurrenceDateTime")
        coding = (payload.get("vaccineCode") or {}).get("coding") or [{}]
        product = coding[0].get("display")
        if not product:
            raise IncompleteRecord("Immunization: missing vaccine product")
        protocol = (payload.get("protocolApplied") or [{}])[0]
        dose = protocol.get("doseNumberPositiveInt")
        performer = ((payload.get("performer") or [{}])[0].get("actor") or {}).get(
            "display"
        ) or (payload.get("location") or {}).get("display")
        if not performer:
            raise IncompleteRecord("Immunization: missing performer")
        return CanonicalObservation(
            kind=ObservationKind.VACCINATION,
            result=ObservationResult.ADMINISTERED,
            code=CODE_TABLE[ObservationKind.VACCINATION],
            effective_at=_parse_time(occurrence, "Immunization"),
            performer=performer,
            vaccine_product=product,
            dose_number=int(dose) if dose is not None else None,
        )
    if rtype == "Observation":
        coding = (payload.get("code") or {}).get("coding") or [{}]
        code = coding[0].get("code")
        kind = _BUNDLE_TEST_KINDS.get(code)
        if kind is None:
            raise UnmappableDialect(f"Observation: unknown test code {code!r}")
        effective = payload.get("effectiveDateTime")
        if not effective:
            raise IncompleteRecord("Observation: missing effectiveDateTime")
        value_coding = (payload.get("valueCodeableConcept") or {}).get("coding") or [{}]
        result = _BUNDLE_RESULTS.get(value_coding[0].get("code"))
        if result is None:
            raise IncompleteRecord("Observation: missing or unknown result value")
        performer = (payload.get("performer") or [{}])[0].get("display")
        if not performer:
            raise IncompleteRecord("Observation: missing performer")
        return CanonicalObservation(
            kind=kind,
            result=result,
            code=code,
            effective_at=_parse_time(effective, "Observation"),
            performer=performer,
        )
    raise UnmappableDialect(f"bundle dialect: unsupported resourceType {rtype!r}")


def _rationalize_flat(payload: dict) -> CanonicalObservation:
    rtype = payload.get("record_type")
    if rtype == "lab_result":
        kind = _FLAT_TEST_KINDS.get(str(payload.get("test_type", "")).upper())
        if kind is None:
            raise UnmappableDialect(
                f"flat dialect: unknown test_type {payload.get('test_type')!r}"
            )
        result = _FLAT_RESULTS.get(str(payload.get("result", "")).upper())
        if result is None:
            raise IncompleteRecord("flat lab_result: missing or unknown result")
        collected = payload.get("collected_at")
        if not collected:
            raise IncompleteRecord("flat lab_result: missing collected_at")
        lab = payload.get("lab")
        if not lab:
            raise IncompleteRecord("flat lab_result: missing lab")
        return CanonicalObservation(
            kind=kind,
            result=result,
            code=payload.get("loinc") or CODE_TABLE[kind],
            effective_at=_parse_time(collected, "flat lab_result"),
            performer=lab,
        )
    if rtype == "immunization":
        administered = payload.get("administered_at")
        if not administered:
            raise IncompleteRecord("flat immunization: missing administered_at")
        product = payload.get("product")
        if not product:
            raise IncompleteRecord("flat immunization: missing product")
        site = payload.get("site")
        if not site:
            raise IncompleteRecord("flat immunization: missing site")
        dose = payload.get("dose")
        return CanonicalObservation(
            kind=ObservationKind.VACCINATION,
            result=ObservationResult.ADMINISTERED,
            code=CODE_TABLE[ObservationKind.VACCINATION],
            effective_at=_parse_time(administered, "flat immunization"),
            performer=site,
            vaccine_product=product,
            dose_number=int(dose) if dose is not None else None,
        )
    raise UnmappableDialect(f"unrecognized payload shape: {sorted(payload)[:6]}")


def rationalize(payload: dict) -> CanonicalObservation:
    """Map a raw payload in any seeded dialect onto the canonical schema."""
    if not isinstance(payload, dict):
        raise UnmappableDialect("payload is not a JSON object")
    if "resourceType" in payload:
        return _rationalize_bundle(payload)
    if "record_type" in payload:
        return _rationalize_flat(payload)
    raise UnmappableDialect(f"unrecognized payload shape: {sorted(payload)[:6]}")


# --- anonymized export --------------------------------------------------------


@dataclass(frozen=True)
class AnonymizedRecord:
    pseudonym: str  # hex of HMAC-SHA-256(org key, patient_ref)[:16]
    kind: ObservationKind
    result: ObservationResult
    effective_date: str  # date only
    region: str

    def to_wire(self) -> dict:
        return {
            "pseudonym": self.pseudonym,
            "kind": self.kind.value,
            "result": self.result.value,
            "effective_date": self.effective_date,
            "region": self.region,
        }


class RotatingOrgKey:
    """Per-epoch org key: pseudonyms are linkable within an epoch and
    unlinkable across rotations. Epoch length is simulated-time based."""

    def __init__(
        self,
        master: bytes,
        epoch_seconds: int = DEFAULT_EPOCH_SECONDS,
        clock: Callable[[], float] = time.time,
    ):
        self._master = master
        self.epoch_seconds = epoch_seconds
        self._clock = clock

    def epoch(self, now: Optional[float] = None) -> int:
        return int((now if now is not None else self._clock()) // self.epoch_seconds)

    def key(self, now: Optional[float] = None) -> bytes:
        return hashlib.sha256(
            self._master + self.epoch(now).to_bytes(8, "big")
        ).digest()


def anonymize(
    obs: CanonicalObservation, patient_ref: str, org_key: bytes, region: str = "region-1"
) -> AnonymizedRecord:
    """Pseudonymize a canonical observation for health-organization logging."""
    pseudonym = hmac.new(org_key, patient_ref.encode("utf-8"), "sha256").digest()
    effective = datetime.fromtimestamp(obs.effective_at, tz=timezone.utc).date()
    return AnonymizedRecord(
        pseudonym=pseudonym[:PSEUDONYM_LEN].hex(),
        kind=obs.kind,
        result=obs.result,
        effective_date=effective.isoformat(),
        region=region,
    )


# --- access tokens ------------------------------------------------------------


@dataclass
class AccessToken:
    token: str  # hex of 32 random bytes; opaque
    patient_ref: str
    scope: FrozenSet[str]
    issued_at: int
    expires_at: int
    refresh_token: str
    client_id: str


@dataclass
class _AuthCode:
    code: str
    client_id: str
    scope: FrozenSet[str]
    patient_ref: str
    issued_at: int
    consumed: bool = False


def _hash_password(password: str, salt: bytes) -> str:
    return hashlib.sha256(salt + password.encode("utf-8")).hexdigest()


class FhirHub:
    """In-process mock of the external EHR aggregation hub.

    Persists only users (hashed passwords) and raw observations when a
    directory is given; codes and tokens are volatile. Code/refresh
    consumption is atomic under one lock.
    """

    def __init__(
        self,
        directory: Optional[Path] = None,
        clock: Callable[[], float] = time.time,
        code_ttl: int = DEFAULT_CODE_TTL,
        token_ttl: int = DEFAULT_TOKEN_TTL,
    ):
        self._clock = clock
        self.code_ttl = code_ttl
        self.token_ttl = token_ttl
        self._lock = threading.Lock()
        self._dir = Path(directory) if directory else None
        self._users: Dict[str, dict] = {}
        self._patients: Dict[str, str] = {}  # patient_id -> username
        self._observations: Dict[str, List[Tuple[int, dict]]] = {}
        self._clients: Set[str] = set()
        self._codes: Dict[str, _AuthCode] = {}
        self._tokens: Dict[str, AccessToken] = {}
        self._refresh: Dict[str, AccessToken] = {}
        if self._dir is not None:
            self._dir.mkdir(parents=True, exist_ok=True)
            self._load()

    # -- administration -------------------------------------------------------

    def register_client(self, client_id: str) -> None:
        with self._lock:
            self._clients.add(client_id)

    def register_user(self, username: str, password: str) -> str:
        """Create a portal user and assign their patient resource id."""
        with self._lock:
            if username in self._users:
                return self._users[username]["patient_id"]
            salt = secrets.token_bytes(8)
            patient_id = f"pat-{secrets.token_hex(6)}"
            self._users[username] = {
                "salt": salt.hex(),
                "password_hash": _hash_password(password, salt),
                "patient_id": patient_id,
            }
            self._patients[patient_id] = username
            self._observations.setdefault(patient_id, [])
            self._save()
            return patient_id

    def patient_for(self, username: str) -> Optional[str]:
        with self._lock:
            user = self._users.get(username)
            return user["patient_id"] if user else None

    def add_observation(self, patient_id: str, payload: dict) -> None:
        """Seed a raw observation; effective time extracted for ordering."""
        effective = rationalize(payload).effective_at
        with self._lock:
            if patient_id not in self._patients:
                raise KeyError(f"unknown patient {patient_id}")
            self._observations[patient_id].append((effective, payload))
            self._save()

    # -- OAuth2 ----------------------------------------------------------------

    def authorize(
        self,
        username: str,
        password: str,
        client_id: str,
        scope: Set[str],
        granted: Optional[Set[str]] = None,
    ) -> str:
        """Portal login + consent: returns a single-use authorization code
        bound to (client, scope, patient). ``granted`` is the scope set the
        user consented to (defaults to the request)."""
        with self._lock:
            if client_id not in self._clients:
                raise ClientInvalid(f"unknown client {client_id!r}")
            user = self._users.get(username)
        if user is None or _hash_password(password, bytes.fromhex(user["salt"])) != user[
            "password_hash"
        ]:
            raise PortalAuthFailed("portal credentials rejected")
        scope = frozenset(scope)
        granted_set = frozenset(granted) if granted is not None else scope
        if not scope <= granted_set:
            raise ScopeDenied(f"requested {sorted(scope)} exceeds granted {sorted(granted_set)}")
        code = _AuthCode(
            code=secrets.token_hex(16),
            client_id=client_id,
            scope=scope,
            patient_ref=user["patient_id"],
            issued_at=int(self._clock()),
        )
        with self._lock:
            self._codes[code.code] = code
        return code.code

    def exchange(self, code: str, client_id: str) -> AccessToken:
        """Redeem an authorization code for a bearer token + refresh token."""
        with self._lock:
            record = self._codes.get(code)
            if record is None:
                raise CodeInvalid("unknown authorization code")
            if record.consumed:
                raise CodeConsumed("authorization code already redeemed")
            if self._clock() >= record.issued_at + self.code_ttl:
                record.consumed = True
                raise CodeExpired("authorization code expired")
            if record.client_id != client_id:
                raise ClientMismatch(
                    f"code issued to {record.client_id!r}, redeemed by {client_id!r}"
                )
            record.consumed = True
            return self._issue_token_locked(record.patient_ref, record.scope, client_id)

    def refresh(self, refresh_token: str, client_id: str) -> AccessToken:
        """Rotate a refresh token: the old one is consumed, a new pair issued."""
        with self._lock:
            old = self._refresh.pop(refresh_token, None)
            if old is None:
                raise CodeInvalid("unknown or consumed refresh token")
            if old.client_id != client_id:
                raise ClientMismatch("refresh token belongs to a different client")
            self._tokens.pop(old.token, None)
            return self._issue_token_locked(old.patient_ref, old.scope, client_id)

    def _issue_token_locked(
        self, patient_ref: str, scope: FrozenSet[str], client_id: str
    ) -> AccessToken:
        now = int(self._clock())
        token = AccessToken(
            token=secrets.token_hex(32),
            patient_ref=patient_ref,
            scope=scope,
            issued_at=now,
            expires_at=now + self.token_ttl,
            refresh_token=secrets.token_hex(32),
            client_id=client_id,
        )
        self._tokens[token.token] = token
        self._refresh[token.refresh_token] = token
        return token

    def token_info(self, token_str: str) -> AccessToken:
        """Resolve a live bearer token (no scope requirement)."""
        with self._lock:
            token = self._tokens.get(token_str)
        if token is None:
            raise TokenInvalid("unknown token")
        if self._clock() >= token.expires_at:
            raise TokenExpired("token expired")
        return token

    def _check_token(self, token_str: str, needed_scope: str) -> AccessToken:
        with self._lock:
            token = self._tokens.get(token_str)
        if token is None:
            raise TokenInvalid("unknown token")
        if self._clock() >= token.expires_at:
            raise TokenExpired("token expired")
        if needed_scope not in token.scope:
            raise ScopeDenied(f"token lacks scope {needed_scope!r}")
        return token

    # -- resources -------------------------------------------------------------

    def get_patient(self, token_str: str, patient_id: str) -> dict:
        token = self._check_token(token_str, OBSERVATION_SCOPE)
        if token.patient_ref != patient_id:
            raise PatientMismatch("token is bound to another patient")
        return {"resourceType": "Patient", "id": patient_id}

    def fetch_observations(
        self,
        token_str: str,
        patient: Optional[str] = None,
        since: Optional[int] = None,
    ) -> List[dict]:
        """All raw payloads for the token's patient, newest first."""
        token = self._check_token(token_str, OBSERVATION_SCOPE)
        if patient is not None and patient != token.patient_ref:
            raise PatientMismatch("token is bound to another patient")
        with self._lock:
            rows = list(self._observations.get(token.patient_ref, []))
        rows.sort(key=lambda r: r[0], reverse=True)
        return [p for eff, p in rows if since is None or eff > since]

    # -- persistence -----------------------------------------------------------

    def _save(self) -> None:
        if self._dir is None:
            return
        (self._dir / "users.json").write_text(json.dumps(self._users, indent=1))
        (self._dir / "observations.json").write_text(
            json.dumps(self._observations, indent=1)
        )

    def _load(self) -> None:
        users = self._dir / "users.json"  # type: ignore[operator]
        if users.exists():
            self._users = json.loads(users.read_text())
            self._patients = {u["patient_id"]: name for name, u in self._users.items()}
        obs = self._dir / "observations.json"  # type: ignore[operator]
        if obs.exists():
            raw = json.loads(obs.read_text())
            self._observations = {
                pid: [(int(e), p) for e, p in rows] for pid, rows in raw.items()
            }


def export_anonymized(path: Path, record: AnonymizedRecord) -> None:
    """Append one anonymized record to an org's newline-delimited JSON log."""
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "a", encoding="utf-8") as fh:
        fh.write(json.dumps(record.to_wire(), sort_keys=True) + "\n")
