"""Unified HTTP API fronting every service, plus the mock EHR hub.

One FastAPI app serves the holder/verifier surface (onboarding
sessions, authenticator registration and assertion, result acquisition,
presentation mint/verify, ledger heads and proofs, audit search,
workflow metrics, policy evaluation, push queues) and mounts the mock
hub's endpoints under /fhir/*. The hub keeps its own state directory
and is reachable only through its OAuth surface, mirroring its role as
an external system.

Server-side stores never hold PII: onboarding sessions keep document
data in memory only and scrub on exit, audit events pass a schema gate,
the ledger stores digests, and the authority table is keyed by hashed
document numbers. Workflow runs for onboarding and result acquisition
go through the workflow engine, so /metrics reflects real executions.
"""

from __future__ import annotations

import argparse
import hmac as hmac_mod
import secrets as pysecrets
import time
from dataclasses import dataclass, field as dc_field
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable, Dict, List, Optional

import uvicorn
from fastapi import FastAPI, Header, Query, Request
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import JSONResponse, PlainTextResponse
from pydantic import BaseModel

from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey

from .. import authn as authn_mod
from .. import fhir as fhir_mod
from .. import onboarding as onboarding_mod
from .. import presentation as pres_mod
from .. import vc as vc_mod
from ..canonical import b64u, b64u_decode, from_json, sha256
from ..ledger import EmptyBatch, InvalidDigest, Ledger
from .audit import AuditLog, PiiRejected
from .config import Config
from .policy import PolicyEngine, PolicyParseError
from .secrets import SecretsStore
from .workflow import (
    InstanceTerminal,
    RetryPolicy,
    StageDef,
    UnknownWorkflow,
    WorkflowDefinition,
    WorkflowEngine,
)

SCHEMA_TAG = b"healthpass-schema-v1"


@dataclass
class Services:
    config: Config
    clock: Callable[[], float]
    secrets: SecretsStore
    ledger: Ledger
    audit: AuditLog
    rp: authn_mod.RelyingParty
    registry: pres_mod.KeyRegistry
    hub: fhir_mod.FhirHub
    engine: WorkflowEngine
    policy: PolicyEngine
    authority: onboarding_mod.MockAuthority
    face_oracle: onboarding_mod.FaceMatchOracle
    issuer_key: Ed25519PrivateKey
    issuer_did: vc_mod.Did
    org_key: fhir_mod.RotatingOrgKey
    audit_key: bytes
    sessions: Dict[str, onboarding_mod.OnboardingSession] = dc_field(default_factory=dict)

    def now(self) -> int:
        return int(self.clock())

    def pseudonym(self, actor_id: str) -> str:
        return hmac_mod.new(self.audit_key, actor_id.encode("utf-8"), "sha256").hexdigest()[:16]

    def persist_registry(self) -> None:
        self.secrets.put_json("registry_state", self.registry.to_state())


def build_services(config: Config, clock: Callable[[], float] = time.time) -> Services:
    data = Path(config.data_dir)
    data.mkdir(parents=True, exist_ok=True)
    store = SecretsStore(config.secrets_path)

    issuer_seed = store.get_or_create("issuer_seed", lambda: pysecrets.token_bytes(32))
    issuer_key = Ed25519PrivateKey.from_private_bytes(issuer_seed)
    issuer_did = vc_mod.derive_did(issuer_key.public_key().public_bytes_raw())

    ledger = Ledger(
        directory=data / "ledger",
        batch_size=config.batch_size,
        max_batch_age=config.batch_max_age_s,
        clock=clock,
    )
    audit = AuditLog(directory=data / "audit", clock=clock)
    rp = authn_mod.RelyingParty(clock=clock, challenge_ttl=config.challenge_ttl)
    rp_state = store.get_json("authenticators")
    if rp_state:
        rp.load_state(rp_state)

    registry_state = store.get_json("registry_state")
    if registry_state:
        registry = pres_mod.KeyRegistry.from_state(registry_state)
    else:
        registry = pres_mod.KeyRegistry(dynamic_ttl=config.qr_dynamic_ttl)
    registry.trust_issuer(issuer_did.uri, issuer_key.public_key().public_bytes_raw())
    registry.ensure_active_key(int(clock()))

    hub = fhir_mod.FhirHub(
        directory=data / "hub",
        clock=clock,
        code_ttl=config.auth_code_ttl,
        token_ttl=config.access_token_ttl,
    )
    hub.register_client(config.oauth_client_id)

    if config.authority_file and Path(config.authority_file).exists():
        authority = onboarding_mod.MockAuthority.from_file(config.authority_file)
    else:
        authority = onboarding_mod.MockAuthority()

    if config.policy_file and Path(config.policy_file).exists():
        policy = PolicyEngine.from_file(config.policy_file)
    else:
        policy = PolicyEngine([])

    org_master = store.get_or_create("org_master_key", lambda: pysecrets.token_bytes(32))
    org_key = fhir_mod.RotatingOrgKey(
        org_master, epoch_seconds=config.pseudonym_epoch_days * 86400, clock=clock
    )
    audit_key = store.get_or_create("audit_pseudonym_key", lambda: pysecrets.token_bytes(32))

    services = Services(
        config=config,
        clock=clock,
        secrets=store,
        ledger=ledger,
        audit=audit,
        rp=rp,
        registry=registry,
        hub=hub,
        engine=WorkflowEngine(clock=clock),
        policy=policy,
        authority=authority,
        face_oracle=onboarding_mod.hash_equality_oracle,
        issuer_key=issuer_key,
        issuer_did=issuer_did,
        org_key=org_key,
        audit_key=audit_key,
    )
    services.persist_registry()
    _register_workflows(services)
    if store.get("schema_anchor_seq") is None:
        receipt = ledger.append(sha256(SCHEMA_TAG))
        store.put("schema_anchor_seq", str(receipt.seq).encode())
    return services


# --- workflow adapters ---------------------------------------------------------


def _register_workflows(svc: Services) -> None:
    engine = svc.engine

    def session_of(ctx: dict) -> onboarding_mod.OnboardingSession:
        return svc.sessions[ctx["input"]["session_id"]]

    def validate_mrz(ctx: dict) -> dict:
        session = session_of(ctx)
        if session.mrz is None:
            raise ValueError("no validated MRZ in session")
        if session.doc_photo is None or session.selfie is None:
            raise ValueError("document photo and selfie not submitted")
        return {"document_type": session.mrz.document_type}

    def vet(ctx: dict) -> dict:
        session = session_of(ctx)
        session.vetting = onboarding_mod.vet_identity(
            session.mrz,
            session.doc_photo,
            session.selfie,
            svc.face_oracle,
            svc.authority,
            threshold=svc.config.face_threshold,
        )
        return {"decision": session.vetting.decision.value}

    def mint(ctx: dict) -> dict:
        session = session_of(ctx)
        vc, receipt = onboarding_mod.mint_identity_credential(
            session.vetting,
            session.mrz,
            session.user,
            svc.issuer_key,
            svc.ledger,
            session.consent,
            now=svc.now(),
            ttl_seconds=svc.config.identity_credential_ttl,
        )
        svc.ledger.flush()
        pseudonym = svc.pseudonym(session.user.uri)
        svc.audit.record(
            "identity_minted",
            actor=pseudonym,
            attributes={"credential_type": vc.credential_type.value},
            ledger_ref=receipt.seq,
        )
        age = onboarding_mod.derive_age(
            session.mrz.birth_date_iso(),
            datetime.fromtimestamp(svc.now(), tz=timezone.utc).date(),
        )
        # Hand the credential (with claims) to the response and forget it:
        # nothing below keeps a reference past the HTTP reply.
        return {
            "credential": vc.to_wire(include_claims=True),
            "receipt": svc.ledger.proof(receipt.seq).to_wire(),
            "age": age,
        }

    engine.register_adapter("onboarding.validate", validate_mrz)
    engine.register_adapter("onboarding.vet", vet)
    engine.register_adapter("onboarding.mint", mint)
    engine.register_definition(
        WorkflowDefinition(
            name="onboarding",
            stages=(
                StageDef("validate", "onboarding.validate"),
                StageDef("vet", "onboarding.vet", retry=RetryPolicy(max_attempts=3, backoff_ms=10)),
                StageDef("mint", "onboarding.mint"),
            ),
        )
    )

    def fetch(ctx: dict) -> dict:
        inp = ctx["input"]
        raw = svc.hub.fetch_observations(inp["access_token"], since=inp.get("since"))
        return {"raw": raw}

    def rationalize_stage(ctx: dict) -> dict:
        raw = ctx["results"]["fetch"]["raw"]
        observations, errors = [], []
        for i, payload in enumerate(raw):
            try:
                observations.append(fhir_mod.rationalize(payload))
            except (fhir_mod.UnmappableDialect, fhir_mod.IncompleteRecord) as exc:
                errors.append({"index": i, "error": type(exc).__name__, "detail": str(exc)})
        return {"observations": observations, "errors": errors}

    def issue_status(ctx: dict) -> dict:
        inp = ctx["input"]
        subject = vc_mod.Did.from_uri(inp["subject"])
        patient_ref = svc.hub.token_info(inp["access_token"]).patient_ref
        issued = []
        for obs in ctx["results"]["rationalize"]["observations"]:
            claims = {
                "kind": obs.kind.value,
                "result": obs.result.value,
                "code": obs.code,
                "effective_at": str(obs.effective_at),
                "performer": obs.performer,
            }
            if obs.vaccine_product is not None:
                claims["vaccine_product"] = obs.vaccine_product
            if obs.dose_number is not None:
                claims["dose_number"] = str(obs.dose_number)
            ctype = (
                vc_mod.CredentialType.VACCINATION
                if obs.kind is fhir_mod.ObservationKind.VACCINATION
                else vc_mod.CredentialType.TEST_RESULT
            )
            vc = vc_mod.issue_credential(
                claims, ctype, svc.issuer_key, subject,
                svc.config.status_credential_ttl, svc.now(),
            )
            receipt = svc.ledger.append(vc.digest())
            svc.ledger.flush()
            pseudonym = svc.pseudonym(subject.uri)
            svc.audit.record(
                "status_credential_issued",
                actor=pseudonym,
                attributes={"kind": obs.kind.value, "result": obs.result.value},
                ledger_ref=receipt.seq,
            )
            record = fhir_mod.anonymize(
                obs, patient_ref, svc.org_key.key(), region=svc.config.org_region
            )
            fhir_mod.export_anonymized(
                Path(svc.config.data_dir) / "nho" / f"{svc.config.org_name}.ndjson", record
            )
            try:
                svc.registry.notify(
                    subject.uri,
                    {"event": "status_credential_issued", "kind": obs.kind.value},
                )
            except pres_mod.NoPushToken:
                pass  # notifications are best-effort for unregistered users
            issued.append(
                {
                    "credential": vc.to_wire(include_claims=True),
                    "receipt": svc.ledger.proof(receipt.seq).to_wire(),
                    "observation_id": obs.identity(),
                }
            )
        return {"issued": issued}

    engine.register_adapter("results.fetch", fetch)
    engine.register_adapter("results.rationalize", rationalize_stage)
    engine.register_adapter("results.issue", issue_status)
    engine.register_definition(
        WorkflowDefinition(
            name="results",
            stages=(
                StageDef("fetch", "results.fetch"),
                StageDef("rationalize", "results.rationalize"),
                StageDef("issue", "results.issue"),
            ),
        )
    )


# --- request bodies -------------------------------------------------------------


class StartBody(BaseModel):
    user_id: str


class MrzBody(BaseModel):
    session_id: str
    line1: str
    line2: str


class PhotosBody(BaseModel):
    session_id: str
    doc_photo: str  # base64url
    selfie: str


class ConsentBody(BaseModel):
    session_id: str
    envelope: dict


class FinishBody(BaseModel):
    session_id: str


class RegisterBeginBody(BaseModel):
    user_id: str


class RegisterFinishBody(BaseModel):
    user_id: str
    public_key: str
    signature: str


class AssertBeginBody(BaseModel):
    user_id: str
    operation: str


class AssertFinishBody(BaseModel):
    envelope: dict


class LinkBody(BaseModel):
    username: str


class ResultsBody(BaseModel):
    subject: str
    access_token: str
    since: Optional[int] = None


class IssueBody(BaseModel):
    subject: str
    credential_type: str
    claims: Dict[str, str]
    ttl_seconds: int


class MintBody(BaseModel):
    kind: str = "dynamic"
    presentation: Optional[dict] = None
    proof: Optional[dict] = None
    # server-side wallet session path (browser holder UI)
    store: Optional[str] = None
    passphrase: Optional[str] = None
    credential_id: Optional[str] = None
    credential_type: Optional[str] = None
    reveal: Optional[List[str]] = None
    mode: Optional[str] = None


class UnlockBody(BaseModel):
    store: str
    passphrase: str


class VerifyBody(BaseModel):
    payload: str
    offline: bool = False
    verifier: Optional[str] = None


class PushRegisterBody(BaseModel):
    user: str
    token: str


class PolicyEvalBody(BaseModel):
    verifier: Optional[str] = None
    credential_type: str
    result: str
    age_hours: float


class TokenBody(BaseModel):
    grant_type: str
    client_id: str
    code: Optional[str] = None
    refresh_token: Optional[str] = None


# --- error mapping ----------------------------------------------------------------

_ERROR_STATUS = [
    (onboarding_mod.MrzChecksum, 400),
    (onboarding_mod.MrzFormat, 400),
    (vc_mod.InvalidKey, 400),
    (vc_mod.InvalidTtl, 400),
    (vc_mod.UnknownClaim, 404),
    (vc_mod.DisclosurePolicyViolation, 403),
    (InvalidDigest, 400),
    (EmptyBatch, 409),
    (fhir_mod.ClientMismatch, 400),
    (fhir_mod.ClientInvalid, 400),
    (fhir_mod.CodeInvalid, 400),
    (fhir_mod.ScopeDenied, 403),
    (fhir_mod.PatientMismatch, 403),
    (fhir_mod.TokenExpired, 401),
    (fhir_mod.TokenInvalid, 401),
    (fhir_mod.PortalAuthFailed, 401),
    (fhir_mod.UnmappableDialect, 400),
    (fhir_mod.IncompleteRecord, 400),
    (onboarding_mod.ConsentMissing, 403),
    (onboarding_mod.VettingIncomplete, 422),
    (onboarding_mod.OracleUnavailable, 503),
    (authn_mod.AttestationInvalid, 401),
    (authn_mod.ChallengeError, 401),
    (authn_mod.UnknownUser, 404),
    (authn_mod.SessionNotAuthorized, 401),
    (pres_mod.PayloadTooLarge, 400),
    (pres_mod.NoActiveKey, 503),
    (pres_mod.NoPushToken, 404),
    (PiiRejected, 403),
    (UnknownWorkflow, 404),
    (InstanceTerminal, 409),
    (PolicyParseError, 400),
]


def _error_response(exc: Exception) -> JSONResponse:
    for klass, status in _ERROR_STATUS:
        if isinstance(exc, klass):
            body = {"error": type(exc).__name__, "detail": str(exc)}
            if isinstance(exc, onboarding_mod.MrzChecksum):
                body["field"] = exc.field
            return JSONResponse(status_code=status, content=body)
    return JSONResponse(
        status_code=500, content={"error": type(exc).__name__, "detail": str(exc)}
    )


# --- app ---------------------------------------------------------------------------


def create_app(services: Services) -> FastAPI:
    app = FastAPI(title="healthpass", version="0.1.0")
    app.add_middleware(
        CORSMiddleware, allow_origins=["*"], allow_methods=["*"], allow_headers=["*"]
    )
    app.state.services = services
    svc = services

    @app.exception_handler(Exception)
    async def domain_errors(request: Request, exc: Exception):  # noqa: ANN001
        return _error_response(exc)

    @app.get("/")
    def health() -> dict:
        return {"service": "healthpass", "v": 1, "issuer": svc.issuer_did.uri}

    # -- onboarding ------------------------------------------------------------

    @app.post("/onboarding/start")
    def onboarding_start(body: StartBody) -> dict:
        user = vc_mod.Did.from_uri(body.user_id)
        session = onboarding_mod.OnboardingSession(user=user)
        svc.sessions[session.session_id] = session
        svc.audit.record("onboarding_started", actor=svc.pseudonym(user.uri))
        return {"session_id": session.session_id}

    def _session(session_id: str) -> onboarding_mod.OnboardingSession:
        session = svc.sessions.get(session_id)
        if session is None:
            raise UnknownWorkflow(f"no onboarding session {session_id}")
        return session

    @app.post("/onboarding/mrz")
    def onboarding_mrz(body: MrzBody) -> dict:
        session = _session(body.session_id)
        session.mrz = onboarding_mod.parse_mrz(body.line1, body.line2)
        return {"ok": True, "document_type": session.mrz.document_type}

    @app.post("/onboarding/photos")
    def onboarding_photos(body: PhotosBody) -> dict:
        session = _session(body.session_id)
        session.doc_photo = b64u_decode(body.doc_photo)
        session.selfie = b64u_decode(body.selfie)
        return {"ok": True}

    @app.post("/onboarding/consent")
    def onboarding_consent(body: ConsentBody) -> dict:
        session = _session(body.session_id)
        envelope = authn_mod.SignedEnvelope.from_wire(body.envelope)
        result = svc.rp.finish_auth(envelope)
        if not result:
            return JSONResponse(status_code=401, content={"error": result.reason})
        consent_body = from_json(result.payload)
        session.consent = onboarding_mod.ConsentAttestation(
            user=session.user,
            scope=consent_body.get("scope", "onboarding"),
            context=envelope.client_context,
            envelope=envelope,
        )
        svc.audit.record(
            "consent_captured",
            actor=svc.pseudonym(session.user.uri),
            attributes={"scope": session.consent.scope},
        )
        return {"ok": True}

    @app.post("/onboarding/finish")
    def onboarding_finish(body: FinishBody):
        session = _session(body.session_id)
        try:
            instance_id = svc.engine.start("onboarding", {"session_id": session.session_id})
            instance = svc.engine.run(instance_id)
            if instance.state.value == "Completed":
                out = instance.context["results"]["mint"]
                return {
                    "credential": out["credential"],
                    "receipt": out["receipt"],
                    "derived": {"age": out["age"]},
                    "workflow_instance": instance_id,
                }
            reason = instance.failure_reason or "workflow failed"
            if session.vetting is not None and session.vetting.decision.value == "Rejected":
                return JSONResponse(
                    status_code=422,
                    content={
                        "error": "VettingRejected",
                        "reasons": list(session.vetting.reasons),
                        "workflow_instance": instance_id,
                    },
                )
            if "ConsentMissing" in reason:
                return JSONResponse(status_code=403, content={"error": "ConsentMissing", "detail": reason})
            if "MrzChecksum" in reason or "no validated MRZ" in reason:
                return JSONResponse(status_code=400, content={"error": "MrzInvalid", "detail": reason})
            return JSONResponse(status_code=500, content={"error": "WorkflowFailed", "detail": reason})
        finally:
            session.scrub()
            svc.sessions.pop(session.session_id, None)

    # -- authn -----------------------------------------------------------------

    @app.post("/auth/register/begin")
    def register_begin(body: RegisterBeginBody) -> dict:
        ch = svc.rp.begin_register(body.user_id)
        return {"challenge": b64u(ch.value), "expires_at": ch.issued_at + ch.ttl_seconds}

    @app.post("/auth/register/finish")
    def register_finish(body: RegisterFinishBody) -> dict:
        public_key = b64u_decode(body.public_key)
        record = svc.rp.register(body.user_id, public_key, b64u_decode(body.signature))
        svc.registry.register_holder(body.user_id, public_key)
        svc.persist_registry()
        svc.secrets.put_json("authenticators", svc.rp.persistable_state())
        receipt = svc.ledger.append(sha256(body.user_id.encode("utf-8")))
        svc.audit.record(
            "did_registered", actor=svc.pseudonym(body.user_id), ledger_ref=receipt.seq
        )
        return {"credential_id": b64u(record.credential_id)}

    @app.post("/auth/assert/begin")
    def assert_begin(body: AssertBeginBody) -> dict:
        ch = svc.rp.begin_auth(body.user_id, body.operation)
        return {"challenge": b64u(ch.value), "expires_at": ch.issued_at + ch.ttl_seconds}

    @app.post("/auth/assert/finish")
    def assert_finish(body: AssertFinishBody) -> dict:
        envelope = authn_mod.SignedEnvelope.from_wire(body.envelope)
        result = svc.rp.finish_auth(envelope)
        svc.secrets.put_json("authenticators", svc.rp.persistable_state())
        out = {"accepted": result.accepted, "reason": result.reason}
        if result.accepted and result.payload is not None:
            out["payload"] = b64u(result.payload)
        return out

    # -- EHR link and results ----------------------------------------------------

    @app.post("/fhir/link")
    def fhir_link(body: LinkBody):
        patient = svc.hub.patient_for(body.username)
        if patient is None:
            return JSONResponse(
                status_code=404,
                content={"error": "UnknownPortalUser", "detail": "portal user not registered at hub"},
            )
        svc.audit.record("ehr_linked", actor=svc.pseudonym(body.username))
        return {"patient": patient}

    @app.post("/results/fetch")
    def results_fetch(body: ResultsBody):
        instance_id = svc.engine.start(
            "results",
            {"subject": body.subject, "access_token": body.access_token, "since": body.since},
        )
        instance = svc.engine.run(instance_id)
        if instance.state.value != "Completed":
            reason = instance.failure_reason or "workflow failed"
            for klass in (fhir_mod.TokenExpired, fhir_mod.TokenInvalid, fhir_mod.ScopeDenied):
                if klass.__name__ in reason:
                    return JSONResponse(
                        status_code=401 if "Token" in klass.__name__ else 403,
                        content={"error": klass.__name__, "detail": reason},
                    )
            return JSONResponse(status_code=500, content={"error": "WorkflowFailed", "detail": reason})
        issued = instance.context["results"]["issue"]["issued"]
        errors = instance.context["results"]["rationalize"]["errors"]
        return {"credentials": issued, "errors": errors, "workflow_instance": instance_id}

    @app.post("/credentials/issue")
    def credentials_issue(body: IssueBody) -> dict:
        subject = vc_mod.Did.from_uri(body.subject)
        vc = vc_mod.issue_credential(
            body.claims,
            vc_mod.CredentialType(body.credential_type),
            svc.issuer_key,
            subject,
            body.ttl_seconds,
            svc.now(),
        )
        receipt = svc.ledger.append(vc.digest())
        svc.ledger.flush()
        svc.audit.record(
            "credential_issued",
            actor=svc.pseudonym(subject.uri),
            attributes={"credential_type": body.credential_type},
            ledger_ref=receipt.seq,
        )
        return {
            "credential": vc.to_wire(include_claims=True),
            "receipt": svc.ledger.proof(receipt.seq).to_wire(),
        }

    # -- presentation ------------------------------------------------------------

    @app.post("/present/mint")
    def present_mint(body: MintBody):
        now = svc.now()
        if body.presentation is not None:
            pres = vc_mod.Presentation.from_wire(body.presentation)
            proof = None
            if body.proof is not None:
                from ..ledger import InclusionProof

                proof = InclusionProof.from_wire(body.proof)
        elif body.store is not None:
            from ..wallet.store import WalletStore

            wallet_dir = Path(svc.config.wallet_dir or svc.config.data_dir / "wallets")
            store = WalletStore(wallet_dir / body.store)
            pres, proof = _derive_from_wallet(svc, store, body, now)
        else:
            return JSONResponse(
                status_code=400,
                content={"error": "BadRequest", "detail": "need presentation or store"},
            )
        issuer_key = svc.registry.issuer_key_for(pres.credential.issuer.uri)
        if issuer_key is None:
            return JSONResponse(status_code=400, content={"error": "UntrustedIssuer"})
        check = vc_mod.verify_presentation(pres, issuer_key, expected_nonce=pres.nonce, now=now)
        if not check:
            return JSONResponse(
                status_code=400, content={"error": "PresentationInvalid", "detail": check.reason}
            )
        encoded = pres_mod.mint_qr(pres, proof, svc.registry, body.kind, now)
        exp = now + svc.registry.dynamic_ttl if body.kind == "dynamic" else pres.credential.expires_at
        svc.audit.record(
            "presentation_minted",
            actor=svc.pseudonym(pres.credential.subject.uri),
            attributes={"mode": pres.mode.value, "kind": body.kind},
        )
        return {"payload": encoded, "exp": exp, "nonce": b64u(pres.nonce)}

    @app.post("/present/unlock")
    def present_unlock(body: UnlockBody):
        """Open a named server-side wallet for the browser holder UI and
        return credential summaries: types, expiry, claim names - never
        claim values."""
        from ..wallet.store import DecryptFailed, WalletMissing, WalletStore

        wallet_dir = Path(svc.config.wallet_dir or svc.config.data_dir / "wallets")
        try:
            data = WalletStore(wallet_dir / body.store).open(body.passphrase)
        except DecryptFailed:
            return JSONResponse(status_code=401, content={"error": "DecryptFailed"})
        except WalletMissing:
            return JSONResponse(status_code=404, content={"error": "WalletMissing"})
        return {
            "did": data.did,
            "credentials": [
                {
                    "id": c["credential"]["id"],
                    "credential_type": c["credential"]["credential_type"],
                    "expires_at": c["credential"]["expires_at"],
                    "claims": sorted(c["credential"].get("claims", {})),
                }
                for c in data.credentials
            ],
        }

    @app.post("/present/verify")
    def present_verify(body: VerifyBody) -> dict:
        heads = None if body.offline else svc.ledger.heads()
        status = pres_mod.verify_qr(body.payload, svc.registry, heads, svc.now())
        svc.audit.record(
            "presentation_verified",
            actor=svc.pseudonym(body.verifier or "anonymous-verifier"),
            attributes={"outcome": status.outcome, "ledger_check": status.ledger_check},
        )
        return status.to_wire()

    @app.post("/present/rotate-key")
    def present_rotate_key() -> dict:
        key_id = svc.registry.rotate_qr_key(svc.now())
        svc.persist_registry()
        return {"active_key_id": key_id}

    @app.get("/present/verifier-bundle")
    def verifier_bundle() -> dict:
        return svc.registry.export_verifier_bundle(svc.ledger.heads())

    # -- ledger -------------------------------------------------------------------

    @app.get("/ledger/heads")
    def ledger_heads(format: str = Query("json")):  # noqa: A002
        svc.ledger.maybe_seal_by_age()
        if format == "text":
            return PlainTextResponse(svc.ledger.export_heads_text())
        return {"v": 1, "heads": [h.head.hex() for h in svc.ledger.heads()]}

    @app.get("/ledger/proof/{seq}")
    def ledger_proof(seq: int):
        svc.ledger.maybe_seal_by_age()
        proof = svc.ledger.proof(seq)
        if proof is None:
            return JSONResponse(
                status_code=404,
                content={"error": "ProofUnavailable", "detail": "unknown or still pending"},
            )
        return proof.to_wire()

    # -- push ----------------------------------------------------------------------

    @app.post("/push/register")
    def push_register(body: PushRegisterBody) -> dict:
        svc.registry.register_push(body.user, body.token)
        svc.persist_registry()
        return {"ok": True}

    @app.get("/push/feed/{user}")
    def push_feed(user: str) -> dict:
        return {"events": svc.registry.feed(user)}

    # -- audit / metrics / policy ----------------------------------------------------

    @app.get("/audit/search")
    def audit_search(
        q: str = Query(""),
        t_from: Optional[int] = Query(None, alias="from"),
        t_to: Optional[int] = Query(None, alias="to"),
    ) -> dict:
        events = svc.audit.search(q, t_from, t_to)
        return {"events": [e.to_wire() for e in events]}

    @app.get("/audit/report")
    def audit_report(
        t_from: Optional[int] = Query(None, alias="from"),
        t_to: Optional[int] = Query(None, alias="to"),
    ) -> dict:
        return {"report": svc.audit.report(t_from, t_to)}

    @app.get("/metrics/{workflow}")
    def metrics(workflow: str) -> dict:
        return svc.engine.metrics(workflow)

    @app.post("/policy/eval")
    def policy_eval(body: PolicyEvalBody) -> dict:
        decision = svc.policy.evaluate(
            body.verifier, body.credential_type, body.result, body.age_hours
        )
        return {"allow": decision.allow, "reason": decision.reason}

    # -- mock hub (external EHR aggregation service) ----------------------------------

    @app.get("/fhir/authorize")
    def fhir_authorize(
        username: str, password: str, client_id: str, scope: str = fhir_mod.OBSERVATION_SCOPE
    ) -> dict:
        code = svc.hub.authorize(username, password, client_id, set(scope.split()))
        return {"code": code, "expires_in": svc.hub.code_ttl}

    @app.post("/fhir/token")
    def fhir_token(body: TokenBody) -> dict:
        if body.grant_type == "authorization_code":
            if body.code is None:
                raise fhir_mod.CodeInvalid("missing code")
            token = svc.hub.exchange(body.code, body.client_id)
        elif body.grant_type == "refresh_token":
            if body.refresh_token is None:
                raise fhir_mod.CodeInvalid("missing refresh_token")
            token = svc.hub.refresh(body.refresh_token, body.client_id)
        else:
            raise fhir_mod.CodeInvalid(f"unsupported grant_type {body.grant_type!r}")
        return {
            "access_token": token.token,
            "token_type": "Bearer",
            "expires_in": token.expires_at - token.issued_at,
            "refresh_token": token.refresh_token,
            "patient": token.patient_ref,
            "scope": " ".join(sorted(token.scope)),
        }

    def _bearer(authorization: Optional[str]) -> str:
        if not authorization or not authorization.startswith("Bearer "):
            raise fhir_mod.TokenInvalid("missing bearer token")
        return authorization.split(" ", 1)[1]

    @app.get("/fhir/Patient/{patient_id}")
    def fhir_patient(patient_id: str, authorization: Optional[str] = Header(None)) -> dict:
        return svc.hub.get_patient(_bearer(authorization), patient_id)

    @app.get("/fhir/Observation")
    def fhir_observation(
        patient: Optional[str] = Query(None),
        since: Optional[int] = Query(None),
        authorization: Optional[str] = Header(None),
    ) -> dict:
        entries = svc.hub.fetch_observations(_bearer(authorization), patient=patient, since=since)
        return {"entries": entries}

    return app


def _derive_from_wallet(svc: Services, store, body: MintBody, now: int):
    """Server-side wallet session for the browser holder UI: open the
    named wallet, derive a fresh-nonce presentation, return (pres, proof)."""
    import secrets as _secrets

    data = store.open(body.passphrase or "")
    entry = None
    for item in data.credentials:
        if body.credential_id and item["credential"]["id"] == body.credential_id:
            entry = item
            break
        if body.credential_type and item["credential"]["credential_type"] == body.credential_type:
            entry = item
            break
    if entry is None:
        raise vc_mod.UnknownClaim("no matching credential in wallet")
    vc = vc_mod.VerifiableCredential.from_wire(entry["credential"])
    mode = vc_mod.Mode(body.mode or "deidentified")
    reveal = body.reveal
    if reveal is None:
        reveal = [] if mode is vc_mod.Mode.DEIDENTIFIED else list(vc.claims.names())
    holder_key = Ed25519PrivateKey.from_private_bytes(data.holder_seed)
    pres = vc_mod.derive_presentation(
        vc, reveal, mode, holder_key, _secrets.token_bytes(16), now
    )
    proof = None
    if entry.get("receipt"):
        from ..ledger import InclusionProof

        proof = InclusionProof.from_wire(entry["receipt"])
    return pres, proof


def main() -> None:
    parser = argparse.ArgumentParser(description="Run the healthpass server")
    parser.add_argument("--config", type=Path, default=None, help="INI config file")
    parser.add_argument("--host", default=None)
    parser.add_argument("--port", type=int, default=None)
    args = parser.parse_args()

    from .config import load_config

    config = load_config(args.config)
    if args.host:
        config.host = args.host
    if args.port:
        config.port = args.port
    services = build_services(config)
    uvicorn.run(create_app(services), host=config.host, port=config.port)


if __name__ == "__main__":
    main()
