#!/usr/bin/env python3
"""Narrative walkthrough of the whole flow, in one process.

Issues a vetted identity credential, pulls EHR observations through the
OAuth flow, turns them into status credentials anchored on the hash
calendar, then presents and verifies an anonymous QR payload - online,
from published heads, and offline.

    python demos/end_to_end.py
"""

from __future__ import annotations

import secrets
import sys
import tempfile
import time
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "tests"))

from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey

from healthpass import presentation as qr
from healthpass import vc
from healthpass.authn import client_context, sign_envelope
from healthpass.canonical import canonical_json
from healthpass.fhir import rationalize
from healthpass.onboarding import parse_mrz
from healthpass.orchestrator.config import Config
from healthpass.orchestrator.server import build_services
from healthpass.onboarding import AuthorityStatus

from mrz_oracle import build_td3


def step(title: str) -> None:
    print(f"\n=== {title} ===")


def main() -> None:
    root = Path(tempfile.mkdtemp(prefix="healthpass-demo-"))
    print(f"working directory: {root}")

    services = build_services(Config(data_dir=root / "server"), clock=time.time)

    step("seed the mock world")
    services.authority.add("X4815162", AuthorityStatus.CONFIRMED)
    patient = services.hub.register_user("portal-7731", "portal-pw")
    services.hub.add_observation(
        patient,
        {
            "resourceType": "Observation",
            "code": {"coding": [{"code": "94500-6"}]},
            "effectiveDateTime": "2026-08-07T09:30:00Z",
            "valueCodeableConcept": {"coding": [{"code": "260385009"}]},
            "performer": [{"display": "Metro Reference Laboratory"}],
        },
    )
    print(f"portal user registered as patient {patient}, 1 observation seeded")

    step("holder enrolls an authenticator (FIDO2-style, self-attested)")
    holder_key = Ed25519PrivateKey.generate()
    holder_did = vc.derive_did(holder_key.public_key().public_bytes_raw())
    challenge = services.rp.begin_register(holder_did.uri)
    services.rp.register(
        holder_did.uri,
        holder_key.public_key().public_bytes_raw(),
        holder_key.sign(challenge.value),
    )
    services.registry.register_holder(
        holder_did.uri, holder_key.public_key().public_bytes_raw()
    )
    print(f"holder DID: {holder_did.uri[:40]}...")

    step("identity vetting: MRZ + face match + authority + signed consent")
    line1, line2 = build_td3("MARTINELLI", "LUCIA", "ITA", "X4815162", "850512", "330207")
    mrz = parse_mrz(line1, line2)
    print(f"MRZ parses; all four check digits valid; holder is {mrz.full_name()}")

    from healthpass.onboarding import (
        ConsentAttestation,
        hash_equality_oracle,
        mint_identity_credential,
        vet_identity,
    )

    vetting = vet_identity(
        mrz, b"same-face", b"same-face", hash_equality_oracle, services.authority
    )
    print(f"vetting decision: {vetting.decision.value} (score {vetting.face_match_score})")

    consent_challenge = services.rp.begin_auth(holder_did.uri, "consent")
    context = client_context("consent", "demo", int(time.time()), geolocation="area-51x")
    envelope = sign_envelope(
        holder_key, consent_challenge.value, context, canonical_json({"scope": "onboarding"}), 1
    )
    assert services.rp.finish_auth(envelope)
    consent = ConsentAttestation(holder_did, "onboarding", context, envelope)

    identity_vc, receipt = mint_identity_credential(
        vetting, mrz, holder_did, services.issuer_key, services.ledger, consent,
        now=int(time.time()),
    )
    services.ledger.flush()
    print(f"identity credential {identity_vc.id} anchored at ledger seq {receipt.seq}")

    step("EHR link: OAuth code flow against the hub")
    code = services.hub.authorize("portal-7731", "portal-pw", "healthpass-wallet", {"observations"})
    token = services.hub.exchange(code, "healthpass-wallet")
    print(f"bearer token expires in {token.expires_at - token.issued_at}s; refresh token rotates")

    step("fetch + rationalize + issue status credential")
    raw = services.hub.fetch_observations(token.token)
    obs = rationalize(raw[0])
    print(f"rationalized: kind={obs.kind.value} result={obs.result.value} code={obs.code}")
    status_vc = vc.issue_credential(
        {"kind": obs.kind.value, "result": obs.result.value, "effective_at": str(obs.effective_at)},
        vc.CredentialType.TEST_RESULT, services.issuer_key, holder_did, 86400, int(time.time()),
    )
    status_receipt = services.ledger.append(status_vc.digest())
    services.ledger.flush()
    proof = services.ledger.proof(status_receipt.seq)
    print(f"status credential anchored; inclusion path has {len(proof.path)} siblings")

    step("anonymous presentation sealed into a QR payload")
    now = int(time.time())
    pres = vc.derive_presentation(
        status_vc, {"result", "kind"}, vc.Mode.DEIDENTIFIED, holder_key,
        secrets.token_bytes(16), now,
    )
    payload = qr.mint_qr(pres, proof, services.registry, "dynamic", now)
    print(f"payload: {len(payload)} bytes (QR capacity 2953); expires in 60s")
    assert "MARTINELLI" not in payload

    step("verification: online, from published heads, offline")
    online = qr.verify_qr(payload, services.registry, services.ledger.heads(), now + 1)
    print(f"online:  outcome={online.outcome} ledger_check={online.ledger_check} claims={online.claims}")

    bundle = services.registry.export_verifier_bundle(services.ledger.heads())
    published_registry = qr.KeyRegistry.from_verifier_bundle(bundle)
    published = qr.verify_qr(payload, published_registry, qr.heads_from_bundle(bundle), now + 2)
    print(f"heads:   outcome={published.outcome} ledger_check={published.ledger_check}")

    offline = qr.verify_qr(payload, published_registry, None, now + 3)
    print(f"offline: outcome={offline.outcome} ledger_check={offline.ledger_check}")

    step("tamper evidence")
    flipped = payload[:40] + ("A" if payload[40] != "A" else "B") + payload[41:]
    print(f"one flipped character -> {qr.verify_qr(flipped, services.registry, None, now).reason}")
    fork_heads = list(services.ledger.heads())
    from healthpass.ledger import CalendarHead

    fork_heads[-1] = CalendarHead(fork_heads[-1].batch_id, secrets.token_bytes(32))
    forked = qr.verify_qr(payload, services.registry, fork_heads, now + 4)
    print(f"forked head history -> {forked.reason} (ledger_check={forked.ledger_check})")

    print("\ndemo complete.")


if __name__ == "__main__":
    main()
