#!/usr/bin/env python3
"""Capture live orchestrator responses as fixtures for the UI tests.

Boots the real service stack, runs a holder through onboarding and
result acquisition, mints payloads, and snapshots the exact JSON the
/present/verify and /policy/eval endpoints return for the states the
verifier screen must render: accept-online, accept-offline (ledger
check skipped), expired payload, and tampered payload.

    python scripts/export_ui_fixtures.py
"""

from __future__ import annotations

import json
import sys
import tempfile
import time
from pathlib import Path

ROOT = Path(__file__).resolve().parents[1]
sys.path.insert(0, str(ROOT / "tests"))

from fastapi.testclient import TestClient

from healthpass.orchestrator.server import create_app
from healthpass.wallet.client import WalletClient
from healthpass.wallet.store import WalletStore

from conftest import PORTAL_PASSWORD, PORTAL_USERNAME, make_services, build_td3  # type: ignore

OUT = ROOT / "frontend" / "tests" / "fixtures"


def main() -> None:
    tmp = Path(tempfile.mkdtemp(prefix="ui-fixtures-"))
    services = make_services(tmp)
    api = TestClient(create_app(services), raise_server_exceptions=False)
    client = WalletClient("http://testserver", http=api)

    mrz = build_td3("MARTINELLI", "LUCIA", "ITA", "X4815162", "850512", "330207")
    store = WalletStore(services.config.wallet_dir / "ui-fixture.hp")
    client.onboard(store, "fixture-pass", mrz, b"face", b"face")
    client.link_ehr(store, "fixture-pass", PORTAL_USERNAME, PORTAL_PASSWORD)
    client.fetch_results(store, "fixture-pass")

    minted = api.post(
        "/present/mint",
        json={
            "store": "ui-fixture.hp",
            "passphrase": "fixture-pass",
            "credential_type": "TestResult",
            "mode": "deidentified",
            "reveal": ["result", "kind", "effective_at"],
            "kind": "dynamic",
        },
    ).json()

    fixtures = {
        "unlock.json": api.post(
            "/present/unlock", json={"store": "ui-fixture.hp", "passphrase": "fixture-pass"}
        ).json(),
        "mint.json": minted,
        "verify_accept_online.json": api.post(
            "/present/verify", json={"payload": minted["payload"]}
        ).json(),
        "verify_accept_offline.json": api.post(
            "/present/verify", json={"payload": minted["payload"], "offline": True}
        ).json(),
        "verify_reject_tampered.json": api.post(
            "/present/verify", json={"payload": "A" + minted["payload"][1:]}
        ).json(),
        "policy_allow.json": api.post(
            "/policy/eval",
            json={"credential_type": "PcrTest", "result": "Negative", "age_hours": 10},
        ).json(),
        "policy_stale.json": api.post(
            "/policy/eval",
            json={"credential_type": "PcrTest", "result": "Negative", "age_hours": 90},
        ).json(),
    }

    # expired: a dynamic payload minted in the past, verified now
    stale = _mint_expired(services, store)
    fixtures["verify_reject_expired.json"] = api.post(
        "/present/verify", json={"payload": stale}
    ).json()

    OUT.mkdir(parents=True, exist_ok=True)
    for name, body in fixtures.items():
        (OUT / name).write_text(json.dumps(body, indent=2, sort_keys=True) + "\n")
        print(f"wrote {OUT / name}")


def _mint_expired(services, store: WalletStore) -> str:
    import secrets

    from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey

    from healthpass import presentation as qr
    from healthpass import vc

    data = store.open("fixture-pass")
    entry = next(
        c for c in data.credentials if c["credential"]["credential_type"] == "TestResult"
    )
    cred = vc.VerifiableCredential.from_wire(entry["credential"])
    key = Ed25519PrivateKey.from_private_bytes(data.holder_seed)
    past = int(time.time()) - 3600
    pres = vc.derive_presentation(
        cred, {"result"}, vc.Mode.DEIDENTIFIED, key, secrets.token_bytes(16), past
    )
    return qr.mint_qr(pres, None, services.registry, "dynamic", past)


if __name__ == "__main__":
    main()
