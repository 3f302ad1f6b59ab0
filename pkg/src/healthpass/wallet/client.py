"""Holder-side flows against the server: onboarding, EHR linking,
result acquisition, presentation minting, and verification.

All server interaction goes through the public HTTP API; the holder's
signing key never leaves the wallet. Verification can run three ways:
against the server's verify endpoint, locally from a pulled verifier
bundle (keys + heads), or locally offline (ledger check skipped).
"""

from __future__ import annotations

import json
import secrets
import time
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Tuple

import httpx

from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey

from .. import presentation as pres_mod
from .. import vc as vc_mod
from ..authn import client_context, sign_envelope
from ..canonical import b64u, b64u_decode, canonical_json
from .store import WalletData, WalletStore

ORIGIN = "wallet-cli"


class NetworkError(ConnectionError):
    """Server or hub unreachable."""


class ApiError(RuntimeError):
    """Non-2xx API response; carries the server's error code."""

    def __init__(self, status: int, error: str, detail: str = "", body: Optional[dict] = None):
        super().__init__(f"{error} ({status}): {detail}")
        self.status = status
        self.error = error
        self.detail = detail
        self.body = body or {}


@dataclass
class VettingRejected(Exception):
    reasons: List[str]

    def __str__(self) -> str:
        return f"vetting rejected: {', '.join(self.reasons)}"


class WalletClient:
    def __init__(self, server_url: str, http: Optional[httpx.Client] = None):
        self.server_url = server_url.rstrip("/")
        self._http = http or httpx.Client(base_url=self.server_url, timeout=30.0)

    # -- low-level -------------------------------------------------------------

    def _request(self, method: str, path: str, **kwargs) -> dict:
        try:
            response = self._http.request(method, path, **kwargs)
        except httpx.TransportError as exc:
            raise NetworkError(f"cannot reach {self.server_url}: {exc}") from exc
        if response.status_code >= 400:
            try:
                body = response.json()
            except ValueError:
                body = {}
            raise ApiError(
                response.status_code,
                body.get("error", f"HTTP{response.status_code}"),
                body.get("detail", response.text[:200]),
                body,
            )
        return response.json()

    def _post(self, path: str, payload: dict) -> dict:
        return self._request("POST", path, json=payload)

    def _get(self, path: str, params: Optional[dict] = None) -> dict:
        return self._request("GET", path, params=params)

    # -- authenticator ------------------------------------------------------------

    def register_authenticator(self, data: WalletData, key: Ed25519PrivateKey) -> None:
        begin = self._post("/auth/register/begin", {"user_id": data.did})
        challenge = b64u_decode(begin["challenge"])
        signature = key.sign(challenge)
        self._post(
            "/auth/register/finish",
            {
                "user_id": data.did,
                "public_key": b64u(key.public_key().public_bytes_raw()),
                "signature": b64u(signature),
            },
        )

    def _signed_envelope(
        self,
        data: WalletData,
        key: Ed25519PrivateKey,
        operation: str,
        payload: bytes,
        geolocation: Optional[str] = None,
        device: Optional[str] = None,
    ) -> dict:
        begin = self._post("/auth/assert/begin", {"user_id": data.did, "operation": operation})
        challenge = b64u_decode(begin["challenge"])
        context = client_context(
            operation=operation,
            origin=ORIGIN,
            timestamp=int(time.time()),
            geolocation=geolocation,
            device=device,
        )
        counter = int(data.authn.get("counter", 0)) + 1
        data.authn["counter"] = counter
        envelope = sign_envelope(key, challenge, context, payload, counter)
        return envelope.to_wire()

    # -- onboarding -----------------------------------------------------------------

    def onboard(
        self,
        store: WalletStore,
        passphrase: str,
        mrz_lines: Tuple[str, str],
        doc_photo: bytes,
        selfie: bytes,
        geolocation: Optional[str] = None,
        device: Optional[str] = None,
    ) -> dict:
        """Full onboarding run: fresh wallet, authenticator registration,
        vetting session, consent, identity credential delivery."""
        key = Ed25519PrivateKey.generate()
        did = vc_mod.derive_did(key.public_key().public_bytes_raw())
        data = WalletData(
            holder_seed=key.private_bytes_raw(),
            did=did.uri,
            meta={"server": self.server_url},
        )
        self.register_authenticator(data, key)

        session = self._post("/onboarding/start", {"user_id": data.did})["session_id"]
        self._post(
            "/onboarding/mrz",
            {"session_id": session, "line1": mrz_lines[0], "line2": mrz_lines[1]},
        )
        self._post(
            "/onboarding/photos",
            {"session_id": session, "doc_photo": b64u(doc_photo), "selfie": b64u(selfie)},
        )
        consent_payload = canonical_json(
            {"scope": "onboarding", "liveness_asserted": True}
        )
        envelope = self._signed_envelope(
            data, key, "consent", consent_payload, geolocation, device
        )
        self._post("/onboarding/consent", {"session_id": session, "envelope": envelope})
        try:
            result = self._post("/onboarding/finish", {"session_id": session})
        except ApiError as exc:
            if exc.error == "VettingRejected":
                raise VettingRejected(exc.body.get("reasons", [])) from exc
            raise
        data.credentials.append(
            {
                "credential": result["credential"],
                "receipt": result["receipt"],
                "observation_id": None,
            }
        )
        data.meta["age"] = str(result["derived"]["age"])
        store.create(passphrase, data)
        return result

    # -- EHR linking and results -------------------------------------------------------

    def link_ehr(
        self,
        store: WalletStore,
        passphrase: str,
        username: str,
        password: str,
        client_id: str = "healthpass-wallet",
    ) -> dict:
        """OAuth code flow against the hub; tokens land in the wallet,
        portal credentials land nowhere."""
        data = store.open(passphrase)
        link = self._post("/fhir/link", {"username": username})
        auth = self._get(
            "/fhir/authorize",
            params={
                "username": username,
                "password": password,
                "client_id": client_id,
                "scope": "observations",
            },
        )
        token = self._post(
            "/fhir/token",
            {"grant_type": "authorization_code", "code": auth["code"], "client_id": client_id},
        )
        data.tokens["ehr"] = {
            "access_token": token["access_token"],
            "refresh_token": token["refresh_token"],
            "patient": token["patient"],
            "client_id": client_id,
        }
        store.save(passphrase, data)
        return {"patient": link["patient"]}

    def _refresh_token(self, data: WalletData) -> None:
        ehr = data.tokens["ehr"]
        token = self._post(
            "/fhir/token",
            {
                "grant_type": "refresh_token",
                "refresh_token": ehr["refresh_token"],
                "client_id": ehr["client_id"],
            },
        )
        ehr["access_token"] = token["access_token"]
        ehr["refresh_token"] = token["refresh_token"]

    def fetch_results(self, store: WalletStore, passphrase: str, since: Optional[int] = None) -> dict:
        """Pull observations, receive status credentials, dedupe by
        observation identity. Expired tokens refresh automatically once."""
        data = store.open(passphrase)
        if "ehr" not in data.tokens:
            raise ApiError(400, "NotLinked", "run link-ehr first")
        body = {
            "subject": data.did,
            "access_token": data.tokens["ehr"]["access_token"],
            "since": since,
        }
        try:
            result = self._post("/results/fetch", body)
        except ApiError as exc:
            if exc.error not in ("TokenExpired", "TokenInvalid"):
                raise
            self._refresh_token(data)
            body["access_token"] = data.tokens["ehr"]["access_token"]
            result = self._post("/results/fetch", body)
        added = 0
        for item in result["credentials"]:
            if item["observation_id"] and data.has_observation(item["observation_id"]):
                continue
            data.credentials.append(item)
            added += 1
        store.save(passphrase, data)
        return {
            "added": added,
            "received": len(result["credentials"]),
            "errors": result.get("errors", []),
        }

    # -- presentation ---------------------------------------------------------------------

    def mint_presentation(
        self,
        store: WalletStore,
        passphrase: str,
        mode: vc_mod.Mode,
        reveal: Optional[List[str]] = None,
        credential_type: Optional[str] = None,
        credential_id: Optional[str] = None,
        kind: str = "dynamic",
    ) -> dict:
        """Derive a fresh-nonce presentation locally and have the token
        server seal it into a QR payload."""
        data = store.open(passphrase)
        entry = self._pick_credential(data, credential_type, credential_id)
        vc = vc_mod.VerifiableCredential.from_wire(entry["credential"])
        if reveal is None:
            reveal = [] if mode is vc_mod.Mode.DEIDENTIFIED else list(vc.claims.names())
        key = Ed25519PrivateKey.from_private_bytes(data.holder_seed)
        pres = vc_mod.derive_presentation(
            vc, reveal, mode, key, secrets.token_bytes(16), int(time.time())
        )
        return self._post(
            "/present/mint",
            {
                "presentation": pres.to_wire(),
                "proof": entry.get("receipt"),
                "kind": kind,
            },
        )

    @staticmethod
    def _pick_credential(
        data: WalletData, credential_type: Optional[str], credential_id: Optional[str]
    ) -> dict:
        for entry in data.credentials:
            cred = entry["credential"]
            if credential_id and cred["id"] == credential_id:
                return entry
            if credential_type and not credential_id:
                if cred["credential_type"] == credential_type:
                    return entry
        if not credential_type and not credential_id and data.credentials:
            return data.credentials[-1]
        raise ApiError(404, "NoCredential", "no matching credential in wallet")

    def verify_online(self, payload: str, verifier: Optional[str] = None) -> dict:
        return self._post("/present/verify", {"payload": payload, "verifier": verifier})

    def pull_verifier_bundle(self) -> dict:
        return self._get("/present/verifier-bundle")

    # -- notifications ---------------------------------------------------------------

    def register_push(self, user: str, token: str) -> None:
        self._post("/push/register", {"user": user, "token": token})

    def feed(self, user: str) -> List[dict]:
        return self._get(f"/push/feed/{user}")["events"]


def verify_local(payload: str, bundle: dict, offline: bool = False, now: Optional[int] = None) -> dict:
    """Verify a payload from a verifier bundle without contacting the
    server; ``offline`` drops the head history so the ledger check is
    skipped-and-flagged."""
    registry = pres_mod.KeyRegistry.from_verifier_bundle(bundle)
    heads = None if offline else pres_mod.heads_from_bundle(bundle)
    status = pres_mod.verify_qr(payload, registry, heads, now or int(time.time()))
    return status.to_wire()


def load_bundle(path: Path) -> dict:
    return json.loads(Path(path).read_text())
