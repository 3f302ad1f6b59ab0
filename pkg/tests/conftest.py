"""Shared fixtures: keys, clocks, seeded services, live HTTP server."""

from __future__ import annotations

import json
import socket
import threading
import time
from pathlib import Path

import pytest
import uvicorn
from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey

from healthpass import vc as vc_mod
from healthpass.onboarding import AuthorityStatus
from healthpass.orchestrator.config import Config
from healthpass.orchestrator.server import Services, build_services, create_app

from mrz_oracle import build_td3

FIXTURES = Path(__file__).parent / "fixtures"

# Seeded person whose PII must never persist server-side.
PII_NAME_SURNAME = "MARTINELLI"
PII_NAME_GIVEN = "LUCIA"
PII_FULL_NAME = "LUCIA MARTINELLI"
PII_BIRTH_YYMMDD = "850512"
PII_BIRTH_ISO = "1985-05-12"
PII_DOC_NUMBER = "X4815162"
PII_SEEDS = [PII_FULL_NAME, PII_NAME_SURNAME, PII_BIRTH_YYMMDD, PII_BIRTH_ISO, PII_DOC_NUMBER]

PORTAL_USERNAME = "portal-7731"
PORTAL_PASSWORD = "s3cret-portal-pw"

POLICY_TEXT = """\
# freshness-gated access rules
allow type=PcrTest result=Negative within=72h
allow type=AntigenTest result=Negative within=24h
deny  type=PcrTest result=Positive reason=PositiveResult
allow type=Vaccination result=Administered
"""


class FakeClock:
    def __init__(self, start: float = 1_767_000_000.0):
        self.t = float(start)

    def __call__(self) -> float:
        return self.t

    def advance(self, seconds: float) -> None:
        self.t += seconds


@pytest.fixture()
def clock() -> FakeClock:
    return FakeClock()


@pytest.fixture(scope="session")
def issuer_key() -> Ed25519PrivateKey:
    return Ed25519PrivateKey.generate()


@pytest.fixture(scope="session")
def issuer_pub(issuer_key) -> bytes:
    return issuer_key.public_key().public_bytes_raw()


@pytest.fixture()
def holder_key() -> Ed25519PrivateKey:
    return Ed25519PrivateKey.generate()


@pytest.fixture()
def holder_did(holder_key) -> vc_mod.Did:
    return vc_mod.derive_did(holder_key.public_key().public_bytes_raw())


@pytest.fixture()
def mrz_lines() -> tuple[str, str]:
    return build_td3(
        surname=PII_NAME_SURNAME,
        given=PII_NAME_GIVEN,
        country="ITA",
        doc_number=PII_DOC_NUMBER,
        birth=PII_BIRTH_YYMMDD,
        expiry="330207",
        sex="F",
    )


def load_fixture(name: str) -> dict:
    return json.loads((FIXTURES / name).read_text())


def seed_hub(services: Services) -> str:
    """Portal user plus the three seeded observations; returns patient id."""
    patient = services.hub.register_user(PORTAL_USERNAME, PORTAL_PASSWORD)
    for name in (
        "obs_bundle_pcr_negative.json",
        "obs_flat_antigen_negative.json",
        "obs_bundle_vaccination_dose2.json",
    ):
        services.hub.add_observation(patient, load_fixture(name))
    return patient


def make_services(tmp_path: Path, clock=time.time) -> Services:
    policy_file = tmp_path / "policy.rules"
    policy_file.write_text(POLICY_TEXT)
    config = Config(
        data_dir=tmp_path / "server-data",
        policy_file=policy_file,
        wallet_dir=tmp_path / "wallets",
        batch_max_age_s=3600.0,  # tests control sealing explicitly
    )
    services = build_services(config, clock=clock)
    services.authority.add(PII_DOC_NUMBER, AuthorityStatus.CONFIRMED)
    seed_hub(services)
    return services


@pytest.fixture()
def services(tmp_path) -> Services:
    return make_services(tmp_path)


@pytest.fixture()
def api(services):
    from fastapi.testclient import TestClient

    with TestClient(create_app(services), raise_server_exceptions=False) as client:
        yield client


class LiveServer:
    """uvicorn on an ephemeral port in a daemon thread."""

    def __init__(self, app):
        self._config = uvicorn.Config(app, host="127.0.0.1", port=0, log_level="warning")
        self.server = uvicorn.Server(self._config)
        self.thread = threading.Thread(target=self.server.run, daemon=True)

    def start(self) -> str:
        self.thread.start()
        deadline = time.time() + 10
        while not self.server.started:
            if time.time() > deadline:
                raise RuntimeError("server failed to start")
            time.sleep(0.01)
        port = self.server.servers[0].sockets[0].getsockname()[1]
        return f"http://127.0.0.1:{port}"

    def stop(self) -> None:
        self.server.should_exit = True
        self.thread.join(timeout=5)


@pytest.fixture()
def live_server(services):
    server = LiveServer(create_app(services))
    url = server.start()
    yield url, services
    server.stop()


def free_port() -> int:
    with socket.socket() as sock:
        sock.bind(("127.0.0.1", 0))
        return sock.getsockname()[1]
