"""Encrypted store semantics and the CLI command surface (live server)."""

from __future__ import annotations

import json
import secrets
import time

import pytest
from click.testing import CliRunner

from healthpass.wallet.cli import main as cli
from healthpass.wallet.store import DecryptFailed, WalletData, WalletStore

from conftest import (
    LiveServer,
    PII_SEEDS,
    PORTAL_PASSWORD,
    PORTAL_USERNAME,
    free_port,
    make_services,
)
from mrz_oracle import build_td3


class TestWalletStore:
    def _data(self):
        return WalletData(
            holder_seed=secrets.token_bytes(32),
            did="did:key:zExample",
            credentials=[{"credential": {"id": "c1"}, "receipt": None, "observation_id": None}],
            tokens={"ehr": {"access_token": "tok"}},
        )

    def test_round_trip_preserves_every_byte(self, tmp_path):
        store = WalletStore(tmp_path / "w.hp")
        data = self._data()
        store.create("pw", data)
        loaded = store.open("pw")
        assert loaded.to_wire() == data.to_wire()

    def test_wrong_passphrase_fails_authenticated_decryption(self, tmp_path):
        store = WalletStore(tmp_path / "w.hp")
        store.create("right", self._data())
        with pytest.raises(DecryptFailed):
            store.open("wrong")

    def test_no_plaintext_on_disk(self, tmp_path):
        store = WalletStore(tmp_path / "w.hp")
        data = self._data()
        data.credentials[0]["credential"]["claims"] = {
            "full_name": {"value": "LUCIA MARTINELLI", "salt": "xxxx"}
        }
        store.create("pw", data)
        blob = (tmp_path / "w.hp").read_bytes()
        for secret in (b"LUCIA MARTINELLI", b"zExample", b"tok", b"c1"):
            assert secret not in blob

    def test_kdf_parameters_documented_in_container(self, tmp_path):
        store = WalletStore(tmp_path / "w.hp")
        store.create("pw", self._data())
        container = json.loads((tmp_path / "w.hp").read_text())
        assert container["kdf"]["name"] == "argon2id"
        assert container["kdf"]["memory_kib"] == 64 * 1024
        assert container["kdf"]["iterations"] == 3

    def test_exclusive_lock(self, tmp_path):
        store = WalletStore(tmp_path / "w.hp")
        store.create("pw", self._data())
        with store:
            second = WalletStore(tmp_path / "w.hp")
            from healthpass.wallet.store import WalletLocked

            with pytest.raises(WalletLocked):
                second.acquire_lock()


@pytest.fixture(scope="module")
def cli_world(tmp_path_factory):
    """Live server + CLI working directory shared by the command tests."""
    root = tmp_path_factory.mktemp("cli")
    services = make_services(root)
    server = LiveServer(__import__("healthpass.orchestrator.server", fromlist=["create_app"]).create_app(services))
    url = server.start()

    mrz = build_td3("MARTINELLI", "LUCIA", "ITA", "X4815162", "850512", "330207")
    (root / "mrz.txt").write_text(mrz[0] + "\n" + mrz[1] + "\n")
    (root / "face.bin").write_bytes(b"identical-image-bytes")
    env = {
        "WALLET_STORE": str(root / "wallet.hp"),
        "WALLET_SERVER": url,
        "WALLET_PASSPHRASE": "cli-pass-1",
    }
    yield {"root": root, "env": env, "services": services, "url": url}
    server.stop()


def run_cli(world, *args, env_extra=None):
    env = dict(world["env"])
    if env_extra:
        env.update(env_extra)
    runner = CliRunner()
    return runner.invoke(cli, list(args), env=env, catch_exceptions=False)


@pytest.mark.usefixtures("cli_world")
class TestCliFlow:
    def test_01_onboard_succeeds(self, cli_world):
        root = cli_world["root"]
        result = run_cli(
            cli_world,
            "onboard",
            "--mrz", str(root / "mrz.txt"),
            "--doc-photo", str(root / "face.bin"),
            "--selfie", str(root / "face.bin"),
        )
        assert result.exit_code == 0, result.output + str(result.stderr)

    def test_02_show_lists_identity_credential(self, cli_world):
        result = run_cli(cli_world, "--json", "show")
        assert result.exit_code == 0
        data = json.loads(result.output)
        assert len(data["credentials"]) == 1
        assert data["credentials"][0]["credential_type"] == "Identity"

    def test_03_wrong_passphrase_exit_3(self, cli_world):
        result = run_cli(cli_world, "show", env_extra={"WALLET_PASSPHRASE": "nope"})
        assert result.exit_code == 3
        assert "DecryptFailed" in result.stderr

    def test_04_link_ehr(self, cli_world):
        result = run_cli(
            cli_world, "link-ehr", "--username", PORTAL_USERNAME, "--password", PORTAL_PASSWORD
        )
        assert result.exit_code == 0

    def test_05_fetch_stores_three_status_credentials(self, cli_world):
        result = run_cli(cli_world, "--json", "fetch")
        assert result.exit_code == 0
        assert json.loads(result.output) == {"added": 3, "received": 3, "errors": []}

    def test_06_fetch_again_dedupes(self, cli_world):
        result = run_cli(cli_world, "--json", "fetch")
        assert result.exit_code == 0
        assert json.loads(result.output)["added"] == 0

    def test_07_present_anonymous_then_verify_online(self, cli_world):
        root = cli_world["root"]
        result = run_cli(
            cli_world,
            "present", "--mode", "anonymous", "--type", "TestResult",
            "--claims", "result,kind",
            "--out", str(root / "payload.txt"),
        )
        assert result.exit_code == 0
        verify = run_cli(cli_world, "--json", "verify", str(root / "payload.txt"))
        assert verify.exit_code == 0
        status = json.loads(verify.output)
        assert status["outcome"] == "accept" and status["ledger_check"] == "passed"
        assert status["claims"] == {"kind": "AntigenTest", "result": "Negative"}

    def test_08_heads_pull_then_verify_local_and_offline(self, cli_world):
        root = cli_world["root"]
        pulled = run_cli(cli_world, "heads-pull", "--out", str(root / "bundle.json"))
        assert pulled.exit_code == 0
        local = run_cli(
            cli_world, "--json", "verify", str(root / "payload.txt"),
            "--heads", str(root / "bundle.json"),
        )
        assert local.exit_code == 0
        assert json.loads(local.output)["ledger_check"] == "passed"
        offline = run_cli(
            cli_world, "--json", "verify", str(root / "payload.txt"),
            "--heads", str(root / "bundle.json"), "--offline",
        )
        assert offline.exit_code == 0
        assert json.loads(offline.output)["ledger_check"] == "skipped"

    def test_09_expired_payload_exit_5(self, cli_world):
        """A dynamic payload older than its TTL rejects with Expired."""
        from healthpass import presentation as qr
        from healthpass import vc as vc_mod
        from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey

        root, services = cli_world["root"], cli_world["services"]
        data = WalletStore(root / "wallet.hp").open("cli-pass-1")
        entry = next(
            c for c in data.credentials if c["credential"]["credential_type"] == "TestResult"
        )
        cred = vc_mod.VerifiableCredential.from_wire(entry["credential"])
        key = Ed25519PrivateKey.from_private_bytes(data.holder_seed)
        stale_now = int(time.time()) - 120
        pres = vc_mod.derive_presentation(
            cred, {"result"}, vc_mod.Mode.DEIDENTIFIED, key, secrets.token_bytes(16), stale_now
        )
        payload = qr.mint_qr(pres, None, services.registry, "dynamic", stale_now)
        (root / "stale.txt").write_text(payload)
        result = run_cli(cli_world, "--json", "verify", str(root / "stale.txt"))
        assert result.exit_code == 5
        assert json.loads(result.output)["reason"] == "Expired"

    def test_10_identified_claims_revealed(self, cli_world):
        root = cli_world["root"]
        result = run_cli(
            cli_world,
            "present", "--mode", "identified", "--type", "Identity",
            "--out", str(root / "id-payload.txt"),
        )
        assert result.exit_code == 0
        verify = run_cli(cli_world, "--json", "verify", str(root / "id-payload.txt"))
        status = json.loads(verify.output)
        assert status["claims"]["full_name"] == "LUCIA MARTINELLI"

    def test_11_anonymous_cannot_reveal_identity_claim(self, cli_world):
        result = run_cli(
            cli_world,
            "present", "--mode", "anonymous", "--type", "Identity", "--claims", "full_name",
        )
        assert result.exit_code == 1
        assert "DisclosurePolicyViolation" in result.stderr

    def test_12_store_file_has_no_claim_plaintext(self, cli_world):
        blob = (cli_world["root"] / "wallet.hp").read_bytes()
        for seed in PII_SEEDS:
            assert seed.encode() not in blob

    def test_13_corrupted_mrz_exit_2(self, cli_world, tmp_path):
        lines = build_td3("SOMEONE", "ELSE", "UTO", "A1234567", "800101", "330101")
        corrupted = lines[1][:13] + ("9" if lines[1][13] != "9" else "8") + lines[1][14:]
        (tmp_path / "bad-mrz.txt").write_text(lines[0] + "\n" + corrupted + "\n")
        (tmp_path / "face.bin").write_bytes(b"x")
        result = run_cli(
            cli_world,
            "onboard",
            "--mrz", str(tmp_path / "bad-mrz.txt"),
            "--doc-photo", str(tmp_path / "face.bin"),
            "--selfie", str(tmp_path / "face.bin"),
            env_extra={"WALLET_STORE": str(tmp_path / "w2.hp")},
        )
        assert result.exit_code == 2
        assert "MrzChecksum" in result.stderr

    def test_14_vetting_rejection_exit_2(self, cli_world, tmp_path):
        lines = build_td3("SOMEONE", "ELSE", "UTO", "A7654321", "800101", "330101")
        (tmp_path / "mrz.txt").write_text(lines[0] + "\n" + lines[1] + "\n")
        (tmp_path / "doc.bin").write_bytes(b"doc-face")
        (tmp_path / "selfie.bin").write_bytes(b"other-face")
        result = run_cli(
            cli_world,
            "onboard",
            "--mrz", str(tmp_path / "mrz.txt"),
            "--doc-photo", str(tmp_path / "doc.bin"),
            "--selfie", str(tmp_path / "selfie.bin"),
            env_extra={"WALLET_STORE": str(tmp_path / "w3.hp")},
        )
        assert result.exit_code == 2
        assert "rejected" in result.stderr

    def test_15_server_down_exit_4(self, cli_world, tmp_path):
        dead = f"http://127.0.0.1:{free_port()}"
        result = run_cli(
            cli_world, "--json", "fetch", env_extra={"WALLET_SERVER": dead}
        )
        assert result.exit_code == 4
        # store unchanged: still 4 credentials
        data = WalletStore(cli_world["root"] / "wallet.hp").open("cli-pass-1")
        assert len(data.credentials) == 4
