"""Command-line holder and verifier client.

Exit codes:

    0  success / verification accepted
    1  unexpected error (including a locked wallet)
    2  rejected input: vetting failure, MRZ checksum, usage errors
    3  wallet decryption failed (wrong passphrase)
    4  server or hub unreachable
    5  verification rejected

Every command takes --json for machine-readable output. The passphrase
comes from --passphrase or WALLET_PASSPHRASE; commands never prompt when
it is set, so scripted runs need no manual steps.
"""

from __future__ import annotations

import json
import sys
import time
from pathlib import Path
from typing import Optional

import click

from .. import vc as vc_mod
from .client import (
    ApiError,
    NetworkError,
    VettingRejected,
    WalletClient,
    load_bundle,
    verify_local,
)
from .store import DecryptFailed, WalletLocked, WalletMissing, WalletStore

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_REJECTED = 2
EXIT_DECRYPT = 3
EXIT_NETWORK = 4
EXIT_VERIFY_REJECT = 5

_REJECT_API_ERRORS = {"VettingRejected", "MrzChecksum", "MrzFormat", "MrzInvalid"}


class Ctx:
    def __init__(self, store: Path, server: str, passphrase: Optional[str], as_json: bool):
        self.store_path = store
        self.server = server
        self._passphrase = passphrase
        self.as_json = as_json

    @property
    def passphrase(self) -> str:
        if self._passphrase is None:
            self._passphrase = click.prompt("Wallet passphrase", hide_input=True)
        return self._passphrase

    def store(self) -> WalletStore:
        return WalletStore(self.store_path)

    def client(self) -> WalletClient:
        return WalletClient(self.server)

    def emit(self, data: dict, human: str) -> None:
        if self.as_json:
            click.echo(json.dumps(data, indent=2, sort_keys=True))
        else:
            click.echo(human)


def _run(ctx: Ctx, fn):
    """Run a command body, mapping domain failures to the exit-code table."""
    try:
        return fn()
    except VettingRejected as exc:
        click.echo(f"rejected: {exc}", err=True)
        sys.exit(EXIT_REJECTED)
    except DecryptFailed:
        click.echo("DecryptFailed: wrong passphrase or corrupted wallet", err=True)
        sys.exit(EXIT_DECRYPT)
    except WalletMissing as exc:
        click.echo(f"no wallet at {exc}", err=True)
        sys.exit(EXIT_ERROR)
    except NetworkError as exc:
        click.echo(f"network error: {exc}", err=True)
        sys.exit(EXIT_NETWORK)
    except WalletLocked as exc:
        click.echo(str(exc), err=True)
        sys.exit(EXIT_ERROR)
    except ApiError as exc:
        click.echo(f"{exc.error}: {exc.detail}", err=True)
        sys.exit(EXIT_REJECTED if exc.error in _REJECT_API_ERRORS else EXIT_ERROR)
    except (SystemExit, click.ClickException, KeyboardInterrupt):
        raise
    except Exception as exc:  # local domain errors: wallet, derivation, files
        click.echo(f"{type(exc).__name__}: {exc}", err=True)
        sys.exit(EXIT_ERROR)


@click.group()
@click.option(
    "--store",
    envvar="WALLET_STORE",
    type=click.Path(path_type=Path),
    default=Path("wallet.hp"),
    show_default=True,
    help="Wallet container file.",
)
@click.option(
    "--server",
    envvar="WALLET_SERVER",
    default="http://127.0.0.1:8000",
    show_default=True,
    help="Server base URL.",
)
@click.option("--passphrase", envvar="WALLET_PASSPHRASE", default=None, help="Wallet passphrase.")
@click.option("--json", "as_json", is_flag=True, help="Machine-readable output.")
@click.pass_context
def main(ctx: click.Context, store: Path, server: str, passphrase: Optional[str], as_json: bool):
    """Holder and verifier wallet for health-status credentials."""
    ctx.obj = Ctx(store, server, passphrase, as_json)


@main.command()
@click.option("--mrz", "mrz_file", type=click.Path(exists=True, path_type=Path), required=True)
@click.option("--doc-photo", type=click.Path(exists=True, path_type=Path), required=True)
@click.option("--selfie", type=click.Path(exists=True, path_type=Path), required=True)
@click.option("--geolocation", default=None, help="Optional consent-context geolocation.")
@click.pass_obj
def onboard(ctx: Ctx, mrz_file: Path, doc_photo: Path, selfie: Path, geolocation: Optional[str]):
    """Run identity vetting and store the identity credential."""

    def body():
        lines = [l.strip() for l in mrz_file.read_text().splitlines() if l.strip()]
        if len(lines) != 2:
            click.echo("MRZ file must hold exactly two lines", err=True)
            sys.exit(EXIT_REJECTED)
        with ctx.store() as store:
            result = ctx.client().onboard(
                store,
                ctx.passphrase,
                (lines[0], lines[1]),
                doc_photo.read_bytes(),
                selfie.read_bytes(),
                geolocation=geolocation,
                device="cli",
            )
        ctx.emit(
            {"did": result["credential"]["subject"], "credential_id": result["credential"]["id"]},
            f"onboarded; identity credential {result['credential']['id']} stored",
        )

    _run(ctx, body)


@main.command("link-ehr")
@click.option("--username", required=True)
@click.option("--password", required=True, envvar="WALLET_EHR_PASSWORD")
@click.pass_obj
def link_ehr(ctx: Ctx, username: str, password: str):
    """Log in to the EHR portal and store the access token."""

    def body():
        with ctx.store() as store:
            result = ctx.client().link_ehr(store, ctx.passphrase, username, password)
        ctx.emit(result, f"linked EHR patient {result['patient']}")

    _run(ctx, body)


@main.command()
@click.option("--since", type=int, default=None, help="Only results newer than this Unix time.")
@click.pass_obj
def fetch(ctx: Ctx, since: Optional[int]):
    """Fetch observations and store the issued status credentials."""

    def body():
        with ctx.store() as store:
            result = ctx.client().fetch_results(store, ctx.passphrase, since)
        ctx.emit(
            result,
            f"received {result['received']} credentials, stored {result['added']} new",
        )

    _run(ctx, body)


@main.command()
@click.pass_obj
def show(ctx: Ctx):
    """List stored credentials."""

    def body():
        data = ctx.store().open(ctx.passphrase)
        items = []
        for entry in data.credentials:
            cred = entry["credential"]
            items.append(
                {
                    "id": cred["id"],
                    "credential_type": cred["credential_type"],
                    "expires_at": cred["expires_at"],
                    "claims": {
                        name: claim["value"] for name, claim in cred.get("claims", {}).items()
                    },
                }
            )
        if ctx.as_json:
            click.echo(json.dumps({"did": data.did, "credentials": items}, indent=2, sort_keys=True))
        else:
            click.echo(f"did: {data.did}")
            for item in items:
                click.echo(
                    f"  [{item['credential_type']}] {item['id']} "
                    f"expires {time.strftime('%Y-%m-%d', time.gmtime(item['expires_at']))} "
                    f"claims: {', '.join(item['claims']) or '(none)'}"
                )

    _run(ctx, body)


@main.command()
@click.option(
    "--mode",
    type=click.Choice(["identified", "anonymous"]),
    default="anonymous",
    show_default=True,
)
@click.option("--claims", default=None, help="Comma-separated claim names to reveal.")
@click.option("--type", "ctype", default=None, help="Credential type to present.")
@click.option("--id", "cred_id", default=None, help="Credential id to present.")
@click.option("--static", "static_", is_flag=True, help="Static payload (TTL = credential expiry).")
@click.option("--out", type=click.Path(path_type=Path), default=None, help="Write payload to file.")
@click.pass_obj
def present(
    ctx: Ctx,
    mode: str,
    claims: Optional[str],
    ctype: Optional[str],
    cred_id: Optional[str],
    static_: bool,
    out: Optional[Path],
):
    """Mint a QR payload for the chosen credential."""

    def body():
        pres_mode = vc_mod.Mode.IDENTIFIED if mode == "identified" else vc_mod.Mode.DEIDENTIFIED
        reveal = [c.strip() for c in claims.split(",") if c.strip()] if claims else None
        with ctx.store() as store:
            result = ctx.client().mint_presentation(
                store,
                ctx.passphrase,
                pres_mode,
                reveal=reveal,
                credential_type=ctype,
                credential_id=cred_id,
                kind="static" if static_ else "dynamic",
            )
        if out is not None:
            out.write_text(result["payload"] + "\n")
        if ctx.as_json:
            click.echo(json.dumps(result, indent=2, sort_keys=True))
        elif out is None:
            click.echo(result["payload"])
        else:
            click.echo(f"payload written to {out} (expires {result['exp']})")

    _run(ctx, body)


@main.command()
@click.argument("payload_file", type=click.Path(exists=True, path_type=Path))
@click.option(
    "--heads",
    "bundle_file",
    type=click.Path(exists=True, path_type=Path),
    default=None,
    help="Verifier bundle (from heads-pull) for local verification.",
)
@click.option("--offline", is_flag=True, help="Skip the ledger check (flagged, not failed).")
@click.pass_obj
def verify(ctx: Ctx, payload_file: Path, bundle_file: Optional[Path], offline: bool):
    """Verify a QR payload; exits 0 on accept, 5 on reject."""

    def body():
        payload = payload_file.read_text().strip()
        if bundle_file is not None:
            status = verify_local(payload, load_bundle(bundle_file), offline=offline)
        elif offline:
            default = ctx.store_path.parent / "verifier-bundle.json"
            if not default.exists():
                click.echo("offline verification needs a bundle; run heads-pull first", err=True)
                sys.exit(EXIT_ERROR)
            status = verify_local(payload, load_bundle(default), offline=True)
        else:
            status = ctx.client().verify_online(payload)
        if ctx.as_json:
            click.echo(json.dumps(status, indent=2, sort_keys=True))
        else:
            verdict = "ACCEPT" if status["outcome"] == "accept" else f"REJECT ({status['reason']})"
            click.echo(f"{verdict} ledger_check={status['ledger_check']}")
            for name, value in (status.get("claims") or {}).items():
                click.echo(f"  {name}: {value}")
        if status["outcome"] != "accept":
            sys.exit(EXIT_VERIFY_REJECT)

    _run(ctx, body)


@main.command("heads-pull")
@click.option("--out", type=click.Path(path_type=Path), default=None, help="Bundle output path.")
@click.pass_obj
def heads_pull(ctx: Ctx, out: Optional[Path]):
    """Pull the verifier bundle (MAC keys, issuer keys, ledger heads)."""

    def body():
        bundle = ctx.client().pull_verifier_bundle()
        target = out or ctx.store_path.parent / "verifier-bundle.json"
        target.parent.mkdir(parents=True, exist_ok=True)
        target.write_text(json.dumps(bundle, indent=1, sort_keys=True))
        ctx.emit(
            {"path": str(target), "heads": len(bundle.get("heads", []))},
            f"verifier bundle with {len(bundle.get('heads', []))} heads written to {target}",
        )

    _run(ctx, body)


if __name__ == "__main__":
    main()
