"""Server configuration: one INI file plus environment overrides.

Environment variables of the form HEALTHPASS_<SECTION>_<KEY> override
file values, e.g. HEALTHPASS_SERVER_PORT=9000 or
HEALTHPASS_ONBOARDING_FACE_THRESHOLD=0.9.
"""

from __future__ import annotations

import configparser
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional

ENV_PREFIX = "HEALTHPASS"


@dataclass
class Config:
    # [server]
    host: str = "127.0.0.1"
    port: int = 8000
    # [paths]
    data_dir: Path = Path("./healthpass-data")
    policy_file: Optional[Path] = None
    authority_file: Optional[Path] = None
    wallet_dir: Optional[Path] = None
    # [ttl] seconds
    challenge_ttl: int = 120
    auth_code_ttl: int = 60
    access_token_ttl: int = 3600
    qr_dynamic_ttl: int = 60
    identity_credential_ttl: int = 365 * 24 * 3600
    status_credential_ttl: int = 30 * 24 * 3600
    # [onboarding]
    face_threshold: float = 0.85
    # [ledger]
    batch_size: int = 64
    batch_max_age_s: float = 1.0
    # [fhir]
    org_name: str = "nho-default"
    org_region: str = "region-1"
    pseudonym_epoch_days: int = 30
    oauth_client_id: str = "healthpass-wallet"

    @property
    def secrets_path(self) -> Path:
        return self.data_dir / "secrets.json"


_SECTION_FIELDS = {
    "server": {"host": str, "port": int},
    "paths": {
        "data_dir": Path,
        "policy_file": Path,
        "authority_file": Path,
        "wallet_dir": Path,
    },
    "ttl": {
        "challenge_ttl": int,
        "auth_code_ttl": int,
        "access_token_ttl": int,
        "qr_dynamic_ttl": int,
        "identity_credential_ttl": int,
        "status_credential_ttl": int,
    },
    "onboarding": {"face_threshold": float},
    "ledger": {"batch_size": int, "batch_max_age_s": float},
    "fhir": {
        "org_name": str,
        "org_region": str,
        "pseudonym_epoch_days": int,
        "oauth_client_id": str,
    },
}


def load_config(
    path: Optional[Path] = None, env: Optional[Mapping[str, str]] = None
) -> Config:
    env = os.environ if env is None else env
    config = Config()
    parser = configparser.ConfigParser()
    if path is not None:
        parser.read(path)
    for section, fields in _SECTION_FIELDS.items():
        for name, caster in fields.items():
            value: Optional[str] = None
            if parser.has_option(section, name):
                value = parser.get(section, name)
            env_key = f"{ENV_PREFIX}_{section.upper()}_{name.upper()}"
            if env_key in env:
                value = env[env_key]
            if value is not None:
                setattr(config, name, caster(value))
    return config
