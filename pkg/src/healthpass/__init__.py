"""Privacy-preserving health-status credentials, end to end.

Issue tamper-evident, expiring, selectively disclosable credentials
bound to a vetted identity; anchor proofs on a hash-calendar ledger;
present and verify them person-to-person in well under a second - with
no personally identifiable information persisted server-side.
"""

from .vc import (
    ClaimSet,
    CredentialType,
    Did,
    Mode,
    Presentation,
    VerifiableCredential,
    derive_did,
    derive_presentation,
    issue_credential,
    verify_credential,
    verify_presentation,
)

__version__ = "0.1.0"

__all__ = [
    "ClaimSet",
    "CredentialType",
    "Did",
    "Mode",
    "Presentation",
    "VerifiableCredential",
    "derive_did",
    "derive_presentation",
    "issue_credential",
    "verify_credential",
    "verify_presentation",
    "__version__",
]
