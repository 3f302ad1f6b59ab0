"""Access-control policy evaluation over verified statuses.

Rules live in a small declarative text file, one per line, evaluated
top-down with first-match-wins; no match means deny(DefaultDeny).

    # action  match fields                              constraint / reason
    allow type=PcrTest result=Negative within=72h
    allow type=Vaccination result=Administered
    deny  type=AntigenTest result=Positive reason=PositiveResult
    allow type=AntigenTest result=Negative verifier=venue within=24h

A rule matches on type/result (and verifier when present). A matching
allow rule with a ``within`` bound denies with StaleResult when the
result is older than the bound.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional

DEFAULT_DENY = "DefaultDeny"
STALE_RESULT = "StaleResult"
RULE_DENY = "RuleDeny"


class PolicyParseError(ValueError):
    """A policy line did not parse."""


@dataclass(frozen=True)
class PolicyRule:
    action: str  # "allow" | "deny"
    credential_type: str
    result: str
    verifier: Optional[str] = None
    within_hours: Optional[float] = None
    reason: Optional[str] = None

    def matches(self, verifier: Optional[str], credential_type: str, result: str) -> bool:
        if self.credential_type != "*" and self.credential_type != credential_type:
            return False
        if self.result != "*" and self.result != result:
            return False
        if self.verifier is not None and self.verifier != verifier:
            return False
        return True


@dataclass(frozen=True)
class PolicyDecision:
    allow: bool
    reason: Optional[str] = None

    def __bool__(self) -> bool:
        return self.allow


def parse_policy(text: str) -> List[PolicyRule]:
    rules: List[PolicyRule] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        action = parts[0].lower()
        if action not in ("allow", "deny"):
            raise PolicyParseError(f"line {lineno}: action must be allow|deny")
        fields = {}
        for part in parts[1:]:
            if "=" not in part:
                raise PolicyParseError(f"line {lineno}: expected key=value, got {part!r}")
            key, value = part.split("=", 1)
            fields[key] = value
        if "type" not in fields or "result" not in fields:
            raise PolicyParseError(f"line {lineno}: rules need type= and result=")
        within = None
        if "within" in fields:
            spec = fields["within"]
            if not spec.endswith("h"):
                raise PolicyParseError(f"line {lineno}: within must be like 72h")
            within = float(spec[:-1])
        rules.append(
            PolicyRule(
                action=action,
                credential_type=fields["type"],
                result=fields["result"],
                verifier=fields.get("verifier"),
                within_hours=within,
                reason=fields.get("reason"),
            )
        )
    return rules


class PolicyEngine:
    def __init__(self, rules: List[PolicyRule]):
        self.rules = rules

    @classmethod
    def from_file(cls, path: Path) -> "PolicyEngine":
        return cls(parse_policy(Path(path).read_text()))

    def evaluate(
        self,
        verifier: Optional[str],
        credential_type: str,
        result: str,
        age_hours: float,
    ) -> PolicyDecision:
        """First matching rule decides; an allow rule with a freshness
        bound downgrades to deny(StaleResult) when the result is too old."""
        for rule in self.rules:
            if not rule.matches(verifier, credential_type, result):
                continue
            if rule.action == "deny":
                return PolicyDecision(False, rule.reason or RULE_DENY)
            if rule.within_hours is not None and age_hours > rule.within_hours:
                return PolicyDecision(False, STALE_RESULT)
            return PolicyDecision(True)
        return PolicyDecision(False, DEFAULT_DENY)
