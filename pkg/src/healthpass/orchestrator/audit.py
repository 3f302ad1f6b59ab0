"""Append-only audit log with text search and aggregation reports.

Events land in newline-delimited JSON segment files; an in-memory
inverted index over event types and attribute values is rebuilt by
replaying the segments on startup. The schema gate rejects any event
carrying a denied (identity-claim) field name anywhere in its
attributes, so the stored bytes stay PII-free by construction. Actors
appear only as pseudonyms.
"""

from __future__ import annotations

import json
import threading
import time
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable, Dict, List, Optional, Set

from ..vc import IDENTITY_CLAIMS

DEFAULT_SEGMENT_SIZE = 1000


class PiiRejected(ValueError):
    """Event carried a denied field name."""


@dataclass(frozen=True)
class AuditEvent:
    seq: int
    timestamp: int
    actor: str  # pseudonym, never a direct identifier
    event_type: str
    attributes: Dict[str, str]
    ledger_ref: Optional[int] = None

    def to_wire(self) -> dict:
        return {
            "seq": self.seq,
            "timestamp": self.timestamp,
            "actor": self.actor,
            "event_type": self.event_type,
            "attributes": self.attributes,
            "ledger_ref": self.ledger_ref,
        }

    @classmethod
    def from_wire(cls, data: dict) -> "AuditEvent":
        return cls(
            seq=int(data["seq"]),
            timestamp=int(data["timestamp"]),
            actor=data["actor"],
            event_type=data["event_type"],
            attributes=dict(data["attributes"]),
            ledger_ref=data.get("ledger_ref"),
        )


def _collect_field_names(value: object, out: Set[str]) -> None:
    if isinstance(value, dict):
        for k, v in value.items():
            out.add(str(k))
            _collect_field_names(v, out)
    elif isinstance(value, (list, tuple)):
        for v in value:
            _collect_field_names(v, out)


class AuditLog:
    def __init__(
        self,
        directory: Optional[Path] = None,
        denied_fields: frozenset[str] = IDENTITY_CLAIMS,
        segment_size: int = DEFAULT_SEGMENT_SIZE,
        clock: Callable[[], float] = time.time,
    ):
        self._dir = Path(directory) if directory else None
        self.denied_fields = denied_fields
        self.segment_size = segment_size
        self._clock = clock
        self._lock = threading.Lock()
        self._events: List[AuditEvent] = []
        self._index: Dict[str, List[int]] = {}
        if self._dir is not None:
            self._dir.mkdir(parents=True, exist_ok=True)
            self._replay()

    def record(
        self,
        event_type: str,
        actor: str,
        attributes: Optional[Dict[str, str]] = None,
        ledger_ref: Optional[int] = None,
    ) -> int:
        """Append an event; returns its sequence number.

        Raises PiiRejected if any attribute field name (at any depth) is
        in the denied set.
        """
        attributes = attributes or {}
        names: Set[str] = set()
        _collect_field_names(attributes, names)
        denied = names & self.denied_fields
        if denied:
            raise PiiRejected(f"denied field names in audit event: {sorted(denied)}")
        with self._lock:
            event = AuditEvent(
                seq=len(self._events),
                timestamp=int(self._clock()),
                actor=actor,
                event_type=event_type,
                attributes=dict(attributes),
                ledger_ref=ledger_ref,
            )
            self._events.append(event)
            self._index_event(event)
            self._persist(event)
            return event.seq

    def search(
        self,
        query: str,
        t_from: Optional[int] = None,
        t_to: Optional[int] = None,
    ) -> List[AuditEvent]:
        """Substring match over event types and attribute values, newest
        first, optionally bounded to a time range."""
        query = query.lower()
        with self._lock:
            seqs: Set[int] = set()
            for token, where in self._index.items():
                if query in token:
                    seqs.update(where)
            hits = [self._events[s] for s in seqs]
        hits = [
            e
            for e in hits
            if (t_from is None or e.timestamp >= t_from)
            and (t_to is None or e.timestamp <= t_to)
        ]
        return sorted(hits, key=lambda e: e.seq, reverse=True)

    def report(
        self, t_from: Optional[int] = None, t_to: Optional[int] = None
    ) -> Dict[str, Dict[str, int]]:
        """Aggregated counts grouped by UTC day, then event type."""
        out: Dict[str, Dict[str, int]] = {}
        with self._lock:
            events = list(self._events)
        for e in events:
            if (t_from is not None and e.timestamp < t_from) or (
                t_to is not None and e.timestamp > t_to
            ):
                continue
            day = datetime.fromtimestamp(e.timestamp, tz=timezone.utc).date().isoformat()
            out.setdefault(day, {})
            out[day][e.event_type] = out[day].get(e.event_type, 0) + 1
        return out

    def events(self) -> List[AuditEvent]:
        with self._lock:
            return list(self._events)

    def __len__(self) -> int:
        with self._lock:
            return len(self._events)

    # -- internals -------------------------------------------------------------

    def _index_event(self, event: AuditEvent) -> None:
        tokens = {event.event_type.lower()}
        for value in event.attributes.values():
            tokens.add(str(value).lower())
        for token in tokens:
            self._index.setdefault(token, []).append(event.seq)

    def _segment_path(self, seq: int) -> Path:
        return self._dir / f"segment-{seq // self.segment_size:06d}.ndjson"  # type: ignore[operator]

    def _persist(self, event: AuditEvent) -> None:
        if self._dir is None:
            return
        with open(self._segment_path(event.seq), "a", encoding="utf-8") as fh:
            fh.write(json.dumps(event.to_wire(), sort_keys=True) + "\n")

    def _replay(self) -> None:
        for segment in sorted(self._dir.glob("segment-*.ndjson")):  # type: ignore[union-attr]
            for line in segment.read_text().splitlines():
                if not line.strip():
                    continue
                event = AuditEvent.from_wire(json.loads(line))
                self._events.append(event)
                self._index_event(event)
