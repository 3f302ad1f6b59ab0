"""Append-only immutability layer: Merkle batches chained into a hash calendar.

Event digests queue into the current batch; sealing a batch builds a
Merkle tree over the batch's leaves and extends the calendar chain:

    leaf    = SHA-256(0x00 || digest)
    node    = SHA-256(0x01 || left || right)
    head_n  = SHA-256(head_{n-1} || batch_root_n),  head_0 = SHA-256(genesis tag)

Leaf/interior domain tags close the classic second-preimage gap (a
2-leaf tree cannot collide with a 1-leaf tree over concatenated
digests); an unpaired node is promoted to the next level rather than
duplicated, avoiding duplicate-leaf malleability.

The head chain is the replication surface: publishing the heads (e.g.
as newline-delimited hex) lets anyone verify inclusion proofs offline,
and later activity never invalidates earlier proofs. Only digests are
ever stored; raw event content never reaches this layer.

Persistence is a single append-only log of fixed-width records plus a
derived head-chain file; recovery replays the log, recomputes every
batch root, and re-derives the heads.
"""

from __future__ import annotations

import struct
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Tuple

from .canonical import WIRE_VERSION, b64u, b64u_decode, sha256

LEAF_TAG = b"\x00"
NODE_TAG = b"\x01"
GENESIS_TAG = b"healthpass-calendar-genesis-v1"

PATH_MISMATCH = "PathMismatch"
UNKNOWN_BATCH = "UnknownBatch"
CHAIN_MISMATCH = "ChainMismatch"

# On-disk record: kind(1) + seq(8) + payload(32) + a(8) + b(8), big-endian.
_RECORD = struct.Struct(">B Q 32s Q Q")
_KIND_ENTRY = 0
_KIND_SEAL = 1


class InvalidDigest(ValueError):
    """Raised when an appended digest is not exactly 32 bytes."""


class EmptyBatch(RuntimeError):
    """Raised when sealing with no pending entries."""


class IncompleteEvidence(ValueError):
    """Raised when a consistency check lacks intermediate roots."""


class LedgerCorrupt(RuntimeError):
    """Raised when log replay disagrees with the recorded seal roots."""


def leaf_hash(digest: bytes) -> bytes:
    return sha256(LEAF_TAG + digest)


def node_hash(left: bytes, right: bytes) -> bytes:
    return sha256(NODE_TAG + left + right)


@dataclass(frozen=True)
class ProofStep:
    side: str  # side the sibling sits on: "left" | "right"
    sibling: bytes


@dataclass(frozen=True)
class LedgerEntry:
    seq: int
    digest: bytes
    batch_id: int
    leaf_index: int


@dataclass(frozen=True)
class CalendarHead:
    batch_id: int
    head: bytes


@dataclass(frozen=True)
class InclusionProof:
    leaf_digest: bytes
    leaf_index: int
    path: Tuple[ProofStep, ...]
    batch_root: bytes
    batch_id: int
    head_at_issue: bytes

    def to_wire(self) -> dict:
        return {
            "v": WIRE_VERSION,
            "leaf": b64u(self.leaf_digest),
            "leaf_index": self.leaf_index,
            "path": [{"side": s.side, "hash": b64u(s.sibling)} for s in self.path],
            "root": b64u(self.batch_root),
            "batch": self.batch_id,
            "head": b64u(self.head_at_issue),
        }

    @classmethod
    def from_wire(cls, data: dict) -> "InclusionProof":
        return cls(
            leaf_digest=b64u_decode(data["leaf"]),
            leaf_index=int(data["leaf_index"]),
            path=tuple(
                ProofStep(side=p["side"], sibling=b64u_decode(p["hash"]))
                for p in data["path"]
            ),
            batch_root=b64u_decode(data["root"]),
            batch_id=int(data["batch"]),
            head_at_issue=b64u_decode(data["head"]),
        )


@dataclass(frozen=True)
class AppendReceipt:
    """Handle returned by append; resolves to a proof once the batch seals."""

    seq: int


@dataclass(frozen=True)
class LedgerCheck:
    accepted: bool
    reason: Optional[str] = None

    def __bool__(self) -> bool:
        return self.accepted


def build_merkle(digests: Sequence[bytes]) -> Tuple[bytes, List[Tuple[ProofStep, ...]]]:
    """Build the batch tree; returns (root, per-leaf sibling path).

    Unpaired nodes are promoted to the next level unchanged.
    """
    if not digests:
        raise EmptyBatch("cannot build a tree over zero leaves")
    level = [leaf_hash(d) for d in digests]
    # groups[i] = original leaf indexes under node i of the current level
    groups: List[List[int]] = [[i] for i in range(len(level))]
    paths: List[List[ProofStep]] = [[] for _ in level]
    while len(level) > 1:
        next_level: List[bytes] = []
        next_groups: List[List[int]] = []
        for i in range(0, len(level) - 1, 2):
            left, right = level[i], level[i + 1]
            for leaf in groups[i]:
                paths[leaf].append(ProofStep("right", right))
            for leaf in groups[i + 1]:
                paths[leaf].append(ProofStep("left", left))
            next_level.append(node_hash(left, right))
            next_groups.append(groups[i] + groups[i + 1])
        if len(level) % 2 == 1:
            next_level.append(level[-1])
            next_groups.append(groups[-1])
        level, groups = next_level, next_groups
    return level[0], [tuple(p) for p in paths]


def fold_path(leaf_digest: bytes, path: Sequence[ProofStep]) -> bytes:
    """Fold a leaf digest through its sibling path to a candidate root."""
    node = leaf_hash(leaf_digest)
    for step in path:
        if step.side == "left":
            node = node_hash(step.sibling, node)
        elif step.side == "right":
            node = node_hash(node, step.sibling)
        else:
            raise ValueError(f"invalid path side {step.side!r}")
    return node


def chain_head(previous: bytes, batch_root: bytes) -> bytes:
    return sha256(previous + batch_root)


def genesis_head() -> CalendarHead:
    return CalendarHead(batch_id=0, head=sha256(GENESIS_TAG))


def verify_inclusion(
    proof: InclusionProof, known_heads: Sequence[CalendarHead]
) -> LedgerCheck:
    """Accept iff the path folds to the batch root and that root is
    committed under the supplied head history via the chain recurrence."""
    try:
        folded = fold_path(proof.leaf_digest, proof.path)
    except ValueError:
        return LedgerCheck(False, PATH_MISMATCH)
    if folded != proof.batch_root:
        return LedgerCheck(False, PATH_MISMATCH)
    heads = {h.batch_id: h.head for h in known_heads}
    prev = heads.get(proof.batch_id - 1)
    at = heads.get(proof.batch_id)
    if proof.batch_id < 1 or at is None or prev is None:
        return LedgerCheck(False, UNKNOWN_BATCH)
    if chain_head(prev, proof.batch_root) != at:
        return LedgerCheck(False, CHAIN_MISMATCH)
    return LedgerCheck(True)


def verify_consistency(
    old_head: CalendarHead, new_head: CalendarHead, roots: Sequence[bytes]
) -> LedgerCheck:
    """Replay the chain recurrence from the old head over the supplied
    batch roots; accept iff it lands exactly on the new head."""
    if old_head.batch_id > new_head.batch_id:
        raise ValueError("old head is newer than new head")
    expected = new_head.batch_id - old_head.batch_id
    if len(roots) != expected:
        raise IncompleteEvidence(
            f"need {expected} intermediate roots, got {len(roots)}"
        )
    head = old_head.head
    for root in roots:
        head = chain_head(head, root)
    if head != new_head.head:
        return LedgerCheck(False, CHAIN_MISMATCH)
    return LedgerCheck(True)


@dataclass
class _SealedBatch:
    batch_id: int
    digests: List[bytes]
    root: bytes
    paths: List[Tuple[ProofStep, ...]]
    first_seq: int
    head: bytes


class Ledger:
    """Single-writer append path, concurrent readers of sealed state.

    Batches seal when they reach ``batch_size`` entries or exceed
    ``max_batch_age`` seconds, whichever comes first; ``seal_batch``
    forces the point. With ``directory`` set, every append and seal is
    written through to an append-only log and the head chain re-derived
    on restart.
    """

    def __init__(
        self,
        directory: Optional[Path] = None,
        batch_size: int = 64,
        max_batch_age: float = 1.0,
        clock: Callable[[], float] = time.time,
    ):
        if batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        self._lock = threading.RLock()
        self._clock = clock
        self.batch_size = batch_size
        self.max_batch_age = max_batch_age
        self._entries: List[LedgerEntry] = []
        self._pending: List[Tuple[int, bytes]] = []  # (seq, digest)
        self._pending_since: Optional[float] = None
        self._batches: List[_SealedBatch] = []
        self._heads: List[CalendarHead] = [genesis_head()]
        self._log = None
        self._dir = Path(directory) if directory else None
        if self._dir is not None:
            self._dir.mkdir(parents=True, exist_ok=True)
            self._replay()
            self._log = open(self._dir / "entries.log", "ab")

    # -- write path -----------------------------------------------------------

    def append(self, digest: bytes) -> AppendReceipt:
        """Queue a 32-byte digest; sequence numbers are assigned atomically."""
        if not isinstance(digest, (bytes, bytearray)) or len(digest) != 32:
            raise InvalidDigest("ledger digests must be exactly 32 bytes")
        digest = bytes(digest)
        with self._lock:
            self._maybe_seal_by_age()
            seq = self._next_seq()
            self._pending.append((seq, digest))
            if self._pending_since is None:
                self._pending_since = self._clock()
            self._write_record(_KIND_ENTRY, seq, digest, 0, 0)
            if len(self._pending) >= self.batch_size:
                self._seal_locked()
            return AppendReceipt(seq=seq)

    def _next_seq(self) -> int:
        return len(self._entries) + len(self._pending)

    def seal_batch(self) -> Tuple[int, bytes, CalendarHead, List[InclusionProof]]:
        """Seal the pending batch; returns (batch_id, root, head, proofs)."""
        with self._lock:
            if not self._pending:
                raise EmptyBatch("no pending entries to seal")
            batch = self._seal_locked()
            proofs = [self.proof(batch.first_seq + i) for i in range(len(batch.digests))]
            return batch.batch_id, batch.root, self._heads[-1], proofs  # type: ignore[return-value]

    def flush(self) -> None:
        """Seal the pending batch if any entries are queued."""
        with self._lock:
            if self._pending:
                self._seal_locked()

    def maybe_seal_by_age(self) -> None:
        with self._lock:
            self._maybe_seal_by_age()

    def _maybe_seal_by_age(self) -> None:
        if (
            self._pending
            and self._pending_since is not None
            and self._clock() - self._pending_since >= self.max_batch_age
        ):
            self._seal_locked()

    def _seal_locked(self) -> _SealedBatch:
        seqs = [s for s, _ in self._pending]
        digests = [d for _, d in self._pending]
        root, paths = build_merkle(digests)
        batch_id = len(self._batches) + 1
        head = CalendarHead(batch_id, chain_head(self._heads[-1].head, root))
        batch = _SealedBatch(
            batch_id=batch_id,
            digests=digests,
            root=root,
            paths=paths,
            first_seq=seqs[0],
            head=head.head,
        )
        for i, (seq, digest) in enumerate(self._pending):
            self._entries.append(
                LedgerEntry(seq=seq, digest=digest, batch_id=batch_id, leaf_index=i)
            )
        self._batches.append(batch)
        self._heads.append(head)
        self._pending = []
        self._pending_since = None
        self._write_record(_KIND_SEAL, seqs[0], root, batch_id, len(digests))
        self._write_heads_file()
        return batch

    # -- read path ------------------------------------------------------------

    def proof(self, seq: int) -> Optional[InclusionProof]:
        """Inclusion proof for a sealed entry; None while still pending."""
        with self._lock:
            if seq < 0 or seq >= len(self._entries):
                return None
            entry = self._entries[seq]
            batch = self._batches[entry.batch_id - 1]
        return InclusionProof(
            leaf_digest=entry.digest,
            leaf_index=entry.leaf_index,
            path=batch.paths[entry.leaf_index],
            batch_root=batch.root,
            batch_id=batch.batch_id,
            head_at_issue=batch.head,
        )

    def entry(self, seq: int) -> Optional[LedgerEntry]:
        with self._lock:
            if 0 <= seq < len(self._entries):
                return self._entries[seq]
            return None

    def heads(self) -> List[CalendarHead]:
        with self._lock:
            return list(self._heads)

    def batch_roots(self) -> List[bytes]:
        with self._lock:
            return [b.root for b in self._batches]

    def head(self) -> CalendarHead:
        with self._lock:
            return self._heads[-1]

    def sealed_count(self) -> int:
        with self._lock:
            return len(self._entries)

    def pending_count(self) -> int:
        with self._lock:
            return len(self._pending)

    def export_heads_text(self) -> str:
        """Head chain as newline-delimited hex for out-of-band publication."""
        return "\n".join(h.head.hex() for h in self.heads()) + "\n"

    @staticmethod
    def parse_heads_text(text: str) -> List[CalendarHead]:
        heads = []
        for i, line in enumerate(l for l in text.splitlines() if l.strip()):
            heads.append(CalendarHead(batch_id=i, head=bytes.fromhex(line.strip())))
        return heads

    # -- persistence ----------------------------------------------------------

    def _write_record(self, kind: int, seq: int, payload: bytes, a: int, b: int) -> None:
        if self._log is None:
            return
        self._log.write(_RECORD.pack(kind, seq, payload, a, b))
        self._log.flush()

    def _write_heads_file(self) -> None:
        if self._dir is None:
            return
        (self._dir / "heads.txt").write_text(self.export_heads_text())

    def _replay(self) -> None:
        log_path = self._dir / "entries.log"  # type: ignore[operator]
        if not log_path.exists():
            return
        raw = log_path.read_bytes()
        if len(raw) % _RECORD.size != 0:
            # a torn trailing record from a crash is dropped
            raw = raw[: len(raw) - (len(raw) % _RECORD.size)]
        pending: List[Tuple[int, bytes]] = []
        for off in range(0, len(raw), _RECORD.size):
            kind, seq, payload, a, b = _RECORD.unpack_from(raw, off)
            if kind == _KIND_ENTRY:
                pending.append((seq, payload))
            elif kind == _KIND_SEAL:
                batch_id, count = a, b
                if count != len(pending):
                    raise LedgerCorrupt(
                        f"seal record for batch {batch_id} covers {count} entries, "
                        f"log has {len(pending)} pending"
                    )
                digests = [d for _, d in pending]
                root, paths = build_merkle(digests)
                if root != payload:
                    raise LedgerCorrupt(f"recomputed root mismatch for batch {batch_id}")
                head = CalendarHead(batch_id, chain_head(self._heads[-1].head, root))
                self._batches.append(
                    _SealedBatch(batch_id, digests, root, paths, pending[0][0], head.head)
                )
                self._heads.append(head)
                for i, (s, d) in enumerate(pending):
                    self._entries.append(LedgerEntry(s, d, batch_id, i))
                pending = []
        self._pending = pending
        self._pending_since = self._clock() if pending else None

    def close(self) -> None:
        with self._lock:
            if self._log is not None:
                self._log.close()
                self._log = None
