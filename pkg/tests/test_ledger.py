"""Merkle batches, hash calendar, proofs, persistence."""

from __future__ import annotations

import hashlib
import random
import secrets
import threading

import pytest

from healthpass import ledger as lg


def h(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()


def digests(n: int, seed: int = 0) -> list[bytes]:
    rng = random.Random(seed)
    return [bytes(rng.randrange(256) for _ in range(32)) for _ in range(n)]


def fold_independent(leaf: bytes, path) -> bytes:
    """Independent proof folding used to cross-check the package."""
    node = h(b"\x00" + leaf)
    for step in path:
        node = h(b"\x01" + step.sibling + node) if step.side == "left" else h(
            b"\x01" + node + step.sibling
        )
    return node


class TestAppend:
    def test_first_append_is_seq_zero(self):
        led = lg.Ledger()
        assert led.append(secrets.token_bytes(32)).seq == 0
        assert led.append(secrets.token_bytes(32)).seq == 1

    def test_wrong_length_rejected(self):
        led = lg.Ledger()
        with pytest.raises(lg.InvalidDigest):
            led.append(secrets.token_bytes(16))
        with pytest.raises(lg.InvalidDigest):
            led.append(secrets.token_bytes(33))

    def test_concurrent_appends_get_distinct_consecutive_seqs(self):
        led = lg.Ledger(batch_size=10_000)
        seqs: list[int] = []
        lock = threading.Lock()

        def worker():
            for _ in range(100):
                receipt = led.append(secrets.token_bytes(32))
                with lock:
                    seqs.append(receipt.seq)

        threads = [threading.Thread(target=worker) for _ in range(8)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        assert sorted(seqs) == list(range(800))


class TestSealBatch:
    def test_empty_batch_rejected(self):
        with pytest.raises(lg.EmptyBatch):
            lg.Ledger().seal_batch()

    def test_single_leaf_root_is_tagged_leaf_hash(self):
        led = lg.Ledger()
        d = secrets.token_bytes(32)
        led.append(d)
        _, root, _, proofs = led.seal_batch()
        assert root == h(b"\x00" + d)
        assert proofs[0].path == ()

    def test_two_leaf_root_matches_hand_hash(self):
        led = lg.Ledger()
        d0, d1 = digests(2, seed=7)
        led.append(d0)
        led.append(d1)
        _, root, _, _ = led.seal_batch()
        assert root == h(b"\x01" + h(b"\x00" + d0) + h(b"\x00" + d1))

    def test_three_leaves_path_lengths_and_validity(self):
        led = lg.Ledger()
        for d in digests(3, seed=9):
            led.append(d)
        _, root, head, proofs = led.seal_batch()
        assert sorted(len(p.path) for p in proofs) == [1, 2, 2]
        for proof in proofs:
            assert fold_independent(proof.leaf_digest, proof.path) == root
            assert lg.verify_inclusion(proof, led.heads())

    def test_auto_seal_at_batch_size(self):
        led = lg.Ledger(batch_size=4)
        for d in digests(9, seed=3):
            led.append(d)
        assert len(led.batch_roots()) == 2
        assert led.pending_count() == 1

    def test_age_based_seal(self):
        t = {"now": 1000.0}
        led = lg.Ledger(batch_size=100, max_batch_age=1.0, clock=lambda: t["now"])
        led.append(secrets.token_bytes(32))
        t["now"] += 2.0
        led.maybe_seal_by_age()
        assert len(led.batch_roots()) == 1

    def test_determinism_same_digests_same_root(self):
        ds = digests(13, seed=5)
        roots = []
        for _ in range(2):
            led = lg.Ledger()
            for d in ds:
                led.append(d)
            _, root, _, _ = led.seal_batch()
            roots.append(root)
        assert roots[0] == roots[1]


class TestVerifyInclusion:
    def _sealed(self, n=5, seed=1):
        led = lg.Ledger()
        for d in digests(n, seed=seed):
            led.append(d)
        led.seal_batch()
        return led

    def test_fresh_proofs_accept(self):
        led = self._sealed()
        for seq in range(5):
            assert lg.verify_inclusion(led.proof(seq), led.heads())

    def test_flipped_sibling_is_path_mismatch(self):
        led = self._sealed()
        proof = led.proof(0)
        step = proof.path[0]
        bad = bytearray(step.sibling)
        bad[3] ^= 0x40
        tampered = lg.InclusionProof(
            leaf_digest=proof.leaf_digest,
            leaf_index=proof.leaf_index,
            path=(lg.ProofStep(step.side, bytes(bad)),) + proof.path[1:],
            batch_root=proof.batch_root,
            batch_id=proof.batch_id,
            head_at_issue=proof.head_at_issue,
        )
        check = lg.verify_inclusion(tampered, led.heads())
        assert not check and check.reason == lg.PATH_MISMATCH

    def test_substituted_leaf_is_path_mismatch(self):
        led = self._sealed()
        proof = led.proof(2)
        forged = lg.InclusionProof(
            leaf_digest=secrets.token_bytes(32),
            leaf_index=proof.leaf_index,
            path=proof.path,
            batch_root=proof.batch_root,
            batch_id=proof.batch_id,
            head_at_issue=proof.head_at_issue,
        )
        check = lg.verify_inclusion(forged, led.heads())
        assert not check and check.reason == lg.PATH_MISMATCH

    def test_unknown_batch(self):
        led = self._sealed()
        proof = led.proof(0)
        forged = lg.InclusionProof(
            leaf_digest=proof.leaf_digest,
            leaf_index=proof.leaf_index,
            path=proof.path,
            batch_root=proof.batch_root,
            batch_id=99,
            head_at_issue=proof.head_at_issue,
        )
        check = lg.verify_inclusion(forged, led.heads())
        assert not check and check.reason == lg.UNKNOWN_BATCH

    def test_forked_heads_chain_mismatch(self):
        led = self._sealed(n=4, seed=11)
        proof = led.proof(1)
        # fork: reseal an altered batch and recompute its head chain
        altered = digests(4, seed=11)
        altered[3] = secrets.token_bytes(32)
        fork = lg.Ledger()
        for d in altered:
            fork.append(d)
        fork.seal_batch()
        check = lg.verify_inclusion(proof, fork.heads())
        assert not check and check.reason == lg.CHAIN_MISMATCH

    def test_later_activity_never_invalidates_proofs(self):
        led = lg.Ledger(batch_size=8)
        receipts = [led.append(d) for d in digests(64, seed=2)]
        led.flush()
        early = [led.proof(r.seq) for r in receipts]
        for d in digests(64, seed=4):
            led.append(d)
        led.flush()
        final_heads = led.heads()
        assert all(lg.verify_inclusion(p, final_heads) for p in early)

    def test_domain_tags_block_leaf_node_collision(self):
        """The classic second-preimage construction: presenting the
        concatenation of two leaf hashes as a single leaf must not
        reproduce the two-leaf root."""
        d0, d1 = digests(2, seed=21)
        led = lg.Ledger()
        led.append(d0)
        led.append(d1)
        _, root, _, _ = led.seal_batch()
        fake_leaf = lg.leaf_hash(d0) + lg.leaf_hash(d1)  # 64 bytes, itself unappendable
        assert lg.fold_path(fake_leaf, ()) != root
        forged = lg.InclusionProof(
            leaf_digest=fake_leaf,
            leaf_index=0,
            path=(),
            batch_root=root,
            batch_id=1,
            head_at_issue=led.heads()[-1].head,
        )
        check = lg.verify_inclusion(forged, led.heads())
        assert not check and check.reason == lg.PATH_MISMATCH


class TestConsistency:
    def _chain(self, batches=10, per=3):
        led = lg.Ledger()
        for b in range(batches):
            for d in digests(per, seed=100 + b):
                led.append(d)
            led.seal_batch()
        return led

    def test_reflexive_empty_roots(self):
        led = self._chain(3)
        head = led.heads()[-1]
        assert lg.verify_consistency(head, head, [])

    def test_full_replay_over_ten_batches(self):
        led = self._chain(10)
        heads = led.heads()
        roots = led.batch_roots()
        assert lg.verify_consistency(heads[0], heads[10], roots)
        # independent replay cross-check
        acc = heads[0].head
        for root in roots:
            acc = h(acc + root)
        assert acc == heads[10].head

    def test_partial_window(self):
        led = self._chain(10)
        heads = led.heads()
        roots = led.batch_roots()
        assert lg.verify_consistency(heads[4], heads[9], roots[4:9])

    def test_altered_root_rejected(self):
        led = self._chain(5)
        heads = led.heads()
        roots = led.batch_roots()
        roots[2] = secrets.token_bytes(32)
        check = lg.verify_consistency(heads[0], heads[5], roots)
        assert not check and check.reason == lg.CHAIN_MISMATCH

    def test_missing_roots_is_incomplete_evidence(self):
        led = self._chain(5)
        heads = led.heads()
        with pytest.raises(lg.IncompleteEvidence):
            lg.verify_consistency(heads[0], heads[5], led.batch_roots()[:3])


class TestPersistence:
    def test_reopen_preserves_heads_and_proofs(self, tmp_path):
        led = lg.Ledger(directory=tmp_path / "ledger", batch_size=4)
        receipts = [led.append(d) for d in digests(10, seed=6)]
        led.flush()
        heads = led.heads()
        led.close()

        reopened = lg.Ledger(directory=tmp_path / "ledger", batch_size=4)
        assert reopened.heads() == heads
        for r in receipts:
            proof = reopened.proof(r.seq)
            assert proof is not None and lg.verify_inclusion(proof, heads)

    def test_pending_entries_survive_restart(self, tmp_path):
        led = lg.Ledger(directory=tmp_path / "ledger", batch_size=100)
        led.append(digests(1, seed=8)[0])
        led.close()
        reopened = lg.Ledger(directory=tmp_path / "ledger", batch_size=100)
        assert reopened.pending_count() == 1
        reopened.seal_batch()
        assert reopened.sealed_count() == 1

    def test_heads_file_matches_export(self, tmp_path):
        led = lg.Ledger(directory=tmp_path / "ledger", batch_size=2)
        for d in digests(6, seed=12):
            led.append(d)
        on_disk = (tmp_path / "ledger" / "heads.txt").read_text()
        assert on_disk == led.export_heads_text()
        parsed = lg.Ledger.parse_heads_text(on_disk)
        assert parsed == led.heads()

    def test_no_event_content_in_persisted_bytes(self, tmp_path):
        """Only digests reach the ledger; seeded plaintext never appears."""
        seeded = [b"LUCIA MARTINELLI", b"1985-05-12", b"X4815162"]
        led = lg.Ledger(directory=tmp_path / "ledger", batch_size=2)
        for plain in seeded * 3:
            led.append(hashlib.sha256(plain).digest())
        led.flush()
        led.close()
        blob = b"".join(p.read_bytes() for p in (tmp_path / "ledger").iterdir())
        for plain in seeded:
            assert plain not in blob

    def test_corrupt_seal_detected(self, tmp_path):
        led = lg.Ledger(directory=tmp_path / "ledger", batch_size=2)
        for d in digests(2, seed=13):
            led.append(d)
        led.close()
        log = tmp_path / "ledger" / "entries.log"
        raw = bytearray(log.read_bytes())
        raw[-20] ^= 0xFF  # inside the seal record's root
        log.write_bytes(bytes(raw))
        with pytest.raises(lg.LedgerCorrupt):
            lg.Ledger(directory=tmp_path / "ledger", batch_size=2)
