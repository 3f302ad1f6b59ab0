"""MRZ parsing against the independent oracle, vetting, identity minting."""

from __future__ import annotations

import hashlib
import random
from datetime import date

import pytest
from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey

from healthpass import onboarding as ob
from healthpass import vc
from healthpass.ledger import Ledger, verify_inclusion
from healthpass.authn import SignedEnvelope

from mrz_oracle import build_td3, generate_td3, oracle_check_digit

NOW = 1_767_000_000


class TestCheckDigit:
    def test_agrees_with_oracle_on_random_strings(self):
        rng = random.Random(1)
        alphabet = "ABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789<"
        for _ in range(500):
            data = "".join(rng.choices(alphabet, k=rng.randint(1, 30)))
            assert ob.check_digit(data) == oracle_check_digit(data)

    def test_all_filler_is_zero(self):
        assert ob.check_digit("<<<<<<<<<") == 0

    def test_known_weighting(self):
        # weights 7,3,1: "AB<" -> 10*7 + 11*3 + 0*1 = 103 -> 3
        assert ob.check_digit("AB<") == 3


class TestParseMrz:
    def test_thousand_generated_mrzs_parse(self):
        rng = random.Random(2)
        for _ in range(1000):
            line1, line2, fields = generate_td3(rng)
            record = ob.parse_mrz(line1, line2)
            assert record.surname == fields["surname"]
            assert record.given_names == fields["given"]
            assert record.document_number == fields["document_number"]
            assert record.birth_date == fields["birth"]
            assert record.expiry_date == fields["expiry"]

    def test_all_filler_document_number(self):
        line1, line2 = build_td3(
            surname="NOBODY", given="ANON", country="UTO",
            doc_number="<<<<<<<<<", birth="900101", expiry="300101",
        )
        record = ob.parse_mrz(line1, line2)
        assert record.document_number == ""
        assert record.document_number_cd == 0

    def test_wrong_length_is_format_error(self):
        line1, line2 = build_td3("A", "B", "UTO", "123", "900101", "300101")
        with pytest.raises(ob.MrzFormat):
            ob.parse_mrz(line1[:-1], line2)
        with pytest.raises(ob.MrzFormat):
            ob.parse_mrz(line1, line2 + "<")

    def test_invalid_character_is_format_error(self):
        line1, line2 = build_td3("A", "B", "UTO", "123", "900101", "300101")
        with pytest.raises(ob.MrzFormat):
            ob.parse_mrz(line1.replace("P<", "p<"), line2)

    def test_exhaustive_single_digit_substitutions_rejected(self):
        """Every digit-to-digit substitution in a checked numeric field
        shifts the weighted sum (weights coprime to 10) and must fail."""
        line1, line2, _ = generate_td3(random.Random(3))
        checked_spans = [(0, 9), (13, 19), (21, 27)]  # doc number, birth, expiry
        cases = 0
        for start, end in checked_spans:
            for pos in range(start, end):
                ch = line2[pos]
                if not ch.isdigit():
                    continue
                for repl in "0123456789":
                    if repl == ch:
                        continue
                    mutated = line2[:pos] + repl + line2[pos + 1 :]
                    with pytest.raises(ob.MrzChecksum):
                        ob.parse_mrz(line1, mutated)
                    cases += 1
        assert cases >= 9 * 9  # at least the six date digits plus doc digits

    def test_checksum_names_offending_field(self):
        line1, line2 = build_td3("A", "B", "UTO", "AB1234567", "900101", "300101")
        mutated = line2[:13] + "910101" + line2[19:]
        with pytest.raises(ob.MrzChecksum) as excinfo:
            ob.parse_mrz(line1, mutated)
        assert excinfo.value.field == "birth_date"

    def test_documented_mod10_escape_exists(self):
        """'A' (value 10) and '0' (value 0) differ by 10, invisible mod 10:
        the known limit of the scheme. Both field and composite checks
        accept the swap wherever it lands in the document number."""
        line1, line2 = build_td3("A", "B", "UTO", "0B1234567", "900101", "300101")
        ob.parse_mrz(line1, line2)
        swapped = "A" + line2[1:]
        record = ob.parse_mrz(line1, swapped)  # accepted: the escape
        assert record.document_number.startswith("A")

    def test_ocr_noise_rejected(self):
        """Noise-injection double for OCR errors: random digit corruption
        in checked fields is always caught by some check digit."""
        rng = random.Random(5)
        rejected = 0
        for _ in range(200):
            line1, line2, _ = generate_td3(rng)
            pos = rng.choice([p for p in list(range(0, 10)) + list(range(13, 20)) + list(range(21, 28)) if line2[p].isdigit()])
            repl = rng.choice([d for d in "0123456789" if d != line2[pos]])
            mutated = line2[:pos] + repl + line2[pos + 1 :]
            try:
                ob.parse_mrz(line1, mutated)
            except ob.MrzChecksum:
                rejected += 1
        assert rejected == 200


class TestDerivedFields:
    def test_birth_date_expansion(self):
        line1, line2 = build_td3("A", "B", "UTO", "X1", "850512", "330207")
        record = ob.parse_mrz(line1, line2)
        today = date(2026, 8, 10)
        assert record.birth_date_iso(today) == "1985-05-12"
        assert record.expiry_date_iso(today) == "2033-02-07"

    def test_age_derivation(self):
        assert ob.derive_age("1985-05-12", date(2026, 8, 10)) == 41
        assert ob.derive_age("1985-05-12", date(2026, 5, 11)) == 40
        assert ob.derive_age("1985-05-12", date(2026, 5, 12)) == 41

    def test_full_name(self):
        line1, line2 = build_td3("MARTINELLI", "LUCIA", "ITA", "X4815162", "850512", "330207")
        record = ob.parse_mrz(line1, line2)
        assert record.full_name() == "LUCIA MARTINELLI"


def make_record() -> ob.MrzRecord:
    line1, line2 = build_td3("MARTINELLI", "LUCIA", "ITA", "X4815162", "850512", "330207")
    return ob.parse_mrz(line1, line2)


class TestVetIdentity:
    def _authority(self, status=ob.AuthorityStatus.CONFIRMED):
        authority = ob.MockAuthority()
        authority.add("X4815162", status)
        return authority

    def test_high_score_confirmed_verified(self):
        result = ob.vet_identity(
            make_record(), b"img", b"img",
            oracle=lambda a, b: 0.99, authority=self._authority(), threshold=0.85,
        )
        assert result.decision is ob.Decision.VERIFIED and result.reasons == ()

    def test_low_score_rejected_with_face_mismatch(self):
        result = ob.vet_identity(
            make_record(), b"img", b"other",
            oracle=lambda a, b: 0.50, authority=self._authority(), threshold=0.85,
        )
        assert result.decision is ob.Decision.REJECTED
        assert result.reasons == (ob.REASON_FACE_MISMATCH,)

    def test_authority_not_found_rejected(self):
        result = ob.vet_identity(
            make_record(), b"img", b"img",
            oracle=lambda a, b: 1.0, authority=ob.MockAuthority(), threshold=0.85,
        )
        assert result.decision is ob.Decision.REJECTED
        assert result.reasons == (ob.REASON_AUTHORITY_NOT_FOUND,)

    def test_revoked_rejected(self):
        result = ob.vet_identity(
            make_record(), b"img", b"img",
            oracle=lambda a, b: 1.0,
            authority=self._authority(ob.AuthorityStatus.REVOKED),
        )
        assert result.reasons == (ob.REASON_AUTHORITY_REVOKED,)

    def test_every_failed_check_listed(self):
        result = ob.vet_identity(
            make_record(), b"a", b"b",
            oracle=lambda a, b: 0.0, authority=ob.MockAuthority(),
        )
        assert set(result.reasons) == {ob.REASON_FACE_MISMATCH, ob.REASON_AUTHORITY_NOT_FOUND}

    def test_oracle_failure_is_retryable_error(self):
        def broken(a, b):
            raise TimeoutError("matcher offline")

        with pytest.raises(ob.OracleUnavailable):
            ob.vet_identity(make_record(), b"a", b"b", oracle=broken, authority=self._authority())

    def test_default_double_hashes_bytes(self):
        assert ob.hash_equality_oracle(b"same", b"same") == 1.0
        assert ob.hash_equality_oracle(b"same", b"diff") == 0.0

    def test_authority_file_round_trip(self, tmp_path):
        authority = self._authority()
        authority.to_file(tmp_path / "authority.json")
        loaded = ob.MockAuthority.from_file(tmp_path / "authority.json")
        assert loaded("X4815162") is ob.AuthorityStatus.CONFIRMED
        assert loaded("UNKNOWN") is ob.AuthorityStatus.NOT_FOUND
        # the file never holds the raw document number
        assert "X4815162" not in (tmp_path / "authority.json").read_text()


def make_consent(user: vc.Did) -> ob.ConsentAttestation:
    envelope = SignedEnvelope(
        challenge=b"\x00" * 32,
        client_context={"operation": "consent", "timestamp": NOW},
        payload=b"{}",
        counter=1,
        signature=b"\x00" * 64,
    )
    return ob.ConsentAttestation(
        user=user, scope="onboarding",
        context={"timestamp": NOW}, envelope=envelope,
    )


class TestMintIdentityCredential:
    def _verified(self):
        return ob.VettingResult(
            face_match_score=1.0, face_threshold=0.85,
            authority_status=ob.AuthorityStatus.CONFIRMED,
            decision=ob.Decision.VERIFIED,
        )

    def test_mint_anchors_exactly_one_digest(self, holder_did):
        issuer = Ed25519PrivateKey.generate()
        ledger = Ledger()
        credential, receipt = ob.mint_identity_credential(
            self._verified(), make_record(), holder_did, issuer, ledger,
            make_consent(holder_did), now=NOW,
        )
        assert ledger.pending_count() + ledger.sealed_count() == 1
        ledger.flush()
        entry = ledger.entry(receipt.seq)
        # independent digest recomputation
        assert entry.digest == hashlib.sha256(credential.canonical_bytes()).digest()
        proof = ledger.proof(receipt.seq)
        assert verify_inclusion(proof, ledger.heads())

    def test_claims_cover_identity_fields(self, holder_did):
        issuer = Ed25519PrivateKey.generate()
        credential, _ = ob.mint_identity_credential(
            self._verified(), make_record(), holder_did, issuer, Ledger(),
            make_consent(holder_did), now=NOW,
        )
        assert set(credential.claims.names()) == {
            "full_name", "date_of_birth", "document_number", "nationality", "document_expiry",
        }
        assert credential.claims["full_name"].value == "LUCIA MARTINELLI"
        assert credential.claims["date_of_birth"].value == "1985-05-12"
        assert credential.credential_type is vc.CredentialType.IDENTITY

    def test_missing_consent(self, holder_did):
        with pytest.raises(ob.ConsentMissing):
            ob.mint_identity_credential(
                self._verified(), make_record(), holder_did,
                Ed25519PrivateKey.generate(), Ledger(), None, now=NOW,
            )

    def test_unverified_vetting(self, holder_did):
        rejected = ob.VettingResult(
            face_match_score=0.1, face_threshold=0.85,
            authority_status=ob.AuthorityStatus.CONFIRMED,
            decision=ob.Decision.REJECTED, reasons=(ob.REASON_FACE_MISMATCH,),
        )
        with pytest.raises(ob.VettingIncomplete):
            ob.mint_identity_credential(
                rejected, make_record(), holder_did,
                Ed25519PrivateKey.generate(), Ledger(), make_consent(holder_did), now=NOW,
            )


class TestSessionScrub:
    def test_scrub_drops_every_sensitive_reference(self, holder_did):
        session = ob.OnboardingSession(user=holder_did)
        session.mrz = make_record()
        session.doc_photo = b"photo"
        session.selfie = b"selfie"
        session.consent = make_consent(holder_did)
        session.scrub()
        assert session.mrz is None and session.doc_photo is None
        assert session.selfie is None and session.consent is None
