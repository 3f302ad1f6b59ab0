"""OAuth code flow, observation retrieval, rationalization, anonymization."""

from __future__ import annotations

import itertools
import json

import pytest

from healthpass import fhir
from conftest import FIXTURES, load_fixture

CLIENT = "healthpass-wallet"


@pytest.fixture()
def hub(clock):
    hub = fhir.FhirHub(clock=clock)
    hub.register_client(CLIENT)
    patient = hub.register_user("portal-user", "portal-pass")
    for name in (
        "obs_bundle_pcr_negative.json",
        "obs_flat_antigen_negative.json",
        "obs_bundle_vaccination_dose2.json",
    ):
        hub.add_observation(patient, load_fixture(name))
    return hub


def get_token(hub):
    code = hub.authorize("portal-user", "portal-pass", CLIENT, {"observations"})
    return hub.exchange(code, CLIENT)


class TestAuthorize:
    def test_code_single_use(self, hub):
        code = hub.authorize("portal-user", "portal-pass", CLIENT, {"observations"})
        hub.exchange(code, CLIENT)
        with pytest.raises(fhir.CodeConsumed):
            hub.exchange(code, CLIENT)

    def test_scope_exceeding_grant_denied(self, hub):
        with pytest.raises(fhir.ScopeDenied):
            hub.authorize(
                "portal-user", "portal-pass", CLIENT,
                scope={"observations", "write"}, granted={"observations"},
            )

    def test_code_expires_after_60s(self, hub, clock):
        code = hub.authorize("portal-user", "portal-pass", CLIENT, {"observations"})
        clock.advance(61)
        with pytest.raises(fhir.CodeExpired):
            hub.exchange(code, CLIENT)

    def test_unknown_client(self, hub):
        with pytest.raises(fhir.ClientInvalid):
            hub.authorize("portal-user", "portal-pass", "rogue", {"observations"})

    def test_bad_portal_password(self, hub):
        with pytest.raises(fhir.PortalAuthFailed):
            hub.authorize("portal-user", "wrong", CLIENT, {"observations"})

    def test_client_mismatch_on_exchange(self, hub):
        hub.register_client("other-app")
        code = hub.authorize("portal-user", "portal-pass", CLIENT, {"observations"})
        with pytest.raises(fhir.ClientMismatch):
            hub.exchange(code, "other-app")


class TestTokens:
    def test_valid_token_fetches(self, hub):
        token = get_token(hub)
        assert len(hub.fetch_observations(token.token)) == 3

    def test_expired_token_rejected_then_refresh_works(self, hub, clock):
        token = get_token(hub)
        clock.advance(hub.token_ttl + 1)
        with pytest.raises(fhir.TokenExpired):
            hub.fetch_observations(token.token)
        fresh = hub.refresh(token.refresh_token, CLIENT)
        assert len(hub.fetch_observations(fresh.token)) == 3

    def test_refresh_rotation_single_use(self, hub):
        token = get_token(hub)
        hub.refresh(token.refresh_token, CLIENT)
        with pytest.raises(fhir.CodeInvalid):
            hub.refresh(token.refresh_token, CLIENT)

    def test_token_gate_grid(self, hub, clock):
        """Every bad combination of (expired, wrong scope, wrong patient)
        is rejected."""
        other_patient = hub.register_user("someone-else", "pw2")
        for expired, wrong_scope, wrong_patient in itertools.product(
            (False, True), repeat=3
        ):
            if not (expired or wrong_scope or wrong_patient):
                continue
            scope = {"demographics"} if wrong_scope else {"observations"}
            code = hub.authorize("portal-user", "portal-pass", CLIENT, scope)
            token = hub.exchange(code, CLIENT)
            if expired:
                clock.advance(hub.token_ttl + 1)
            patient = other_patient if wrong_patient else None
            with pytest.raises(
                (fhir.TokenExpired, fhir.ScopeDenied, fhir.PatientMismatch)
            ):
                hub.fetch_observations(token.token, patient=patient)

    def test_tokens_are_opaque(self, hub):
        token = get_token(hub)
        assert "portal-user" not in token.token
        assert len(bytes.fromhex(token.token)) == 32


class TestFetchObservations:
    def test_newest_first(self, hub):
        token = get_token(hub)
        rows = hub.fetch_observations(token.token)
        times = [fhir.rationalize(p).effective_at for p in rows]
        assert times == sorted(times, reverse=True)

    def test_since_filters(self, hub):
        token = get_token(hub)
        rows = hub.fetch_observations(token.token)
        newest = fhir.rationalize(rows[0]).effective_at
        assert hub.fetch_observations(token.token, since=newest) == []
        assert len(hub.fetch_observations(token.token, since=newest - 1)) == 1

    def test_explicit_wrong_patient(self, hub):
        other = hub.register_user("neighbor", "pw")
        token = get_token(hub)
        with pytest.raises(fhir.PatientMismatch):
            hub.fetch_observations(token.token, patient=other)


class TestRationalize:
    def test_bundle_pcr_negative(self):
        obs = fhir.rationalize(load_fixture("obs_bundle_pcr_negative.json"))
        assert obs.kind is fhir.ObservationKind.PCR_TEST
        assert obs.result is fhir.ObservationResult.NEGATIVE
        assert obs.code == "94500-6"
        assert obs.performer == "Metro Reference Laboratory"

    def test_flat_antigen_negative(self):
        obs = fhir.rationalize(load_fixture("obs_flat_antigen_negative.json"))
        assert obs.kind is fhir.ObservationKind.ANTIGEN_TEST
        assert obs.result is fhir.ObservationResult.NEGATIVE
        assert obs.performer == "Harborside Clinic"

    def test_bundle_vaccination_dose_two(self):
        obs = fhir.rationalize(load_fixture("obs_bundle_vaccination_dose2.json"))
        assert obs.kind is fhir.ObservationKind.VACCINATION
        assert obs.result is fhir.ObservationResult.ADMINISTERED
        assert obs.dose_number == 2
        assert obs.vaccine_product == "NovaShield mRNA"

    def test_missing_effective_time(self):
        with pytest.raises(fhir.IncompleteRecord):
            fhir.rationalize(load_fixture("obs_incomplete_missing_time.json"))

    def test_unknown_dialect(self):
        with pytest.raises(fhir.UnmappableDialect):
            fhir.rationalize(load_fixture("obs_unknown_dialect.json"))

    def test_totality_over_fixture_corpus(self):
        """Every fixture maps to a canonical record or a typed error."""
        for path in sorted(FIXTURES.glob("obs_*.json")):
            payload = json.loads(path.read_text())
            try:
                obs = fhir.rationalize(payload)
                assert isinstance(obs, fhir.CanonicalObservation)
            except (fhir.UnmappableDialect, fhir.IncompleteRecord):
                pass

    def test_flat_immunization(self):
        obs = fhir.rationalize(
            {
                "record_type": "immunization",
                "product": "VectorPrime",
                "dose": 1,
                "administered_at": "2026-05-01T08:00:00Z",
                "site": "Community Pharmacy",
            }
        )
        assert obs.kind is fhir.ObservationKind.VACCINATION and obs.dose_number == 1

    def test_kind_result_combinations_enforced(self):
        with pytest.raises(ValueError):
            fhir.CanonicalObservation(
                kind=fhir.ObservationKind.VACCINATION,
                result=fhir.ObservationResult.NEGATIVE,
                code="IMM-COVID",
                effective_at=1_767_000_000,
                performer="x",
            )
        with pytest.raises(ValueError):
            fhir.CanonicalObservation(
                kind=fhir.ObservationKind.PCR_TEST,
                result=fhir.ObservationResult.ADMINISTERED,
                code="94500-6",
                effective_at=1_767_000_000,
                performer="x",
            )

    def test_identity_stable_for_dedupe(self):
        payload = load_fixture("obs_bundle_pcr_negative.json")
        assert fhir.rationalize(payload).identity() == fhir.rationalize(payload).identity()


class TestAnonymize:
    def _obs(self):
        return fhir.rationalize(load_fixture("obs_bundle_pcr_negative.json"))

    def test_same_patient_same_key_same_pseudonym(self):
        key = b"k" * 32
        a = fhir.anonymize(self._obs(), "pat-1", key)
        b = fhir.anonymize(self._obs(), "pat-1", key)
        assert a.pseudonym == b.pseudonym

    def test_rotated_key_unlinkable(self, clock):
        rotating = fhir.RotatingOrgKey(b"m" * 32, epoch_seconds=30 * 86400, clock=clock)
        first = fhir.anonymize(self._obs(), "pat-1", rotating.key())
        clock.advance(31 * 86400)
        second = fhir.anonymize(self._obs(), "pat-1", rotating.key())
        assert first.pseudonym != second.pseudonym

    def test_schema_has_no_identifier_fields(self):
        record = fhir.anonymize(self._obs(), "pat-1", b"k" * 32).to_wire()
        assert set(record) == {"pseudonym", "kind", "result", "effective_date", "region"}
        for banned in ("name", "full_name", "date_of_birth", "document_number", "patient"):
            assert banned not in record

    def test_effective_truncated_to_date(self):
        record = fhir.anonymize(self._obs(), "pat-1", b"k" * 32)
        assert record.effective_date == "2026-08-05"

    def test_export_appends_ndjson(self, tmp_path):
        record = fhir.anonymize(self._obs(), "pat-1", b"k" * 32)
        target = tmp_path / "nho" / "org.ndjson"
        fhir.export_anonymized(target, record)
        fhir.export_anonymized(target, record)
        lines = target.read_text().splitlines()
        assert len(lines) == 2 and json.loads(lines[0])["kind"] == "PcrTest"


class TestHubPersistence:
    def test_passwords_stored_hashed(self, tmp_path, clock):
        hub = fhir.FhirHub(directory=tmp_path / "hub", clock=clock)
        hub.register_client(CLIENT)
        hub.register_user("user-x", "super-secret-pw")
        blob = (tmp_path / "hub" / "users.json").read_text()
        assert "super-secret-pw" not in blob

    def test_reload_preserves_users_and_observations(self, tmp_path, clock):
        hub = fhir.FhirHub(directory=tmp_path / "hub", clock=clock)
        hub.register_client(CLIENT)
        patient = hub.register_user("user-x", "pw")
        hub.add_observation(patient, load_fixture("obs_bundle_pcr_negative.json"))

        again = fhir.FhirHub(directory=tmp_path / "hub", clock=clock)
        again.register_client(CLIENT)
        code = again.authorize("user-x", "pw", CLIENT, {"observations"})
        token = again.exchange(code, CLIENT)
        assert len(again.fetch_observations(token.token)) == 1
