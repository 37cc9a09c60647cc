import pytest
from hypothesis import given
from hypothesis import strategies as st

from transtrust import crypto_prims as cp
from transtrust import tpm_sim
from transtrust.errors import (
    CredentialMismatch,
    IntegrityMismatch,
    KeyRevoked,
    OrderingViolation,
    PcrIndexError,
    PolicyMismatch,
    QuoteRevoked,
    ReplayDetected,
    SignatureInvalid,
    SlotEmpty,
    SlotOccupied,
    UnknownKey,
)

# openssl: sha256(b"a"), sha256(b"b") and the two extend orders from a zero PCR
M1 = bytes.fromhex("ca978112ca1bbdcafac231b39a23dc4da786eff8147c4e72b9807785afee48bb")
M2 = bytes.fromhex("3e23e8160039594a33894f6564e1b1348bbd7a0088d42c4acb73eeaed59c009d")
EXTEND_M1_M2 = "153d5381929b50792d3b22ae9596544af3b0e4805be1555a595e6d2a2734933f"
EXTEND_M2_M1 = "c1c5916f2ce8f7a64fc9661e3a9d5468de4a65e579fe568c7dd4c11268b4518b"


class Platform:
    def __init__(self, seed=1):
        self.rng = cp.SeededRng(seed)
        self.vendor = tpm_sim.create_authority("vendor", self.rng)
        self.tpm = tpm_sim.tpm_create(self.rng, self.vendor)
        tpm_sim.pcr_extend(self.tpm, 0, M1)
        self.aik = tpm_sim.create_attestation_key(self.tpm, self.rng, self.vendor)
        self.verifier = tpm_sim.QuoteVerifier({"vendor": self.vendor.public})
        self.good = tpm_sim.pcr_digest(self.tpm.pcr_bank)

    def nonce(self):
        return self.rng.nonce()

    def l1(self, nonce):
        q = tpm_sim.ek_prove_liveness(self.tpm, nonce)
        self.verifier.verify_liveness(q, nonce, self.tpm.endorsement.public, self.tpm.endorsement_cert, "vendor")

    def l2(self, nonce, references=None):
        q = tpm_sim.quote_system_state(self.tpm, nonce, tpm_sim.DEFAULT_SELECTION, self.aik)
        self.verifier.verify_system_state(q, nonce, self.aik.public, self.aik.certificate, "vendor",
                                          references if references is not None else {self.good})
        return q


@pytest.fixture
def platform():
    return Platform()


def test_create_is_deterministic_per_seed():
    a = tpm_sim.tpm_create(cp.SeededRng(5), tpm_sim.create_authority("v", cp.SeededRng(0)))
    b = tpm_sim.tpm_create(cp.SeededRng(5), tpm_sim.create_authority("v", cp.SeededRng(0)))
    c = tpm_sim.tpm_create(cp.SeededRng(6), tpm_sim.create_authority("v", cp.SeededRng(0)))
    assert a.endorsement.key_id == b.endorsement.key_id
    assert a.endorsement.key_id != c.endorsement.key_id


def test_fresh_tpm_has_eight_zero_pcrs():
    tpm = tpm_sim.tpm_create(cp.SeededRng(1), tpm_sim.create_authority("v", cp.SeededRng(0)))
    assert tpm.pcr_bank == [bytes(32)] * 8


def test_endorsement_key_is_immutable(platform):
    with pytest.raises(AttributeError):
        platform.tpm.endorsement = cp.sign_keygen(cp.SeededRng(0))


def test_extend_definition():
    tpm = tpm_sim.tpm_create(cp.SeededRng(1), tpm_sim.create_authority("v", cp.SeededRng(0)))
    assert tpm_sim.pcr_extend(tpm, 3, M1) == cp.hash(bytes(32) + M1)


def test_extend_is_order_sensitive():
    assert tpm_sim.extend_value(tpm_sim.extend_value(bytes(32), M1), M2).hex() == EXTEND_M1_M2
    assert tpm_sim.extend_value(tpm_sim.extend_value(bytes(32), M2), M1).hex() == EXTEND_M2_M1


def test_extend_rejects_bad_index_and_measurement(platform):
    with pytest.raises(PcrIndexError):
        tpm_sim.pcr_extend(platform.tpm, 8, M1)
    with pytest.raises(ValueError):
        tpm_sim.pcr_extend(platform.tpm, 0, b"short")


@given(st.lists(st.tuples(st.integers(0, 7), st.binary(min_size=32, max_size=32)), max_size=20))
def test_replaying_the_log_reproduces_the_bank(extends):
    tpm = tpm_sim.tpm_create(cp.SeededRng(1), tpm_sim.create_authority("v", cp.SeededRng(0)))
    for index, m in extends:
        tpm_sim.pcr_extend(tpm, index, m)
    assert tpm_sim.replay_measurements(tpm.measurement_log) == tpm.pcr_bank


def test_pcr_selection_is_canonical(platform):
    bank = platform.tpm.pcr_bank
    assert tpm_sim.pcr_digest(bank, [0, 2]) == tpm_sim.pcr_digest(bank, [2, 0])
    with pytest.raises(ValueError):
        tpm_sim.pcr_digest(bank, [])


def test_liveness_round_trip_and_replay(platform):
    nonce = platform.nonce()
    platform.l1(nonce)
    with pytest.raises(ReplayDetected):
        platform.l1(nonce)


def test_liveness_signed_by_another_key_is_rejected(platform):
    nonce = platform.nonce()
    forged = tpm_sim.AttestationQuote(tpm_sim.LIVENESS, nonce, None, None, platform.tpm.endorsement.key_id)
    forged = tpm_sim._signed(forged, platform.aik.keypair.secret)
    with pytest.raises(SignatureInvalid):
        platform.verifier.verify_liveness(forged, nonce, platform.tpm.endorsement.public,
                                          platform.tpm.endorsement_cert, "vendor")


def test_liveness_with_untrusted_manufacturer_is_rejected(platform):
    nonce = platform.nonce()
    q = tpm_sim.ek_prove_liveness(platform.tpm, nonce)
    with pytest.raises(SignatureInvalid):
        platform.verifier.verify_liveness(q, nonce, platform.tpm.endorsement.public,
                                          platform.tpm.endorsement_cert, "elsewhere")


def test_system_state_accepts_known_good_and_rejects_drift(platform):
    platform.l2(platform.nonce())
    tpm_sim.pcr_extend(platform.tpm, 2, M2)
    with pytest.raises(IntegrityMismatch):
        platform.l2(platform.nonce())


def test_wrong_challenge_is_a_replay(platform):
    q = tpm_sim.quote_system_state(platform.tpm, platform.nonce(), tpm_sim.DEFAULT_SELECTION, platform.aik)
    with pytest.raises(ReplayDetected):
        platform.verifier.verify_system_state(q, platform.nonce(), platform.aik.public, platform.aik.certificate,
                                              "vendor", {platform.good})


def test_quote_encoding_round_trip(platform):
    q = platform.l2(platform.nonce())
    assert tpm_sim.AttestationQuote.decode(q.encode()) == q


def test_quote_fields_must_match_level():
    with pytest.raises(ValueError):
        tpm_sim.AttestationQuote(1, bytes(12), bytes(32), None, b"k")
    with pytest.raises(ValueError):
        tpm_sim.AttestationQuote(3, bytes(12), bytes(32), None, b"k")
    with pytest.raises(ValueError):
        tpm_sim.AttestationQuote(4, bytes(12), None, None, b"k")


def test_credential_attestation(platform):
    gamma = b"domain credential bytes"
    nonce = platform.nonce()
    q = tpm_sim.attest_credential(platform.tpm, gamma, nonce, platform.aik, session_level=2)
    platform.verifier.verify_credential(q, nonce, platform.aik.public, platform.aik.certificate, "vendor",
                                        {platform.good}, cp.hash(gamma), 2)


def test_credential_attestation_detects_a_flipped_byte(platform):
    nonce = platform.nonce()
    q = tpm_sim.attest_credential(platform.tpm, b"domain credential bytez", nonce, platform.aik, session_level=2)
    with pytest.raises(CredentialMismatch):
        platform.verifier.verify_credential(q, nonce, platform.aik.public, platform.aik.certificate, "vendor",
                                            {platform.good}, cp.hash(b"domain credential bytes"), 2)


def test_credential_attestation_needs_level_two_first(platform):
    with pytest.raises(OrderingViolation):
        tpm_sim.attest_credential(platform.tpm, b"g", platform.nonce(), platform.aik, session_level=1)
    q = tpm_sim.attest_credential(platform.tpm, b"g", platform.nonce(), platform.aik, session_level=2)
    with pytest.raises(OrderingViolation):
        platform.verifier.verify_credential(q, q.nonce, platform.aik.public, platform.aik.certificate, "vendor",
                                            {platform.good}, cp.hash(b"g"), 1)


def test_seal_unseal_and_policy(platform):
    policy = tpm_sim.current_policy(platform.tpm)
    tpm_sim.seal(platform.tpm, "slot", policy, b"secret")
    assert tpm_sim.unseal(platform.tpm, "slot") == b"secret"
    with pytest.raises(SlotOccupied):
        tpm_sim.seal(platform.tpm, "slot", policy, b"again")
    tpm_sim.pcr_extend(platform.tpm, 1, M2)
    with pytest.raises(PolicyMismatch):
        tpm_sim.unseal(platform.tpm, "slot")
    with pytest.raises(SlotEmpty):
        tpm_sim.unseal(platform.tpm, "missing")


def test_reseal_keeps_policy(platform):
    tpm_sim.seal(platform.tpm, "slot", tpm_sim.current_policy(platform.tpm), b"1")
    tpm_sim.reseal(platform.tpm, "slot", b"2")
    assert tpm_sim.unseal(platform.tpm, "slot") == b"2"
    tpm_sim.pcr_extend(platform.tpm, 0, M2)
    with pytest.raises(PolicyMismatch):
        tpm_sim.reseal(platform.tpm, "slot", b"3")


def test_revocation_scope(platform):
    tpm_sim.revoke_key(platform.tpm, platform.aik.key_id)
    with pytest.raises(KeyRevoked):
        tpm_sim.quote_system_state(platform.tpm, platform.nonce(), tpm_sim.DEFAULT_SELECTION, platform.aik)
    with pytest.raises(UnknownKey):
        tpm_sim.revoke_key(platform.tpm, b"unknown")
    platform.l1(platform.nonce())


def test_verifier_consults_revocation_list(platform):
    verifier = tpm_sim.QuoteVerifier({"vendor": platform.vendor.public}, {platform.aik.key_id})
    nonce = platform.nonce()
    q = tpm_sim.quote_system_state(platform.tpm, nonce, tpm_sim.DEFAULT_SELECTION, platform.aik)
    with pytest.raises(QuoteRevoked):
        verifier.verify_system_state(q, nonce, platform.aik.public, platform.aik.certificate, "vendor",
                                     {platform.good})


def test_replay_window_is_bounded(platform):
    first = platform.nonce()
    platform.l1(first)
    for _ in range(tpm_sim.REPLAY_WINDOW):
        platform.verifier._consume_nonce(platform.nonce())
    platform.l1(first)
