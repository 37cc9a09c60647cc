"""Simulated trusted platform module and the verifier side of its quotes.

A TPM offers three assertions of increasing strength, each carried by an
:class:`AttestationQuote`:

* level 1, liveness: the endorsement key signs a verifier's challenge;
* level 2, system integrity: an attestation key signs a digest of selected PCRs;
* level 3, credential integrity: as level 2, plus the digest of a credential.

Direct anonymous attestation is modelled as an ordinary signature under an
attestation key certified by an issuer. Zero-knowledge machinery is out of
scope.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Collection, Iterable, Mapping

from transtrust import crypto_prims as cp
from transtrust.encoding import pack, unpack
from transtrust.errors import (
    CodecError,
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

PCR_COUNT = 8
DEFAULT_SELECTION = tuple(range(PCR_COUNT))
REPLAY_WINDOW = 1024

LIVENESS = 1
SYSTEM_STATE = 2
CREDENTIAL = 3


@dataclass(frozen=True)
class Authority:
    """A signing authority: manufacturer, attestation issuer, or principal."""

    name: str
    keypair: cp.SignKeypair

    @property
    def public(self) -> bytes:
        return self.keypair.public

    def certify(self, statement: bytes) -> bytes:
        return cp.sign(self.keypair.secret, statement)


def create_authority(name: str, rng: cp.SeededRng) -> Authority:
    return Authority(name, cp.sign_keygen(rng))


def endorsement_statement(public: bytes) -> bytes:
    return pack(b"EK", public)


def aik_statement(public: bytes) -> bytes:
    return pack(b"AIK", public)


@dataclass(frozen=True)
class AttestationKey:
    keypair: cp.SignKeypair
    certificate: bytes
    issuer: str

    @property
    def key_id(self) -> bytes:
        return self.keypair.key_id

    @property
    def public(self) -> bytes:
        return self.keypair.public


@dataclass(frozen=True)
class SealedSlot:
    pcr_policy: tuple[tuple[int, bytes], ...]
    payload: bytes = field(repr=False)


@dataclass
class TpmState:
    endorsement: cp.SignKeypair
    endorsement_cert: bytes
    manufacturer: str
    attestation_keys: dict[bytes, AttestationKey] = field(default_factory=dict)
    pcr_bank: list[bytes] = field(default_factory=lambda: [cp.ZERO_DIGEST] * PCR_COUNT)
    sealed_slots: dict[str, SealedSlot] = field(default_factory=dict)
    revoked: set[bytes] = field(default_factory=set)
    measurement_log: list[tuple[int, bytes]] = field(default_factory=list)

    def __setattr__(self, name, value):
        if name == "endorsement" and "endorsement" in self.__dict__:
            raise AttributeError("endorsement key is immutable")
        super().__setattr__(name, value)


@dataclass(frozen=True)
class AttestationQuote:
    assertion_level: int
    nonce: bytes
    pcr_digest: bytes | None
    credential_digest: bytes | None
    signer_key_id: bytes
    signature: bytes = b""

    def __post_init__(self):
        if self.assertion_level not in (LIVENESS, SYSTEM_STATE, CREDENTIAL):
            raise ValueError(f"bad assertion level {self.assertion_level}")
        if len(self.nonce) != cp.NONCE_SIZE:
            raise ValueError("nonce must be 12 octets")
        has_pcr = self.pcr_digest is not None
        has_cred = self.credential_digest is not None
        if has_pcr != (self.assertion_level >= SYSTEM_STATE):
            raise ValueError("pcr_digest present iff level >= 2")
        if has_cred != (self.assertion_level == CREDENTIAL):
            raise ValueError("credential_digest present iff level == 3")

    def body(self) -> bytes:
        """Canonical signed encoding: level, nonce, pcr digest, credential digest, signer."""
        return pack(
            bytes([self.assertion_level]),
            self.nonce,
            self.pcr_digest or cp.ZERO_DIGEST,
            self.credential_digest or cp.ZERO_DIGEST,
            self.signer_key_id,
        )

    def encode(self) -> bytes:
        return pack(self.body(), self.signature)

    @classmethod
    def decode(cls, data: bytes) -> AttestationQuote:
        try:
            body, signature = unpack(data)
            level_b, nonce, pcr, cred, signer = unpack(body)
            level = level_b[0]
            return cls(
                assertion_level=level,
                nonce=nonce,
                pcr_digest=pcr if level >= SYSTEM_STATE else None,
                credential_digest=cred if level == CREDENTIAL else None,
                signer_key_id=signer,
                signature=signature,
            )
        except (ValueError, IndexError) as exc:
            raise CodecError(f"malformed quote: {exc}") from exc


# -- TPM-side functions -----------------------------------------------------


def tpm_create(rng: cp.SeededRng, manufacturer: Authority) -> TpmState:
    ek = cp.sign_keygen(rng)
    cert = manufacturer.certify(endorsement_statement(ek.public))
    return TpmState(endorsement=ek, endorsement_cert=cert, manufacturer=manufacturer.name)


def _check_index(index: int) -> None:
    if not 0 <= index < PCR_COUNT:
        raise PcrIndexError(f"PCR index {index} out of range 0..{PCR_COUNT - 1}")


def extend_value(old: bytes, measurement: bytes) -> bytes:
    return cp.hash(old + measurement)


def pcr_extend(tpm: TpmState, index: int, measurement: bytes) -> bytes:
    _check_index(index)
    if len(measurement) != cp.DIGEST_SIZE:
        raise ValueError("measurement must be a 32-octet digest")
    tpm.pcr_bank[index] = extend_value(tpm.pcr_bank[index], measurement)
    tpm.measurement_log.append((index, measurement))
    return tpm.pcr_bank[index]


def replay_measurements(log: Iterable[tuple[int, bytes]]) -> list[bytes]:
    bank = [cp.ZERO_DIGEST] * PCR_COUNT
    for index, measurement in log:
        bank[index] = extend_value(bank[index], measurement)
    return bank


def _canonical_selection(selection: Iterable[int]) -> tuple[int, ...]:
    chosen = tuple(sorted(set(selection)))
    if not chosen:
        raise ValueError("PCR selection must not be empty")
    for index in chosen:
        _check_index(index)
    return chosen


def pcr_digest(bank: list[bytes], selection: Iterable[int] = DEFAULT_SELECTION) -> bytes:
    """Digest over the selected registers concatenated in ascending index order."""
    return cp.hash(b"".join(bank[i] for i in _canonical_selection(selection)))


def create_attestation_key(tpm: TpmState, rng: cp.SeededRng, issuer: Authority) -> AttestationKey:
    kp = cp.sign_keygen(rng)
    aik = AttestationKey(kp, issuer.certify(aik_statement(kp.public)), issuer.name)
    tpm.attestation_keys[aik.key_id] = aik
    return aik


def _usable_aik(tpm: TpmState, aik: AttestationKey) -> AttestationKey:
    if aik.key_id not in tpm.attestation_keys:
        raise UnknownKey(aik.key_id.hex())
    if aik.key_id in tpm.revoked:
        raise KeyRevoked(f"attestation key {aik.key_id.hex()[:16]} is revoked")
    return tpm.attestation_keys[aik.key_id]


def _signed(quote: AttestationQuote, secret) -> AttestationQuote:
    return AttestationQuote(
        quote.assertion_level,
        quote.nonce,
        quote.pcr_digest,
        quote.credential_digest,
        quote.signer_key_id,
        cp.sign(secret, quote.body()),
    )


def ek_prove_liveness(tpm: TpmState, challenge: bytes) -> AttestationQuote:
    ek = tpm.endorsement
    return _signed(AttestationQuote(LIVENESS, challenge, None, None, ek.key_id), ek.secret)


def quote_system_state(
    tpm: TpmState,
    challenge: bytes,
    pcr_selection: Iterable[int],
    aik: AttestationKey,
) -> AttestationQuote:
    key = _usable_aik(tpm, aik)
    digest = pcr_digest(tpm.pcr_bank, pcr_selection)
    return _signed(AttestationQuote(SYSTEM_STATE, challenge, digest, None, key.key_id), key.keypair.secret)


def attest_credential(
    tpm: TpmState,
    credential_bytes: bytes,
    challenge: bytes,
    aik: AttestationKey,
    *,
    session_level: int,
    pcr_selection: Iterable[int] = DEFAULT_SELECTION,
) -> AttestationQuote:
    """Level-3 quote. ``session_level`` is the highest level already accepted
    for this platform in the current session; it must be at least 2."""
    if session_level < SYSTEM_STATE:
        raise OrderingViolation("level-3 attestation needs an accepted level-2 quote first")
    key = _usable_aik(tpm, aik)
    quote = AttestationQuote(
        CREDENTIAL,
        challenge,
        pcr_digest(tpm.pcr_bank, pcr_selection),
        cp.hash(credential_bytes),
        key.key_id,
    )
    return _signed(quote, key.keypair.secret)


def current_policy(tpm: TpmState, selection: Iterable[int] = DEFAULT_SELECTION) -> dict[int, bytes]:
    return {i: tpm.pcr_bank[i] for i in _canonical_selection(selection)}


def seal(tpm: TpmState, slot_id: str, pcr_policy: Mapping[int, bytes], payload: bytes) -> None:
    if slot_id in tpm.sealed_slots:
        raise SlotOccupied(slot_id)
    for index in pcr_policy:
        _check_index(index)
    tpm.sealed_slots[slot_id] = SealedSlot(tuple(sorted(pcr_policy.items())), payload)


def unseal(tpm: TpmState, slot_id: str) -> bytes:
    slot = tpm.sealed_slots.get(slot_id)
    if slot is None:
        raise SlotEmpty(slot_id)
    for index, expected in slot.pcr_policy:
        if tpm.pcr_bank[index] != expected:
            raise PolicyMismatch(f"PCR {index} diverges from the sealing policy of {slot_id!r}")
    return slot.payload


def reseal(tpm: TpmState, slot_id: str, payload: bytes) -> None:
    """Replace a slot's payload under its existing policy; the policy must still hold."""
    unseal(tpm, slot_id)
    slot = tpm.sealed_slots[slot_id]
    tpm.sealed_slots[slot_id] = SealedSlot(slot.pcr_policy, payload)


def revoke_key(tpm: TpmState, key_id: bytes) -> TpmState:
    if key_id not in tpm.attestation_keys:
        raise UnknownKey(f"no attestation key {key_id.hex()[:16]} on this TPM")
    tpm.revoked.add(key_id)
    return tpm


# -- verifier side ----------------------------------------------------------


class QuoteVerifier:
    """Verifier-side checks for quotes, owned by one verifying actor.

    Freshness is tracked in a bounded window of the last 1024 challenges seen.
    ``revoked`` is consulted on every attestation-key quote.
    """

    def __init__(self, trusted_issuers: Mapping[str, bytes], revoked: Collection[bytes] = ()):
        self.trusted_issuers = dict(trusted_issuers)
        self.revoked = revoked
        self._window: deque[bytes] = deque(maxlen=REPLAY_WINDOW)
        self._seen: set[bytes] = set()

    def _consume_nonce(self, nonce: bytes) -> None:
        if nonce in self._seen:
            raise ReplayDetected("challenge already answered")
        if len(self._window) == self._window.maxlen:
            self._seen.discard(self._window[0])
        self._window.append(nonce)
        self._seen.add(nonce)

    def _issuer_public(self, issuer: str) -> bytes:
        try:
            return self.trusted_issuers[issuer]
        except KeyError:
            raise SignatureInvalid(f"issuer {issuer!r} is not trusted") from None

    def _common(self, quote: AttestationQuote, level: int, expected_nonce: bytes, public: bytes) -> None:
        if quote.assertion_level != level:
            raise SignatureInvalid(f"expected a level-{level} quote")
        if quote.nonce != expected_nonce:
            raise ReplayDetected("quote answers a different challenge")
        if quote.signer_key_id != cp.hash(public) or not cp.verify(public, quote.body(), quote.signature):
            raise SignatureInvalid("quote signature does not verify")

    def verify_liveness(
        self,
        quote: AttestationQuote,
        expected_nonce: bytes,
        ek_public: bytes,
        ek_cert: bytes,
        manufacturer: str,
    ) -> None:
        if not cp.verify(self._issuer_public(manufacturer), endorsement_statement(ek_public), ek_cert):
            raise SignatureInvalid("endorsement certificate does not verify")
        self._common(quote, LIVENESS, expected_nonce, ek_public)
        self._consume_nonce(quote.nonce)

    def _check_aik(self, quote: AttestationQuote, aik_public: bytes, aik_cert: bytes, issuer: str) -> None:
        if not cp.verify(self._issuer_public(issuer), aik_statement(aik_public), aik_cert):
            raise SignatureInvalid("attestation key certificate does not verify")
        if cp.hash(aik_public) in self.revoked:
            raise QuoteRevoked("attestation key is revoked")

    def verify_system_state(
        self,
        quote: AttestationQuote,
        expected_nonce: bytes,
        aik_public: bytes,
        aik_cert: bytes,
        issuer: str,
        reference_digests: Collection[bytes],
    ) -> None:
        self._check_aik(quote, aik_public, aik_cert, issuer)
        self._common(quote, SYSTEM_STATE, expected_nonce, aik_public)
        self._consume_nonce(quote.nonce)
        if quote.pcr_digest not in reference_digests:
            raise IntegrityMismatch("PCR digest does not match any reference value")

    def verify_credential(
        self,
        quote: AttestationQuote,
        expected_nonce: bytes,
        aik_public: bytes,
        aik_cert: bytes,
        issuer: str,
        reference_digests: Collection[bytes],
        expected_credential_digest: bytes,
        session_level: int,
    ) -> None:
        if session_level < SYSTEM_STATE:
            raise OrderingViolation("level-3 quote before an accepted level-2 quote")
        self._check_aik(quote, aik_public, aik_cert, issuer)
        self._common(quote, CREDENTIAL, expected_nonce, aik_public)
        self._consume_nonce(quote.nonce)
        if quote.pcr_digest not in reference_digests:
            raise IntegrityMismatch("PCR digest does not match any reference value")
        if quote.credential_digest != expected_credential_digest:
            raise CredentialMismatch("credential digest differs from the registry copy")
