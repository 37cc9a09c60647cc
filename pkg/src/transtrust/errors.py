"""Exception hierarchy shared by every layer of the simulation."""


class TransTrustError(Exception):
    """Base class for all simulation errors."""


class CryptoError(TransTrustError):
    pass


class AuthenticationFailure(CryptoError):
    """AEAD or MAC check failed: the protected data was modified or the key is wrong."""


class NonceReuse(CryptoError):
    pass


class DerivationError(CryptoError):
    """Key agreement against an invalid group element."""


class TpmError(TransTrustError):
    pass


class PcrIndexError(TpmError, IndexError):
    pass


class KeyRevoked(TpmError):
    pass


class UnknownKey(TpmError, KeyError):
    pass


class OrderingViolation(TpmError):
    """A higher assertion level was requested before the lower ones were accepted."""


class PolicyMismatch(TpmError):
    pass


class SlotOccupied(TpmError):
    pass


class SlotEmpty(TpmError):
    pass


class AttestationError(TransTrustError):
    """A verifier rejected a quote. ``reason`` is a short machine-readable tag."""

    reason = "attestation_failed"


class ReplayDetected(AttestationError):
    reason = "replay"


class SignatureInvalid(AttestationError):
    reason = "signature_invalid"


class IntegrityMismatch(AttestationError):
    reason = "integrity_mismatch"


class CredentialMismatch(AttestationError):
    reason = "credential_mismatch"


class QuoteRevoked(AttestationError):
    reason = "revoked"


class CredentialError(TransTrustError):
    pass


class ChannelError(TransTrustError):
    pass


class ChannelRefused(ChannelError):
    def __init__(self, reason: str, detail: str = ""):
        self.reason = reason
        super().__init__(f"{reason}: {detail}" if detail else reason)


class Timeout(ChannelError):
    pass


class CodecError(TransTrustError, ValueError):
    pass


class ConfigError(TransTrustError):
    pass


class TranscriptError(TransTrustError):
    """A transcript file that does not follow the transcript format."""
