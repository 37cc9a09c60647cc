"""Result records produced by the protocol engines."""

from __future__ import annotations

from dataclasses import dataclass

from transtrust.credentials import ActorId
from transtrust.errors import (
    AttestationError,
    AuthenticationFailure,
    ChannelRefused,
    CodecError,
    DerivationError,
    KeyRevoked,
    OrderingViolation,
    PolicyMismatch,
    ReplayDetected,
    Timeout,
)

GRANT = "grant"
DENY = "deny"
BASE = "base"
PRIVILEGED = "privileged"

# The last two cover transport-level failures: a rejected envelope or an exhausted step budget.
REASONS = (
    "ok",
    "clone_detected",
    "integrity_mismatch",
    "revoked",
    "no_association",
    "policy",
    "authentication_failure",
    "timeout",
)

_REFUSAL_REASONS = {
    "integrity_mismatch": "integrity_mismatch",
    "credential_mismatch": "integrity_mismatch",
    "revoked": "revoked",
    "gamma_rejected": "policy",
    "signature_invalid": "policy",
    "replay": "authentication_failure",
    "malformed": "authentication_failure",
}


@dataclass(frozen=True)
class AccessDecision:
    subject: ActorId
    verdict: str
    privilege: str
    reason: str

    def __post_init__(self):
        if self.verdict not in (GRANT, DENY) or self.privilege not in (BASE, PRIVILEGED):
            raise ValueError("bad verdict or privilege")
        if self.reason not in REASONS:
            raise ValueError(f"unknown reason {self.reason!r}")
        if self.privilege == PRIVILEGED and self.verdict != GRANT:
            raise ValueError("privileged access implies a grant")
        if (self.reason == "ok") != (self.verdict == GRANT):
            raise ValueError("reason is ok exactly for grants")

    @classmethod
    def grant(cls, subject: ActorId, privilege: str = BASE) -> AccessDecision:
        return cls(subject, GRANT, privilege, "ok")

    @classmethod
    def deny(cls, subject: ActorId, reason: str) -> AccessDecision:
        return cls(subject, DENY, BASE, reason)

    @property
    def granted(self) -> bool:
        return self.verdict == GRANT

    def __str__(self):
        if self.granted:
            return f"grant/{self.privilege}"
        return f"deny({self.reason})"


def reason_for(exc: BaseException) -> str:
    """Map the exception that ended a protocol run to a decision reason."""
    if isinstance(exc, ChannelRefused):
        return _REFUSAL_REASONS.get(exc.reason, "policy")
    if isinstance(exc, Timeout):
        return "timeout"
    if isinstance(exc, (KeyRevoked,)):
        return "revoked"
    if isinstance(exc, (AuthenticationFailure, ReplayDetected, DerivationError, CodecError)):
        return "authentication_failure"
    if isinstance(exc, PolicyMismatch):
        return "integrity_mismatch"
    if isinstance(exc, AttestationError):
        return _REFUSAL_REASONS.get(exc.reason, "policy")
    if isinstance(exc, OrderingViolation):
        return "policy"
    return "policy"


@dataclass(frozen=True)
class StepResult:
    accepted: bool
    reason: str = ""

    def __str__(self):
        return "accepted" if self.accepted else f"failed({self.reason})"


ACCEPTED_STEP = StepResult(True)


def failed(reason: str) -> StepResult:
    return StepResult(False, reason)


@dataclass(frozen=True)
class TranspositionOutcome:
    step_a: StepResult
    step_b: StepResult
    a_view_identities: frozenset[str]

    @property
    def completed(self) -> bool:
        return self.step_a.accepted and self.step_b.accepted

    def record(self) -> str:
        """Structured text with a stable field order."""
        return "\n".join([
            f"completed: {str(self.completed).lower()}",
            f"step_a: {self.step_a}",
            f"step_b: {self.step_b}",
            f"a_view_identities: {','.join(sorted(self.a_view_identities)) or '-'}",
        ])
