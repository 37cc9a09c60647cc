"""The three transitive-trust protocol engines: restriction, subordination, transposition."""

from transtrust.operations.outcomes import (
    AccessDecision,
    StepResult,
    TranspositionOutcome,
)
from transtrust.operations.restriction import run_restriction

__all__ = ["AccessDecision", "StepResult", "TranspositionOutcome", "run_restriction"]
