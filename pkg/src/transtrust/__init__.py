"""Deterministic simulation of transitive trust built on trusted platform modules."""

from transtrust.errors import TransTrustError

__version__ = "0.1.0"

__all__ = ["TransTrustError", "__version__"]
