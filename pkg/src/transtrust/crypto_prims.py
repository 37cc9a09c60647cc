"""Cryptographic primitives used throughout the simulation.

Concrete choices: SHA-256 for hashing, Ed25519 for signatures, X25519 with
HKDF-SHA256 for key agreement, ChaCha20-Poly1305 for authenticated encryption
and HMAC-SHA256 for MAC-only protection. Sizes are fixed at 32-octet digests
and keys and 12-octet nonces.

All key material is drawn from a :class:`SeededRng`, so two runs with the
same seed produce bit-identical keys, nonces and ciphertexts.
"""

from __future__ import annotations

import functools
import hashlib
import hmac
import random
from dataclasses import dataclass, field

from cryptography.exceptions import InvalidSignature, InvalidTag
from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric import ed25519, x25519
from cryptography.hazmat.primitives.ciphers.aead import ChaCha20Poly1305
from cryptography.hazmat.primitives.kdf.hkdf import HKDF

from transtrust.errors import AuthenticationFailure, DerivationError, NonceReuse

DIGEST_SIZE = 32
KEY_SIZE = 32
NONCE_SIZE = 12
TAG_SIZE = 16

ZERO_DIGEST = bytes(DIGEST_SIZE)

# "group" is the restriction group secret distributed by a principal.
ROLE_LABELS = frozenset({"X", "Y", "transport", "group"})

_RAW = serialization.Encoding.Raw
_RAW_PUB = serialization.PublicFormat.Raw


class SeededRng:
    """Single-owner deterministic byte source."""

    def __init__(self, seed: int):
        self.seed = seed
        self._random = random.Random(seed)

    def bytes(self, n: int) -> bytes:
        return self._random.randbytes(n)

    def nonce(self) -> bytes:
        return self.bytes(NONCE_SIZE)

    def randint(self, a: int, b: int) -> int:
        return self._random.randint(a, b)

    def choice(self, seq):
        return self._random.choice(seq)


def hash(message: bytes) -> bytes:  # noqa: A001 - mirrors the primitive's name
    return hashlib.sha256(message).digest()


def hash_many(*parts: bytes) -> bytes:
    """Hash of the length-prefixed concatenation of ``parts``."""
    h = hashlib.sha256()
    for part in parts:
        h.update(len(part).to_bytes(4, "big"))
        h.update(part)
    return h.digest()


# -- signatures -------------------------------------------------------------


@dataclass(frozen=True)
class SignKeypair:
    secret: ed25519.Ed25519PrivateKey = field(repr=False, compare=False)
    public: bytes
    key_id: bytes


def sign_keygen(rng: SeededRng) -> SignKeypair:
    secret = ed25519.Ed25519PrivateKey.from_private_bytes(rng.bytes(KEY_SIZE))
    public = secret.public_key().public_bytes(_RAW, _RAW_PUB)
    return SignKeypair(secret=secret, public=public, key_id=hash(public))


def sign(secret: ed25519.Ed25519PrivateKey, message: bytes) -> bytes:
    return secret.sign(message)


def verify(public: bytes, message: bytes, signature: bytes) -> bool:
    """Return True iff ``signature`` is valid; malformed inputs return False."""
    if not all(isinstance(x, bytes) for x in (public, message, signature)):
        return False
    return _verify_cached(public, message, signature)


@functools.lru_cache(maxsize=4096)
def _verify_cached(public: bytes, message: bytes, signature: bytes) -> bool:
    # Verification is a pure function of its inputs; certificates are checked on
    # every request, so memoising spares repeated curve arithmetic.
    try:
        key = ed25519.Ed25519PublicKey.from_public_bytes(public)
        key.verify(signature, message)
    except (InvalidSignature, ValueError, TypeError):
        return False
    return True


# -- key agreement ----------------------------------------------------------


@dataclass(frozen=True)
class SharedSecret:
    key: bytes = field(repr=False)
    role_label: str

    def __post_init__(self):
        if len(self.key) != KEY_SIZE:
            raise ValueError("shared secret must be 32 octets")
        if self.role_label not in ROLE_LABELS:
            raise ValueError(f"unknown role label {self.role_label!r}")


def dh_keygen(rng: SeededRng) -> tuple[x25519.X25519PrivateKey, bytes]:
    secret = x25519.X25519PrivateKey.from_private_bytes(rng.bytes(KEY_SIZE))
    return secret, secret.public_key().public_bytes(_RAW, _RAW_PUB)


def hkdf(material: bytes, label: str, context: bytes = b"") -> bytes:
    return HKDF(
        algorithm=hashes.SHA256(),
        length=KEY_SIZE,
        salt=None,
        info=label.encode() + b"|" + context,
    ).derive(material)


def dh_derive(
    dh_secret: x25519.X25519PrivateKey,
    peer_public: bytes,
    role_label: str = "transport",
    context: bytes = b"",
) -> SharedSecret:
    """Derive a labelled shared secret from an X25519 exchange.

    ``context`` is mixed into the KDF so distinct protocol runs yield
    distinct keys even for the same pair of DH shares.
    """
    try:
        peer = x25519.X25519PublicKey.from_public_bytes(peer_public)
        raw = dh_secret.exchange(peer)
    except (ValueError, TypeError) as exc:
        raise DerivationError(f"invalid peer public value: {exc}") from exc
    return SharedSecret(hkdf(raw, role_label, context), role_label)


def derive_subkey(secret: SharedSecret, role_label: str, context: bytes = b"") -> SharedSecret:
    return SharedSecret(hkdf(secret.key, role_label, context), role_label)


# -- authenticated encryption and MACs --------------------------------------


def _key_bytes(key: SharedSecret | bytes) -> bytes:
    return key.key if isinstance(key, SharedSecret) else key


@functools.lru_cache(maxsize=256)
def _cipher(key: bytes) -> ChaCha20Poly1305:
    # Session keys seal many envelopes; building the cipher object per call is not free.
    return ChaCha20Poly1305(key)


def aead_seal(key: SharedSecret | bytes, nonce: bytes, aad: bytes, plaintext: bytes) -> bytes:
    if len(nonce) != NONCE_SIZE:
        raise ValueError("nonce must be 12 octets")
    return _cipher(_key_bytes(key)).encrypt(nonce, plaintext, aad)


def aead_open(key: SharedSecret | bytes, nonce: bytes, aad: bytes, ciphertext: bytes) -> bytes:
    if len(nonce) != NONCE_SIZE:
        raise AuthenticationFailure("malformed nonce")
    try:
        return _cipher(_key_bytes(key)).decrypt(nonce, ciphertext, aad)
    except InvalidTag as exc:
        raise AuthenticationFailure("AEAD tag check failed") from exc


def mac(key: SharedSecret | bytes, data: bytes) -> bytes:
    return hmac.new(_key_bytes(key), data, hashlib.sha256).digest()


def mac_verify(key: SharedSecret | bytes, data: bytes, tag: bytes) -> bool:
    return hmac.compare_digest(mac(key, data), tag)


class NonceGuard:
    """Records every (key, nonce) pair sealed under it and refuses reuse."""

    def __init__(self):
        self._used: set[tuple[bytes, bytes]] = set()

    def seal(self, key: SharedSecret | bytes, nonce: bytes, aad: bytes, plaintext: bytes) -> bytes:
        marker = (hash(_key_bytes(key)), nonce)
        if marker in self._used:
            raise NonceReuse("nonce already used under this key")
        self._used.add(marker)
        return aead_seal(key, nonce, aad, plaintext)


def counter_nonce(direction: int, counter: int) -> bytes:
    """12-octet nonce: 4-octet direction tag followed by a 64-bit counter."""
    if not 0 <= counter < 2**64:
        raise OverflowError("nonce counter exhausted")
    return direction.to_bytes(4, "big") + counter.to_bytes(8, "big")
