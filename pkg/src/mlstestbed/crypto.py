"""Cryptographic services behind one provider object.

The suite is fixed: X25519 for the KEM, ChaCha20-Poly1305 for the AEAD,
HMAC-SHA256 based HKDF for derivations and Ed25519 for signatures.
Every piece of key material is drawn from the provider's entropy source, so a
provider built with :meth:`CryptoProvider.seeded` replays a whole simulation
byte for byte.
"""

from __future__ import annotations

import hashlib
import hmac
import os
import random
import threading
from dataclasses import dataclass
from typing import Callable

from cryptography.exceptions import InvalidSignature, InvalidTag
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)
from cryptography.hazmat.primitives.asymmetric.x25519 import (
    X25519PrivateKey,
    X25519PublicKey,
)
from cryptography.hazmat.primitives.ciphers.aead import ChaCha20Poly1305

HASH_LEN = 32
NONCE_LEN = 12
KEM_PK_LEN = 32
LABEL_PREFIX = b"mlstestbed "

Secret = bytes


class CryptoError(Exception):
    pass


class DecapError(CryptoError):
    pass


class OpenError(CryptoError):
    pass


@dataclass(frozen=True)
class KemKeyPair:
    public_key: bytes
    private_key: bytes


@dataclass(frozen=True)
class SignatureKeyPair:
    public_key: bytes
    private_key: bytes


# Nominal per-operation costs in microseconds, used by the deterministic
# cost clock. Roughly the timings of the real primitives on a slow core.
OP_WEIGHTS_US = {
    "kem_keygen": 90.0,
    "kem_encap": 180.0,
    "kem_decap": 90.0,
    "sig_keygen": 70.0,
    "sign": 70.0,
    "verify": 160.0,
    "aead": 6.0,
    "kdf": 2.0,
    "mac": 2.0,
    "hash": 1.0,
}
PER_BYTE_US = 0.004


class OpMeter:
    """Accumulates a modelled cost for every primitive call."""

    def __init__(self):
        self.total_us = 0.0
        self.counts: dict[str, int] = {}

    def add(self, op: str, nbytes: int = 0) -> None:
        self.total_us += OP_WEIGHTS_US[op] + PER_BYTE_US * nbytes
        self.counts[op] = self.counts.get(op, 0) + 1


def _encode_label(label: str, context: bytes) -> bytes:
    raw = LABEL_PREFIX + label.encode()
    return len(raw).to_bytes(2, "big") + raw + len(context).to_bytes(4, "big") + context


class CryptoProvider:
    """Stateless (apart from its entropy stream) crypto service.

    ``entropy`` is a callable returning ``n`` random bytes; it defaults to
    :func:`os.urandom`.
    """

    def __init__(self, entropy: Callable[[int], bytes] | None = None):
        self._entropy = entropy or os.urandom
        self._lock = threading.Lock()
        self.meter = OpMeter()

    @classmethod
    def seeded(cls, seed: int) -> "CryptoProvider":
        rng = random.Random(seed)
        return cls(entropy=rng.randbytes)

    @classmethod
    def system(cls) -> "CryptoProvider":
        return cls()

    def random_bytes(self, n: int) -> bytes:
        with self._lock:
            return self._entropy(n)

    def random_secret(self) -> Secret:
        return self.random_bytes(HASH_LEN)

    # -- hashing and key derivation ------------------------------------

    def hash(self, data: bytes) -> bytes:
        self.meter.add("hash", len(data))
        return hashlib.sha256(data).digest()

    def kdf_extract(self, salt: bytes, ikm: bytes) -> Secret:
        self.meter.add("kdf")
        return hmac.new(salt or bytes(HASH_LEN), ikm, hashlib.sha256).digest()

    def kdf_derive(self, secret: Secret, label: str, context: bytes = b"") -> Secret:
        """HKDF-Expand of ``secret`` to one hash length under a labelled info."""
        if not label:
            raise ValueError("label must be non-empty")
        self.meter.add("kdf")
        info = _encode_label(label, context)
        return hmac.new(secret, info + b"\x01", hashlib.sha256).digest()

    def mac(self, key: Secret, data: bytes) -> bytes:
        self.meter.add("mac", len(data))
        return hmac.new(key, data, hashlib.sha256).digest()

    def mac_verify(self, key: Secret, data: bytes, tag: bytes) -> bool:
        return hmac.compare_digest(self.mac(key, data), tag)

    # -- KEM -------------------------------------------------------------

    def generate_kem_keypair(self) -> KemKeyPair:
        return self.derive_kem_keypair(self.random_secret())

    def derive_kem_keypair(self, secret: Secret) -> KemKeyPair:
        self.meter.add("kem_keygen")
        sk_bytes = self.kdf_derive(secret, "kem keypair")
        sk = X25519PrivateKey.from_private_bytes(sk_bytes)
        return KemKeyPair(sk.public_key().public_bytes_raw(), sk_bytes)

    def kem_encap(self, public_key: bytes) -> tuple[bytes, Secret]:
        self.meter.add("kem_encap")
        try:
            pk = X25519PublicKey.from_public_bytes(public_key)
        except ValueError as exc:
            raise CryptoError("malformed KEM public key") from exc
        eph = X25519PrivateKey.from_private_bytes(self.random_bytes(32))
        enc = eph.public_key().public_bytes_raw()
        try:
            dh = eph.exchange(pk)
        except ValueError as exc:
            raise CryptoError("degenerate KEM public key") from exc
        return enc, self.kdf_derive(dh, "kem shared", enc + public_key)

    def kem_decap(self, private_key: bytes, ciphertext: bytes) -> Secret:
        self.meter.add("kem_decap")
        if len(ciphertext) != KEM_PK_LEN:
            raise DecapError("malformed KEM ciphertext")
        try:
            sk = X25519PrivateKey.from_private_bytes(private_key)
            dh = sk.exchange(X25519PublicKey.from_public_bytes(ciphertext))
        except ValueError as exc:
            raise DecapError(str(exc)) from exc
        pk = sk.public_key().public_bytes_raw()
        return self.kdf_derive(dh, "kem shared", ciphertext + pk)

    # -- AEAD ------------------------------------------------------------

    def aead_seal(self, key: Secret, nonce: bytes, aad: bytes, plaintext: bytes) -> bytes:
        self.meter.add("aead", len(plaintext))
        return ChaCha20Poly1305(key).encrypt(nonce, plaintext, aad)

    def aead_open(self, key: Secret, nonce: bytes, aad: bytes, ciphertext: bytes) -> bytes:
        self.meter.add("aead", len(ciphertext))
        try:
            return ChaCha20Poly1305(key).decrypt(nonce, ciphertext, aad)
        except (InvalidTag, ValueError) as exc:
            raise OpenError("authentication failed") from exc

    # -- KEM + AEAD ------------------------------------------------------

    def hpke_seal(self, public_key: bytes, info: bytes, aad: bytes, plaintext: bytes) -> tuple[bytes, bytes]:
        enc, shared = self.kem_encap(public_key)
        key = self.kdf_derive(shared, "hpke key", info)
        nonce = self.kdf_derive(shared, "hpke nonce", info)[:NONCE_LEN]
        return enc, self.aead_seal(key, nonce, aad, plaintext)

    def hpke_open(self, private_key: bytes, enc: bytes, info: bytes, aad: bytes, ciphertext: bytes) -> bytes:
        shared = self.kem_decap(private_key, enc)
        key = self.kdf_derive(shared, "hpke key", info)
        nonce = self.kdf_derive(shared, "hpke nonce", info)[:NONCE_LEN]
        return self.aead_open(key, nonce, aad, ciphertext)

    # -- signatures ------------------------------------------------------

    def generate_signature_keypair(self) -> SignatureKeyPair:
        self.meter.add("sig_keygen")
        sk = Ed25519PrivateKey.from_private_bytes(self.random_bytes(32))
        return SignatureKeyPair(sk.public_key().public_bytes_raw(), sk.private_bytes_raw())

    def sign(self, private_key: bytes, message: bytes) -> bytes:
        self.meter.add("sign", len(message))
        return Ed25519PrivateKey.from_private_bytes(private_key).sign(message)

    def verify(self, public_key: bytes, message: bytes, signature: bytes) -> bool:
        self.meter.add("verify", len(message))
        try:
            Ed25519PublicKey.from_public_bytes(public_key).verify(signature, message)
        except (InvalidSignature, ValueError):
            return False
        return True
