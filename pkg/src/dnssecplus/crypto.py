"""Pinned cryptographic primitives.

Signatures are ECDSA P-256/SHA-256 in a fixed 64-byte ``r || s`` encoding with
33-byte compressed verify keys. Key agreement is X25519. Authenticated
encryption is XChaCha20-Poly1305 (libsodium via PyNaCl), 24-byte nonce and
16-byte tag. Session keys come from HKDF-SHA256 with the wire randomizer as
salt and an ASCII label for direction separation.

There is deliberately no algorithm negotiation anywhere in this module.
"""

from __future__ import annotations

import functools
import hashlib
import os
from dataclasses import dataclass, field

import nacl.bindings
import nacl.exceptions
from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric import ec, x25519
from cryptography.hazmat.primitives.asymmetric.utils import (
    decode_dss_signature,
    encode_dss_signature,
)
from cryptography.hazmat.primitives.kdf.hkdf import HKDF

VERIFY_KEY_SIZE = 33
SIGNING_KEY_SIZE = 32
SIGNATURE_SIZE = 64
AGREEMENT_KEY_SIZE = 32
SHARED_SECRET_SIZE = 32
KEY_SIZE = 32
NONCE_SIZE = 24
TAG_SIZE = 16

QUERY_LABEL = b"dnssecplus/query"
RESPONSE_LABEL = b"dnssecplus/response"
CHANNEL_LABEL = b"dnssecplus/channel"
LABELS = frozenset({QUERY_LABEL, RESPONSE_LABEL, CHANNEL_LABEL})

_CURVE = ec.SECP256R1()
_ECDSA = ec.ECDSA(hashes.SHA256())


class CryptoError(Exception):
    """Malformed key material or a rejected key-agreement input."""


class AuthError(CryptoError):
    """Authenticated decryption failed: wrong key, wrong nonce or tampering."""


@dataclass(frozen=True)
class SigningKeypair:
    private: ec.EllipticCurvePrivateKey = field(repr=False)
    public: bytes

    @classmethod
    def from_private_bytes(cls, data: bytes) -> "SigningKeypair":
        if len(data) != SIGNING_KEY_SIZE:
            raise CryptoError("signing key must be 32 bytes")
        try:
            priv = ec.derive_private_key(int.from_bytes(data, "big"), _CURVE)
        except ValueError as exc:
            raise CryptoError(str(exc)) from None
        return cls(priv, _compress(priv.public_key()))

    def private_bytes(self) -> bytes:
        return self.private.private_numbers().private_value.to_bytes(SIGNING_KEY_SIZE, "big")


@dataclass(frozen=True)
class AgreementKeypair:
    private: bytes = field(repr=False)
    public: bytes

    @classmethod
    def from_private_bytes(cls, data: bytes) -> "AgreementKeypair":
        if len(data) != AGREEMENT_KEY_SIZE:
            raise CryptoError("agreement key must be 32 bytes")
        priv = x25519.X25519PrivateKey.from_private_bytes(data)
        return cls(data, priv.public_key().public_bytes_raw())


def _compress(pub: ec.EllipticCurvePublicKey) -> bytes:
    return pub.public_bytes(serialization.Encoding.X962, serialization.PublicFormat.CompressedPoint)


@functools.lru_cache(maxsize=1024)
def _load_verify_key(data: bytes) -> ec.EllipticCurvePublicKey:
    return ec.EllipticCurvePublicKey.from_encoded_point(_CURVE, data)


def random_bytes(n: int) -> bytes:
    return os.urandom(n)


def gen_signing_keypair() -> SigningKeypair:
    priv = ec.generate_private_key(_CURVE)
    return SigningKeypair(priv, _compress(priv.public_key()))


def sign(message: bytes, key: ec.EllipticCurvePrivateKey | SigningKeypair) -> bytes:
    """Sign ``message`` and return the 64-byte raw ``r || s`` signature.

    The empty message is accepted and signed like any other byte string.
    """
    if isinstance(key, SigningKeypair):
        key = key.private
    r, s = decode_dss_signature(key.sign(bytes(message), _ECDSA))
    return r.to_bytes(32, "big") + s.to_bytes(32, "big")


def verify(message: bytes, sig: bytes, key: bytes) -> bool:
    """Check a raw signature. Any malformed input yields ``False``."""
    if len(sig) != SIGNATURE_SIZE or len(key) != VERIFY_KEY_SIZE:
        return False
    r = int.from_bytes(sig[:32], "big")
    s = int.from_bytes(sig[32:], "big")
    if r == 0 or s == 0:
        return False
    try:
        pub = _load_verify_key(bytes(key))
        pub.verify(encode_dss_signature(r, s), bytes(message), _ECDSA)
    except (InvalidSignature, ValueError):
        return False
    return True


def gen_agreement_keypair() -> AgreementKeypair:
    priv = x25519.X25519PrivateKey.generate()
    return AgreementKeypair(
        priv.private_bytes_raw(),
        priv.public_key().public_bytes_raw(),
    )


def dh(private: bytes | AgreementKeypair, public: bytes) -> bytes:
    """X25519 shared secret. Low-order or malformed public keys raise CryptoError."""
    if isinstance(private, AgreementKeypair):
        private = private.private
    if len(public) != AGREEMENT_KEY_SIZE or len(private) != AGREEMENT_KEY_SIZE:
        raise CryptoError("agreement keys must be 32 bytes")
    try:
        priv = x25519.X25519PrivateKey.from_private_bytes(bytes(private))
        return priv.exchange(x25519.X25519PublicKey.from_public_bytes(bytes(public)))
    except ValueError as exc:
        raise CryptoError(f"key agreement rejected: {exc}") from None


def _expand(master: bytes, salt: bytes, label: bytes, context: bytes) -> bytes:
    if label not in LABELS:
        raise ValueError(f"unknown KDF label {label!r}")
    info = label + (b"|" + hashlib.sha256(context).digest() if context else b"")
    return HKDF(hashes.SHA256(), KEY_SIZE + NONCE_SIZE, salt, info).derive(master)


def derive_session(master: bytes, salt: bytes, label: bytes, context: bytes = b"") -> tuple[bytes, bytes]:
    """Return ``(key, aead_nonce)`` for one message.

    ``salt`` is the random value carried on the wire. The AEAD nonce is part of
    the HKDF output, so it never repeats even when an ephemeral key is reused.
    ``context`` optionally binds the keys to a transcript (the exact query
    datagram for responses).
    """
    okm = _expand(master, salt, label, context)
    return okm[:KEY_SIZE], okm[KEY_SIZE:]


def derive_key(master: bytes, nonce: bytes, label: bytes, context: bytes = b"") -> bytes:
    return derive_session(master, nonce, label, context)[0]


def aead_encrypt(key: bytes, plaintext: bytes, nonce: bytes, associated_data: bytes = b"") -> bytes:
    if len(key) != KEY_SIZE or len(nonce) != NONCE_SIZE:
        raise CryptoError("bad AEAD key or nonce size")
    return nacl.bindings.crypto_aead_xchacha20poly1305_ietf_encrypt(
        bytes(plaintext), bytes(associated_data) or None, bytes(nonce), bytes(key)
    )


def aead_decrypt(key: bytes, ciphertext: bytes, nonce: bytes, associated_data: bytes = b"") -> bytes:
    if len(key) != KEY_SIZE or len(nonce) != NONCE_SIZE or len(ciphertext) < TAG_SIZE:
        raise AuthError("malformed AEAD input")
    try:
        return nacl.bindings.crypto_aead_xchacha20poly1305_ietf_decrypt(
            bytes(ciphertext), bytes(associated_data) or None, bytes(nonce), bytes(key)
        )
    except nacl.exceptions.CryptoError:
        raise AuthError("authenticated decryption failed") from None
