"""Datagram formats, version 1.

Query::

    D5 2B | 01 | mode | resolver ephemeral pub (32) | [r_q (24), mode 1 only] | payload

``payload`` is the plain DNS query in mode 0 and its AEAD ciphertext in mode 1.

Response::

    D5 2B | 01 | 0x80|mode | nameserver ephemeral pub (32) | r_A (16) | ciphertext

The ciphertext covers::

    dns length (2) | dns response | signed credential (113) | ephemeral key signature (64)
    | n child signing keys (1) | n x child w (33) | child A (32, iff n > 0)

Everything before the ciphertext is authenticated as associated data.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field

from . import crypto
from .delegation import SIGNED_SIZE, SignedShortTermKeyStructure

MAGIC = b"\xd5\x2b"
VERSION = 1
RESPONSE_BIT = 0x80

QUERY_NONCE_SIZE = crypto.NONCE_SIZE
RESPONSE_NONCE_SIZE = 16
QUERY_HEADER_SIZE = 4 + crypto.AGREEMENT_KEY_SIZE
RESPONSE_HEADER_SIZE = 4 + crypto.AGREEMENT_KEY_SIZE + RESPONSE_NONCE_SIZE

MAX_CHILD_SIGNING_KEYS = 2
CHILD_KEYS_SIZE = crypto.VERIFY_KEY_SIZE + crypto.AGREEMENT_KEY_SIZE
RESPONSE_OVERHEAD = (
    RESPONSE_HEADER_SIZE + crypto.TAG_SIZE + 2 + SIGNED_SIZE + crypto.SIGNATURE_SIZE + 1
)
DELEGATING_OVERHEAD = RESPONSE_OVERHEAD + CHILD_KEYS_SIZE


class Mode(enum.IntEnum):
    PLAIN = 0
    PRIVATE = 1


class WireErrorKind(enum.Enum):
    BAD_MAGIC = "bad-magic"
    BAD_VERSION = "bad-version"
    TRUNCATED = "truncated"
    BAD_MODE = "bad-mode"
    MALFORMED = "malformed"


class WireError(Exception):
    def __init__(self, kind: WireErrorKind, detail: str = ""):
        super().__init__(f"{kind.value}: {detail}" if detail else kind.value)
        self.kind = kind


class EncodeError(ValueError):
    pass


def is_dnssecplus(datagram: bytes) -> bool:
    return datagram[:2] == MAGIC


@dataclass(frozen=True)
class DnssecPlusQuery:
    mode: Mode
    resolver_ephemeral_pub: bytes
    payload: bytes
    nonce: bytes | None = None

    def header(self) -> bytes:
        return _query_header(self.mode, self.resolver_ephemeral_pub, self.nonce)


def _query_header(mode: int, pub: bytes, nonce: bytes | None) -> bytes:
    head = MAGIC + bytes((VERSION, mode)) + pub
    return head + nonce if nonce is not None else head


def encode_query(q: DnssecPlusQuery) -> bytes:
    if q.mode not in (Mode.PLAIN, Mode.PRIVATE):
        raise EncodeError(f"unknown mode {q.mode}")
    if len(q.resolver_ephemeral_pub) != crypto.AGREEMENT_KEY_SIZE:
        raise EncodeError("resolver ephemeral key must be 32 bytes")
    if (q.nonce is not None) != (q.mode == Mode.PRIVATE):
        raise EncodeError("query nonce is present iff mode is private")
    if q.nonce is not None and len(q.nonce) != QUERY_NONCE_SIZE:
        raise EncodeError("query nonce must be 24 bytes")
    if not q.payload:
        raise EncodeError("empty payload")
    return q.header() + q.payload


def _check_prefix(data: bytes) -> None:
    if len(data) < 2:
        raise WireError(WireErrorKind.TRUNCATED, "no magic")
    if data[:2] != MAGIC:
        raise WireError(WireErrorKind.BAD_MAGIC)
    if len(data) < 4:
        raise WireError(WireErrorKind.TRUNCATED, "no header")
    if data[2] != VERSION:
        raise WireError(WireErrorKind.BAD_VERSION, str(data[2]))


def decode_query(data: bytes) -> DnssecPlusQuery:
    _check_prefix(data)
    mode_byte = data[3]
    if mode_byte not in (Mode.PLAIN, Mode.PRIVATE):
        raise WireError(WireErrorKind.BAD_MODE, str(mode_byte))
    mode = Mode(mode_byte)
    pos = QUERY_HEADER_SIZE
    nonce = None
    if mode == Mode.PRIVATE:
        nonce = bytes(data[pos:pos + QUERY_NONCE_SIZE])
        pos += QUERY_NONCE_SIZE
    if len(data) <= pos:
        raise WireError(WireErrorKind.TRUNCATED, "no payload")
    return DnssecPlusQuery(mode, bytes(data[4:QUERY_HEADER_SIZE]), bytes(data[pos:]), nonce)


def seal_query(dns_query: bytes, resolver_ephemeral_pub: bytes, nonce: bytes, session: tuple[bytes, bytes]) -> DnssecPlusQuery:
    """Build a private-mode query whose payload is encrypted under ``session``."""
    key, aead_nonce = session
    header = _query_header(Mode.PRIVATE, resolver_ephemeral_pub, nonce)
    ct = crypto.aead_encrypt(key, dns_query, aead_nonce, header)
    return DnssecPlusQuery(Mode.PRIVATE, resolver_ephemeral_pub, ct, nonce)


def open_query(q: DnssecPlusQuery, session: tuple[bytes, bytes]) -> bytes:
    key, aead_nonce = session
    return crypto.aead_decrypt(key, q.payload, aead_nonce, q.header())


@dataclass(frozen=True)
class ResponseBody:
    """The encrypted part of a response."""

    dns_response: bytes
    credential: SignedShortTermKeyStructure
    ephemeral_signature: bytes
    child_signing_keys: tuple[bytes, ...] = ()
    child_agreement_key: bytes | None = None

    @property
    def delegating(self) -> bool:
        return bool(self.child_signing_keys)

    def to_bytes(self) -> bytes:
        n = len(self.child_signing_keys)
        if n > MAX_CHILD_SIGNING_KEYS:
            raise EncodeError("too many child signing keys")
        if (n > 0) != (self.child_agreement_key is not None):
            raise EncodeError("child agreement key must accompany child signing keys")
        if len(self.dns_response) > 0xFFFF:
            raise EncodeError("DNS response too long")
        if len(self.ephemeral_signature) != crypto.SIGNATURE_SIZE:
            raise EncodeError("ephemeral key signature must be 64 bytes")
        parts = [
            struct.pack(">H", len(self.dns_response)),
            self.dns_response,
            self.credential.to_bytes(),
            self.ephemeral_signature,
            bytes((n,)),
        ]
        for w in self.child_signing_keys:
            if len(w) != crypto.VERIFY_KEY_SIZE:
                raise EncodeError("child signing key must be 33 bytes")
            parts.append(w)
        if n:
            if len(self.child_agreement_key) != crypto.AGREEMENT_KEY_SIZE:
                raise EncodeError("child agreement key must be 32 bytes")
            parts.append(self.child_agreement_key)
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, data: bytes) -> "ResponseBody":
        if len(data) < 2:
            raise WireError(WireErrorKind.TRUNCATED, "no length prefix")
        (n_dns,) = struct.unpack_from(">H", data)
        pos = 2
        fixed = n_dns + SIGNED_SIZE + crypto.SIGNATURE_SIZE + 1
        if len(data) < pos + fixed:
            raise WireError(WireErrorKind.TRUNCATED, "inner fields")
        dns_response = bytes(data[pos:pos + n_dns])
        pos += n_dns
        try:
            credential = SignedShortTermKeyStructure.from_bytes(bytes(data[pos:pos + SIGNED_SIZE]))
        except ValueError as exc:
            raise WireError(WireErrorKind.MALFORMED, f"credential: {exc}") from None
        pos += SIGNED_SIZE
        se = bytes(data[pos:pos + crypto.SIGNATURE_SIZE])
        pos += crypto.SIGNATURE_SIZE
        n = data[pos]
        pos += 1
        if n > MAX_CHILD_SIGNING_KEYS:
            raise WireError(WireErrorKind.MALFORMED, f"{n} child signing keys")
        expected = pos + (n * crypto.VERIFY_KEY_SIZE + crypto.AGREEMENT_KEY_SIZE if n else 0)
        if len(data) < expected:
            raise WireError(WireErrorKind.TRUNCATED, "child keys")
        if len(data) > expected:
            raise WireError(WireErrorKind.MALFORMED, "trailing bytes")
        ws = tuple(
            bytes(data[pos + k * crypto.VERIFY_KEY_SIZE:pos + (k + 1) * crypto.VERIFY_KEY_SIZE])
            for k in range(n)
        )
        agreement = bytes(data[expected - crypto.AGREEMENT_KEY_SIZE:expected]) if n else None
        return cls(dns_response, credential, se, ws, agreement)


@dataclass(frozen=True)
class ResponseEnvelope:
    """A response before decryption: plaintext header plus opaque ciphertext."""

    mode: Mode
    nameserver_ephemeral_pub: bytes
    nonce: bytes
    ciphertext: bytes = field(repr=False)

    def header(self) -> bytes:
        return _response_header(self.mode, self.nameserver_ephemeral_pub, self.nonce)

    def open(self, session: tuple[bytes, bytes]) -> ResponseBody:
        key, aead_nonce = session
        plaintext = crypto.aead_decrypt(key, self.ciphertext, aead_nonce, self.header())
        return ResponseBody.from_bytes(plaintext)


def _response_header(mode: int, pub: bytes, nonce: bytes) -> bytes:
    return MAGIC + bytes((VERSION, RESPONSE_BIT | mode)) + pub + nonce


def encode_response(body: ResponseBody, *, mode: Mode, ephemeral_pub: bytes, nonce: bytes, session: tuple[bytes, bytes]) -> bytes:
    if len(ephemeral_pub) != crypto.AGREEMENT_KEY_SIZE:
        raise EncodeError("nameserver ephemeral key must be 32 bytes")
    if len(nonce) != RESPONSE_NONCE_SIZE:
        raise EncodeError("response nonce must be 16 bytes")
    key, aead_nonce = session
    header = _response_header(int(mode), ephemeral_pub, nonce)
    return header + crypto.aead_encrypt(key, body.to_bytes(), aead_nonce, header)


def decode_response(data: bytes) -> ResponseEnvelope:
    _check_prefix(data)
    flags = data[3]
    if not flags & RESPONSE_BIT or (flags & ~RESPONSE_BIT) not in (Mode.PLAIN, Mode.PRIVATE):
        raise WireError(WireErrorKind.BAD_MODE, f"flags {flags:#04x}")
    if len(data) < RESPONSE_HEADER_SIZE + crypto.TAG_SIZE:
        raise WireError(WireErrorKind.TRUNCATED, "response header")
    return ResponseEnvelope(
        Mode(flags & ~RESPONSE_BIT),
        bytes(data[4:4 + crypto.AGREEMENT_KEY_SIZE]),
        bytes(data[4 + crypto.AGREEMENT_KEY_SIZE:RESPONSE_HEADER_SIZE]),
        bytes(data[RESPONSE_HEADER_SIZE:]),
    )


def decode_and_open_response(data: bytes, session_for) -> tuple[ResponseEnvelope, ResponseBody]:
    """Parse and decrypt a response.

    ``session_for`` maps the envelope to ``(key, aead_nonce)``; it sees the
    nameserver's ephemeral key and nonce before anything is decrypted.
    AuthError from decryption propagates unchanged.
    """
    env = decode_response(data)
    return env, env.open(session_for(env))


def response_overhead(delegating: bool, child_signing_keys: int = 1) -> int:
    if not delegating:
        return RESPONSE_OVERHEAD
    return RESPONSE_OVERHEAD + child_signing_keys * crypto.VERIFY_KEY_SIZE + crypto.AGREEMENT_KEY_SIZE
