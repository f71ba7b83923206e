"""Mutually authenticated channel between a zone's nameservers and its key server.

Both ends hold pre-provisioned static X25519 keys. The channel key is derived
from their static-static DH; every message carries a fresh random nonce and a
strictly increasing per-sender counter inside the ciphertext. A receiver
refuses any counter it has already seen, so a captured request cannot be
replayed to obtain a second signature.

Datagram::

    D5 2C | 01 | op | sender id (4) | nonce (24) | AEAD(counter (8) | [request nonce (24)] | body)
"""

from __future__ import annotations

import enum
import struct
import threading
import time
from dataclasses import dataclass

from . import crypto

MAGIC = b"\xd5\x2c"
VERSION = 1
KEYSERVER_ID = 0xFFFFFFFF
HEADER_SIZE = 2 + 1 + 1 + 4 + crypto.NONCE_SIZE
_COUNTER = struct.Struct(">Q")


class Op(enum.IntEnum):
    SIGN_REQUEST = 1
    SIGN_OK = 2
    REJECT = 3
    INSTALL_AGREEMENT = 4
    REMOVE_AGREEMENT = 5
    ACK = 6


_RESPONSES = {Op.SIGN_OK, Op.REJECT, Op.ACK}


class ChannelError(crypto.AuthError):
    pass


class ReplayError(ChannelError):
    pass


def is_channel(datagram: bytes) -> bool:
    return datagram[:2] == MAGIC


@dataclass(frozen=True)
class Message:
    op: Op
    sender_id: int
    nonce: bytes
    counter: int
    body: bytes
    in_reply_to: bytes | None = None


class ChannelEndpoint:
    """One side of the channel. ``peers`` maps sender id to the peer's static public key."""

    def __init__(self, own_id: int, static: crypto.AgreementKeypair):
        self.own_id = own_id
        self.static = static
        self._peers: dict[int, bytes] = {}
        self._keys: dict[int, bytes] = {}
        self._seen: dict[int, int] = {}
        # time-seeded so a restarted endpoint keeps counters above what peers have seen
        self._counter = time.time_ns() // 1000
        self._lock = threading.Lock()

    def add_peer(self, peer_id: int, static_pub: bytes) -> None:
        master = crypto.dh(self.static, static_pub)
        lo, hi = sorted((self.own_id, peer_id))
        salt = struct.pack(">II", lo, hi)
        with self._lock:
            self._peers[peer_id] = static_pub
            self._keys[peer_id] = crypto.derive_key(master, salt, crypto.CHANNEL_LABEL)

    def has_peer(self, peer_id: int) -> bool:
        return peer_id in self._keys

    def seal(self, peer_id: int, op: Op, body: bytes, in_reply_to: bytes | None = None) -> bytes:
        key = self._keys[peer_id]
        with self._lock:
            self._counter += 1
            counter = self._counter
        nonce = crypto.random_bytes(crypto.NONCE_SIZE)
        header = MAGIC + bytes((VERSION, op)) + struct.pack(">I", self.own_id) + nonce
        inner = _COUNTER.pack(counter) + (in_reply_to or b"") + body
        return header + crypto.aead_encrypt(key, inner, nonce, header)

    def open(self, datagram: bytes, expect_reply_to: bytes | None = None) -> Message:
        """Authenticate and decrypt; raises ChannelError or ReplayError."""
        if len(datagram) < HEADER_SIZE + crypto.TAG_SIZE or not is_channel(datagram):
            raise ChannelError("not a channel message")
        if datagram[2] != VERSION:
            raise ChannelError("bad channel version")
        try:
            op = Op(datagram[3])
        except ValueError:
            raise ChannelError("unknown op") from None
        (sender,) = struct.unpack_from(">I", datagram, 4)
        key = self._keys.get(sender)
        if key is None:
            raise ChannelError(f"unknown sender {sender}")
        header = bytes(datagram[:HEADER_SIZE])
        nonce = header[8:]
        try:
            inner = crypto.aead_decrypt(key, datagram[HEADER_SIZE:], nonce, header)
        except crypto.AuthError:
            raise ChannelError(f"authentication failed for sender {sender}") from None
        if len(inner) < _COUNTER.size:
            raise ChannelError("short channel message")
        (counter,) = _COUNTER.unpack_from(inner)
        pos = _COUNTER.size
        reply_to = None
        if op in _RESPONSES:
            reply_to = inner[pos:pos + crypto.NONCE_SIZE]
            pos += crypto.NONCE_SIZE
            if expect_reply_to is not None and reply_to != expect_reply_to:
                raise ChannelError("response does not answer this request")
        with self._lock:
            if counter <= self._seen.get(sender, 0):
                raise ReplayError(f"replayed counter {counter} from {sender}")
            self._seen[sender] = counter
        return Message(op, sender, nonce, counter, inner[pos:], reply_to)

    def request_nonce(self, datagram: bytes) -> bytes:
        return bytes(datagram[8:HEADER_SIZE])


def call(endpoint: ChannelEndpoint, transport, addr, peer_id: int, op: Op, body: bytes, timeout: float = 2.0) -> Message | None:
    """Send a request and return the authenticated reply, or None on silence."""
    datagram = endpoint.seal(peer_id, op, body)
    reply = transport.exchange(addr, datagram, timeout)
    if reply is None:
        return None
    return endpoint.open(reply, expect_reply_to=endpoint.request_nonce(datagram))
