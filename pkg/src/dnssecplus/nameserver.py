"""Authoritative nameserver instance.

An instance never holds the zone signing key. It signs its own ephemeral keys
with a short-term key that the key server certifies, decrypts private-mode
queries with the zone agreement key the key server pushed to it, and stops
answering altogether once its credential has expired.
"""

from __future__ import annotations

import enum
import logging
import struct
import threading
from dataclasses import dataclass, field

import dns.exception
import dns.flags
import dns.message

from . import channel, crypto, delegation, wire
from .channel import ChannelEndpoint, ChannelError, Op
from .delegation import ShortTermKeyStructure, SignedShortTermKeyStructure
from .transport import Address
from .wire import Mode, WireError, WireErrorKind
from .zone import LookupKind, VanillaResponder, ZoneData, render

log = logging.getLogger(__name__)

DEFAULT_REUSE_WINDOW = 120.0
DEFAULT_REUSE_CAP = 1024
RENEW_FRACTION = 0.5


class ModeSupport(enum.Enum):
    BOTH = "both"
    PRIVACY_ONLY = "privacy-only"


@dataclass(frozen=True)
class Credential:
    signed: SignedShortTermKeyStructure
    key: crypto.SigningKeypair = field(repr=False)

    @property
    def expiration(self) -> int:
        return self.signed.structure.expiration


@dataclass
class _EphemeralSlot:
    keypair: crypto.AgreementKeypair
    signature: bytes
    created: float
    uses: int = 0


class TokenBucket:
    """Per-source response budget: ``rate`` per second with an equal burst."""

    def __init__(self, rate: float, clock, burst: float | None = None):
        self.rate = rate
        self.burst = burst if burst is not None else rate
        self.clock = clock
        self._buckets: dict[str, tuple[float, float]] = {}
        self._lock = threading.Lock()

    def allow(self, source: str) -> bool:
        now = self.clock.now()
        with self._lock:
            tokens, last = self._buckets.get(source, (self.burst, now))
            tokens = min(self.burst, tokens + (now - last) * self.rate)
            if tokens < 1:
                self._buckets[source] = (tokens, now)
                return False
            self._buckets[source] = (tokens - 1, now)
            return True


@dataclass
class NameserverConfig:
    lifetime: int = delegation.DEFAULT_LIFETIME
    mode_support: ModeSupport = ModeSupport.BOTH
    dual_stack: bool = False
    reuse_window: float | None = None
    reuse_cap: int = DEFAULT_REUSE_CAP
    rate_limit: float | None = None
    # Only a misbehaving or compromised instance would turn this off; the
    # attack harness uses it to play a server that keeps using a dead credential.
    enforce_expiry: bool = True


class Nameserver:
    def __init__(
        self,
        zone: ZoneData,
        nameserver_id: int,
        channel_static: crypto.AgreementKeypair,
        clock,
        *,
        transport=None,
        keyserver_addr: Address | None = None,
        keyserver_channel_pub: bytes | None = None,
        config: NameserverConfig | None = None,
    ):
        self.zone = zone
        self.nameserver_id = nameserver_id
        self.clock = clock
        self.transport = transport
        self.keyserver_addr = keyserver_addr
        self.config = config or NameserverConfig()
        self.endpoint = ChannelEndpoint(nameserver_id, channel_static)
        if keyserver_channel_pub is not None:
            self.endpoint.add_peer(channel.KEYSERVER_ID, keyserver_channel_pub)
        self.credential: Credential | None = None
        self.agreement_keys: dict[int, crypto.AgreementKeypair] = {}
        self.vanilla = VanillaResponder(zone)
        self.rate_limiter = TokenBucket(self.config.rate_limit, clock) if self.config.rate_limit else None
        self._slot: _EphemeralSlot | None = None
        self._slot_lock = threading.Lock()
        self.stats = {"answered": 0, "dropped": 0, "vanilla": 0}

    @property
    def channel_public(self) -> bytes:
        return self.endpoint.static.public

    # -- key inventory --------------------------------------------------------
    def install_agreement(self, generation: int, private: bytes) -> None:
        pair = crypto.AgreementKeypair.from_private_bytes(private)
        updated = dict(self.agreement_keys)
        updated[generation] = pair
        self.agreement_keys = updated

    def remove_agreement(self, generation: int) -> None:
        updated = dict(self.agreement_keys)
        updated.pop(generation, None)
        self.agreement_keys = updated

    def key_inventory(self) -> list[tuple[str, bytes]]:
        """(kind, public key) for every private key this instance holds."""
        inv = []
        if self.credential is not None:
            inv.append(("short-term-signing", self.credential.key.public))
        inv += [("zone-agreement", k.public) for k in self.agreement_keys.values()]
        if self._slot is not None:
            inv.append(("ephemeral-agreement", self._slot.keypair.public))
        return inv

    # -- credential ---------------------------------------------------------------
    def answering(self, now: float | None = None) -> bool:
        if self.credential is None:
            return False
        now = self.clock.now() if now is None else now
        return now <= self.credential.expiration or not self.config.enforce_expiry

    def refresh_due(self, now: float | None = None) -> bool:
        if self.credential is None:
            return True
        now = self.clock.now() if now is None else now
        s = self.credential.signed.structure
        return now >= s.inception + RENEW_FRACTION * s.lifetime

    def refresh_credential(self) -> bool:
        """Generate a fresh short-term key and have the key server certify it."""
        if self.transport is None or self.keyserver_addr is None:
            return False
        omega = crypto.gen_signing_keypair()
        now = int(self.clock.now())
        structure = ShortTermKeyStructure(
            now, now + self.config.lifetime, omega.public, self.nameserver_id, self.zone.level
        )
        try:
            reply = channel.call(
                self.endpoint, self.transport, self.keyserver_addr,
                channel.KEYSERVER_ID, Op.SIGN_REQUEST, structure.to_bytes(),
            )
        except ChannelError as exc:
            log.warning("ns %d: bad reply from key server: %s", self.nameserver_id, exc)
            return False
        if reply is None:
            log.warning("ns %d: key server unreachable", self.nameserver_id)
            return False
        if reply.op == Op.REJECT:
            log.warning("ns %d: credential rejected: %s", self.nameserver_id, reply.body.decode(errors="replace"))
            return False
        if reply.op != Op.SIGN_OK:
            return False
        try:
            signed = SignedShortTermKeyStructure.from_bytes(reply.body)
        except ValueError:
            return False
        return self.install_credential(signed, omega)

    def install_credential(self, signed: SignedShortTermKeyStructure, key: crypto.SigningKeypair) -> bool:
        if signed.structure.stk_public_key != key.public:
            log.error("ns %d: signed structure does not carry our key; not installed", self.nameserver_id)
            return False
        self.credential = Credential(signed, key)
        with self._slot_lock:
            self._slot = None
        return True

    def maintain(self) -> None:
        if self.refresh_due():
            self.refresh_credential()

    # -- datagram entry points ----------------------------------------------------------
    def handle_datagram(self, datagram: bytes, src: Address | None = None) -> bytes | None:
        if channel.is_channel(datagram):
            return self.handle_channel(datagram)
        return self.handle_query(datagram, src)

    def handle_channel(self, datagram: bytes) -> bytes | None:
        try:
            msg = self.endpoint.open(datagram)
        except ChannelError as exc:
            log.warning("ns %d: dropping channel datagram: %s", self.nameserver_id, exc)
            return None
        if msg.sender_id != channel.KEYSERVER_ID or len(msg.body) < 4:
            return None
        (generation,) = struct.unpack_from(">I", msg.body)
        if msg.op == Op.INSTALL_AGREEMENT:
            try:
                self.install_agreement(generation, msg.body[4:])
            except crypto.CryptoError:
                return None
        elif msg.op == Op.REMOVE_AGREEMENT:
            self.remove_agreement(generation)
        else:
            return None
        return self.endpoint.seal(channel.KEYSERVER_ID, Op.ACK, msg.body[:4], msg.nonce)

    def _drop(self, why: str) -> None:
        self.stats["dropped"] += 1
        log.debug("ns %d: drop (%s)", self.nameserver_id, why)

    def _ephemeral(self, now: float, cred: Credential) -> _EphemeralSlot:
        window = self.config.reuse_window
        if window is None:
            kp = crypto.gen_agreement_keypair()
            return _EphemeralSlot(kp, crypto.sign(kp.public, cred.key), now, 1)
        with self._slot_lock:
            slot = self._slot
            if slot is None or now - slot.created >= window or slot.uses >= self.config.reuse_cap:
                kp = crypto.gen_agreement_keypair()
                slot = _EphemeralSlot(kp, crypto.sign(kp.public, cred.key), now)
                self._slot = slot
            slot.uses += 1
            return slot

    def handle_query(self, datagram: bytes, src: Address | None = None) -> bytes | None:
        """Answer one datagram, or return None to drop it silently."""
        if self.rate_limiter is not None and src is not None and not self.rate_limiter.allow(src[0]):
            self._drop("rate limited")
            return None
        try:
            query = wire.decode_query(datagram)
        except WireError as exc:
            if exc.kind is WireErrorKind.BAD_MAGIC and self.config.dual_stack:
                self.stats["vanilla"] += 1
                return self.vanilla.handle(datagram, src)
            self._drop(str(exc))
            return None

        now = self.clock.now()
        cred = self.credential
        if cred is None or not self.answering(now):
            self._drop("no valid credential")
            return None
        if query.mode == Mode.PLAIN and self.config.mode_support is ModeSupport.PRIVACY_ONLY:
            self._drop("plain mode disabled")
            return None

        if query.mode == Mode.PRIVATE:
            dns_query = self._open_private(query)
            if dns_query is None:
                self._drop("query authentication failed")
                return None
        else:
            dns_query = query.payload

        try:
            msg = dns.message.from_wire(dns_query)
        except dns.exception.DNSException:
            self._drop("unparseable DNS query")
            return None
        if msg.flags & dns.flags.QR:
            self._drop("not a query")
            return None
        response, result = self.zone.respond(msg)
        child_ws, child_a = (), None
        if result is not None and result.kind is LookupKind.REFERRAL:
            if result.delegation is None:
                self._drop("delegation without published child keys")
                return None
            child_ws = result.delegation.keys.signing_keys
            child_a = result.delegation.keys.agreement_key

        slot = self._ephemeral(now, cred)
        try:
            master = crypto.dh(slot.keypair, query.resolver_ephemeral_pub)
        except crypto.CryptoError:
            self._drop("bad resolver ephemeral key")
            return None
        nonce = crypto.random_bytes(wire.RESPONSE_NONCE_SIZE)
        session = crypto.derive_session(master, nonce, crypto.RESPONSE_LABEL, context=datagram)
        body = wire.ResponseBody(render(response), cred.signed, slot.signature, child_ws, child_a)
        self.stats["answered"] += 1
        return wire.encode_response(
            body, mode=query.mode, ephemeral_pub=slot.keypair.public, nonce=nonce, session=session
        )

    def _open_private(self, query: wire.DnssecPlusQuery) -> bytes | None:
        # newest generation first; at most two are installed during a rollover
        for generation in sorted(self.agreement_keys, reverse=True):
            try:
                master = crypto.dh(self.agreement_keys[generation], query.resolver_ephemeral_pub)
                session = crypto.derive_session(master, query.nonce, crypto.QUERY_LABEL)
                return wire.open_query(query, session)
            except crypto.CryptoError:
                continue
        return None
