"""Iterative DNSSEC+ resolver.

Starting from the root trust anchor (or the closest zone whose long-term keys
are still cached) the resolver does exactly one query/response exchange per
zone. Every response must decrypt, carry a credential signed by the zone's
long-term key and valid now, and sign the ephemeral key used to encrypt it.
Anything else ends the resolution, and nothing learned during it is cached.
"""

from __future__ import annotations

import enum
import logging
import math
import random
import threading
from dataclasses import dataclass, field
from typing import Callable

import dns.exception
import dns.flags
import dns.message
import dns.name
import dns.rcode
import dns.rdatatype
import dns.rrset

from . import crypto, delegation, wire
from .delegation import Validity
from .transport import Address, parse_address
from .wire import Mode, WireError

log = logging.getLogger(__name__)

HOUR = 3600
DEFAULT_KEY_TTLS = {0: 48 * HOUR, 1: 24 * HOUR, 2: 6 * HOUR}
DEFAULT_NEGATIVE_CAP = 60
DEFAULT_TIMEOUT = 2.0
DEFAULT_RETRIES = 2
MAX_REFERRALS = 16


class FailureReason(enum.Enum):
    AUTH_FAILURE = "auth-failure"
    WIRE_ERROR = "wire-error"
    TIMEOUT = "timeout"
    SERVFAIL = "servfail"


class AuthDetail(enum.Enum):
    DECRYPT_FAILED = "decrypt-failed"
    BAD_CREDENTIAL_SIGNATURE = "bad-credential-signature"
    CREDENTIAL_EXPIRED = "credential-expired"
    CREDENTIAL_NOT_YET_VALID = "credential-not-yet-valid"
    BAD_EPHEMERAL_SIGNATURE = "bad-ephemeral-signature"
    BAD_KEY_AGREEMENT = "bad-key-agreement"
    MISSING_CHILD_KEYS = "missing-child-keys"
    LEVEL_MISMATCH = "credential-level-mismatch"


_VALIDITY_DETAIL = {
    Validity.BAD_SIGNATURE: AuthDetail.BAD_CREDENTIAL_SIGNATURE,
    Validity.EXPIRED: AuthDetail.CREDENTIAL_EXPIRED,
    Validity.NOT_YET_VALID: AuthDetail.CREDENTIAL_NOT_YET_VALID,
}


class ExchangeFailure(Exception):
    def __init__(self, reason: FailureReason, detail: object = None):
        super().__init__(f"{reason.value}: {getattr(detail, 'value', detail)}")
        self.reason = reason
        self.detail = detail


# -- configuration ----------------------------------------------------------

@dataclass(frozen=True)
class TrustAnchor:
    root_verify_key: bytes
    root_agreement_key: bytes
    root_servers: tuple[Address, ...] = ()

    def __post_init__(self):
        if len(self.root_verify_key) != crypto.VERIFY_KEY_SIZE:
            raise ValueError("root verify key must be 33 bytes")
        if len(self.root_agreement_key) != crypto.AGREEMENT_KEY_SIZE:
            raise ValueError("root agreement key must be 32 bytes")

    @classmethod
    def from_text(cls, text: str) -> "TrustAnchor":
        """Parse ``root w <hex33> A <hex32>`` plus optional ``ns <host:port>`` lines."""
        w = a = None
        servers = []
        for lineno, raw in enumerate(text.splitlines(), 1):
            tok = raw.split("#", 1)[0].split()
            if not tok:
                continue
            if tok[0] == "root" and len(tok) == 5 and tok[1] == "w" and tok[3] == "A":
                w, a = bytes.fromhex(tok[2]), bytes.fromhex(tok[4])
            elif tok[0] == "ns" and len(tok) == 2:
                servers.append(parse_address(tok[1]))
            else:
                raise ValueError(f"trust anchor line {lineno}: cannot parse {raw!r}")
        if w is None:
            raise ValueError("trust anchor file has no root line")
        return cls(w, a, tuple(servers))

    def to_text(self) -> str:
        lines = [f"root w {self.root_verify_key.hex()} A {self.root_agreement_key.hex()}"]
        lines += [f"ns {h}:{p}" for h, p in self.root_servers]
        return "\n".join(lines) + "\n"


class KeyTtlPolicy:
    """How long a zone's long-term keys may be cached, by zone level.

    Levels beyond the ladder use its last rung. TTLs must not increase with
    depth: keys higher in the hierarchy are cached at least as long.
    """

    def __init__(self, ladder: dict[int, float] | None = None):
        ladder = dict(DEFAULT_KEY_TTLS if ladder is None else ladder)
        if not ladder:
            raise ValueError("empty key TTL ladder")
        levels = sorted(ladder)
        if levels != list(range(len(levels))):
            raise ValueError("key TTL ladder must cover levels 0..n without gaps")
        for lo, hi in zip(levels, levels[1:]):
            if ladder[hi] > ladder[lo]:
                raise ValueError(
                    f"key TTL for level {hi} ({ladder[hi]}s) exceeds level {lo} ({ladder[lo]}s)"
                )
        self.ladder = ladder

    def __call__(self, level: int) -> float:
        return self.ladder[min(level, max(self.ladder))]


def cache_policy(level: int, policy: KeyTtlPolicy | None = None) -> float:
    return (policy or KeyTtlPolicy())(level)


# -- cache --------------------------------------------------------------------

@dataclass(frozen=True)
class ZoneKeys:
    zone: dns.name.Name
    level: int
    signing_keys: tuple[bytes, ...]
    agreement_key: bytes
    servers: tuple[Address, ...]
    expires: float = math.inf


@dataclass(frozen=True)
class CachedAnswer:
    rcode: int
    rrsets: tuple[dns.rrset.RRset, ...]
    expires: float


class ResolverCache:
    """Record cache plus the longer-lived cache of zone long-term keys.

    Reads never evict; an expired entry is just ignored. That keeps a failed
    resolution from changing anything here.
    """

    def __init__(self):
        self.records: dict[tuple[dns.name.Name, int], CachedAnswer] = {}
        self.zone_keys: dict[dns.name.Name, ZoneKeys] = {}
        self._lock = threading.Lock()

    def answer(self, name: dns.name.Name, rdtype: int, now: float) -> CachedAnswer | None:
        entry = self.records.get((name, rdtype))
        if entry is None or entry.expires <= now:
            return None
        return entry

    def closest_zone(self, qname: dns.name.Name, now: float) -> ZoneKeys | None:
        name = qname
        while True:
            keys = self.zone_keys.get(name)
            if keys is not None and keys.expires > now:
                return keys
            if name == dns.name.root:
                return None
            name = name.parent()

    def commit(self, answers: dict, zones: list[ZoneKeys]) -> None:
        with self._lock:
            self.records.update(answers)
            for z in zones:
                self.zone_keys[z.zone] = z

    def snapshot(self) -> tuple:
        with self._lock:
            records = {k: (v.rcode, tuple(r.to_text() for r in v.rrsets), v.expires) for k, v in self.records.items()}
            return records, dict(self.zone_keys)

    def clear(self, answers_only: bool = False) -> None:
        with self._lock:
            self.records.clear()
            if not answers_only:
                self.zone_keys.clear()


# -- results ------------------------------------------------------------------

@dataclass
class TraceEntry:
    zone: str
    nameserver: Address
    round_trips: int
    verified: bool
    nameserver_id: int | None = None
    credential_expiration: int | None = None
    failure: str | None = None


@dataclass
class ResolutionOutcome:
    name: str
    rdtype: str
    rcode: int | None = None
    records: list[dns.rrset.RRset] = field(default_factory=list)
    failure: FailureReason | None = None
    detail: object = None
    trace: list[TraceEntry] = field(default_factory=list)
    from_cache: bool = False

    @property
    def ok(self) -> bool:
        return self.failure is None

    @property
    def exchanges(self) -> int:
        return sum(t.round_trips for t in self.trace)

    def describe_failure(self) -> str:
        if self.ok:
            return ""
        detail = getattr(self.detail, "value", self.detail)
        return f"{self.failure.value}" + (f" ({detail})" if detail else "")


@dataclass(frozen=True)
class VerifiedResponse:
    message: dns.message.Message
    body: wire.ResponseBody
    server: Address


# -- resolver -------------------------------------------------------------------

class Resolver:
    def __init__(
        self,
        anchor: TrustAnchor,
        transport,
        clock,
        *,
        cache: ResolverCache | None = None,
        key_policy: KeyTtlPolicy | None = None,
        timeout: float = DEFAULT_TIMEOUT,
        retries: int = DEFAULT_RETRIES,
        skew: int = delegation.DEFAULT_SKEW,
        negative_cap: float = DEFAULT_NEGATIVE_CAP,
        port: int = 53,
        privacy_hook: Callable[[dns.name.Name, int], Mode] | None = None,
        rng: random.Random | None = None,
    ):
        self.anchor = anchor
        self.transport = transport
        self.clock = clock
        self.cache = cache if cache is not None else ResolverCache()
        self.key_policy = key_policy or KeyTtlPolicy()
        self.timeout = timeout
        self.retries = retries
        self.skew = skew
        self.negative_cap = negative_cap
        self.port = port
        self.privacy_hook = privacy_hook
        self.rng = rng or random.Random()

    def root_keys(self) -> ZoneKeys:
        return ZoneKeys(
            dns.name.root, 0, (self.anchor.root_verify_key,),
            self.anchor.root_agreement_key, self.anchor.root_servers,
        )

    # -- one exchange --------------------------------------------------------------
    def query_zone(self, zone: ZoneKeys, server: Address, query: dns.message.Message, mode: Mode) -> VerifiedResponse:
        """One query/response exchange with one nameserver, fully verified.

        Raises ExchangeFailure on silence, framing errors, decryption failure,
        or any failed signature or credential check.
        """
        eph = crypto.gen_agreement_keypair()
        dns_query = query.to_wire()
        if mode == Mode.PRIVATE:
            try:
                kq = crypto.dh(eph, zone.agreement_key)
            except crypto.CryptoError:
                raise ExchangeFailure(FailureReason.AUTH_FAILURE, AuthDetail.BAD_KEY_AGREEMENT) from None
            r_q = crypto.random_bytes(wire.QUERY_NONCE_SIZE)
            q = wire.seal_query(dns_query, eph.public, r_q, crypto.derive_session(kq, r_q, crypto.QUERY_LABEL))
        else:
            q = wire.DnssecPlusQuery(Mode.PLAIN, eph.public, dns_query)
        datagram = wire.encode_query(q)

        reply = self.transport.exchange(server, datagram, self.timeout)
        if reply is None:
            raise ExchangeFailure(FailureReason.TIMEOUT)
        try:
            env = wire.decode_response(reply)
        except WireError as exc:
            raise ExchangeFailure(FailureReason.WIRE_ERROR, exc.kind) from None
        if env.mode != mode:
            raise ExchangeFailure(FailureReason.WIRE_ERROR, "mode mismatch")
        try:
            kr = crypto.dh(eph, env.nameserver_ephemeral_pub)
            session = crypto.derive_session(kr, env.nonce, crypto.RESPONSE_LABEL, context=datagram)
            body = env.open(session)
        except crypto.CryptoError:
            raise ExchangeFailure(FailureReason.AUTH_FAILURE, AuthDetail.DECRYPT_FAILED) from None
        except WireError as exc:
            raise ExchangeFailure(FailureReason.WIRE_ERROR, exc.kind) from None
        finally:
            del eph

        validity = delegation.validate_any(body.credential, zone.signing_keys, self.clock.now(), self.skew)
        if not validity:
            raise ExchangeFailure(FailureReason.AUTH_FAILURE, _VALIDITY_DETAIL[validity])
        if body.credential.structure.zone_level != zone.level:
            raise ExchangeFailure(FailureReason.AUTH_FAILURE, AuthDetail.LEVEL_MISMATCH)
        if not crypto.verify(env.nameserver_ephemeral_pub, body.ephemeral_signature, body.credential.structure.stk_public_key):
            raise ExchangeFailure(FailureReason.AUTH_FAILURE, AuthDetail.BAD_EPHEMERAL_SIGNATURE)
        try:
            msg = dns.message.from_wire(body.dns_response)
        except dns.exception.DNSException:
            raise ExchangeFailure(FailureReason.WIRE_ERROR, wire.WireErrorKind.MALFORMED) from None
        if not query.is_response(msg):
            raise ExchangeFailure(FailureReason.WIRE_ERROR, "answer does not match question")
        return VerifiedResponse(msg, body, server)

    # -- full resolution -------------------------------------------------------------
    def resolve(self, name: str | dns.name.Name, rdtype: str | int = "A", mode: Mode | None = None) -> ResolutionOutcome:
        qname = dns.name.from_text(name) if isinstance(name, str) else name
        qtype = dns.rdatatype.from_text(rdtype) if isinstance(rdtype, str) else rdtype
        if mode is None:
            mode = self.privacy_hook(qname, qtype) if self.privacy_hook else Mode.PLAIN
        outcome = ResolutionOutcome(qname.to_text(), dns.rdatatype.to_text(qtype))
        now = self.clock.now()

        cached = self.cache.answer(qname, qtype, now)
        if cached is not None:
            outcome.rcode, outcome.records, outcome.from_cache = cached.rcode, list(cached.rrsets), True
            return outcome

        zone = self.cache.closest_zone(qname, now) or self.root_keys()
        learned: list[ZoneKeys] = []
        for _ in range(MAX_REFERRALS):
            try:
                verified = self._ask(zone, qname, qtype, mode, outcome)
            except ExchangeFailure as exc:
                outcome.failure, outcome.detail = exc.reason, exc.detail
                return outcome
            msg = verified.message
            rcode = msg.rcode()
            if rcode == dns.rcode.NXDOMAIN:
                return self._finish_negative(outcome, msg, qname, qtype, learned, now)
            if rcode != dns.rcode.NOERROR:
                outcome.failure, outcome.detail = FailureReason.SERVFAIL, dns.rcode.to_text(rcode)
                return outcome
            if msg.answer:
                outcome.rcode = rcode
                outcome.records = list(msg.answer)
                ttl = min(r.ttl for r in msg.answer)
                self.cache.commit({(qname, qtype): CachedAnswer(rcode, tuple(msg.answer), now + ttl)}, learned)
                return outcome
            child = self._referral(zone, qname, verified, now)
            if child is None:
                return self._finish_negative(outcome, msg, qname, qtype, learned, now)
            if isinstance(child, ExchangeFailure):
                outcome.failure, outcome.detail = child.reason, child.detail
                return outcome
            learned.append(child)
            zone = child
        outcome.failure, outcome.detail = FailureReason.SERVFAIL, "referral limit"
        return outcome

    def _ask(self, zone: ZoneKeys, qname, qtype, mode, outcome) -> VerifiedResponse:
        servers = list(zone.servers)
        if not servers:
            raise ExchangeFailure(FailureReason.SERVFAIL, f"no nameservers for {zone.zone}")
        self.rng.shuffle(servers)
        last = None
        for server in servers[:1 + self.retries]:
            query = dns.message.make_query(qname, qtype)
            query.flags = 0
            entry = TraceEntry(zone.zone.to_text(), server, 1, False)
            outcome.trace.append(entry)
            try:
                verified = self.query_zone(zone, server, query, mode)
            except ExchangeFailure as exc:
                entry.failure = exc.reason.value
                if exc.reason is not FailureReason.TIMEOUT:
                    raise
                last = exc
                continue
            s = verified.body.credential.structure
            entry.verified, entry.nameserver_id, entry.credential_expiration = True, s.nameserver_id, s.expiration
            return verified
        raise last

    def _referral(self, zone: ZoneKeys, qname, verified: VerifiedResponse, now: float):
        msg = verified.message
        ns = next((r for r in msg.authority if r.rdtype == dns.rdatatype.NS), None)
        if ns is None:
            return None
        child = ns.name
        if child == zone.zone or not child.is_subdomain(zone.zone) or not qname.is_subdomain(child):
            return ExchangeFailure(FailureReason.SERVFAIL, f"bogus referral to {child}")
        body = verified.body
        if not body.delegating:
            return ExchangeFailure(FailureReason.AUTH_FAILURE, AuthDetail.MISSING_CHILD_KEYS)
        targets = {rd.target for rd in ns}
        addrs = []
        for rr in msg.additional:
            if rr.name in targets and rr.rdtype in (dns.rdatatype.A, dns.rdatatype.AAAA):
                addrs += [(rd.address, self.port) for rd in rr]
        if not addrs:
            return ExchangeFailure(FailureReason.SERVFAIL, f"no glue for {child}")
        level = zone.level + 1
        return ZoneKeys(
            child, level, body.child_signing_keys, body.child_agreement_key,
            tuple(addrs), now + self.key_policy(level),
        )

    def _finish_negative(self, outcome, msg, qname, qtype, learned, now) -> ResolutionOutcome:
        outcome.rcode = msg.rcode()
        soa = next((r for r in msg.authority if r.rdtype == dns.rdatatype.SOA), None)
        ttl = 0.0
        if soa is not None:
            ttl = min(soa.ttl, soa[0].minimum, self.negative_cap)
        answers = {(qname, qtype): CachedAnswer(outcome.rcode, (), now + ttl)} if ttl > 0 else {}
        self.cache.commit(answers, learned)
        return outcome
