"""On-path adversary scenarios run against a testnet.

Every mutation works on raw datagrams only: the adversary holds no zone,
nameserver or resolver keys. A scenario warms a resolver, snapshots its cache,
installs an interceptor, runs one resolution and compares the cache again.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field

import dns.message
import dns.name
import dns.rdatatype
import dns.rrset

from .. import crypto, wire
from ..resolver import FailureReason, Resolver
from ..transport import Address
from ..wire import Mode
from .hierarchy import Testnet

log = logging.getLogger(__name__)

ROGUE_ADDRESS: Address = ("10.66.0.1", 53)
FORGED_ADDRESS = "6.6.6.6"
MAX_SWEEP_SIZE = 512


class Mutation(enum.Enum):
    REPLAY_PREV_SESSION = "replay-prev-session"
    BIT_FLIP = "bit-flip"
    CREDENTIAL_SUBSTITUTE = "credential-substitute"
    EXPIRED_CREDENTIAL = "expired-credential"
    CHILD_KEY_SWAP = "child-key-swap"
    DOWNGRADE_TO_PLAINTEXT = "downgrade-to-plaintext"


@dataclass(frozen=True)
class AttackScript:
    mutation: Mutation
    mode: Mode = Mode.PLAIN
    # bit flips only
    direction: str = "response"
    offset: int = 0
    mask: int = 0x01
    qname: str = "www.example.com."
    qtype: str = "A"
    target_zone: str = "example.com."

    @property
    def label(self) -> str:
        name = f"{self.mutation.value} mode={self.mode.name.lower()}"
        if self.mutation is Mutation.BIT_FLIP:
            name += f" {self.direction}[{self.offset}]^0x{self.mask:02x}"
        return name


@dataclass
class AttackOutcome:
    script: AttackScript
    failure: FailureReason | None
    detail: object
    cache_delta: dict = field(default_factory=dict)
    forged_answer: bool = False

    @property
    def rejected(self) -> bool:
        return self.failure is not None and not self.cache_delta and not self.forged_answer

    def line(self) -> str:
        verdict = "REJECTED" if self.rejected else "ACCEPTED"
        detail = getattr(self.detail, "value", self.detail)
        reason = self.failure.value if self.failure else "none"
        return f"{verdict} attack={self.script.label} failure={reason} detail={detail} cache_delta={len(self.cache_delta)}"


def cache_delta(before: tuple, after: tuple) -> dict:
    """Entries added, removed or changed between two ``ResolverCache.snapshot()`` values."""
    delta = {}
    for b, a in zip(before, after):
        for key in b.keys() | a.keys():
            if b.get(key) != a.get(key):
                delta[key] = (b.get(key), a.get(key))
    return delta


# -- interceptors ----------------------------------------------------------------

class _Hook:
    """Base on-path hook: only touches DNSSEC+ traffic to ``targets``."""

    def __init__(self, targets):
        self.targets = set(targets)
        self.hits = 0

    def ours(self, dst: Address, query: bytes) -> bool:
        return dst in self.targets and wire.is_dnssecplus(query)

    def on_query(self, dst, datagram):
        return dst, datagram

    def on_response(self, dst, query, datagram):
        return datagram


class Recorder(_Hook):
    def __init__(self, targets):
        super().__init__(targets)
        self.responses: list[bytes] = []
        self.queries: list[bytes] = []

    def on_query(self, dst, datagram):
        if self.ours(dst, datagram):
            self.queries.append(datagram)
        return dst, datagram

    def on_response(self, dst, query, datagram):
        if self.ours(dst, query) and datagram is not None:
            self.responses.append(datagram)
        return datagram


class Replayer(_Hook):
    def __init__(self, targets, recorded: bytes):
        super().__init__(targets)
        self.recorded = recorded

    def on_response(self, dst, query, datagram):
        if self.ours(dst, query):
            self.hits += 1
            return self.recorded
        return datagram


class BitFlipper(_Hook):
    def __init__(self, targets, direction: str, offset: int, mask: int):
        super().__init__(targets)
        self.direction, self.offset, self.mask = direction, offset, mask

    def _flip(self, data: bytes) -> bytes:
        if self.offset >= len(data):
            return data
        self.hits += 1
        out = bytearray(data)
        out[self.offset] ^= self.mask
        return bytes(out)

    def on_query(self, dst, datagram):
        if self.direction == "query" and self.ours(dst, datagram):
            return dst, self._flip(datagram)
        return dst, datagram

    def on_response(self, dst, query, datagram):
        if self.direction == "response" and datagram is not None and self.ours(dst, query):
            return self._flip(datagram)
        return datagram


class Redirector(_Hook):
    """Sends the resolver's query to another server instead of the addressed one."""

    def __init__(self, targets, to: Address):
        super().__init__(targets)
        self.to = to

    def on_query(self, dst, datagram):
        if self.ours(dst, datagram):
            self.hits += 1
            return self.to, datagram
        return dst, datagram


class ChildKeySwapper(_Hook):
    """XORs attacker keys over the child keys inside a delegating ciphertext,
    assuming the adversary knows the (public) legitimate child keys."""

    def __init__(self, targets, legit: bytes, forged: bytes):
        super().__init__(targets)
        self.pad = bytes(a ^ b for a, b in zip(legit, forged))

    def on_response(self, dst, query, datagram):
        if not self.ours(dst, query) or datagram is None:
            return datagram
        self.hits += 1
        end = len(datagram) - 16
        start = end - len(self.pad)
        region = bytes(a ^ b for a, b in zip(datagram[start:end], self.pad))
        return datagram[:start] + region + datagram[end:]


class PlaintextForger(_Hook):
    """Answers the resolver with an unprotected DNS reply carrying a forged address."""

    def on_response(self, dst, query, datagram):
        if not self.ours(dst, query):
            return datagram
        self.hits += 1
        try:
            q = wire.decode_query(query)
            dns_query = dns.message.from_wire(q.payload) if q.mode == Mode.PLAIN else None
        except Exception:
            dns_query = None
        if dns_query is None:
            # private mode: the question is hidden, so guess it from context
            dns_query = dns.message.make_query("www.example.com.", "A")
        reply = dns.message.make_response(dns_query)
        question = dns_query.question[0]
        reply.answer.append(dns.rrset.from_text(question.name, 300, "IN", "A", FORGED_ADDRESS))
        return reply.to_wire()


# -- running ---------------------------------------------------------------------

def _addresses(net: Testnet, zone: str) -> list[Address]:
    return list(net.zone(zone).addresses)


def _warm(net: Testnet, script: AttackScript) -> Resolver:
    """A resolver with cached long-term keys for the zone that will be attacked."""
    r = net.resolver()
    zone = dns.name.from_text(script.target_zone)
    probe = "probe-warmup." + script.target_zone
    out = r.resolve(probe, "A", script.mode)
    if not out.ok:
        raise RuntimeError(f"warm-up failed: {out.describe_failure()}")
    if r.cache.closest_zone(dns.name.from_text(script.qname), net.clock.now()).zone != zone:
        raise RuntimeError(f"warm-up did not cache keys for {zone}")
    return r


def _attack_resolve(net: Testnet, r: Resolver, script: AttackScript, hook) -> AttackOutcome:
    before = r.cache.snapshot()
    net.transport.interceptors.append(hook)
    try:
        out = r.resolve(script.qname, script.qtype, script.mode)
    finally:
        net.transport.interceptors.remove(hook)
    forged = any(
        rd.to_text() == FORGED_ADDRESS for rr in out.records for rd in rr
    )
    outcome = AttackOutcome(script, out.failure, out.detail, cache_delta(before, r.cache.snapshot()), forged)
    if hook.hits == 0:
        # the mutation never happened; this is a harness bug, not a rejection
        outcome.failure, outcome.detail = None, "interceptor never fired"
    log.info(outcome.line())
    return outcome


def run_attack(net: Testnet, script: AttackScript, resolver: Resolver | None = None) -> AttackOutcome:
    m = script.mutation
    targets = _addresses(net, script.target_zone)

    if m is Mutation.REPLAY_PREV_SESSION:
        r = resolver or _warm(net, script)
        rec = Recorder(targets)
        net.transport.interceptors.append(rec)
        try:
            first = r.resolve(script.qname, script.qtype, script.mode)
        finally:
            net.transport.interceptors.remove(rec)
        if not first.ok or not rec.responses:
            raise RuntimeError("could not record a session to replay")
        # let the answer age out of the cache, keep the zone keys
        net.clock.advance(min(rr.ttl for rr in first.records) + 1)
        return _attack_resolve(net, r, script, Replayer(targets, rec.responses[-1]))

    if m is Mutation.BIT_FLIP:
        r = resolver or _warm(net, script)
        return _attack_resolve(net, r, script, BitFlipper(targets, script.direction, script.offset, script.mask))

    if m is Mutation.CREDENTIAL_SUBSTITUTE:
        # a genuine nameserver of the parent zone holds a valid credential, but for the wrong zone
        r = resolver or _warm(net, script)
        parent = net.zone(script.target_zone).parent
        return _attack_resolve(net, r, script, Redirector(targets, parent.addresses[0]))

    if m is Mutation.EXPIRED_CREDENTIAL:
        return _expired_credential(net, script, resolver)

    if m is Mutation.CHILD_KEY_SWAP:
        child = net.zone(script.target_zone)
        parent = child.parent
        r = resolver or net.resolver()
        warm = r.resolve(parent.name.to_text(), "SOA", script.mode)
        if not warm.ok:
            raise RuntimeError(f"warm-up failed: {warm.describe_failure()}")
        legit = child.keys.signing.public + child.keys.agreement.public
        forged = crypto.gen_signing_keypair().public + crypto.gen_agreement_keypair().public
        return _attack_resolve(net, r, script, ChildKeySwapper(parent.addresses, legit, forged))

    if m is Mutation.DOWNGRADE_TO_PLAINTEXT:
        r = resolver or _warm(net, script)
        return _attack_resolve(net, r, script, PlaintextForger(targets))

    raise ValueError(f"unknown mutation {m}")


def _expired_credential(net: Testnet, script: AttackScript, resolver: Resolver | None) -> AttackOutcome:
    """A retired instance that ignores its own expiry keeps answering; the
    adversary steers queries to it once its credential is past expiry + skew."""
    zone = net.zone(script.target_zone)
    rogue = net.add_nameserver(zone.name, ROGUE_ADDRESS, register_route=False, enforce_expiry=False, lifetime=60)
    expiry = rogue.credential.expiration
    step = 30.0
    while net.clock.now() <= expiry + net.config.skew:
        net.clock.advance(step)
        net.maintain()
    r = resolver or _warm(net, script)
    try:
        return _attack_resolve(net, r, script, Redirector(zone.addresses, ROGUE_ADDRESS))
    finally:
        net.transport.unregister(ROGUE_ADDRESS)
        zone.keyserver.registrations.pop(rogue.nameserver_id, None)


def message_sizes(net: Testnet, script: AttackScript) -> tuple[int, int]:
    """(query, response) datagram sizes for the exchange a sweep would mutate."""
    r = _warm(net, script)
    rec = Recorder(_addresses(net, script.target_zone))
    net.transport.interceptors.append(rec)
    try:
        out = r.resolve(script.qname, script.qtype, script.mode)
    finally:
        net.transport.interceptors.remove(rec)
    if not out.ok:
        raise RuntimeError(out.describe_failure())
    return len(rec.queries[-1]), len(rec.responses[-1])


def bit_flip_sweep(net: Testnet, mode: Mode, direction: str, masks=(0x01, 0x80), **script_kw) -> list[AttackOutcome]:
    """Flip every offset of the targeted message (if it is at most 512 bytes)."""
    base = AttackScript(Mutation.BIT_FLIP, mode=mode, direction=direction, **script_kw)
    qsize, rsize = message_sizes(net, base)
    size = qsize if direction == "query" else rsize
    if size > MAX_SWEEP_SIZE:
        raise ValueError(f"{direction} is {size} bytes; sweeps cover messages up to {MAX_SWEEP_SIZE}")
    r = _warm(net, base)
    out = []
    for offset in range(size):
        for mask in masks:
            script = AttackScript(Mutation.BIT_FLIP, mode, direction, offset, mask, base.qname, base.qtype, base.target_zone)
            out.append(run_attack(net, script, resolver=r))
    return out


def standard_suite(net: Testnet, sweep: bool = True) -> list[AttackOutcome]:
    """Every scenario in both modes; with ``sweep`` every bit-flip offset too."""
    results = []
    for mode in (Mode.PLAIN, Mode.PRIVATE):
        for m in (Mutation.REPLAY_PREV_SESSION, Mutation.CREDENTIAL_SUBSTITUTE,
                  Mutation.EXPIRED_CREDENTIAL, Mutation.CHILD_KEY_SWAP):
            results.append(run_attack(net, AttackScript(m, mode=mode)))
        if sweep:
            for direction in ("query", "response"):
                results += bit_flip_sweep(net, mode, direction)
        else:
            for direction in ("query", "response"):
                results.append(run_attack(net, AttackScript(Mutation.BIT_FLIP, mode=mode, direction=direction, offset=40)))
    results.append(run_attack(net, AttackScript(Mutation.DOWNGRADE_TO_PLAINTEXT, mode=Mode.PRIVATE)))
    return results
