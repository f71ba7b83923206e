import math
import random

import dns.message
import dns.name
import dns.rcode
import dns.rdatatype
import pytest

from dnssecplus import crypto, delegation
from dnssecplus.resolver import (
    AuthDetail,
    FailureReason,
    KeyTtlPolicy,
    ExchangeFailure,
    TrustAnchor,
    ZoneKeys,
    cache_policy,
)
from dnssecplus.wire import Mode

HOUR = 3600
N = dns.name.from_text


class FlipResponses:
    """Flips one bit of every response coming back from ``targets``."""

    def __init__(self, targets, offset=-1):
        self.targets = set(targets)
        self.offset = offset

    def on_query(self, dst, datagram):
        return dst, datagram

    def on_response(self, dst, query, datagram):
        if datagram is None or dst not in self.targets:
            return datagram
        out = bytearray(datagram)
        out[self.offset] ^= 1
        return bytes(out)


def test_key_ttl_ladder_defaults():
    assert cache_policy(0) == 48 * HOUR
    assert cache_policy(1) == 24 * HOUR
    assert cache_policy(2) == 6 * HOUR
    assert cache_policy(7) == 6 * HOUR


@pytest.mark.parametrize("ladder", [{0: HOUR, 1: 2 * HOUR}, {}, {0: HOUR, 2: HOUR}, {1: HOUR}])
def test_key_ttl_ladder_rejects_bad_config(ladder):
    with pytest.raises(ValueError):
        KeyTtlPolicy(ladder)


def test_cold_then_warm_exchange_counts(net):
    r = net.resolver()
    cold = r.resolve("www.example.com.", "A")
    assert cold.ok and cold.exchanges == 3
    assert [t.zone for t in cold.trace] == [".", "com.", "example.com."]
    assert all(t.verified and t.credential_expiration for t in cold.trace)
    assert [rd.address for rd in cold.records[0]] == ["93.184.216.34"]
    r.cache.clear(answers_only=True)
    warm = r.resolve("www.example.com.", "A")
    assert warm.ok and warm.exchanges == 1 and not warm.from_cache
    cached = r.resolve("www.example.com.", "A")
    assert cached.from_cache and cached.exchanges == 0


@pytest.mark.parametrize("mode", [Mode.PLAIN, Mode.PRIVATE])
def test_modes_and_record_kinds(net, mode):
    r = net.resolver()
    out = r.resolve("alias.example.com.", "A", mode)
    assert out.ok and [rr.rdtype for rr in out.records] == [dns.rdatatype.CNAME, dns.rdatatype.A]
    assert r.resolve("www.example.com.", "AAAA", mode).records
    assert r.resolve("txt.example.com.", "TXT", mode).records
    nx = r.resolve("nope.example.com.", "A", mode)
    assert nx.ok and nx.rcode == dns.rcode.NXDOMAIN and not nx.records
    nodata = r.resolve("www.example.com.", "MX", mode)
    assert nodata.ok and nodata.rcode == dns.rcode.NOERROR and not nodata.records
    tld_nx = r.resolve("nothing.org.", "A", mode)
    assert tld_nx.ok and tld_nx.rcode == dns.rcode.NXDOMAIN and tld_nx.exchanges == 1


def test_privacy_hook_selects_mode(net):
    seen = []

    def hook(name, rdtype):
        seen.append(name)
        return Mode.PRIVATE

    r = net.resolver(privacy_hook=hook)
    out = r.resolve("www.example.com.")
    assert out.ok and seen == [N("www.example.com.")]
    assert all(e.query[3] == Mode.PRIVATE for e in net.transport.log[-3:])


def test_negative_cache_cap(net):
    r = net.resolver()
    now = net.clock.now()
    r.resolve("nope.example.com.")
    entry = r.cache.records[(N("nope.example.com."), dns.rdatatype.A)]
    assert entry.expires == now + 60
    assert r.resolve("nope.example.com.").from_cache
    net.clock.advance(61)
    assert not r.resolve("nope.example.com.").from_cache
    r2 = net.resolver(negative_cap=10)
    r2.resolve("nope.example.com.")
    assert r2.cache.records[(N("nope.example.com."), dns.rdatatype.A)].expires == net.clock.now() + 10


def test_answer_ttl_respected(net):
    r = net.resolver()
    r.resolve("www.example.com.")
    net.clock.advance(299)
    assert r.resolve("www.example.com.").from_cache
    net.clock.advance(2)
    assert not r.resolve("www.example.com.").from_cache


def test_zone_keys_expire_by_level(compressed_net):
    net = compressed_net
    r = net.resolver()
    r.resolve("www.example.com.")
    zones = r.cache.zone_keys
    now = net.clock.now()
    assert zones[N("com.")].expires == now + 30
    assert zones[N("example.com.")].expires == now + 20
    net.clock.advance(21)
    r.cache.clear(answers_only=True)
    out = r.resolve("www.example.com.")
    assert out.exchanges == 2 and out.trace[0].zone == "com."


def test_retry_on_silent_nameserver(net):
    z = net.zone("example.com.")
    net.transport.down.add(z.addresses[0])
    for seed in range(6):
        r = net.resolver(rng=random.Random(seed))
        out = r.resolve("www.example.com.")
        assert out.ok
        assert out.trace[-1].verified and out.trace[-1].nameserver == z.addresses[1]
        assert out.exchanges in (3, 4)


def test_all_nameservers_silent(net):
    z = net.zone("example.com.")
    net.transport.down.update(z.addresses)
    r = net.resolver()
    out = r.resolve("www.example.com.")
    assert out.failure is FailureReason.TIMEOUT
    assert [t.failure for t in out.trace[-2:]] == ["timeout", "timeout"]
    assert r.cache.records == {} and r.cache.zone_keys == {}


def test_auth_failure_is_not_retried_and_fails_closed(net):
    z = net.zone("example.com.")
    r = net.resolver()
    r.resolve("mail.example.com.")
    before = r.cache.snapshot()
    net.transport.interceptors.append(FlipResponses(z.addresses))
    out = r.resolve("www.example.com.")
    assert out.failure is FailureReason.AUTH_FAILURE and out.detail is AuthDetail.DECRYPT_FAILED
    assert out.exchanges == 1
    assert r.cache.snapshot() == before


def test_wrong_zone_key_rejected(net):
    z = net.zone("example.com.")
    rogue = crypto.gen_signing_keypair()
    for ns in z.nameservers:
        key = crypto.gen_signing_keypair()
        s = ns.credential.signed.structure
        forged = delegation.issue(
            delegation.ShortTermKeyStructure(s.inception, s.expiration, key.public, s.nameserver_id, s.zone_level),
            rogue, net.clock.now(), delegation.IssuePolicy(2),
        )
        assert ns.install_credential(forged, key)
    r = net.resolver()
    out = r.resolve("www.example.com.")
    assert out.failure is FailureReason.AUTH_FAILURE
    assert out.detail is AuthDetail.BAD_CREDENTIAL_SIGNATURE
    assert r.cache.records == {} and r.cache.zone_keys == {}
    assert out.describe_failure() == "auth-failure (bad-credential-signature)"


def _zone_keys(z, level=None, agreement=None):
    return ZoneKeys(z.name, z.level if level is None else level, (z.keys.signing.public,),
                    agreement or z.keys.agreement.public, tuple(z.addresses), math.inf)


def _query(name="www.example.com.", rdtype="A"):
    q = dns.message.make_query(name, rdtype)
    q.flags = 0
    return q


def test_level_mismatch(net):
    z = net.zone("example.com.")
    with pytest.raises(ExchangeFailure) as info:
        net.resolver().query_zone(_zone_keys(z, level=1), z.addresses[0], _query(), Mode.PLAIN)
    assert info.value.detail is AuthDetail.LEVEL_MISMATCH


def test_expired_credential_reported(net):
    z = net.zone("example.com.")
    ns = z.nameservers[0]
    ns.config.enforce_expiry = False
    net.clock.set(ns.credential.expiration + delegation.DEFAULT_SKEW + 1)
    with pytest.raises(ExchangeFailure) as info:
        net.resolver().query_zone(_zone_keys(z), z.addresses[0], _query(), Mode.PLAIN)
    assert info.value.reason is FailureReason.AUTH_FAILURE
    assert info.value.detail is AuthDetail.CREDENTIAL_EXPIRED


def test_low_order_agreement_key(net):
    z = net.zone("example.com.")
    with pytest.raises(ExchangeFailure) as info:
        net.resolver().query_zone(_zone_keys(z, agreement=bytes(32)), z.addresses[0], _query(), Mode.PRIVATE)
    assert info.value.detail is AuthDetail.BAD_KEY_AGREEMENT


def test_mode_downgrade_rejected(net):
    z = net.zone("example.com.")

    class Downgrade:
        def on_query(self, dst, datagram):
            return dst, datagram

        def on_response(self, dst, query, datagram):
            return datagram[:3] + bytes([0x80]) + datagram[4:]

    net.transport.interceptors.append(Downgrade())
    with pytest.raises(ExchangeFailure) as info:
        net.resolver().query_zone(_zone_keys(z), z.addresses[0], _query(), Mode.PRIVATE)
    assert info.value.reason is FailureReason.WIRE_ERROR and info.value.detail == "mode mismatch"


def test_trust_anchor_text():
    w = crypto.gen_signing_keypair().public
    a = crypto.gen_agreement_keypair().public
    anchor = TrustAnchor(w, a, (("10.0.0.1", 53), ("10.0.0.2", 5353)))
    assert TrustAnchor.from_text(anchor.to_text()) == anchor
    assert TrustAnchor.from_text("# c\n" + anchor.to_text()) == anchor
    for bad in ("", "root w 00 A 00", f"root w {w.hex()} A {a.hex()}\nbogus line"):
        with pytest.raises(ValueError):
            TrustAnchor.from_text(bad)
