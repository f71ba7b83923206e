"""Byte-level measurements: per-response overhead and amplification factors.

Overhead is what a DNSSEC+ response adds on top of the DNS response it
carries: total datagram length minus the embedded DNS message length.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import dns.message
import dns.name
import dns.rdata
import dns.rdataclass
import dns.rdatatype
import dns.rrset

from .. import crypto, wire
from ..resolver import ZoneKeys
from ..wire import Mode
from ..zone import ChildKeys, ZoneData, load_zone
from .attacks import Recorder
from .baseline import PresignedResponder
from .hierarchy import EXAMPLE_ZONE, Testnet, ZoneInstance

DEFAULT_PAYLOADS = (50, 500, 4000)


@dataclass(frozen=True)
class OverheadRow:
    label: str
    payload: int
    total: int
    delegating: bool

    @property
    def overhead(self) -> int:
        return self.total - self.payload


@dataclass(frozen=True)
class AmplificationRow:
    label: str
    query: int
    response: int

    @property
    def factor(self) -> float:
        return self.response / self.query


def zone_keys(z: ZoneInstance) -> ZoneKeys:
    return ZoneKeys(
        z.name, z.level, z.keyserver.published_keys().signing_keys,
        z.keys.agreement.public, tuple(z.addresses), math.inf,
    )


def _exchange(net: Testnet, z: ZoneInstance, qname, qtype, mode: Mode) -> tuple[bytes, bytes, wire.ResponseBody]:
    """One verified exchange with the first nameserver of ``z``: (query, response, body)."""
    r = net.resolver()
    rec = Recorder(z.addresses[:1])
    query = dns.message.make_query(qname, qtype)
    query.flags = 0
    net.transport.interceptors.append(rec)
    try:
        verified = r.query_zone(zone_keys(z), z.addresses[0], query, mode)
    finally:
        net.transport.interceptors.remove(rec)
    return rec.queries[-1], rec.responses[-1], verified.body


def _dns_size(zone: ZoneData, qname, qtype) -> int:
    q = dns.message.make_query(qname, qtype)
    q.flags = 0
    response, _ = zone.respond(q)
    return len(response.to_wire())


def _txt_rrset(name: dns.name.Name, nbytes: int) -> dns.rrset.RRset:
    """TXT record whose rdata is exactly ``nbytes`` long (>= 1)."""
    strings, left = [], nbytes
    while left > 0:
        take = min(256, left)
        strings.append("x" * (take - 1))
        left -= take
    text = " ".join(f'"{s}"' for s in strings)
    return dns.rrset.from_text(name, 300, "IN", "TXT", text)


def fit_txt(zone: ZoneData, name: str | dns.name.Name, target: int) -> dns.name.Name:
    """Install a TXT record at ``name`` so the DNS response to a TXT query is ``target`` bytes."""
    name = dns.name.from_text(name, zone.origin) if isinstance(name, str) else name
    zone.records.pop((name, dns.rdatatype.TXT), None)
    zone.add(_txt_rrset(name, 1))
    base = _dns_size(zone, name, "TXT") - 1
    if target <= base:
        raise ValueError(f"{target} bytes is below the minimum TXT response ({base + 1}) for {name}")
    zone.records[(name, dns.rdatatype.TXT)] = _txt_rrset(name, target - base)
    got = _dns_size(zone, name, "TXT")
    if got != target:
        raise AssertionError(f"fitted TXT response is {got} bytes, wanted {target}")
    return name


def fit_referral(zone: ZoneData, child: str | dns.name.Name, target: int) -> dns.name.Name:
    """Add a delegation for ``child`` (with published keys) whose referral is ``target`` bytes.

    NS targets sit below the child and have no address records, so no glue is
    attached; size is tuned by the number of NS records and the length of the
    last target's first label.
    """
    child = dns.name.from_text(child, zone.origin) if isinstance(child, str) else child
    zone.publish_child_keys(child, ChildKeys(
        (crypto.gen_signing_keypair().public,), crypto.gen_agreement_keypair().public,
    ))
    qname = dns.name.Name((b"www",) + child.labels)

    def build(full: int, pad: int) -> int:
        ns = dns.rrset.RRset(child, dns.rdataclass.IN, dns.rdatatype.NS)
        for i in range(full):
            ns.add(dns.rdata.from_text("IN", "NS", f"n{i}{'h' * 40}.{child}"), 300)
        ns.add(dns.rdata.from_text("IN", "NS", f"t{'p' * pad}.{child}"), 300)
        zone.records.pop((child, dns.rdatatype.NS), None)
        zone.add(ns)
        return _dns_size(zone, qname, "A")

    full = 0
    # each extra NS adds under 62 bytes, so the remainder fits in one label
    while build(full + 1, 0) <= target:
        full += 1
    size = build(full, 0)
    pad = target - size
    if pad < 0 or pad > 62:
        raise ValueError(f"cannot fit a {target}-byte referral for {child}")
    if build(full, pad) != target:
        raise AssertionError(f"fitted referral is not {target} bytes")
    return qname


def measure_overhead(net: Testnet, payload_sizes=DEFAULT_PAYLOADS, delegating: bool = False,
                     mode: Mode = Mode.PLAIN, zone: str = "example.com.") -> list[OverheadRow]:
    """Overhead for responses carrying DNS messages of exactly the given sizes.

    Non-delegating rows use TXT answers from ``zone``; delegating rows use
    referrals from its parent.
    """
    rows = []
    z = net.zone(zone)
    for size in payload_sizes:
        if delegating:
            parent = z.parent
            qname = fit_referral(parent.data, f"d{size}", size)
            q, resp, body = _exchange(net, parent, qname, "A", mode)
        else:
            qname = fit_txt(z.data, f"p{size}", size)
            q, resp, body = _exchange(net, z, qname, "TXT", mode)
        if len(body.dns_response) != size or body.delegating != delegating:
            raise AssertionError(f"unexpected response shape for payload {size}")
        rows.append(OverheadRow(f"{'referral' if delegating else 'txt'}-{size}", size, len(resp), delegating))
    return rows


def measure_response_kinds(net: Testnet, mode: Mode = Mode.PLAIN) -> list[OverheadRow]:
    """Overhead for NXDOMAIN, NODATA, CNAME chains and multi-record answers."""
    z = net.zone("example.com.")
    multi = dns.name.from_text("multi.example.com.")
    if (multi, dns.rdatatype.A) not in z.data.records:
        rr = dns.rrset.RRset(multi, dns.rdataclass.IN, dns.rdatatype.A)
        for i in range(1, 9):
            rr.add(dns.rdata.from_text("IN", "A", f"192.0.2.{i}"), 300)
        z.data.add(rr)
    cases = [
        ("nxdomain", z, "absent.example.com.", "A"),
        ("nodata", z, "www.example.com.", "MX"),
        ("cname", z, "alias.example.com.", "A"),
        ("multi-record", z, "multi.example.com.", "A"),
        ("aaaa", z, "www.example.com.", "AAAA"),
        ("referral", z.parent, "www.example.com.", "A"),
        ("root-referral", net.root, "example.com.", "NS"),
    ]
    rows = []
    for label, zi, qname, qtype in cases:
        _, resp, body = _exchange(net, zi, qname, qtype, mode)
        rows.append(OverheadRow(label, len(body.dns_response), len(resp), body.delegating))
    return rows


def single_record_amplification(net: Testnet, zone: str = "example.com.") -> list[AmplificationRow]:
    """Mode-0 amplification for every single-record RRset of ``zone``."""
    z = net.zone(zone)
    rows = []
    for (name, rdtype), rrset in sorted(z.data.records.items(), key=lambda kv: (kv[0][0], kv[0][1])):
        if len(rrset) != 1:
            continue
        q, resp, _ = _exchange(net, z, name, rdtype, Mode.PLAIN)
        rows.append(AmplificationRow(f"{name} {dns.rdatatype.to_text(rdtype)}", len(q), len(resp)))
    return rows


def presigned_amplification(n_records: int = 20, owner: str = "big.example.com.") -> AmplificationRow:
    """Plain DNS query against a pre-signed responder answering ``n_records`` records,
    each with its own signature."""
    zone = load_zone(EXAMPLE_ZONE, "example.com.", 2)
    rr = dns.rrset.RRset(dns.name.from_text(owner), dns.rdataclass.IN, dns.rdatatype.A)
    for i in range(n_records):
        rr.add(dns.rdata.from_text("IN", "A", f"198.51.100.{i + 1}"), 300)
    zone.add(rr)
    responder = PresignedResponder(zone)
    query = dns.message.make_query(owner, "A")
    query.flags = 0
    qwire = query.to_wire()
    return AmplificationRow(f"presigned {n_records}x A", len(qwire), len(responder.handle(qwire)))
