"""Pre-signed responder used as the DNSSEC-style comparison point.

Every record is signed on its own at load time (ECDSA P-256, algorithm 13) so
a response carries one RRSIG per record, and the resolver side checks one
signature per record. It is not a DNSSEC implementation: there is no chain of
trust, no denial of existence and no DS handling.
"""

from __future__ import annotations

import time

import dns.dnssec
import dns.exception
import dns.flags
import dns.message
import dns.name
import dns.rdataclass
import dns.rdatatype
import dns.rrset
from cryptography.hazmat.primitives.asymmetric import ec

from ..zone import ZoneData, render

SIG_LIFETIME = 30 * 86400


class PresignedResponder:
    def __init__(self, zone: ZoneData, key: ec.EllipticCurvePrivateKey | None = None, now: float | None = None):
        self.zone = zone
        self.key = key or ec.generate_private_key(ec.SECP256R1())
        self.dnskey = dns.dnssec.make_dnskey(self.key.public_key(), dns.dnssec.Algorithm.ECDSAP256SHA256)
        now = time.time() if now is None else now
        self._sigs: dict[tuple, list] = {}
        for key_, rrset in zone.records.items():
            self._sigs[key_] = [self._sign_one(rrset, rd, now) for rd in rrset]

    def _sign_one(self, rrset: dns.rrset.RRset, rdata, now: float):
        single = dns.rrset.RRset(rrset.name, rrset.rdclass, rrset.rdtype)
        single.add(rdata, rrset.ttl)
        return dns.dnssec.sign(
            single, self.key, self.zone.origin, self.dnskey,
            inception=int(now) - 3600, expiration=int(now) + SIG_LIFETIME,
        )

    @property
    def keys(self) -> dict:
        """Key set in the shape ``dns.dnssec.validate_rrsig`` expects."""
        rrset = dns.rrset.RRset(self.zone.origin, dns.rdataclass.IN, dns.rdatatype.DNSKEY)
        rrset.add(self.dnskey, 3600)
        return {self.zone.origin: rrset}

    def _with_sigs(self, section: list) -> list:
        out = []
        for rrset in section:
            sigs = self._sigs.get((rrset.name, rrset.rdtype), ())
            out.append(rrset)
            if sigs:
                rrsig = dns.rrset.RRset(rrset.name, rrset.rdclass, dns.rdatatype.RRSIG, rrset.rdtype)
                for s in sigs:
                    rrsig.add(s, rrset.ttl)
                out.append(rrsig)
        return out

    def answer_bytes(self, query: dns.message.Message) -> bytes:
        response, _ = self.zone.respond(query)
        response.answer[:] = self._with_sigs(list(response.answer))
        response.authority[:] = self._with_sigs(list(response.authority))
        return render(response)

    def handle(self, datagram: bytes, src=None) -> bytes | None:
        try:
            query = dns.message.from_wire(datagram)
        except dns.exception.DNSException:
            return None
        if query.flags & dns.flags.QR:
            return None
        return self.answer_bytes(query)


def verify_per_record(response: dns.message.Message, keys: dict, now: float | None = None) -> int:
    """Check every answer record against its own RRSIG; returns how many were
    verified and raises ``dns.dnssec.ValidationFailure`` on the first bad one."""
    now = time.time() if now is None else now
    checked = 0
    for rrset in response.answer:
        if rrset.rdtype == dns.rdatatype.RRSIG:
            continue
        sigs = response.get_rrset(response.answer, rrset.name, rrset.rdclass, dns.rdatatype.RRSIG, rrset.rdtype)
        if sigs is None:
            raise dns.dnssec.ValidationFailure(f"no signatures for {rrset.name}")
        sigs = list(sigs)
        for i, rd in enumerate(rrset):
            single = dns.rrset.RRset(rrset.name, rrset.rdclass, rrset.rdtype)
            single.add(rd, rrset.ttl)
            # signatures normally arrive in record order; try the matching one first
            for sig in sigs[i:i + 1] + sigs[:i] + sigs[i + 1:]:
                try:
                    dns.dnssec.validate_rrsig(single, sig, keys, now=now)
                    break
                except dns.dnssec.ValidationFailure:
                    continue
            else:
                raise dns.dnssec.ValidationFailure(f"no valid signature for {rd} at {rrset.name}")
            checked += 1
    return checked
