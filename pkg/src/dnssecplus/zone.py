"""Zone data: master-file loading, child-key sidecar files and Vanilla lookup.

Zone files are plain DNS master files; nothing about them changes for
DNSSEC+. The long-term public keys of delegated children live in a separate
sidecar file with lines of the form::

    child <name> w <hex33> [w <hex33>] A <hex32>
"""

from __future__ import annotations

import enum
import re
import threading
from dataclasses import dataclass, field

import dns.exception
import dns.flags
import dns.message
import dns.name
import dns.opcode
import dns.rcode
import dns.rdata
import dns.rdataclass
import dns.rdataset
import dns.rdatatype
import dns.rrset
import dns.ttl

from . import crypto

SUPPORTED_TYPES = {
    dns.rdatatype.A,
    dns.rdatatype.AAAA,
    dns.rdatatype.NS,
    dns.rdatatype.TXT,
    dns.rdatatype.CNAME,
    dns.rdatatype.SOA,
}
DEFAULT_TTL = 3600
MAX_CNAME_CHAIN = 8


class ParseErrorKind(enum.Enum):
    SYNTAX = "syntax"
    UNSUPPORTED_TYPE = "unsupported-type"
    DUPLICATE_SOA = "duplicate-soa"
    MISSING_SOA = "missing-soa"
    MISSING_CHILD_KEYS = "missing-child-keys"
    BAD_SIDECAR = "bad-sidecar"


class ParseError(ValueError):
    def __init__(self, kind: ParseErrorKind, message: str, lines: list[int] | None = None):
        lines = lines or []
        where = f" (lines {', '.join(map(str, lines))})" if lines else ""
        super().__init__(f"{kind.value}: {message}{where}")
        self.kind = kind
        self.lines = lines


@dataclass(frozen=True)
class ChildKeys:
    signing_keys: tuple[bytes, ...]
    agreement_key: bytes

    def __post_init__(self):
        if not self.signing_keys:
            raise ValueError("at least one child signing key is required")
        for w in self.signing_keys:
            if len(w) != crypto.VERIFY_KEY_SIZE:
                raise ValueError("child signing key must be 33 bytes")
        if len(self.agreement_key) != crypto.AGREEMENT_KEY_SIZE:
            raise ValueError("child agreement key must be 32 bytes")


def parse_sidecar(text: str) -> dict[dns.name.Name, ChildKeys]:
    out: dict[dns.name.Name, ChildKeys] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tok = line.split()
        if tok[0] != "child" or len(tok) < 6 or len(tok) % 2:
            raise ParseError(ParseErrorKind.BAD_SIDECAR, f"cannot parse {raw!r}", [lineno])
        ws, agreement = [], None
        try:
            for key, value in zip(tok[2::2], tok[3::2]):
                if key == "w":
                    ws.append(bytes.fromhex(value))
                elif key == "A" and agreement is None:
                    agreement = bytes.fromhex(value)
                else:
                    raise ValueError(f"unexpected field {key!r}")
            out[dns.name.from_text(tok[1])] = ChildKeys(tuple(ws), agreement)
        except (ValueError, TypeError, dns.exception.DNSException) as exc:
            raise ParseError(ParseErrorKind.BAD_SIDECAR, str(exc), [lineno]) from None
    return out


def format_sidecar(children: dict[dns.name.Name, ChildKeys]) -> str:
    lines = []
    for name, keys in sorted(children.items()):
        ws = " ".join(f"w {w.hex()}" for w in keys.signing_keys)
        lines.append(f"child {name.to_text()} {ws} A {keys.agreement_key.hex()}")
    return "\n".join(lines) + "\n"


_TTL_RE = re.compile(r"^\d+[smhdwSMHDW]?$|^(\d+[smhdwSMHDW])+$")


def _logical_lines(text: str):
    """Yield (first line number, tokens-text, starts-with-space) with comments
    stripped and parenthesised continuations joined."""
    buf, start, depth, leading = [], 0, 0, False
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = _strip_comment(raw)
        if depth == 0:
            if not line.strip():
                continue
            start, leading, buf = lineno, raw[:1] in (" ", "\t"), []
        depth += line.count("(") - line.count(")")
        buf.append(line.replace("(", " ").replace(")", " "))
        if depth <= 0:
            depth = 0
            yield start, " ".join(buf), leading
    if depth:
        yield start, " ".join(buf), leading


def _strip_comment(line: str) -> str:
    out, quoted = [], False
    for ch in line:
        if ch == '"':
            quoted = not quoted
        elif ch == ";" and not quoted:
            break
        out.append(ch)
    return "".join(out)


@dataclass(frozen=True)
class Delegation:
    child: dns.name.Name
    ns: dns.rrset.RRset
    glue: tuple[dns.rrset.RRset, ...]
    keys: ChildKeys


class LookupKind(enum.Enum):
    ANSWER = "answer"
    REFERRAL = "referral"
    NODATA = "nodata"
    NXDOMAIN = "nxdomain"
    REFUSED = "refused"


@dataclass
class LookupResult:
    kind: LookupKind
    rcode: int
    answer: list[dns.rrset.RRset] = field(default_factory=list)
    authority: list[dns.rrset.RRset] = field(default_factory=list)
    additional: list[dns.rrset.RRset] = field(default_factory=list)
    delegation: Delegation | None = None

    @property
    def authoritative(self) -> bool:
        return self.kind not in (LookupKind.REFERRAL, LookupKind.REFUSED)


class ZoneData:
    """Records of one zone plus the published keys of its delegated children."""

    def __init__(self, origin: dns.name.Name, level: int):
        self.origin = origin
        self.level = level
        self.records: dict[tuple[dns.name.Name, int], dns.rrset.RRset] = {}
        self.children: dict[dns.name.Name, ChildKeys] = {}
        self._names: set[dns.name.Name] = set()
        self._lock = threading.Lock()

    # -- construction -------------------------------------------------
    def add(self, rrset: dns.rrset.RRset) -> None:
        key = (rrset.name, rrset.rdtype)
        existing = self.records.get(key)
        if existing is None:
            self.records[key] = rrset
        else:
            existing.update_ttl(rrset.ttl)
            existing.union_update(rrset)
        name = rrset.name
        while name != self.origin and name.is_subdomain(self.origin):
            self._names.add(name)
            name = name.parent()
        self._names.add(self.origin)

    @property
    def soa(self) -> dns.rrset.RRset:
        return self.records[(self.origin, dns.rdatatype.SOA)]

    def delegation_points(self) -> list[dns.name.Name]:
        return sorted(
            name for (name, rdtype) in self.records
            if rdtype == dns.rdatatype.NS and name != self.origin
        )

    def publish_child_keys(self, child: dns.name.Name | str, keys: ChildKeys) -> None:
        """Replace the published long-term keys for ``child`` (parent-side of a rollover)."""
        if isinstance(child, str):
            child = dns.name.from_text(child)
        with self._lock:
            updated = dict(self.children)
            updated[child] = keys
            self.children = updated

    # -- lookup -------------------------------------------------------
    def _cut_for(self, qname: dns.name.Name) -> dns.name.Name | None:
        labels = qname.relativize(self.origin).labels
        name = self.origin
        for label in reversed(labels):
            name = dns.name.Name((label,) + name.labels)
            if (name, dns.rdatatype.NS) in self.records:
                return name
        return None

    def _glue_for(self, ns: dns.rrset.RRset) -> tuple[dns.rrset.RRset, ...]:
        glue = []
        for rdata in ns:
            for rdtype in (dns.rdatatype.A, dns.rdatatype.AAAA):
                rr = self.records.get((rdata.target, rdtype))
                if rr is not None:
                    glue.append(rr)
        return tuple(glue)

    def _negative_soa(self) -> dns.rrset.RRset:
        soa = self.soa
        neg = dns.rrset.RRset(soa.name, soa.rdclass, soa.rdtype)
        neg.update(soa)
        neg.ttl = min(soa.ttl, soa[0].minimum)
        return neg

    def lookup(self, qname: dns.name.Name, qtype: int) -> LookupResult:
        if not qname.is_subdomain(self.origin):
            return LookupResult(LookupKind.REFUSED, dns.rcode.REFUSED)
        cut = self._cut_for(qname)
        if cut is not None:
            ns = self.records[(cut, dns.rdatatype.NS)]
            keys = self.children.get(cut)
            glue = self._glue_for(ns)
            delegation = Delegation(cut, ns, glue, keys) if keys is not None else None
            return LookupResult(
                LookupKind.REFERRAL, dns.rcode.NOERROR,
                authority=[ns], additional=list(glue), delegation=delegation,
            )
        answer = []
        name = qname
        for _ in range(MAX_CNAME_CHAIN):
            rr = self.records.get((name, qtype))
            if rr is not None:
                answer.append(rr)
                return LookupResult(LookupKind.ANSWER, dns.rcode.NOERROR, answer=answer)
            cname = self.records.get((name, dns.rdatatype.CNAME))
            if cname is None or qtype == dns.rdatatype.CNAME:
                break
            answer.append(cname)
            name = cname[0].target
            if not name.is_subdomain(self.origin) or self._cut_for(name) is not None:
                return LookupResult(LookupKind.ANSWER, dns.rcode.NOERROR, answer=answer)
        if answer:
            return LookupResult(LookupKind.ANSWER, dns.rcode.NOERROR, answer=answer)
        if name in self._names:
            return LookupResult(LookupKind.NODATA, dns.rcode.NOERROR, authority=[self._negative_soa()])
        return LookupResult(LookupKind.NXDOMAIN, dns.rcode.NXDOMAIN, authority=[self._negative_soa()])

    def respond(self, query: dns.message.Message) -> tuple[dns.message.Message, LookupResult | None]:
        """Build the standard DNS response to ``query``; identical for every scheme."""
        response = dns.message.make_response(query)
        if query.opcode() != dns.opcode.QUERY or len(query.question) != 1:
            response.set_rcode(dns.rcode.NOTIMP if query.opcode() != dns.opcode.QUERY else dns.rcode.FORMERR)
            return response, None
        q = query.question[0]
        result = self.lookup(q.name, q.rdtype)
        response.set_rcode(result.rcode)
        if result.authoritative:
            response.flags |= dns.flags.AA
        for section, rrsets in (
            (response.answer, result.answer),
            (response.authority, result.authority),
            (response.additional, result.additional),
        ):
            section.extend(rrsets)
        return response, result


def render(response: dns.message.Message) -> bytes:
    """Wire form with records in zone order; dnspython shuffles RRsets by default."""
    return response.to_wire(want_shuffle=False)


def load_zone(zone_text: str, origin: str | dns.name.Name, level: int, sidecar_text: str = "") -> ZoneData:
    """Parse a master file (A, AAAA, NS, TXT, CNAME, SOA) and its child-key sidecar.

    Every unsupported record type is reported at once, with line numbers.
    """
    if isinstance(origin, str):
        origin = dns.name.from_text(origin)
    zone = ZoneData(origin, level)
    current_origin = origin
    default_ttl = None
    last_owner = None
    unsupported, soa_lines = [], []

    for lineno, text, leading in _logical_lines(zone_text):
        tokens = text.split()
        if tokens[0].upper() == "$ORIGIN":
            current_origin = dns.name.from_text(tokens[1], origin)
            continue
        if tokens[0].upper() == "$TTL":
            default_ttl = _parse_ttl(tokens[1], lineno)
            continue
        if tokens[0].startswith("$"):
            raise ParseError(ParseErrorKind.SYNTAX, f"unsupported directive {tokens[0]}", [lineno])
        if leading:
            if last_owner is None:
                raise ParseError(ParseErrorKind.SYNTAX, "no owner name", [lineno])
            owner = last_owner
        else:
            owner_text = tokens.pop(0)
            owner = current_origin if owner_text == "@" else dns.name.from_text(owner_text, current_origin)
        last_owner = owner
        ttl = None
        rdclass = dns.rdataclass.IN
        while tokens:
            tok = tokens[0]
            if ttl is None and _TTL_RE.match(tok):
                ttl = _parse_ttl(tok, lineno)
            elif tok.upper() in ("IN", "CH", "HS"):
                rdclass = dns.rdataclass.from_text(tok)
            else:
                break
            tokens.pop(0)
        if not tokens:
            raise ParseError(ParseErrorKind.SYNTAX, "missing record type", [lineno])
        try:
            rdtype = dns.rdatatype.from_text(tokens.pop(0))
        except dns.exception.DNSException:
            unsupported.append(lineno)
            continue
        if rdtype not in SUPPORTED_TYPES:
            unsupported.append(lineno)
            continue
        if not owner.is_subdomain(origin):
            raise ParseError(ParseErrorKind.SYNTAX, f"{owner} is outside {origin}", [lineno])
        try:
            rdata = dns.rdata.from_text(rdclass, rdtype, " ".join(tokens), current_origin, relativize=False)
        except (dns.exception.DNSException, ValueError) as exc:
            raise ParseError(ParseErrorKind.SYNTAX, str(exc), [lineno]) from None
        if rdtype == dns.rdatatype.SOA:
            soa_lines.append(lineno)
            if ttl is None and default_ttl is None:
                default_ttl = rdata.minimum
        if ttl is None:
            ttl = default_ttl if default_ttl is not None else DEFAULT_TTL
        rrset = dns.rrset.RRset(owner, rdclass, rdtype)
        rrset.add(rdata, ttl)
        zone.add(rrset)

    if unsupported:
        raise ParseError(ParseErrorKind.UNSUPPORTED_TYPE, "unsupported record types", unsupported)
    if len(soa_lines) > 1:
        raise ParseError(ParseErrorKind.DUPLICATE_SOA, "more than one SOA", soa_lines)
    if not soa_lines or (origin, dns.rdatatype.SOA) not in zone.records:
        raise ParseError(ParseErrorKind.MISSING_SOA, f"no SOA at {origin}")

    children = parse_sidecar(sidecar_text) if sidecar_text else {}
    missing = [cut for cut in zone.delegation_points() if cut not in children]
    if missing:
        raise ParseError(
            ParseErrorKind.MISSING_CHILD_KEYS,
            "delegations without child keys: " + ", ".join(n.to_text() for n in missing),
        )
    zone.children = children
    return zone


def _parse_ttl(text: str, lineno: int) -> int:
    try:
        return dns.ttl.from_text(text)
    except dns.exception.DNSException as exc:
        raise ParseError(ParseErrorKind.SYNTAX, str(exc), [lineno]) from None


class VanillaResponder:
    """Plain DNS over UDP for the same zone data; the oracle and the benchmark baseline."""

    def __init__(self, zone: ZoneData):
        self.zone = zone

    def answer_bytes(self, query: dns.message.Message) -> bytes:
        response, _ = self.zone.respond(query)
        return render(response)

    def handle(self, datagram: bytes, src=None) -> bytes | None:
        try:
            query = dns.message.from_wire(datagram)
        except dns.exception.DNSException:
            return None
        if query.flags & dns.flags.QR:
            return None
        return self.answer_bytes(query)
