"""Server processing-time benchmark over real UDP loopback.

Each scheme (plain DNS, pre-signed responses, DNSSEC+) runs in a
single-threaded server. Responses leave in fragments no larger than the
emulated MTU allows, each prefixed with (index, count). A sample is the time
from ``recvfrom`` returning the query to the last fragment's ``sendto``.
"""

from __future__ import annotations

import csv
import logging
import socket
import statistics
import struct
import threading
import time
from dataclasses import dataclass, field
from typing import Callable, TextIO

import dns.message

from .. import crypto, wire
from ..wire import Mode
from ..zone import VanillaResponder
from .baseline import PresignedResponder
from .hierarchy import Testnet, default_testnet

log = logging.getLogger(__name__)

SCHEMES = ("vanilla", "presigned", "dnssecplus")
DEFAULT_MTUS = (1500, 1000, 500, 200)
IP_UDP_HEADER = 20 + 8
FRAGMENT_HEADER = struct.Struct(">HH")

# one short A answer and one TXT answer that needs several fragments at small MTUs
BENCH_RECORDS = """
bench   IN A 192.0.2.80
bench   IN TXT "%s" "%s"
""" % ("b" * 200, "c" * 200)
BENCH_QUERIES = (("bench.example.com.", "A"), ("bench.example.com.", "TXT"))


def fragment_payload(mtu: int) -> int:
    """Largest datagram piece per emulated fragment: IP payload rounded down to 8 bytes."""
    if mtu <= IP_UDP_HEADER + FRAGMENT_HEADER.size + 8:
        raise ValueError(f"MTU {mtu} is too small")
    return (mtu - IP_UDP_HEADER) // 8 * 8


def fragment(data: bytes, mtu: int) -> list[bytes]:
    size = fragment_payload(mtu) - FRAGMENT_HEADER.size
    chunks = [data[i:i + size] for i in range(0, len(data), size)] or [b""]
    return [FRAGMENT_HEADER.pack(i, len(chunks)) + c for i, c in enumerate(chunks)]


def reassemble(fragments: list[bytes]) -> bytes:
    parts = {}
    for f in fragments:
        i, _ = FRAGMENT_HEADER.unpack_from(f)
        parts[i] = f[FRAGMENT_HEADER.size:]
    return b"".join(parts[i] for i in sorted(parts))


class FragmentingServer:
    """Single-threaded UDP responder that records per-query processing time."""

    def __init__(self, handler: Callable[[bytes, tuple], bytes | None], mtu: int, addr=("127.0.0.1", 0)):
        self.handler = handler
        self.mtu = mtu
        self.sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        self.sock.bind(addr)
        self.address = self.sock.getsockname()
        self.samples_us: list[float] = []
        self._stop = threading.Event()
        self._thread = threading.Thread(target=self._loop, daemon=True)

    def _loop(self) -> None:
        self.sock.settimeout(0.1)
        while not self._stop.is_set():
            try:
                data, peer = self.sock.recvfrom(65535)
            except socket.timeout:
                continue
            except OSError:
                return
            t0 = time.perf_counter_ns()
            reply = self.handler(data, peer)
            if reply is None:
                continue
            for piece in fragment(reply, self.mtu):
                self.sock.sendto(piece, peer)
            self.samples_us.append((time.perf_counter_ns() - t0) / 1000)

    def __enter__(self) -> "FragmentingServer":
        self._thread.start()
        return self

    def __exit__(self, *exc) -> None:
        self._stop.set()
        self._thread.join(timeout=2)
        self.sock.close()


def _client_exchange(sock: socket.socket, addr, datagram: bytes, timeout: float = 2.0) -> bytes | None:
    sock.settimeout(timeout)
    sock.sendto(datagram, addr)
    pieces, count = [], None
    try:
        while count is None or len(pieces) < count:
            data, _ = sock.recvfrom(65535)
            pieces.append(data)
            count = FRAGMENT_HEADER.unpack_from(data)[1]
    except socket.timeout:
        return None
    return reassemble(pieces)


def _dns_query(qname: str, qtype: str) -> bytes:
    q = dns.message.make_query(qname, qtype)
    q.flags = 0
    return q.to_wire()


def _dnssecplus_query(qname: str, qtype: str) -> bytes:
    eph = crypto.gen_agreement_keypair()
    return wire.encode_query(wire.DnssecPlusQuery(Mode.PLAIN, eph.public, _dns_query(qname, qtype)))


@dataclass
class BenchReport:
    samples: dict[tuple[str, int], list[float]] = field(default_factory=dict)

    def cells(self) -> list[tuple[str, int]]:
        return sorted(self.samples, key=lambda k: (SCHEMES.index(k[0]) if k[0] in SCHEMES else 99, -k[1]))

    def quantile(self, scheme: str, mtu: int, q: float) -> float:
        data = self.samples[(scheme, mtu)]
        if len(data) == 1:
            return data[0]
        cuts = statistics.quantiles(data, n=100, method="inclusive")
        return cuts[round(q * 100) - 1]

    def summary(self) -> dict[tuple[str, int], dict[str, float]]:
        return {
            cell: {f"p{p}": self.quantile(*cell, p / 100) for p in (50, 90, 99)}
            for cell in self.cells()
        }

    def cdf(self, scheme: str, mtu: int) -> list[tuple[float, float]]:
        data = sorted(self.samples[(scheme, mtu)])
        n = len(data)
        return [(x, (i + 1) / n) for i, x in enumerate(data)]

    def write_csv(self, out: TextIO) -> None:
        w = csv.writer(out, lineterminator="\n")
        w.writerow(["scheme", "mtu", "sample_us"])
        for scheme, mtu in self.cells():
            for s in self.samples[(scheme, mtu)]:
                w.writerow([scheme, mtu, f"{s:.3f}"])

    def format_summary(self) -> str:
        lines = ["scheme,mtu,p50_us,p90_us,p99_us"]
        for (scheme, mtu), q in self.summary().items():
            lines.append(f"{scheme},{mtu},{q['p50']:.1f},{q['p90']:.1f},{q['p99']:.1f}")
        return "\n".join(lines)


def bench_processing(net: Testnet | None = None, mtus=DEFAULT_MTUS, n_queries: int = 1000,
                     schemes=SCHEMES, warmup: int = 50) -> BenchReport:
    """Collect ``n_queries`` processing-time samples per (scheme, MTU) cell."""
    if n_queries < 1:
        raise ValueError("n_queries must be at least 1")
    for mtu in mtus:
        fragment_payload(mtu)
    net = net or default_testnet(extra_example_records=BENCH_RECORDS)
    z = net.zone("example.com.")
    ns = z.nameservers[0]
    handlers = {
        "vanilla": (VanillaResponder(z.data).handle, _dns_query),
        "presigned": (PresignedResponder(z.data).handle, _dns_query),
        "dnssecplus": (ns.handle_query, _dnssecplus_query),
    }
    report = BenchReport()
    with socket.socket(socket.AF_INET, socket.SOCK_DGRAM) as client:
        for scheme in schemes:
            handler, make_query = handlers[scheme]
            for mtu in mtus:
                with FragmentingServer(handler, mtu) as server:
                    for i in range(warmup + n_queries):
                        qname, qtype = BENCH_QUERIES[i % len(BENCH_QUERIES)]
                        if _client_exchange(client, server.address, make_query(qname, qtype)) is None:
                            raise RuntimeError(f"{scheme} at MTU {mtu}: no response")
                    # the server appends after its last sendto; wait for the final sample
                    deadline = time.monotonic() + 2
                    while len(server.samples_us) < warmup + n_queries and time.monotonic() < deadline:
                        time.sleep(0.001)
                report.samples[(scheme, mtu)] = list(server.samples_us[warmup:warmup + n_queries])
                log.info("bench %s mtu=%d n=%d", scheme, mtu, len(report.samples[(scheme, mtu)]))
    return report
