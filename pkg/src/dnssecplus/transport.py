"""Datagram transports used by the resolver, nameservers and key servers.

``exchange(addr, datagram)`` sends one datagram and returns the reply, or
``None`` when nothing came back before the deadline.
"""

from __future__ import annotations

import logging
import socket
import threading
from dataclasses import dataclass, field
from typing import Callable, Protocol

log = logging.getLogger(__name__)

Address = tuple[str, int]
Handler = Callable[[bytes, Address], "bytes | None"]


class Transport(Protocol):
    def exchange(self, addr: Address, datagram: bytes, timeout: float = 2.0) -> bytes | None: ...


def parse_address(text: str, default_port: int = 53) -> Address:
    host, sep, port = text.rpartition(":")
    if not sep:
        return text, default_port
    return host.strip("[]"), int(port)


def format_address(addr: Address) -> str:
    return f"{addr[0]}:{addr[1]}"


@dataclass
class Exchange:
    src: Address
    dst: Address
    query: bytes
    response: bytes | None


class Interceptor(Protocol):
    """Sits on the path. Returns the (possibly altered) query, response or
    destination; ``None`` from a query hook drops the datagram."""

    def on_query(self, dst: Address, datagram: bytes) -> tuple[Address, bytes] | None: ...

    def on_response(self, dst: Address, query: bytes, datagram: bytes | None) -> bytes | None: ...


@dataclass
class InMemoryTransport:
    """Loss-free in-process network with an exchange log and optional on-path hooks."""

    source: Address = ("192.0.2.53", 5300)
    handlers: dict[Address, Handler] = field(default_factory=dict)
    log: list[Exchange] = field(default_factory=list)
    interceptors: list = field(default_factory=list)
    down: set[Address] = field(default_factory=set)

    def register(self, addr: Address, handler: Handler) -> None:
        self.handlers[addr] = handler

    def unregister(self, addr: Address) -> None:
        self.handlers.pop(addr, None)

    def exchange(self, addr: Address, datagram: bytes, timeout: float = 2.0) -> bytes | None:
        dst = addr
        for hook in self.interceptors:
            out = hook.on_query(dst, datagram)
            if out is None:
                self.log.append(Exchange(self.source, addr, datagram, None))
                return None
            dst, datagram = out
        handler = self.handlers.get(dst)
        response = None
        if handler is not None and dst not in self.down:
            response = handler(datagram, self.source)
        for hook in self.interceptors:
            response = hook.on_response(dst, datagram, response)
        self.log.append(Exchange(self.source, addr, datagram, response))
        return response

    def exchanges_to(self, addrs) -> int:
        wanted = set(addrs)
        return sum(1 for e in self.log if e.dst in wanted)


class UdpTransport:
    def __init__(self, bind: Address | None = None):
        self.bind = bind

    def exchange(self, addr: Address, datagram: bytes, timeout: float = 2.0) -> bytes | None:
        family = socket.AF_INET6 if ":" in addr[0] else socket.AF_INET
        with socket.socket(family, socket.SOCK_DGRAM) as sock:
            if self.bind:
                sock.bind(self.bind)
            sock.settimeout(timeout)
            sock.sendto(datagram, addr)
            try:
                while True:
                    data, peer = sock.recvfrom(65535)
                    if peer[:2] == addr or peer[0] == addr[0]:
                        return data
            except (socket.timeout, ConnectionRefusedError):
                return None


class UdpServer:
    """Threaded UDP listener dispatching every datagram to ``handler``."""

    def __init__(self, addr: Address, handler: Handler, workers: int = 4):
        family = socket.AF_INET6 if ":" in addr[0] else socket.AF_INET
        self.sock = socket.socket(family, socket.SOCK_DGRAM)
        self.sock.bind(addr)
        self.address: Address = self.sock.getsockname()[:2]
        self.handler = handler
        self.workers = workers
        self._stop = threading.Event()
        self._threads: list[threading.Thread] = []

    def _loop(self) -> None:
        self.sock.settimeout(0.2)
        while not self._stop.is_set():
            try:
                data, peer = self.sock.recvfrom(65535)
            except socket.timeout:
                continue
            except OSError:
                return
            try:
                reply = self.handler(data, peer[:2])
            except Exception:
                log.exception("handler failed for datagram from %s", peer)
                continue
            if reply is not None:
                self.sock.sendto(reply, peer)

    def start(self) -> "UdpServer":
        for _ in range(self.workers):
            t = threading.Thread(target=self._loop, daemon=True)
            t.start()
            self._threads.append(t)
        return self

    def serve_forever(self) -> None:
        self.start()
        try:
            while not self._stop.wait(0.5):
                pass
        finally:
            self.close()

    def close(self) -> None:
        self._stop.set()
        for t in self._threads:
            t.join(timeout=1)
        self.sock.close()
