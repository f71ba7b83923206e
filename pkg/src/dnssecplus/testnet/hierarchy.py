"""In-process root -> TLD -> SLD hierarchy on a simulated clock."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import dns.name
import dns.rdatatype

from .. import crypto, delegation
from ..clock import SimulatedClock
from ..keyserver import KeyServer, NameserverRegistration, ZoneDataParentLink, ZoneLongTermKeys
from ..nameserver import Nameserver, NameserverConfig
from ..resolver import KeyTtlPolicy, Resolver, TrustAnchor
from ..transport import Address, InMemoryTransport
from ..zone import ParseError, ZoneData, format_sidecar, load_zone

log = logging.getLogger(__name__)


class BuildError(ValueError):
    pass


@dataclass
class ZoneSpec:
    name: str
    zone_text: str
    # False leaves this zone's keys out of the parent's sidecar (a misconfiguration).
    publish: bool = True


@dataclass
class TestnetConfig:
    __test__ = False

    stk_lifetime: int = delegation.DEFAULT_LIFETIME
    max_lifetime: int = delegation.DEFAULT_MAX_LIFETIME
    skew: int = delegation.DEFAULT_SKEW
    key_ttls: dict[int, float] | None = None
    ns_config: dict = field(default_factory=dict)

    @property
    def key_policy(self) -> KeyTtlPolicy:
        return KeyTtlPolicy(self.key_ttls)

    @classmethod
    def compressed(cls, **overrides) -> "TestnetConfig":
        """Short lifetimes so rollovers finish within minutes of simulated time."""
        base = dict(
            stk_lifetime=60, max_lifetime=60, skew=2,
            key_ttls={0: 40.0, 1: 30.0, 2: 20.0},
        )
        base.update(overrides)
        return cls(**base)


@dataclass
class ZoneInstance:
    name: dns.name.Name
    level: int
    data: ZoneData
    keys: ZoneLongTermKeys
    keyserver: KeyServer
    keyserver_addr: Address
    nameservers: list[Nameserver]
    addresses: list[Address]
    parent: "ZoneInstance | None" = None


class Testnet:
    __test__ = False

    def __init__(self, clock: SimulatedClock, transport: InMemoryTransport, config: TestnetConfig):
        self.clock = clock
        self.transport = transport
        self.config = config
        self.zones: dict[dns.name.Name, ZoneInstance] = {}

    def zone(self, name: str | dns.name.Name) -> ZoneInstance:
        if isinstance(name, str):
            name = dns.name.from_text(name)
        return self.zones[name]

    @property
    def root(self) -> ZoneInstance:
        return self.zones[dns.name.root]

    def anchor(self) -> TrustAnchor:
        root = self.root
        return TrustAnchor(root.keys.signing.public, root.keys.agreement.public, tuple(root.addresses))

    def resolver(self, **kwargs) -> Resolver:
        kwargs.setdefault("key_policy", self.config.key_policy)
        kwargs.setdefault("skew", self.config.skew)
        return Resolver(self.anchor(), self.transport, self.clock, **kwargs)

    def all_nameservers(self) -> list[Nameserver]:
        return [ns for z in self.zones.values() for ns in z.nameservers]

    def maintain(self, skip_waits=False) -> None:
        for ns in self.all_nameservers():
            ns.maintain()
        for z in self.zones.values():
            z.keyserver.advance(skip_waits=skip_waits)

    def tick(self, dt: float) -> None:
        self.clock.advance(dt)
        self.maintain()

    def add_nameserver(self, zone: str | dns.name.Name, address: Address, *, register_route: bool = True, **config) -> Nameserver:
        """Bring up one more instance for ``zone`` (registered with its key server)."""
        z = self.zone(zone)
        ns_id = max((ns.nameserver_id for ns in z.nameservers), default=0) + 1
        ns = _make_nameserver(self, z, ns_id, address, config)
        if register_route:
            z.nameservers.append(ns)
        return ns


def _make_nameserver(net: Testnet, z: ZoneInstance, ns_id: int, address: Address, overrides: dict) -> Nameserver:
    cfg = dict(net.config.ns_config)
    cfg.update(overrides)
    cfg.setdefault("lifetime", net.config.stk_lifetime)
    static = crypto.gen_agreement_keypair()
    ns = Nameserver(
        z.data, ns_id, static, net.clock,
        transport=net.transport,
        keyserver_addr=z.keyserver_addr,
        keyserver_channel_pub=z.keyserver.channel_public,
        config=NameserverConfig(**cfg),
    )
    z.keyserver.register(NameserverRegistration(ns_id, static.public, address))
    net.transport.register(address, ns.handle_datagram)
    if not z.keyserver.distribute_agreement_private(z.keyserver.registrations[ns_id]):
        raise BuildError(f"could not provision agreement key on {address}")
    if not ns.refresh_credential():
        raise BuildError(f"nameserver {ns_id} of {z.name} got no credential")
    return ns


def _zone_addresses(data: ZoneData, parent: ZoneData | None) -> list[Address]:
    ns = data.records.get((data.origin, dns.rdatatype.NS))
    if ns is None:
        raise BuildError(f"{data.origin} has no apex NS records")
    addrs = []
    for rd in ns:
        for source in (data, parent):
            if source is None:
                continue
            rr = source.records.get((rd.target, dns.rdatatype.A))
            if rr is not None:
                addrs += [(a.address, 53) for a in rr]
                break
    if not addrs:
        raise BuildError(f"no addresses for nameservers of {data.origin}")
    return sorted(set(addrs))


def build_hierarchy(specs: list[ZoneSpec], clock: SimulatedClock | None = None, config: TestnetConfig | None = None, transport: InMemoryTransport | None = None) -> Testnet:
    """Create key servers and nameservers for every zone, issue credentials and
    publish each child's long-term public keys in its parent."""
    clock = clock or SimulatedClock()
    config = config or TestnetConfig()
    transport = transport or InMemoryTransport()
    net = Testnet(clock, transport, config)

    by_name: dict[dns.name.Name, ZoneSpec] = {}
    for spec in specs:
        name = dns.name.from_text(spec.name)
        if name in by_name:
            raise BuildError(f"zone {name} listed twice")
        by_name[name] = spec
    if dns.name.root not in by_name:
        raise BuildError("no root zone")

    parents: dict[dns.name.Name, dns.name.Name | None] = {}
    levels: dict[dns.name.Name, int] = {}
    for name in sorted(by_name, key=len):
        if name == dns.name.root:
            parents[name], levels[name] = None, 0
            continue
        up = name.parent()
        while up not in by_name:
            up = up.parent()
        if len(name) - len(up) != 1:
            raise BuildError(f"level gap between {up} and {name}")
        parents[name], levels[name] = up, levels[up] + 1

    keys = {
        name: ZoneLongTermKeys(name, levels[name], crypto.gen_signing_keypair(), crypto.gen_agreement_keypair())
        for name in by_name
    }
    data: dict[dns.name.Name, ZoneData] = {}
    for name, spec in by_name.items():
        children = {
            child: keys[child].public()
            for child, parent in parents.items()
            if parent == name and by_name[child].publish
        }
        try:
            data[name] = load_zone(spec.zone_text, name, levels[name], format_sidecar(children) if children else "")
        except ParseError as exc:
            raise BuildError(f"zone {name}: {exc}") from exc
    for name, parent in parents.items():
        if parent is not None and name not in data[parent].delegation_points():
            raise BuildError(f"{parent} does not delegate {name}")

    for name in sorted(by_name, key=len):
        parent = parents[name]
        ks_addr = (f"keyserver.{name.to_text()}", 953)
        ks = KeyServer(
            keys[name], crypto.gen_agreement_keypair(), clock, transport,
            parent=ZoneDataParentLink(data[parent]) if parent is not None else None,
            max_lifetime=config.max_lifetime, skew=config.skew,
            key_cache_ttl=config.key_policy(levels[name]),
        )
        transport.register(ks_addr, ks.handle_datagram)
        z = ZoneInstance(
            name, levels[name], data[name], keys[name], ks, ks_addr, [],
            _zone_addresses(data[name], data[parent] if parent is not None else None),
            net.zones.get(parent) if parent is not None else None,
        )
        net.zones[name] = z
        for i, addr in enumerate(z.addresses, 1):
            z.nameservers.append(_make_nameserver(net, z, i, addr, {}))

    for name, z in net.zones.items():
        if z.parent is not None and z.parent.data.children.get(name) != z.keyserver.published_keys():
            raise BuildError(f"published keys for {name} do not match its key server")
    return net


# -- a default three-level hierarchy ----------------------------------------------

ROOT_ZONE = """\
$TTL 86400
@   IN SOA a.root-servers.net. nstld.root-servers.net. 1 1800 900 604800 86400
@   IN NS a.root-servers.net.
@   IN NS b.root-servers.net.
a.root-servers.net. IN A 10.0.0.1
b.root-servers.net. IN A 10.0.0.2
com.    IN NS ns1.nic.com.
com.    IN NS ns2.nic.com.
ns1.nic.com. IN A 10.0.1.1
ns2.nic.com. IN A 10.0.1.2
"""

COM_ZONE = """\
$ORIGIN com.
$TTL 86400
@   IN SOA ns1.nic.com. hostmaster.nic.com. 1 1800 900 604800 3600
@   IN NS ns1.nic.com.
@   IN NS ns2.nic.com.
ns1.nic IN A 10.0.1.1
ns2.nic IN A 10.0.1.2
example IN NS ns1.example.com.
example IN NS ns2.example.com.
ns1.example IN A 10.0.2.1
ns2.example IN A 10.0.2.2
"""

EXAMPLE_ZONE = """\
$ORIGIN example.com.
$TTL 300
@       IN SOA ns1.example.com. hostmaster.example.com. ( 2024010101 3600 600 86400 300 )
@       IN NS ns1.example.com.
@       IN NS ns2.example.com.
ns1     IN A 10.0.2.1
ns2     IN A 10.0.2.2
@       IN A 93.184.216.34
www     IN A 93.184.216.34
www     IN AAAA 2606:2800:220:1:248:1893:25c8:1946
mail    IN A 93.184.216.40
alias   IN CNAME www
txt     IN TXT "v=spf1 -all"
"""


def default_specs(extra_example_records: str = "", extra_com_records: str = "", extra_root_records: str = "") -> list[ZoneSpec]:
    return [
        ZoneSpec(".", ROOT_ZONE + extra_root_records),
        ZoneSpec("com.", COM_ZONE + extra_com_records),
        ZoneSpec("example.com.", EXAMPLE_ZONE + extra_example_records),
    ]


def default_testnet(config: TestnetConfig | None = None, clock: SimulatedClock | None = None, **extra) -> Testnet:
    return build_hierarchy(default_specs(**extra), clock=clock, config=config)
