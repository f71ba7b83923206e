"""Command-line frontends: query tool, daemons, key generation, bench and attack runners.

Exit codes (stable; scripts may branch on them):

    0  success (an NXDOMAIN answer is a successful resolution)
    1  an attack scenario was not rejected
    2  authentication failure
    3  timeout
    4  wire-format error
    5  configuration or startup error
    6  server failure (bad referral, error rcode, no nameservers)

Option values come from, in order of precedence: command-line flags,
``DNSSECPLUS_<OPTION>`` environment variables, then the ``[<subcommand>]``
section of an INI file given by ``--config`` or ``DNSSECPLUS_CONFIG``.
Key material is only ever read from files, never from flags.
"""

from __future__ import annotations

import argparse
import configparser
import logging
import os
import signal
import stat
import sys
import threading
from pathlib import Path

import dns.name
import dns.rcode

from . import crypto
from .clock import SystemClock
from .keyserver import (
    Journal, KeyServer, KeyStore, NameserverRegistration, SidecarFileParentLink, ZoneLongTermKeys,
)
from .nameserver import ModeSupport, Nameserver, NameserverConfig
from .resolver import FailureReason, Resolver, TrustAnchor
from .transport import UdpServer, UdpTransport, format_address, parse_address
from .wire import Mode
from .zone import ParseError, load_zone

log = logging.getLogger("dnssecplus")

EXIT_OK = 0
EXIT_NOT_REJECTED = 1
EXIT_AUTH = 2
EXIT_TIMEOUT = 3
EXIT_WIRE = 4
EXIT_CONFIG = 5
EXIT_SERVFAIL = 6

FAILURE_EXIT = {
    FailureReason.AUTH_FAILURE: EXIT_AUTH,
    FailureReason.TIMEOUT: EXIT_TIMEOUT,
    FailureReason.WIRE_ERROR: EXIT_WIRE,
    FailureReason.SERVFAIL: EXIT_SERVFAIL,
}

ENV_PREFIX = "DNSSECPLUS_"


class ConfigError(Exception):
    pass


# -- key files ---------------------------------------------------------------------

def _read_secret(path: str) -> bytes:
    p = Path(path)
    try:
        mode = p.stat().st_mode
        data = bytes.fromhex(p.read_text().strip())
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot read key file {path}: {exc}") from None
    if mode & (stat.S_IRWXG | stat.S_IRWXO):
        log.warning("key file %s is accessible by group or others", path)
    return data


def load_signing_key(path: str) -> crypto.SigningKeypair:
    try:
        return crypto.SigningKeypair.from_private_bytes(_read_secret(path))
    except (ValueError, crypto.CryptoError) as exc:
        raise ConfigError(f"{path}: not a signing key ({exc})") from None


def load_agreement_key(path: str) -> crypto.AgreementKeypair:
    try:
        return crypto.AgreementKeypair.from_private_bytes(_read_secret(path))
    except (ValueError, crypto.CryptoError) as exc:
        raise ConfigError(f"{path}: not an agreement key ({exc})") from None


def _hex_public(text: str, size: int, what: str) -> bytes:
    """A public key given inline as hex or as a path to a file holding the hex."""
    if os.path.exists(text):
        text = Path(text).read_text().strip()
    try:
        data = bytes.fromhex(text)
    except ValueError:
        raise ConfigError(f"{what}: not hex") from None
    if len(data) != size:
        raise ConfigError(f"{what}: expected {size} bytes, got {len(data)}")
    return data


def _address(text: str, what: str):
    try:
        return parse_address(text)
    except ValueError:
        raise ConfigError(f"{what}: bad address {text!r}") from None


# -- query -------------------------------------------------------------------------

def _tamper_hook(net, scenario: str):
    from .testnet import attacks

    targets = [a for z in net.zones.values() for a in z.addresses]
    if scenario == "bit-flip":
        return attacks.BitFlipper(targets, "response", 40, 0x01)
    if scenario == "downgrade-to-plaintext":
        return attacks.PlaintextForger(targets)
    if scenario == "credential-substitute":
        example = net.zone("example.com.")
        return attacks.Redirector(example.addresses, example.parent.addresses[0])
    raise ConfigError(f"unknown tamper scenario {scenario}")


def cmd_query(args) -> int:
    mode = Mode.PRIVATE if args.mode == "private" else Mode.PLAIN
    if args.testnet:
        from .testnet.hierarchy import default_testnet

        net = default_testnet()
        anchor = net.anchor()
        transport = net.transport
        clock = net.clock
        if args.tamper:
            transport.interceptors.append(_tamper_hook(net, args.tamper))
    else:
        if args.tamper:
            raise ConfigError("--tamper needs --testnet")
        if not args.anchors:
            raise ConfigError("--anchors is required (or use --testnet)")
        try:
            anchor = TrustAnchor.from_text(Path(args.anchors).read_text())
        except (OSError, ValueError) as exc:
            raise ConfigError(f"anchors file {args.anchors}: {exc}") from None
        transport, clock = UdpTransport(), SystemClock()
    if args.server:
        anchor = TrustAnchor(anchor.root_verify_key, anchor.root_agreement_key, (_address(args.server, "--server"),))
    if not anchor.root_servers:
        raise ConfigError("no nameserver to start from: add ns lines to the anchors file or pass --server")
    if args.timeout <= 0:
        raise ConfigError("--timeout must be positive")

    resolver = Resolver(anchor, transport, clock, timeout=args.timeout, port=args.port)
    out = resolver.resolve(args.name, args.type.upper(), mode)

    if args.trace or not out.ok:
        stream = sys.stdout if out.ok else sys.stderr
        for t in out.trace:
            status = "verified" if t.verified else f"FAILED {t.failure}"
            extra = f" ns_id={t.nameserver_id} credential_expires={t.credential_expiration}" if t.verified else ""
            print(f";; zone={t.zone} server={format_address(t.nameserver)} round_trips={t.round_trips} {status}{extra}", file=stream)
    if not out.ok:
        print(f";; resolution failed: {out.describe_failure()}", file=sys.stderr)
        return FAILURE_EXIT[out.failure]
    print(f";; status: {dns.rcode.to_text(out.rcode)}, mode: {args.mode}, exchanges: {out.exchanges}")
    for rrset in out.records:
        print(rrset.to_text())
    return EXIT_OK


# -- keygen ------------------------------------------------------------------------

def cmd_keygen(args) -> int:
    out = Path(args.out)
    pub_path = out.with_name(out.name + ".pub")
    if not args.force and (out.exists() or pub_path.exists()):
        raise ConfigError(f"{out} exists; use --force to overwrite")
    if args.kind == "zone-signing":
        pair = crypto.gen_signing_keypair()
        secret = pair.private_bytes()
    else:
        pair = crypto.gen_agreement_keypair()
        secret = pair.private
    flags = os.O_WRONLY | os.O_CREAT | os.O_TRUNC
    try:
        fd = os.open(out, flags, 0o600)
        with os.fdopen(fd, "w") as fh:
            fh.write(secret.hex() + "\n")
        os.chmod(out, 0o600)
        pub_path.write_text(pair.public.hex() + "\n")
    except OSError as exc:
        raise ConfigError(f"cannot write {out}: {exc}") from None
    print(pair.public.hex())
    return EXIT_OK


# -- daemons -----------------------------------------------------------------------

def _wait_for_signal(stop: threading.Event) -> None:
    def handler(signum, frame):
        log.info("signal=%s action=shutdown", signal.Signals(signum).name)
        stop.set()

    signal.signal(signal.SIGTERM, handler)
    signal.signal(signal.SIGINT, handler)


def cmd_serve_ns(args) -> int:
    try:
        text = Path(args.zone_file).read_text()
        sidecar = Path(args.sidecar).read_text() if args.sidecar else ""
        zone = load_zone(text, args.origin, args.level, sidecar)
    except OSError as exc:
        raise ConfigError(f"zone file: {exc}") from None
    except ParseError as exc:
        raise ConfigError(f"zone file {args.zone_file}: {exc}") from None
    static = load_agreement_key(args.channel_key)
    ks_pub = _hex_public(args.keyserver_pub, crypto.AGREEMENT_KEY_SIZE, "--keyserver-pub")
    config = NameserverConfig(
        lifetime=args.lifetime,
        mode_support=ModeSupport.PRIVACY_ONLY if args.privacy_only else ModeSupport.BOTH,
        dual_stack=args.dual_stack,
        rate_limit=args.rate_limit,
    )
    ns = Nameserver(
        zone, args.id, static, SystemClock(),
        transport=UdpTransport(), keyserver_addr=_address(args.keyserver, "--keyserver"),
        keyserver_channel_pub=ks_pub, config=config,
    )
    try:
        server = UdpServer(_address(args.listen, "--listen"), ns.handle_datagram, workers=args.workers)
    except OSError as exc:
        raise ConfigError(f"cannot bind {args.listen}: {exc}") from None
    stop = threading.Event()
    _wait_for_signal(stop)
    server.start()
    log.info("nameserver id=%d zone=%s listen=%s", args.id, zone.origin, format_address(server.address))
    print(f"listening {format_address(server.address)}", flush=True)
    try:
        while not stop.is_set():
            if ns.refresh_due():
                if ns.refresh_credential():
                    log.info("credential ok expiration=%d", ns.credential.expiration)
                elif ns.answering():
                    log.warning("state=degraded reason=key-server-unreachable expiration=%d", ns.credential.expiration)
                else:
                    log.warning("state=silent reason=no-valid-credential")
            stop.wait(args.maintain_interval)
    finally:
        server.close()
        log.info("nameserver id=%d stopped", args.id)
    return EXIT_OK


def _read_nameservers(path: str) -> list[NameserverRegistration]:
    regs = []
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise ConfigError(f"nameservers file: {exc}") from None
    for lineno, raw in enumerate(lines, 1):
        tok = raw.split("#", 1)[0].split()
        if not tok:
            continue
        if len(tok) != 3:
            raise ConfigError(f"{path}:{lineno}: expected '<id> <channel-public-hex> <host:port>'")
        try:
            ns_id = int(tok[0])
        except ValueError:
            raise ConfigError(f"{path}:{lineno}: bad nameserver id") from None
        regs.append(NameserverRegistration(
            ns_id, _hex_public(tok[1], crypto.AGREEMENT_KEY_SIZE, f"{path}:{lineno}"), _address(tok[2], f"{path}:{lineno}"),
        ))
    return regs


def cmd_serve_keyserver(args) -> int:
    keys = ZoneLongTermKeys(
        dns.name.from_text(args.zone_name), args.level,
        load_signing_key(args.signing_key), load_agreement_key(args.agreement_key),
    )
    static = load_agreement_key(args.channel_key)
    regs = _read_nameservers(args.nameservers)
    ks = KeyServer(
        keys, static, SystemClock(), UdpTransport(),
        parent=SidecarFileParentLink(args.parent_sidecar) if args.parent_sidecar else None,
        journal=Journal(args.journal) if args.journal else None,
        keystore=KeyStore(args.keystore) if args.keystore else None,
        max_lifetime=args.max_lifetime, skew=args.skew, key_cache_ttl=args.key_cache_ttl,
    )
    ks.restore()
    for reg in regs:
        try:
            ks.register(reg)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
    try:
        server = UdpServer(_address(args.listen, "--listen"), ks.handle_datagram, workers=args.workers)
    except OSError as exc:
        raise ConfigError(f"cannot bind {args.listen}: {exc}") from None
    stop = threading.Event()
    _wait_for_signal(stop)
    server.start()
    log.info("keyserver zone=%s level=%d listen=%s nameservers=%d", keys.zone_name, keys.zone_level,
             format_address(server.address), len(regs))
    print(f"listening {format_address(server.address)}", flush=True)
    if args.rotate:
        begin = ks.begin_agreement_rotation if args.rotate == "agreement" else ks.begin_signing_rotation
        begin()
    try:
        while not stop.is_set():
            for reg in ks.registrations.values():
                if ks.agreement_generation not in ks.holdings.get(reg.nameserver_id, ()):
                    ks.distribute_agreement_private(reg)
            ks.advance()
            stop.wait(args.maintain_interval)
    finally:
        server.close()
        log.info("keyserver zone=%s stopped", keys.zone_name)
    return EXIT_OK


# -- bench and attack --------------------------------------------------------------

def cmd_bench(args) -> int:
    from .testnet.bench import bench_processing

    try:
        mtus = [int(m) for m in args.mtus.split(",") if m.strip()]
    except ValueError:
        raise ConfigError(f"--mtus: {args.mtus!r} is not a comma-separated list of integers") from None
    if not mtus:
        raise ConfigError("--mtus is empty")
    if args.n < 1:
        raise ConfigError("--n must be at least 1")
    try:
        report = bench_processing(mtus=mtus, n_queries=args.n)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    if args.csv == "-":
        report.write_csv(sys.stdout)
    else:
        with open(args.csv, "w", newline="") as fh:
            report.write_csv(fh)
        print(f"wrote {args.csv} ({len(report.samples)} cells)")
    print(report.format_summary())
    return EXIT_OK


def cmd_attack(args) -> int:
    from .testnet import attacks
    from .testnet.hierarchy import default_testnet

    net = default_testnet()
    if args.scenario:
        outcomes = []
        for name in args.scenario:
            try:
                mutation = attacks.Mutation(name)
            except ValueError:
                raise ConfigError(f"unknown scenario {name}; choose from {[m.value for m in attacks.Mutation]}") from None
            modes = (Mode.PRIVATE,) if mutation is attacks.Mutation.DOWNGRADE_TO_PLAINTEXT else (Mode.PLAIN, Mode.PRIVATE)
            for mode in modes:
                if mutation is attacks.Mutation.BIT_FLIP and not args.no_sweep:
                    for direction in ("query", "response"):
                        outcomes += attacks.bit_flip_sweep(net, mode, direction)
                else:
                    outcomes.append(attacks.run_attack(net, attacks.AttackScript(mutation, mode=mode, offset=40)))
    else:
        outcomes = attacks.standard_suite(net, sweep=not args.no_sweep)

    groups: dict[tuple, list] = {}
    for o in outcomes:
        s = o.script
        key = (s.mutation.value, s.mode.name.lower(), s.direction if s.mutation is attacks.Mutation.BIT_FLIP else "")
        groups.setdefault(key, []).append(o)
    failed = 0
    for (mutation, mode, direction), group in groups.items():
        rejected = sum(o.rejected for o in group)
        failed += len(group) - rejected
        verdict = "REJECTED" if rejected == len(group) else "NOT-REJECTED"
        reasons = sorted({f"{o.failure.value if o.failure else 'none'}/{getattr(o.detail, 'value', o.detail)}" for o in group})
        where = f" direction={direction}" if direction else ""
        print(f"{verdict} scenario={mutation} mode={mode}{where} cases={len(group)} rejected={rejected} failures={','.join(reasons)}")
        if args.verbose:
            for o in group:
                print("  " + o.line())
    print(f"total={len(outcomes)} rejected={len(outcomes) - failed}")
    return EXIT_OK if failed == 0 else EXIT_NOT_REJECTED


# -- argument parsing --------------------------------------------------------------

def build_parser() -> tuple[argparse.ArgumentParser, dict[str, argparse.ArgumentParser]]:
    parser = argparse.ArgumentParser(prog="dnssecplus", description=__doc__.split("\n\n")[0])
    parser.add_argument("--config", help="INI file with one section per subcommand")
    parser.add_argument("--log-level", default="WARNING", help="logging level (default WARNING)")
    sub = parser.add_subparsers(dest="command", required=True)
    subs = {}

    p = subs["query"] = sub.add_parser("query", help="resolve a name, dig-style")
    p.add_argument("name")
    p.add_argument("type", nargs="?", default="A")
    p.add_argument("--mode", choices=["plain", "private"], default="plain")
    p.add_argument("--anchors", help="trust anchor file (root w/A keys and ns lines)")
    p.add_argument("--server", help="host:port to send the first query to")
    p.add_argument("--port", type=int, default=53, help="port used for nameservers learned from referrals")
    p.add_argument("--timeout", type=float, default=2.0)
    p.add_argument("--trace", action="store_true", help="print one line per exchange")
    p.add_argument("--testnet", action="store_true", help="resolve inside a built-in in-process hierarchy")
    p.add_argument("--tamper", choices=["bit-flip", "downgrade-to-plaintext", "credential-substitute"],
                   help="put an on-path attacker into the --testnet path")
    p.set_defaults(func=cmd_query)

    p = subs["keygen"] = sub.add_parser("keygen", help="generate a key pair")
    p.add_argument("--kind", choices=["zone-signing", "zone-agreement", "channel"], required=True)
    p.add_argument("--out", required=True, help="private key path; the public key goes to <out>.pub")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_keygen)

    p = subs["serve-ns"] = sub.add_parser("serve-ns", help="run an authoritative nameserver")
    p.add_argument("--zone-file", required=True)
    p.add_argument("--origin", required=True)
    p.add_argument("--level", type=int, required=True)
    p.add_argument("--sidecar", help="child-key file for delegated zones")
    p.add_argument("--id", type=int, required=True, help="nameserver id registered with the key server")
    p.add_argument("--channel-key", required=True, help="file with this instance's channel private key")
    p.add_argument("--keyserver", required=True, help="key server host:port")
    p.add_argument("--keyserver-pub", required=True, help="key server channel public key (hex or file)")
    p.add_argument("--listen", default="127.0.0.1:5353")
    p.add_argument("--lifetime", type=int, default=6 * 3600, help="credential lifetime in seconds")
    p.add_argument("--privacy-only", action="store_true")
    p.add_argument("--dual-stack", action="store_true", help="also answer plain DNS queries")
    p.add_argument("--rate-limit", type=float, help="responses per second per source")
    p.add_argument("--workers", type=int, default=4)
    p.add_argument("--maintain-interval", type=float, default=5.0)
    p.set_defaults(func=cmd_serve_ns)

    p = subs["serve-keyserver"] = sub.add_parser("serve-keyserver", help="run a zone key server")
    p.add_argument("--zone-name", required=True)
    p.add_argument("--level", type=int, required=True)
    p.add_argument("--signing-key", required=True)
    p.add_argument("--agreement-key", required=True)
    p.add_argument("--channel-key", required=True)
    p.add_argument("--nameservers", required=True, help="file of '<id> <channel-public-hex> <host:port>' lines")
    p.add_argument("--listen", default="127.0.0.1:5953")
    p.add_argument("--journal")
    p.add_argument("--keystore")
    p.add_argument("--parent-sidecar", help="sidecar file to publish this zone's public keys into")
    p.add_argument("--max-lifetime", type=int, default=86400)
    p.add_argument("--skew", type=int, default=120)
    p.add_argument("--key-cache-ttl", type=float, default=6 * 3600, help="resolver key cache TTL for this level")
    p.add_argument("--rotate", choices=["agreement", "signing"], help="start a rollover after startup")
    p.add_argument("--workers", type=int, default=4)
    p.add_argument("--maintain-interval", type=float, default=1.0)
    p.set_defaults(func=cmd_serve_keyserver)

    p = subs["bench"] = sub.add_parser("bench", help="server processing-time benchmark over UDP loopback")
    p.add_argument("--mtus", default="1500,1000,500,200")
    p.add_argument("--n", type=int, default=1000, help="samples per scheme and MTU")
    p.add_argument("--csv", default="bench.csv", help="output path, or - for stdout")
    p.set_defaults(func=cmd_bench)

    p = subs["attack"] = sub.add_parser("attack", help="run on-path attack scenarios against a testnet")
    p.add_argument("--all", action="store_true", help="every scenario (the default)")
    p.add_argument("--scenario", action="append", help="one scenario; repeatable")
    p.add_argument("--no-sweep", action="store_true", help="one bit-flip offset instead of all")
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(func=cmd_attack)
    return parser, subs


def _apply_defaults(sub: argparse.ArgumentParser, section: str, config_path: str | None) -> None:
    """Fold config-file and environment values in as defaults, so flags still win."""
    values: dict[str, str] = {}
    if config_path:
        cp = configparser.ConfigParser()
        try:
            if not cp.read(config_path):
                raise ConfigError(f"cannot read config file {config_path}")
        except configparser.Error as exc:
            raise ConfigError(f"config file {config_path}: {exc}") from None
        if cp.has_section(section):
            values.update({k.replace("-", "_"): v for k, v in cp.items(section)})
    for action in sub._actions:
        if not action.option_strings:
            continue
        env = os.environ.get(ENV_PREFIX + action.dest.upper())
        if env is not None:
            values[action.dest] = env
    defaults = {}
    for action in sub._actions:
        if action.dest not in values or not action.option_strings:
            continue
        raw = values[action.dest]
        if isinstance(action, argparse._StoreTrueAction):
            defaults[action.dest] = raw.strip().lower() in ("1", "true", "yes", "on")
        elif isinstance(action, argparse._AppendAction):
            defaults[action.dest] = [v.strip() for v in raw.split(",") if v.strip()]
        else:
            try:
                defaults[action.dest] = action.type(raw) if action.type else raw
            except ValueError:
                raise ConfigError(f"bad value for {action.dest}: {raw!r}") from None
        # a value from file or env satisfies a required flag
        action.required = False
    sub.set_defaults(**defaults)


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    parser, subs = build_parser()
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, rest = pre.parse_known_args(argv)
    command = next((a for a in rest if a in subs), None)
    try:
        if command is not None:
            _apply_defaults(subs[command], command, known.config or os.environ.get(ENV_PREFIX + "CONFIG"))
    except ConfigError as exc:
        print(f"dnssecplus: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(
        level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
        format="%(asctime)s level=%(levelname)s logger=%(name)s %(message)s",
        stream=sys.stderr,
    )
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"dnssecplus: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
