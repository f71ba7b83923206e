"""The zone key server.

Holds the zone's long-term signing key, signs nameserver credentials over the
authenticated channel, distributes the zone agreement key to nameservers and
drives both long-term key rollovers. Rollover waits are derived from the
resolver key-cache TTL and the credential lifetime, never from wall-clock
constants, so the whole procedure can run on a simulated clock.
"""

from __future__ import annotations

import enum
import json
import logging
import os
import struct
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Collection, Protocol

import dns.name

from . import channel, crypto, delegation
from .channel import ChannelEndpoint, ChannelError, Op
from .delegation import IssuePolicy, IssueRejected, RejectReason, ShortTermKeyStructure
from .transport import Address, format_address, parse_address
from .zone import ChildKeys, ZoneData, format_sidecar, parse_sidecar

log = logging.getLogger(__name__)


@dataclass
class ZoneLongTermKeys:
    zone_name: dns.name.Name
    zone_level: int
    signing: crypto.SigningKeypair
    agreement: crypto.AgreementKeypair

    def public(self) -> ChildKeys:
        return ChildKeys((self.signing.public,), self.agreement.public)


@dataclass(frozen=True)
class NameserverRegistration:
    nameserver_id: int
    channel_static_pub: bytes
    address: Address


class ParentLink(Protocol):
    """How a zone's long-term public keys reach its parent zone."""

    def publish(self, zone_name: dns.name.Name, keys: ChildKeys) -> None: ...


class ZoneDataParentLink:
    """Publishes straight into the parent's in-memory zone data."""

    def __init__(self, parent: ZoneData):
        self.parent = parent

    def publish(self, zone_name, keys):
        self.parent.publish_child_keys(zone_name, keys)


class SidecarFileParentLink:
    """Rewrites this zone's line in a sidecar file that the parent operator loads."""

    def __init__(self, path: str | os.PathLike):
        self.path = Path(path)

    def publish(self, zone_name, keys):
        children = parse_sidecar(self.path.read_text()) if self.path.exists() else {}
        children[zone_name] = keys
        tmp = self.path.with_suffix(self.path.suffix + ".tmp")
        tmp.write_text(format_sidecar(children))
        tmp.replace(self.path)


# -- journal ------------------------------------------------------------

class Journal:
    """Append-only file of length-prefixed JSON event records."""

    def __init__(self, path: str | os.PathLike):
        self.path = Path(path)
        self._lock = threading.Lock()

    def append(self, tag: str, **fields) -> None:
        record = json.dumps({"tag": tag, **fields}, sort_keys=True).encode()
        with self._lock, open(self.path, "ab") as fh:
            fh.write(struct.pack(">I", len(record)) + record)
            fh.flush()
            os.fsync(fh.fileno())

    def records(self) -> list[dict]:
        if not self.path.exists():
            return []
        data = self.path.read_bytes()
        out, pos = [], 0
        while pos + 4 <= len(data):
            (n,) = struct.unpack_from(">I", data, pos)
            chunk = data[pos + 4:pos + 4 + n]
            if len(chunk) < n:
                log.warning("journal %s: ignoring torn final record", self.path)
                break
            out.append(json.loads(chunk))
            pos += 4 + n
        return out


class KeyStore:
    """Directory of hex-encoded private keys, readable only by the owner."""

    def __init__(self, path: str | os.PathLike):
        self.path = Path(path)
        self.path.mkdir(parents=True, exist_ok=True, mode=0o700)

    def put(self, name: str, secret: bytes) -> None:
        target = self.path / f"{name}.key"
        fd = os.open(target, os.O_WRONLY | os.O_CREAT | os.O_TRUNC, 0o600)
        with os.fdopen(fd, "w") as fh:
            fh.write(secret.hex() + "\n")

    def get(self, name: str) -> bytes:
        return bytes.fromhex((self.path / f"{name}.key").read_text().strip())


# -- rollovers ------------------------------------------------------------

class AgreementPhase(enum.Enum):
    PUSH_NEW = 1
    PUBLISH = 2
    WAIT_CACHES = 3
    REMOVE_OLD = 4
    DONE = 5


class SigningPhase(enum.Enum):
    PUBLISH_BOTH = 1
    WAIT_CACHES = 2
    SWITCH = 3
    WAIT_EXPIRY = 4
    REMOVE_OLD = 5
    DONE = 6


@dataclass
class RotationState:
    kind: str
    phase: enum.Enum
    old_key: object
    new_key: object
    wait_until: float | None = None
    old_generation: int | None = None
    new_generation: int | None = None

    @property
    def done(self) -> bool:
        return self.phase.name == "DONE"


class RotationInProgress(RuntimeError):
    pass


@dataclass
class _Push:
    generation: int
    private: bytes = field(repr=False)
    remove: bool = False


class KeyServer:
    def __init__(
        self,
        keys: ZoneLongTermKeys,
        channel_static: crypto.AgreementKeypair,
        clock,
        transport=None,
        *,
        parent: ParentLink | None = None,
        journal: Journal | None = None,
        keystore: KeyStore | None = None,
        max_lifetime: int = delegation.DEFAULT_MAX_LIFETIME,
        skew: int = delegation.DEFAULT_SKEW,
        key_cache_ttl: float = 86400,
    ):
        self.keys = keys
        self.clock = clock
        self.transport = transport
        self.parent = parent
        self.journal = journal
        self.keystore = keystore
        self.policy = IssuePolicy(keys.zone_level, max_lifetime, skew)
        self.key_cache_ttl = key_cache_ttl
        self.endpoint = ChannelEndpoint(channel.KEYSERVER_ID, channel_static)
        self.registrations: dict[int, NameserverRegistration] = {}
        self.agreement_generation = 1
        self.agreement_keys: dict[int, crypto.AgreementKeypair] = {1: keys.agreement}
        # generations each nameserver has confirmed holding
        self.holdings: dict[int, set[int]] = {}
        self.agreement_rotation: RotationState | None = None
        self.signing_rotation: RotationState | None = None
        self._published: ChildKeys = keys.public()
        self._lock = threading.RLock()
        self.issued = 0

    @property
    def zone_name(self) -> dns.name.Name:
        return self.keys.zone_name

    @property
    def zone_level(self) -> int:
        return self.keys.zone_level

    @property
    def channel_public(self) -> bytes:
        return self.endpoint.static.public

    def published_keys(self) -> ChildKeys:
        return self._published

    def _journal(self, tag: str, **fields) -> None:
        if self.journal is not None:
            self.journal.append(tag, time=self.clock.now(), **fields)

    def _publish(self, keys: ChildKeys) -> None:
        self._published = keys
        if self.parent is not None:
            self.parent.publish(self.zone_name, keys)

    # -- registrations ----------------------------------------------------
    def register(self, reg: NameserverRegistration) -> None:
        with self._lock:
            existing = self.registrations.get(reg.nameserver_id)
            if existing is not None and existing.channel_static_pub != reg.channel_static_pub:
                raise ValueError(f"nameserver id {reg.nameserver_id} already registered")
            self.registrations[reg.nameserver_id] = reg
            self.holdings.setdefault(reg.nameserver_id, set())
            self.endpoint.add_peer(reg.nameserver_id, reg.channel_static_pub)
        self._journal(
            "registration",
            nameserver_id=reg.nameserver_id,
            channel_static_pub=reg.channel_static_pub.hex(),
            address=format_address(reg.address),
        )

    # -- signing ------------------------------------------------------------
    def handle_signing_request(self, nameserver_id: int, structure: ShortTermKeyStructure) -> delegation.SignedShortTermKeyStructure:
        if nameserver_id not in self.registrations:
            raise IssueRejected(RejectReason.UNKNOWN_NAMESERVER, str(nameserver_id))
        if structure.nameserver_id != nameserver_id:
            raise IssueRejected(RejectReason.UNKNOWN_NAMESERVER, "structure names another nameserver")
        with self._lock:
            signer = self.keys.signing
        signed = delegation.issue(structure, signer.private, self.clock.now(), self.policy)
        self.issued += 1
        log.info(
            "issued credential zone=%s ns=%d inception=%d expiration=%d",
            self.zone_name, nameserver_id, structure.inception, structure.expiration,
        )
        self._journal(
            "issuance",
            nameserver_id=nameserver_id,
            inception=structure.inception,
            expiration=structure.expiration,
            signer=signer.public.hex(),
        )
        return signed

    def handle_datagram(self, datagram: bytes, src=None) -> bytes | None:
        """Channel entry point. Unauthenticated or replayed requests get no reply."""
        try:
            msg = self.endpoint.open(datagram)
        except ChannelError as exc:
            log.warning("dropping channel datagram from %s: %s", src, exc)
            return None
        if msg.op != Op.SIGN_REQUEST:
            return None
        try:
            structure = ShortTermKeyStructure.from_bytes(msg.body)
            signed = self.handle_signing_request(msg.sender_id, structure)
        except IssueRejected as exc:
            return self.endpoint.seal(msg.sender_id, Op.REJECT, exc.reason.value.encode(), msg.nonce)
        except ValueError as exc:
            return self.endpoint.seal(msg.sender_id, Op.REJECT, str(exc).encode()[:64], msg.nonce)
        return self.endpoint.seal(msg.sender_id, Op.SIGN_OK, signed.to_bytes(), msg.nonce)

    # -- agreement key distribution ---------------------------------------------
    def _push(self, reg: NameserverRegistration, push: _Push) -> bool:
        if self.transport is None:
            return False
        if push.remove:
            op, body = Op.REMOVE_AGREEMENT, struct.pack(">I", push.generation)
        else:
            op, body = Op.INSTALL_AGREEMENT, struct.pack(">I", push.generation) + push.private
        try:
            reply = channel.call(self.endpoint, self.transport, reg.address, reg.nameserver_id, op, body)
        except ChannelError as exc:
            log.warning("bad ack from nameserver %d: %s", reg.nameserver_id, exc)
            return False
        if reply is None or reply.op != Op.ACK:
            log.warning("nameserver %d unreachable for %s", reg.nameserver_id, op.name)
            return False
        held = self.holdings.setdefault(reg.nameserver_id, set())
        if push.remove:
            held.discard(push.generation)
        else:
            held.add(push.generation)
        return True

    def distribute_agreement_private(self, reg: NameserverRegistration, generation: int | None = None) -> bool:
        """Install an agreement-key generation on one nameserver. Idempotent."""
        generation = self.agreement_generation if generation is None else generation
        key = self.agreement_keys[generation]
        ok = self._push(reg, _Push(generation, key.private))
        if ok:
            self._journal("distribution", nameserver_id=reg.nameserver_id, generation=generation)
        return ok

    def provision_all(self) -> bool:
        return all(self.distribute_agreement_private(reg) for reg in self.registrations.values())

    def _all_hold(self, generation: int, present: bool = True) -> bool:
        return all((generation in self.holdings.get(i, ())) == present for i in self.registrations)

    # -- rollovers ------------------------------------------------------------
    def begin_agreement_rotation(self, new: crypto.AgreementKeypair | None = None) -> RotationState:
        with self._lock:
            if self.agreement_rotation is not None and not self.agreement_rotation.done:
                raise RotationInProgress("agreement key rotation already in flight")
            new = new or crypto.gen_agreement_keypair()
            old_gen = self.agreement_generation
            new_gen = max(self.agreement_keys) + 1
            self.agreement_keys[new_gen] = new
            if self.keystore is not None:
                self.keystore.put(f"agreement-{new_gen}", new.private)
            self.agreement_rotation = RotationState(
                "agreement", AgreementPhase.PUSH_NEW, self.keys.agreement, new,
                old_generation=old_gen, new_generation=new_gen,
            )
            self._journal_phase(self.agreement_rotation)
        self.advance()
        return self.agreement_rotation

    def begin_signing_rotation(self, new: crypto.SigningKeypair | None = None) -> RotationState:
        with self._lock:
            if self.signing_rotation is not None and not self.signing_rotation.done:
                raise RotationInProgress("signing key rotation already in flight")
            new = new or crypto.gen_signing_keypair()
            if self.keystore is not None:
                self.keystore.put(f"signing-{new.public.hex()[:16]}", new.private_bytes())
            self.signing_rotation = RotationState("signing", SigningPhase.PUBLISH_BOTH, self.keys.signing, new)
            self._journal_phase(self.signing_rotation)
        self.advance()
        return self.signing_rotation

    def _journal_phase(self, state: RotationState) -> None:
        self._journal(
            "rotation-phase",
            kind=state.kind,
            phase=state.phase.name,
            old=_public_hex(state.old_key),
            new=_public_hex(state.new_key),
            wait_until=state.wait_until,
            old_generation=state.old_generation,
            new_generation=state.new_generation,
        )

    def cache_wait(self) -> float:
        return self.key_cache_ttl + self.policy.skew

    def expiry_wait(self) -> float:
        return self.policy.max_lifetime + self.policy.skew

    def advance(self, skip_waits: bool | Collection[enum.Enum] = False) -> None:
        """Move any in-flight rotation as far as current time and reachability allow.

        ``skip_waits`` (True, or a set of wait phases) ignores those timers; it
        exists only to show what breaks when an operator cuts a rollover short.
        """
        with self._lock:
            for state, step in ((self.agreement_rotation, self._step_agreement), (self.signing_rotation, self._step_signing)):
                if state is None:
                    continue
                while not state.done:
                    before = state.phase
                    step(state, skip_waits)
                    if state.phase is before:
                        break
                    self._journal_phase(state)

    def _waited(self, state: RotationState, skip) -> bool:
        if skip is True or (skip and state.phase in skip):
            log.warning("%s rotation: skipping %s", state.kind, state.phase.name)
            return True
        return self.clock.now() >= state.wait_until

    def _step_agreement(self, st: RotationState, skip: bool) -> None:
        now = self.clock.now()
        if st.phase is AgreementPhase.PUSH_NEW:
            push = _Push(st.new_generation, st.new_key.private)
            for reg in self.registrations.values():
                if st.new_generation not in self.holdings.get(reg.nameserver_id, ()):
                    self._push(reg, push)
            if self._all_hold(st.new_generation):
                st.phase = AgreementPhase.PUBLISH
        elif st.phase is AgreementPhase.PUBLISH:
            self._publish(ChildKeys(self._published.signing_keys, st.new_key.public))
            self.keys.agreement = st.new_key
            self.agreement_generation = st.new_generation
            st.wait_until = now + self.cache_wait()
            st.phase = AgreementPhase.WAIT_CACHES
        elif st.phase is AgreementPhase.WAIT_CACHES:
            if self._waited(st, skip):
                st.phase = AgreementPhase.REMOVE_OLD
        elif st.phase is AgreementPhase.REMOVE_OLD:
            push = _Push(st.old_generation, b"", remove=True)
            for reg in self.registrations.values():
                if st.old_generation in self.holdings.get(reg.nameserver_id, ()):
                    self._push(reg, push)
            if self._all_hold(st.old_generation, present=False):
                self.agreement_keys.pop(st.old_generation, None)
                st.phase = AgreementPhase.DONE

    def _step_signing(self, st: RotationState, skip: bool) -> None:
        now = self.clock.now()
        old, new = st.old_key, st.new_key
        if st.phase is SigningPhase.PUBLISH_BOTH:
            self._publish(ChildKeys((old.public, new.public), self._published.agreement_key))
            st.wait_until = now + self.cache_wait()
            st.phase = SigningPhase.WAIT_CACHES
        elif st.phase is SigningPhase.WAIT_CACHES:
            if self._waited(st, skip):
                st.phase = SigningPhase.SWITCH
        elif st.phase is SigningPhase.SWITCH:
            self.keys.signing = new
            st.wait_until = now + self.expiry_wait()
            st.phase = SigningPhase.WAIT_EXPIRY
        elif st.phase is SigningPhase.WAIT_EXPIRY:
            if self._waited(st, skip):
                st.phase = SigningPhase.REMOVE_OLD
        elif st.phase is SigningPhase.REMOVE_OLD:
            self._publish(ChildKeys((new.public,), self._published.agreement_key))
            st.phase = SigningPhase.DONE

    # -- restart ----------------------------------------------------------------
    def restore(self) -> None:
        """Replay the journal: registrations and any in-flight rollover resume."""
        if self.journal is None:
            return
        journal, self.journal = self.journal, None
        try:
            last_phase: dict[str, dict] = {}
            for rec in journal.records():
                if rec["tag"] == "registration":
                    self.register(NameserverRegistration(
                        rec["nameserver_id"],
                        bytes.fromhex(rec["channel_static_pub"]),
                        parse_address(rec["address"]),
                    ))
                elif rec["tag"] == "distribution":
                    self.holdings.setdefault(rec["nameserver_id"], set()).add(rec["generation"])
                elif rec["tag"] == "rotation-phase":
                    last_phase[rec["kind"]] = rec
            for kind, rec in last_phase.items():
                self._resume(kind, rec)
        finally:
            self.journal = journal

    def _resume(self, kind: str, rec: dict) -> None:
        if kind == "agreement":
            phase = AgreementPhase[rec["phase"]]
            if phase is AgreementPhase.DONE:
                return
            if self.keystore is None:
                raise RuntimeError("cannot resume agreement rotation without a key store")
            new_gen = rec["new_generation"]
            new = crypto.AgreementKeypair.from_private_bytes(self.keystore.get(f"agreement-{new_gen}"))
            self.agreement_keys[new_gen] = new
            old_gen = rec["old_generation"]
            if phase.value > AgreementPhase.PUBLISH.value:
                self.keys.agreement, self.agreement_generation = new, new_gen
            self.agreement_rotation = RotationState(
                "agreement", phase, self.agreement_keys.get(old_gen), new,
                rec["wait_until"], old_gen, new_gen,
            )
        else:
            phase = SigningPhase[rec["phase"]]
            if phase is SigningPhase.DONE:
                return
            if self.keystore is None:
                raise RuntimeError("cannot resume signing rotation without a key store")
            new = crypto.SigningKeypair.from_private_bytes(self.keystore.get(f"signing-{rec['new'][:16]}"))
            old = self.keys.signing
            if phase.value > SigningPhase.SWITCH.value:
                self.keys.signing = new
            self.signing_rotation = RotationState("signing", phase, old, new, rec["wait_until"])
            self._published = ChildKeys((old.public, new.public), self._published.agreement_key)


def _public_hex(key) -> str:
    return key.public.hex() if key is not None else ""
