import math
import os
import stat

import dns.message
import dns.name
import pytest

from dnssecplus import channel, crypto, delegation
from dnssecplus.channel import ChannelEndpoint, ChannelError, Op, ReplayError
from dnssecplus.clock import SimulatedClock
from dnssecplus.delegation import IssueRejected, RejectReason, ShortTermKeyStructure, Validity
from dnssecplus.keyserver import (
    AgreementPhase,
    Journal,
    KeyServer,
    KeyStore,
    NameserverRegistration,
    RotationInProgress,
    SidecarFileParentLink,
    SigningPhase,
    ZoneLongTermKeys,
)
from dnssecplus.resolver import ExchangeFailure, FailureReason, ZoneKeys
from dnssecplus.wire import Mode
from dnssecplus.zone import ChildKeys, parse_sidecar


def endpoints():
    ks = ChannelEndpoint(channel.KEYSERVER_ID, crypto.gen_agreement_keypair())
    ns = ChannelEndpoint(7, crypto.gen_agreement_keypair())
    ks.add_peer(7, ns.static.public)
    ns.add_peer(channel.KEYSERVER_ID, ks.static.public)
    return ks, ns


def test_channel_roundtrip_and_reply_binding():
    ks, ns = endpoints()
    req = ns.seal(channel.KEYSERVER_ID, Op.SIGN_REQUEST, b"body")
    msg = ks.open(req)
    assert (msg.op, msg.sender_id, msg.body) == (Op.SIGN_REQUEST, 7, b"body")
    reply = ks.seal(7, Op.SIGN_OK, b"signed", msg.nonce)
    got = ns.open(reply, expect_reply_to=ns.request_nonce(req))
    assert got.body == b"signed" and got.in_reply_to == msg.nonce
    other = ks.seal(7, Op.SIGN_OK, b"signed", bytes(24))
    with pytest.raises(ChannelError):
        ns.open(other, expect_reply_to=ns.request_nonce(req))


def test_channel_replay_rejected():
    ks, ns = endpoints()
    req = ns.seal(channel.KEYSERVER_ID, Op.SIGN_REQUEST, b"x")
    ks.open(req)
    with pytest.raises(ReplayError):
        ks.open(req)


def test_channel_tamper_and_unknown_sender():
    ks, ns = endpoints()
    req = bytearray(ns.seal(channel.KEYSERVER_ID, Op.SIGN_REQUEST, b"x"))
    req[-1] ^= 1
    with pytest.raises(ChannelError):
        ks.open(bytes(req))
    stranger = ChannelEndpoint(9, crypto.gen_agreement_keypair())
    stranger.add_peer(channel.KEYSERVER_ID, ks.static.public)
    with pytest.raises(ChannelError):
        ks.open(stranger.seal(channel.KEYSERVER_ID, Op.SIGN_REQUEST, b"x"))
    # an endpoint that claims a registered id without its static key
    impostor = ChannelEndpoint(7, crypto.gen_agreement_keypair())
    impostor.add_peer(channel.KEYSERVER_ID, ks.static.public)
    with pytest.raises(ChannelError):
        ks.open(impostor.seal(channel.KEYSERVER_ID, Op.SIGN_REQUEST, b"x"))
    for junk in (b"", b"\xd5\x2c" + bytes(60), b"\xd5\x2c\x02\x01" + bytes(60)):
        with pytest.raises(ChannelError):
            ks.open(junk)


def keyserver(tmp_path=None, clock=None, **kwargs):
    clock = clock or SimulatedClock()
    keys = ZoneLongTermKeys(dns.name.from_text("example.com."), 2, crypto.gen_signing_keypair(), crypto.gen_agreement_keypair())
    if tmp_path is not None:
        kwargs.setdefault("journal", Journal(tmp_path / "journal"))
        kwargs.setdefault("keystore", KeyStore(tmp_path / "keys"))
    return KeyServer(keys, crypto.gen_agreement_keypair(), clock, **kwargs)


def stk(clock, ns_id=1, level=2, lifetime=3600):
    now = int(clock.now())
    return ShortTermKeyStructure(now, now + lifetime, crypto.gen_signing_keypair().public, ns_id, level)


def test_signing_request_registered_and_unknown():
    ks = keyserver()
    ks.register(NameserverRegistration(1, crypto.gen_agreement_keypair().public, ("10.0.0.1", 53)))
    signed = ks.handle_signing_request(1, stk(ks.clock))
    assert delegation.validate(signed, ks.keys.signing.public, ks.clock.now()) is Validity.VALID
    with pytest.raises(IssueRejected) as info:
        ks.handle_signing_request(2, stk(ks.clock, ns_id=2))
    assert info.value.reason is RejectReason.UNKNOWN_NAMESERVER
    with pytest.raises(IssueRejected) as info:
        ks.handle_signing_request(1, stk(ks.clock, ns_id=3))
    assert info.value.reason is RejectReason.UNKNOWN_NAMESERVER
    with pytest.raises(IssueRejected) as info:
        ks.handle_signing_request(1, stk(ks.clock, level=1))
    assert info.value.reason is RejectReason.LEVEL_MISMATCH


def test_register_conflicting_id():
    ks = keyserver()
    ks.register(NameserverRegistration(1, crypto.gen_agreement_keypair().public, ("10.0.0.1", 53)))
    with pytest.raises(ValueError):
        ks.register(NameserverRegistration(1, crypto.gen_agreement_keypair().public, ("10.0.0.1", 53)))


def test_datagram_path_and_replayed_request():
    ks = keyserver()
    ns = ChannelEndpoint(1, crypto.gen_agreement_keypair())
    ns.add_peer(channel.KEYSERVER_ID, ks.channel_public)
    ks.register(NameserverRegistration(1, ns.static.public, ("10.0.0.1", 53)))
    req = ns.seal(channel.KEYSERVER_ID, Op.SIGN_REQUEST, stk(ks.clock).to_bytes())
    reply = ns.open(ks.handle_datagram(req), expect_reply_to=ns.request_nonce(req))
    assert reply.op is Op.SIGN_OK and len(reply.body) == delegation.SIGNED_SIZE
    assert ks.handle_datagram(req) is None
    assert ks.issued == 1
    bad = ns.seal(channel.KEYSERVER_ID, Op.SIGN_REQUEST, stk(ks.clock, lifetime=100_000).to_bytes())
    reply = ns.open(ks.handle_datagram(bad))
    assert reply.op is Op.REJECT and reply.body == b"lifetime-too-long"
    junk = ns.seal(channel.KEYSERVER_ID, Op.SIGN_REQUEST, b"short")
    assert ns.open(ks.handle_datagram(junk)).op is Op.REJECT
    forged = bytearray(ns.seal(channel.KEYSERVER_ID, Op.SIGN_REQUEST, stk(ks.clock).to_bytes()))
    forged[-3] ^= 0x40
    assert ks.handle_datagram(bytes(forged)) is None
    assert ks.issued == 1


def test_forged_channel_datagram_dropped_by_nameserver(net):
    z = net.zone("example.com.")
    ns = z.nameservers[0]
    push = bytearray(z.keyserver.endpoint.seal(ns.nameserver_id, Op.REMOVE_AGREEMENT, b"\x00\x00\x00\x01"))
    push[-1] ^= 1
    assert ns.handle_datagram(bytes(push)) is None
    assert set(ns.agreement_keys) == {1}


def test_private_signing_key_stays_on_key_server(net):
    for z in net.zones.values():
        zone_pub = z.keys.signing.public
        for ns in z.nameservers:
            inventory = ns.key_inventory()
            assert all(pub != zone_pub for _, pub in inventory)
            assert ("zone-agreement", z.keys.agreement.public) in inventory


def test_distribution_acks_and_idempotence(net):
    z = net.zone("example.com.")
    net.add_nameserver(z.name, ("10.0.2.3", 53))
    ks = z.keyserver
    assert len(ks.registrations) == 3
    assert all(ks.holdings[i] == {1} for i in ks.registrations)
    for reg in ks.registrations.values():
        assert ks.distribute_agreement_private(reg)
    assert all(ks.holdings[i] == {1} for i in ks.registrations)
    assert all(set(ns.agreement_keys) == {1} for ns in z.nameservers)


def test_unreachable_nameserver_blocks_push_phase(net):
    z = net.zone("example.com.")
    third = ("10.0.2.3", 53)
    net.add_nameserver(z.name, third)
    net.transport.down.add(third)
    state = z.keyserver.begin_agreement_rotation()
    assert state.phase is AgreementPhase.PUSH_NEW
    net.tick(60)
    assert state.phase is AgreementPhase.PUSH_NEW
    assert net.zone("com.").data.children[z.name].agreement_key == z.keys.agreement.public
    assert z.keys.agreement.public != state.new_key.public
    with pytest.raises(RotationInProgress):
        z.keyserver.begin_agreement_rotation()
    net.transport.down.discard(third)
    net.maintain()
    assert state.phase is AgreementPhase.WAIT_CACHES
    assert net.zone("com.").data.children[z.name].agreement_key == state.new_key.public


def _private_query(net, z, agreement_key):
    keys = ZoneKeys(z.name, z.level, z.keyserver.published_keys().signing_keys, agreement_key, tuple(z.addresses), math.inf)
    q = dns.message.make_query("www.example.com.", "A")
    q.flags = 0
    return net.resolver().query_zone(keys, z.addresses[0], q, Mode.PRIVATE)


def test_agreement_rotation_dual_key_window(compressed_net):
    net = compressed_net
    z = net.zone("example.com.")
    old = z.keys.agreement.public
    state = z.keyserver.begin_agreement_rotation()
    assert state.phase is AgreementPhase.WAIT_CACHES
    assert all(set(ns.agreement_keys) == {1, 2} for ns in z.nameservers)
    assert _private_query(net, z, old).message.answer
    assert _private_query(net, z, state.new_key.public).message.answer
    while not state.done:
        net.tick(1)
    assert state.phase is AgreementPhase.DONE
    assert all(set(ns.agreement_keys) == {2} for ns in z.nameservers)
    with pytest.raises(ExchangeFailure) as info:
        _private_query(net, z, old)
    assert info.value.reason is FailureReason.TIMEOUT
    assert _private_query(net, z, state.new_key.public).message.answer


def test_agreement_wait_uses_cache_ttl_plus_skew(compressed_net):
    z = compressed_net.zone("example.com.")
    t0 = compressed_net.clock.now()
    state = z.keyserver.begin_agreement_rotation()
    assert state.wait_until == t0 + 20 + 2


def test_signing_rotation_phases(compressed_net):
    net = compressed_net
    z = net.zone("example.com.")
    old, parent = z.keys.signing, net.zone("com.").data
    old_cred = z.nameservers[0].credential.signed
    state = z.keyserver.begin_signing_rotation()
    new = state.new_key
    assert state.phase is SigningPhase.WAIT_CACHES
    assert parent.children[z.name].signing_keys == (old.public, new.public)
    net.tick(23)
    assert state.phase is SigningPhase.WAIT_EXPIRY
    for ns in z.nameservers:
        ns.refresh_credential()
    fresh = z.nameservers[0].credential.signed
    both = parent.children[z.name].signing_keys
    assert delegation.validate_any(old_cred, both, net.clock.now(), 2) is Validity.VALID
    assert delegation.validate_any(fresh, both, net.clock.now(), 2) is Validity.VALID
    assert delegation.validate(fresh, old.public, net.clock.now()) is Validity.BAD_SIGNATURE
    while not state.done:
        net.tick(1)
    assert parent.children[z.name].signing_keys == (new.public,)
    assert delegation.validate_any(old_cred, (new.public,), net.clock.now(), 2) is Validity.BAD_SIGNATURE
    assert net.resolver().resolve("www.example.com.").ok


def test_skip_waits_set_only_skips_named_phases(compressed_net):
    z = compressed_net.zone("example.com.")
    state = z.keyserver.begin_signing_rotation()
    z.keyserver.advance(skip_waits={SigningPhase.WAIT_CACHES})
    assert state.phase is SigningPhase.WAIT_EXPIRY
    z.keyserver.advance(skip_waits=True)
    assert state.done


def test_keystore_permissions(tmp_path):
    store = KeyStore(tmp_path / "keys")
    store.put("agreement-2", b"\x01" * 32)
    mode = stat.S_IMODE(os.stat(tmp_path / "keys" / "agreement-2.key").st_mode)
    assert mode == 0o600
    assert store.get("agreement-2") == b"\x01" * 32


def test_journal_torn_record(tmp_path):
    j = Journal(tmp_path / "j")
    j.append("a", x=1)
    j.append("b", x=2)
    with open(tmp_path / "j", "ab") as fh:
        fh.write(b"\x00\x00\x01\x00{\"tag\"")
    assert [r["tag"] for r in j.records()] == ["a", "b"]


def test_journal_restore_resumes_rotations(tmp_path):
    clock = SimulatedClock()
    ks = keyserver(tmp_path, clock, key_cache_ttl=100, max_lifetime=600)
    reg = NameserverRegistration(1, crypto.gen_agreement_keypair().public, ("10.0.0.1", 53))
    ks.register(reg)
    sig_state = ks.begin_signing_rotation()
    clock.advance(100 + delegation.DEFAULT_SKEW)
    ks.advance()
    assert sig_state.phase is SigningPhase.WAIT_EXPIRY
    agr_state = ks.begin_agreement_rotation()
    # no transport, so the push cannot complete
    assert agr_state.phase is AgreementPhase.PUSH_NEW

    restarted = KeyServer(ks.keys, crypto.gen_agreement_keypair(), clock,
                          journal=Journal(tmp_path / "journal"), keystore=KeyStore(tmp_path / "keys"),
                          key_cache_ttl=100, max_lifetime=600)
    restarted.keys = ZoneLongTermKeys(ks.zone_name, 2, sig_state.old_key, agr_state.old_key)
    restarted.restore()
    assert set(restarted.registrations) == {1}
    assert restarted.signing_rotation.phase is SigningPhase.WAIT_EXPIRY
    assert restarted.signing_rotation.wait_until == sig_state.wait_until
    assert restarted.keys.signing.public == sig_state.new_key.public
    assert restarted.agreement_rotation.phase is AgreementPhase.PUSH_NEW
    assert restarted.agreement_rotation.new_key.public == agr_state.new_key.public
    clock.advance(1000)
    restarted.advance()
    assert restarted.signing_rotation.done
    assert restarted.published_keys().signing_keys == (sig_state.new_key.public,)


def test_sidecar_parent_link(tmp_path):
    path = tmp_path / "children.sidecar"
    link = SidecarFileParentLink(path)
    keys = ChildKeys((crypto.gen_signing_keypair().public,), crypto.gen_agreement_keypair().public)
    link.publish(dns.name.from_text("a.example."), keys)
    link.publish(dns.name.from_text("b.example."), keys)
    parsed = parse_sidecar(path.read_text())
    assert set(parsed) == {dns.name.from_text("a.example."), dns.name.from_text("b.example.")}
