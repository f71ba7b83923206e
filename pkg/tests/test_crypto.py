"""Primitive checks against published vectors, frozen values and properties."""

import hashlib
import hmac

import pytest
from cryptography.hazmat.primitives.asymmetric import ec
from hypothesis import given, settings
from hypothesis import strategies as st

from dnssecplus import crypto

RFC7748_ALICE_PRIV = bytes.fromhex("77076d0a7318a57d3c16c17251b26645df4c2f87ebc0992ab177fba51db92c2a")
RFC7748_ALICE_PUB = bytes.fromhex("8520f0098930a754748b7ddcb43ef75a0dbf3a0d26381af4eba4a98eaa9b4e6a")
RFC7748_BOB_PUB = bytes.fromhex("de9edb7d7b7dc1b4d35b61c2ece435373f8343c85b78674dadfc7e146f882b4f")
RFC7748_SHARED = bytes.fromhex("4a5d9d5ba4ce2de1728e3bf480350f25e07e21c947d19e3376f09b3c1e161742")

XCHACHA_KEY = bytes(range(0x80, 0xA0))
XCHACHA_NONCE = bytes(range(0x40, 0x58))
XCHACHA_AD = bytes.fromhex("50515253c0c1c2c3c4c5c6c7")
XCHACHA_PT = (
    b"Ladies and Gentlemen of the class of '99: If I could offer you only one tip for the future, "
    b"sunscreen would be it."
)
XCHACHA_CT = bytes.fromhex(
    "bd6d179d3e83d43b9576579493c0e939572a1700252bfaccbed2902c21396cbb731c7f1b0b4aa6440bf3a82f4eda7e39"
    "ae64c6708c54c216cb96b72e1213b4522f8c9ba40db5d945b11b69b982c1bb9e3f3fac2bc369488f76b2383565d3fff9"
    "21f9664c97637da9768812f615c68b13b52ec0875924c1c7987947deafd8780acf49"
)

# small-order points on Curve25519
LOW_ORDER_POINTS = [
    bytes(32),
    (1).to_bytes(32, "little"),
    bytes.fromhex("e0eb7a7c3b41b8ae1656e3faf19fc46ada098deb9c32b1fd866205165f49b800"),
    bytes.fromhex("5f9c95bca3508c24b1d0b1559c83ef5b04445cc4581c8e86d8224eddd09f1157"),
    bytes.fromhex("ecffffffffffffffffffffffffffffffffffffffffffffffffffffffffffff7f"),
]

PAIRS = [crypto.gen_signing_keypair() for _ in range(2)]
AGREEMENT_PAIRS = [crypto.gen_agreement_keypair() for _ in range(3)]


def reference_hkdf(ikm: bytes, salt: bytes, info: bytes, length: int) -> bytes:
    prk = hmac.new(salt, ikm, hashlib.sha256).digest()
    out, block = b"", b""
    for i in range(1, -(-length // 32) + 1):
        block = hmac.new(prk, block + info + bytes([i]), hashlib.sha256).digest()
        out += block
    return out[:length]


def test_reference_hkdf_matches_rfc5869_case_1():
    okm = reference_hkdf(bytes([0x0B] * 22), bytes(range(13)), bytes(range(0xF0, 0xFA)), 42)
    assert okm.hex() == (
        "3cb25f25faacd57a90434f64d0362f2a2d2d0a90cf1a5a4c5db02d56ecc4c5bf34007208d5b887185865"
    )


def test_x25519_rfc7748_vector():
    alice = crypto.AgreementKeypair.from_private_bytes(RFC7748_ALICE_PRIV)
    assert alice.public == RFC7748_ALICE_PUB
    assert crypto.dh(alice, RFC7748_BOB_PUB) == RFC7748_SHARED


def test_xchacha20poly1305_vector():
    ct = crypto.aead_encrypt(XCHACHA_KEY, XCHACHA_PT, XCHACHA_NONCE, XCHACHA_AD)
    assert ct == XCHACHA_CT
    assert crypto.aead_decrypt(XCHACHA_KEY, ct, XCHACHA_NONCE, XCHACHA_AD) == XCHACHA_PT


def test_derive_session_frozen_values():
    key, nonce = crypto.derive_session(bytes(range(32)), bytes(24), crypto.QUERY_LABEL)
    assert key.hex() == "1142eaeff1541785da791e85b59787fc0fa7cfb5394436621e0212efed97d58d"
    assert nonce.hex() == "8fbda6e01a3021b74f6d289e3e29efd7979846c9cefd60b6"
    key, nonce = crypto.derive_session(bytes(range(32)), bytes(16), crypto.RESPONSE_LABEL, context=b"ctx")
    assert key.hex() == "9a3e4efd9e18e3e6d3968c19bf0eb354f204e7c584182b7e002afcb7833f4d52"
    assert nonce.hex() == "ec8e33a7333f2e028f6099d9e8a8064259a1a6218b94560f"


def test_derive_session_matches_reference_hkdf():
    master, salt = bytes(range(32)), bytes(range(16))
    info = crypto.RESPONSE_LABEL + b"|" + hashlib.sha256(b"transcript").digest()
    okm = reference_hkdf(master, salt, info, 56)
    assert crypto.derive_session(master, salt, crypto.RESPONSE_LABEL, b"transcript") == (okm[:32], okm[32:])


def test_derive_key_rejects_unknown_label():
    with pytest.raises(ValueError):
        crypto.derive_key(bytes(32), bytes(24), b"other/label")


def test_derive_key_separation():
    master = bytes(range(32))
    k = crypto.derive_key(master, bytes(24), crypto.QUERY_LABEL)
    assert k == crypto.derive_key(master, bytes(24), crypto.QUERY_LABEL)
    assert k != crypto.derive_key(master, bytes(23) + b"\x01", crypto.QUERY_LABEL)
    assert k != crypto.derive_key(master, bytes(24), crypto.RESPONSE_LABEL)
    assert k != crypto.derive_key(master, bytes(24), crypto.QUERY_LABEL, context=b"x")


def test_signing_keypair_shape():
    a, b = crypto.gen_signing_keypair(), crypto.gen_signing_keypair()
    assert len(a.public) == 33 and a.public[0] in (2, 3)
    assert a.public != b.public
    assert crypto.verify(b"abc", crypto.sign(b"abc", a), a.public)


def test_public_key_derivable_and_compressed_encoding_matches_reference():
    kp = crypto.gen_signing_keypair()
    again = crypto.SigningKeypair.from_private_bytes(kp.private_bytes())
    assert again.public == kp.public
    nums = kp.private.public_key().public_numbers()
    expected = bytes([2 + (nums.y & 1)]) + nums.x.to_bytes(32, "big")
    assert kp.public == expected
    point = ec.EllipticCurvePublicKey.from_encoded_point(ec.SECP256R1(), kp.public)
    assert point.public_numbers() == nums


def test_sign_empty_message():
    kp = PAIRS[0]
    sig = crypto.sign(b"", kp)
    assert len(sig) == 64
    assert crypto.verify(b"", sig, kp.public)
    assert not crypto.verify(b"\x00", sig, kp.public)


def test_verify_fails_closed():
    kp, other = PAIRS
    sig = crypto.sign(b"m", kp)
    assert not crypto.verify(b"m\x00", sig, kp.public)
    assert not crypto.verify(b"m", sig, other.public)
    assert not crypto.verify(b"m", bytes(64), kp.public)
    assert not crypto.verify(b"m", sig[:63], kp.public)
    assert not crypto.verify(b"m", sig, bytes(33))
    assert not crypto.verify(b"m", sig, kp.public[:32])
    assert not crypto.verify(b"m", b"\xff" * 64, kp.public)


def test_signing_key_from_bad_bytes():
    with pytest.raises(crypto.CryptoError):
        crypto.SigningKeypair.from_private_bytes(bytes(31))
    with pytest.raises(crypto.CryptoError):
        crypto.SigningKeypair.from_private_bytes(bytes(32))


def test_agreement_keypair_shape():
    a, b = crypto.gen_agreement_keypair(), crypto.gen_agreement_keypair()
    assert len(a.public) == 32 and a.public != b.public
    assert crypto.dh(a, b.public) == crypto.dh(b, a.public)
    assert crypto.dh(a.private, b.public) == crypto.dh(a, b.public)


@pytest.mark.parametrize("point", LOW_ORDER_POINTS)
def test_dh_rejects_low_order_points(point):
    with pytest.raises(crypto.CryptoError):
        crypto.dh(AGREEMENT_PAIRS[0], point)


def test_dh_rejects_bad_lengths():
    with pytest.raises(crypto.CryptoError):
        crypto.dh(AGREEMENT_PAIRS[0], bytes(31))
    with pytest.raises(crypto.CryptoError):
        crypto.dh(bytes(31), AGREEMENT_PAIRS[1].public)


def test_dh_distinct_peers_distinct_secrets():
    a, b, c = AGREEMENT_PAIRS
    assert crypto.dh(a, b.public) != crypto.dh(a, c.public)


def test_aead_basics():
    key, n1, n2 = bytes(32), bytes(24), b"\x01" * 24
    ct = crypto.aead_encrypt(key, b"hello", n1)
    assert len(ct) - len(b"hello") == 16
    assert crypto.aead_decrypt(key, ct, n1) == b"hello"
    assert ct != crypto.aead_encrypt(key, b"hello", n2)
    with pytest.raises(crypto.AuthError):
        crypto.aead_decrypt(key, ct, n2)
    with pytest.raises(crypto.AuthError):
        crypto.aead_decrypt(b"\x01" * 32, ct, n1)
    with pytest.raises(crypto.AuthError):
        crypto.aead_decrypt(key, ct, n1, b"ad")
    with pytest.raises(crypto.AuthError):
        crypto.aead_decrypt(key, ct[:15], n1)
    with pytest.raises(crypto.CryptoError):
        crypto.aead_encrypt(bytes(31), b"x", n1)


@settings(max_examples=1000, deadline=None)
@given(st.binary(max_size=512))
def test_property_sign_verify(message):
    kp, other = PAIRS
    sig = crypto.sign(message, kp)
    assert crypto.verify(message, sig, kp.public)
    assert not crypto.verify(message, sig, other.public)
    assert not crypto.verify(message + b"\x00", sig, kp.public)


@settings(max_examples=1000, deadline=None)
@given(st.binary(min_size=32, max_size=32), st.binary(min_size=24, max_size=24),
       st.binary(max_size=300), st.binary(max_size=40), st.data())
def test_property_aead_roundtrip_and_tamper(key, nonce, plaintext, ad, data):
    ct = crypto.aead_encrypt(key, plaintext, nonce, ad)
    assert len(ct) == len(plaintext) + crypto.TAG_SIZE
    assert crypto.aead_decrypt(key, ct, nonce, ad) == plaintext
    i = data.draw(st.integers(0, len(ct) - 1))
    bit = data.draw(st.integers(0, 7))
    tampered = bytearray(ct)
    tampered[i] ^= 1 << bit
    with pytest.raises(crypto.AuthError):
        crypto.aead_decrypt(key, bytes(tampered), nonce, ad)


@settings(max_examples=1000, deadline=None)
@given(st.binary(min_size=32, max_size=32), st.binary(min_size=32, max_size=32))
def test_property_dh_symmetry(a_priv, b_priv):
    a = crypto.AgreementKeypair.from_private_bytes(a_priv)
    b = crypto.AgreementKeypair.from_private_bytes(b_priv)
    assert crypto.dh(a, b.public) == crypto.dh(b, a.public)


@settings(max_examples=1000, deadline=None)
@given(st.binary(min_size=32, max_size=32), st.binary(min_size=16, max_size=24), st.binary(max_size=64))
def test_property_derive_session_matches_reference(master, salt, context):
    info = crypto.QUERY_LABEL + (b"|" + hashlib.sha256(context).digest() if context else b"")
    okm = reference_hkdf(master, salt, info, 56)
    assert crypto.derive_session(master, salt, crypto.QUERY_LABEL, context) == (okm[:32], okm[32:])
