"""Short-term nameserver credentials.

A credential binds a nameserver's own signing key to a lifetime, its ID and
its zone level, and is signed by the zone's long-term signing key. There is
no revocation list: a credential simply stops validating once it expires.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass

from . import crypto

STRUCTURE_SIZE = 49
SIGNED_SIZE = STRUCTURE_SIZE + crypto.SIGNATURE_SIZE

DEFAULT_LIFETIME = 6 * 3600
DEFAULT_MAX_LIFETIME = 86400
DEFAULT_SKEW = 120

_U32_MAX = 0xFFFFFFFF
_LAYOUT = struct.Struct(">II33sII")


class RejectReason(enum.Enum):
    EXPIRED = "expired"
    NOT_YET_VALID = "not-yet-valid"
    LIFETIME_TOO_LONG = "lifetime-too-long"
    LEVEL_MISMATCH = "level-mismatch"
    UNKNOWN_NAMESERVER = "unknown-nameserver"


class IssueRejected(Exception):
    def __init__(self, reason: RejectReason, detail: str = ""):
        super().__init__(f"{reason.value}: {detail}" if detail else reason.value)
        self.reason = reason


class Validity(enum.Enum):
    VALID = "valid"
    BAD_SIGNATURE = "bad-signature"
    EXPIRED = "expired"
    NOT_YET_VALID = "not-yet-valid"

    def __bool__(self) -> bool:
        return self is Validity.VALID


@dataclass(frozen=True)
class ShortTermKeyStructure:
    inception: int
    expiration: int
    stk_public_key: bytes
    nameserver_id: int
    zone_level: int

    def __post_init__(self):
        for name in ("inception", "expiration", "nameserver_id", "zone_level"):
            value = getattr(self, name)
            if not 0 <= value <= _U32_MAX:
                raise ValueError(f"{name} out of unsigned 32-bit range: {value}")
        if self.inception >= self.expiration:
            raise ValueError("inception must precede expiration")
        if len(self.stk_public_key) != crypto.VERIFY_KEY_SIZE:
            raise ValueError("short-term public key must be 33 bytes")

    @property
    def lifetime(self) -> int:
        return self.expiration - self.inception

    def to_bytes(self) -> bytes:
        return _LAYOUT.pack(
            self.inception,
            self.expiration,
            bytes(self.stk_public_key),
            self.nameserver_id,
            self.zone_level,
        )

    @classmethod
    def from_bytes(cls, data: bytes) -> "ShortTermKeyStructure":
        if len(data) != STRUCTURE_SIZE:
            raise ValueError(f"expected {STRUCTURE_SIZE} bytes, got {len(data)}")
        return cls(*_LAYOUT.unpack(data))


@dataclass(frozen=True)
class SignedShortTermKeyStructure:
    structure: ShortTermKeyStructure
    signature: bytes

    def to_bytes(self) -> bytes:
        return self.structure.to_bytes() + self.signature

    @classmethod
    def from_bytes(cls, data: bytes) -> "SignedShortTermKeyStructure":
        if len(data) != SIGNED_SIZE:
            raise ValueError(f"expected {SIGNED_SIZE} bytes, got {len(data)}")
        return cls(ShortTermKeyStructure.from_bytes(data[:STRUCTURE_SIZE]), data[STRUCTURE_SIZE:])


def canonical_serialize(s: ShortTermKeyStructure) -> bytes:
    return s.to_bytes()


def decode(data: bytes) -> ShortTermKeyStructure:
    return ShortTermKeyStructure.from_bytes(data)


@dataclass(frozen=True)
class IssuePolicy:
    zone_level: int
    max_lifetime: int = DEFAULT_MAX_LIFETIME
    skew: int = DEFAULT_SKEW


def issue(structure: ShortTermKeyStructure, zone_signing_key, now: float, policy: IssuePolicy) -> SignedShortTermKeyStructure:
    """Sign ``structure`` with the zone signing key after policy checks.

    Raises IssueRejected when the structure is already expired, starts too far
    in the future, lives longer than the policy allows, or names another zone
    level than the issuing key server's.
    """
    if structure.zone_level != policy.zone_level:
        raise IssueRejected(
            RejectReason.LEVEL_MISMATCH,
            f"structure level {structure.zone_level} != key server level {policy.zone_level}",
        )
    if structure.expiration <= now:
        raise IssueRejected(RejectReason.EXPIRED)
    if structure.inception > now + policy.skew:
        raise IssueRejected(RejectReason.NOT_YET_VALID)
    if structure.lifetime > policy.max_lifetime:
        raise IssueRejected(
            RejectReason.LIFETIME_TOO_LONG, f"{structure.lifetime}s > {policy.max_lifetime}s"
        )
    sig = crypto.sign(structure.to_bytes(), zone_signing_key)
    return SignedShortTermKeyStructure(structure, sig)


def validate(signed: SignedShortTermKeyStructure, zone_verify_key: bytes, now: float, skew: int = DEFAULT_SKEW) -> Validity:
    if not crypto.verify(signed.structure.to_bytes(), signed.signature, zone_verify_key):
        return Validity.BAD_SIGNATURE
    if now > signed.structure.expiration + skew:
        return Validity.EXPIRED
    if now < signed.structure.inception - skew:
        return Validity.NOT_YET_VALID
    return Validity.VALID


def validate_any(signed: SignedShortTermKeyStructure, zone_verify_keys, now: float, skew: int = DEFAULT_SKEW) -> Validity:
    """Validate against a key set, as held by resolvers during a signing-key rollover."""
    result = Validity.BAD_SIGNATURE
    for key in zone_verify_keys:
        result = validate(signed, key, now, skew)
        if result is not Validity.BAD_SIGNATURE:
            return result
    return result
