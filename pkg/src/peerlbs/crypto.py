"""Signature schemes used by nodes and authorities.

Two families live behind one interface:

* ``real-default``: Ed25519 from :mod:`cryptography`. Used where correctness
  of actual signatures matters (unit tests, small traces).
* ``model-*``: a deterministic delay model. Signatures are a keyed SHAKE-256
  digest over the message, padded to the modeled signature size, so
  verification is exact and cheap while each operation is charged the
  simulated handset cost from :data:`HANDSET_PROFILES`.

Model signatures are *not* unforgeable: anyone holding the public part can
compute them. Adversaries in this package only use credentials they were
legitimately issued, so that is enough to exercise the protocol logic.
"""

from __future__ import annotations

import hashlib
import hmac
import os
import random
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)


class Scheme(str, Enum):
    RSA_1024 = "model-RSA-1024"
    RSA_2048 = "model-RSA-2048"
    ECDSA_192 = "model-ECDSA-192"
    ECDSA_224 = "model-ECDSA-224"
    REAL = "real-default"

    @property
    def is_model(self) -> bool:
        return self is not Scheme.REAL


class UnknownSchemeError(ValueError):
    pass


def parse_scheme(value: str | Scheme) -> Scheme:
    try:
        return Scheme(value)
    except ValueError:
        raise UnknownSchemeError(f"unknown signature scheme: {value!r}") from None


@dataclass(frozen=True)
class CostProfile:
    keygen_ms: float
    sign_ms: float
    verify_ms: float
    signature_size_bytes: int

    def __post_init__(self) -> None:
        if min(self.keygen_ms, self.sign_ms, self.verify_ms) < 0:
            raise ValueError("crypto costs must be non-negative")
        if self.signature_size_bytes <= 0:
            raise ValueError("signature size must be positive")

    def scaled(self, factor: float) -> CostProfile:
        return CostProfile(
            self.keygen_ms * factor,
            self.sign_ms * factor,
            self.verify_ms * factor,
            self.signature_size_bytes,
        )


# Measured on a 2014 Android handset; the default simulated costs.
HANDSET_PROFILES: dict[Scheme, CostProfile] = {
    Scheme.RSA_1024: CostProfile(400.86, 4.63, 0.78, 128),
    Scheme.RSA_2048: CostProfile(2104.59, 21.18, 1.21, 256),
    Scheme.ECDSA_192: CostProfile(214.65, 210.01, 286.44, 56),
    Scheme.ECDSA_224: CostProfile(251.66, 251.91, 345.95, 63),
}

# Ed25519 runs on the host; it is not part of the simulated cost budget.
REAL_PROFILE = CostProfile(0.0, 0.0, 0.0, 64)

# Nominal security level in bits, for the bench table.
SECURITY_BITS: dict[Scheme, int] = {
    Scheme.RSA_1024: 80,
    Scheme.RSA_2048: 112,
    Scheme.ECDSA_192: 96,
    Scheme.ECDSA_224: 112,
    Scheme.REAL: 128,
}

_MODEL_KEY_ID_BYTES = 16


def default_profiles(scale: float = 1.0) -> dict[Scheme, CostProfile]:
    """Cost table for every scheme; ``scale`` multiplies the handset timings."""
    table = {s: p.scaled(scale) if scale != 1.0 else p for s, p in HANDSET_PROFILES.items()}
    table[Scheme.REAL] = REAL_PROFILE
    return table


@dataclass(frozen=True)
class PublicKey:
    scheme: Scheme
    data: bytes

    def fingerprint(self) -> str:
        return hashlib.blake2b(self.scheme.value.encode() + self.data, digest_size=8).hexdigest()


@dataclass(frozen=True)
class KeyPair:
    scheme: Scheme
    public_part: PublicKey
    private_part: bytes | None = field(default=None, repr=False)

    @property
    def scheme_id(self) -> Scheme:
        return self.scheme


@dataclass(frozen=True)
class Signature:
    scheme: Scheme
    value: bytes

    @property
    def scheme_id(self) -> Scheme:
        return self.scheme


class CryptoMeter:
    """Accumulates simulated processing time for crypto operations."""

    def __init__(self, profiles: dict[Scheme, CostProfile] | None = None):
        self.profiles = profiles if profiles is not None else default_profiles()
        self.counts: Counter[tuple[Scheme, str]] = Counter()
        self.total_ms = 0.0

    def profile(self, scheme: Scheme) -> CostProfile:
        try:
            return self.profiles[scheme]
        except KeyError:
            raise UnknownSchemeError(f"no cost profile for {scheme.value}") from None

    def charge(self, scheme: Scheme, op: str) -> float:
        cost = getattr(self.profile(scheme), f"{op}_ms")
        self.counts[(scheme, op)] += 1
        self.total_ms += cost
        return cost


def generate_keypair(
    scheme: Scheme | str,
    rng: random.Random | None = None,
    meter: CryptoMeter | None = None,
) -> KeyPair:
    scheme = parse_scheme(scheme)
    if scheme is Scheme.REAL:
        seed = rng.randbytes(32) if rng is not None else os.urandom(32)
        pub = Ed25519PrivateKey.from_private_bytes(seed).public_key().public_bytes_raw()
        pair = KeyPair(scheme, PublicKey(scheme, pub), seed)
    else:
        key_id = rng.randbytes(_MODEL_KEY_ID_BYTES) if rng is not None else os.urandom(_MODEL_KEY_ID_BYTES)
        pair = KeyPair(scheme, PublicKey(scheme, key_id), key_id)
    if meter is not None:
        meter.charge(scheme, "keygen")
    return pair


def _model_digest(scheme: Scheme, key_id: bytes, message: bytes) -> bytes:
    size = HANDSET_PROFILES[scheme].signature_size_bytes
    h = hashlib.shake_256(scheme.value.encode())
    h.update(key_id)
    h.update(message)
    return h.digest(size)


def sign(message: bytes, key: KeyPair, meter: CryptoMeter | None = None) -> Signature:
    if key.private_part is None:
        raise ValueError("key pair has no private part")
    if key.scheme is Scheme.REAL:
        value = Ed25519PrivateKey.from_private_bytes(key.private_part).sign(message)
    else:
        value = _model_digest(key.scheme, key.private_part, message)
    if meter is not None:
        meter.charge(key.scheme, "sign")
    return Signature(key.scheme, value)


def verify(
    message: bytes,
    signature: Signature,
    public_part: PublicKey,
    meter: CryptoMeter | None = None,
) -> bool:
    """Return True iff ``signature`` was made over ``message`` by ``public_part``'s owner.

    A scheme mismatch is a plain rejection and is not charged.
    """
    if signature.scheme is not public_part.scheme:
        return False
    if meter is not None:
        meter.charge(public_part.scheme, "verify")
    if public_part.scheme is Scheme.REAL:
        try:
            Ed25519PublicKey.from_public_bytes(public_part.data).verify(signature.value, message)
        except (InvalidSignature, ValueError):
            return False
        return True
    expected = _model_digest(public_part.scheme, public_part.data, message)
    return hmac.compare_digest(expected, signature.value)
