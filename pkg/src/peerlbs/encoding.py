"""Byte encodings: canonical signing input and the JSON wire envelope.

``canonical`` is what gets signed. Every field is length-prefixed so no two
distinct field tuples map to the same bytes.

The wire envelope mirrors the benchmark setup of the original system (keys
and signatures in Base64 inside JSON). Field order and widths are fixed so a
message's size depends only on the payload length and the schemes in use:

    {"type":"query","id_q":<32 hex>,"t_now":<13-digit epoch ms>,
     "query":<ascii payload "x,y,type,N">,"sig":<base64>,
     "pc":{"sn_pc":<16 hex>,"alg":<scheme>,"sk":<base64 SPKI>,
           "t_start":<10-digit epoch s>,"t_end":<10-digit epoch s>,
           "issuer":"PCA","sig":<base64>}}

Responses use the same layout with ``"type":"response"`` and the result set
(a JSON list, Base64-encoded) under ``"resp"``. ``"pc"`` is omitted when
the sender relies on receivers having cached its pseudonym.

Public keys are sized as their DER SubjectPublicKeyInfo would be, so an
RSA-1024 pseudonym carries a 162-byte key. Simulated time 0 maps to
``EPOCH_S`` so timestamps always have a fixed digit count.
"""

from __future__ import annotations

import base64
import hashlib
import json
import struct
from typing import TYPE_CHECKING

from .crypto import PublicKey, Scheme

if TYPE_CHECKING:
    from .credentials import PseudonymCertificate
    from .node.messages import PeerQuery, PeerResponse

EPOCH_S = 1_400_000_000

# DER SubjectPublicKeyInfo sizes.
SPKI_BYTES: dict[Scheme, int] = {
    Scheme.RSA_1024: 162,
    Scheme.RSA_2048: 294,
    Scheme.ECDSA_192: 75,
    Scheme.ECDSA_224: 80,
    Scheme.REAL: 44,
}

_ALG_NAMES: dict[Scheme, str] = {
    Scheme.RSA_1024: "RSA-1024",
    Scheme.RSA_2048: "RSA-2048",
    Scheme.ECDSA_192: "ECDSA-192",
    Scheme.ECDSA_224: "ECDSA-224",
    Scheme.REAL: "Ed25519",
}


def _field(value: object) -> bytes:
    if isinstance(value, bytes):
        raw = value
    elif isinstance(value, float):
        raw = repr(value).encode()
    else:
        raw = str(value).encode()
    return struct.pack(">I", len(raw)) + raw


def canonical(*fields: object) -> bytes:
    return b"".join(_field(f) for f in fields)


def b64(data: bytes) -> str:
    return base64.b64encode(data).decode("ascii")


def wire_public_key(pk: PublicKey) -> bytes:
    """Expand a key to its nominal SPKI length (model keys are short ids)."""
    size = SPKI_BYTES[pk.scheme]
    if len(pk.data) == size:
        return pk.data
    return hashlib.shake_256(b"spki" + pk.data).digest(size)


def epoch_ms(t: float) -> int:
    return EPOCH_S * 1000 + round(t * 1000)


def epoch_s(t: float) -> int:
    return EPOCH_S + int(t)


def _dumps(obj: dict) -> bytes:
    return json.dumps(obj, separators=(",", ":")).encode("ascii")


def pc_envelope(pc: PseudonymCertificate) -> dict:
    return {
        "sn_pc": f"{pc.serial:016x}",
        "alg": _ALG_NAMES[pc.public_part.scheme],
        "sk": b64(wire_public_key(pc.public_part)),
        "t_start": epoch_s(pc.valid_from),
        "t_end": epoch_s(pc.valid_to),
        "issuer": "PCA",
        "sig": b64(pc.issuer_signature.value),
    }


def encode_query(query: PeerQuery) -> bytes:
    obj: dict = {
        "type": "query",
        "id_q": query.query_id,
        "t_now": epoch_ms(query.issued_at),
        "query": query.payload().decode("ascii"),
        "sig": b64(query.signature.value),
    }
    if query.attached_pc is not None:
        obj["pc"] = pc_envelope(query.attached_pc)
    else:
        obj["sn_pc"] = f"{query.pc_serial:016x}"
    return _dumps(obj)


def encode_response(resp: PeerResponse) -> bytes:
    obj: dict = {
        "type": "response",
        "id_q": resp.query_id,
        "t_now": epoch_ms(resp.issued_at),
        "resp": b64(resp.payload()),
        "sig": b64(resp.signature.value),
    }
    if resp.attached_pc is not None:
        obj["pc"] = pc_envelope(resp.attached_pc)
    else:
        obj["sn_pc"] = f"{resp.pc_serial:016x}"
    return _dumps(obj)
