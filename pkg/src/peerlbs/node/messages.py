"""Signed peer-to-peer messages and link-layer frames."""

from __future__ import annotations

import json
from dataclasses import dataclass
from functools import cached_property

from ..credentials import PseudonymCertificate
from ..crypto import CryptoMeter, KeyPair, Signature, sign
from ..encoding import canonical, encode_query, encode_response
from .cache import PEER, Point, PoiRecord


@dataclass(frozen=True, eq=False)
class PeerQuery:
    query_id: str
    issued_at: float
    location: Point
    poi_type: str
    wanted_responses: int
    pc_serial: int
    signature: Signature
    attached_pc: PseudonymCertificate | None = None

    kind = "query"

    @staticmethod
    def body_for(query_id: str, issued_at: float, location: Point, poi_type: str, n: int, pc_serial: int) -> bytes:
        return canonical("query", query_id, float(issued_at), float(location[0]), float(location[1]), poi_type, n, pc_serial)

    @cached_property
    def _body(self) -> bytes:
        return self.body_for(self.query_id, self.issued_at, self.location, self.poi_type, self.wanted_responses, self.pc_serial)

    def signing_bytes(self) -> bytes:
        return self._body

    def payload(self) -> bytes:
        """The application query ``{loc, type_poi}`` plus N, as carried on the wire."""
        return f"{self.location[0]:.1f},{self.location[1]:.1f},{self.poi_type},{self.wanted_responses}".encode()

    def encode(self) -> bytes:
        return encode_query(self)

    @classmethod
    def create(
        cls,
        query_id: str,
        issued_at: float,
        location: Point,
        poi_type: str,
        wanted_responses: int,
        pc: PseudonymCertificate,
        key: KeyPair,
        attach: bool = True,
        meter: CryptoMeter | None = None,
    ) -> PeerQuery:
        body = cls.body_for(query_id, issued_at, location, poi_type, wanted_responses, pc.serial)
        q = cls(query_id, issued_at, location, poi_type, wanted_responses, pc.serial, sign(body, key, meter), pc if attach else None)
        q.__dict__["_body"] = body
        return q


@dataclass(frozen=True, eq=False)
class PeerResponse:
    query_id: str
    issued_at: float
    results: tuple[tuple[float, float, str, bytes], ...]
    pc_serial: int
    signature: Signature
    attached_pc: PseudonymCertificate | None = None

    kind = "response"

    @staticmethod
    def body_for(query_id: str, issued_at: float, results, pc_serial: int) -> bytes:
        flat: list[object] = ["response", query_id, float(issued_at), pc_serial, len(results)]
        for x, y, t, payload in results:
            flat += [float(x), float(y), t, payload]
        return canonical(*flat)

    @cached_property
    def _body(self) -> bytes:
        return self.body_for(self.query_id, self.issued_at, self.results, self.pc_serial)

    def signing_bytes(self) -> bytes:
        return self._body

    def payload(self) -> bytes:
        return json.dumps([[x, y, t, p.decode("utf-8", "replace")] for x, y, t, p in self.results], separators=(",", ":")).encode()

    def encode(self) -> bytes:
        return encode_response(self)

    def records(self, now: float) -> list[PoiRecord]:
        return [PoiRecord((x, y), t, p, now, PEER) for x, y, t, p in self.results]

    @classmethod
    def create(
        cls,
        query_id: str,
        issued_at: float,
        records,
        pc: PseudonymCertificate,
        key: KeyPair,
        attach: bool = True,
        meter: CryptoMeter | None = None,
    ) -> PeerResponse:
        results = tuple(r.as_fact() if isinstance(r, PoiRecord) else tuple(r) for r in records)
        body = cls.body_for(query_id, issued_at, results, pc.serial)
        resp = cls(query_id, issued_at, results, pc.serial, sign(body, key, meter), pc if attach else None)
        resp.__dict__["_body"] = body
        return resp


@dataclass(frozen=True)
class LinkIdentity:
    address: str
    ip: str


@dataclass(frozen=True)
class Frame:
    """What the radio carries: link-layer addressing around a signed message."""

    src: LinkIdentity
    message: PeerQuery | PeerResponse
    dst: str | None = None
