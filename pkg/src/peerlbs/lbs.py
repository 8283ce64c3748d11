"""Honest-but-curious LBS server.

The server answers every query faithfully from its ground-truth POI database
and keeps a log of everything it was shown. ``curiosity_report`` measures
what that log lets it link.

POI database files are UTF-8 text::

    # peerlbs-poi v1
    <x>\t<y>\t<type>\t<payload>

one record per line; coordinates in metres, payload free text without tabs
or newlines.
"""

from __future__ import annotations

import math
import random
from collections import Counter, defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

from .credentials import LongTermCertificate, PseudonymCertificate, verify_pc
from .crypto import CryptoMeter, PublicKey, Scheme, Signature, generate_keypair, sign, verify
from .encoding import canonical
from .node.cache import LBS, Point, PoiRecord, distance
from .node.messages import PeerQuery

POI_FILE_HEADER = "# peerlbs-poi v1"


class AuthenticationFailed(Exception):
    pass


class PoiDatabase:
    """Immutable ground truth with a grid index."""

    def __init__(self, records: Iterable[PoiRecord], cell_size: float = 250.0):
        self.cell_size = cell_size
        self._records = tuple(records)
        self._exact: dict[tuple[Point, str], bytes] = {}
        self._cells: dict[tuple[str, int, int], list[PoiRecord]] = defaultdict(list)
        for r in self._records:
            self._exact[r.key] = r.payload
            self._cells[self._cell(r.poi_type, r.location)].append(r)

    def __len__(self) -> int:
        return len(self._records)

    def __iter__(self):
        return iter(self._records)

    def _cell(self, poi_type: str, p: Point) -> tuple[str, int, int]:
        return (poi_type, math.floor(p[0] / self.cell_size), math.floor(p[1] / self.cell_size))

    def search(self, location: Point, poi_type: str, radius: float) -> list[PoiRecord]:
        cs = self.cell_size
        hits = []
        for cx in range(math.floor((location[0] - radius) / cs), math.floor((location[0] + radius) / cs) + 1):
            for cy in range(math.floor((location[1] - radius) / cs), math.floor((location[1] + radius) / cs) + 1):
                for r in self._cells.get((poi_type, cx, cy), ()):
                    if distance(r.location, location) <= radius:
                        hits.append(r)
        hits.sort(key=lambda r: (r.location, r.payload))
        return hits

    def lookup(self, location: Point, poi_type: str) -> bytes | None:
        return self._exact.get((location, poi_type))

    @classmethod
    def generate(
        cls,
        rng: random.Random,
        width: float,
        height: float,
        per_km2: float,
        poi_types: Sequence[str],
    ) -> PoiDatabase:
        """Uniformly scattered POIs, ``per_km2`` of each type."""
        area_km2 = width * height / 1e6
        records = []
        for t in poi_types:
            for k in range(round(per_km2 * area_km2)):
                x, y = round(rng.uniform(0, width), 1), round(rng.uniform(0, height), 1)
                records.append(PoiRecord((x, y), t, f"{t}-{k}".encode()))
        return cls(records)

    @classmethod
    def load(cls, path: str | Path) -> PoiDatabase:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        if not lines or lines[0].strip() != POI_FILE_HEADER:
            raise ValueError(f"{path}: missing '{POI_FILE_HEADER}' header")
        records = []
        for n, line in enumerate(lines[1:], start=2):
            if not line.strip() or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 4:
                raise ValueError(f"{path}:{n}: expected 4 tab-separated fields")
            x, y, t, payload = parts
            records.append(PoiRecord((float(x), float(y)), t, payload.encode("utf-8")))
        return cls(records)

    def dump(self, path: str | Path) -> None:
        out = [POI_FILE_HEADER]
        for r in self._records:
            text = r.payload.decode("utf-8")
            if "\t" in text or "\n" in text or "\t" in r.poi_type:
                raise ValueError("payload and type must not contain tabs or newlines")
            out.append(f"{r.location[0]!r}\t{r.location[1]!r}\t{r.poi_type}\t{text}")
        Path(path).write_text("\n".join(out) + "\n", encoding="utf-8")


@dataclass(frozen=True)
class ServerLogEntry:
    credential: str
    location: Point
    poi_type: str
    time: float


@dataclass(frozen=True)
class LbsResponse:
    records: tuple[PoiRecord, ...]
    signature: Signature | None = None

    @staticmethod
    def body_for(records: Sequence[PoiRecord]) -> bytes:
        flat: list[object] = ["lbs-response", len(records)]
        for r in records:
            flat += [float(r.location[0]), float(r.location[1]), r.poi_type, r.payload]
        return canonical(*flat)


def credential_label(credential) -> str:
    if isinstance(credential, PseudonymCertificate):
        return f"pc:{credential.serial:016x}"
    if isinstance(credential, LongTermCertificate):
        return f"ltc:{credential.node_id}"
    return "anonymous"


class LbsServer:
    """Answers queries from the database and remembers who asked what.

    ``response_mode`` is ``signed`` or ``channel-only``. With ``subscriber``
    set, every request must carry a credential whose key signed the query.
    """

    def __init__(
        self,
        db: PoiDatabase,
        response_mode: str = "channel-only",
        subscriber: bool = False,
        pca_public: PublicKey | None = None,
        ltca_public: PublicKey | None = None,
        rng: random.Random | None = None,
        scheme: Scheme = Scheme.RSA_2048,
        meter: CryptoMeter | None = None,
    ):
        if response_mode not in ("signed", "channel-only"):
            raise ValueError("response_mode must be 'signed' or 'channel-only'")
        self.db = db
        self.response_mode = response_mode
        self.subscriber = subscriber
        self.pca_public = pca_public
        self.ltca_public = ltca_public
        self.meter = meter
        self.key = generate_keypair(scheme, rng, meter) if response_mode == "signed" else None
        self.log: list[ServerLogEntry] = []

    @property
    def public_key(self) -> PublicKey | None:
        return self.key.public_part if self.key else None

    def _authenticate(self, query: PeerQuery | None, credential) -> None:
        if credential is None or query is None:
            raise AuthenticationFailed("subscriber service requires a credential")
        if isinstance(credential, PseudonymCertificate):
            if self.pca_public is None or not verify_pc(credential, self.pca_public, self.meter):
                raise AuthenticationFailed("pseudonym does not verify")
            if not credential.valid_at(query.issued_at):
                raise AuthenticationFailed("pseudonym not valid at query time")
            key = credential.public_part
        elif isinstance(credential, LongTermCertificate):
            if self.ltca_public is None or not verify(credential.body(), credential.issuer_signature, self.ltca_public, self.meter):
                raise AuthenticationFailed("long-term certificate does not verify")
            key = credential.public_part
        else:
            raise AuthenticationFailed("unsupported credential")
        if not verify(query.signing_bytes(), query.signature, key, self.meter):
            raise AuthenticationFailed("query signature does not verify")

    def answer(
        self,
        location: Point,
        poi_type: str,
        radius: float,
        now: float,
        credential=None,
        query: PeerQuery | None = None,
    ) -> LbsResponse:
        if self.subscriber:
            self._authenticate(query, credential)
        self.log.append(ServerLogEntry(credential_label(credential), location, poi_type, now))
        records = tuple(PoiRecord(r.location, r.poi_type, r.payload, now, LBS) for r in self.db.search(location, poi_type, radius))
        sig = sign(LbsResponse.body_for(records), self.key, self.meter) if self.key is not None else None
        return LbsResponse(records, sig)

    def curiosity_report(self, truth: Sequence[str] | None = None) -> dict:
        """What the server can link on its own.

        Queries are grouped by presented credential. ``truth`` (one true node
        id per log entry, known to the harness but never to the server)
        turns the groups into a per-node figure: the largest number of that
        node's queries sitting in one group.
        """
        groups: dict[str, list[int]] = defaultdict(list)
        for i, entry in enumerate(self.log):
            groups[entry.credential].append(i)
        report: dict = {
            "requests": len(self.log),
            "groups": len(groups),
            "group_sizes": sorted((len(v) for v in groups.values()), reverse=True),
            "anonymous_pool": len(groups.get("anonymous", ())),
        }
        if truth is not None:
            if len(truth) != len(self.log):
                raise ValueError("truth must have one entry per logged request")
            per_node: dict[str, int] = {}
            for label, members in groups.items():
                if label == "anonymous":
                    continue
                for node, count in Counter(truth[i] for i in members).items():
                    per_node[node] = max(per_node.get(node, 0), count)
            report["max_linkable_per_node"] = dict(sorted(per_node.items()))
        return report
