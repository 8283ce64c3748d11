"""POI records and the per-node cache."""

from __future__ import annotations

import hashlib
import math
from collections import Counter, OrderedDict, deque
from dataclasses import dataclass

Point = tuple[float, float]

LBS = "lbs"
PEER = "peer"


@dataclass(frozen=True)
class PoiRecord:
    location: Point
    poi_type: str
    payload: bytes
    fetched_at: float = 0.0
    origin: str = LBS

    def __post_init__(self) -> None:
        if not self.payload:
            raise ValueError("POI payload must be non-empty")

    @property
    def key(self) -> tuple[Point, str]:
        return (self.location, self.poi_type)

    @property
    def content_key(self) -> tuple[Point, str, bytes]:
        return (self.location, self.poi_type, hashlib.blake2b(self.payload, digest_size=16).digest())

    def as_fact(self) -> tuple[float, float, str, bytes]:
        return (self.location[0], self.location[1], self.poi_type, self.payload)


def distance(a: Point, b: Point) -> float:
    return math.hypot(a[0] - b[0], a[1] - b[1])


def within(records, location: Point, poi_type: str, radius: float) -> list[PoiRecord]:
    return [r for r in records if r.poi_type == poi_type and distance(r.location, location) <= radius]


def combine(current: list[PoiRecord], incoming) -> list[PoiRecord]:
    """Union of two result sets, deduplicated by (location, type, payload digest)."""
    seen = {r.content_key for r in current}
    out = list(current)
    for r in incoming:
        if r.content_key not in seen:
            seen.add(r.content_key)
            out.append(r)
    return out


class PopularityTracker:
    """A POI type is popular when its share of the last ``window`` queries exceeds ``threshold``."""

    def __init__(self, window: int = 100, threshold: float = 0.2):
        self.window = window
        self.threshold = threshold
        self._recent: deque[str] = deque()
        self.counts: Counter[str] = Counter()

    def observe(self, poi_type: str) -> None:
        self._recent.append(poi_type)
        self.counts[poi_type] += 1
        if len(self._recent) > self.window:
            old = self._recent.popleft()
            self.counts[old] -= 1
            if not self.counts[old]:
                del self.counts[old]

    def share(self, poi_type: str) -> float:
        return self.counts[poi_type] / len(self._recent) if self._recent else 0.0

    def is_popular(self, poi_type: str) -> bool:
        return self.share(poi_type) > self.threshold


class NodeCache:
    """Capacity-bounded POI store indexed by (type, grid cell).

    Eviction is least-recently-used, except that records of currently popular
    types are only evicted when nothing else is left.
    """

    def __init__(self, capacity: int = 200, cell_size: float = 500.0, popularity: PopularityTracker | None = None):
        if capacity < 0:
            raise ValueError("capacity must be >= 0")
        self.capacity = capacity
        self.cell_size = cell_size
        self.popularity = popularity or PopularityTracker()
        self._lru: OrderedDict[tuple[Point, str], PoiRecord] = OrderedDict()
        self._cells: dict[tuple[str, int, int], set[tuple[Point, str]]] = {}

    def __len__(self) -> int:
        return len(self._lru)

    def __iter__(self):
        return iter(list(self._lru.values()))

    def _cell(self, poi_type: str, p: Point) -> tuple[str, int, int]:
        return (poi_type, math.floor(p[0] / self.cell_size), math.floor(p[1] / self.cell_size))

    def _remove(self, key: tuple[Point, str]) -> None:
        self._lru.pop(key)
        cell = self._cell(key[1], key[0])
        bucket = self._cells[cell]
        bucket.discard(key)
        if not bucket:
            del self._cells[cell]

    def _evict_one(self) -> None:
        for key in self._lru:
            if not self.popularity.is_popular(key[1]):
                self._remove(key)
                return
        self._remove(next(iter(self._lru)))

    def add(self, record: PoiRecord) -> bool:
        if self.capacity == 0:
            return False
        key = record.key
        old = self._lru.get(key)
        if old is not None:
            # LBS-originated facts are not overwritten by hearsay.
            if old.origin == LBS and record.origin != LBS:
                self._lru.move_to_end(key)
                return False
            self._lru[key] = record
            self._lru.move_to_end(key)
            return True
        while len(self._lru) >= self.capacity:
            self._evict_one()
        self._lru[key] = record
        self._cells.setdefault(self._cell(record.poi_type, record.location), set()).add(key)
        return True

    def add_all(self, records) -> None:
        for r in records:
            self.add(r)

    def search(self, location: Point, poi_type: str, radius: float, origins: frozenset[str] | None = None) -> list[PoiRecord]:
        if not self._lru:
            return []
        cs = self.cell_size
        x0, x1 = math.floor((location[0] - radius) / cs), math.floor((location[0] + radius) / cs)
        y0, y1 = math.floor((location[1] - radius) / cs), math.floor((location[1] + radius) / cs)
        hits = []
        for cx in range(x0, x1 + 1):
            for cy in range(y0, y1 + 1):
                for key in self._cells.get((poi_type, cx, cy), ()):
                    rec = self._lru[key]
                    if distance(rec.location, location) <= radius and (origins is None or rec.origin in origins):
                        hits.append(rec)
        hits.sort(key=lambda r: (r.location, r.payload))
        for r in hits:
            self._lru.move_to_end(r.key)
        return hits
