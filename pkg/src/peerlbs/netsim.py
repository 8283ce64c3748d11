"""Discrete-event core: clock, unit-disk broadcast radio, placement, workload.

Runs are reproducible from ``(config, seed)``: every random decision draws
from a named stream derived from the seed, and simultaneous events fire in
insertion order.
"""

from __future__ import annotations

import heapq
import itertools
import math
import random
from dataclasses import dataclass, field
from typing import Callable, Sequence

Point = tuple[float, float]


def rng_stream(seed: int | str, name: str) -> random.Random:
    return random.Random(f"{seed}:{name}")


class SchedulingError(ValueError):
    pass


class EventQueue:
    def __init__(self, start: float = 0.0):
        self.now = start
        self._heap: list = []
        self._seq = itertools.count()
        self.executed = 0

    def __len__(self) -> int:
        return len(self._heap)

    def schedule(self, at: float, fn: Callable, *args) -> None:
        if at < self.now:
            raise SchedulingError(f"cannot schedule at {at} before current time {self.now}")
        heapq.heappush(self._heap, (at, next(self._seq), fn, args))

    def schedule_in(self, delay: float, fn: Callable, *args) -> None:
        self.schedule(self.now + delay, fn, *args)

    def run_until(self, t_end: float) -> None:
        heap = self._heap
        while heap and heap[0][0] <= t_end:
            at, _, fn, args = heapq.heappop(heap)
            self.now = at
            fn(*args)
            self.executed += 1
        if t_end > self.now:
            self.now = t_end


@dataclass(frozen=True)
class RadioModel:
    range_m: float = 100.0
    propagation_delay_ms: float = 1.0
    p_loss: float = 0.0

    def __post_init__(self) -> None:
        if self.range_m <= 0:
            raise ValueError("range_m must be positive")
        if self.propagation_delay_ms < 0:
            raise ValueError("propagation delay must be >= 0")
        if not 0.0 <= self.p_loss <= 1.0:
            raise ValueError("p_loss must lie in [0, 1]")


@dataclass
class Placement:
    """Static node positions in a ``width`` x ``height`` metre rectangle.

    With ``wrap`` the rectangle is a torus, which removes border effects when
    a finite area stands in for an unbounded uniform crowd.
    """

    positions: list[Point]
    width: float
    height: float
    wrap: bool = False
    _neighbors: dict[float, list[list[int]]] = field(default_factory=dict, repr=False)

    def __post_init__(self) -> None:
        for x, y in self.positions:
            if not (0 <= x <= self.width and 0 <= y <= self.height):
                raise ValueError(f"position ({x}, {y}) outside the area")

    @classmethod
    def uniform(cls, n: int, width: float, height: float, rng: random.Random, wrap: bool = False) -> Placement:
        return cls([(rng.uniform(0, width), rng.uniform(0, height)) for _ in range(n)], width, height, wrap)

    @classmethod
    def from_density(cls, per_km2: float, width: float, height: float, rng: random.Random, wrap: bool = False) -> Placement:
        n = round(per_km2 * width * height / 1e6)
        return cls.uniform(n, width, height, rng, wrap)

    def __len__(self) -> int:
        return len(self.positions)

    @property
    def density_per_km2(self) -> float:
        return len(self.positions) / (self.width * self.height / 1e6)

    def delta(self, a: Point, b: Point) -> tuple[float, float]:
        dx, dy = abs(a[0] - b[0]), abs(a[1] - b[1])
        if self.wrap:
            dx, dy = min(dx, self.width - dx), min(dy, self.height - dy)
        return dx, dy

    def distance(self, i: int, j: int) -> float:
        return math.hypot(*self.delta(self.positions[i], self.positions[j]))

    def neighbors(self, i: int, range_m: float) -> list[int]:
        """Indices within ``range_m`` of node ``i`` (excluding ``i``), ascending."""
        table = self._neighbors.get(range_m)
        if table is None:
            table = self._neighbors[range_m] = self._build(range_m)
        return table[i]

    def _build(self, r: float) -> list[list[int]]:
        # Cells are at least r wide and tile the area exactly, so on a torus
        # wrapped neighbours are always in an adjacent cell.
        nx, ny = max(1, int(self.width // r)), max(1, int(self.height // r))
        cw, ch = self.width / nx, self.height / ny

        def cell(p: Point) -> tuple[int, int]:
            return min(int(p[0] // cw), nx - 1), min(int(p[1] // ch), ny - 1)

        cells: dict[tuple[int, int], list[int]] = {}
        for idx, p in enumerate(self.positions):
            cells.setdefault(cell(p), []).append(idx)
        everyone = self.wrap and (nx < 3 or ny < 3)
        out: list[list[int]] = []
        for idx, p in enumerate(self.positions):
            if everyone:
                cand: set[int] = set(range(len(self.positions)))
            else:
                cx, cy = cell(p)
                cand = set()
                for dx in (-1, 0, 1):
                    for dy in (-1, 0, 1):
                        kx, ky = cx + dx, cy + dy
                        if self.wrap:
                            kx, ky = kx % nx, ky % ny
                        cand.update(cells.get((kx, ky), ()))
            out.append(sorted(j for j in cand if j != idx and math.hypot(*self.delta(p, self.positions[j])) <= r))
        return out


class BroadcastMedium:
    """Unit-disk broadcast: every node within range hears every frame."""

    def __init__(self, queue: EventQueue, radio: RadioModel, placement: Placement, rng: random.Random):
        self.queue = queue
        self.radio = radio
        self.placement = placement
        self.rng = rng
        self.handlers: dict[int, Callable] = {}
        self.frames_sent = 0
        self.deliveries = 0
        self.losses = 0

    def attach(self, index: int, handler: Callable) -> None:
        self.handlers[index] = handler

    def broadcast(self, sender: int, frame) -> list[int]:
        targets = self.placement.neighbors(sender, self.radio.range_m)
        p = self.radio.p_loss
        if p > 0:
            kept = [j for j in targets if self.rng.random() >= p]
            self.losses += len(targets) - len(kept)
            targets = kept
        self.frames_sent += 1
        if targets:
            self.queue.schedule_in(self.radio.propagation_delay_ms / 1000.0, self._deliver, targets, frame)
        return list(targets)

    def _deliver(self, targets: list[int], frame) -> None:
        handlers = self.handlers
        for j in targets:
            h = handlers.get(j)
            if h is not None:
                self.deliveries += 1
                h(frame)


@dataclass(frozen=True)
class RequestModel:
    """Which node an information need is attributed to.

    ``self`` mode: a need arising at node i belongs to i. ``weighted`` mode:
    it belongs to j with probability proportional to ``w_j * exp(-d(l_i, l_j))``
    over the candidate set, distances in metres divided by ``distance_scale``.
    ``role`` says how the sampled j is used: ``peer`` makes j the issuing
    node, ``location`` keeps i as issuer but asks about j's position.
    """

    mode: str = "self"
    weights: tuple[float, ...] | None = None
    role: str = "peer"
    distance_scale: float = 1.0

    def __post_init__(self) -> None:
        if self.mode not in ("self", "weighted"):
            raise ValueError("request mode must be 'self' or 'weighted'")
        if self.role not in ("peer", "location"):
            raise ValueError("request role must be 'peer' or 'location'")
        if self.weights is not None and any(w < 0 for w in self.weights):
            raise ValueError("weights must be non-negative")

    def probabilities(self, i: int, placement: Placement, candidates: Sequence[int] | None = None) -> dict[int, float]:
        idx = list(range(len(placement))) if candidates is None else list(candidates)
        if self.mode == "self":
            return {j: (1.0 if j == i else 0.0) for j in idx}
        weights = self.weights if self.weights is not None else (1.0,) * len(placement)
        logits = {}
        for j in idx:
            if weights[j] > 0:
                logits[j] = math.log(weights[j]) - placement.distance(i, j) / self.distance_scale
        if not logits:
            raise ValueError("all request weights are zero")
        top = max(logits.values())
        expd = {j: math.exp(v - top) for j, v in logits.items()}
        total = sum(expd.values())
        return {j: expd.get(j, 0.0) / total for j in idx}

    def sample_request_target(self, i: int, placement: Placement, rng: random.Random, candidates: Sequence[int] | None = None) -> int:
        if self.mode == "self":
            return i
        probs = self.probabilities(i, placement, candidates)
        u = rng.random()
        acc = 0.0
        last = i
        for j, pj in probs.items():
            if pj > 0:
                last = j
                acc += pj
                if u < acc:
                    return j
        return last


class Workload:
    """Independent Poisson need arrivals per node."""

    def __init__(
        self,
        queue: EventQueue,
        n_nodes: int,
        rate_per_min: float,
        poi_types: dict[str, float],
        rng: random.Random,
        t_end: float,
        on_need: Callable[[int, str], None],
    ):
        if rate_per_min <= 0:
            raise ValueError("query rate must be > 0")
        if not poi_types or any(w < 0 for w in poi_types.values()) or sum(poi_types.values()) <= 0:
            raise ValueError("poi type distribution must have positive total weight")
        self.queue = queue
        self.rate = rate_per_min / 60.0
        self.types = list(poi_types)
        self.type_weights = [poi_types[t] for t in self.types]
        self.rng = rng
        self.t_end = t_end
        self.on_need = on_need
        self.generated = 0
        for i in range(n_nodes):
            self._next(i, queue.now)

    def _next(self, i: int, t: float) -> None:
        at = t + self.rng.expovariate(self.rate)
        if at <= self.t_end:
            self.queue.schedule(at, self._fire, i)

    def _fire(self, i: int) -> None:
        poi_type = self.types[0] if len(self.types) == 1 else self.rng.choices(self.types, self.type_weights)[0]
        self.generated += 1
        self._next(i, self.queue.now)
        self.on_need(i, poi_type)


def generate_workload(
    queue: EventQueue,
    n_nodes: int,
    rate_per_min: float,
    poi_types: dict[str, float],
    rng: random.Random,
    t_end: float,
    on_need: Callable[[int, str], None],
) -> Workload:
    return Workload(queue, n_nodes, rate_per_min, poi_types, rng, t_end, on_need)
