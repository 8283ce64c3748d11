"""Per-run aggregates."""

from __future__ import annotations

import dataclasses
import json
import statistics
from dataclasses import dataclass, field


@dataclass
class MetricsRecord:
    nodes: int = 0
    duration: float = 0.0
    needs_total: int = 0
    served_local: int = 0
    served_peer: int = 0
    served_lbs: int = 0
    unsatisfied: int = 0
    lbs_exposure_ratio: float = 0.0
    peer_served_ratio: float = 0.0
    latency_mean: float = 0.0
    latency_p95: float = 0.0
    frames_sent: int = 0
    queries_sent: int = 0
    responses_sent: int = 0
    deliveries: int = 0
    losses: int = 0
    queries_received: int = 0
    responses_received: int = 0
    overheard: int = 0
    queries_accepted: int = 0
    responses_accepted: int = 0
    received_query_rate: float = 0.0
    pc_verifications: int = 0
    pc_cache_hits: int = 0
    msg_verifications: int = 0
    crypto_ms: float = 0.0
    quota_drops: int = 0
    stale_drops: int = 0
    replay_drops: int = 0
    suppressed_responses: int = 0
    lbs_requests: int = 0
    reports_filed: int = 0
    resolutions: int = 0
    evictions: int = 0
    violations: list[str] = field(default_factory=list)

    def finalize(self, latencies: list[float]) -> MetricsRecord:
        n = self.needs_total
        self.lbs_exposure_ratio = self.served_lbs / n if n else 0.0
        self.peer_served_ratio = self.served_peer / n if n else 0.0
        if latencies:
            self.latency_mean = statistics.fmean(latencies)
            ordered = sorted(latencies)
            self.latency_p95 = ordered[min(len(ordered) - 1, int(round(0.95 * (len(ordered) - 1))))]
        if self.nodes and self.duration:
            self.received_query_rate = self.queries_received / (self.nodes * self.duration)
        return self

    def conservation_holds(self) -> bool:
        return self.served_peer + self.served_lbs + self.served_local + self.unsatisfied == self.needs_total

    def consistency_problems(self) -> list[str]:
        """Violations of the accounting identities; empty when all hold."""
        problems = []
        if not self.conservation_holds():
            problems.append("metrics_conservation")
        if self.frames_sent != self.queries_sent + self.responses_sent:
            problems.append("frames_vs_messages")
        received = self.queries_received + self.responses_received + self.overheard
        if received > self.deliveries:
            problems.append("received_exceeds_delivered")
        if self.queries_accepted > self.queries_received or self.responses_accepted > self.responses_received + self.overheard:
            problems.append("accepted_exceeds_received")
        for name in ("lbs_exposure_ratio", "peer_served_ratio"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                problems.append(f"{name}_out_of_range")
        return problems

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"
