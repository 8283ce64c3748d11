"""Analytic capacity figures and transcript-based privacy analysis."""

from __future__ import annotations

import math
import random
from collections import Counter, defaultdict
from typing import Iterable

from ..credentials import LTCA, PCA, CertificateRequest, IssuancePolicy, SignedShortTermKey, ticket_request_body
from ..crypto import CostProfile, default_profiles, generate_keypair, parse_scheme, sign
from ..node.messages import PeerQuery
from .config import CryptoConfig, ScenarioConfig
from .scenario import parse_event

NOT_CRYPTO_BOUND = "not crypto-bound"

FIXTURE_LOCATION = (1234.5, 678.9)
FIXTURE_TYPE = "restaurant"
FIXTURE_N = 3


def _profiles(cfg: CryptoConfig) -> dict:
    table = default_profiles(cfg.scale)
    for name, prof in cfg.profiles.items():
        table[parse_scheme(name)] = CostProfile(**prof)
    return table


def search_cost_ms(cfg: CryptoConfig, records: int, matches: int) -> float:
    return cfg.search_base_ms + cfg.search_per_record_ms * records + cfg.search_per_match_ms * matches


def _rate(ms: float) -> float | str:
    return NOT_CRYPTO_BOUND if ms <= 0 else 1000.0 / ms


def sample_query(config: ScenarioConfig | None = None, seed: int = 0) -> PeerQuery:
    """A signed peer query with its pseudonym attached, issued through the real CA flow."""
    cfg = (config or ScenarioConfig()).crypto
    rng = random.Random(seed)
    auth = parse_scheme(cfg.authority_scheme)
    ltca = LTCA(IssuancePolicy(), rng, auth)
    pca = PCA(ltca.public_key, IssuancePolicy(), rng, auth)
    lt_key = generate_keypair(cfg.long_term_scheme, rng)
    ltc = ltca.register("fixture", CertificateRequest.create("fixture", lt_key))
    ticket = ltca.request_ticket(ltc, 0.0, sign(ticket_request_body(ltc, 0.0), lt_key))
    sk = generate_keypair(cfg.node_scheme, rng)
    (pc,) = pca.issue_pseudonyms(ticket, [SignedShortTermKey.create(sk)])
    return PeerQuery.create(rng.randbytes(16).hex(), 12.5, FIXTURE_LOCATION, FIXTURE_TYPE, FIXTURE_N, pc, sk, True)


def capacity_report(
    config: ScenarioConfig,
    cache_records: int = 50,
    cache_matches: int = 5,
    observed_rate: float | None = None,
) -> dict:
    """Verification throughput and response-generation budget from the cost profiles.

    ``observed_rate`` (received queries per node per second, e.g. from a
    run) is compared with the non-cached verification capacity.
    """
    c = config.crypto
    table = _profiles(c)
    node_p = table[parse_scheme(c.node_scheme)]
    auth_p = table[parse_scheme(c.authority_scheme)]
    cached = node_p.verify_ms
    uncached = node_p.verify_ms + auth_p.verify_ms
    search = search_cost_ms(c, cache_records, cache_matches)
    a = config.area
    if a.positions is not None:
        density = len(a.positions) / (a.width * a.height / 1e6)
    elif a.density_per_km2 is not None:
        density = a.density_per_km2
    else:
        density = a.nodes / (a.width * a.height / 1e6)
    neighbours = density * math.pi * config.radio.range_m**2 / 1e6
    expected_rate = neighbours * config.workload.rate_per_min / 60.0
    load = observed_rate if observed_rate is not None else expected_rate
    report = {
        "node_scheme": c.node_scheme,
        "authority_scheme": c.authority_scheme,
        "verify_cached_ms": cached,
        "verify_uncached_ms": uncached,
        "verify_cached_per_s": _rate(cached),
        "verify_uncached_per_s": _rate(uncached),
        "query_generation_ms": node_p.sign_ms,
        "search_ms": search,
        "response_generation_ms": search + node_p.sign_ms,
        "response_generation_per_s": _rate(search + node_p.sign_ms),
        "cache_records": cache_records,
        "cache_matches": cache_matches,
        "expected_neighbours": neighbours,
        "expected_received_per_s": expected_rate,
        "load_per_s": load,
        "verify_utilization": load * uncached / 1000.0,
        "query_wire_bytes": len(sample_query(config).encode()),
    }
    return report


# -- privacy -----------------------------------------------------------------


class _UnionFind:
    def __init__(self):
        self.parent: dict = {}

    def find(self, x):
        self.parent.setdefault(x, x)
        root = x
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[x] != root:
            self.parent[x], x = root, self.parent[x]
        return root

    def union(self, a, b) -> None:
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            self.parent[max(ra, rb)] = min(ra, rb)


def privacy_report(lines: Iterable[str]) -> dict:
    """What each observer can link, computed from an event log.

    Observers see only their own slice of the log: the eavesdropper sees
    the link address, IP and pseudonym serial of every transmission; the
    LBS sees the credential presented with each request; the LTCA and PCA
    see their own issuance records. The ``entity`` column is ground truth
    used to score the observers, never as their input.
    """
    sends = []
    lbs = []
    ltca_tickets: dict[str, str] = {}
    pca_tickets: dict[str, str] = {}
    rotations = 0
    for line in lines:
        if not line.strip():
            continue
        t, entity, kind, d = parse_event(line)
        if kind == "send":
            sends.append((t, entity, d))
        elif kind == "lbs_query":
            lbs.append((t, entity, d["cred"]))
        elif entity == "LTCA" and kind == "ticket_issued":
            ltca_tickets[d["sn_ticket"]] = d["node"]
        elif entity == "PCA" and kind == "pc_issued":
            pca_tickets[d["sn_pc"]] = d["sn_ticket"]
        elif kind == "rotate":
            rotations += 1

    # Eavesdropper: messages sharing any sender-side identifier are linked.
    uf = _UnionFind()
    users: dict[str, set[tuple[str, str]]] = defaultdict(set)
    for k, (t, entity, d) in enumerate(sends):
        ids = (f"pc:{d['sn_pc']}", f"mac:{d['addr']}", f"ip:{d['ip']}")
        for ident in ids:
            uf.union(f"msg:{k}", ident)
            users[ident].add((entity, d["sn_pc"]))
    groups: dict = defaultdict(list)
    for k in range(len(sends)):
        groups[uf.find(f"msg:{k}")].append(k)
    spanning_rotation = 0
    spanning_nodes = 0
    max_size = 0
    max_span = 0.0
    for members in groups.values():
        truths = {(sends[k][1], sends[k][2]["sn_pc"]) for k in members}
        if len({e for e, _ in truths}) > 1:
            spanning_nodes += 1
        elif len(truths) > 1:
            spanning_rotation += 1
        max_size = max(max_size, len(members))
        times = [sends[k][0] for k in members]
        max_span = max(max_span, max(times) - min(times))
    crossing = sorted(ident for ident, who in users.items() if len(who) > 1)

    # Authorities: map each transmission's pseudonym to a node if the view allows it.
    def mapped(view: str) -> tuple[int, int]:
        hit = correct = 0
        for _, entity, d in sends:
            sn = d["sn_pc"]
            if view == "LTCA":
                # The LTCA can only look the serial up among its tickets.
                node = ltca_tickets.get(sn)
            elif view == "PCA":
                # The PCA's records end at ticket serials, which name no node.
                node = pca_tickets.get(sn) if pca_tickets.get(sn) in senders else None
            else:
                node = ltca_tickets.get(pca_tickets.get(sn, ""))
            if node is not None:
                hit += 1
                correct += node == entity
        return hit, correct

    senders = {entity for _, entity, _ in sends}
    views = {}
    for view in ("LTCA", "PCA", "LTCA+PCA"):
        hit, correct = mapped(view)
        views[view] = {"messages": len(sends), "mapped": hit, "correct": correct}

    # LBS: requests grouped by presented credential.
    by_cred: dict[str, Counter] = defaultdict(Counter)
    for _, entity, cred in lbs:
        by_cred[cred][entity] += 1
    per_node: dict[str, int] = {}
    for cred, counts in by_cred.items():
        if cred == "anonymous":
            continue
        for entity, n in counts.items():
            per_node[entity] = max(per_node.get(entity, 0), n)

    return {
        "transmissions": len(sends),
        "rotations": rotations,
        "eavesdropper": {
            "groups": len(groups),
            "max_linkable": max_size,
            "max_linkable_span_s": max_span,
            "groups_spanning_rotation": spanning_rotation,
            "groups_spanning_nodes": spanning_nodes,
            "identifiers_spanning_rotation": crossing,
        },
        "authorities": views,
        "lbs": {
            "requests": len(lbs),
            "groups": len(by_cred),
            "max_linkable_per_node": max(per_node.values(), default=0),
            "anonymous_pool": sum(by_cred.get("anonymous", Counter()).values()),
        },
    }
