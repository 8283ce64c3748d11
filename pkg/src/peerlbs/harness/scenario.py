"""Wiring a scenario into a runnable world.

:class:`World` owns the clock, the radio, the three authorities, the LBS
and the nodes, and implements the environment interface nodes talk to. It
writes the event log: one line per event, ``time|entity|event_kind|details``
with ``details`` a space-separated list of ``key=value`` pairs.
"""

from __future__ import annotations

from collections import Counter
from pathlib import Path

from ..adversary import AdversaryNode, AdversaryStrategy, EvidenceJudge
from ..credentials import LTCA, PCA, RA, CredentialError, IssuancePolicy, MisbehaviorReport
from ..crypto import CostProfile, CryptoMeter, default_profiles, parse_scheme, verify
from ..lbs import AuthenticationFailed, LbsResponse, LbsServer, PoiDatabase, credential_label
from ..netsim import BroadcastMedium, EventQueue, Placement, RadioModel, RequestModel, Workload, rng_stream
from ..node import Frame, Need, Node, NodeParams, PeerQuery, PoiRecord
from .config import ScenarioConfig
from .metrics import MetricsRecord


def _fmt(value) -> str:
    if isinstance(value, float):
        return f"{value:.3f}"
    # Keep every record splittable on "|" and whitespace.
    return "_".join(str(value).replace("|", "/").split())


def format_event(t: float, entity: str, kind: str, details: dict) -> str:
    body = " ".join(f"{k}={_fmt(v)}" for k, v in details.items())
    return f"{t:.6f}|{entity}|{kind}|{body}"


def parse_event(line: str) -> tuple[float, str, str, dict[str, str]]:
    t, entity, kind, body = line.rstrip("\n").split("|", 3)
    details = dict(part.split("=", 1) for part in body.split()) if body else {}
    return float(t), entity, kind, details


def node_name(i: int) -> str:
    return f"node-{i:04d}"


class World:
    def __init__(self, config: ScenarioConfig, seed: int | None = None):
        self.config = config
        self.seed = config.seed if seed is None else seed
        c = config
        self.queue = EventQueue()
        self.events: list[str] = []
        self.log_receptions = c.log.receptions
        self.violations: list[str] = []

        profiles = default_profiles(c.crypto.scale)
        for name, prof in c.crypto.profiles.items():
            profiles[parse_scheme(name)] = CostProfile(**prof)
        self.meter = CryptoMeter(profiles)

        policy = IssuancePolicy(c.policy.ticket_duration, c.policy.grid, c.policy.pseudonym_lifetime, c.policy.max_batch)
        auth_scheme = parse_scheme(c.crypto.authority_scheme)
        self.ltca = LTCA(policy, rng_stream(self.seed, "ltca"), auth_scheme, self.meter, self._authority_hook("LTCA"))
        self.pca = PCA(self.ltca.public_key, policy, rng_stream(self.seed, "pca"), auth_scheme, self.meter, self._authority_hook("PCA"))

        if c.lbs.poi_file:
            self.db = PoiDatabase.load(c.lbs.poi_file)
        else:
            self.db = PoiDatabase.generate(rng_stream(self.seed, "poi"), c.area.width, c.area.height, c.lbs.poi_per_km2, sorted(c.workload.poi_types))
        self.ra = RA(self.ltca, self.pca, EvidenceJudge(c.policy.quota, self.db), c.policy.revoke, self.meter, self._authority_hook("RA"))
        self.lbs = LbsServer(
            self.db,
            c.lbs.response_mode,
            c.lbs.subscriber,
            self.pca.public_key,
            self.ltca.public_key,
            rng_stream(self.seed, "lbs"),
            parse_scheme(c.crypto.lbs_scheme),
            self.meter,
        )
        self.lbs_truth: list[str] = []

        a = c.area
        place_rng = rng_stream(self.seed, "placement")
        if a.positions is not None:
            self.placement = Placement([(float(x), float(y)) for x, y in a.positions], a.width, a.height, a.wrap)
        elif a.density_per_km2 is not None:
            self.placement = Placement.from_density(a.density_per_km2, a.width, a.height, place_rng, a.wrap)
        else:
            self.placement = Placement.uniform(a.nodes, a.width, a.height, place_rng, a.wrap)
        radio = RadioModel(c.radio.range_m, c.radio.propagation_delay_ms, c.radio.p_loss)
        self.medium = BroadcastMedium(self.queue, radio, self.placement, rng_stream(self.seed, "radio"))
        req = c.workload.request
        self.request_model = RequestModel(req.mode, tuple(req.weights) if req.weights is not None else None, req.role, req.distance_scale)

        params = NodeParams(
            wanted_responses=c.node.N,
            timeout=c.node.timeout,
            quota=c.policy.quota,
            min_results=c.node.min_results,
            radius=c.node.radius,
            cache_capacity=c.node.cache_capacity,
            freshness_window=c.policy.freshness_window,
            pseudonym_cache=c.node.pseudonym_cache,
            attach_pc=c.node.attach_pc,
            backoff=c.node.backoff,
            backoff_max=c.node.backoff_max,
            opportunistic_caching=c.node.opportunistic_caching,
            popularity_window=c.node.popularity_window,
            popularity_threshold=c.node.popularity_threshold,
            serve_peer_origin=c.node.serve_peer_origin,
            crosscheck=c.node.crosscheck,
            report_misbehavior=c.node.report_misbehavior,
            respect_quota=c.node.respect_quota,
            lbs_credential=c.node.lbs_credential,
            acquire_lead=c.node.acquire_lead,
            pseudonym_scheme=parse_scheme(c.crypto.node_scheme),
            long_term_scheme=parse_scheme(c.crypto.long_term_scheme),
            batch_size=c.policy.batch_size,
        )
        self.params = params
        roster: dict[int, AdversaryStrategy] = {}
        for adv in c.adversaries:
            for j in adv.nodes:
                roster[j] = AdversaryStrategy(adv.kind, dict(adv.params))
        self.nodes: list[Node] = []
        self.index: dict[int, int] = {}
        for i, pos in enumerate(self.placement.positions):
            rng = rng_stream(self.seed, f"node:{i}")
            if i in roster:
                node = AdversaryNode(node_name(i), pos, self, params, rng, self.meter, strategy=roster[i])
            else:
                node = Node(node_name(i), pos, self, params, rng, self.meter)
            self.nodes.append(node)
            self.index[id(node)] = i
            self.medium.attach(i, node.receive)
        self.honest = [n for n in self.nodes if not isinstance(n, AdversaryNode)]
        self.adversaries = [n for n in self.nodes if isinstance(n, AdversaryNode)]

        self.needs: list[Need] = []
        self.outcomes: Counter[str] = Counter()
        self.reports = 0
        self._workload_rng = rng_stream(self.seed, "workload")
        self.workload: Workload | None = None
        self._ran = False

    # -- environment interface used by nodes ---------------------------------

    @property
    def now(self) -> float:
        return self.queue.now

    def schedule_at(self, at: float, fn, *args) -> None:
        self.queue.schedule(at, fn, *args)

    def log(self, entity: str, kind: str, /, **details) -> None:
        self.events.append(format_event(self.queue.now, entity, kind, details))

    def _authority_hook(self, entity: str):
        def hook(kind: str, details: dict) -> None:
            self.log(entity, kind, **details)

        return hook

    def transmit(self, node: Node, frame: Frame) -> None:
        msg = frame.message
        if not isinstance(node, AdversaryNode):
            cur = node.current
            if cur is None or cur[0].serial != msg.pc_serial or not cur[0].valid_at(msg.issued_at):
                self._violation("signature_hygiene", node=node.node_id, id_q=msg.query_id)
        pc = msg.attached_pc
        self.log(
            node.node_id,
            "send",
            kind=msg.kind,
            id_q=msg.query_id,
            sn_pc=f"{msg.pc_serial:016x}",
            addr=frame.src.address,
            ip=frame.src.ip,
            pc=1 if pc is not None else 0,
            dst=frame.dst or "*",
        )
        self.medium.broadcast(self.index[id(node)], frame)

    def query_lbs(self, node: Node, need: Need, query: PeerQuery | None, credential) -> list[PoiRecord] | None:
        try:
            resp: LbsResponse = self.lbs.answer(need.location, need.poi_type, node.params.radius, self.now, credential, query)
        except AuthenticationFailed as exc:
            self.log(node.node_id, "lbs_refused", reason=str(exc).replace(" ", "_"))
            return None
        self.lbs_truth.append(node.node_id)
        self.log(node.node_id, "lbs_query", cred=credential_label(credential), need=need.need_id, results=len(resp.records))
        if resp.signature is not None and not verify(LbsResponse.body_for(resp.records), resp.signature, self.lbs.public_key, node.meter):
            self.log(node.node_id, "lbs_bad_signature")
            return None
        return list(resp.records)

    def submit_report(self, node: Node, report: MisbehaviorReport) -> None:
        self.reports += 1
        accused = ",".join(f"{s:016x}" for s in sorted(report.accused()))
        self.log(node.node_id, "report", kind=report.kind, accused=accused)
        try:
            self.ra.resolve(report)
        except CredentialError:
            pass

    def need_finished(self, node: Node, need: Need) -> None:
        self.outcomes[need.outcome] += 1
        self.log(node.node_id, "need", need=need.need_id, type=need.poi_type, outcome=need.outcome, peers=need.n)

    # -- setup and run -------------------------------------------------------

    def _violation(self, name: str, **details) -> None:
        self.violations.append(name)
        self.log("world", "violation", name=name, **details)

    def setup(self) -> None:
        for node in self.nodes:
            node.register(self.ltca)
            node.acquire_pseudonyms(self.now)
        if self.config.workload.warm_cache:
            for node in self.nodes:
                for t in sorted(self.config.workload.poi_types):
                    node.cache.add_all(
                        PoiRecord(r.location, r.poi_type, r.payload, self.now) for r in self.db.search(node.position, t, node.params.radius)
                    )
        for node in self.nodes:
            node.start()

    def _on_need(self, i: int, poi_type: str) -> None:
        target = self.request_model.sample_request_target(i, self.placement, self._workload_rng)
        if self.request_model.role == "peer":
            issuer, location = target, self.placement.positions[target]
        else:
            issuer, location = i, self.placement.positions[target]
        self.needs.append(self.nodes[issuer].need(poi_type, location))

    def run(self, until: float | None = None) -> MetricsRecord:
        if self._ran:
            raise RuntimeError("a world runs once")
        self._ran = True
        c = self.config
        t_end = c.duration if until is None else until
        self.setup()
        self.workload = Workload(self.queue, len(self.nodes), c.workload.rate_per_min, c.workload.poi_types, self._workload_rng, t_end, self._on_need)
        self.queue.run_until(t_end)
        for node in self.nodes:
            for need in list(node.pending.values()):
                node.pending.pop(need.query.query_id, None)
                node._finish(need, "unsatisfied", [])
        metrics = self.collect()
        self._check_invariants(metrics)
        metrics.violations = list(self.violations)
        self.log("world", "end", needs=metrics.needs_total, violations=len(self.violations))
        return metrics

    def collect(self) -> MetricsRecord:
        stats: Counter[str] = Counter()
        for node in self.nodes:
            stats.update(node.stats)
        latencies = [n.finished_at - n.created_at for n in self.needs if n.finished_at is not None]
        m = MetricsRecord(
            nodes=len(self.nodes),
            duration=self.config.duration,
            needs_total=len(self.needs),
            served_local=self.outcomes["local"],
            served_peer=self.outcomes["peer"],
            served_lbs=self.outcomes["lbs"],
            unsatisfied=self.outcomes["unsatisfied"],
            frames_sent=self.medium.frames_sent,
            queries_sent=stats["sent_queries"],
            responses_sent=stats["sent_responses"],
            deliveries=self.medium.deliveries,
            losses=self.medium.losses,
            queries_received=stats["received_queries"],
            responses_received=stats["received_responses"],
            overheard=stats["overheard"],
            queries_accepted=stats["accepted_queries"],
            responses_accepted=stats["accepted_responses"],
            pc_verifications=stats["pc_verifications"],
            pc_cache_hits=stats["pc_cache_hits"],
            msg_verifications=stats["msg_verifications"],
            crypto_ms=self.meter.total_ms,
            quota_drops=stats["quota_drops"],
            stale_drops=stats["stale_drops"],
            replay_drops=stats["replay_drops"],
            suppressed_responses=stats["suppressed_responses"],
            lbs_requests=len(self.lbs.log),
            reports_filed=self.reports,
            resolutions=len(self.ra.resolved),
            evictions=len(self.ltca.records.revoked),
        )
        return m.finalize(latencies)

    def _check_invariants(self, m: MetricsRecord) -> None:
        q = self.config.policy.quota
        for node in self.nodes:
            if any(count > q for count in node.quota.counts.values()):
                self._violation("quota", node=node.node_id)
            windows = sorted((pc.valid_from, pc.valid_to) for pc in node.issued)
            for (_, end), (start, _) in zip(windows, windows[1:]):
                if start < end:
                    self._violation("overlapping_pseudonyms", node=node.node_id)
                    break
        ltca_dump, pca_dump = self.ltca.records.dumps(), self.pca.records.dumps()
        if any(f"{sn:016x}" in ltca_dump for sn in self.pca.records.pc_to_ticket):
            self._violation("ledger_separation", ledger="LTCA")
        if any(node.node_id in pca_dump for node in self.nodes):
            self._violation("ledger_separation", ledger="PCA")
        if self.lbs.log and len(self.lbs_truth) != len(self.lbs.log):
            self._violation("lbs_accounting")
        for problem in m.consistency_problems():
            self._violation(problem)


def run_scenario(config: ScenarioConfig, seed: int | None = None, out: str | Path | None = None) -> tuple[MetricsRecord, list[str]]:
    """Run one scenario; optionally write ``metrics.json`` and ``events.log`` under ``out``."""
    world = World(config, seed)
    metrics = world.run()
    if out is not None:
        write_outputs(out, metrics, world.events)
    return metrics, world.events


def write_outputs(out: str | Path, metrics: MetricsRecord, events: list[str]) -> None:
    d = Path(out)
    d.mkdir(parents=True, exist_ok=True)
    (d / "metrics.json").write_text(metrics.dumps(), encoding="utf-8")
    (d / "events.log").write_text("".join(line + "\n" for line in events), encoding="utf-8")
