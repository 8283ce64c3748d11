"""Misbehaving nodes and the RA's evidence judge.

Adversaries hold only credentials the facility would legitimately issue
them; everything else they try is expected to be rejected somewhere. Each
strategy reacts to node events through :func:`act` and returns the messages
it wants on the air.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

from .credentials import CredentialError, MisbehaviorReport, SignedShortTermKey, ticket_request_body
from .crypto import generate_keypair, sign
from .lbs import PoiDatabase
from .node.cache import Point, PoiRecord
from .node.messages import Frame, PeerQuery, PeerResponse
from .node.node import Node

KINDS = ("bogus-responder", "replayer", "clogger", "sybil-attempter")


class EvidenceJudge:
    """Default ``judge(msg)`` for the RA.

    Accepts three evidence kinds:

    ``lbs-contradiction``
        the reporter's signed query plus a response to it carrying a record
        of the queried type whose payload differs from ground truth (or that
        does not exist at all);
    ``equivocation``
        two responses to the same query id from the same pseudonym that
        disagree on some POI;
    ``quota``
        more than ``quota`` distinct queries signed under one pseudonym.
    """

    def __init__(self, quota: int, truth: PoiDatabase | None = None):
        self.quota = quota
        self.truth = truth

    def __call__(self, report: MisbehaviorReport) -> bool:
        check = {
            "lbs-contradiction": self._contradiction,
            "equivocation": self._equivocation,
            "quota": self._quota,
        }.get(report.kind)
        return bool(check and check(report))

    def _accused_messages(self, report: MisbehaviorReport):
        return [msg for msg, pc in report.evidence if pc.serial != report.reporter_pc.serial]

    def _contradiction(self, report: MisbehaviorReport) -> bool:
        if self.truth is None:
            return False
        own = {msg.query_id: msg for msg, pc in report.evidence if pc.serial == report.reporter_pc.serial and msg.kind == "query"}
        for msg in self._accused_messages(report):
            if msg.kind != "response" or msg.query_id not in own:
                continue
            query = own[msg.query_id]
            for x, y, t, payload in msg.results:
                if t == query.poi_type and self.truth.lookup((x, y), t) != payload:
                    return True
        return False

    def _equivocation(self, report: MisbehaviorReport) -> bool:
        responses = [m for m in self._accused_messages(report) if m.kind == "response"]
        for i, a in enumerate(responses):
            facts_a = {(x, y, t): p for x, y, t, p in a.results}
            for b in responses[i + 1 :]:
                if a.query_id != b.query_id:
                    continue
                if any(facts_a.get((x, y, t), p) != p for x, y, t, p in b.results):
                    return True
        return False

    def _quota(self, report: MisbehaviorReport) -> bool:
        ids = {m.query_id for m in self._accused_messages(report) if m.kind == "query"}
        return len(ids) > self.quota


@dataclass
class AdversaryStrategy:
    kind: str
    params: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise ValueError(f"unknown adversary kind {self.kind!r}; expected one of {', '.join(KINDS)}")

    def act(self, node: AdversaryNode, event: tuple) -> list[PeerQuery | PeerResponse]:
        handler = getattr(self, "_" + self.kind.replace("-", "_"))
        return handler(node, event)

    # bogus-responder: answer every query, right away, with fabricated POIs.
    def _bogus_responder(self, node: AdversaryNode, event: tuple) -> list:
        if event[0] != "query":
            return []
        query: PeerQuery = event[1]
        cred = node.active_credential()
        if cred is None:
            return []
        pc, key = cred
        count = int(self.params.get("fake_records", 2))
        spread = float(self.params.get("spread", 50.0))
        fakes = []
        for k in range(count):
            dx, dy = node.rng.uniform(-spread, spread), node.rng.uniform(-spread, spread)
            loc: Point = (round(query.location[0] + dx, 1), round(query.location[1] + dy, 1))
            fakes.append(PoiRecord(loc, query.poi_type, f"bogus-{node.node_id}-{k}".encode(), node.env.now))
        return [PeerResponse.create(query.query_id, node.env.now, fakes, pc, key, True, node.meter)]

    # replayer: re-broadcast captured signed messages verbatim after a delay.
    def _replayer(self, node: AdversaryNode, event: tuple) -> list:
        if event[0] == "frame":
            frame: Frame = event[1]
            budget = int(self.params.get("max_replays", 50))
            if node.captured < budget:
                node.captured += 1
                delay = float(self.params.get("replay_delay", 600.0))
                node.env.schedule_at(node.env.now + delay, node.replay, frame.message)
            return []
        if event[0] == "replay":
            return [event[1]]
        return []

    # clogger: a stream of fresh queries at a fixed rate, quota or not.
    def _clogger(self, node: AdversaryNode, event: tuple) -> list:
        if event[0] != "tick":
            return []
        cred = node.active_credential()
        if cred is None:
            return []
        pc, key = cred
        poi_type = self.params.get("poi_type", "restaurant")
        q = PeerQuery.create(node.rng.randbytes(16).hex(), node.env.now, node.position, poi_type, 1, pc, key, True, node.meter)
        return [q]

    # sybil-attempter: try to hold several valid pseudonyms at once.
    def _sybil_attempter(self, node: AdversaryNode, event: tuple) -> list:
        if event[0] == "start":
            node.try_overlapping_ticket()
            return []
        if event[0] != "tick" or node.current is None:
            return []
        out = []
        now = node.env.now
        for pc, key in [node.current, *node.credentials]:
            q = PeerQuery.create(node.rng.randbytes(16).hex(), now, node.position, self.params.get("poi_type", "restaurant"), 1, pc, key, True, node.meter)
            out.append(q)
            node.attempted_pcs.add(pc.serial)
        return out


def act(strategy: AdversaryStrategy, node: AdversaryNode, event: tuple) -> list[PeerQuery | PeerResponse]:
    return strategy.act(node, event)


class AdversaryNode(Node):
    """A node whose reactions are overridden by a strategy."""

    def __init__(self, *args, strategy: AdversaryStrategy, **kwargs):
        super().__init__(*args, **kwargs)
        self.strategy = strategy
        self.captured = 0
        self.attempted_pcs: set[int] = set()
        self.sybil_log: list[tuple[str, str]] = []

    def _emit(self, messages) -> None:
        for m in messages:
            self._send(m, None)

    def start(self) -> None:
        self._emit(act(self.strategy, self, ("start",)))
        rate = float(self.strategy.params.get("rate_per_min", 0.0))
        if rate > 0:
            self.env.schedule_at(self.env.now + 60.0 / rate, self._tick, 60.0 / rate)

    def _tick(self, period: float) -> None:
        self._emit(act(self.strategy, self, ("tick",)))
        self.env.schedule_at(self.env.now + period, self._tick, period)

    def replay(self, message) -> None:
        self.stats["replays"] += 1
        self._log("replay", kind=message.kind, id_q=message.query_id)
        self._emit(act(self.strategy, self, ("replay", message)))

    def receive(self, frame: Frame) -> None:
        if self.strategy.kind == "replayer":
            act(self.strategy, self, ("frame", frame))
        if frame.message.kind == "query" and self.strategy.kind == "bogus-responder":
            self.stats["received_queries"] += 1
            for resp in act(self.strategy, self, ("query", frame.message)):
                self._send(resp, frame.src.address)
            return
        super().receive(frame)

    def _attempt(self, what: str, fn):
        try:
            result = fn()
            outcome = "granted"
        except CredentialError as exc:
            result, outcome = None, type(exc).__name__
        self.sybil_log.append((what, outcome))
        self._log("sybil_attempt", what=what, outcome=outcome)
        return result

    def try_overlapping_ticket(self) -> None:
        """Try to end up holding more than one usable pseudonym at a time.

        Three attempts: a ticket overlapping the current one (the LTCA must
        refuse), a legitimate ticket for the following window whose
        pseudonym the strategy then uses early (receivers must refuse), and a
        second presentation of that ticket to the PCA (must be refused).
        """
        if self.ltc is None or self.current is None:
            return
        ltca, pca = self.env.ltca, self.env.pca
        pc = self.current[0]

        def ticket_at(t: float):
            return ltca.request_ticket(self.ltc, t, sign(ticket_request_body(self.ltc, t), self.long_term_key, self.meter))

        def pseudonym_for(ticket):
            key = generate_keypair(self.params.pseudonym_scheme, self.rng, self.meter)
            pcs = pca.issue_pseudonyms(ticket, [SignedShortTermKey.create(key, self.meter)])
            return pcs, key

        self._attempt("overlapping_ticket", lambda: ticket_at(pc.valid_from))
        ticket = self._attempt("next_ticket", lambda: ticket_at(pc.valid_to))
        if ticket is None:
            return
        got = self._attempt("next_pseudonym", lambda: pseudonym_for(ticket))
        if got is not None:
            pcs, key = got
            self.issued.extend(pcs)
            self.credentials.extend((p, key) for p in pcs)
            self._last_window_end = max(p.valid_to for p in pcs)
        self._attempt("ticket_replay", lambda: pseudonym_for(ticket))


EVICTION_STEPS = ("detected", "report", "resolved", "revoked", "ticket_denied")


def end_to_end_eviction(config) -> list[str]:
    """Run a scenario and return the event lines tracing one eviction.

    The transcript follows the first adversary that gets resolved: the
    detection by a peer, the report, the RA's resolution, the LTCA's
    revocation and the next ticket request that the LTCA refuses. If the
    run ends before the evicted node asks for another ticket, it is made to
    ask once after the run so the refusal is on record.
    """
    from .harness.scenario import World, parse_event

    world = World(config)
    world.run()
    resolved = {node: sn for sn, node in world.ra.resolved}
    adversary_ids = {n.node_id for n in world.adversaries}
    target = next((nid for _, nid in world.ra.resolved if nid in adversary_ids), None)
    if target is None:
        return []
    node = next(n for n in world.nodes if n.node_id == target)
    if not any(
        parse_event(line)[2] == "ticket_denied" and parse_event(line)[3].get("node") == target for line in world.events
    ):
        node.acquire_pseudonyms(world.now)
    sn_pc = f"{resolved[target]:016x}"
    transcript: list[str] = []
    for line in world.events:
        _, entity, kind, d = parse_event(line)
        if kind == "detected" and d.get("sn_pc") == sn_pc:
            transcript.append(line)
        elif kind == "report" and sn_pc in d.get("accused", "").split(","):
            transcript.append(line)
        elif entity == "RA" and kind == "resolved" and d.get("sn_pc") == sn_pc:
            transcript.append(line)
        elif entity == "LTCA" and kind in ("revoked", "ticket_denied") and d.get("node") == target:
            transcript.append(line)
    return transcript
