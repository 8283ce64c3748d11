"""The mobile client: querying thread, serving thread and overhearing.

A :class:`Node` is driven by an environment (normally
:class:`peerlbs.harness.scenario.World`) that owns the clock, the radio and
the infrastructure. Everything a node does happens inside one of the entry
points ``need``, ``receive`` or a timer it scheduled itself.
"""

from __future__ import annotations

import itertools
import random
from collections import Counter
from dataclasses import dataclass, field
from typing import Protocol

from ..credentials import (
    LTCA,
    PCA,
    CertificateRequest,
    CredentialError,
    LongTermCertificate,
    MisbehaviorReport,
    PseudonymCertificate,
    SignedShortTermKey,
    ticket_request_body,
    verify_pc,
)
from ..crypto import CryptoMeter, KeyPair, Scheme, generate_keypair, sign, verify
from .cache import LBS, NodeCache, Point, PoiRecord, PopularityTracker, combine, distance, within
from .messages import Frame, LinkIdentity, PeerQuery, PeerResponse


class ProtocolFault(RuntimeError):
    pass


@dataclass(frozen=True)
class NodeParams:
    wanted_responses: int = 3
    timeout: float = 5.0
    quota: int = 10
    min_results: int = 1
    radius: float = 500.0
    cache_capacity: int = 200
    freshness_window: float = 5.0
    pseudonym_cache: bool = True
    attach_pc: str = "always"
    backoff: bool = True
    backoff_max: float | None = None
    opportunistic_caching: bool = True
    popularity_window: int = 100
    popularity_threshold: float = 0.2
    serve_peer_origin: bool = True
    crosscheck: str = "on_disagreement"
    report_misbehavior: bool = True
    respect_quota: bool = True
    lbs_credential: str = "pseudonym"
    acquire_lead: float = 30.0
    pseudonym_scheme: Scheme = Scheme.RSA_1024
    long_term_scheme: Scheme = Scheme.RSA_1024
    batch_size: int = 1

    def __post_init__(self) -> None:
        if self.wanted_responses < 1:
            raise ValueError("wanted_responses must be >= 1")
        if self.timeout <= 0 or self.quota < 0 or self.radius <= 0:
            raise ValueError("timeout and radius must be positive, quota non-negative")
        if self.attach_pc not in ("always", "first"):
            raise ValueError("attach_pc must be 'always' or 'first'")
        if self.crosscheck not in ("never", "always", "on_disagreement"):
            raise ValueError("crosscheck must be never|always|on_disagreement")
        if self.lbs_credential not in ("pseudonym", "long-term", "anonymous"):
            raise ValueError("lbs_credential must be pseudonym|long-term|anonymous")

    @property
    def backoff_window(self) -> float:
        return self.backoff_max if self.backoff_max is not None else self.timeout / 2


class NodeEnv(Protocol):
    """What a node needs from its surroundings."""

    ltca: LTCA
    pca: PCA

    @property
    def now(self) -> float: ...

    def schedule_at(self, at: float, fn, *args) -> None: ...

    def transmit(self, node: Node, frame: Frame) -> None: ...

    def query_lbs(self, node: Node, need: Need, query: PeerQuery | None, credential) -> list[PoiRecord] | None: ...

    def submit_report(self, node: Node, report: MisbehaviorReport) -> None: ...

    def need_finished(self, node: Node, need: Need) -> None: ...

    def log(self, entity: str, kind: str, /, **details) -> None: ...


@dataclass
class Need:
    need_id: str
    poi_type: str
    location: Point
    created_at: float
    wanted: int = 1
    timeout: float = 5.0
    query: PeerQuery | None = None
    pc: PseudonymCertificate | None = None
    responses: list[tuple[PeerResponse, PseudonymCertificate]] = field(default_factory=list)
    combined: list[PoiRecord] = field(default_factory=list)
    outcome: str | None = None
    result: list[PoiRecord] = field(default_factory=list)
    finished_at: float | None = None

    @property
    def n(self) -> int:
        return len(self.responses)

    @property
    def done(self) -> bool:
        return self.outcome is not None


@dataclass
class PendingServe:
    query: PeerQuery
    reply_to: str
    matches: list[PoiRecord]


class QuotaLedger:
    """Accepted-query counts per sender pseudonym, as seen by one receiver."""

    def __init__(self, quota: int):
        self.quota = quota
        self.counts: Counter[int] = Counter()

    def exhausted(self, pc_serial: int) -> bool:
        return self.counts[pc_serial] >= self.quota

    def accept(self, pc_serial: int) -> None:
        if self.exhausted(pc_serial):
            raise ValueError("quota exceeded")
        self.counts[pc_serial] += 1


class PseudonymCache:
    """Pseudonyms whose PCA signature already verified, until they expire."""

    def __init__(self):
        self._by_serial: dict[int, PseudonymCertificate] = {}

    def __len__(self) -> int:
        return len(self._by_serial)

    def get(self, serial: int, now: float) -> PseudonymCertificate | None:
        pc = self._by_serial.get(serial)
        if pc is not None and now >= pc.valid_to:
            del self._by_serial[serial]
            return None
        return pc

    def contains(self, pc: PseudonymCertificate, now: float) -> bool:
        cached = self.get(pc.serial, now)
        # Same serial is not enough: a forged certificate may reuse it.
        return cached is not None and cached.identity == pc.identity

    def add(self, pc: PseudonymCertificate) -> None:
        self._by_serial[pc.serial] = pc

    def purge(self, now: float) -> None:
        for sn in [sn for sn, pc in self._by_serial.items() if now >= pc.valid_to]:
            del self._by_serial[sn]


def contradicting(records, truth: list[PoiRecord], location: Point, poi_type: str, radius: float) -> list[PoiRecord]:
    """Peer records inside the queried region that disagree with ground truth."""
    truth_map: dict = {}
    for r in truth:
        truth_map.setdefault(r.key, set()).add(r.payload)
    bad = []
    for r in records:
        if r.poi_type != poi_type or distance(r.location, location) > radius:
            continue
        if r.payload not in truth_map.get(r.key, ()):
            bad.append(r)
    return bad


class Node:
    def __init__(
        self,
        node_id: str,
        position: Point,
        env: NodeEnv,
        params: NodeParams | None = None,
        rng: random.Random | None = None,
        meter: CryptoMeter | None = None,
    ):
        self.node_id = node_id
        self.position = position
        self.env = env
        self.params = params or NodeParams()
        self.rng = rng or random.Random()
        self.meter = meter if meter is not None else CryptoMeter()
        p = self.params
        self.popularity = PopularityTracker(p.popularity_window, p.popularity_threshold)
        self.cache = NodeCache(p.cache_capacity, cell_size=p.radius, popularity=self.popularity)
        self.quota = QuotaLedger(p.quota)
        self.pc_cache = PseudonymCache()
        self.stats: Counter[str] = Counter()
        self.long_term_key: KeyPair | None = None
        self.ltc: LongTermCertificate | None = None
        self.credentials: list[tuple[PseudonymCertificate, KeyPair]] = []
        self.current: tuple[PseudonymCertificate, KeyPair] | None = None
        self.link = self._fresh_link()
        self.pending: dict[str, Need] = {}
        self.serving: dict[str, PendingServe] = {}
        self.overheard: Counter[str] = Counter()
        self._seen: set[tuple[str, int, str]] = set()
        self._evidence: dict[int, list[tuple[PeerQuery, PseudonymCertificate]]] = {}
        self._reported_pcs: set[int] = set()
        self._sent_under_pc = 0
        self._announced: set[int] = set()
        self._need_ids = itertools.count()
        self._silent_logged = False
        self._last_window_end: float | None = None
        self.issued: list[PseudonymCertificate] = []

    # -- identity -------------------------------------------------------------

    def _fresh_link(self) -> LinkIdentity:
        addr = ":".join(f"{b:02x}" for b in self.rng.randbytes(6))
        ip = "10." + ".".join(str(b) for b in self.rng.randbytes(3))
        return LinkIdentity(addr, ip)

    def _log(self, kind: str, /, **details) -> None:
        self.env.log(self.node_id, kind, **details)

    def register(self, ltca: LTCA) -> LongTermCertificate:
        self.long_term_key = generate_keypair(self.params.long_term_scheme, self.rng, self.meter)
        csr = CertificateRequest.create(self.node_id, self.long_term_key, self.meter)
        self.ltc = ltca.register(self.node_id, csr)
        return self.ltc

    def acquire_pseudonyms(self, t_start: float) -> list[PseudonymCertificate]:
        """Ticket from the LTCA, then a batch of pseudonyms from the PCA."""
        if self.ltc is None or self.long_term_key is None:
            raise ProtocolFault("node is not registered")
        ltca, pca = self.env.ltca, self.env.pca
        req_sig = sign(ticket_request_body(self.ltc, t_start), self.long_term_key, self.meter)
        try:
            ticket = ltca.request_ticket(self.ltc, t_start, req_sig)
        except CredentialError as exc:
            self._log("ticket_denied", reason=type(exc).__name__)
            return []
        keys = [generate_keypair(self.params.pseudonym_scheme, self.rng, self.meter) for _ in range(self.params.batch_size)]
        signed = [SignedShortTermKey.create(k, self.meter) for k in keys]
        try:
            pcs = pca.issue_pseudonyms(ticket, signed)
        except CredentialError as exc:
            self._log("pseudonyms_denied", reason=type(exc).__name__)
            return []
        self.issued.extend(pcs)
        self.credentials.extend(zip(pcs, keys))
        self.credentials.sort(key=lambda ck: ck[0].valid_from)
        self._last_window_end = max(pc.valid_to for pc in pcs)
        self._log("pseudonyms_acquired", count=len(pcs))
        if self.current is None or not self.current[0].valid_at(self.env.now):
            self.rotate_pseudonym(self.env.now)
        return pcs

    def rotate_pseudonym(self, now: float) -> None:
        old = self.current
        self.credentials = [ck for ck in self.credentials if ck[0].valid_to > now]
        successor = next((ck for ck in self.credentials if ck[0].valid_at(now)), None)
        if successor is None and old is not None and old[0].valid_at(now):
            return
        if successor is not None:
            self.credentials.remove(successor)
        self.current = successor
        self._sent_under_pc = 0
        if successor is None:
            if not self._silent_logged:
                self._silent_logged = True
                self._log("silent", had=f"{old[0].serial:016x}" if old else "-")
        else:
            self._silent_logged = False
            self.link = self._fresh_link()
            pc = successor[0]
            self._log("rotate", sn_pc=f"{pc.serial:016x}", addr=self.link.address, ip=self.link.ip)
            self.env.schedule_at(pc.valid_to, self._rotation_due)
            if not self.credentials:
                self.env.schedule_at(max(now, pc.valid_to - self.params.acquire_lead), self._refill)
        if old is not None:
            self._abandon_linkable_state()

    def _abandon_linkable_state(self) -> None:
        # Pending replies and queries are tied to the outgoing pseudonym.
        self.serving.clear()
        for need in list(self.pending.values()):
            self._finish_peer_phase(need)

    def _rotation_due(self) -> None:
        if self.current is not None and not self.current[0].valid_at(self.env.now):
            self.rotate_pseudonym(self.env.now)

    def _refill(self) -> None:
        if self.credentials:
            return
        start = self._last_window_end if self._last_window_end is not None else self.env.now
        self.acquire_pseudonyms(max(start, self.env.now))

    def active_credential(self) -> tuple[PseudonymCertificate, KeyPair] | None:
        now = self.env.now
        if self.current is None or not self.current[0].valid_at(now):
            self.rotate_pseudonym(now)
        return self.current

    def start(self) -> None:
        """Hook called once the world is wired up; honest nodes need nothing."""

    # -- querying thread ------------------------------------------------------

    def satisfactory(self, records, location: Point, poi_type: str) -> bool:
        return len(within(records, location, poi_type, self.params.radius)) >= self.params.min_results

    def need(self, poi_type: str, location: Point | None = None, wanted: int | None = None, timeout: float | None = None) -> Need:
        """Start one information need; the outcome lands on the returned :class:`Need`."""
        now = self.env.now
        location = location if location is not None else self.position
        need = Need(
            f"{self.node_id}#{next(self._need_ids)}",
            poi_type,
            location,
            now,
            wanted=wanted or self.params.wanted_responses,
            timeout=timeout or self.params.timeout,
        )
        self.popularity.observe(poi_type)
        local = self.cache.search(location, poi_type, self.params.radius)
        if self.satisfactory(local, location, poi_type):
            self._finish(need, "local", local)
            return need
        cred = self.active_credential()
        if cred is None:
            self._log("fault", need=need.need_id, reason="no_valid_pseudonym")
            self._query_lbs(need)
            return need
        if self.params.respect_quota and self._sent_under_pc >= self.params.quota:
            self._log("quota_self_limit", need=need.need_id)
            self._query_lbs(need)
            return need
        pc, key = cred
        query_id = self.rng.randbytes(16).hex()
        attach = self.params.attach_pc == "always" or pc.serial not in self._announced
        need.query = PeerQuery.create(query_id, now, location, poi_type, need.wanted, pc, key, attach, self.meter)
        need.pc = pc
        self._announced.add(pc.serial)
        self._sent_under_pc += 1
        self.pending[query_id] = need
        self._send(need.query)
        self.env.schedule_at(now + need.timeout, self._timeout, query_id)
        return need

    def query(self, poi_type: str, location: Point, wanted: int, timeout: float) -> Need:
        return self.need(poi_type, location, wanted, timeout)

    def _send(self, msg: PeerQuery | PeerResponse, dst: str | None = None) -> None:
        kind = "sent_queries" if msg.kind == "query" else "sent_responses"
        self.stats[kind] += 1
        self.env.transmit(self, Frame(self.link, msg, dst))

    def _timeout(self, query_id: str) -> None:
        need = self.pending.get(query_id)
        if need is not None:
            self._finish_peer_phase(need)

    def _collect(self, resp: PeerResponse, frame: Frame) -> None:
        need = self.pending.get(resp.query_id)
        if need is None or need.n >= need.wanted:
            return
        pc = self._check_message(resp)
        if pc is None:
            return
        need.responses.append((resp, pc))
        need.combined = combine(need.combined, resp.records(self.env.now))
        self.stats["accepted_responses"] += 1
        if need.n >= need.wanted:
            self._finish_peer_phase(need)

    def _finish_peer_phase(self, need: Need) -> None:
        self.pending.pop(need.query.query_id, None)
        peers_ok = self.satisfactory(need.combined, need.location, need.poi_type)
        check = self.params.crosscheck == "always" and need.responses
        if self.params.crosscheck == "on_disagreement" and len(need.responses) > 1:
            check = _disagree(need.combined)
        if peers_ok and not check:
            self._finish(need, "peer", need.combined)
        else:
            self._query_lbs(need)

    def _query_lbs(self, need: Need) -> None:
        credential = None
        query = need.query
        mode = self.params.lbs_credential
        if mode == "pseudonym":
            cred = self.active_credential()
            if cred is None:
                self._finish(need, "unsatisfied", [])
                return
            pc, key = cred
            if query is None or query.pc_serial != pc.serial:
                query = PeerQuery.create(
                    self.rng.randbytes(16).hex(), self.env.now, need.location, need.poi_type, self.params.wanted_responses, pc, key, True, self.meter
                )
            credential = pc
        elif mode == "long-term":
            if self.ltc is None or self.long_term_key is None:
                self._finish(need, "unsatisfied", [])
                return
            credential = self.ltc
            qid, now = self.rng.randbytes(16).hex(), self.env.now
            body = PeerQuery.body_for(qid, now, need.location, need.poi_type, need.wanted, self.ltc.serial)
            query = PeerQuery(qid, now, need.location, need.poi_type, need.wanted, self.ltc.serial, sign(body, self.long_term_key, self.meter))
        else:
            query = None
        records = self.env.query_lbs(self, need, query, credential)
        if records is None:
            self._finish(need, "unsatisfied", [])
            return
        if need.responses and self.params.report_misbehavior:
            for report in self.detect_and_report(need, records):
                self.env.submit_report(self, report)
        self._finish(need, "lbs", records)

    def _finish(self, need: Need, outcome: str, records: list[PoiRecord]) -> None:
        need.outcome = outcome
        need.result = list(records)
        need.finished_at = self.env.now
        if outcome in ("lbs", "peer"):
            self.cache.add_all(records)
        self.stats[f"need_{outcome}"] += 1
        self.env.need_finished(self, need)

    # -- misbehavior detection ------------------------------------------------

    def detect_and_report(self, need: Need, lbs_records: list[PoiRecord]) -> list[MisbehaviorReport]:
        """Reports for every peer response that contradicts the LBS answer."""
        cred = self.active_credential()
        if cred is None or need.query is None or need.pc is None:
            return []
        reports = []
        for resp, pc in need.responses:
            if pc.serial in self._reported_pcs:
                continue
            bad = contradicting(resp.records(self.env.now), lbs_records, need.location, need.poi_type, self.params.radius)
            if not bad:
                continue
            self._log("detected", kind="lbs-contradiction", sn_pc=f"{pc.serial:016x}", id_q=resp.query_id)
            reports.append(self._report("lbs-contradiction", [(need.query, need.pc), (resp, pc)], cred))
            self._reported_pcs.add(pc.serial)
        return reports

    def quota_report(self, pc_serial: int) -> MisbehaviorReport | None:
        cred = self.active_credential()
        evidence = self._evidence.get(pc_serial, [])
        if cred is None or pc_serial in self._reported_pcs or len(evidence) <= self.params.quota:
            return None
        self._reported_pcs.add(pc_serial)
        self._log("detected", kind="quota", sn_pc=f"{pc_serial:016x}")
        return self._report("quota", evidence[: self.params.quota + 1], cred)

    def _report(self, kind, evidence, cred) -> MisbehaviorReport:
        pc, key = cred
        self.stats["reports_filed"] += 1
        return MisbehaviorReport.create(kind, evidence, pc, key, self.meter)

    # -- serving thread -------------------------------------------------------

    def receive(self, frame: Frame) -> None:
        msg = frame.message
        if msg.kind == "query":
            self.stats["received_queries"] += 1
            self.popularity.observe(msg.poi_type)
            self.serve(msg, frame)
        elif msg.query_id in self.pending:
            self.stats["received_responses"] += 1
            self._collect(msg, frame)
        else:
            self.stats["overheard"] += 1
            self.overhear(msg)

    def _resolve_pc(self, msg) -> PseudonymCertificate | None:
        now = self.env.now
        pc = msg.attached_pc
        if pc is None:
            pc = self.pc_cache.get(msg.pc_serial, now) if self.params.pseudonym_cache else None
            if pc is None:
                self.stats["unknown_pc_drops"] += 1
                return None
            self.stats["pc_cache_hits"] += 1
        elif pc.serial != msg.pc_serial:
            return None
        elif self.params.pseudonym_cache and self.pc_cache.contains(pc, now):
            self.stats["pc_cache_hits"] += 1
        else:
            self.stats["pc_verifications"] += 1
            if not verify_pc(pc, self.env.pca.public_key, self.meter):
                self.stats["bad_pc_drops"] += 1
                return None
            if self.params.pseudonym_cache:
                self.pc_cache.add(pc)
        if not pc.valid_at(now) or not pc.valid_at(msg.issued_at):
            self.stats["expired_drops"] += 1
            return None
        return pc

    def _fresh(self, msg) -> bool:
        if abs(self.env.now - msg.issued_at) > self.params.freshness_window:
            self.stats["stale_drops"] += 1
            return False
        if (msg.kind, msg.pc_serial, msg.query_id) in self._seen:
            self.stats["replay_drops"] += 1
            return False
        return True

    def _check_message(self, msg) -> PseudonymCertificate | None:
        """Freshness, pseudonym and signature checks shared by every inbound path."""
        if not self._fresh(msg):
            return None
        pc = self._resolve_pc(msg)
        if pc is None:
            return None
        self.stats["msg_verifications"] += 1
        if not verify(msg.signing_bytes(), msg.signature, pc.public_part, self.meter):
            self.stats["bad_sig_drops"] += 1
            return None
        self._seen.add((msg.kind, msg.pc_serial, msg.query_id))
        return pc

    def serve(self, query: PeerQuery, frame: Frame) -> PeerResponse | None:
        if not self._fresh(query):
            self._log("drop", reason="stale_or_replay", id_q=query.query_id)
            return None
        pc = self._resolve_pc(query)
        if pc is None:
            self._log("drop", reason="pseudonym", id_q=query.query_id)
            return None
        if self.quota.exhausted(pc.serial):
            self.stats["quota_drops"] += 1
            self._log("quota_drop", sn_pc=f"{pc.serial:016x}", id_q=query.query_id)
            evidence = self._evidence.setdefault(pc.serial, [])
            if len(evidence) == self.params.quota and all(q.query_id != query.query_id for q, _ in evidence):
                evidence.append((query, pc))
                if self.params.report_misbehavior:
                    report = self.quota_report(pc.serial)
                    if report is not None:
                        self.env.submit_report(self, report)
            return None
        self.stats["msg_verifications"] += 1
        if not verify(query.signing_bytes(), query.signature, pc.public_part, self.meter):
            self.stats["bad_sig_drops"] += 1
            self._log("drop", reason="signature", id_q=query.query_id)
            return None
        self._seen.add((query.kind, query.pc_serial, query.query_id))
        self.quota.accept(pc.serial)
        self.stats["accepted_queries"] += 1
        ev = self._evidence.setdefault(pc.serial, [])
        if len(ev) < self.params.quota:
            ev.append((query, pc))
        self._log_accept(pc, query)
        origins = None if self.params.serve_peer_origin else frozenset({LBS})
        matches = self.cache.search(query.location, query.poi_type, self.params.radius, origins)
        if not matches:
            return None
        return self._schedule_reply(query, frame.src.address, matches)

    def _log_accept(self, pc: PseudonymCertificate, query: PeerQuery) -> None:
        if getattr(self.env, "log_receptions", True):
            self._log("accept", sn_pc=f"{pc.serial:016x}", id_q=query.query_id)

    def _schedule_reply(self, query: PeerQuery, reply_to: str, matches: list[PoiRecord]) -> PeerResponse | None:
        if not self.params.backoff:
            return self._reply(PendingServe(query, reply_to, matches))
        self.serving[query.query_id] = PendingServe(query, reply_to, matches)
        delay = self.rng.uniform(0.0, self.params.backoff_window)
        self.env.schedule_at(self.env.now + delay, self._backoff_over, query.query_id)
        return None

    def _backoff_over(self, query_id: str) -> None:
        pending = self.serving.pop(query_id, None)
        if pending is None:
            return
        if self.overheard[query_id] >= pending.query.wanted_responses:
            self.stats["suppressed_responses"] += 1
            self._log("suppress", id_q=query_id)
            return
        self._reply(pending)

    def _reply(self, pending: PendingServe) -> PeerResponse | None:
        cred = self.active_credential()
        if cred is None:
            return None
        pc, key = cred
        attach = self.params.attach_pc == "always" or pc.serial not in self._announced
        resp = PeerResponse.create(pending.query.query_id, self.env.now, pending.matches, pc, key, attach, self.meter)
        self._announced.add(pc.serial)
        self._send(resp, pending.reply_to)
        return resp

    # -- overhearing ----------------------------------------------------------

    def overhear(self, resp: PeerResponse) -> None:
        counting = resp.query_id in self.serving
        caching = self.params.opportunistic_caching and any(self.popularity.is_popular(t) for _, _, t, _ in resp.results)
        if not (counting or caching):
            return
        if self._check_message(resp) is None:
            return
        if counting:
            self.overheard[resp.query_id] += 1
        if caching:
            for rec in resp.records(self.env.now):
                if self.popularity.is_popular(rec.poi_type):
                    self.cache.add(rec)
                    self.stats["opportunistic_cached"] += 1


def _disagree(records: list[PoiRecord]) -> bool:
    seen: dict = {}
    for r in records:
        if seen.setdefault(r.key, r.payload) != r.payload:
            return True
    return False
