"""Identity and credential facility: LTCA, PCA and RA.

The LTCA registers nodes and hands out identity-free tickets; the PCA trades
tickets for pseudonym certificates; the RA joins the two ledgers only when
presented with evidence of misbehavior. The ledgers are kept structurally
apart: the LTCA never sees a pseudonym serial and the PCA never sees a node
identity.
"""

from __future__ import annotations

import math
import random
from collections import defaultdict
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Iterable, Protocol

from .crypto import CryptoMeter, KeyPair, PublicKey, Scheme, Signature, generate_keypair, sign, verify
from .encoding import canonical


class CredentialError(Exception):
    pass


class DuplicateRegistration(CredentialError):
    pass


class ProofOfPossessionError(CredentialError):
    pass


class InvalidCredential(CredentialError):
    pass


class RevokedNode(CredentialError):
    pass


class TicketReplay(CredentialError):
    pass


class OverlappingTicket(CredentialError):
    def __init__(self, conflicting_serial: int):
        super().__init__(f"overlaps ticket {conflicting_serial:016x}")
        self.conflicting_serial = conflicting_serial


class ResolutionRefused(CredentialError):
    pass


@dataclass(frozen=True)
class IssuancePolicy:
    ticket_duration: float = 600.0
    grid: float = 60.0
    pseudonym_lifetime: float = 600.0
    max_batch: int | None = None

    def __post_init__(self) -> None:
        if self.grid <= 0 or self.ticket_duration <= 0 or self.pseudonym_lifetime <= 0:
            raise ValueError("policy durations must be positive")
        for name in ("ticket_duration", "pseudonym_lifetime"):
            ratio = getattr(self, name) / self.grid
            if abs(ratio - round(ratio)) > 1e-9:
                raise ValueError(f"{name} must be a multiple of the issuance grid")

    def snap(self, t: float) -> float:
        """Smallest grid point at or after ``t``."""
        return math.ceil(t / self.grid - 1e-9) * self.grid

    @property
    def pseudonyms_per_ticket(self) -> int:
        return max(1, int(round(self.ticket_duration / self.pseudonym_lifetime)))


# -- certificates -------------------------------------------------------------


@dataclass(frozen=True)
class CertificateRequest:
    node_id: str
    public_part: PublicKey
    signature: Signature
    others: str = ""

    @staticmethod
    def body_for(node_id: str, public_part: PublicKey, others: str = "") -> bytes:
        return canonical("csr", node_id, public_part.scheme.value, public_part.data, others)

    def body(self) -> bytes:
        return self.body_for(self.node_id, self.public_part, self.others)

    @classmethod
    def create(cls, node_id: str, key: KeyPair, meter: CryptoMeter | None = None, others: str = "") -> CertificateRequest:
        sig = sign(cls.body_for(node_id, key.public_part, others), key, meter)
        return cls(node_id, key.public_part, sig, others)


@dataclass(frozen=True)
class LongTermCertificate:
    serial: int
    node_id: str
    public_part: PublicKey
    issuer_signature: Signature

    @staticmethod
    def body_for(serial: int, node_id: str, public_part: PublicKey) -> bytes:
        return canonical("ltc", serial, node_id, public_part.scheme.value, public_part.data)

    def body(self) -> bytes:
        return self.body_for(self.serial, self.node_id, self.public_part)


def ticket_request_body(ltc: LongTermCertificate, t_start: float) -> bytes:
    return canonical("ticket_req", ltc.serial, float(t_start))


@dataclass(frozen=True)
class Ticket:
    serial: int
    valid_from: float
    valid_to: float
    issuer_signature: Signature

    @staticmethod
    def body_for(serial: int, valid_from: float, valid_to: float) -> bytes:
        return canonical("ticket", serial, float(valid_from), float(valid_to))

    def body(self) -> bytes:
        return self.body_for(self.serial, self.valid_from, self.valid_to)


@dataclass(frozen=True)
class SignedShortTermKey:
    public_part: PublicKey
    signature: Signature

    @staticmethod
    def body_for(pk: PublicKey) -> bytes:
        return canonical("sk", pk.scheme.value, pk.data)

    @classmethod
    def create(cls, key: KeyPair, meter: CryptoMeter | None = None) -> SignedShortTermKey:
        return cls(key.public_part, sign(cls.body_for(key.public_part), key, meter))


@dataclass(frozen=True)
class PseudonymCertificate:
    serial: int
    public_part: PublicKey
    valid_from: float
    valid_to: float
    issuer_signature: Signature

    @staticmethod
    def body_for(serial: int, pk: PublicKey, valid_from: float, valid_to: float) -> bytes:
        return canonical("pc", serial, pk.scheme.value, pk.data, float(valid_from), float(valid_to))

    def body(self) -> bytes:
        return self.body_for(self.serial, self.public_part, self.valid_from, self.valid_to)

    @cached_property
    def identity(self) -> bytes:
        """Everything a receiver must match before trusting a cached copy."""
        return self.body() + self.issuer_signature.value

    def valid_at(self, t: float) -> bool:
        return self.valid_from <= t < self.valid_to


def verify_pc(pc: PseudonymCertificate, pca_public: PublicKey, meter: CryptoMeter | None = None) -> bool:
    return verify(pc.body(), pc.issuer_signature, pca_public, meter)


# -- authority ledgers --------------------------------------------------------


@dataclass(frozen=True)
class TicketRecord:
    serial: int
    valid_from: float
    valid_to: float


@dataclass
class LtcaRecords:
    certificates: dict[str, int] = field(default_factory=dict)
    tickets: dict[str, list[TicketRecord]] = field(default_factory=lambda: defaultdict(list))
    revoked: set[str] = field(default_factory=set)

    def dumps(self) -> str:
        """Tab-separated snapshot, one record per line.

        ``ltc <node_id> <sn_ltc>``, ``ticket <node_id> <sn_ticket> <from> <to>``,
        ``revoked <node_id>``. Serials are 16-digit hex.
        """
        lines = [f"ltc\t{nid}\t{sn:016x}" for nid, sn in sorted(self.certificates.items())]
        for nid in sorted(self.tickets):
            for rec in self.tickets[nid]:
                lines.append(f"ticket\t{nid}\t{rec.serial:016x}\t{rec.valid_from:g}\t{rec.valid_to:g}")
        lines.extend(f"revoked\t{nid}" for nid in sorted(self.revoked))
        return "".join(line + "\n" for line in lines)


@dataclass
class PcaRecords:
    pc_to_ticket: dict[int, int] = field(default_factory=dict)
    consumed_tickets: set[int] = field(default_factory=set)

    def dumps(self) -> str:
        """Tab-separated snapshot: ``<sn_pc> <sn_ticket>`` per line, hex serials."""
        return "".join(f"{pc:016x}\t{tk:016x}\n" for pc, tk in sorted(self.pc_to_ticket.items()))


def _fresh_serial(rng: random.Random, used: set[int]) -> int:
    while True:
        sn = rng.getrandbits(64)
        if sn and sn not in used:
            used.add(sn)
            return sn


IssueHook = Callable[[str, dict], None]


class LTCA:
    def __init__(
        self,
        policy: IssuancePolicy | None = None,
        rng: random.Random | None = None,
        scheme: Scheme = Scheme.RSA_2048,
        meter: CryptoMeter | None = None,
        on_event: IssueHook | None = None,
    ):
        self.policy = policy or IssuancePolicy()
        self.rng = rng or random.Random()
        self.meter = meter
        self.key = generate_keypair(scheme, self.rng, meter)
        self.records = LtcaRecords()
        self._ticket_owner: dict[int, str] = {}
        self._serials: set[int] = set()
        self._on_event = on_event

    @property
    def public_key(self) -> PublicKey:
        return self.key.public_part

    def _emit(self, kind: str, details: dict) -> None:
        if self._on_event is not None:
            self._on_event(kind, details)

    def register(self, node_id: str, csr: CertificateRequest) -> LongTermCertificate:
        if node_id in self.records.certificates:
            raise DuplicateRegistration(node_id)
        if csr.node_id != node_id or not verify(csr.body(), csr.signature, csr.public_part, self.meter):
            raise ProofOfPossessionError(node_id)
        serial = _fresh_serial(self.rng, self._serials)
        sig = sign(LongTermCertificate.body_for(serial, node_id, csr.public_part), self.key, self.meter)
        self.records.certificates[node_id] = serial
        self._emit("registered", {"node": node_id, "sn_ltc": f"{serial:016x}"})
        return LongTermCertificate(serial, node_id, csr.public_part, sig)

    def request_ticket(self, ltc: LongTermCertificate, t_start_desired: float, signature: Signature) -> Ticket:
        if self.records.certificates.get(ltc.node_id) != ltc.serial or not verify(
            ltc.body(), ltc.issuer_signature, self.public_key, self.meter
        ):
            raise InvalidCredential("long-term certificate not issued by this LTCA")
        if not verify(ticket_request_body(ltc, t_start_desired), signature, ltc.public_part, self.meter):
            raise InvalidCredential("ticket request signature does not verify")
        if ltc.node_id in self.records.revoked:
            self._emit("ticket_denied", {"node": ltc.node_id, "reason": "revoked"})
            raise RevokedNode(ltc.node_id)
        start = self.policy.snap(t_start_desired)
        end = start + self.policy.ticket_duration
        for rec in self.records.tickets[ltc.node_id]:
            if rec.valid_from < end and start < rec.valid_to:
                self._emit("ticket_denied", {"node": ltc.node_id, "reason": "overlap"})
                raise OverlappingTicket(rec.serial)
        serial = _fresh_serial(self.rng, self._serials)
        sig = sign(Ticket.body_for(serial, start, end), self.key, self.meter)
        self.records.tickets[ltc.node_id].append(TicketRecord(serial, start, end))
        self._ticket_owner[serial] = ltc.node_id
        self._emit(
            "ticket_issued",
            {"node": ltc.node_id, "sn_ticket": f"{serial:016x}", "from": f"{start:g}", "to": f"{end:g}"},
        )
        return Ticket(serial, start, end, sig)

    def owner_of_ticket(self, sn_ticket: int) -> str | None:
        return self._ticket_owner.get(sn_ticket)

    def revoke(self, node_id: str) -> None:
        if node_id not in self.records.revoked:
            self.records.revoked.add(node_id)
            self._emit("revoked", {"node": node_id})

    def is_revoked(self, node_id: str) -> bool:
        return node_id in self.records.revoked


class PCA:
    def __init__(
        self,
        ltca_public: PublicKey,
        policy: IssuancePolicy | None = None,
        rng: random.Random | None = None,
        scheme: Scheme = Scheme.RSA_2048,
        meter: CryptoMeter | None = None,
        on_event: IssueHook | None = None,
    ):
        self.ltca_public = ltca_public
        self.policy = policy or IssuancePolicy()
        self.rng = rng or random.Random()
        self.meter = meter
        self.key = generate_keypair(scheme, self.rng, meter)
        self.records = PcaRecords()
        self._serials: set[int] = set()
        self._on_event = on_event

    @property
    def public_key(self) -> PublicKey:
        return self.key.public_part

    def windows_for(self, ticket: Ticket, count: int) -> list[tuple[float, float]]:
        if count == 1:
            return [(ticket.valid_from, ticket.valid_to)]
        tau = self.policy.pseudonym_lifetime
        if ticket.valid_from + count * tau > ticket.valid_to + 1e-9:
            raise CredentialError(f"{count} pseudonyms of lifetime {tau:g} do not fit the ticket window")
        return [(ticket.valid_from + i * tau, ticket.valid_from + (i + 1) * tau) for i in range(count)]

    def issue_pseudonyms(self, ticket: Ticket, keys: list[SignedShortTermKey]) -> list[PseudonymCertificate]:
        if not keys:
            raise CredentialError("no short-term keys submitted")
        if self.policy.max_batch is not None and len(keys) > self.policy.max_batch:
            raise CredentialError(f"batch of {len(keys)} exceeds limit {self.policy.max_batch}")
        if not verify(ticket.body(), ticket.issuer_signature, self.ltca_public, self.meter):
            raise InvalidCredential("ticket signature does not verify")
        if ticket.serial in self.records.consumed_tickets:
            raise TicketReplay(f"ticket {ticket.serial:016x} already used")
        for k in keys:
            if not verify(SignedShortTermKey.body_for(k.public_part), k.signature, k.public_part, self.meter):
                raise ProofOfPossessionError("short-term key self-signature does not verify")
        windows = self.windows_for(ticket, len(keys))
        self.records.consumed_tickets.add(ticket.serial)
        issued = []
        for k, (start, end) in zip(keys, windows):
            serial = _fresh_serial(self.rng, self._serials)
            sig = sign(PseudonymCertificate.body_for(serial, k.public_part, start, end), self.key, self.meter)
            self.records.pc_to_ticket[serial] = ticket.serial
            issued.append(PseudonymCertificate(serial, k.public_part, start, end, sig))
            if self._on_event is not None:
                self._on_event(
                    "pc_issued",
                    {"sn_pc": f"{serial:016x}", "sn_ticket": f"{ticket.serial:016x}", "from": f"{start:g}", "to": f"{end:g}"},
                )
        return issued

    def ticket_of(self, sn_pc: int) -> int | None:
        return self.records.pc_to_ticket.get(sn_pc)


# -- misbehavior reports and resolution ---------------------------------------


class SignedMessage(Protocol):
    signature: Signature
    issued_at: float

    def signing_bytes(self) -> bytes: ...


@dataclass(frozen=True)
class MisbehaviorReport:
    """Evidence bundle sent to the RA.

    ``kind`` names the evidence type (``lbs-contradiction``, ``equivocation``
    or ``quota``). The reporter's own signed messages, such as the query a
    bogus response answered, may appear in ``evidence`` under
    ``reporter_pc``; every other pseudonym in the evidence is the accused.
    """

    kind: str
    evidence: tuple[tuple[SignedMessage, PseudonymCertificate], ...]
    reporter_pc: PseudonymCertificate
    reporter_signature: Signature

    @staticmethod
    def body_for(kind: str, evidence: Iterable[tuple[SignedMessage, PseudonymCertificate]], reporter_pc: PseudonymCertificate) -> bytes:
        parts: list[object] = ["report", kind]
        for msg, pc in evidence:
            parts += [msg.signing_bytes(), msg.signature.value, pc.identity]
        parts.append(reporter_pc.identity)
        return canonical(*parts)

    def body(self) -> bytes:
        return self.body_for(self.kind, self.evidence, self.reporter_pc)

    @classmethod
    def create(
        cls,
        kind: str,
        evidence: list[tuple[SignedMessage, PseudonymCertificate]],
        reporter_pc: PseudonymCertificate,
        reporter_key: KeyPair,
        meter: CryptoMeter | None = None,
    ) -> MisbehaviorReport:
        sig = sign(cls.body_for(kind, evidence, reporter_pc), reporter_key, meter)
        return cls(kind, tuple(evidence), reporter_pc, sig)

    def accused(self) -> set[int]:
        return {pc.serial for _, pc in self.evidence if pc.serial != self.reporter_pc.serial}


Judge = Callable[[MisbehaviorReport], bool]


class RA:
    """Resolution authority.

    ``judge`` decides whether verified evidence really shows misbehavior; see
    :class:`peerlbs.adversary.EvidenceJudge` for the default.
    """

    def __init__(
        self,
        ltca: LTCA,
        pca: PCA,
        judge: Judge,
        revoke: bool = True,
        meter: CryptoMeter | None = None,
        on_event: IssueHook | None = None,
    ):
        self.ltca = ltca
        self.pca = pca
        self.judge = judge
        self.revoke = revoke
        self.meter = meter
        self.resolved: list[tuple[int, str]] = []
        self._on_event = on_event

    def _emit(self, kind: str, details: dict) -> None:
        if self._on_event is not None:
            self._on_event(kind, details)

    def _verified(self, report: MisbehaviorReport) -> bool:
        pca_pk = self.pca.public_key
        if not verify_pc(report.reporter_pc, pca_pk, self.meter):
            return False
        if not verify(report.body(), report.reporter_signature, report.reporter_pc.public_part, self.meter):
            return False
        for msg, pc in report.evidence:
            if not verify_pc(pc, pca_pk, self.meter):
                return False
            if not verify(msg.signing_bytes(), msg.signature, pc.public_part, self.meter):
                return False
            if not pc.valid_at(msg.issued_at):
                return False
        return True

    def resolve(self, report: MisbehaviorReport) -> str:
        if not self._verified(report):
            self._emit("refused", {"kind": report.kind, "reason": "evidence does not verify"})
            raise ResolutionRefused("evidence does not verify")
        accused = report.accused()
        if len(accused) != 1:
            self._emit("refused", {"kind": report.kind, "reason": "no single accused pseudonym"})
            raise ResolutionRefused("report must accuse exactly one pseudonym")
        if not self.judge(report):
            self._emit("refused", {"kind": report.kind, "reason": "judge rejected evidence"})
            raise ResolutionRefused("evidence does not show misbehavior")
        (sn_pc,) = accused
        sn_ticket = self.pca.ticket_of(sn_pc)
        node_id = self.ltca.owner_of_ticket(sn_ticket) if sn_ticket is not None else None
        if node_id is None:
            self._emit("refused", {"kind": report.kind, "reason": "unknown pseudonym"})
            raise ResolutionRefused(f"unknown pseudonym {sn_pc:016x}")
        self.resolved.append((sn_pc, node_id))
        self._emit("resolved", {"kind": report.kind, "sn_pc": f"{sn_pc:016x}", "node": node_id})
        if self.revoke:
            self.ltca.revoke(node_id)
        return node_id


# -- what each authority can compute on its own -------------------------------


@dataclass(frozen=True)
class KnowledgeView:
    """Mapping an authority, or a coalition, can compute from its own records.

    Lookups return ``None`` for "unknown".
    """

    holders: frozenset[str]
    node_tickets: dict[str, tuple[int, ...]] | None
    pc_tickets: dict[int, int] | None

    def node_for_pc(self, sn_pc: int) -> str | None:
        if self.node_tickets is None or self.pc_tickets is None:
            return None
        ticket = self.pc_tickets.get(sn_pc)
        for node_id, tickets in self.node_tickets.items():
            if ticket in tickets:
                return node_id
        return None

    def pcs_for_node(self, node_id: str) -> tuple[int, ...] | None:
        if self.node_tickets is None or self.pc_tickets is None:
            return None
        tickets = set(self.node_tickets.get(node_id, ()))
        return tuple(sorted(pc for pc, tk in self.pc_tickets.items() if tk in tickets))

    def tickets_for_node(self, node_id: str) -> tuple[int, ...] | None:
        if self.node_tickets is None:
            return None
        return self.node_tickets.get(node_id, ())

    def ticket_for_pc(self, sn_pc: int) -> int | None:
        if self.pc_tickets is None:
            return None
        return self.pc_tickets.get(sn_pc)


def authority_view(which: str, ltca: LTCA, pca: PCA) -> KnowledgeView:
    holders = frozenset(part.strip().upper() for part in which.split("+"))
    if not holders or not holders <= {"LTCA", "PCA"}:
        raise ValueError(f"unknown authority set {which!r}")
    node_tickets = None
    pc_tickets = None
    if "LTCA" in holders:
        node_tickets = {nid: tuple(r.serial for r in recs) for nid, recs in ltca.records.tickets.items()}
    if "PCA" in holders:
        pc_tickets = dict(pca.records.pc_to_ticket)
    return KnowledgeView(holders, node_tickets, pc_tickets)
