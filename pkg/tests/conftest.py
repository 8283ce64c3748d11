from __future__ import annotations

import random
import tempfile
from pathlib import Path

import pytest

from peerlbs.credentials import LTCA, PCA, CertificateRequest, IssuancePolicy, SignedShortTermKey, ticket_request_body
from peerlbs.crypto import Scheme, generate_keypair, sign
from peerlbs.harness import World, from_dict, parse_event


def make_world(positions, seed: int = 1, pois=None, **sections) -> World:
    """A wired world with nodes registered and holding pseudonyms, no workload.

    ``pois`` is an optional list of ``(x, y, type, payload)`` ground-truth
    records; keyword sections are merged into the scenario mapping.
    """
    xs = [p[0] for p in positions] + [1.0]
    ys = [p[1] for p in positions] + [1.0]
    data = {
        "seed": seed,
        "duration": 3600,
        "area": {"width": max(xs) + 10, "height": max(ys) + 10, "positions": [list(p) for p in positions]},
    }
    for key, value in sections.items():
        data[key] = value
    if pois is not None:
        path = Path(tempfile.mkdtemp()) / "poi.tsv"
        path.write_text("# peerlbs-poi v1\n" + "".join(f"{x}\t{y}\t{t}\t{p}\n" for x, y, t, p in pois))
        data.setdefault("lbs", {})["poi_file"] = str(path)
    world = World(from_dict(data))
    world.setup()
    return world


def events(world: World, kind: str | None = None, entity: str | None = None):
    out = []
    for line in world.events:
        t, who, k, d = parse_event(line)
        if (kind is None or k == kind) and (entity is None or who == entity):
            out.append((t, who, k, d))
    return out


class Issuer:
    """LTCA + PCA pair with helpers for issuing credentials in tests."""

    def __init__(self, seed: int = 0, policy: IssuancePolicy | None = None, scheme: Scheme = Scheme.RSA_1024):
        self.rng = random.Random(seed)
        self.policy = policy or IssuancePolicy()
        self.ltca = LTCA(self.policy, self.rng)
        self.pca = PCA(self.ltca.public_key, self.policy, self.rng)
        self.scheme = scheme
        self.keys = {}
        self.ltcs = {}

    def register(self, node_id: str):
        key = generate_keypair(self.scheme, self.rng)
        self.keys[node_id] = key
        self.ltcs[node_id] = self.ltca.register(node_id, CertificateRequest.create(node_id, key))
        return self.ltcs[node_id]

    def ticket(self, node_id: str, t: float):
        ltc = self.ltcs[node_id]
        return self.ltca.request_ticket(ltc, t, sign(ticket_request_body(ltc, t), self.keys[node_id]))

    def pseudonyms(self, node_id: str, t: float, count: int = 1):
        ticket = self.ticket(node_id, t)
        sks = [generate_keypair(self.scheme, self.rng) for _ in range(count)]
        pcs = self.pca.issue_pseudonyms(ticket, [SignedShortTermKey.create(k) for k in sks])
        return list(zip(pcs, sks))


@pytest.fixture
def issuer() -> Issuer:
    return Issuer()


# -- acceptance verdicts ---------------------------------------------------------

VERDICTS: dict[int, str] = {}


def record_verdict(number: int, title: str, ok: bool, detail: str) -> str:
    line = f"criterion {number} {'PASS' if ok else 'FAIL'}: {title} ({detail})"
    VERDICTS[number] = line
    print(line)
    return line


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(VERDICTS):
            terminalreporter.write_line(VERDICTS[n])
