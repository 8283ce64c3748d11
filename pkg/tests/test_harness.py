from __future__ import annotations

import base64
import json
import math
import random
import subprocess
import sys
from pathlib import Path

import pytest
import yaml
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import Issuer, events
from oracles_wire import query_layout_bytes
from peerlbs.harness import (
    ConfigError,
    MetricsRecord,
    ScenarioConfig,
    World,
    capacity_report,
    format_event,
    from_dict,
    load_config,
    parse_event,
    privacy_report,
    run_scenario,
    sample_query,
)
from peerlbs.harness.cli import main
from peerlbs.node import PeerQuery

ROOT = Path(__file__).resolve().parent.parent
SCENARIOS = ROOT / "scenarios"
FIXTURE = ROOT / "tests" / "fixtures" / "peer_query_rsa1024.json"


# -- config ----------------------------------------------------------------------------------------


def test_defaults_validate():
    cfg = ScenarioConfig().validate()
    assert cfg.node.N == 3 and cfg.policy.quota == 10 and cfg.radio.range_m == 100


@pytest.mark.parametrize(
    "data,key",
    [
        ({"nodee": {}}, "nodee"),
        ({"node": {"NN": 3}}, "node.NN"),
        ({"policy": {"quota": "ten"}}, "policy.quota"),
        ({"radio": {"p_loss": 2}}, "radio.p_loss"),
        ({"workload": {"rate_per_min": 0}}, "workload.rate_per_min"),
        ({"policy": {"pseudonym_lifetime": 250}}, "policy.pseudonym_lifetime"),
        ({"crypto": {"node_scheme": "model-DSA"}}, "crypto.node_scheme"),
        ({"adversaries": [{"kind": "jammer"}]}, "adversaries[0].kind"),
        ({"area": {"nodes": 3}, "adversaries": [{"kind": "clogger", "nodes": [5]}]}, "adversaries[0].nodes"),
    ],
)
def test_invalid_config_names_key(data, key):
    with pytest.raises(ConfigError) as exc:
        from_dict(data)
    assert f"'{key}" in str(exc.value)


def test_replace_and_round_trip(tmp_path):
    cfg = load_config(SCENARIOS / "honest.yaml")
    again = from_dict(cfg.to_dict())
    assert again == cfg
    assert cfg.replace(**{"policy.quota": 4}).policy.quota == 4
    with pytest.raises(ConfigError):
        cfg.replace(**{"policy.qouta": 4})
    path = tmp_path / "c.json"
    path.write_text(json.dumps(cfg.to_dict()))
    assert load_config(path) == cfg


def test_shipped_scenarios_load():
    for path in sorted(SCENARIOS.glob("*.yaml")):
        assert load_config(path).name == path.stem


# -- event log ------------------------------------------------------------------------------------


@settings(max_examples=100)
@given(
    t=st.floats(0, 1e6, allow_nan=False),
    entity=st.from_regex(r"[a-z][a-z0-9-]{0,10}", fullmatch=True),
    details=st.dictionaries(st.from_regex(r"[a-z_]{1,8}", fullmatch=True), st.one_of(st.integers(), st.text(max_size=12))),
)
def test_event_lines_parse_back(t, entity, details):
    line = format_event(t, entity, "kind", details)
    assert "\n" not in line
    pt, pe, pk, pd = parse_event(line)
    assert (pe, pk) == (entity, "kind") and abs(pt - t) < 1e-6
    assert set(pd) == set(details)
    for k, v in details.items():
        if isinstance(v, int):
            assert pd[k] == str(v)


# -- metrics ------------------------------------------------------------------------------------


def test_metrics_identities():
    m = MetricsRecord(needs_total=4, served_peer=1, served_lbs=2, served_local=1).finalize([1.0, 2.0, 3.0, 4.0])
    assert m.conservation_holds() and m.lbs_exposure_ratio == 0.5 and m.peer_served_ratio == 0.25
    assert m.latency_mean == 2.5 and m.latency_p95 == 4.0
    bad = MetricsRecord(needs_total=3, served_peer=1)
    assert "metrics_conservation" in bad.consistency_problems()
    assert "received_exceeds_delivered" in MetricsRecord(queries_received=2, deliveries=1).consistency_problems()
    assert json.loads(m.dumps())["needs_total"] == 4


def test_empty_caches_mean_full_exposure():
    cfg = from_dict({"area": {"width": 300, "height": 300, "nodes": 10}, "duration": 600, "node": {"cache_capacity": 0}})
    m, _ = run_scenario(cfg)
    assert m.needs_total > 0
    assert m.lbs_exposure_ratio == 1.0 and m.served_lbs == m.lbs_requests


def test_single_warm_node_never_broadcasts():
    cfg = from_dict(
        {
            "area": {"width": 100, "height": 100, "positions": [[50, 50]]},
            "duration": 1200,
            "workload": {"rate_per_min": 2, "warm_cache": True},
            "lbs": {"poi_per_km2": 400},
        }
    )
    m, log = run_scenario(cfg)
    assert m.needs_total > 0 and m.lbs_exposure_ratio == 0.0 and m.served_local == m.needs_total
    assert m.frames_sent == 0 and not [line for line in log if "|send|" in line]


@pytest.mark.parametrize("name", ["honest", "clogger", "sybil", "bogus", "replayer"])
def test_scenarios_keep_invariants(name):
    m, log = run_scenario(load_config(SCENARIOS / f"{name}.yaml"))
    assert m.violations == []
    assert m.conservation_holds()
    assert 0 <= m.lbs_exposure_ratio <= 1 and 0 <= m.peer_served_ratio <= 1
    assert m.frames_sent >= m.queries_sent and m.deliveries >= m.queries_accepted
    assert log[-1].split("|")[1:3] == ["world", "end"]


def test_every_lbs_contact_logged_once():
    world = World(load_config(SCENARIOS / "honest.yaml"))
    m = world.run()
    assert len(events(world, "lbs_query")) == len(world.lbs.log) == m.lbs_requests
    assert m.served_lbs <= m.lbs_requests


def test_violation_yields_nonzero_exit(tmp_path, monkeypatch, capsys):
    from peerlbs.node.node import QuotaLedger

    # A receiver whose ledger lets everything through breaks the quota invariant.
    monkeypatch.setattr(QuotaLedger, "exhausted", lambda self, sn: False)
    assert main(["run", str(SCENARIOS / "clogger.yaml"), "--out", str(tmp_path)]) == 1
    assert "invariant violated: quota" in capsys.readouterr().err
    assert any("|world|violation|name=quota" in line for line in (tmp_path / "events.log").read_text().splitlines())


# -- capacity and wire size -----------------------------------------------------------------------------


def test_capacity_figures():
    r = capacity_report(ScenarioConfig())
    assert r["verify_cached_ms"] == 0.78 and r["verify_cached_per_s"] > 1000
    assert r["verify_uncached_ms"] == pytest.approx(0.78 + 1.21) and r["verify_uncached_ms"] < 3
    assert r["verify_uncached_per_s"] > 300
    assert abs(r["response_generation_ms"] - 7.0) <= 1.0
    assert r["response_generation_ms"] == pytest.approx(1.12 + 0.02 * 50 + 0.05 * 5 + 4.63)


def test_zero_cost_profile_not_crypto_bound():
    zero = {"keygen_ms": 0, "sign_ms": 0, "verify_ms": 0, "signature_size_bytes": 128}
    cfg = from_dict({"crypto": {"profiles": {"model-RSA-1024": zero, "model-RSA-2048": dict(zero, signature_size_bytes=256)}}})
    r = capacity_report(cfg)
    assert r["verify_cached_per_s"] == "not crypto-bound"
    assert r["verify_uncached_per_s"] == "not crypto-bound"


def test_expected_received_rate_arithmetic():
    cfg = load_config(SCENARIOS / "density.yaml")
    r = capacity_report(cfg)
    assert r["expected_received_per_s"] == pytest.approx(3000 * math.pi * 0.1**2 / 60)


def test_query_wire_size_matches_layout_and_fixture():
    q = sample_query()
    wire = q.encode()
    assert q.payload() == b"1234.5,678.9,restaurant,3" and len(q.payload()) == 25
    assert len(wire) == query_layout_bytes("1234.5,678.9,restaurant,3") == 980
    assert wire == FIXTURE.read_bytes()
    obj = json.loads(wire)
    assert len(base64.b64decode(obj["sig"])) == 128
    assert len(base64.b64decode(obj["pc"]["sk"])) == 162
    assert len(base64.b64decode(obj["pc"]["sig"])) == 256
    assert capacity_report(ScenarioConfig())["query_wire_bytes"] == 980


@settings(max_examples=40, deadline=None)
@given(
    x=st.floats(0, 99999, allow_nan=False),
    y=st.floats(0, 99999, allow_nan=False),
    poi=st.from_regex(r"[a-z]{1,20}", fullmatch=True),
    n=st.integers(1, 9),
    t=st.floats(0, 86000, allow_nan=False),
)
def test_query_size_depends_only_on_payload(x, y, poi, n, t):
    iss = Issuer(seed=1)
    iss.register("a")
    ((pc, key),) = iss.pseudonyms("a", 0)
    q = PeerQuery.create(random.Random(0).randbytes(16).hex(), t, (x, y), poi, n, pc, key)
    assert len(q.encode()) == query_layout_bytes(q.payload().decode())
    bare = PeerQuery.create("0" * 32, t, (x, y), poi, n, pc, key, attach=False)
    assert json.loads(bare.encode())["sn_pc"] == f"{pc.serial:016x}"


# -- privacy report --------------------------------------------------------------------------------


def _send(t, node, sn, addr, ip):
    return format_event(t, node, "send", {"kind": "query", "id_q": f"q{t}", "sn_pc": sn, "addr": addr, "ip": ip, "pc": 1, "dst": "*"})


def test_privacy_report_on_synthetic_log():
    lines = [
        format_event(0, "LTCA", "ticket_issued", {"node": "a", "sn_ticket": "t1", "from": "0", "to": "600"}),
        format_event(0, "PCA", "pc_issued", {"sn_pc": "p1", "sn_ticket": "t1", "from": "0", "to": "600"}),
        format_event(0, "LTCA", "ticket_issued", {"node": "b", "sn_ticket": "t2", "from": "0", "to": "600"}),
        format_event(0, "PCA", "pc_issued", {"sn_pc": "p2", "sn_ticket": "t2", "from": "0", "to": "600"}),
        _send(10, "a", "p1", "m1", "i1"),
        _send(20, "a", "p1", "m1", "i1"),
        _send(30, "b", "p2", "m2", "i2"),
        format_event(30, "a", "lbs_query", {"cred": "pc:p1", "need": "a#0", "results": 1}),
        format_event(40, "a", "lbs_query", {"cred": "pc:p1", "need": "a#1", "results": 1}),
        format_event(50, "b", "lbs_query", {"cred": "anonymous", "need": "b#0", "results": 1}),
    ]
    r = privacy_report(lines)
    e = r["eavesdropper"]
    assert (e["groups"], e["max_linkable"], e["max_linkable_span_s"]) == (2, 2, 10.0)
    assert e["identifiers_spanning_rotation"] == [] and e["groups_spanning_nodes"] == 0
    assert r["authorities"]["LTCA"]["mapped"] == 0 and r["authorities"]["PCA"]["mapped"] == 0
    assert r["authorities"]["LTCA+PCA"] == {"messages": 3, "mapped": 3, "correct": 3}
    assert r["lbs"] == {"requests": 3, "groups": 2, "max_linkable_per_node": 2, "anonymous_pool": 1}


def test_privacy_report_flags_reused_address():
    lines = [_send(10, "a", "p1", "m1", "i1"), _send(700, "a", "p3", "m1", "i9")]
    r = privacy_report(lines)
    assert r["eavesdropper"]["identifiers_spanning_rotation"] == ["mac:m1"]
    assert r["eavesdropper"]["groups_spanning_rotation"] == 1


def test_lbs_linkage_bounded_by_queries_per_lifetime():
    world = World(load_config(SCENARIOS / "honest.yaml").replace(**{"node.cache_capacity": 0}))
    world.run()
    tau = world.config.policy.pseudonym_lifetime
    r = privacy_report(world.events)
    per_window: dict = {}
    for t, who, _, d in events(world, "lbs_query"):
        key = (who, d["cred"])
        per_window[key] = per_window.get(key, 0) + 1
    assert r["lbs"]["max_linkable_per_node"] == max(per_window.values())
    # Each credential lives one lifetime, so no group can exceed a node's requests within it.
    for (who, cred), count in per_window.items():
        times = [t for t, w, _, d in events(world, "lbs_query") if w == who and d["cred"] == cred]
        assert max(times) - min(times) < tau


# -- CLI -----------------------------------------------------------------------------------------------


def test_cli_bench_prints_table(capsys):
    assert main(["bench"]) == 0
    rows = [line.split("\t") for line in capsys.readouterr().out.splitlines()]
    assert rows[0][0] == "scheme"
    assert ["model-RSA-1024", "400.86", "4.63", "0.78", "128"] in rows
    assert ["model-ECDSA-224", "251.66", "251.91", "345.95", "63"] in rows


def test_cli_capacity(capsys):
    assert main(["capacity", str(SCENARIOS / "density.yaml")]) == 0
    out = dict(line.split("\t", 1) for line in capsys.readouterr().out.splitlines())
    assert out["query_wire_bytes"] == "980" and float(out["verify_uncached_ms"]) < 3


def test_cli_run_and_privacy(tmp_path, capsys):
    assert main(["run", str(SCENARIOS / "honest.yaml"), "--out", str(tmp_path), "--seed", "4"]) == 0
    metrics = json.loads((tmp_path / "metrics.json").read_text())
    assert metrics["violations"] == [] and metrics["needs_total"] > 0
    capsys.readouterr()
    assert main(["privacy", str(tmp_path / "events.log")]) == 0
    report = json.loads(capsys.readouterr().out)
    assert report["eavesdropper"]["identifiers_spanning_rotation"] == []


def test_cli_config_error_exit_code(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text(yaml.safe_dump({"node": {"timout": 3}}))
    assert main(["run", str(bad)]) == 2
    assert "node.timout" in capsys.readouterr().err


def test_seed_override_changes_run():
    cfg = load_config(SCENARIOS / "honest.yaml")
    a = run_scenario(cfg, seed=1)[1]
    b = run_scenario(cfg, seed=2)[1]
    assert a != b


def test_identical_logs_across_processes(tmp_path):
    outs = []
    for k, hashseed in enumerate(("0", "12345")):
        out = tmp_path / f"run{k}"
        env = {"PYTHONHASHSEED": hashseed, "PATH": "/usr/bin:/bin"}
        subprocess.run(
            [sys.executable, "-m", "peerlbs.harness.cli", "run", str(SCENARIOS / "sybil.yaml"), "--out", str(out)],
            check=True,
            env={**__import__("os").environ, **env},
            capture_output=True,
        )
        outs.append((out / "events.log").read_bytes())
    assert outs[0] == outs[1] and outs[0]
