"""Command-line entry point: ``peerlbs run|capacity|privacy|bench``."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from ..crypto import HANDSET_PROFILES
from .config import ConfigError, load_config
from .reports import capacity_report, privacy_report
from .scenario import run_scenario


def _bench(_args) -> int:
    print("scheme\tkeygen_ms\tsign_ms\tverify_ms\tsignature_bytes")
    for scheme, p in HANDSET_PROFILES.items():
        print(f"{scheme.value}\t{p.keygen_ms:.2f}\t{p.sign_ms:.2f}\t{p.verify_ms:.2f}\t{p.signature_size_bytes}")
    return 0


def _run(args) -> int:
    config = load_config(args.config)
    metrics, events = run_scenario(config, seed=args.seed, out=args.out)
    print(metrics.dumps(), end="")
    if args.out:
        print(f"wrote {Path(args.out) / 'metrics.json'} and {Path(args.out) / 'events.log'}", file=sys.stderr)
    for name in metrics.violations:
        print(f"invariant violated: {name}", file=sys.stderr)
    return 1 if metrics.violations else 0


def _capacity(args) -> int:
    report = capacity_report(load_config(args.config), args.records, args.matches)
    for key, value in report.items():
        print(f"{key}\t{value:.4g}" if isinstance(value, float) else f"{key}\t{value}")
    return 0


def _privacy(args) -> int:
    with open(args.events, encoding="utf-8") as fh:
        report = privacy_report(fh)
    print(json.dumps(report, indent=2, sort_keys=True))
    return 1 if report["eavesdropper"]["identifiers_spanning_rotation"] else 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="peerlbs", description="Pseudonymous peer-assisted LBS simulator.")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a scenario")
    run.add_argument("config", help="scenario file (YAML or JSON)")
    run.add_argument("--seed", type=int, default=None, help="override the scenario seed")
    run.add_argument("--out", default=None, help="directory for metrics.json and events.log")
    run.set_defaults(func=_run)

    cap = sub.add_parser("capacity", help="analytic verification and response-generation capacity")
    cap.add_argument("config")
    cap.add_argument("--records", type=int, default=50, help="records in the serving cache")
    cap.add_argument("--matches", type=int, default=5, help="records matching each query")
    cap.set_defaults(func=_capacity)

    priv = sub.add_parser("privacy", help="linkability analysis of an event log")
    priv.add_argument("events")
    priv.set_defaults(func=_privacy)

    bench = sub.add_parser("bench", help="print the crypto cost profiles")
    bench.set_defaults(func=_bench)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
