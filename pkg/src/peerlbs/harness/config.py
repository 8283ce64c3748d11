"""Scenario configuration.

A scenario is a YAML or JSON mapping whose sections mirror the dataclasses
below. Every key is optional; unknown keys are rejected with their dotted
path so typos never silently fall back to defaults.
"""

from __future__ import annotations

import dataclasses
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from ..adversary import KINDS
from ..crypto import CostProfile, parse_scheme


class ConfigError(ValueError):
    pass


@dataclass
class AreaConfig:
    """Explicit positions win over a density, which wins over a node count."""

    width: float = 1000.0
    height: float = 1000.0
    wrap: bool = False
    density_per_km2: float | None = None
    nodes: int = 20
    positions: list[list[float]] | None = None


@dataclass
class RadioConfig:
    range_m: float = 100.0
    propagation_delay_ms: float = 1.0
    p_loss: float = 0.0


@dataclass
class RequestConfig:
    mode: str = "self"
    role: str = "peer"
    weights: list[float] | None = None
    distance_scale: float = 1.0


@dataclass
class WorkloadConfig:
    rate_per_min: float = 1.0
    poi_types: dict[str, float] = field(default_factory=lambda: {"restaurant": 1.0})
    request: RequestConfig = field(default_factory=RequestConfig)
    warm_cache: bool = False


@dataclass
class NodeConfig:
    N: int = 3
    timeout: float = 5.0
    min_results: int = 1
    radius: float = 500.0
    cache_capacity: int = 200
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


@dataclass
class PolicyConfig:
    ticket_duration: float = 600.0
    grid: float = 60.0
    pseudonym_lifetime: float = 600.0
    quota: int = 10
    batch_size: int = 1
    max_batch: int | None = None
    freshness_window: float = 5.0
    revoke: bool = True


@dataclass
class CryptoConfig:
    node_scheme: str = "model-RSA-1024"
    long_term_scheme: str = "model-RSA-1024"
    authority_scheme: str = "model-RSA-2048"
    lbs_scheme: str = "model-RSA-2048"
    scale: float = 1.0
    profiles: dict[str, dict[str, float]] = field(default_factory=dict)
    # Response generation = search cost + signing; the search cost model is
    # base + per_record * cache size + per_match * matches (milliseconds).
    search_base_ms: float = 1.12
    search_per_record_ms: float = 0.02
    search_per_match_ms: float = 0.05


@dataclass
class LbsConfig:
    response_mode: str = "channel-only"
    subscriber: bool = False
    poi_per_km2: float = 20.0
    poi_file: str | None = None


@dataclass
class AdversaryConfig:
    kind: str = "bogus-responder"
    nodes: list[int] = field(default_factory=list)
    params: dict[str, Any] = field(default_factory=dict)


@dataclass
class LogConfig:
    receptions: bool = True


@dataclass
class ScenarioConfig:
    name: str = "scenario"
    seed: int = 1
    duration: float = 1800.0
    area: AreaConfig = field(default_factory=AreaConfig)
    radio: RadioConfig = field(default_factory=RadioConfig)
    workload: WorkloadConfig = field(default_factory=WorkloadConfig)
    node: NodeConfig = field(default_factory=NodeConfig)
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    crypto: CryptoConfig = field(default_factory=CryptoConfig)
    lbs: LbsConfig = field(default_factory=LbsConfig)
    adversaries: list[AdversaryConfig] = field(default_factory=list)
    log: LogConfig = field(default_factory=LogConfig)

    def validate(self) -> ScenarioConfig:
        _validate(self)
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def replace(self, **changes) -> ScenarioConfig:
        """Copy with dotted-path overrides, e.g. ``replace(**{"policy.quota": 5})``."""
        data = self.to_dict()
        for path, value in changes.items():
            target = data
            *parents, leaf = path.split(".")
            for p in parents:
                target = target[p]
            if leaf not in target:
                raise ConfigError(f"unknown key '{path}'")
            target[leaf] = value
        return from_dict(data)


def _build(cls, data: Any, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"'{path or 'config'}' must be a mapping")
    hints = typing.get_type_hints(cls)
    known = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        where = f"{path}.{key}" if path else str(key)
        if key not in known:
            raise ConfigError(f"unknown key '{where}'")
        kwargs[key] = _coerce(hints[key], value, where)
    return cls(**kwargs)


def _coerce(hint, value: Any, where: str):
    if dataclasses.is_dataclass(hint):
        return _build(hint, value, where)
    origin = typing.get_origin(hint)
    if origin is list:
        (inner,) = typing.get_args(hint)
        if not isinstance(value, list):
            raise ConfigError(f"'{where}' must be a list")
        return [_coerce(inner, v, f"{where}[{i}]") for i, v in enumerate(value)]
    if origin in (typing.Union, getattr(__import__("types"), "UnionType", None)):
        args = [a for a in typing.get_args(hint) if a is not type(None)]
        if value is None:
            return None
        return _coerce(args[0], value, where)
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"'{where}' must be a number")
        return float(value)
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"'{where}' must be an integer")
        return value
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"'{where}' must be true or false")
        return value
    if hint is str:
        if not isinstance(value, str):
            raise ConfigError(f"'{where}' must be a string")
        return value
    return value


def _require(cond: bool, key: str, msg: str) -> None:
    if not cond:
        raise ConfigError(f"'{key}': {msg}")


def _validate(c: ScenarioConfig) -> None:
    _require(c.duration > 0, "duration", "must be positive")
    a = c.area
    _require(a.width > 0 and a.height > 0, "area", "width and height must be positive")
    if a.positions is not None:
        for i, p in enumerate(a.positions):
            _require(len(p) == 2 and 0 <= p[0] <= a.width and 0 <= p[1] <= a.height, f"area.positions[{i}]", "must be [x, y] inside the area")
    _require(a.nodes >= 1, "area.nodes", "must be >= 1")
    if a.density_per_km2 is not None:
        _require(a.density_per_km2 > 0, "area.density_per_km2", "must be positive")
    _require(c.radio.range_m > 0, "radio.range_m", "must be positive")
    _require(c.radio.propagation_delay_ms >= 0, "radio.propagation_delay_ms", "must be >= 0")
    _require(0.0 <= c.radio.p_loss <= 1.0, "radio.p_loss", "must lie in [0, 1]")
    w = c.workload
    _require(w.rate_per_min > 0, "workload.rate_per_min", "must be > 0")
    _require(bool(w.poi_types) and all(v >= 0 for v in w.poi_types.values()) and sum(w.poi_types.values()) > 0, "workload.poi_types", "needs positive total weight")
    _require(w.request.mode in ("self", "weighted"), "workload.request.mode", "must be self or weighted")
    _require(w.request.role in ("peer", "location"), "workload.request.role", "must be peer or location")
    if w.request.weights is not None:
        _require(all(x >= 0 for x in w.request.weights) and any(x > 0 for x in w.request.weights), "workload.request.weights", "must be non-negative with one positive")
    n = c.node
    _require(n.N >= 1, "node.N", "must be >= 1")
    _require(n.timeout > 0, "node.timeout", "must be positive")
    _require(n.cache_capacity >= 0, "node.cache_capacity", "must be >= 0")
    _require(n.attach_pc in ("always", "first"), "node.attach_pc", "must be always or first")
    _require(n.crosscheck in ("never", "always", "on_disagreement"), "node.crosscheck", "must be never, always or on_disagreement")
    _require(n.lbs_credential in ("pseudonym", "long-term", "anonymous"), "node.lbs_credential", "must be pseudonym, long-term or anonymous")
    p = c.policy
    for key in ("ticket_duration", "grid", "pseudonym_lifetime", "freshness_window"):
        _require(getattr(p, key) > 0, f"policy.{key}", "must be positive")
    _require(p.quota >= 0, "policy.quota", "must be >= 0")
    _require(p.batch_size >= 1, "policy.batch_size", "must be >= 1")
    if p.batch_size > 1:
        _require(p.batch_size * p.pseudonym_lifetime <= p.ticket_duration, "policy.batch_size", "batch of pseudonym lifetimes must fit the ticket duration")
    for key in ("ticket_duration", "pseudonym_lifetime"):
        ratio = getattr(p, key) / p.grid
        _require(abs(ratio - round(ratio)) < 1e-9, f"policy.{key}", "must be a multiple of policy.grid")
    cr = c.crypto
    for key in ("node_scheme", "long_term_scheme", "authority_scheme", "lbs_scheme"):
        try:
            parse_scheme(getattr(cr, key))
        except ValueError as exc:
            raise ConfigError(f"'crypto.{key}': {exc}") from None
    _require(cr.scale >= 0, "crypto.scale", "must be >= 0")
    for name, prof in cr.profiles.items():
        try:
            parse_scheme(name)
            CostProfile(**prof)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"'crypto.profiles.{name}': {exc}") from None
    _require(c.lbs.response_mode in ("signed", "channel-only"), "lbs.response_mode", "must be signed or channel-only")
    _require(c.lbs.poi_per_km2 >= 0, "lbs.poi_per_km2", "must be >= 0")
    count = len(a.positions) if a.positions is not None else (None if a.density_per_km2 is not None else a.nodes)
    for i, adv in enumerate(c.adversaries):
        _require(adv.kind in KINDS, f"adversaries[{i}].kind", f"must be one of {', '.join(KINDS)}")
        for j in adv.nodes:
            _require(j >= 0 and (count is None or j < count), f"adversaries[{i}].nodes", f"index {j} out of range")


def from_dict(data: dict) -> ScenarioConfig:
    return _build(ScenarioConfig, data, "").validate()


def load_config(path: str | Path) -> ScenarioConfig:
    text = Path(path).read_text(encoding="utf-8")
    if str(path).endswith(".json"):
        data = json.loads(text)
    else:
        data = yaml.safe_load(text)
    return from_dict(data or {})
