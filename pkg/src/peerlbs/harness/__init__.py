"""Scenario configuration, runner, metrics, reports and CLI."""

from .config import ConfigError, ScenarioConfig, from_dict, load_config
from .metrics import MetricsRecord
from .reports import capacity_report, privacy_report, sample_query
from .scenario import World, format_event, parse_event, run_scenario

__all__ = [
    "ConfigError",
    "MetricsRecord",
    "ScenarioConfig",
    "World",
    "capacity_report",
    "format_event",
    "from_dict",
    "load_config",
    "parse_event",
    "privacy_report",
    "run_scenario",
    "sample_query",
]
