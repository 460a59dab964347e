"""Scenario runner: deterministic simulation, event log and verdicts."""

from __future__ import annotations

from dataclasses import dataclass

from .runner import EventLog, Simulation, simulate
from .scenario import (
    VERDICT_NAMES, ConfigInvalid, Scenario, bundled_scenarios, load_scenario, parse_scenario,
)
from .verdicts import Check, Verdict, check_liveness, check_safety, evaluate

__all__ = [
    "EventLog", "Simulation", "simulate", "VERDICT_NAMES", "ConfigInvalid", "Scenario",
    "bundled_scenarios", "load_scenario", "parse_scenario", "Check", "Verdict", "evaluate",
    "check_liveness", "check_safety", "run", "RunResult", "replay_verify", "ReplayResult",
]


@dataclass
class RunResult:
    log: EventLog
    verdict: Verdict
    metrics: dict

    def __iter__(self):
        return iter((self.log, self.verdict, self.metrics))


def run(scenario: Scenario) -> RunResult:
    """Execute a scenario and judge its log."""
    log = simulate(scenario)
    verdict, metrics = evaluate(log.records, scenario)
    return RunResult(log, verdict, metrics)


@dataclass
class ReplayResult:
    identical: bool
    first_difference: int | None  # line number, 0-based
    verdict: Verdict | None


def replay_verify(log_text: str, scenario: Scenario) -> ReplayResult:
    """Re-run ``scenario`` with the seed recorded in the log and compare bytes."""
    records = EventLog.parse(log_text)
    if not records or records[0].get("kind") != "scenario":
        return ReplayResult(False, 0, None)
    seed = records[0]["seed"]
    fresh = simulate(scenario.with_seed(seed))
    text = fresh.dumps()
    if text == log_text:
        verdict, _ = evaluate(records, scenario)
        return ReplayResult(True, None, verdict)
    a, b = log_text.splitlines(), text.splitlines()
    diff = next((i for i, (x, y) in enumerate(zip(a, b)) if x != y), min(len(a), len(b)))
    return ReplayResult(False, diff, None)
