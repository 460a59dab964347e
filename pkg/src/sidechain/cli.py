"""Command line: ``sidechain run | verify | scenarios list``.

Exit status is 0 iff the verdict matches the scenario's expectation (all
checks pass, or exactly the ``expect_fail`` set fails).  Verbosity is set by
the ``SIDECHAIN_LOG`` environment variable.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Optional, Sequence

from .harness import ConfigInvalid, Verdict, bundled_scenarios, load_scenario, replay_verify, run


def _print_verdict(verdict: Verdict, out) -> None:
    for name, check in verdict.checks.items():
        expected = " (expected)" if name in verdict.expect_fail else ""
        if check.passed:
            status = "pass" + (" (expected fail!)" if expected else "")
        else:
            status = f"FAIL{expected} at event {check.first_violation}: {check.detail}"
        print(f"  {name:<24} {status}", file=out)
    print(f"verdict: {'OK' if verdict.as_expected else 'UNEXPECTED'}", file=out)


def cmd_run(args) -> int:
    scenario = load_scenario(args.scenario)
    if args.seed is not None:
        scenario = scenario.with_seed(args.seed)
    log, verdict, metrics = run(scenario)
    if args.out:
        log.write(args.out)
        print(f"wrote {len(log.records)} events to {args.out}", file=sys.stderr)
    print(f"scenario {scenario.name} seed {scenario.seed}: {len(log.records)} events")
    _print_verdict(verdict, sys.stdout)
    if args.metrics:
        print(json.dumps(metrics, indent=2, sort_keys=True))
    return 0 if verdict.as_expected else 1


def cmd_verify(args) -> int:
    scenario = load_scenario(args.scenario)
    text = Path(args.log).read_text(encoding="utf-8")
    result = replay_verify(text, scenario)
    if not result.identical:
        print(f"replay differs from the log at line {result.first_difference}")
        return 1
    print("replay identical")
    _print_verdict(result.verdict, sys.stdout)
    return 0 if result.verdict.as_expected else 1


def cmd_list(args) -> int:
    for name in bundled_scenarios():
        sc = load_scenario(name)
        tail = f"  [expect fail: {', '.join(sorted(sc.expect_fail))}]" if sc.expect_fail else ""
        print(f"{name:<20} {sc.description}{tail}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sidechain", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run a scenario and judge its event log")
    p.add_argument("scenario", help="path to a scenario TOML file or a bundled scenario name")
    p.add_argument("--seed", type=int, help="override the scenario seed")
    p.add_argument("--out", help="write the JSONL event log here")
    p.add_argument("--metrics", action="store_true", help="print run metrics as JSON")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("verify", help="re-execute a scenario and compare against a log")
    p.add_argument("log")
    p.add_argument("scenario")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("scenarios", help="bundled scenarios")
    ssub = p.add_subparsers(dest="action", required=True)
    ssub.add_parser("list").set_defaults(func=cmd_list)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigInvalid as exc:
        print(f"ConfigInvalid: {exc}", file=sys.stderr)
        return 2
