import copy
import hashlib
import json

import pytest

from sidechain.cli import main
from sidechain.harness import (
    VERDICT_NAMES, ConfigInvalid, EventLog, bundled_scenarios, evaluate, load_scenario,
    parse_scenario, replay_verify, run,
)
from sidechain.harness.rng import substream


@pytest.fixture(scope="module")
def fraud_run():
    return run(load_scenario("fraud"))


@pytest.fixture(scope="module")
def honest_run():
    return run(load_scenario("honest"))


# Reference logs.  A change here means simulation output changed; bump
# deliberately, never to make a test pass.
PINNED = {
    "fraud": "cecfd5fb7dfa5efa1caac45cb9eb08a6606d656bb8764a86254f4c690a9d3e06",
    "honest": "61d388e08259b07595c2644f3b80d74f5eee121931e737be7d817733a16238ad",
}


def test_reference_logs_are_stable(fraud_run, honest_run):
    for name, result in (("fraud", fraud_run), ("honest", honest_run)):
        assert hashlib.sha256(result.log.dumps().encode()).hexdigest() == PINNED[name]
        assert result.verdict.all_pass


def test_substreams_are_independent_and_seeded():
    a = substream(7, "users").integers(0, 1 << 30, 5)
    assert list(a) == list(substream(7, "users").integers(0, 1 << 30, 5))
    assert list(a) != list(substream(7, "miners").integers(0, 1 << 30, 5))
    assert list(a) != list(substream(8, "users").integers(0, 1 << 30, 5))


def test_log_lines_are_canonical_json(fraud_run):
    text = fraud_run.log.dumps()
    lines = text.splitlines()
    assert lines[0].startswith('{') and json.loads(lines[0])["kind"] == "scenario"
    for line in lines[:50]:
        rec = json.loads(line)
        assert json.dumps(rec, sort_keys=True, separators=(",", ":")) == line
    assert [r["i"] for r in EventLog.parse(text)] == list(range(len(lines)))


def test_seed_changes_the_run():
    sc = load_scenario("fraud")
    a = run(sc.with_seed(1)).log.dumps()
    b = run(sc.with_seed(2)).log.dumps()
    assert a != b


def tampered(result, pick, edit):
    """Copy of the log with ``edit`` applied to the first record ``pick`` accepts."""
    records = copy.deepcopy(result.log.records)
    target = next(r for r in records if pick(r))
    edit(target)
    return records


def verdict_of(records, name="fraud"):
    v, _ = evaluate(records, load_scenario(name))
    return {n for n, c in v.checks.items() if not c.passed}


def test_tampered_snapshot_breaks_peg(fraud_run):
    recs = tampered(fraud_run, lambda r: r["kind"] == "snapshot" and r["height"] > 20,
                    lambda r: r.update(locked=r["locked"] + 1))
    assert "peg_conservation" in verdict_of(recs)


def test_tampered_reward_breaks_bond_accounting(fraud_run):
    recs = tampered(fraud_run, lambda r: r["kind"] == "FraudProven",
                    lambda r: r.update(reward=r["reward"] + r["burned"], burned=0))
    assert "bond_accounting" in verdict_of(recs)


def test_tampered_withdrawal_breaks_safety(fraud_run):
    recs = tampered(fraud_run, lambda r: r["kind"] == "WithdrawalPaid",
                    lambda r: r.update(recipient="mallory"))
    assert "safety" in verdict_of(recs)


def test_tampered_validity_breaks_no_invalid_finalization(fraud_run):
    finalized = {r["header"] for r in fraud_run.log.records if r["kind"] == "BlockFinalized"}
    recs = tampered(fraud_run, lambda r: r["kind"] == "side_block" and r["header"] in finalized,
                    lambda r: r.update(valid=False, reason="ValueImbalance", tx_index=0))
    assert "no_invalid_finalization" in verdict_of(recs)


def test_tampered_views_break_convergence(fraud_run):
    recs = copy.deepcopy(fraud_run.log.records)
    last = [r for r in recs if r["kind"] == "views"][-1]
    first = sorted(last["views"])[0]
    last["views"][first] = [bytes(32).hex(), 0, bytes(32).hex()]
    assert "convergence" in verdict_of(recs)


def test_conflicting_submission_breaks_fork_freedom(fraud_run):
    recs = copy.deepcopy(fraud_run.log.records)
    i, sub = next((i, r) for i, r in enumerate(recs) if r["kind"] == "BlockSubmitted")
    dup = dict(sub, header="ee" * 32)
    recs.insert(i + 1, dup)
    assert "fork_freedom" in verdict_of(recs)


def test_replay_detects_edits(fraud_run):
    sc = load_scenario("fraud")
    text = fraud_run.log.dumps()
    ok = replay_verify(text, sc)
    assert ok.identical and ok.verdict.all_pass
    lines = text.splitlines(keepends=True)
    lines[100] = lines[100].replace('"round":', '"round": ', 1)
    bad = replay_verify("".join(lines), sc)
    assert not bad.identical and bad.first_difference == 100
    assert not replay_verify("", sc).identical


@pytest.mark.parametrize("text,needle", [
    ("rounds = 0\n[miners]\nnames=['a']\n", "rounds"),
    ("seed = 'x'\n[miners]\nnames=['a']\n", "seed"),
    ("[miners]\nnames=['a','a']\n", "distinct"),
    ("[miners]\nnames=['a']\n[bridge]\nleader_mode='lottery'\n", "leader_mode"),
    ("[miners]\nnames=['a']\n[[producers]]\nid='p'\nview='zz'\n", "not a miner"),
    ("[miners]\nnames=['a']\n[[producers]]\nid='p'\nview='a'\nstrategy='invalid'\nfault='nope'\nat_height=2\n",
     "fault"),
    ("expect_fail=['vibes']\n[miners]\nnames=['a']\n", "verdicts"),
    ("[miners]\nnames=['a']\nbogus=1\n", "unknown keys"),
    ("[miners\n", "TOML"),
])
def test_config_errors(text, needle):
    with pytest.raises(ConfigInvalid, match=needle):
        parse_scenario(text)


def test_bundled_scenarios_parse():
    names = bundled_scenarios()
    assert {"honest", "fraud", "reorg", "censorship", "censor-majority", "halting",
            "da-sampling", "throughput-100k"} <= set(names)
    for n in names:
        sc = load_scenario(n)
        assert sc.name == n and sc.expect_fail <= set(VERDICT_NAMES)
    with pytest.raises(ConfigInvalid):
        load_scenario("no-such-scenario")


def test_cli_exit_codes(tmp_path, capsys):
    assert main(["scenarios", "list"]) == 0
    assert "censor-majority" in capsys.readouterr().out
    log = tmp_path / "fraud.jsonl"
    assert main(["run", "fraud", "--out", str(log), "--metrics"]) == 0
    out = capsys.readouterr().out
    assert "verdict: OK" in out and '"fraud_proofs_accepted": 1' in out
    assert main(["verify", str(log), "fraud"]) == 0
    assert "replay identical" in capsys.readouterr().out
    log.write_text(log.read_text().replace('"round":3', '"round":4', 1))
    assert main(["verify", str(log), "fraud"]) == 1
    bad = tmp_path / "bad.toml"
    bad.write_text("rounds = -1\n[miners]\nnames=['a']\n")
    assert main(["run", str(bad)]) == 2


def test_expected_failures_count_as_ok():
    sc = load_scenario("censor-majority")
    result = run(sc)
    assert result.verdict.failed == sc.expect_fail
    assert result.verdict.as_expected and not result.verdict.all_pass
