"""Invariant checks over an event log.

Nothing here touches simulation objects: every verdict is recomputed from
the JSON records, so a log file can be audited on its own.  The observer's
``parent_block``/``parent_disconnect`` records define the canonical parent
chain; bridge events carried by a disconnected block stop counting.
"""

from __future__ import annotations

import statistics
from dataclasses import dataclass, field
from typing import Iterable, Optional

from .scenario import VERDICT_NAMES, Scenario


@dataclass
class Check:
    name: str
    passed: bool = True
    first_violation: Optional[int] = None
    detail: str = ""

    def fail(self, index: Optional[int], detail: str) -> None:
        if self.passed:
            self.passed = False
            self.first_violation = index
            self.detail = detail

    def as_dict(self) -> dict:
        return {"pass": self.passed, "first_violation": self.first_violation, "detail": self.detail}


@dataclass
class Verdict:
    checks: dict[str, Check]
    expect_fail: frozenset[str] = frozenset()

    @property
    def failed(self) -> set[str]:
        return {n for n, c in self.checks.items() if not c.passed}

    @property
    def all_pass(self) -> bool:
        return not self.failed

    @property
    def as_expected(self) -> bool:
        """True iff exactly the expected checks failed."""
        return self.failed == set(self.expect_fail)

    def as_dict(self) -> dict:
        return {n: c.as_dict() for n, c in self.checks.items()}


# ---------------------------------------------------------------- chain replay


@dataclass
class _Totals:
    locked: int = 0
    submitted: int = 0
    released: int = 0
    rewarded: int = 0
    burned: int = 0
    escrow: dict = field(default_factory=dict)        # header -> bond, pending only
    side_chain: list = field(default_factory=list)    # surviving headers in height order
    submit_height: dict = field(default_factory=dict)  # header -> parent height
    finalized: set = field(default_factory=set)
    paid: dict = field(default_factory=dict)          # short txid -> (parent height, recipient, amount, index)
    rejected: dict = field(default_factory=dict)
    fraud: list = field(default_factory=list)

    def copy(self) -> "_Totals":
        return _Totals(self.locked, self.submitted, self.released, self.rewarded, self.burned,
                       dict(self.escrow), list(self.side_chain), dict(self.submit_height),
                       set(self.finalized), dict(self.paid), dict(self.rejected), list(self.fraud))


class ChainReplay:
    """Folds the observer's records into canonical-chain totals."""

    def __init__(self):
        self.stack: list[tuple[str, int, _Totals]] = []
        self.t = _Totals()
        self.height = 0

    def connect(self, block: str, height: int) -> None:
        self.stack.append((block, height, self.t))
        self.t = self.t.copy()
        self.height = height

    def disconnect(self, block: str) -> None:
        # the totals after a block are restored by popping back to its parent
        if not self.stack or self.stack[-1][0] != block:
            raise ValueError(f"disconnect of non-tip block {block}")
        _, height, before = self.stack.pop()
        self.t = before
        self.height = height - 1


def _records_of(records: Iterable[dict], kind: str):
    return [r for r in records if r["kind"] == kind]


def evaluate(records: list[dict], scenario: Scenario) -> tuple[Verdict, dict]:
    checks = {n: Check(n) for n in VERDICT_NAMES}
    side_blocks: dict[str, dict] = {}
    finalized_at: dict[int, str] = {}
    chain = ChainReplay()
    fraud_pending: Optional[dict] = None
    settle_height: Optional[int] = None
    side_txs = []
    last_views = None
    def close_fraud(idx):
        nonlocal fraud_pending
        if fraud_pending is None:
            return
        fp = fraud_pending
        total = fp["reward"] + fp["burned"]
        if total != fp["orphaned_bonds"] or fp["reward"] != total // 2:
            checks["bond_accounting"].fail(fp["i"], "fraud reward is not half the orphaned bonds")
        fraud_pending = None

    for rec in records:
        kind = rec["kind"]
        i = rec["i"]
        if kind != "BlockOrphaned":
            close_fraud(i)
        t = chain.t
        if kind == "parent_block":
            chain.connect(rec["block"], rec["height"])
        elif kind == "parent_disconnect":
            chain.disconnect(rec["block"])
        elif kind == "side_block":
            side_blocks[rec["header"]] = rec
        elif kind == "side_tx":
            side_txs.append(rec)
        elif kind == "DepositRegistered":
            t.locked += rec["amount"]
        elif kind == "WithdrawalPaid":
            t.locked -= rec["amount"]
            short = rec["txid"][:16]
            t.paid[short] = (rec["parent_height"], rec["recipient"], rec["amount"], i)
            sb = side_blocks.get(rec["header"])
            burn = None if sb is None else next((b for b in sb["burns"] if b[0] == short), None)
            if burn is None or burn[1] != rec["recipient"] or burn[2] != rec["amount"]:
                checks["safety"].fail(i, "withdrawal does not match a committed burn")
        elif kind == "BlockSubmitted":
            hh = rec["header"]
            if rec["height"] != len(t.side_chain) + 1:
                checks["fork_freedom"].fail(i, "submission does not extend the tip")
            t.side_chain.append(hh)
            t.submit_height[hh] = rec["parent_height"]
            t.submitted += rec["bond"]
            t.escrow[hh] = rec["bond"]
        elif kind == "BlockFinalized":
            hh = rec["header"]
            t.released += rec["bond"]
            t.escrow.pop(hh, None)
            t.finalized.add(hh)
            prev = finalized_at.setdefault(rec["height"], hh)
            if prev != hh:
                checks["finality"].fail(i, f"conflicting finalization at side height {rec['height']}")
            sb = side_blocks.get(hh)
            if sb is not None and not sb["valid"]:
                checks["no_invalid_finalization"].fail(i, f"invalid block finalized ({sb['reason']})")
                if sb["reason"] == "PredicateFailed":
                    checks["safety"].fail(i, "a finalized block spends without the owner's witness")
        elif kind == "FraudProven":
            t.rewarded += rec["reward"]
            t.burned += rec["burned"]
            t.fraud.append(rec)
            fraud_pending = {"i": i, "reward": rec["reward"], "burned": rec["burned"],
                             "orphaned_bonds": 0, "call": rec["call"]}
        elif kind == "BlockOrphaned":
            hh = rec["header"]
            if hh in t.finalized:
                checks["finality"].fail(i, "finalized header orphaned")
            t.escrow.pop(hh, None)
            if hh in t.side_chain:
                del t.side_chain[t.side_chain.index(hh):]
            if fraud_pending is not None and rec["call"] == fraud_pending["call"]:
                fraud_pending["orphaned_bonds"] += rec["bond"]
            else:
                checks["bond_accounting"].fail(i, "orphaned without a fraud proof")
        elif kind == "CallRejected":
            t.rejected[rec["reason"]] = t.rejected.get(rec["reason"], 0) + 1
        elif kind == "snapshot":
            if rec["locked"] != rec["circulating"] + rec["unpaid_burns"] + rec["unclaimed_deposits"]:
                checks["peg_conservation"].fail(i, "locked != circulating + unpaid burns + unclaimed deposits")
            if rec["locked"] != t.locked:
                checks["peg_conservation"].fail(i, "locked value disagrees with deposit/withdrawal events")
            if (rec["bonds_submitted"], rec["bonds_released"], rec["bonds_rewarded"],
                    rec["bonds_burned"], rec["escrowed"]) != (
                    t.submitted, t.released, t.rewarded, t.burned, sum(t.escrow.values())):
                checks["bond_accounting"].fail(i, "bond totals disagree with bridge events")
            if t.submitted != sum(t.escrow.values()) + t.released + t.rewarded + t.burned:
                checks["bond_accounting"].fail(i, "bonds submitted != escrowed + released + rewarded + burned")
            if settle_height is None and rec["phase"] == "Settled":
                settle_height = rec["height"] + 1
        elif kind == "views":
            last_views = rec
        elif kind == "da_sample":
            hit = bool(set(rec["requested"]) & set(rec["withheld"]))
            if (rec["verdict"] == "Withheld") != hit:
                checks["da_soundness"].fail(i, "sampling verdict disagrees with the withheld set")
        elif kind == "da_coding_proof":
            if not rec["valid"]:
                checks["da_soundness"].fail(i, "incorrect-coding proof did not verify")
    close_fraud(len(records))

    if last_views is not None:
        states = {tuple(v) for v in last_views["views"].values()}
        if len(states) > 1:
            checks["convergence"].fail(last_views["i"], "miners end on different bridge states")

    final = chain.t
    final_height = chain.height
    latencies = _check_liveness(checks["liveness"], scenario, side_blocks, side_txs, final,
                                final_height, settle_height)

    metrics = _metrics(records, scenario, side_blocks, final, final_height, latencies)
    return Verdict(checks, scenario.expect_fail), metrics


def _check_liveness(check: Check, scenario: Scenario, side_blocks, side_txs, final: _Totals,
                    final_height: int, settle_height: Optional[int]) -> list[int]:
    bound = scenario.censorship_duration + 2
    dishonest = {p.id for p in scenario.producers if p.strategy != "honest"}
    included: dict[str, int] = {}
    for hh in final.side_chain:
        h1 = final.submit_height[hh]
        # a header with no observed body includes nothing
        for tx in side_blocks.get(hh, {}).get("txs", ()):
            included.setdefault(tx, h1)
    latencies = []
    for rec in side_txs:
        if rec["actor"] in dishonest:
            continue
        h1 = included.get(rec["tx"])
        if h1 is None:
            if rec["height"] + bound <= final_height:
                check.fail(rec["i"], f"transaction {rec['tx']} never included")
            continue
        latencies.append(h1 - rec["height"])
        if h1 - rec["height"] > bound:
            check.fail(rec["i"], f"transaction {rec['tx']} included after {h1 - rec['height']} blocks")

    D = scenario.bridge.delay
    halt = scenario.bridge.halt_height
    for hh in final.side_chain:
        sb = side_blocks.get(hh)
        if sb is None or not sb["burns"] or not sb["valid"]:
            continue
        hs = final.submit_height[hh]
        due = hs + D
        if halt is not None and sb["height"] >= halt - 1:
            if settle_height is None:
                continue
            due = max(due, settle_height)
        deadline = due + 2
        for txid, recipient, amount in sb["burns"]:
            paid = final.paid.get(txid)
            if paid is None:
                if deadline <= final_height:
                    check.fail(sb["i"], f"burn {txid} not withdrawn by parent height {deadline}")
            elif paid[0] > deadline:
                check.fail(paid[3], f"burn {txid} withdrawn late at {paid[0]} (deadline {deadline})")
    return latencies


def _metrics(records, scenario, side_blocks, final: _Totals, final_height: int,
             latencies: list[int]) -> dict:
    fin_lat = [r["parent_height"] - r["submitted_at"] for r in records if r["kind"] == "BlockFinalized"]
    proofs_posted = {r["call"] for r in records if r["kind"] == "call" and r["call_kind"] == "SubmitFraudProof"}
    txs = sum(len(side_blocks[h]["txs"]) for h in final.side_chain if h in side_blocks)
    da = [r for r in records if r["kind"] == "da_sample"]
    withheld_samples = [r for r in da if r["withheld"]]

    def dist(xs):
        if not xs:
            return {"count": 0}
        xs = sorted(xs)
        return {"count": len(xs), "min": xs[0], "median": statistics.median(xs),
                "mean": round(statistics.fmean(xs), 4), "max": xs[-1],
                "p95": xs[min(len(xs) - 1, int(0.95 * len(xs)))]}

    return {
        "parent_height": final_height,
        "side_height": len(final.side_chain),
        "finalized_headers": len(final.finalized),
        "inclusion_latency": dist(latencies),
        "finalization_latency": dist(fin_lat),
        "fraud_proofs_posted": len(proofs_posted),
        "fraud_proofs_accepted": len(final.fraud),
        "fraud_events": [{"height": f["height"], "scheme": f["scheme"], "reason": f["reason"],
                          "orphaned": f["orphaned"], "reward": f["reward"], "burned": f["burned"]}
                         for f in final.fraud],
        "side_txs_included": txs,
        "throughput_txs_per_parent_block": round(txs / final_height, 3) if final_height else 0.0,
        "withdrawals_paid": len(final.paid),
        "rejected_calls": dict(sorted(final.rejected.items())),
        "da_samples": len(da),
        "da_withheld_detected": sum(r["verdict"] == "Withheld" for r in withheld_samples),
        "da_withheld_samples": len(withheld_samples),
    }


def check_liveness(records: list[dict], scenario: Scenario) -> Check:
    return evaluate(records, scenario)[0].checks["liveness"]


def check_safety(records: list[dict], scenario: Optional[Scenario] = None) -> Check:
    """Safety needs no scenario parameters; one is accepted for symmetry."""
    return evaluate(records, scenario or Scenario("log"))[0].checks["safety"]
