import numpy as np

from sidechain.bridge import (
    FINALIZED, ORPHANED, STAKED_SHUFFLE, BridgeCall, BridgeParams, Deposit, staked_shuffle_leader,
)
from sidechain.consensus import (
    InvalidBlockInjector, ProducerNode, SideIndex, WatcherNode, finalizer_step, step_producer,
    watcher_step,
)
from sidechain.ledger import GENESIS_HASH
from sidechain.parent import BridgeFold, ForkView, mine

from helpers import claim_tx


class Sim:
    """One miner's view of the parent chain plus the shared side index."""

    def __init__(self, **params):
        self.view = ForkView("miner", BridgeFold(BridgeParams(**params)))
        self.index = SideIndex()
        self.rng = np.random.default_rng(0)

    @property
    def bridge(self):
        return self.view.bridge()

    def block(self, calls=()):
        for c in calls:
            if c is not None:
                self.view.submit(c)
        b = mine(self.view)
        self.index.learn(b)
        return self.view.fold.events(b.hash)

    def produce(self, node, txs=()):
        return step_producer(node, self.bridge, self.index, list(txs), self.view.tip, self.rng)

    def fund(self, users=("alice", "bob"), amount=500):
        base = len(self.bridge.deposits)
        self.block([BridgeCall("d", Deposit(u, amount), i) for i, u in enumerate(users)])
        return [claim_tx(base + i, u, amount) for i, u in enumerate(users)]


def kinds(events):
    return [e["kind"] for e in events]


def test_first_come_first_served():
    sim = Sim()
    claims = sim.fund()
    p, q = ProducerNode("p", "miner"), ProducerNode("q", "miner")
    a, b = sim.produce(p, claims), sim.produce(q, claims[:1])
    events = sim.block([a, b])
    assert kinds(events) == ["BlockSubmitted", "CallRejected"]
    assert events[0]["producer"] == "p" and events[1]["reason"] == "NotExtendingTip"
    assert sim.bridge.height == 1
    # nothing left to include: an idle producer submits nothing
    assert sim.produce(q, []) is None
    assert sim.produce(ProducerNode("e", "miner", submit_empty=True)) is not None


def test_honest_producers_skip_invalid_tip_and_watcher_rolls_back():
    sim = Sim(delay=5)
    claims = sim.fund(("byz", "alice", "bob"))
    byz = ProducerNode("byz", "miner", InvalidBlockInjector("value_imbalance", 2))
    honest = ProducerNode("p", "miner", submit_empty=True)
    w = WatcherNode("w", "miner")
    sim.block([sim.produce(byz, claims)])
    assert sim.bridge.height == 1
    bad_call = sim.produce(byz)
    sim.block([bad_call])
    bridge = sim.bridge
    assert bridge.height == 2
    bad = bridge.chain[1]
    assert sim.index.check(bridge, bad) is not None
    assert sim.index.last_valid(bridge) == bridge.chain[0]
    # the honest producer targets height 2 on the valid prefix
    proof = watcher_step(w, bridge, sim.index)
    again = sim.produce(honest)
    events = sim.block([proof, again])
    assert kinds(events)[:2] == ["FraudProven", "BlockOrphaned"]
    assert kinds(events)[-1] == "BlockSubmitted"
    bridge = sim.bridge
    assert bridge.status(bad) == ORPHANED and bridge.height == 2 and bridge.tip != bad
    assert watcher_step(w, bridge, sim.index) is None
    # the cached proof is reused for the same header
    assert bad in w.proofs


def test_finalizer_waits_for_delay():
    sim = Sim(delay=3)
    claims = sim.fund()
    sim.block([sim.produce(ProducerNode("p", "miner"), claims)])
    submitted = sim.bridge.records[sim.bridge.chain[0]].submitted_at
    while sim.view.height + 1 < submitted + 3:
        assert finalizer_step("f", sim.bridge, sim.view.height + 1) == []
        sim.block()
    calls = finalizer_step("f", sim.bridge, sim.view.height + 1)
    assert len(calls) == 1
    events = sim.block(calls)
    assert kinds(events) == ["BlockFinalized"]
    assert sim.bridge.status(sim.bridge.chain[0]) == FINALIZED


def test_staked_shuffle_only_leader_submits():
    sim = Sim(leader_mode=STAKED_SHUFFLE)
    claims = sim.fund()
    nodes = [ProducerNode(n, "miner", staked=True, submit_empty=True) for n in ("a", "b", "c")]
    sim.block([sim.produce(n) for n in nodes])  # first step registers stake
    assert sim.bridge.stakers == {"a", "b", "c"}
    for _ in range(6):
        leader = staked_shuffle_leader(["a", "b", "c"], sim.view.tip, sim.bridge.height + 1)
        calls = [sim.produce(n, claims) for n in nodes]
        assert [c is not None for c in calls] == [n.id == leader for n in nodes]
        events = sim.block(calls)
        assert kinds(events) == ["BlockSubmitted"]
        claims = []


def test_halt_stops_producers_but_not_naive_ones():
    sim = Sim(halt_height=3, challenge_window=4)
    sim.fund()
    p = ProducerNode("p", "miner", submit_empty=True)
    naive = ProducerNode("n", "miner", submit_empty=True, ignore_halt=True)
    sim.block([sim.produce(p)])
    sim.block([sim.produce(p)])
    assert sim.bridge.halt_started_at is not None and sim.bridge.height == 2
    assert sim.produce(p) is None
    events = sim.block([sim.produce(naive)])
    assert kinds(events) == ["CallRejected"] and events[0]["reason"] == "ChainHalted"


def test_side_index_states_and_validity_memo():
    sim = Sim()
    claims = sim.fund()
    p = ProducerNode("p", "miner")
    sim.block([sim.produce(p, claims)])
    bridge = sim.bridge
    hh = bridge.chain[0]
    assert sim.index.check(bridge, hh) is None
    assert sim.index.state(hh).circulating == 1000
    assert sim.index.state(GENESIS_HASH).height == 0
    assert sim.index.first_invalid(bridge) is None and sim.index.last_valid(bridge) == hh
    assert len(sim.index.history(bridge, 2).blocks) == 1
