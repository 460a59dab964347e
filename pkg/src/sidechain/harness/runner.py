"""Deterministic round scheduler.

Each round runs in a fixed order:

1. actors read their miner's view and emit calls or side transactions
   (watchers, then the finalizer, then users, then producers);
2. the scheduled winners mine on their local tips;
3. blocks whose delivery delay has elapsed reach the other views;
4. the observer (a node that hears every block at once) logs chain changes,
   the bridge events they carry, side-block validity, and a snapshot.

The event log is the only output that verdicts may look at.
"""

from __future__ import annotations

import json
import logging
import os
from collections import OrderedDict, defaultdict
from dataclasses import dataclass, field
from typing import Any, Iterable, Optional

import numpy as np

from ..availability import ChunkServer, encode as da_encode, prove_incorrect_coding, sample, \
    verify_incorrect_coding, commit_chunks
from ..bridge import (
    FINALIZED, BridgeCall, BridgeState, Deposit, SubmitBlock, Withdraw, halt_schedule,
)
from ..consensus import (
    Honest, InvalidBlockInjector, ProducerNode, SideIndex, WatcherNode, WithholdingProducer,
    finalizer_step, step_producer, watcher_step,
)
from ..faults import burn_tx
from ..hashing import merkle_prove
from ..ledger import (
    DEFAULT_SCHEME, GENESIS_HASH, BurnKind, DepositClaim, Input, LedgerState, Output, PayToKey,
    Transaction, Transfer, sign_inputs,
)
from ..parent import BridgeFold, CensorSender, ForkView, ParentBlock, Reorg, mine
from .rng import substream
from .scenario import SCHEMA_VERSION, Scenario

log = logging.getLogger("sidechain.harness")
if os.environ.get("SIDECHAIN_LOG"):
    logging.basicConfig(level=os.environ["SIDECHAIN_LOG"].upper())

SHORT = 16  # hex chars kept for bulk transaction ids in the log


def short(txid: bytes) -> str:
    return txid.hex()[:SHORT]


class EventLog:
    """Append-only structured records, serialized as canonical JSON lines."""

    def __init__(self):
        self.records: list[dict] = []

    def emit(self, round_: int, actor: str, kind: str, **payload: Any) -> int:
        idx = len(self.records)
        rec = {"v": SCHEMA_VERSION, "i": idx, "round": round_, "actor": actor, "kind": kind}
        rec.update(payload)
        self.records.append(rec)
        return idx

    def lines(self) -> list[str]:
        return [json.dumps(r, sort_keys=True, separators=(",", ":")) for r in self.records]

    def dumps(self) -> str:
        return "".join(line + "\n" for line in self.lines())

    def write(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(self.dumps())

    @staticmethod
    def parse(text: str) -> list[dict]:
        return [json.loads(line) for line in text.splitlines() if line.strip()]


@dataclass
class UserNode:
    id: str
    index: int
    view: str
    deposited: bool = False
    claims_sent: set = field(default_factory=set)
    spending: set = field(default_factory=set)
    burns: dict = field(default_factory=dict)  # txid -> amount
    nonce: int = 0

    def next_nonce(self) -> int:
        self.nonce += 1
        return self.nonce


class Simulation:
    def __init__(self, scenario: Scenario):
        self.sc = sc = scenario
        self.scheme = DEFAULT_SCHEME
        self.fold = BridgeFold(sc.bridge, self.scheme)
        self.views = {m: ForkView(m, self.fold) for m in sc.miners.names}
        self.observer = ForkView("observer", self.fold)
        self.index = SideIndex(self.scheme, sc.witness_window)
        self.log = EventLog()
        self.rng_sched = substream(sc.seed, "miner-schedule")
        self.rng_users = substream(sc.seed, "workload")
        self.rng_faults = substream(sc.seed, "faults")
        self.rng_da = substream(sc.seed, "da-sampling")
        self.policies = [CensorSender(frozenset(c.ids), c.from_height, c.duration) for c in sc.censors]
        self.producers = []
        self.funds = {}
        for p in sc.producers:
            if p.strategy == "invalid":
                strat = InvalidBlockInjector(p.fault, p.at_height, p.extend_invalid)
            elif p.strategy == "withholding":
                strat = WithholdingProducer(p.withhold)
            else:
                strat = Honest()
            self.producers.append(ProducerNode(p.id, p.view, strat, sc.bridge.bond, sc.bridge.k,
                                               p.max_txs, p.submit_empty, p.staked,
                                               ignore_halt=p.ignore_halt))
            if p.fund:
                self.funds[p.id] = p.fund
        self.watchers = [WatcherNode(w.id, w.view) for w in sc.watchers]
        self.users = [UserNode(f"u{i}", i, sc.users.view) for i in range(sc.users.count)]
        self.side_mempool: "OrderedDict[bytes, Transaction]" = OrderedDict()
        self.in_flight: list[tuple[int, int, str, ParentBlock]] = []
        self._seq = 0
        self._seen_headers: set[bytes] = set()
        self._owners_cache: dict[bytes, dict[str, list]] = {}
        self._deposits_cache: dict[bytes, dict[str, list[int]]] = {}
        self._finalized_seen = 0
        self._funded: set[str] = set()
        self._fund_claims: dict[str, set] = {}
        self.transfers = 0
        self.round = 0

    # ---------------------------------------------------------------- helpers

    def broadcast(self, actor: str, call: BridgeCall) -> None:
        for v in self.views.values():
            v.submit(call)
        extra = {}
        if isinstance(call.action, SubmitBlock):
            extra["bytes"] = len(call.action.block)
        self.log.emit(self.round, actor, "call", call=call.call_id.hex(), call_kind=call.kind,
                      sender=call.sender, **extra)

    def submit_side_tx(self, actor: str, tx: Transaction) -> None:
        if tx.txid in self.side_mempool:
            return
        self.side_mempool[tx.txid] = tx
        kind = type(tx.kind).__name__
        self.log.emit(self.round, actor, "side_tx", tx=short(tx.txid), tx_kind=kind,
                      height=self.observer.height)

    def owners(self, base: bytes) -> dict[str, list]:
        cached = self._owners_cache.get(base)
        if cached is None:
            cached = defaultdict(list)
            for op, c in self.index.state(base).utxo_entries():
                pred = c.output.predicate
                if isinstance(pred, PayToKey):
                    cached[pred.owner].append((op, c))
            if len(self._owners_cache) > 64:
                self._owners_cache.clear()
            self._owners_cache[base] = cached
        return cached

    def deposits_by_recipient(self, bridge: BridgeState) -> dict[str, list[int]]:
        # the accumulator digest identifies the deposit list exactly
        key = bridge.deposit_acc[-1]
        cached = self._deposits_cache.get(key)
        if cached is None:
            cached = defaultdict(list)
            for did, (recipient, _) in enumerate(bridge.deposits):
                cached[recipient].append(did)
            if len(self._deposits_cache) > 64:
                self._deposits_cache.clear()
            self._deposits_cache[key] = cached
        return cached

    def claim_deposits(self, owner: str, bridge: BridgeState, state: LedgerState,
                       sent: set) -> None:
        for did in self.deposits_by_recipient(bridge).get(owner, ()):
            if did in sent or state.deposit_claimed(did):
                continue
            recipient, amount = bridge.deposits[did]
            tx = Transaction(DepositClaim(did, amount, recipient), (),
                             (Output(amount, PayToKey(recipient)),))
            sent.add(did)
            self.submit_side_tx(owner, tx)

    # ---------------------------------------------------------------- actors

    def step_watchers(self) -> None:
        for w in self.watchers:
            view = self.views[w.view]
            call = watcher_step(w, view.bridge(), self.index, self.scheme)
            if call is not None and call.call_id not in view.canon_calls:
                self.broadcast(w.id, call)

    def step_finalizer(self) -> None:
        if not self.sc.finalizer:
            return
        view = self.views[self.sc.miners.names[0]]
        for call in finalizer_step("finalizer", view.bridge(), view.height + 1):
            if call.call_id not in view.canon_calls and call.call_id not in view.mempool:
                self.broadcast("finalizer", call)

    def step_users(self) -> None:
        cfg = self.sc.users
        r = self.round
        active = r >= cfg.start_round and (cfg.stop_round is None or r <= cfg.stop_round)
        rng = self.rng_users
        for u in self.users:
            view = self.views[u.view]
            bridge = view.bridge()
            self.user_withdrawals(u, bridge)
            if not active:
                continue
            if not u.deposited:
                u.deposited = True
                self.broadcast(u.id, BridgeCall(u.id, Deposit(u.id, cfg.deposit), u.next_nonce()))
                continue
            base = self.index.last_valid(bridge)
            state = self.index.state(base)
            self.claim_deposits(u.id, bridge, state, u.claims_sent)
            owned = [(op, c) for op, c in self.owners(base).get(u.id, ()) if op not in u.spending]
            if cfg.mode == "ring":
                for op, c in owned:
                    if cfg.max_transfers is not None and self.transfers >= cfg.max_transfers:
                        break
                    to = self.users[(u.index + 1) % len(self.users)].id
                    self.send(u, [(op, c)], [Output(c.output.value, PayToKey(to))])
                continue
            if owned and rng.random() < cfg.transfer_prob:
                if cfg.max_transfers is None or self.transfers < cfg.max_transfers:
                    op, c = owned[int(rng.integers(len(owned)))]
                    others = [x for x in self.users if x.id != u.id]
                    to = others[int(rng.integers(len(others)))].id if others else u.id
                    v = c.output.value
                    outs = [Output(v // 2, PayToKey(to)), Output(v - v // 2, PayToKey(u.id))] \
                        if v >= 2 else [Output(v, PayToKey(to))]
                    self.send(u, [(op, c)], outs)
                    owned = [(o, cc) for o, cc in owned if o != op]
            if owned and cfg.burn_prob > 0 and rng.random() < cfg.burn_prob:
                big = [(op, c) for op, c in owned if c.output.value >= cfg.burn_amount]
                if big:
                    op, c = big[int(rng.integers(len(big)))]
                    tx = burn_tx(u.id, op, c, cfg.burn_amount, u.id, self.scheme)
                    u.spending.add(op)
                    u.burns[tx.txid] = cfg.burn_amount
                    self.submit_side_tx(u.id, tx)

    def send(self, u: UserNode, spends, outputs) -> None:
        tx = Transaction(Transfer(), tuple(Input(op) for op, _ in spends), tuple(outputs))
        tx = sign_inputs(tx, [u.id] * len(spends), self.scheme)
        for op, _ in spends:
            u.spending.add(op)
        self.transfers += 1
        self.submit_side_tx(u.id, tx)

    def user_withdrawals(self, u: UserNode, bridge: BridgeState) -> None:
        view = self.views[u.view]
        for txid in list(u.burns):
            if (txid, 0) in bridge.withdrawals_paid:
                continue
            for hh, i in self.index.burns.get(txid, ()):
                if bridge.status(hh) != FINALIZED:
                    continue
                leaves = self.index.bodies[hh].tx_leaves()
                call = BridgeCall(u.id, Withdraw(leaves[i], merkle_prove(leaves, i), hh),
                                  int.from_bytes(txid[:8], "big"))
                if call.call_id not in view.canon_calls and call.call_id not in view.mempool:
                    self.broadcast(u.id, call)
                break

    def step_producers(self) -> None:
        mempool = list(self.side_mempool.values())
        for p in self.producers:
            view = self.views[p.view]
            bridge = view.bridge()
            if p.id in self.funds:
                if p.id not in self._funded:
                    self._funded.add(p.id)
                    self.broadcast(p.id, BridgeCall(p.id, Deposit(p.id, self.funds[p.id]),
                                                    p.next_nonce()))
                    continue
                state = self.index.state(self.index.last_valid(bridge))
                self.claim_deposits(p.id, bridge, state, self._fund_claims.setdefault(p.id, set()))
                mempool = list(self.side_mempool.values())
            call = step_producer(p, bridge, self.index, mempool, view.tip, self.rng_faults,
                                 self.scheme)
            if call is not None:
                self.broadcast(p.id, call)

    # ---------------------------------------------------------------- chain

    def winners(self) -> tuple[str, ...]:
        for s in self.sc.miners.script:
            if s.round == self.round:
                return s.winners
        names = self.sc.miners.names
        w = self.sc.miners.weights
        if w:
            probs = np.asarray(w, dtype=float) / float(sum(w))
            return (names[int(self.rng_sched.choice(len(names), p=probs))],)
        return (names[int(self.rng_sched.integers(len(names)))],)

    def delay(self, src: str, dst: str) -> int:
        d = 0
        for e in self.sc.miners.delays:
            if e.src == src and e.dst == dst and e.applies(self.round):
                d = max(d, e.rounds)
        return d

    def mine_round(self) -> list[ParentBlock]:
        mined = []
        for w in self.winners():
            block = mine(self.views[w], self.policies)
            self.index.learn(block)
            mined.append(block)
            self.log.emit(self.round, w, "mined", block=block.hash.hex(), height=block.height,
                          calls=len(block.calls))
            for m in self.views:
                if m != w:
                    self._seq += 1
                    self.in_flight.append((self.round + self.delay(w, m), self._seq, m, block))
        return mined

    def deliver_due(self, everything: bool = False) -> None:
        due = sorted((x for x in self.in_flight if everything or x[0] <= self.round),
                     key=lambda x: (x[0], x[1]))
        self.in_flight = [x for x in self.in_flight if not (everything or x[0] <= self.round)]
        for _, _, m, block in due:
            change = self.views[m].deliver(block)
            if change is not None and change.disconnected:
                self.log.emit(self.round, m, "view_reorg", depth=len(change.disconnected),
                              tip=self.views[m].tip.hex(), height=self.views[m].height)

    # ---------------------------------------------------------------- observer

    def observe(self, blocks: Iterable[ParentBlock]) -> None:
        for block in blocks:
            change = self.observer.deliver(block)
            if change is not None:
                self.log_change(change)

    def log_change(self, change: Reorg) -> None:
        for b in change.disconnected:
            self.log.emit(self.round, "observer", "parent_disconnect", block=b.hash.hex(),
                          height=b.height)
        for b in change.connected:
            self.log.emit(self.round, "observer", "parent_block", block=b.hash.hex(),
                          height=b.height, producer=b.producer, calls=len(b.calls))
            bridge = self.fold.state(b.hash)
            for ev in self.fold.events(b.hash):
                payload = {k: v for k, v in ev.items() if k != "kind"}
                self.log.emit(self.round, "bridge", ev["kind"], parent=b.hash.hex(),
                              parent_height=b.height, **payload)
                if ev["kind"] == "BlockSubmitted":
                    self.log_side_block(bytes.fromhex(ev["header"]), bridge)

    def log_side_block(self, hh: bytes, bridge: BridgeState) -> None:
        if hh in self._seen_headers:
            return
        self._seen_headers.add(hh)
        block = self.index.bodies[hh]
        err = self.index.check(bridge, hh)
        burns = [[short(tx.txid), tx.kind.parent_recipient, tx.outputs[0].value]
                 for tx in block.transactions if isinstance(tx.kind, BurnKind)]
        self.log.emit(self.round, "observer", "side_block", header=hh.hex(),
                      height=block.header.height, producer=block.header.producer_id,
                      valid=err is None, reason=None if err is None else err.reason,
                      tx_index=None if err is None else err.tx_index,
                      txs=[short(tx.txid) for tx in block.transactions], burns=burns)
        if self.sc.da.enabled:
            self.sample_availability(hh, block)

    def sample_availability(self, hh: bytes, block) -> None:
        da = self.sc.da
        coded = da_encode(block.encoded, da.k, da.n)
        chunks = list(coded.chunks)
        corrupt = da.corrupt_coding_at is not None and block.header.height == da.corrupt_coding_at
        if corrupt:
            bad = bytearray(chunks[da.k])
            bad[0] ^= 0xFF
            chunks[da.k] = bytes(bad)
            coded = type(coded)(coded.k, coded.n, coded.length, tuple(chunks), commit_chunks(chunks))
        strat = next((p.strategy for p in self.producers if p.id == block.header.producer_id), None)
        withheld: list[int] = []
        if isinstance(strat, WithholdingProducer) and strat.withhold:
            withheld = sorted(int(i) for i in self.rng_da.choice(da.n, size=strat.withhold, replace=False))
        server = ChunkServer(coded, withheld)
        for c in range(da.clients):
            res = sample(server, coded.chunk_root, da.n, da.samples, self.rng_da)
            self.log.emit(self.round, f"light{c}", "da_sample", header=hh.hex(),
                          requested=list(res.requested), received=list(res.received),
                          withheld=withheld, verdict=res.verdict)
        if corrupt:
            wits = [(i, coded.chunks[i], coded.proof(i)) for i in range(da.k)]
            proof = prove_incorrect_coding(coded.chunk_root, da.k, da.n, wits)
            ok = verify_incorrect_coding(proof.encode())
            self.log.emit(self.round, "full0", "da_coding_proof", header=hh.hex(), valid=ok,
                          size=len(proof.encode()))

    def snapshot(self) -> None:
        v = self.observer
        bridge = v.bridge()
        fin = bridge.chain[bridge.finalized_height - 1] if bridge.finalized_height else GENESIS_HASH
        ls = self.index.state(fin)
        unclaimed = sum(amount for did, (_, amount) in enumerate(bridge.deposits)
                        if not ls.deposit_claimed(did))
        self.log.emit(self.round, "observer", "snapshot", height=v.height, tip=v.tip.hex(),
                      locked=bridge.locked, circulating=ls.circulating,
                      unpaid_burns=ls.burned - bridge.paid_out, unclaimed_deposits=unclaimed,
                      escrowed=bridge.escrowed(), bonds_submitted=bridge.bonds_submitted,
                      bonds_released=bridge.bonds_released, bonds_rewarded=bridge.bonds_rewarded,
                      bonds_burned=bridge.bonds_burned, side_height=bridge.height,
                      finalized_height=bridge.finalized_height,
                      phase=halt_schedule(bridge, v.height + 1))
        views = {m: [view.tip.hex(), view.height, view.bridge().digest().hex()]
                 for m, view in self.views.items()}
        self.log.emit(self.round, "observer", "views", views=views)
        self.prune_mempool(bridge)

    def prune_mempool(self, bridge: BridgeState) -> None:
        for h in range(self._finalized_seen, bridge.finalized_height):
            for tx in self.index.bodies[bridge.chain[h]].transactions:
                self.side_mempool.pop(tx.txid, None)
        self._finalized_seen = max(self._finalized_seen, bridge.finalized_height)

    # ---------------------------------------------------------------- loop

    def run(self) -> EventLog:
        sc = self.sc
        self.log.emit(0, "harness", "scenario", name=sc.name, seed=sc.seed, rounds=sc.rounds,
                      config=sc.digest(), expect_fail=sorted(sc.expect_fail))
        for r in range(1, sc.rounds + 1):
            self.round = r
            self.step_watchers()
            self.step_finalizer()
            self.step_users()
            self.step_producers()
            mined = self.mine_round()
            self.observe(mined)
            self.deliver_due()
            self.snapshot()
            log.debug("round %d: observer height %d", r, self.observer.height)
        self.deliver_due(everything=True)
        self.snapshot()
        self.log.emit(self.round, "harness", "end", height=self.observer.height)
        return self.log


def simulate(scenario: Scenario) -> EventLog:
    return Simulation(scenario).run()
