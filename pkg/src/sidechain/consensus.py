"""Side-chain block production over the bridge.

Leader selection is first-come-first-served: whichever valid submission the
parent chain orders first extends the tip, and later ones for the same
height bounce with ``NotExtendingTip``.  In staked-shuffle mode the bridge
instead accepts only the leader drawn from the previous parent block hash.

Nodes read on-chain data through a :class:`SideIndex`, a memo of decoded
side blocks, their post-states and their validity.  All of it is a pure
function of posted calldata, so nodes share one index.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence, Union

import numpy as np

from .bridge import (
    FINALIZED, PENDING, SETTLED, STAKED_SHUFFLE, BridgeCall, BridgeState, Finalize, NoStakers,
    RegisterStake, SubmitBlock, SubmitFraudProof, halt_schedule, staked_shuffle_leader,
)
from .encoding import DecodeError
from .faults import CannotInject, inject_fault
from .fraud import ChainHistory, FraudProofError, generate_best_proof
from .ledger import (
    DEFAULT_SCHEME, GENESIS_HASH, BlockInvalid, BurnKind, KeyedHashScheme, LedgerState, PayToKey,
    SideBlock, Transaction, apply_block, assemble_block, decode_block, select_transactions,
)
from .parent import ParentBlock

__all__ = [
    "SideIndex", "Honest", "InvalidBlockInjector", "WithholdingProducer", "ProducerNode",
    "WatcherNode", "step_producer", "watcher_step", "finalizer_step", "staked_shuffle_leader",
    "NoStakers",
]


class SideIndex:
    """Side blocks posted on the parent chain, with memoized replay results."""

    def __init__(self, scheme: KeyedHashScheme = DEFAULT_SCHEME, window: int = 8):
        self.scheme = scheme
        self.bodies: dict[bytes, SideBlock] = {}
        self._states: dict[bytes, LedgerState] = {GENESIS_HASH: LedgerState.genesis(window)}
        self._validity: dict[tuple[bytes, bytes], Optional[BlockInvalid]] = {}
        self._seen: set[bytes] = set()
        # burn txid -> [(header hash, tx index)] over every posted block
        self.burns: dict[bytes, list[tuple[bytes, int]]] = {}

    def learn(self, block: ParentBlock) -> None:
        if block.hash in self._seen:
            return
        self._seen.add(block.hash)
        for call in block.calls:
            if isinstance(call.action, SubmitBlock):
                try:
                    sb = decode_block(call.action.block, lenient=True)
                except (DecodeError, ValueError):
                    continue
                if sb.header.hash in self.bodies:
                    continue
                self.bodies[sb.header.hash] = sb
                for i, tx in enumerate(sb.transactions):
                    if isinstance(tx.kind, BurnKind):
                        self.burns.setdefault(tx.txid, []).append((sb.header.hash, i))

    def state(self, header_hash: bytes) -> LedgerState:
        """Post-state of a header's effects (validity not implied)."""
        path = []
        h = header_hash
        while h not in self._states:
            b = self.bodies[h]
            path.append(b)
            h = b.header.prev_header_hash
        st = self._states[h]
        for b in reversed(path):
            st = apply_block(st, b, {}, self.scheme, enforce=False, check_body=False)
            self._states[b.header.hash] = st
        return self._states[header_hash]

    def check(self, bridge: BridgeState, header_hash: bytes) -> Optional[BlockInvalid]:
        """Full validation of a committed header against its parent's state.

        ``None`` means valid.  Results are keyed by the deposits the bridge
        authorized for the header.
        """
        rec = bridge.records[header_hash]
        key = (header_hash, bridge.deposit_acc[rec.deposit_count])
        if key in self._validity:
            return self._validity[key]
        block = self.bodies[header_hash]
        pre = self.state(block.header.prev_header_hash)
        try:
            post = apply_block(pre, block, bridge.deposits_for(block.header), self.scheme)
            self._states.setdefault(header_hash, post)
            result = None
        except BlockInvalid as exc:
            result = exc
        self._validity[key] = result
        return result

    def first_invalid(self, bridge: BridgeState, start: int = 0) -> Optional[tuple[int, bytes, BlockInvalid]]:
        """Earliest invalid header on the bridge chain at or after index ``start``."""
        for i in range(start, len(bridge.chain)):
            hh = bridge.chain[i]
            err = self.check(bridge, hh)
            if err is not None:
                return i + 1, hh, err
        return None

    def last_valid(self, bridge: BridgeState) -> bytes:
        bad = self.first_invalid(bridge, bridge.finalized_height)
        if bad is None:
            return bridge.tip
        height = bad[0]
        return bridge.chain[height - 2] if height >= 2 else GENESIS_HASH

    def history(self, bridge: BridgeState, below: int) -> ChainHistory:
        return ChainHistory([self.bodies[hh] for hh in bridge.chain[:below - 1]])


# ---------------------------------------------------------------- producers


@dataclass(frozen=True)
class Honest:
    pass


@dataclass(frozen=True)
class InvalidBlockInjector:
    fault: str
    at_height: int
    extend_invalid: bool = False  # keep building on the bad block without validating


@dataclass(frozen=True)
class WithholdingProducer:
    withhold: int  # chunks kept back in data-availability mode


Strategy = Union[Honest, InvalidBlockInjector, WithholdingProducer]


@dataclass
class ProducerNode:
    id: str
    view: str
    strategy: Strategy = field(default_factory=Honest)
    bond: int = 100
    k: int = 4
    max_txs: Optional[int] = None
    submit_empty: bool = False
    staked: bool = False
    ignore_halt: bool = False  # keep submitting after the halt (rejected on-chain)
    nonce: int = 0
    injected: bool = False
    stake_sent: bool = False

    def next_nonce(self) -> int:
        self.nonce += 1
        return self.nonce


def _owned(state: LedgerState, owner: str):
    return [(op, c) for op, c in state.utxo_entries()
            if isinstance(c.output.predicate, PayToKey) and c.output.predicate.owner == owner]


def _victims(state: LedgerState, owner: str, limit: int = 4):
    out = []
    for op, c in state.utxo_entries():
        p = c.output.predicate
        if isinstance(p, PayToKey) and p.owner != owner:
            out.append((op, c))
            if len(out) >= limit:
                break
    return out


def step_producer(node: ProducerNode, bridge: BridgeState, index: SideIndex,
                  mempool: Sequence[Transaction], parent_tip: bytes,
                  rng: np.random.Generator | None = None,
                  scheme: KeyedHashScheme = DEFAULT_SCHEME) -> Optional[BridgeCall]:
    """One production attempt on top of the bridge tip seen in ``bridge``.

    ``parent_tip`` is the hash of the producer's current parent-chain tip, the
    block a submission would be mined on top of.
    """
    if node.staked and not node.stake_sent:
        node.stake_sent = True
        return BridgeCall(node.id, RegisterStake(), node.next_nonce())
    params = bridge.params
    halting = not node.ignore_halt
    if halting and bridge.halt_started_at is not None:
        return None
    strat = node.strategy
    lenient = isinstance(strat, InvalidBlockInjector) and strat.extend_invalid and node.injected
    # honest nodes build on the last valid header; if the tip is invalid the
    # submission only lands after a fraud proof ordered ahead of it
    base = bridge.tip if lenient else index.last_valid(bridge)
    state = index.state(base)
    height = state.height + 1
    if halting and params.halt_height is not None and height >= params.halt_height:
        return None
    if params.leader_mode == STAKED_SHUFFLE:
        try:
            if staked_shuffle_leader(sorted(bridge.stakers), parent_tip, height) != node.id:
                return None
        except NoStakers:
            return None
    deposits = bridge.authorized_deposits()
    injecting = (isinstance(strat, InvalidBlockInjector) and not node.injected
                 and height == strat.at_height)
    txs = select_transactions(mempool, state, deposits, node.max_txs, scheme)
    if injecting:
        try:
            block = inject_fault(strat.fault, state, txs, own=_owned(state, node.id),
                                 victims=_victims(state, node.id), deposits=deposits,
                                 producer_id=node.id, bond=params.bond, k=params.k,
                                 position=len(txs) // 2, rng=rng, scheme=scheme)
        except CannotInject:
            return None
        node.injected = True
    else:
        if not txs and not node.submit_empty:
            return None
        block, _ = assemble_block(state, txs, node.id, params.bond, params.k)
    return BridgeCall(node.id, SubmitBlock(block.encoded, params.bond), node.next_nonce())


# ---------------------------------------------------------------- watchers


@dataclass
class WatcherNode:
    id: str
    view: str
    proofs: dict[bytes, bytes] = field(default_factory=dict)


def watcher_step(node: WatcherNode, bridge: BridgeState, index: SideIndex,
                 scheme: KeyedHashScheme = DEFAULT_SCHEME) -> Optional[BridgeCall]:
    """Replay pending headers; prove the earliest invalid one."""
    bad = index.first_invalid(bridge, bridge.finalized_height)
    if bad is None:
        return None
    height, hh, failure = bad
    proof = node.proofs.get(hh)
    if proof is None:
        block = index.bodies[hh]
        pre = index.state(block.header.prev_header_hash)
        try:
            fp = generate_best_proof(index.history(bridge, height), pre, block,
                                     bridge.deposits_for(block.header), failure, scheme)
        except FraudProofError:
            return None
        proof = node.proofs[hh] = fp.encode()
    # the nonce is derived from the target so repeated attempts are one call
    return BridgeCall(node.id, SubmitFraudProof(proof), int.from_bytes(hh[:8], "big"))


def finalizer_step(sender: str, bridge: BridgeState, next_parent_height: int) -> list[BridgeCall]:
    """Finalize calls for every header that will be eligible in the next parent block."""
    calls = []
    p = bridge.params
    settled = halt_schedule(bridge, next_parent_height) == SETTLED
    for i in range(bridge.finalized_height, len(bridge.chain)):
        rec = bridge.records[bridge.chain[i]]
        if rec.status != PENDING:
            break
        last = p.halt_height is not None and rec.header.height >= p.halt_height - 1
        if not settled and (last or next_parent_height < rec.submitted_at + p.delay):
            break
        hh = rec.header.hash
        calls.append(BridgeCall(sender, Finalize(hh), int.from_bytes(hh[:8], "big")))
    return calls
