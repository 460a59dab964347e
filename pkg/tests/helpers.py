"""Shared builders for ledger, fraud-proof and bridge tests."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from sidechain.faults import burn_tx
from sidechain.fraud import ChainHistory, HeaderChain
from sidechain.ledger import (
    DEFAULT_SCHEME, DepositClaim, Input, LedgerState, Output, PayToKey, SideBlock, Transaction,
    Transfer, apply_block, assemble_block, sign_inputs,
)

USERS = ("alice", "bob", "carol", "dave")


def claim_tx(deposit_id: int, recipient: str, amount: int) -> Transaction:
    return Transaction(DepositClaim(deposit_id, amount, recipient), (),
                       (Output(amount, PayToKey(recipient)),))


def pay(owner: str, spends, outputs) -> Transaction:
    """Signed transfer of ``spends`` [(outpoint, claim)] owned by ``owner``."""
    tx = Transaction(Transfer(), tuple(Input(op, b"", c) for op, c in spends), tuple(outputs))
    return sign_inputs(tx, [owner] * len(spends))


@dataclass
class Chain:
    """A valid side chain grown block by block, with its states and deposits."""
    k: int = 4
    window: int = 8
    states: list = field(default_factory=list)
    blocks: list = field(default_factory=list)
    deposits: dict = field(default_factory=dict)

    def __post_init__(self):
        self.states.append(LedgerState.genesis(self.window))

    @property
    def state(self) -> LedgerState:
        return self.states[-1]

    def add(self, txs, producer: str = "prod") -> SideBlock:
        block, post = assemble_block(self.state, txs, producer, 100, self.k)
        # every fixture block must be valid
        checked = apply_block(self.state, block, self.deposits)
        assert checked.smt_root == post.smt_root
        self.blocks.append(block)
        self.states.append(post)
        return block

    def fund(self, users=USERS, amount: int = 1000) -> SideBlock:
        base = len(self.deposits)
        txs = []
        for i, u in enumerate(users):
            self.deposits[base + i] = (u, amount)
            txs.append(claim_tx(base + i, u, amount))
        return self.add(txs)

    def owned(self, owner: str):
        return [(op, c) for op, c in self.state.utxo_entries()
                if isinstance(c.output.predicate, PayToKey) and c.output.predicate.owner == owner]

    def random_block(self, rng: np.random.Generator, n_txs: int, burn_prob: float = 0.0) -> SideBlock:
        """Up to ``n_txs`` random valid transfers among the fixture users."""
        txs, used = [], set()
        owners = [u for u in USERS]
        for _ in range(n_txs * 3):
            if len(txs) >= n_txs:
                break
            u = owners[int(rng.integers(len(owners)))]
            coins = [(op, c) for op, c in self.owned(u) if op not in used]
            if not coins:
                continue
            op, c = coins[int(rng.integers(len(coins)))]
            used.add(op)
            v = c.output.value
            if burn_prob and rng.random() < burn_prob and v >= 2:
                txs.append(burn_tx(u, op, c, v // 2, u))
                continue
            to = owners[int(rng.integers(len(owners)))]
            cut = int(rng.integers(1, v)) if v >= 2 else v
            outs = [Output(cut, PayToKey(to))] + ([Output(v - cut, PayToKey(u))] if v - cut else [])
            txs.append(pay(u, [(op, c)], outs))
        return self.add(txs)

    def history(self) -> ChainHistory:
        return ChainHistory(list(self.blocks))

    def committed(self, extra=()) -> HeaderChain:
        return HeaderChain([b.header for b in self.blocks] + [b.header for b in extra], self.deposits)


def grown_chain(seed: int, blocks: int = 3, n_txs: int = 8, k: int = 4) -> Chain:
    rng = np.random.default_rng(seed)
    ch = Chain(k=k)
    ch.fund()
    for _ in range(blocks):
        ch.random_block(rng, n_txs)
    return ch


@dataclass
class FaultCase:
    chain: Chain
    block: SideBlock  # invalid, extends chain.state

    @property
    def committed(self) -> HeaderChain:
        return self.chain.committed([self.block])


def faulty_case(seed: int, kind: str, blocks: int = 2, n_txs: int = 10, k: int = 4) -> FaultCase:
    """A valid chain followed by one block carrying fault ``kind``."""
    from sidechain.faults import inject_fault

    rng = np.random.default_rng(seed)
    ch = Chain(k=k)
    ch.fund()
    for _ in range(blocks):
        ch.random_block(rng, n_txs)
    state = ch.state
    pool = []
    used = set()
    for u in USERS[1:]:  # alice's coins stay free for the fault
        for op, c in ch.owned(u):
            v = c.output.value
            if len(pool) < n_txs - 1 and op not in used and rng.random() < 0.5:
                used.add(op)
                pool.append(pay(u, [(op, c)], [Output(v, PayToKey(USERS[int(rng.integers(4))]))]))
    own = [(op, c) for op, c in state.utxo_entries()
           if op not in used and c.output.predicate == PayToKey("alice")]
    victims = [(op, c) for op, c in state.utxo_entries()
               if op not in used and c.output.predicate != PayToKey("alice")]
    if kind == "bad_intermediate_root":
        while len(pool) <= k:
            did = max(ch.deposits) + 1
            ch.deposits[did] = ("erin", 10)
            pool.append(claim_tx(did, "erin", 10))
    pos = int(rng.integers(0, len(pool) + 1))
    block = inject_fault(kind, state, pool, own=own, victims=victims, deposits=ch.deposits,
                         producer_id="alice", k=k, position=pos, rng=rng)
    return FaultCase(ch, block)
