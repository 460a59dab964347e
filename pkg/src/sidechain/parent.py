"""Simulated parent chain: blocks, per-miner fork views, censorship and the
per-fork bridge fold.

Proof of work is replaced by a deterministic winner schedule.  Every miner
keeps a :class:`ForkView` (known blocks, longest-chain tip with first-seen
tie breaking, a mempool of bridge calls).  The bridge state at any block is
the fold of :func:`~sidechain.bridge.apply_calls` over its ancestry, shared
between views through a :class:`BridgeFold` memo keyed by block hash.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Optional, Sequence

from . import encoding as enc
from .bridge import BridgeCall, BridgeParams, BridgeState, CallContext, apply_calls, decode_call
from .encoding import Reader
from .hashing import hash_leaf
from .ledger import DEFAULT_SCHEME, KeyedHashScheme


@dataclass(frozen=True)
class ParentBlock:
    prev: bytes
    height: int
    producer: str
    calls: tuple[BridgeCall, ...] = ()
    filler: bytes = b""

    @cached_property
    def encoded(self) -> bytes:
        parts = [enc.header(enc.TAG_PARENT_BLOCK), self.prev, enc.u64(self.height),
                 enc.text(self.producer), enc.u32(len(self.calls))]
        parts += [enc.blob(c.encoded) for c in self.calls]
        parts.append(enc.blob(self.filler))
        return b"".join(parts)

    @cached_property
    def hash(self) -> bytes:
        return hash_leaf(self.encoded)

    @classmethod
    def decode(cls, data: bytes) -> "ParentBlock":
        r = Reader(data)
        r.expect_header(enc.TAG_PARENT_BLOCK)
        prev, height, producer, n = r.digest(), r.u64(), r.text(), r.u32()
        calls = tuple(decode_call(r.blob()) for _ in range(n))
        filler = r.blob()
        r.done()
        return cls(prev, height, producer, calls, filler)


PARENT_GENESIS = ParentBlock(bytes(32), 0, "genesis")


# ---------------------------------------------------------------- adversaries


@dataclass(frozen=True)
class CensorSender:
    """Every miner drops calls from ``ids`` for blocks at heights
    ``from_height .. from_height + duration_blocks - 1``."""
    ids: frozenset[str]
    from_height: int
    duration_blocks: int

    def excludes(self, call: BridgeCall, height: int) -> bool:
        return (call.sender in self.ids
                and self.from_height <= height < self.from_height + self.duration_blocks)


@dataclass(frozen=True)
class WithholdBlockBody:
    """A producer that keeps its block body off-chain (DA mode only)."""
    target: str

    def excludes(self, call: BridgeCall, height: int) -> bool:
        return False


# ---------------------------------------------------------------- bridge fold


class BridgeFold:
    """Memoized bridge state and events after every parent block.

    Every block is snapshotted; states are only ever derived from their
    parent's snapshot, so the memo is exactly the pure fold.
    """

    def __init__(self, params: BridgeParams, scheme: KeyedHashScheme = DEFAULT_SCHEME):
        self.params = params
        self.scheme = scheme
        self.blocks: dict[bytes, ParentBlock] = {PARENT_GENESIS.hash: PARENT_GENESIS}
        self._states: dict[bytes, BridgeState] = {PARENT_GENESIS.hash: BridgeState.genesis(params)}
        self._events: dict[bytes, list[dict]] = {PARENT_GENESIS.hash: []}

    def add(self, block: ParentBlock) -> None:
        self.blocks.setdefault(block.hash, block)

    def state(self, block_hash: bytes) -> BridgeState:
        st = self._states.get(block_hash)
        if st is not None:
            return st
        # walk back to the nearest snapshot, then fold forward
        path = []
        h = block_hash
        while h not in self._states:
            b = self.blocks[h]
            path.append(b)
            h = b.prev
        st = self._states[h]
        for b in reversed(path):
            st, events = apply_calls(st, b.calls, CallContext(b.height, b.prev), self.scheme)
            self._states[b.hash] = st
            self._events[b.hash] = events
        return st

    def events(self, block_hash: bytes) -> list[dict]:
        self.state(block_hash)
        return self._events[block_hash]


def replay_bridge(blocks: Sequence[ParentBlock], params: BridgeParams,
                  scheme: KeyedHashScheme = DEFAULT_SCHEME) -> BridgeState:
    """Unmemoized fold over a chain of blocks (genesis excluded); the oracle
    for :class:`BridgeFold`."""
    st = BridgeState.genesis(params)
    for b in blocks:
        st, _ = apply_calls(st, b.calls, CallContext(b.height, b.prev), scheme)
    return st


# ---------------------------------------------------------------- views


@dataclass
class Reorg:
    disconnected: list[ParentBlock]
    connected: list[ParentBlock]


@dataclass
class ForkView:
    owner: str
    fold: BridgeFold
    blocks: dict[bytes, ParentBlock] = field(default_factory=dict)
    tip: bytes = PARENT_GENESIS.hash
    mempool: "OrderedDict[bytes, BridgeCall]" = field(default_factory=OrderedDict)
    buffered: dict[bytes, list[ParentBlock]] = field(default_factory=dict)
    canon_calls: dict[bytes, int] = field(default_factory=dict)
    history: list[Reorg] = field(default_factory=list)

    def __post_init__(self):
        self.blocks.setdefault(PARENT_GENESIS.hash, PARENT_GENESIS)

    @property
    def tip_block(self) -> ParentBlock:
        return self.blocks[self.tip]

    @property
    def height(self) -> int:
        return self.tip_block.height

    def bridge(self) -> BridgeState:
        return bridge_state_of(self, self.tip)

    def chain(self, tip: bytes | None = None) -> list[ParentBlock]:
        """Blocks from height 1 up to ``tip`` (default: local tip)."""
        out = []
        h = self.tip if tip is None else tip
        while h != PARENT_GENESIS.hash:
            b = self.blocks[h]
            out.append(b)
            h = b.prev
        out.reverse()
        return out

    def submit(self, call: BridgeCall) -> None:
        """Add a call to the mempool unless already on the canonical chain."""
        cid = call.call_id
        if cid not in self.canon_calls and cid not in self.mempool:
            self.mempool[cid] = call

    def pending_calls(self) -> list[BridgeCall]:
        return list(self.mempool.values())

    def deliver(self, block: ParentBlock) -> Optional[Reorg]:
        """Learn ``block``; returns the tip change it caused, if any."""
        if block.hash in self.blocks:
            return None
        if block.prev not in self.blocks:
            pending = self.buffered.setdefault(block.prev, [])
            if block not in pending:
                pending.append(block)
            return None
        change = None
        queue = [block]
        while queue:
            b = queue.pop(0)
            if b.hash in self.blocks:
                continue
            self.blocks[b.hash] = b
            self.fold.add(b)
            if b.height > self.height:
                step = self._switch(b.hash)
                if change is None:
                    change = step
                else:
                    change = _merge(change, step)
            queue.extend(self.buffered.pop(b.hash, []))
        if change is not None:
            self.history.append(change)
        return change

    def _switch(self, new_tip: bytes) -> Reorg:
        old, new = self.tip, new_tip
        disconnected, connected = [], []
        a, b = self.blocks[old], self.blocks[new]
        while a.height > b.height:
            disconnected.append(a)
            a = self.blocks[a.prev]
        while b.height > a.height:
            connected.append(b)
            b = self.blocks[b.prev]
        while a.hash != b.hash:
            disconnected.append(a)
            connected.append(b)
            a, b = self.blocks[a.prev], self.blocks[b.prev]
        connected.reverse()
        for blk in disconnected:
            for c in blk.calls:
                self.canon_calls.pop(c.call_id, None)
        for blk in connected:
            for c in blk.calls:
                self.canon_calls[c.call_id] = blk.height
        # calls of abandoned blocks go back to the mempool, oldest first
        returned = OrderedDict()
        for blk in reversed(disconnected):
            for c in blk.calls:
                if c.call_id not in self.canon_calls:
                    returned[c.call_id] = c
        for cid, c in self.mempool.items():
            if cid not in self.canon_calls and cid not in returned:
                returned[cid] = c
        self.mempool = returned
        self.tip = new
        return Reorg(disconnected, connected)


def _merge(first: Reorg, second: Reorg) -> Reorg:
    connected = list(first.connected)
    disconnected = list(first.disconnected)
    for b in second.disconnected:
        if b in connected:
            connected.remove(b)
        else:
            disconnected.append(b)
    return Reorg(disconnected, connected + second.connected)


def mine(view: ForkView, policies: Iterable = (), filler: bytes = b"",
         max_calls: Optional[int] = None) -> ParentBlock:
    """The owner of ``view`` mines on its local tip (the schedule picked it)."""
    height = view.height + 1
    policies = tuple(policies)
    calls = [c for c in view.mempool.values()
             if not any(p.excludes(c, height) for p in policies)]
    if max_calls is not None:
        calls = calls[:max_calls]
    block = ParentBlock(view.tip, height, view.owner, tuple(calls), filler)
    view.deliver(block)
    return block


def deliver(block: ParentBlock, view: ForkView) -> ForkView:
    view.deliver(block)
    return view


def bridge_state_of(view: ForkView, tip: bytes | None = None) -> BridgeState:
    h = view.tip if tip is None else tip
    if h not in view.blocks:
        raise KeyError("tip not in view")
    return view.fold.state(h)
