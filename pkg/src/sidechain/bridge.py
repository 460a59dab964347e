"""The parent-chain bridge contract as a deterministic state machine.

The contract stores side-chain headers (never executing them), escrows one
bond per pending header, adjudicates fraud proofs, finalizes headers after a
delay, registers deposits and pays withdrawals of finalized burns.  State is
a pure fold over the ordered call sequence of a parent-chain fork.

Calls are executed with :func:`exec_call` (copying) or :func:`apply_calls`
(one copy for a whole parent block).  A rejected call raises
:class:`CallRejected` and leaves the state untouched: every handler checks
all of its preconditions before mutating anything.
"""

from __future__ import annotations

from collections.abc import Mapping
from dataclasses import dataclass, field, replace
from typing import Iterator, Optional, Sequence, Union

from . import encoding as enc
from .encoding import DecodeError, Reader
from .fraud import FraudProofError, MalformedProof, decode_fraud_proof, verify_fraud_proof
from .hashing import MerkleProof, hash_leaf, merkle_root, merkle_verify
from .ledger import (
    DEFAULT_SCHEME, GENESIS_HASH, Burn, BurnKind, KeyedHashScheme, LedgerState, SideBlockHeader,
    UndecodableTx, decode_tx_lenient, num_segments, split_block,
)

PENDING = "Pending"
FINALIZED = "Finalized"
ORPHANED = "Orphaned"

ACTIVE = "Active"
CHALLENGE_ONLY = "ChallengeOnly"
SETTLED = "Settled"

FCFS = "fcfs"
STAKED_SHUFFLE = "staked_shuffle"

GENESIS_STATE_ROOT = LedgerState.genesis().smt_root


@dataclass(frozen=True)
class BridgeParams:
    bond: int = 100
    delay: int = 10
    k: int = 4
    challenge_window: int = 50
    halt_height: Optional[int] = None
    leader_mode: str = FCFS

    def encode(self) -> bytes:
        halt = 0 if self.halt_height is None else self.halt_height
        return b"".join([enc.u64(self.bond), enc.u64(self.delay), enc.u32(self.k),
                         enc.u64(self.challenge_window), enc.u64(halt), enc.text(self.leader_mode)])


# ---------------------------------------------------------------- calls


@dataclass(frozen=True)
class SubmitBlock:
    block: bytes
    bond: int


@dataclass(frozen=True)
class Deposit:
    recipient: str
    amount: int


@dataclass(frozen=True)
class SubmitFraudProof:
    proof: bytes


@dataclass(frozen=True)
class Finalize:
    header_hash: bytes


@dataclass(frozen=True)
class Withdraw:
    burn_tx: bytes
    proof: MerkleProof
    header_hash: bytes


@dataclass(frozen=True)
class RegisterStake:
    pass


Action = Union[SubmitBlock, Deposit, SubmitFraudProof, Finalize, Withdraw, RegisterStake]

_ACTION_CODES = {SubmitBlock: 1, Deposit: 2, SubmitFraudProof: 3, Finalize: 4, Withdraw: 5,
                 RegisterStake: 6}


@dataclass(frozen=True)
class BridgeCall:
    sender: str
    action: Action
    nonce: int = 0

    @property
    def encoded(self) -> bytes:
        cached = self.__dict__.get("_encoded")
        if cached is None:
            cached = encode_call(self)
            object.__setattr__(self, "_encoded", cached)
        return cached

    @property
    def call_id(self) -> bytes:
        cached = self.__dict__.get("_id")
        if cached is None:
            cached = hash_leaf(self.encoded)
            object.__setattr__(self, "_id", cached)
        return cached

    @property
    def kind(self) -> str:
        return type(self.action).__name__


def encode_call(call: BridgeCall) -> bytes:
    a = call.action
    parts = [enc.header(enc.TAG_CALL), enc.text(call.sender), enc.u64(call.nonce),
             enc.u8(_ACTION_CODES[type(a)])]
    if isinstance(a, SubmitBlock):
        parts += [enc.u64(a.bond), enc.blob(a.block)]
    elif isinstance(a, Deposit):
        parts += [enc.text(a.recipient), enc.u64(a.amount)]
    elif isinstance(a, SubmitFraudProof):
        parts.append(enc.blob(a.proof))
    elif isinstance(a, Finalize):
        parts.append(a.header_hash)
    elif isinstance(a, Withdraw):
        parts += [a.header_hash, enc.blob(a.burn_tx), enc.blob(a.proof.encode())]
    return b"".join(parts)


def decode_call(data: bytes) -> BridgeCall:
    r = Reader(data)
    r.expect_header(enc.TAG_CALL)
    sender, nonce, code = r.text(), r.u64(), r.u8()
    if code == 1:
        bond = r.u64()
        action: Action = SubmitBlock(r.blob(), bond)
    elif code == 2:
        action = Deposit(r.text(), r.u64())
    elif code == 3:
        action = SubmitFraudProof(r.blob())
    elif code == 4:
        action = Finalize(r.digest())
    elif code == 5:
        hh = r.digest()
        raw = r.blob()
        action = Withdraw(raw, MerkleProof.decode(r.blob()), hh)
    elif code == 6:
        action = RegisterStake()
    else:
        raise DecodeError(f"unknown call kind {code}")
    r.done()
    return BridgeCall(sender, action, nonce)


@dataclass(frozen=True)
class CallContext:
    """Where a call executes: the parent block's height and its predecessor's hash."""
    parent_height: int
    prev_parent_hash: bytes = bytes(32)


class CallRejected(Exception):
    def __init__(self, reason: str, detail: str = ""):
        super().__init__(f"{reason}: {detail}" if detail else reason)
        self.reason = reason


# ---------------------------------------------------------------- leader schedule


class NoStakers(Exception):
    pass


def staked_shuffle_leader(stakers: Sequence[str], parent_hash: bytes, side_height: int) -> str:
    """Leader for ``side_height`` drawn from ``parent_hash`` over the sorted stakers."""
    if not stakers:
        raise NoStakers("no registered stakers")
    ordered = sorted(stakers)
    seed = hash_leaf(parent_hash + enc.u64(side_height))
    return ordered[int.from_bytes(seed, "big") % len(ordered)]


# ---------------------------------------------------------------- state


@dataclass(frozen=True)
class HeaderRecord:
    header: SideBlockHeader
    submitted_at: int
    status: str
    deposit_count: int
    submitter: str


class DepositPrefix(Mapping):
    """The first ``count`` registered deposits, as the ledger's authorization map."""

    def __init__(self, deposits: Sequence[tuple[str, int]], count: int):
        self._deposits = deposits
        self._count = count

    def __getitem__(self, deposit_id: int) -> tuple[str, int]:
        if isinstance(deposit_id, int) and 0 <= deposit_id < self._count:
            return self._deposits[deposit_id]
        raise KeyError(deposit_id)

    def __iter__(self) -> Iterator[int]:
        return iter(range(self._count))

    def __len__(self) -> int:
        return self._count


@dataclass
class BridgeState:
    """Contract storage.  Treat instances as values; use :func:`exec_call`."""

    params: BridgeParams = field(default_factory=BridgeParams)
    records: dict[bytes, HeaderRecord] = field(default_factory=dict)
    chain: list[bytes] = field(default_factory=list)   # hashes at side heights 1..tip
    finalized_height: int = 0
    deposits: list[tuple[str, int]] = field(default_factory=list)
    # running digest over the deposit list; deposit_acc[i] commits to the first i
    deposit_acc: list[bytes] = field(default_factory=lambda: [bytes(32)])
    withdrawals_paid: set[tuple[bytes, int]] = field(default_factory=set)
    stakers: set[str] = field(default_factory=set)
    halt_started_at: Optional[int] = None
    locked: int = 0
    paid_out: int = 0
    bonds_submitted: int = 0
    bonds_released: int = 0
    bonds_rewarded: int = 0
    bonds_burned: int = 0

    @classmethod
    def genesis(cls, params: BridgeParams | None = None) -> "BridgeState":
        return cls(params=params or BridgeParams())

    def copy(self) -> "BridgeState":
        return replace(self, records=dict(self.records), chain=list(self.chain),
                       deposits=list(self.deposits), deposit_acc=list(self.deposit_acc),
                       withdrawals_paid=set(self.withdrawals_paid),
                       stakers=set(self.stakers))

    # -- views

    @property
    def tip(self) -> bytes:
        return self.chain[-1] if self.chain else GENESIS_HASH

    @property
    def height(self) -> int:
        return len(self.chain)

    def status(self, header_hash: bytes) -> Optional[str]:
        rec = self.records.get(header_hash)
        return None if rec is None else rec.status

    def escrowed(self) -> int:
        return sum(r.header.bond for r in self.records.values() if r.status == PENDING)

    def pending(self) -> list[bytes]:
        return self.chain[self.finalized_height:]

    # -- CommittedChain protocol (what fraud proofs are checked against)

    def header(self, header_hash: bytes) -> Optional[SideBlockHeader]:
        rec = self.records.get(header_hash)
        if rec is None or rec.status == ORPHANED:
            return None
        return rec.header

    def header_at(self, height: int) -> Optional[SideBlockHeader]:
        if 1 <= height <= len(self.chain):
            return self.records[self.chain[height - 1]].header
        return None

    def pre_state_root(self, header: SideBlockHeader) -> bytes:
        if header.height <= 1:
            return GENESIS_STATE_ROOT
        return self.records[header.prev_header_hash].header.state_root

    def deposits_for(self, header: SideBlockHeader) -> DepositPrefix:
        return DepositPrefix(self.deposits, self.records[header.hash].deposit_count)

    def authorized_deposits(self) -> DepositPrefix:
        return DepositPrefix(self.deposits, len(self.deposits))

    # -- canonical bytes, for bitwise comparison across views

    def encode(self) -> bytes:
        parts = [enc.header(enc.TAG_BRIDGE_STATE), self.params.encode(),
                 enc.u32(len(self.records))]
        for hh in sorted(self.records):
            rec = self.records[hh]
            parts += [enc.blob(rec.header.encoded), enc.u64(rec.submitted_at),
                      enc.text(rec.status), enc.u64(rec.deposit_count), enc.text(rec.submitter)]
        parts.append(enc.u32(len(self.chain)))
        parts += self.chain
        parts.append(enc.u64(self.finalized_height))
        parts.append(enc.u32(len(self.deposits)))
        for recipient, amount in self.deposits:
            parts += [enc.text(recipient), enc.u64(amount)]
        parts.append(enc.u32(len(self.withdrawals_paid)))
        for txid, idx in sorted(self.withdrawals_paid):
            parts += [txid, enc.u32(idx)]
        parts.append(enc.u32(len(self.stakers)))
        parts += [enc.text(s) for s in sorted(self.stakers)]
        parts.append(enc.u64(0 if self.halt_started_at is None else self.halt_started_at + 1))
        for n in (self.locked, self.paid_out, self.bonds_submitted, self.bonds_released,
                  self.bonds_rewarded, self.bonds_burned):
            parts.append(enc.u64(n))
        return b"".join(parts)

    def digest(self) -> bytes:
        return hash_leaf(self.encode())


def halt_schedule(state: BridgeState, parent_height: int) -> str:
    if state.halt_started_at is None:
        return ACTIVE
    if parent_height < state.halt_started_at + state.params.challenge_window:
        return CHALLENGE_ONLY
    return SETTLED


# ---------------------------------------------------------------- execution


def _event(kind: str, **fields) -> dict:
    return {"kind": kind, **fields}


def _submit(st: BridgeState, call: BridgeCall, a: SubmitBlock, ctx: CallContext) -> list[dict]:
    p = st.params
    try:
        hdr_bytes, leaves = split_block(a.block)
        header = SideBlockHeader.decode(hdr_bytes)
    except (DecodeError, ValueError) as exc:
        raise CallRejected("MalformedBlock", str(exc)) from None
    if st.halt_started_at is not None or (p.halt_height is not None and header.height >= p.halt_height):
        raise CallRejected("ChainHalted")
    if header.prev_header_hash != st.tip or header.height != st.height + 1:
        raise CallRejected("NotExtendingTip")
    if a.bond != p.bond or header.bond != p.bond:
        raise CallRejected("WrongBond")
    if header.producer_id != call.sender:
        raise CallRejected("NotProducer")
    if p.leader_mode == STAKED_SHUFFLE:
        try:
            leader = staked_shuffle_leader(sorted(st.stakers), ctx.prev_parent_hash, header.height)
        except NoStakers:
            raise CallRejected("NoStakers") from None
        if call.sender != leader:
            raise CallRejected("NotLeader", f"leader is {leader}")
    if header.tx_count != len(leaves) or header.txs_root != merkle_root(leaves):
        raise CallRejected("BodyRootMismatch")
    if header.k != p.k or len(header.intermediate_roots) != num_segments(header.tx_count, header.k) - 1:
        raise CallRejected("MalformedHeader")

    hh = header.hash
    st.records[hh] = HeaderRecord(header, ctx.parent_height, PENDING, len(st.deposits), call.sender)
    st.chain.append(hh)
    st.bonds_submitted += a.bond
    if p.halt_height is not None and header.height == p.halt_height - 1:
        st.halt_started_at = ctx.parent_height
    return [_event("BlockSubmitted", header=hh.hex(), height=header.height,
                   producer=call.sender, bond=a.bond, tx_count=header.tx_count)]


def _deposit(st: BridgeState, call: BridgeCall, a: Deposit, ctx: CallContext) -> list[dict]:
    if a.amount <= 0:
        raise CallRejected("InvalidAmount")
    deposit_id = len(st.deposits)
    st.deposits.append((a.recipient, a.amount))
    st.deposit_acc.append(hash_leaf(st.deposit_acc[-1] + enc.text(a.recipient) + enc.u64(a.amount)))
    st.locked += a.amount
    return [_event("DepositRegistered", deposit_id=deposit_id, sender=call.sender,
                   recipient=a.recipient, amount=a.amount)]


def _fraud(st: BridgeState, call: BridgeCall, a: SubmitFraudProof, ctx: CallContext,
           scheme: KeyedHashScheme) -> list[dict]:
    try:
        proof = decode_fraud_proof(a.proof)
    except (DecodeError, ValueError) as exc:
        raise CallRejected("ProofInvalid", f"undecodable: {exc}") from None
    target = proof.block_header_hash
    rec = st.records.get(target)
    if rec is None or rec.status == ORPHANED:
        raise CallRejected("UnknownHeader")
    if rec.status == FINALIZED:
        raise CallRejected("AlreadyFinalized")
    try:
        verdict = verify_fraud_proof(st, proof, scheme)
    except FraudProofError as exc:
        raise CallRejected("ProofInvalid", str(exc)) from None
    if not verdict.valid or verdict.faulted_header != target:
        raise CallRejected("ProofInvalid", verdict.reason)

    h = rec.header.height
    orphaned = st.chain[h - 1:]
    del st.chain[h - 1:]
    events = []
    total = 0
    for hh in orphaned:
        r = st.records[hh]
        st.records[hh] = replace(r, status=ORPHANED)
        total += r.header.bond
        events.append(_event("BlockOrphaned", header=hh.hex(), height=r.header.height,
                             producer=r.submitter, bond=r.header.bond))
    reward = total // 2
    st.bonds_rewarded += reward
    st.bonds_burned += total - reward
    scheme_tag = "A" if a.proof[1] == enc.TAG_PROOF_A else "B"
    events.insert(0, _event("FraudProven", header=target.hex(), height=h, prover=call.sender,
                            scheme=scheme_tag, reason=verdict.reason, orphaned=len(orphaned),
                            reward=reward, burned=total - reward, proof_size=len(a.proof)))
    return events


def _finalize(st: BridgeState, call: BridgeCall, a: Finalize, ctx: CallContext) -> list[dict]:
    rec = st.records.get(a.header_hash)
    if rec is None or rec.status == ORPHANED:
        raise CallRejected("UnknownHeader")
    if rec.status == FINALIZED:
        raise CallRejected("AlreadyFinalized")
    h = rec.header.height
    if h != st.finalized_height + 1:
        raise CallRejected("AncestorNotFinal")
    p = st.params
    phase = halt_schedule(st, ctx.parent_height)
    if phase != SETTLED:
        last = p.halt_height is not None and h >= p.halt_height - 1
        if last or ctx.parent_height < rec.submitted_at + p.delay:
            raise CallRejected("TooEarly")
    st.records[a.header_hash] = replace(rec, status=FINALIZED)
    st.finalized_height = h
    st.bonds_released += rec.header.bond
    return [_event("BlockFinalized", header=a.header_hash.hex(), height=h,
                   producer=rec.submitter, bond=rec.header.bond, submitted_at=rec.submitted_at)]


def _withdraw(st: BridgeState, call: BridgeCall, a: Withdraw, ctx: CallContext) -> list[dict]:
    rec = st.records.get(a.header_hash)
    if rec is None or rec.status == ORPHANED:
        raise CallRejected("UnknownHeader")
    if rec.status != FINALIZED:
        raise CallRejected("NotFinalized")
    hdr = rec.header
    mp = a.proof
    if mp.tree_size != hdr.tx_count or not merkle_verify(hdr.txs_root, a.burn_tx, mp):
        raise CallRejected("BadInclusionProof")
    tx = decode_tx_lenient(a.burn_tx)
    if (isinstance(tx, UndecodableTx) or not isinstance(tx.kind, BurnKind) or not tx.outputs
            or not isinstance(tx.outputs[0].predicate, Burn)):
        raise CallRejected("BadInclusionProof", "not a burn")
    out = tx.outputs[0]
    if out.predicate.parent_recipient != call.sender:
        raise CallRejected("NotRecipient")
    key = (tx.txid, 0)
    if key in st.withdrawals_paid:
        raise CallRejected("AlreadyPaid")
    st.withdrawals_paid.add(key)
    st.locked -= out.value
    st.paid_out += out.value
    return [_event("WithdrawalPaid", txid=tx.txid.hex(), header=a.header_hash.hex(),
                   height=hdr.height, tx_index=mp.leaf_index, recipient=call.sender,
                   amount=out.value)]


def _stake(st: BridgeState, call: BridgeCall, a: RegisterStake, ctx: CallContext) -> list[dict]:
    if call.sender in st.stakers:
        raise CallRejected("AlreadyStaked")
    st.stakers.add(call.sender)
    return [_event("StakeRegistered", staker=call.sender)]


def _dispatch(st: BridgeState, call: BridgeCall, ctx: CallContext,
              scheme: KeyedHashScheme) -> list[dict]:
    a = call.action
    if isinstance(a, SubmitBlock):
        return _submit(st, call, a, ctx)
    if isinstance(a, Deposit):
        return _deposit(st, call, a, ctx)
    if isinstance(a, SubmitFraudProof):
        return _fraud(st, call, a, ctx, scheme)
    if isinstance(a, Finalize):
        return _finalize(st, call, a, ctx)
    if isinstance(a, Withdraw):
        return _withdraw(st, call, a, ctx)
    if isinstance(a, RegisterStake):
        return _stake(st, call, a, ctx)
    raise CallRejected("UnknownCall")


def exec_call(state: BridgeState, call: BridgeCall, ctx: CallContext | int,
              scheme: KeyedHashScheme = DEFAULT_SCHEME) -> tuple[BridgeState, list[dict]]:
    """Execute one call; raises :class:`CallRejected` without touching ``state``."""
    if isinstance(ctx, int):
        ctx = CallContext(ctx)
    st = state.copy()
    events = _dispatch(st, call, ctx, scheme)
    return st, events


def apply_calls(state: BridgeState, calls: Sequence[BridgeCall], ctx: CallContext,
                scheme: KeyedHashScheme = DEFAULT_SCHEME) -> tuple[BridgeState, list[dict]]:
    """Fold a parent block's calls.  Rejections appear as ``CallRejected`` events."""
    st = state.copy()
    events: list[dict] = []
    for i, call in enumerate(calls):
        try:
            evs = _dispatch(st, call, ctx, scheme)
        except CallRejected as exc:
            evs = [_event("CallRejected", reason=exc.reason)]
        for ev in evs:
            ev["call"] = call.call_id.hex()
            ev["call_kind"] = call.kind
            ev["sender"] = ev.get("sender", call.sender)
        events += evs
    return st, events
