"""UTXO side-chain ledger: data model, validity rules and block transitions.

State lives entirely in a :class:`~sidechain.smt.SparseMerkleTree`.  Each
unspent output sits under ``outpoint_key(outpoint)`` with the hash of its
:class:`Claim` (output plus the height/index of the transaction that created
it) as value; claimed deposits sit under ``deposit_key(id)``.  The state root
therefore commits to everything a validator needs, which lets the same rule
code run against a full tree, a partial tree rebuilt from a fraud-proof
witness, or inclusion proofs supplied by a stateless client.
"""

from __future__ import annotations

import hmac
import hashlib
from dataclasses import dataclass, field, replace
from functools import cached_property, lru_cache
from typing import Iterable, Mapping, Optional, Sequence, Union

from . import encoding as enc
from .encoding import DecodeError, Reader
from .hashing import Digest, hash_leaf, merkle_root
from .smt import SmtProof, SparseMerkleTree, smt_verify

DEFAULT_SEGMENT = 4
DEFAULT_WITNESS_WINDOW = 8
GENESIS_HASH = bytes(32)
MAX_PREDICATE_DEPTH = 8

# ---------------------------------------------------------------- predicates


@dataclass(frozen=True)
class PayToKey:
    owner: str


@dataclass(frozen=True)
class HashLock:
    digest: bytes


@dataclass(frozen=True)
class TimeLock:
    unlock_height: int
    inner: "Predicate"


@dataclass(frozen=True)
class Burn:
    """Unspendable output recording who may withdraw it on the parent chain."""
    parent_recipient: str


Predicate = Union[PayToKey, HashLock, TimeLock, Burn]


class KeyedHashScheme:
    """Witness seam: a MAC over the txid under a per-owner key.

    Owner keys are derived from a scheme secret, so only holders of the scheme
    object can produce witnesses.  This stands in for signatures.
    """

    def __init__(self, secret: bytes = b"sidechain/keyed-hash-stub"):
        self._secret = secret
        self._key = lru_cache(maxsize=65536)(self._derive)

    def _derive(self, owner: str) -> bytes:
        return hmac.new(self._secret, owner.encode(), hashlib.sha256).digest()

    def sign(self, owner: str, message: bytes) -> bytes:
        return hmac.new(self._key(owner), message, hashlib.sha256).digest()

    def verify(self, owner: str, message: bytes, witness: bytes) -> bool:
        return hmac.compare_digest(self.sign(owner, message), witness)


DEFAULT_SCHEME = KeyedHashScheme()


def predicate_satisfied(pred: Predicate, witness: bytes, txid: bytes, height: int,
                        scheme: KeyedHashScheme = DEFAULT_SCHEME) -> bool:
    if isinstance(pred, PayToKey):
        return scheme.verify(pred.owner, txid, witness)
    if isinstance(pred, HashLock):
        return hash_leaf(witness) == pred.digest
    if isinstance(pred, TimeLock):
        return height >= pred.unlock_height and predicate_satisfied(
            pred.inner, witness, txid, height, scheme)
    return False


# ---------------------------------------------------------------- data model


@dataclass(frozen=True)
class Outpoint:
    txid: bytes
    index: int


@dataclass(frozen=True)
class Output:
    value: int
    predicate: Predicate


@dataclass(frozen=True)
class Claim:
    """What a block producer asserts an input spends: the exact output and
    where it was created (side height, tx position)."""
    output: Output
    height: int
    tx_index: int


@dataclass(frozen=True)
class Input:
    outpoint: Outpoint
    witness: bytes = b""
    claim: Optional[Claim] = None


@dataclass(frozen=True)
class Transfer:
    pass


@dataclass(frozen=True)
class DepositClaim:
    deposit_id: int
    amount: int
    recipient: str


@dataclass(frozen=True)
class BurnKind:
    amount: int
    parent_recipient: str


TxKind = Union[Transfer, DepositClaim, BurnKind]


@dataclass(frozen=True)
class StateWitness:
    """SMT proof for one input (or the deposit marker) of a stateless tx."""
    ref_height: int
    proof: SmtProof


@dataclass(frozen=True)
class Transaction:
    kind: TxKind
    inputs: tuple[Input, ...] = ()
    outputs: tuple[Output, ...] = ()
    smt_witnesses: tuple[StateWitness, ...] = ()

    @cached_property
    def core_bytes(self) -> bytes:
        return encode_tx(self, full=False)

    @cached_property
    def txid(self) -> bytes:
        return hash_leaf(self.core_bytes)

    @cached_property
    def encoded(self) -> bytes:
        return encode_tx(self)

    def with_claims(self, claims: Sequence[Optional[Claim]]) -> "Transaction":
        ins = tuple(replace(i, claim=c) for i, c in zip(self.inputs, claims))
        return replace(self, inputs=ins)

    def with_witnesses(self, witnesses: Sequence[bytes]) -> "Transaction":
        ins = tuple(replace(i, witness=w) for i, w in zip(self.inputs, witnesses))
        return replace(self, inputs=ins)


def sign_inputs(tx: Transaction, owners: Sequence[str],
                scheme: KeyedHashScheme = DEFAULT_SCHEME) -> Transaction:
    """Attach PayToKey witnesses; ``owners[i]`` signs input ``i``."""
    return tx.with_witnesses([scheme.sign(o, tx.txid) for o in owners])


# ---------------------------------------------------------------- encodings

_PRED_PAY, _PRED_HASH, _PRED_TIME, _PRED_BURN = range(4)
_KIND_TRANSFER, _KIND_DEPOSIT, _KIND_BURN = range(3)


def encode_predicate(p: Predicate) -> bytes:
    if isinstance(p, PayToKey):
        return enc.u8(_PRED_PAY) + enc.text(p.owner)
    if isinstance(p, HashLock):
        if len(p.digest) != 32:
            raise ValueError("hash lock digest must be 32 bytes")
        return enc.u8(_PRED_HASH) + p.digest
    if isinstance(p, TimeLock):
        return enc.u8(_PRED_TIME) + enc.u64(p.unlock_height) + encode_predicate(p.inner)
    if isinstance(p, Burn):
        return enc.u8(_PRED_BURN) + enc.text(p.parent_recipient)
    raise TypeError(f"unknown predicate {p!r}")


def _read_predicate(r: Reader, depth: int = 0) -> Predicate:
    if depth > MAX_PREDICATE_DEPTH:
        raise DecodeError("predicate nesting too deep")
    tag = r.u8()
    if tag == _PRED_PAY:
        return PayToKey(r.text())
    if tag == _PRED_HASH:
        return HashLock(r.digest())
    if tag == _PRED_TIME:
        return TimeLock(r.u64(), _read_predicate(r, depth + 1))
    if tag == _PRED_BURN:
        return Burn(r.text())
    raise DecodeError(f"unknown predicate tag {tag}")


def encode_output(o: Output) -> bytes:
    return enc.u64(o.value) + encode_predicate(o.predicate)


def _read_output(r: Reader) -> Output:
    return Output(r.u64(), _read_predicate(r))


def encode_claim(c: Claim) -> bytes:
    return encode_output(c.output) + enc.u64(c.height) + enc.u32(c.tx_index)


def _read_claim(r: Reader) -> Claim:
    return Claim(_read_output(r), r.u64(), r.u32())


def _encode_kind(k: TxKind) -> bytes:
    if isinstance(k, Transfer):
        return enc.u8(_KIND_TRANSFER)
    if isinstance(k, DepositClaim):
        return enc.u8(_KIND_DEPOSIT) + enc.u64(k.deposit_id) + enc.u64(k.amount) + enc.text(k.recipient)
    if isinstance(k, BurnKind):
        return enc.u8(_KIND_BURN) + enc.u64(k.amount) + enc.text(k.parent_recipient)
    raise TypeError(f"unknown tx kind {k!r}")


def _read_kind(r: Reader) -> TxKind:
    tag = r.u8()
    if tag == _KIND_TRANSFER:
        return Transfer()
    if tag == _KIND_DEPOSIT:
        return DepositClaim(r.u64(), r.u64(), r.text())
    if tag == _KIND_BURN:
        return BurnKind(r.u64(), r.text())
    raise DecodeError(f"unknown tx kind tag {tag}")


def encode_tx(tx: Transaction, full: bool = True) -> bytes:
    """Canonical encoding.  ``full=False`` gives the txid preimage, which
    leaves out witnesses, producer claims and SMT witnesses."""
    parts = [enc.header(enc.TAG_TX if full else enc.TAG_TX_CORE), _encode_kind(tx.kind),
             enc.u32(len(tx.inputs))]
    for i in tx.inputs:
        if len(i.outpoint.txid) != 32:
            raise ValueError("txid must be 32 bytes")
        parts += [i.outpoint.txid, enc.u32(i.outpoint.index)]
    parts.append(enc.u32(len(tx.outputs)))
    parts += [encode_output(o) for o in tx.outputs]
    if full:
        for i in tx.inputs:
            parts.append(enc.blob(i.witness))
            if i.claim is None:
                parts.append(b"\x00")
            else:
                parts += [b"\x01", encode_claim(i.claim)]
        parts.append(enc.u32(len(tx.smt_witnesses)))
        for w in tx.smt_witnesses:
            parts += [enc.u64(w.ref_height), w.proof.encode()]
    return b"".join(parts)


def read_tx(r: Reader) -> Transaction:
    r.expect_header(enc.TAG_TX)
    kind = _read_kind(r)
    n_in = r.u32()
    if n_in * 36 > r.remaining():
        raise DecodeError("input count exceeds data")
    outpoints = [Outpoint(r.digest(), r.u32()) for _ in range(n_in)]
    n_out = r.u32()
    if n_out * 10 > r.remaining():
        raise DecodeError("output count exceeds data")
    outputs = tuple(_read_output(r) for _ in range(n_out))
    inputs = []
    for op in outpoints:
        witness = r.blob()
        claim = _read_claim(r) if r.flag() else None
        inputs.append(Input(op, witness, claim))
    n_w = r.u32()
    if n_w * 43 > r.remaining():
        raise DecodeError("witness count exceeds data")
    wits = []
    for _ in range(n_w):
        height = r.u64()
        try:
            proof, r.pos = SmtProof.decode_from(r.data, r.pos)
        except ValueError as exc:
            raise DecodeError(str(exc)) from exc
        wits.append(StateWitness(height, proof))
    return Transaction(kind, tuple(inputs), outputs, tuple(wits))


def canonical_tx_encode(tx: Transaction) -> bytes:
    return tx.encoded


def canonical_tx_decode(data: bytes) -> Transaction:
    r = Reader(data)
    tx = read_tx(r)
    r.done()
    return tx


def outpoint_key(op: Outpoint) -> bytes:
    return hash_leaf(b"utxo" + op.txid + enc.u32(op.index))


def deposit_key(deposit_id: int) -> bytes:
    return hash_leaf(b"deposit" + enc.u64(deposit_id))


DEPOSIT_MARK = hash_leaf(b"deposit-claimed")


def claim_hash(c: Claim) -> bytes:
    return hash_leaf(encode_claim(c))


# ---------------------------------------------------------------- blocks


def num_segments(tx_count: int, k: int) -> int:
    return max(1, -(-tx_count // k))


def segment_bounds(tx_count: int, k: int, segment: int) -> tuple[int, int]:
    start = segment * k
    return start, min(tx_count, start + k)


@dataclass(frozen=True)
class SideBlockHeader:
    prev_header_hash: bytes
    height: int
    txs_root: bytes
    tx_count: int
    state_root: bytes
    intermediate_roots: tuple[bytes, ...]
    k: int
    producer_id: str
    bond: int

    @cached_property
    def encoded(self) -> bytes:
        parts = [enc.header(enc.TAG_HEADER), self.prev_header_hash, enc.u64(self.height),
                 self.txs_root, enc.u32(self.tx_count), self.state_root, enc.u32(self.k),
                 enc.u32(len(self.intermediate_roots)), *self.intermediate_roots,
                 enc.text(self.producer_id), enc.u64(self.bond)]
        return b"".join(parts)

    @cached_property
    def hash(self) -> bytes:
        return hash_leaf(self.encoded)

    @classmethod
    def decode(cls, data: bytes) -> "SideBlockHeader":
        r = Reader(data)
        r.expect_header(enc.TAG_HEADER)
        prev, height, txs_root, count, state_root, k = (
            r.digest(), r.u64(), r.digest(), r.u32(), r.digest(), r.u32())
        n = r.u32()
        if n * 32 > r.remaining():
            raise DecodeError("root count exceeds data")
        roots = tuple(r.digest() for _ in range(n))
        producer, bond = r.text(), r.u64()
        r.done()
        return cls(prev, height, txs_root, count, state_root, roots, k, producer, bond)

    def post_root(self, segment: int) -> bytes:
        """Committed root after ``segment`` (the final root for the last one)."""
        if segment < len(self.intermediate_roots):
            return self.intermediate_roots[segment]
        return self.state_root


@dataclass(frozen=True)
class SideBlock:
    header: SideBlockHeader
    transactions: tuple[Transaction, ...]

    @cached_property
    def encoded(self) -> bytes:
        parts = [enc.header(enc.TAG_BLOCK), enc.blob(self.header.encoded),
                 enc.u32(len(self.transactions))]
        parts += [enc.blob(tx.encoded) for tx in self.transactions]
        return b"".join(parts)

    @property
    def hash(self) -> bytes:
        return self.header.hash

    def tx_leaves(self) -> list[bytes]:
        return [tx.encoded for tx in self.transactions]


def split_block(data: bytes) -> tuple[bytes, list[bytes]]:
    """Header bytes and raw transaction leaves, without decoding transactions."""
    r = Reader(data)
    r.expect_header(enc.TAG_BLOCK)
    hdr = r.blob()
    n = r.u32()
    if n * 4 > r.remaining():
        raise DecodeError("tx count exceeds data")
    leaves = [r.blob() for _ in range(n)]
    r.done()
    return hdr, leaves


class UndecodableTx:
    """Placeholder for a committed leaf that is not a valid transaction.

    It has no effects and always fails validation.
    """
    kind = None
    inputs = ()
    outputs = ()

    def __init__(self, raw: bytes):
        self.encoded = raw
        self.txid = hash_leaf(raw)

    def __eq__(self, other):
        return isinstance(other, UndecodableTx) and other.encoded == self.encoded

    def __hash__(self):
        return hash(self.encoded)


def decode_tx_lenient(raw: bytes):
    try:
        return canonical_tx_decode(raw)
    except (DecodeError, ValueError):
        return UndecodableTx(raw)


def decode_block(data: bytes, lenient: bool = False) -> SideBlock:
    """Decode block bytes; with ``lenient`` bad leaves become :class:`UndecodableTx`."""
    hdr, leaves = split_block(data)
    decode = decode_tx_lenient if lenient else canonical_tx_decode
    return SideBlock(SideBlockHeader.decode(hdr), tuple(decode(x) for x in leaves))


# ---------------------------------------------------------------- errors


class ValidationError(Exception):
    code = "ValidationError"

    def __init__(self, detail: str = "", input_index: Optional[int] = None):
        super().__init__(f"{self.code}: {detail}" if detail else self.code)
        self.input_index = input_index


class MalformedTransaction(ValidationError):
    code = "MalformedTransaction"


class MissingOutpoint(ValidationError):
    code = "MissingOutpoint"


class ClaimMismatch(ValidationError):
    code = "ClaimMismatch"


class PredicateFailed(ValidationError):
    code = "PredicateFailed"


class ValueImbalance(ValidationError):
    code = "ValueImbalance"


class DuplicateDeposit(ValidationError):
    code = "DuplicateDeposit"


class UnauthorizedDeposit(ValidationError):
    code = "UnauthorizedDeposit"


class DoubleSpendWithinTx(ValidationError):
    code = "DoubleSpendWithinTx"


class StaleWitness(ValidationError):
    code = "StaleWitness"


class WitnessInvalid(ValidationError):
    code = "WitnessInvalid"


class SpentSinceWitness(ValidationError):
    code = "SpentSinceWitness"


class BlockInvalid(Exception):
    """A block failed ``apply_block``; carries the earliest failure locus."""

    def __init__(self, reason: str, tx_index: Optional[int] = None,
                 segment: Optional[int] = None, error: Optional[ValidationError] = None):
        super().__init__(f"{reason} (tx={tx_index}, segment={segment})")
        self.reason = reason
        self.tx_index = tx_index
        self.segment = segment
        self.error = error


# ---------------------------------------------------------------- validation

Deposits = Mapping[int, tuple[str, int]]


def _check_shape(tx: Transaction) -> None:
    kind = tx.kind
    if isinstance(kind, DepositClaim):
        if tx.inputs or len(tx.outputs) != 1:
            raise MalformedTransaction("deposit claim needs 0 inputs and 1 output")
        if tx.outputs[0].predicate != PayToKey(kind.recipient):
            raise MalformedTransaction("deposit output must pay the recipient")
        return
    if not tx.inputs:
        raise MalformedTransaction("transaction spends nothing")
    burns = [i for i, o in enumerate(tx.outputs) if isinstance(o.predicate, Burn)]
    if isinstance(kind, BurnKind):
        first = tx.outputs[0] if tx.outputs else None
        if (burns != [0] or first.value != kind.amount
                or first.predicate != Burn(kind.parent_recipient)):
            raise MalformedTransaction("burn must route its amount to output 0")
    elif burns:
        raise MalformedTransaction("only burn transactions may create burn outputs")


def check_tx(tree: SparseMerkleTree, tx: Transaction, deposits: Deposits, height: int,
             scheme: KeyedHashScheme = DEFAULT_SCHEME, record: dict | None = None) -> None:
    """Validate ``tx`` against ``tree`` for inclusion at side height ``height``.

    Works on full and partial trees alike: every fact about the ledger comes
    from SMT lookups, and spent outputs are read from the input claims once
    their hash matches the committed entry.
    """
    if isinstance(tx, UndecodableTx):
        raise MalformedTransaction("undecodable transaction bytes")
    _check_shape(tx)
    seen = set()
    for n, inp in enumerate(tx.inputs):
        if inp.outpoint in seen:
            raise DoubleSpendWithinTx(input_index=n)
        seen.add(inp.outpoint)
    for n, inp in enumerate(tx.inputs):
        stored = tree.value_hash(outpoint_key(inp.outpoint), record)
        if stored is None:
            raise MissingOutpoint(input_index=n)
        if inp.claim is None or claim_hash(inp.claim) != stored:
            raise ClaimMismatch(input_index=n)
        if not predicate_satisfied(inp.claim.output.predicate, inp.witness, tx.txid, height, scheme):
            raise PredicateFailed(input_index=n)
    _check_value_and_deposit(tree, tx, deposits, record)


def _check_value_and_deposit(tree, tx, deposits, record) -> None:
    kind = tx.kind
    if isinstance(kind, DepositClaim):
        if tx.outputs[0].value != kind.amount:
            raise ValueImbalance("deposit output differs from amount")
        if deposits.get(kind.deposit_id) != (kind.recipient, kind.amount):
            raise UnauthorizedDeposit(f"deposit {kind.deposit_id}")
        if tree.value_hash(deposit_key(kind.deposit_id), record) is not None:
            raise DuplicateDeposit(f"deposit {kind.deposit_id}")
        return
    spent = sum(i.claim.output.value for i in tx.inputs)
    created = sum(o.value for o in tx.outputs)
    if spent != created:
        raise ValueImbalance(f"inputs {spent} != outputs {created}")


def apply_tx(tree: SparseMerkleTree, tx: Transaction, height: int, tx_index: int,
             record: dict | None = None) -> SparseMerkleTree:
    """State effects of ``tx`` without any validity check."""
    for inp in tx.inputs:
        tree = tree.remove(outpoint_key(inp.outpoint), record)
    txid = tx.txid
    for i, out in enumerate(tx.outputs):
        op = Outpoint(txid, i)
        c = Claim(out, height, tx_index)
        tree = tree.set(outpoint_key(op), claim_hash(c), (op, c), record)
    if isinstance(tx.kind, DepositClaim):
        tree = tree.set(deposit_key(tx.kind.deposit_id), DEPOSIT_MARK,
                        ("deposit", tx.kind.deposit_id), record)
    return tree


# ---------------------------------------------------------------- state


@dataclass(frozen=True)
class LedgerState:
    smt: SparseMerkleTree = field(default_factory=SparseMerkleTree.empty)
    height: int = 0
    tip: bytes = GENESIS_HASH
    recent_roots: tuple[tuple[int, bytes], ...] = ()
    window: int = DEFAULT_WITNESS_WINDOW
    circulating: int = 0
    burned: int = 0
    deposits_claimed: int = 0

    @classmethod
    def genesis(cls, window: int = DEFAULT_WITNESS_WINDOW) -> "LedgerState":
        smt = SparseMerkleTree.empty()
        return cls(smt=smt, recent_roots=((0, smt.root),), window=window)

    @property
    def smt_root(self) -> bytes:
        return self.smt.root

    def lookup(self, op: Outpoint) -> Optional[Claim]:
        leaf = self.smt.get(outpoint_key(op))
        return None if leaf is None else leaf.payload[1]

    def deposit_claimed(self, deposit_id: int) -> bool:
        return deposit_key(deposit_id) in self.smt

    def utxo_map(self) -> dict[Outpoint, Output]:
        return {leaf.payload[0]: leaf.payload[1].output for leaf in self.smt.leaves()
                if leaf.payload[0] != "deposit"}

    def utxo_entries(self) -> Iterable[tuple[Outpoint, Claim]]:
        for leaf in self.smt.leaves():
            if leaf.payload[0] != "deposit":
                yield leaf.payload

    def root_at(self, height: int) -> Optional[bytes]:
        for h, root in self.recent_roots:
            if h == height:
                return root
        return None


def validate_transaction(state: LedgerState, tx: Transaction, deposits: Deposits,
                         scheme: KeyedHashScheme = DEFAULT_SCHEME) -> None:
    """Raise a :class:`ValidationError` unless ``tx`` may go in the next block."""
    check_tx(state.smt, tx, deposits, state.height + 1, scheme)


def attach_claims(state_tree: SparseMerkleTree, tx: Transaction) -> Optional[Transaction]:
    """Fill in honest claims from ``state_tree``; ``None`` if an input is absent."""
    claims = []
    for inp in tx.inputs:
        leaf = state_tree.get(outpoint_key(inp.outpoint))
        if leaf is None:
            return None
        claims.append(leaf.payload[1])
    return tx.with_claims(claims)


def _value_deltas(tree: SparseMerkleTree, tx: Transaction) -> tuple[int, int, int]:
    """(circulating, burned, deposits) deltas, reading spent values from ``tree``."""
    spent = 0
    for inp in tx.inputs:
        leaf = tree.get(outpoint_key(inp.outpoint))
        if leaf is not None:
            spent += leaf.payload[1].output.value
    burned = sum(o.value for o in tx.outputs if isinstance(o.predicate, Burn))
    created = sum(o.value for o in tx.outputs) - burned
    dep = tx.kind.amount if isinstance(tx.kind, DepositClaim) else 0
    return created - spent, burned, dep


def _next_state(state: LedgerState, tree, header: SideBlockHeader, circ, burned, dep) -> LedgerState:
    roots = state.recent_roots + ((header.height, tree.root),)
    return LedgerState(smt=tree, height=header.height, tip=header.hash,
                       recent_roots=roots[-(state.window + 1):], window=state.window,
                       circulating=circ, burned=burned, deposits_claimed=dep)


def check_header_body(block: SideBlock) -> None:
    h = block.header
    if h.tx_count != len(block.transactions) or h.txs_root != merkle_root(block.tx_leaves()):
        raise BlockInvalid("HeaderBodyMismatch")
    if h.k < 1 or len(h.intermediate_roots) != num_segments(h.tx_count, h.k) - 1:
        raise BlockInvalid("HeaderBodyMismatch")


def apply_block(state: LedgerState, block: SideBlock, deposits: Deposits,
                scheme: KeyedHashScheme = DEFAULT_SCHEME, enforce: bool = True,
                check_body: bool = True) -> LedgerState:
    """Apply ``block`` on top of ``state`` and return the successor state.

    Raises :class:`BlockInvalid` naming the earliest failing transaction or
    segment; ``state`` itself is never modified.  With ``enforce=False`` the
    effects are applied without checking validity (used for blocks the bridge
    has already finalized).
    """
    h = block.header
    if h.prev_header_hash != state.tip:
        raise BlockInvalid("WrongParent")
    if h.height != state.height + 1:
        raise BlockInvalid("WrongHeight")
    if check_body:
        check_header_body(block)
    tree = state.smt
    circ, burned, dep = state.circulating, state.burned, state.deposits_claimed
    k = h.k
    for i, tx in enumerate(block.transactions):
        if enforce:
            try:
                check_tx(tree, tx, deposits, h.height, scheme)
            except ValidationError as exc:
                raise BlockInvalid(exc.code, tx_index=i, segment=i // k, error=exc) from None
        dc, db, dd = _value_deltas(tree, tx)
        circ, burned, dep = circ + dc, burned + db, dep + dd
        tree = apply_tx(tree, tx, h.height, i)
        if enforce and (i + 1) % k == 0 and i + 1 < h.tx_count:
            seg = i // k
            if tree.root != h.intermediate_roots[seg]:
                raise BlockInvalid("IntermediateRootMismatch", segment=seg)
    if enforce and tree.root != h.state_root:
        raise BlockInvalid("StateRootMismatch", segment=num_segments(h.tx_count, k) - 1)
    return _next_state(state, tree, h, circ, burned, dep)


def _segment_roots(roots_after: list[bytes], n: int, k: int) -> tuple[list[bytes], bytes]:
    inter = [roots_after[(s + 1) * k - 1] for s in range(num_segments(n, k) - 1)]
    return inter, roots_after[-1] if roots_after else None


def assemble_block(state: LedgerState, txs: Sequence[Transaction], producer_id: str,
                   bond: int, k: int = DEFAULT_SEGMENT) -> tuple[SideBlock, LedgerState]:
    """Apply ``txs`` unconditionally and commit to the resulting roots.

    Honest producers only pass valid transactions; fault injectors use this
    to produce internally consistent but invalid blocks.
    """
    height = state.height + 1
    tree = state.smt
    circ, burned, dep = state.circulating, state.burned, state.deposits_claimed
    roots_after = []
    for i, tx in enumerate(txs):
        dc, db, dd = _value_deltas(tree, tx)
        circ, burned, dep = circ + dc, burned + db, dep + dd
        tree = apply_tx(tree, tx, height, i)
        roots_after.append(tree.root)
    inter, final = _segment_roots(roots_after, len(txs), k)
    header = SideBlockHeader(
        prev_header_hash=state.tip, height=height,
        txs_root=merkle_root([tx.encoded for tx in txs]), tx_count=len(txs),
        state_root=final if final is not None else state.smt.root,
        intermediate_roots=tuple(inter), k=k, producer_id=producer_id, bond=bond)
    block = SideBlock(header, tuple(txs))
    return block, _next_state(state, tree, header, circ, burned, dep)


def select_transactions(mempool: Iterable[Transaction], state: LedgerState, deposits: Deposits,
                        max_txs: Optional[int] = None,
                        scheme: KeyedHashScheme = DEFAULT_SCHEME) -> list[Transaction]:
    """Greedy first-come selection of mutually valid transactions with honest
    claims attached."""
    height = state.height + 1
    tree = state.smt
    chosen = []
    for tx in mempool:
        if max_txs is not None and len(chosen) >= max_txs:
            break
        claimed = attach_claims(tree, tx)
        if claimed is None:
            continue
        try:
            check_tx(tree, claimed, deposits, height, scheme)
        except ValidationError:
            continue
        tree = apply_tx(tree, claimed, height, len(chosen))
        chosen.append(claimed)
    return chosen


def build_block_with_state(mempool: Iterable[Transaction], state: LedgerState, producer_id: str,
                           bond: int, k: int = DEFAULT_SEGMENT, deposits: Deposits = {},
                           max_txs: Optional[int] = None,
                           scheme: KeyedHashScheme = DEFAULT_SCHEME) -> tuple[SideBlock, LedgerState]:
    txs = select_transactions(mempool, state, deposits, max_txs, scheme)
    return assemble_block(state, txs, producer_id, bond, k)


def build_block(mempool: Iterable[Transaction], state: LedgerState, producer_id: str, bond: int,
                k: int = DEFAULT_SEGMENT, deposits: Deposits = {}, max_txs: Optional[int] = None,
                scheme: KeyedHashScheme = DEFAULT_SCHEME) -> SideBlock:
    return build_block_with_state(mempool, state, producer_id, bond, k, deposits, max_txs, scheme)[0]


# ---------------------------------------------------------------- stateless mode


def make_witnesses(state: LedgerState, tx: Transaction) -> Transaction:
    """Attach SMT witnesses against ``state``'s current root."""
    wits = [StateWitness(state.height, state.smt.prove(outpoint_key(i.outpoint))) for i in tx.inputs]
    if isinstance(tx.kind, DepositClaim):
        wits.append(StateWitness(state.height, state.smt.prove(deposit_key(tx.kind.deposit_id))))
    return replace(tx, smt_witnesses=tuple(wits))


def validate_stateless(recent_roots: Sequence[tuple[int, bytes]], tx: Transaction,
                       subsequent_blocks: Sequence[SideBlock], deposits: Deposits,
                       window: int = DEFAULT_WITNESS_WINDOW,
                       scheme: KeyedHashScheme = DEFAULT_SCHEME) -> None:
    """Validate ``tx`` from its SMT witnesses instead of a state lookup.

    ``recent_roots`` are (side height, state root) pairs ending at the tip;
    ``subsequent_blocks`` are the blocks after each witness's reference height
    (blocks at or below a reference height are ignored for that witness).
    """
    roots = dict(recent_roots)
    tip = max(roots)
    height = tip + 1
    _check_shape(tx)
    seen = set()
    for n, inp in enumerate(tx.inputs):
        if inp.outpoint in seen:
            raise DoubleSpendWithinTx(input_index=n)
        seen.add(inp.outpoint)
    deposit = isinstance(tx.kind, DepositClaim)
    expected = len(tx.inputs) + (1 if deposit else 0)
    if len(tx.smt_witnesses) != expected:
        raise WitnessInvalid("one witness per input is required")

    def fresh_root(w: StateWitness, n: Optional[int]) -> bytes:
        if tip - w.ref_height > window or w.ref_height not in roots:
            raise StaleWitness(f"reference height {w.ref_height}, tip {tip}", input_index=n)
        return roots[w.ref_height]

    later = [b for b in subsequent_blocks if b.header.height > min(
        (w.ref_height for w in tx.smt_witnesses), default=tip)]
    for n, (inp, w) in enumerate(zip(tx.inputs, tx.smt_witnesses)):
        root = fresh_root(w, n)
        if inp.claim is None:
            raise ClaimMismatch(input_index=n)
        key = outpoint_key(inp.outpoint)
        if (w.proof.key != key or w.proof.value_hash != claim_hash(inp.claim)
                or not smt_verify(root, w.proof)):
            raise WitnessInvalid(input_index=n)
        for b in later:
            if b.header.height <= w.ref_height:
                continue
            if any(i.outpoint == inp.outpoint for t in b.transactions for i in t.inputs):
                raise SpentSinceWitness(input_index=n)
        if not predicate_satisfied(inp.claim.output.predicate, inp.witness, tx.txid, height, scheme):
            raise PredicateFailed(input_index=n)
    if deposit:
        w = tx.smt_witnesses[-1]
        root = fresh_root(w, None)
        kind = tx.kind
        if tx.outputs[0].value != kind.amount:
            raise ValueImbalance("deposit output differs from amount")
        if deposits.get(kind.deposit_id) != (kind.recipient, kind.amount):
            raise UnauthorizedDeposit(f"deposit {kind.deposit_id}")
        p = w.proof
        if p.key != deposit_key(kind.deposit_id) or not smt_verify(root, p):
            raise WitnessInvalid("deposit witness")
        if p.value_hash is not None:
            raise DuplicateDeposit(f"deposit {kind.deposit_id}")
        for b in later:
            if b.header.height <= w.ref_height:
                continue
            if any(isinstance(t.kind, DepositClaim) and t.kind.deposit_id == kind.deposit_id
                   for t in b.transactions):
                raise DuplicateDeposit(f"deposit {kind.deposit_id}")
        return
    spent = sum(i.claim.output.value for i in tx.inputs)
    if spent != sum(o.value for o in tx.outputs):
        raise ValueImbalance(f"inputs {spent} != outputs")
