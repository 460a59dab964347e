"""Fraud proofs against committed side blocks.

Scheme A re-executes one segment of at most ``k`` transactions from the
committed pre-root, using SMT node openings as its only view of state, and
compares the outcome with the committed post-root.  It covers every kind of
invalid transition.

Scheme B never touches state.  It refutes one input's producer claim from
committed data alone:

* ``OutputMismatch``  the transaction at the claimed location does not
  create the claimed output;
* ``PriorSpend``      the same outpoint was already spent earlier in the
  committed history;
* ``NoSuchOutput``    the outpoint is absent from the committed pre-state
  (or the claimed location cannot exist).

Verifiers only consult a :class:`CommittedChain`, i.e. what the bridge
contract stores.  Wire encodings start with ``0x01`` and the scheme tag
``0xA0``/``0xB0``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Protocol, Sequence, Union

from . import encoding as enc
from .encoding import DecodeError, Reader
from .hashing import MerkleProof, merkle_prove, merkle_verify
from .ledger import (
    BlockInvalid, Claim, Deposits, KeyedHashScheme, DEFAULT_SCHEME, LedgerState, Outpoint,
    SideBlock, SideBlockHeader, UndecodableTx, ValidationError, apply_block, apply_tx,
    check_tx, decode_tx_lenient, num_segments, outpoint_key, segment_bounds,
)
from .smt import MissingWitness, SmtProof, SparseMerkleTree, decode_openings, encode_openings, smt_verify


class FraudProofError(Exception):
    code = "FraudProofError"


class UnknownHeader(FraudProofError):
    code = "UnknownHeader"


class MalformedProof(FraudProofError):
    code = "MalformedProof"


class RefutationDoesNotApply(FraudProofError):
    code = "RefutationDoesNotApply"


class NotActuallyInvalid(FraudProofError):
    code = "NotActuallyInvalid"


@dataclass(frozen=True)
class FraudVerdict:
    valid: bool
    faulted_header: bytes
    reason: str


class CommittedChain(Protocol):
    """Read-only view of committed side-chain data (the bridge's light client)."""

    def header(self, header_hash: bytes) -> Optional[SideBlockHeader]: ...

    def header_at(self, height: int) -> Optional[SideBlockHeader]: ...

    def pre_state_root(self, header: SideBlockHeader) -> bytes: ...

    def deposits_for(self, header: SideBlockHeader) -> Deposits: ...


class HeaderChain:
    """A :class:`CommittedChain` over a plain list of consecutive headers."""

    def __init__(self, headers: Sequence[SideBlockHeader], deposits: Deposits | None = None,
                 genesis_root: bytes | None = None):
        self._by_hash = {h.hash: h for h in headers}
        self._by_height = {h.height: h for h in headers}
        self._deposits = dict(deposits or {})
        self._genesis_root = genesis_root if genesis_root is not None else LedgerState.genesis().smt_root

    def header(self, header_hash):
        return self._by_hash.get(header_hash)

    def header_at(self, height):
        return self._by_height.get(height)

    def pre_state_root(self, header):
        parent = self._by_hash.get(header.prev_header_hash)
        return parent.state_root if parent is not None else self._genesis_root

    def deposits_for(self, header):
        return self._deposits


# ---------------------------------------------------------------- scheme A


@dataclass(frozen=True)
class FraudProofA:
    block_header_hash: bytes
    segment_index: int
    pre_root: bytes
    txs: tuple[tuple[bytes, MerkleProof], ...]
    openings: dict
    expected_post_root: bytes

    def encode(self) -> bytes:
        parts = [enc.header(enc.TAG_PROOF_A), self.block_header_hash, enc.u32(self.segment_index),
                 self.pre_root, enc.u32(len(self.txs))]
        for raw, proof in self.txs:
            parts += [enc.blob(raw), enc.blob(proof.encode())]
        parts += [encode_openings(self.openings), self.expected_post_root]
        return b"".join(parts)


def _read_proof_a(r: Reader) -> FraudProofA:
    hh, seg, pre = r.digest(), r.u32(), r.digest()
    n = r.u32()
    if n * 8 > r.remaining():
        raise DecodeError("segment length exceeds data")
    txs = []
    for _ in range(n):
        raw = r.blob()
        try:
            proof = MerkleProof.decode(r.blob())
        except ValueError as exc:
            raise DecodeError(str(exc)) from exc
        txs.append((raw, proof))
    try:
        openings, r.pos = decode_openings(r.data, r.pos)
    except ValueError as exc:
        raise DecodeError(str(exc)) from exc
    post = r.digest()
    return FraudProofA(hh, seg, pre, tuple(txs), openings, post)


def locate_failure(prestate: LedgerState, block: SideBlock, deposits: Deposits,
                   scheme: KeyedHashScheme = DEFAULT_SCHEME) -> Optional[BlockInvalid]:
    try:
        apply_block(prestate, block, deposits, scheme)
    except BlockInvalid as exc:
        return exc
    return None


def generate_proof_a(prestate: LedgerState, block: SideBlock, deposits: Deposits,
                     failure: BlockInvalid | None = None,
                     scheme: KeyedHashScheme = DEFAULT_SCHEME) -> FraudProofA:
    """Build a scheme-A proof for the segment holding the earliest failure.

    ``prestate`` is the ledger state the block claims to extend.
    """
    if failure is None:
        failure = locate_failure(prestate, block, deposits, scheme)
    if failure is None or failure.segment is None:
        raise NotActuallyInvalid("block replays cleanly")
    h = block.header
    seg = failure.segment
    start, end = segment_bounds(h.tx_count, h.k, seg)
    tree = prestate.smt
    for i in range(start):
        tree = apply_tx(tree, block.transactions[i], h.height, i)
    pre_root = tree.root
    if pre_root != (h.intermediate_roots[seg - 1] if seg else prestate.smt_root):
        raise NotActuallyInvalid("segment pre-root does not match the commitment")
    record: dict = {}
    for i in range(start, end):
        tx = block.transactions[i]
        try:
            check_tx(tree, tx, deposits, h.height, scheme, record)
        except ValidationError:
            break
        tree = apply_tx(tree, tx, h.height, i, record)
    leaves = block.tx_leaves()
    txs = tuple((leaves[i], merkle_prove(leaves, i)) for i in range(start, end))
    return FraudProofA(h.hash, seg, pre_root, txs, record, h.post_root(seg))


def verify_proof_a(chain: CommittedChain, proof: FraudProofA,
                   scheme: KeyedHashScheme = DEFAULT_SCHEME) -> FraudVerdict:
    header = chain.header(proof.block_header_hash)
    if header is None:
        raise UnknownHeader(proof.block_header_hash.hex())
    seg = proof.segment_index
    if not 0 <= seg < num_segments(header.tx_count, header.k):
        raise MalformedProof("segment index out of range")
    committed_pre = header.intermediate_roots[seg - 1] if seg else chain.pre_state_root(header)
    if proof.pre_root != committed_pre or proof.expected_post_root != header.post_root(seg):
        raise MalformedProof("roots do not match the commitments")
    start, end = segment_bounds(header.tx_count, header.k, seg)
    if len(proof.txs) != end - start:
        raise MalformedProof("segment is incomplete")
    for offset, (raw, mp) in enumerate(proof.txs):
        if (mp.leaf_index != start + offset or mp.tree_size != header.tx_count
                or not merkle_verify(header.txs_root, raw, mp)):
            raise MalformedProof(f"bad inclusion proof for tx {start + offset}")
    try:
        tree = SparseMerkleTree.from_witness(proof.pre_root, proof.openings)
    except ValueError as exc:
        raise MalformedProof(str(exc)) from exc
    deposits = chain.deposits_for(header)
    try:
        for offset, (raw, _) in enumerate(proof.txs):
            tx = decode_tx_lenient(raw)
            try:
                check_tx(tree, tx, deposits, header.height, scheme)
            except ValidationError as exc:
                return FraudVerdict(True, header.hash, exc.code)
            tree = apply_tx(tree, tx, header.height, start + offset)
    except MissingWitness as exc:
        raise MalformedProof(f"state witness missing node {exc}") from None
    if tree.root != proof.expected_post_root:
        last = seg == num_segments(header.tx_count, header.k) - 1
        return FraudVerdict(True, header.hash,
                            "StateRootMismatch" if last else "IntermediateRootMismatch")
    return FraudVerdict(False, header.hash, "NoFault")


# ---------------------------------------------------------------- scheme B


@dataclass(frozen=True)
class OutputMismatch:
    creator: bytes
    creator_proof: MerkleProof


@dataclass(frozen=True)
class PriorSpend:
    height: int
    tx_index: int
    input_index: int
    spender: bytes
    spender_proof: MerkleProof


@dataclass(frozen=True)
class NoSuchOutput:
    non_membership: Optional[SmtProof] = None


Refutation = Union[OutputMismatch, PriorSpend, NoSuchOutput]


@dataclass(frozen=True)
class FraudProofB:
    block_header_hash: bytes
    tx_index: int
    tx: bytes
    tx_proof: MerkleProof
    input_index: int
    refutation: Refutation

    def encode(self) -> bytes:
        parts = [enc.header(enc.TAG_PROOF_B), self.block_header_hash, enc.u32(self.tx_index),
                 enc.blob(self.tx), enc.blob(self.tx_proof.encode()), enc.u32(self.input_index)]
        ref = self.refutation
        if isinstance(ref, OutputMismatch):
            parts += [b"\x00", enc.blob(ref.creator), enc.blob(ref.creator_proof.encode())]
        elif isinstance(ref, PriorSpend):
            parts += [b"\x01", enc.u64(ref.height), enc.u32(ref.tx_index), enc.u32(ref.input_index),
                      enc.blob(ref.spender), enc.blob(ref.spender_proof.encode())]
        else:
            parts.append(b"\x02")
            if ref.non_membership is None:
                parts.append(b"\x00")
            else:
                parts += [b"\x01", ref.non_membership.encode()]
        return b"".join(parts)


def _merkle(r: Reader) -> MerkleProof:
    try:
        return MerkleProof.decode(r.blob())
    except ValueError as exc:
        raise DecodeError(str(exc)) from exc


def _read_proof_b(r: Reader) -> FraudProofB:
    hh, idx, raw, mp, inp = r.digest(), r.u32(), r.blob(), _merkle(r), r.u32()
    tag = r.u8()
    if tag == 0:
        ref: Refutation = OutputMismatch(r.blob(), _merkle(r))
    elif tag == 1:
        ref = PriorSpend(r.u64(), r.u32(), r.u32(), r.blob(), _merkle(r))
    elif tag == 2:
        if r.flag():
            try:
                smt, r.pos = SmtProof.decode_from(r.data, r.pos)
            except ValueError as exc:
                raise DecodeError(str(exc)) from exc
            ref = NoSuchOutput(smt)
        else:
            ref = NoSuchOutput()
    else:
        raise DecodeError("unknown refutation tag")
    return FraudProofB(hh, idx, raw, mp, inp, ref)


SCHEME_B_CODES = frozenset({"MissingOutpoint", "ClaimMismatch", "DoubleSpendWithinTx"})


class ChainHistory:
    """Blocks of one side chain by height, used to generate scheme-B proofs."""

    def __init__(self, blocks: Sequence[SideBlock] = ()):
        self.blocks: dict[int, SideBlock] = {}
        for b in blocks:
            self.add(b)

    def add(self, block: SideBlock) -> None:
        self.blocks[block.header.height] = block

    def truncate(self, height: int) -> None:
        """Forget blocks above ``height``."""
        for h in [h for h in self.blocks if h > height]:
            del self.blocks[h]

    def find_spend(self, outpoint: Outpoint, before: tuple[int, int, int]):
        for height in sorted(self.blocks):
            if height > before[0]:
                break
            for ti, tx in enumerate(self.blocks[height].transactions):
                for ii, inp in enumerate(tx.inputs):
                    if inp.outpoint == outpoint and (height, ti, ii) < before:
                        return height, ti, ii
        return None


def _leaf_proof(block: SideBlock, index: int) -> tuple[bytes, MerkleProof]:
    leaves = block.tx_leaves()
    return leaves[index], merkle_prove(leaves, index)


def generate_proof_b(history: ChainHistory, prestate: LedgerState, block: SideBlock,
                     failure: BlockInvalid) -> FraudProofB:
    """Scheme-B proof for a claim, double-spend or missing-output fault.

    ``history`` must hold the ancestors of ``block``; ``block`` itself is
    consulted for same-block evidence.
    """
    err = failure.error
    if err is None or err.code not in SCHEME_B_CODES or failure.tx_index is None:
        raise RefutationDoesNotApply(f"scheme B does not cover {failure.reason}")
    h = block.header
    ti, ii = failure.tx_index, err.input_index
    tx = block.transactions[ti]
    inp = tx.inputs[ii]
    claim = inp.claim
    if claim is None:
        raise RefutationDoesNotApply("input carries no claim")
    raw, mp = _leaf_proof(block, ti)

    def at_height(height):
        return block if height == h.height else history.blocks.get(height)

    spend = None
    if err.code in ("MissingOutpoint", "DoubleSpendWithinTx"):
        spend = history.find_spend(inp.outpoint, (h.height, ti, ii))
        if spend is None:
            for t2 in range(ti + 1):
                for i2, other in enumerate(block.transactions[t2].inputs):
                    if other.outpoint == inp.outpoint and (t2, i2) < (ti, ii):
                        spend = (h.height, t2, i2)
                        break
                if spend:
                    break
    if spend is not None:
        sh, st, si = spend
        sraw, smp = _leaf_proof(at_height(sh), st)
        return FraudProofB(h.hash, ti, raw, mp, ii, PriorSpend(sh, st, si, sraw, smp))
    creator_block = at_height(claim.height) if claim.height <= h.height else None
    if (creator_block is None or claim.tx_index >= creator_block.header.tx_count
            or (claim.height == h.height and claim.tx_index >= ti)):
        return FraudProofB(h.hash, ti, raw, mp, ii, NoSuchOutput())
    creator = creator_block.transactions[claim.tx_index]
    if (creator.txid != inp.outpoint.txid or inp.outpoint.index >= len(creator.outputs)
            or creator.outputs[inp.outpoint.index] != claim.output):
        craw, cmp_ = _leaf_proof(creator_block, claim.tx_index)
        return FraudProofB(h.hash, ti, raw, mp, ii, OutputMismatch(craw, cmp_))
    if claim.height < h.height:
        smt = prestate.smt.prove(outpoint_key(inp.outpoint))
        if smt.value_hash is None:
            return FraudProofB(h.hash, ti, raw, mp, ii, NoSuchOutput(smt))
    raise RefutationDoesNotApply("no committed evidence refutes this claim")


def _committed_leaf(chain: CommittedChain, faulted: SideBlockHeader, height: int, index: int,
                    raw: bytes, proof: MerkleProof) -> bool:
    hdr = faulted if height == faulted.height else chain.header_at(height)
    if hdr is None or height > faulted.height:
        return False
    return (proof.leaf_index == index and proof.tree_size == hdr.tx_count
            and merkle_verify(hdr.txs_root, raw, proof))


def verify_proof_b(chain: CommittedChain, proof: FraudProofB) -> FraudVerdict:
    header = chain.header(proof.block_header_hash)
    if header is None:
        raise UnknownHeader(proof.block_header_hash.hex())
    if not _committed_leaf(chain, header, header.height, proof.tx_index, proof.tx, proof.tx_proof):
        raise MalformedProof("transaction is not committed at the stated index")
    tx = decode_tx_lenient(proof.tx)
    if isinstance(tx, UndecodableTx) or not 0 <= proof.input_index < len(tx.inputs):
        raise RefutationDoesNotApply("no such input")
    inp = tx.inputs[proof.input_index]
    claim: Optional[Claim] = inp.claim
    if claim is None:
        raise RefutationDoesNotApply("input carries no claim")
    ref = proof.refutation
    here = (header.height, proof.tx_index, proof.input_index)

    if isinstance(ref, OutputMismatch):
        if not (claim.height < header.height
                or (claim.height == header.height and claim.tx_index < proof.tx_index)):
            raise RefutationDoesNotApply("claimed location is not earlier")
        if not _committed_leaf(chain, header, claim.height, claim.tx_index,
                               ref.creator, ref.creator_proof):
            raise MalformedProof("creating transaction is not committed at the claimed location")
        creator = decode_tx_lenient(ref.creator)
        idx = inp.outpoint.index
        if (isinstance(creator, UndecodableTx) or creator.txid != inp.outpoint.txid
                or idx >= len(creator.outputs) or creator.outputs[idx] != claim.output):
            return FraudVerdict(True, header.hash, "OutputMismatch")
        raise RefutationDoesNotApply("claimed output matches its creator")

    if isinstance(ref, PriorSpend):
        if (ref.height, ref.tx_index, ref.input_index) >= here:
            raise RefutationDoesNotApply("spend is not earlier")
        if not _committed_leaf(chain, header, ref.height, ref.tx_index, ref.spender, ref.spender_proof):
            raise MalformedProof("earlier spend is not committed")
        spender = decode_tx_lenient(ref.spender)
        if (isinstance(spender, UndecodableTx) or ref.input_index >= len(spender.inputs)
                or spender.inputs[ref.input_index].outpoint != inp.outpoint):
            raise RefutationDoesNotApply("earlier transaction spends something else")
        return FraudVerdict(True, header.hash, "PriorSpend")

    if isinstance(ref, NoSuchOutput):
        if ref.non_membership is None:
            creator_hdr = header if claim.height == header.height else chain.header_at(claim.height)
            impossible = (claim.height > header.height or creator_hdr is None
                          or claim.tx_index >= creator_hdr.tx_count
                          or (claim.height == header.height and claim.tx_index >= proof.tx_index))
            if impossible:
                return FraudVerdict(True, header.hash, "NoSuchOutput")
            raise RefutationDoesNotApply("claimed location exists")
        smt = ref.non_membership
        if claim.height >= header.height:
            raise RefutationDoesNotApply("output claimed from the same block")
        if (smt.key != outpoint_key(inp.outpoint) or smt.value_hash is not None
                or not smt_verify(chain.pre_state_root(header), smt)):
            raise MalformedProof("non-membership proof does not verify")
        return FraudVerdict(True, header.hash, "NoSuchOutput")
    raise MalformedProof("unknown refutation")


# ---------------------------------------------------------------- dispatch

FraudProof = Union[FraudProofA, FraudProofB]


def decode_fraud_proof(data: bytes) -> FraudProof:
    r = Reader(data)
    if len(data) < 2:
        raise DecodeError("truncated proof")
    tag = data[1]
    r.expect_header(tag)
    if tag == enc.TAG_PROOF_A:
        proof: FraudProof = _read_proof_a(r)
    elif tag == enc.TAG_PROOF_B:
        proof = _read_proof_b(r)
    else:
        raise DecodeError(f"unknown proof scheme tag {tag:#x}")
    r.done()
    return proof


def verify_fraud_proof(chain: CommittedChain, proof: FraudProof | bytes,
                       scheme: KeyedHashScheme = DEFAULT_SCHEME) -> FraudVerdict:
    """Verify either scheme; undecodable bytes raise :class:`MalformedProof`."""
    if isinstance(proof, (bytes, bytearray)):
        try:
            proof = decode_fraud_proof(bytes(proof))
        except (DecodeError, ValueError) as exc:
            raise MalformedProof(str(exc)) from exc
    if isinstance(proof, FraudProofA):
        return verify_proof_a(chain, proof, scheme)
    return verify_proof_b(chain, proof)


def generate_best_proof(history: ChainHistory, prestate: LedgerState, block: SideBlock,
                        deposits: Deposits, failure: BlockInvalid | None = None,
                        scheme: KeyedHashScheme = DEFAULT_SCHEME) -> FraudProof:
    """Scheme B when it applies (smaller, stateless), otherwise scheme A."""
    if failure is None:
        failure = locate_failure(prestate, block, deposits, scheme)
        if failure is None:
            raise NotActuallyInvalid("block replays cleanly")
    if failure.error is not None and failure.error.code in SCHEME_B_CODES:
        try:
            return generate_proof_b(history, prestate, block, failure)
        except RefutationDoesNotApply:
            pass
    return generate_proof_a(prestate, block, deposits, failure, scheme)
