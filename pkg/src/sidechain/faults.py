"""Construction of deliberately invalid side blocks.

Used by byzantine producers in the harness and by the fraud-proof fuzzers.
Every fault yields a block that decodes, Merkleizes and links correctly, so
the bridge accepts it optimistically; only replay exposes it.
"""

from __future__ import annotations

from dataclasses import replace
from typing import Optional, Sequence

import numpy as np

from .ledger import (
    Burn, BurnKind, Claim, DepositClaim, Deposits, DEFAULT_SCHEME, Input, KeyedHashScheme,
    LedgerState, Outpoint, Output, PayToKey, SideBlock, Transaction, Transfer,
    assemble_block, sign_inputs,
)

FAULT_KINDS = (
    "value_imbalance",
    "double_spend",
    "false_claim",
    "nonexistent_output",
    "bad_state_root",
    "bad_intermediate_root",
    "unauthorized_deposit",
    "theft",
)

# Faults whose evidence fits scheme B's refutations.
SCHEME_B_FAULTS = frozenset({"double_spend", "false_claim", "nonexistent_output"})


class CannotInject(Exception):
    """The state offers no material for the requested fault."""


def _rand_digest(rng: np.random.Generator) -> bytes:
    return rng.bytes(32)


def _spend(owner: str, outpoint: Outpoint, claim: Claim, outputs: Sequence[Output],
           scheme: KeyedHashScheme) -> Transaction:
    tx = Transaction(Transfer(), (Input(outpoint, b"", claim),), tuple(outputs))
    return sign_inputs(tx, [owner], scheme)


def inject_fault(kind: str, state: LedgerState, txs: Sequence[Transaction], *,
                 own: Sequence[tuple[Outpoint, Claim]], victims: Sequence[tuple[Outpoint, Claim]] = (),
                 deposits: Deposits = {}, producer_id: str = "byzantine", bond: int = 100,
                 k: int = 4, position: Optional[int] = None, rng: np.random.Generator | None = None,
                 scheme: KeyedHashScheme = DEFAULT_SCHEME) -> SideBlock:
    """Return an invalid block built on ``state``.

    ``txs`` are valid transactions (claims attached) that fill the block; the
    faulty transaction goes in at ``position``.  ``own`` lists unspent
    outputs whose PayToKey owner the caller can sign for; ``victims`` lists
    outputs the caller cannot sign for (used by ``theft``).
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    height = state.height + 1
    txs = list(txs)
    used = {i.outpoint for t in txs for i in t.inputs}
    own = [(op, c) for op, c in own if op not in used]
    pos = len(txs) if position is None else max(0, min(position, len(txs)))

    def take_own():
        if not own:
            raise CannotInject(f"{kind} needs a spendable output")
        return own.pop(0)

    def owner_of(claim: Claim) -> str:
        pred = claim.output.predicate
        if not isinstance(pred, PayToKey):
            raise CannotInject("own outputs must be PayToKey")
        return pred.owner

    bad: list[Transaction] = []
    if kind == "value_imbalance":
        op, c = take_own()
        o = owner_of(c)
        bad = [_spend(o, op, c, [Output(c.output.value + 1, PayToKey(o))], scheme)]
    elif kind == "double_spend":
        op, c = take_own()
        o = owner_of(c)
        bad = [_spend(o, op, c, [Output(c.output.value, PayToKey(o))], scheme),
               _spend(o, op, c, [Output(c.output.value, PayToKey(producer_id))], scheme)]
    elif kind == "false_claim":
        op, c = take_own()
        o = owner_of(c)
        lie = replace(c, output=replace(c.output, value=c.output.value * 2 + 1))
        bad = [_spend(o, op, lie, [Output(lie.output.value, PayToKey(o))], scheme)]
    elif kind == "nonexistent_output":
        op = Outpoint(_rand_digest(rng), 0)
        c = Claim(Output(1000, PayToKey(producer_id)), max(1, height - 1), 0)
        bad = [_spend(producer_id, op, c, [Output(1000, PayToKey(producer_id))], scheme)]
    elif kind == "unauthorized_deposit":
        known = [d for d in deposits]
        did = (max(known) + 1 + int(rng.integers(0, 1000))) if known else int(rng.integers(0, 1 << 32))
        bad = [Transaction(DepositClaim(did, 100, producer_id), (), (Output(100, PayToKey(producer_id)),))]
    elif kind == "theft":
        if not victims:
            raise CannotInject("theft needs a victim output")
        op, c = victims[0]
        tx = Transaction(Transfer(), (Input(op, b"\x00" * 32, c),),
                         (Output(c.output.value, PayToKey(producer_id)),))
        bad = [tx]
    elif kind in ("bad_state_root", "bad_intermediate_root"):
        pass
    else:
        raise ValueError(f"unknown fault kind {kind!r}")

    # for double_spend the valid first spend lands right before the offending one
    txs[pos:pos] = bad
    if kind == "bad_intermediate_root" and len(txs) <= k:
        raise CannotInject("bad_intermediate_root needs more than k transactions")
    block, _ = assemble_block(state, txs, producer_id, bond, k)
    header = block.header
    if kind == "bad_state_root":
        header = replace(header, state_root=_rand_digest(rng))
    elif kind == "bad_intermediate_root":
        roots = list(header.intermediate_roots)
        j = int(rng.integers(0, len(roots)))
        roots[j] = _rand_digest(rng)
        header = replace(header, intermediate_roots=tuple(roots))
    return SideBlock(header, block.transactions)


def burn_tx(owner: str, outpoint: Outpoint, claim: Claim, amount: int, recipient: str,
            scheme: KeyedHashScheme = DEFAULT_SCHEME) -> Transaction:
    """Burn ``amount`` of an owned output for withdrawal to ``recipient``,
    returning the change to ``owner``."""
    outs = [Output(amount, Burn(recipient))]
    change = claim.output.value - amount
    if change:
        outs.append(Output(change, PayToKey(owner)))
    tx = Transaction(BurnKind(amount, recipient), (Input(outpoint, b"", claim),), tuple(outs))
    return sign_inputs(tx, [owner], scheme)
