"""Erasure-coded block availability.

Blocks are split into ``k`` data chunks and extended to ``n`` chunks with a
systematic Reed-Solomon code over GF(2^16): chunk ``i`` holds the values at
``x = i`` of the per-symbol polynomials of degree ``< k`` through the data.
Any ``k`` chunks determine the rest.  Chunks are committed with a binary
Merkle root; light clients sample random chunk indices and treat the block
as withheld if any sampled chunk is missing or fails its proof.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from functools import lru_cache
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from . import encoding as enc
from .encoding import Reader
from .hashing import MerkleProof, merkle_prove, merkle_root, merkle_verify

FIELD_BITS = 16
FIELD_ORDER = 1 << FIELD_BITS
_POLY = 0x1100B  # x^16 + x^12 + x^3 + x + 1, primitive
MAX_CHUNKS = FIELD_ORDER - 1


def _tables() -> tuple[np.ndarray, np.ndarray]:
    exp = np.zeros(2 * FIELD_ORDER, dtype=np.int64)
    log = np.zeros(FIELD_ORDER, dtype=np.int64)
    x = 1
    for i in range(FIELD_ORDER - 1):
        exp[i] = x
        log[x] = i
        x <<= 1
        if x & FIELD_ORDER:
            x ^= _POLY
    exp[FIELD_ORDER - 1:2 * (FIELD_ORDER - 1)] = exp[:FIELD_ORDER - 1]
    return exp, log


EXP, LOG = _tables()


def gf_mul(a: int, b: int) -> int:
    if a == 0 or b == 0:
        return 0
    return int(EXP[LOG[a] + LOG[b]])


def gf_inv(a: int) -> int:
    if a == 0:
        raise ZeroDivisionError("zero has no inverse")
    return int(EXP[(FIELD_ORDER - 1) - LOG[a]])


def _scale(c: int, v: np.ndarray) -> np.ndarray:
    """``c * v`` elementwise in GF(2^16)."""
    if c == 0:
        return np.zeros_like(v)
    out = EXP[LOG[v] + LOG[c]]
    out[v == 0] = 0
    return out


@lru_cache(maxsize=256)
def _lagrange_rows(sources: tuple[int, ...], targets: tuple[int, ...]) -> tuple[tuple[int, ...], ...]:
    """Coefficients mapping values at ``sources`` to values at ``targets``.

    Field points are chunk indices; addition and subtraction are XOR.
    """
    rows = []
    for t in targets:
        row = []
        for j, xj in enumerate(sources):
            num, den = 1, 1
            for m, xm in enumerate(sources):
                if m != j:
                    num = gf_mul(num, t ^ xm)
                    den = gf_mul(den, xj ^ xm)
            row.append(gf_mul(num, gf_inv(den)))
        rows.append(tuple(row))
    return tuple(rows)


def _combine(rows, symbols: Sequence[np.ndarray]) -> list[np.ndarray]:
    out = []
    for row in rows:
        acc = np.zeros_like(symbols[0])
        for c, v in zip(row, symbols):
            if c:
                acc ^= _scale(c, v)
        out.append(acc)
    return out


class OversizeBlock(ValueError):
    pass


class NotEnoughChunks(ValueError):
    pass


class CodingActuallyCorrect(Exception):
    pass


class InvalidCodingProof(Exception):
    pass


def chunk_size(length: int, k: int) -> int:
    """``ceil(length / k)`` rounded up to whole 16-bit symbols (at least one)."""
    size = max(1, -(-length // k))
    return size + (size & 1)


def _to_symbols(chunk: bytes) -> np.ndarray:
    return np.frombuffer(chunk, dtype=">u2").astype(np.int64)


def _to_bytes(symbols: np.ndarray) -> bytes:
    return symbols.astype(">u2").tobytes()


@dataclass(frozen=True)
class CodedBlock:
    k: int
    n: int
    length: int
    chunks: tuple[bytes, ...]
    chunk_root: bytes

    def proof(self, index: int) -> MerkleProof:
        return merkle_prove(list(self.chunks), index)


def _check_params(k: int, n: int) -> None:
    if k < 1 or n < k:
        raise ValueError("need 1 <= k <= n")
    if n > MAX_CHUNKS:
        raise OversizeBlock(f"n={n} exceeds the field size")


def encode(data: bytes, k: int, n: Optional[int] = None,
           max_chunk_size: Optional[int] = None) -> CodedBlock:
    n = 2 * k if n is None else n
    _check_params(k, n)
    size = chunk_size(len(data), k)
    if max_chunk_size is not None and size > max_chunk_size:
        raise OversizeBlock(f"chunk size {size} exceeds budget {max_chunk_size}")
    padded = data.ljust(size * k, b"\x00")
    data_chunks = [padded[i * size:(i + 1) * size] for i in range(k)]
    symbols = [_to_symbols(c) for c in data_chunks]
    parity = _combine(_lagrange_rows(tuple(range(k)), tuple(range(k, n))), symbols)
    chunks = tuple(data_chunks) + tuple(_to_bytes(p) for p in parity)
    return CodedBlock(k, n, len(data), chunks, merkle_root(list(chunks)))


def _reconstruct_all(chunks: Mapping[int, bytes], k: int, n: int) -> list[bytes]:
    if len(chunks) < k:
        raise NotEnoughChunks(f"{len(chunks)} chunks, {k} needed")
    idx = tuple(sorted(chunks)[:k])
    if idx[-1] >= n:
        raise ValueError("chunk index out of range")
    symbols = [_to_symbols(chunks[i]) for i in idx]
    if len({len(s) for s in symbols}) != 1:
        raise ValueError("chunks differ in size")
    rows = _lagrange_rows(idx, tuple(range(n)))
    return [_to_bytes(s) for s in _combine(rows, symbols)]


def decode(chunks: Mapping[int, bytes], k: int, n: int, length: int) -> bytes:
    """Original bytes from any ``k`` chunks (index -> bytes)."""
    _check_params(k, n)
    if len(chunks) < k:
        raise NotEnoughChunks(f"{len(chunks)} chunks, {k} needed")
    idx = tuple(sorted(chunks)[:k])
    if idx == tuple(range(k)):
        data = b"".join(chunks[i] for i in idx)
    else:
        symbols = [_to_symbols(chunks[i]) for i in idx]
        rows = _lagrange_rows(idx, tuple(range(k)))
        data = b"".join(_to_bytes(s) for s in _combine(rows, symbols))
    return data[:length]


# ---------------------------------------------------------------- sampling


@dataclass(frozen=True)
class SamplingResult:
    requested: tuple[int, ...]
    received: tuple[int, ...]
    verdict: str  # "Available" or "Withheld"


class ChunkServer:
    """Serves chunks of a coded block, except those in ``withheld``.

    ``corrupt`` maps indices to bytes served in place of the real chunk.
    """

    def __init__(self, coded: CodedBlock, withheld: Iterable[int] = (),
                 corrupt: Mapping[int, bytes] | None = None):
        self.coded = coded
        self.withheld = frozenset(withheld)
        self.corrupt = dict(corrupt or {})
        self._leaves = list(coded.chunks)

    def request(self, index: int) -> Optional[tuple[bytes, MerkleProof]]:
        if index in self.withheld:
            return None
        chunk = self.corrupt.get(index, self.coded.chunks[index])
        return chunk, merkle_prove(self._leaves, index)


def sample(server: ChunkServer, chunk_root: bytes, n: int, s: int,
           rng: np.random.Generator) -> SamplingResult:
    if not 0 <= s <= n:
        raise ValueError("sample count must be between 0 and n")
    requested = tuple(int(i) for i in rng.choice(n, size=s, replace=False))
    received = []
    for i in requested:
        reply = server.request(i)
        if reply is None:
            continue
        chunk, proof = reply
        if proof.leaf_index == i and proof.tree_size == n and merkle_verify(chunk_root, chunk, proof):
            received.append(i)
    verdict = "Available" if len(received) == len(requested) else "Withheld"
    return SamplingResult(requested, tuple(received), verdict)


def detection_probability(n: int, withheld: int, s: int) -> Fraction:
    """Exact chance that ``s`` distinct uniform samples hit a withheld chunk."""
    return 1 - Fraction(math.comb(n - withheld, s), math.comb(n, s))


def empirical_detection(n: int, k: int, withheld: int, s: int, trials: int,
                        rng: np.random.Generator) -> float:
    """Fraction of ``trials`` in which sampling flags a block with ``withheld``
    random chunks missing."""
    coded = encode(bytes(2 * k), k, n)
    hits = 0
    for _ in range(trials):
        w = rng.choice(n, size=withheld, replace=False)
        res = sample(ChunkServer(coded, w), coded.chunk_root, n, s, rng)
        hits += res.verdict == "Withheld"
    return hits / trials


# ---------------------------------------------------------------- coding fraud


@dataclass(frozen=True)
class IncorrectCodingProof:
    chunk_root: bytes
    k: int
    n: int
    witnesses: tuple[tuple[int, bytes, MerkleProof], ...]

    def encode(self) -> bytes:
        parts = [enc.header(enc.TAG_CODING_PROOF), self.chunk_root, enc.u32(self.k),
                 enc.u32(self.n), enc.u32(len(self.witnesses))]
        for i, chunk, mp in self.witnesses:
            parts += [enc.u32(i), enc.blob(chunk), enc.blob(mp.encode())]
        return b"".join(parts)

    @classmethod
    def decode(cls, data: bytes) -> "IncorrectCodingProof":
        r = Reader(data)
        r.expect_header(enc.TAG_CODING_PROOF)
        root, k, n, m = r.digest(), r.u32(), r.u32(), r.u32()
        wits = tuple((r.u32(), r.blob(), MerkleProof.decode(r.blob())) for _ in range(m))
        r.done()
        return cls(root, k, n, wits)


def _coding_mismatch(chunk_root: bytes, k: int, n: int, chunks: Mapping[int, bytes]) -> bool:
    full = _reconstruct_all(chunks, k, n)
    return merkle_root(full) != chunk_root


def prove_incorrect_coding(chunk_root: bytes, k: int, n: int,
                           witnesses: Sequence[tuple[int, bytes, MerkleProof]]) -> IncorrectCodingProof:
    """Package ``k`` committed chunks whose re-encoding contradicts ``chunk_root``."""
    proof = IncorrectCodingProof(chunk_root, k, n, tuple(witnesses[:k]))
    _check_witnesses(proof)
    if not _coding_mismatch(chunk_root, k, n, {i: c for i, c, _ in proof.witnesses}):
        raise CodingActuallyCorrect("witnessed chunks re-encode to the committed root")
    return proof


def _check_witnesses(proof: IncorrectCodingProof) -> None:
    _check_params(proof.k, proof.n)
    if len(proof.witnesses) != proof.k or len({i for i, _, _ in proof.witnesses}) != proof.k:
        raise InvalidCodingProof("need k distinct chunks")
    sizes = {len(c) for _, c, _ in proof.witnesses}
    if len(sizes) != 1 or sizes.pop() % 2:
        raise InvalidCodingProof("chunks must share one even size")
    for i, chunk, mp in proof.witnesses:
        if (not 0 <= i < proof.n or mp.leaf_index != i or mp.tree_size != proof.n
                or not merkle_verify(proof.chunk_root, chunk, mp)):
            raise InvalidCodingProof(f"chunk {i} does not verify")


def verify_incorrect_coding(proof: IncorrectCodingProof | bytes) -> bool:
    """True iff the proof shows the committed chunks are not a codeword.

    Raises :class:`InvalidCodingProof` for malformed or unverifiable witnesses.
    """
    if isinstance(proof, (bytes, bytearray)):
        try:
            proof = IncorrectCodingProof.decode(bytes(proof))
        except ValueError as exc:
            raise InvalidCodingProof(str(exc)) from exc
    _check_witnesses(proof)
    return _coding_mismatch(proof.chunk_root, proof.k, proof.n,
                            {i: c for i, c, _ in proof.witnesses})


def commit_chunks(chunks: Sequence[bytes]) -> bytes:
    return merkle_root(list(chunks))
