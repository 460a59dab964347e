"""Byte-level helpers for the canonical encodings.

Every top-level encoding starts with the format version byte ``0x01`` and a
one-byte type tag.  Integers are big-endian; strings are UTF-8 with a u16
length prefix; byte blobs carry a u32 length prefix.
"""

from __future__ import annotations

import struct

VERSION = 0x01

TAG_TX = 0x10
TAG_TX_CORE = 0x11
TAG_HEADER = 0x20
TAG_BLOCK = 0x30
TAG_CALL = 0x40
TAG_PARENT_BLOCK = 0x50
TAG_BRIDGE_STATE = 0x60
TAG_PROOF_A = 0xA0
TAG_PROOF_B = 0xB0
TAG_CODING_PROOF = 0xC0

_U16 = struct.Struct(">H")
_U32 = struct.Struct(">I")
_U64 = struct.Struct(">Q")

U64_MAX = (1 << 64) - 1


class DecodeError(ValueError):
    """Raised on malformed or non-canonical bytes."""


def u8(n: int) -> bytes:
    return bytes((n,))


def u16(n: int) -> bytes:
    return _U16.pack(n)


def u32(n: int) -> bytes:
    return _U32.pack(n)


def u64(n: int) -> bytes:
    if not 0 <= n <= U64_MAX:
        raise ValueError(f"{n} does not fit in 64 bits")
    return _U64.pack(n)


def text(s: str) -> bytes:
    raw = s.encode("utf-8")
    return _U16.pack(len(raw)) + raw


def blob(b: bytes) -> bytes:
    return _U32.pack(len(b)) + b


def header(tag: int) -> bytes:
    return bytes((VERSION, tag))


class Reader:
    __slots__ = ("data", "pos")

    def __init__(self, data: bytes, pos: int = 0):
        self.data = data
        self.pos = pos

    def take(self, n: int) -> bytes:
        end = self.pos + n
        if end > len(self.data):
            raise DecodeError("truncated input")
        chunk = self.data[self.pos:end]
        self.pos = end
        return chunk

    def u8(self) -> int:
        if self.pos >= len(self.data):
            raise DecodeError("truncated input")
        v = self.data[self.pos]
        self.pos += 1
        return v

    def u16(self) -> int:
        return _U16.unpack(self.take(2))[0]

    def u32(self) -> int:
        return _U32.unpack(self.take(4))[0]

    def u64(self) -> int:
        return _U64.unpack(self.take(8))[0]

    def digest(self) -> bytes:
        return self.take(32)

    def text(self) -> str:
        raw = self.take(self.u16())
        try:
            return raw.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise DecodeError("invalid UTF-8") from exc

    def blob(self) -> bytes:
        return self.take(self.u32())

    def flag(self) -> bool:
        v = self.u8()
        if v > 1:
            raise DecodeError("non-canonical boolean")
        return bool(v)

    def expect_header(self, tag: int) -> None:
        version, got = self.u8(), self.u8()
        if version != VERSION:
            raise DecodeError(f"unsupported encoding version {version}")
        if got != tag:
            raise DecodeError(f"expected tag {tag:#x}, got {got:#x}")

    def done(self) -> None:
        if self.pos != len(self.data):
            raise DecodeError("trailing bytes")

    def remaining(self) -> int:
        return len(self.data) - self.pos
