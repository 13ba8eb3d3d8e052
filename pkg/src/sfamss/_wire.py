"""Big-endian primitives shared by the message codec, certificates and the store."""

from __future__ import annotations

import struct

MAX_FIELD = 1 << 20


class Truncated(ValueError):
    pass


class OversizeField(ValueError):
    pass


def u8(v: int) -> bytes:
    return struct.pack(">B", v)


def u32(v: int) -> bytes:
    return struct.pack(">I", v)


def u64(v: int) -> bytes:
    return struct.pack(">Q", v)


def lp(data: bytes) -> bytes:
    if len(data) > MAX_FIELD:
        raise OversizeField(f"field of {len(data)} bytes exceeds 1 MiB")
    return u32(len(data)) + data


class Reader:
    def __init__(self, data: bytes, pos: int = 0) -> None:
        self.data = data
        self.pos = pos

    def take(self, n: int) -> bytes:
        end = self.pos + n
        if end > len(self.data):
            raise Truncated(f"need {n} bytes at offset {self.pos}, have {len(self.data) - self.pos}")
        out = self.data[self.pos:end]
        self.pos = end
        return out

    def u8(self) -> int:
        return self.take(1)[0]

    def u32(self) -> int:
        return struct.unpack(">I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack(">Q", self.take(8))[0]

    def lp(self) -> bytes:
        n = self.u32()
        if n > MAX_FIELD:
            raise OversizeField(f"length prefix {n} exceeds 1 MiB")
        return self.take(n)

    def remaining(self) -> int:
        return len(self.data) - self.pos
