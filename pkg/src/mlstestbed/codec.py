"""Deterministic length-prefixed binary encoding.

Every top-level protocol object starts with :data:`FORMAT_VERSION` followed by
a one-byte object tag. Integers are big-endian and fixed width, octet strings
carry a 4-byte length prefix, vectors a 4-byte element count.
"""

from __future__ import annotations

import struct

FORMAT_VERSION = 1


class DecodeError(ValueError):
    pass


class Writer:
    def __init__(self):
        self._parts: list[bytes] = []

    def u8(self, v: int) -> "Writer":
        self._parts.append(struct.pack(">B", v))
        return self

    def u32(self, v: int) -> "Writer":
        self._parts.append(struct.pack(">I", v))
        return self

    def u64(self, v: int) -> "Writer":
        self._parts.append(struct.pack(">Q", v))
        return self

    def opaque(self, data: bytes) -> "Writer":
        self._parts.append(struct.pack(">I", len(data)))
        self._parts.append(data)
        return self

    def text(self, s: str) -> "Writer":
        return self.opaque(s.encode())

    def optional(self, data: bytes | None) -> "Writer":
        if data is None:
            return self.u8(0)
        self.u8(1)
        return self.opaque(data)

    def raw(self, data: bytes) -> "Writer":
        self._parts.append(data)
        return self

    def getvalue(self) -> bytes:
        return b"".join(self._parts)


class Reader:
    def __init__(self, data: bytes):
        self._data = memoryview(data)
        self._pos = 0

    def _take(self, n: int) -> bytes:
        if n < 0 or self._pos + n > len(self._data):
            raise DecodeError("truncated input")
        out = bytes(self._data[self._pos:self._pos + n])
        self._pos += n
        return out

    def u8(self) -> int:
        return self._take(1)[0]

    def u32(self) -> int:
        return struct.unpack(">I", self._take(4))[0]

    def u64(self) -> int:
        return struct.unpack(">Q", self._take(8))[0]

    def opaque(self) -> bytes:
        return self._take(self.u32())

    def text(self) -> str:
        try:
            return self.opaque().decode()
        except UnicodeDecodeError as exc:
            raise DecodeError("invalid utf-8") from exc

    def optional(self) -> bytes | None:
        flag = self.u8()
        if flag == 0:
            return None
        if flag != 1:
            raise DecodeError("bad optional flag")
        return self.opaque()

    def done(self) -> bool:
        return self._pos == len(self._data)

    def expect_done(self) -> None:
        if not self.done():
            raise DecodeError("trailing bytes")


def header(tag: int) -> Writer:
    return Writer().u8(FORMAT_VERSION).u8(tag)


def open_header(data: bytes, tag: int) -> Reader:
    r = Reader(data)
    version, got = r.u8(), r.u8()
    if version != FORMAT_VERSION:
        raise DecodeError(f"unsupported format version {version}")
    if got != tag:
        raise DecodeError(f"expected object tag {tag}, got {got}")
    return r
