"""Little-endian binary container helpers for the on-disk formats.

Every store starts with a 4-byte ASCII magic. Parse failures raise
:class:`StoreParseError` carrying the byte offset of the offending field,
never a bare struct/IndexError.
"""

from __future__ import annotations

import struct

import numpy as np


class StoreParseError(Exception):
    """Malformed store file; `offset` is where parsing failed."""

    def __init__(self, offset: int, message: str):
        self.offset = offset
        super().__init__(f"at byte {offset}: {message}")


class Reader:
    def __init__(self, data: bytes, name: str = "store"):
        self.data = data
        self.name = name
        self.offset = 0

    def _take(self, count: int, what: str) -> bytes:
        if self.offset + count > len(self.data):
            raise StoreParseError(
                self.offset,
                f"truncated {self.name}: need {count} bytes for {what}, "
                f"have {len(self.data) - self.offset}",
            )
        chunk = self.data[self.offset : self.offset + count]
        self.offset += count
        return chunk

    def expect_magic(self, magic: bytes) -> None:
        got = self._take(len(magic), "magic")
        if got != magic:
            raise StoreParseError(0, f"bad magic {got!r}, expected {magic!r}")

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self._take(4, what))[0]

    def f32_array(self, count: int, what: str) -> np.ndarray:
        raw = self._take(4 * count, what)
        return np.frombuffer(raw, dtype="<f4").copy()

    def u32_array(self, count: int, what: str) -> np.ndarray:
        raw = self._take(4 * count, what)
        return np.frombuffer(raw, dtype="<u4").copy()

    def expect_end(self) -> None:
        if self.offset != len(self.data):
            raise StoreParseError(
                self.offset,
                f"{len(self.data) - self.offset} trailing bytes",
            )


class Writer:
    def __init__(self):
        self._parts: list[bytes] = []

    def magic(self, magic: bytes) -> None:
        self._parts.append(magic)

    def u32(self, value: int) -> None:
        if not 0 <= value < 2**32:
            raise ValueError(f"u32 out of range: {value}")
        self._parts.append(struct.pack("<I", value))

    def f32_array(self, values: np.ndarray) -> None:
        self._parts.append(np.ascontiguousarray(values, dtype="<f4").tobytes())

    def u32_array(self, values: np.ndarray) -> None:
        arr = np.asarray(values)
        if arr.size and (arr.min() < 0 or arr.max() >= 2**32):
            raise ValueError("u32 array entries out of range")
        self._parts.append(np.ascontiguousarray(arr, dtype="<u4").tobytes())

    def getvalue(self) -> bytes:
        return b"".join(self._parts)
