"""Little-endian binary helpers shared by the checkpoint, bank and array formats."""

from __future__ import annotations

import struct

import numpy as np

from .errors import FormatError

F32_LE = np.dtype("<f4")


class Writer:
    def __init__(self):
        self._parts: list[bytes] = []

    def raw(self, b: bytes) -> None:
        self._parts.append(bytes(b))

    def u16(self, v: int) -> None:
        self._parts.append(struct.pack("<H", v))

    def u32(self, v: int) -> None:
        self._parts.append(struct.pack("<I", v))

    def u64(self, v: int) -> None:
        self._parts.append(struct.pack("<Q", v))

    def text(self, s: str) -> None:
        """u16 length prefix followed by UTF-8 bytes."""
        b = s.encode("utf-8")
        if len(b) > 0xFFFF:
            raise ValueError("string too long for a u16 length prefix")
        self.u16(len(b))
        self.raw(b)

    def f32_array(self, a: np.ndarray) -> None:
        self.raw(np.ascontiguousarray(a, dtype=F32_LE).tobytes())

    def getvalue(self) -> bytes:
        return b"".join(self._parts)


class Reader:
    def __init__(self, data: bytes):
        self.data = memoryview(data)
        self.offset = 0

    def take(self, n: int) -> memoryview:
        if self.offset + n > len(self.data):
            raise FormatError(
                f"truncated input: wanted {n} bytes, {len(self.data) - self.offset} left", self.offset
            )
        chunk = self.data[self.offset : self.offset + n]
        self.offset += n
        return chunk

    def _unpack(self, fmt: str):
        size = struct.calcsize(fmt)
        return struct.unpack(fmt, self.take(size))[0]

    def u16(self) -> int:
        return self._unpack("<H")

    def u32(self) -> int:
        return self._unpack("<I")

    def u64(self) -> int:
        return self._unpack("<Q")

    def text(self) -> str:
        start = self.offset
        n = self.u16()
        try:
            return bytes(self.take(n)).decode("utf-8")
        except UnicodeDecodeError as e:
            raise FormatError(f"invalid UTF-8 string: {e}", start) from None

    def f32_array(self, count: int) -> np.ndarray:
        if count > (len(self.data) - self.offset) // 4:
            raise FormatError(f"truncated input: array of {count} floats does not fit", self.offset)
        return np.frombuffer(self.take(4 * count), dtype=F32_LE).astype(np.float32)

    def expect_magic(self, magic: bytes) -> None:
        got = bytes(self.take(len(magic)))
        if got != magic:
            raise FormatError(f"bad magic {got!r}, expected {magic!r}", 0)

    def expect_end(self) -> None:
        if self.offset != len(self.data):
            raise FormatError(f"{len(self.data) - self.offset} trailing bytes", self.offset)


def fnv1a_64(data: bytes, h: int = 0xCBF29CE484222325) -> int:
    for byte in data:
        h = ((h ^ byte) * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
    return h


def write_array_file(path, arrays: dict[str, np.ndarray], magic: bytes = b"DISCARRY", version: int = 1) -> None:
    """Named float32 arrays in the checkpoint entry layout (shapes live elsewhere)."""
    w = Writer()
    w.raw(magic)
    w.u16(version)
    w.u32(len(arrays))
    for key, a in arrays.items():
        w.text(key)
        w.u64(a.size)
        w.f32_array(a)
    with open(path, "wb") as f:
        f.write(w.getvalue())


def read_array_file(path, magic: bytes = b"DISCARRY", version: int = 1) -> dict[str, np.ndarray]:
    with open(path, "rb") as f:
        r = Reader(f.read())
    r.expect_magic(magic)
    at = r.offset
    if (v := r.u16()) != version:
        raise FormatError(f"unsupported version {v}", at)
    out = {}
    for _ in range(r.u32()):
        key = r.text()
        out[key] = r.f32_array(r.u64())
    r.expect_end()
    return out
