"""Shared binary file plumbing: little-endian framing with CRC32 checks.

All promptnerf binary artifacts use the same conventions: a 4-byte ASCII
magic, a u16 version, length-prefixed UTF-8 strings, little-endian scalars,
and CRC32 trailers over the protected span so one-byte corruptions are
always detected.
"""

from __future__ import annotations

import struct
import zlib
from io import BytesIO

import numpy as np


class FormatError(ValueError):
    """A binary artifact failed validation; offset points at the problem."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class Writer:
    def __init__(self):
        self.buf = BytesIO()

    def magic(self, tag: str, version: int):
        assert len(tag) == 4
        self.buf.write(tag.encode("ascii"))
        self.u16(version)

    def u8(self, v: int):
        self.buf.write(struct.pack("<B", v))

    def u16(self, v: int):
        self.buf.write(struct.pack("<H", v))

    def u32(self, v: int):
        self.buf.write(struct.pack("<I", v))

    def f64(self, v: float):
        self.buf.write(struct.pack("<d", v))

    def string(self, s: str):
        raw = s.encode("utf-8")
        self.u16(len(raw))
        self.buf.write(raw)

    def f64_array(self, arr: np.ndarray):
        self.buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())

    def f32_array(self, arr: np.ndarray):
        self.buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())

    def crc_since(self, mark: int):
        """Append CRC32 of everything written since byte position ``mark``."""
        data = self.buf.getvalue()[mark:]
        self.u32(zlib.crc32(data) & 0xFFFFFFFF)

    def tell(self) -> int:
        return self.buf.tell()

    def getvalue(self) -> bytes:
        return self.buf.getvalue()

    def save(self, path):
        with open(path, "wb") as f:
            f.write(self.buf.getvalue())


class Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    @classmethod
    def load(cls, path) -> "Reader":
        with open(path, "rb") as f:
            return cls(f.read())

    def _take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(f"truncated file: needed {n} more bytes", self.pos)
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def magic(self, tag: str, version: int):
        got = self._take(4)
        if got != tag.encode("ascii"):
            raise FormatError(f"bad magic {got!r}, expected {tag!r}", 0)
        ver = self.u16()
        if ver != version:
            raise FormatError(f"unsupported version {ver}, expected {version}", 4)

    def u8(self) -> int:
        return struct.unpack("<B", self._take(1))[0]

    def u16(self) -> int:
        return struct.unpack("<H", self._take(2))[0]

    def u32(self) -> int:
        return struct.unpack("<I", self._take(4))[0]

    def f64(self) -> float:
        return struct.unpack("<d", self._take(8))[0]

    def string(self) -> str:
        n = self.u16()
        return self._take(n).decode("utf-8")

    def f64_array(self, count: int, shape=None) -> np.ndarray:
        arr = np.frombuffer(self._take(count * 8), dtype="<f8").astype(np.float64)
        return arr if shape is None else arr.reshape(shape)

    def f32_array(self, count: int, shape=None) -> np.ndarray:
        arr = np.frombuffer(self._take(count * 4), dtype="<f4")
        return arr if shape is None else arr.reshape(shape)

    def check_crc_since(self, mark: int):
        expected = zlib.crc32(self.data[mark : self.pos]) & 0xFFFFFFFF
        at = self.pos
        got = self.u32()
        if got != expected:
            raise FormatError(f"CRC mismatch: stored {got:#010x}, computed {expected:#010x}", at)
