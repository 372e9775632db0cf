"""Little-endian binary helpers shared by the checkpoint, adapter and bitstream formats."""

from __future__ import annotations

import struct

import numpy as np

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
_MASK64 = (1 << 64) - 1


class FormatError(ValueError):
    """Raised for truncated, corrupted or otherwise malformed files."""


class CompatibilityError(ValueError):
    """Raised when an artifact was produced for a different model or adapter set."""


def fnv1a64(data: bytes) -> int:
    h = FNV_OFFSET
    for byte in data:
        h = ((h ^ byte) * FNV_PRIME) & _MASK64
    return h


def write_str(buf: bytearray, text: str) -> None:
    raw = text.encode("utf-8")
    buf += struct.pack("<H", len(raw))
    buf += raw


def write_tensor(buf: bytearray, name: str, arr: np.ndarray) -> None:
    write_str(buf, name)
    buf += struct.pack("<B", arr.ndim)
    buf += struct.pack(f"<{arr.ndim}I", *arr.shape)
    buf += np.ascontiguousarray(arr, dtype="<f4").tobytes()


class Reader:
    """Cursor over a byte string that raises :class:`FormatError` on truncation."""

    def __init__(self, data: bytes, offset: int = 0):
        self.data = data
        self.pos = offset

    def take(self, n: int) -> bytes:
        if n < 0 or self.pos + n > len(self.data):
            raise FormatError(f"truncated input: wanted {n} bytes at offset {self.pos}, have {len(self.data) - self.pos}")
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        size = struct.calcsize(fmt)
        values = struct.unpack(fmt, self.take(size))
        return values[0] if len(values) == 1 else values

    def read_str(self) -> str:
        n = self.unpack("<H")
        try:
            return self.take(n).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError("invalid UTF-8 name") from exc

    def read_tensor(self) -> tuple[str, np.ndarray]:
        name = self.read_str()
        ndim = self.unpack("<B")
        dims = struct.unpack(f"<{ndim}I", self.take(4 * ndim)) if ndim else ()
        count = int(np.prod(dims)) if dims else 1
        arr = np.frombuffer(self.take(4 * count), dtype="<f4").astype(np.float32).reshape(dims)
        return name, arr

    def at_end(self) -> bool:
        return self.pos == len(self.data)


def split_checksum(data: bytes) -> tuple[bytes, int]:
    """Separate a payload from its trailing FNV-1a hash and verify it."""
    if len(data) < 8:
        raise FormatError("file too short for checksum")
    body, tail = data[:-8], data[-8:]
    (stored,) = struct.unpack("<Q", tail)
    if fnv1a64(body) != stored:
        raise FormatError("checksum mismatch")
    return body, stored
