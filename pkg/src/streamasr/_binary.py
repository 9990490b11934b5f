"""Little-endian binary helpers shared by the checkpoint containers."""

from __future__ import annotations

import struct

import numpy as np

from .errors import FormatError

FNV64_OFFSET = 0xCBF29CE484222325
FNV64_PRIME = 0x100000001B3
_MASK64 = (1 << 64) - 1


def fnv1a64(data: bytes) -> int:
    h = FNV64_OFFSET
    for byte in data:
        h ^= byte
        h = (h * FNV64_PRIME) & _MASK64
    return h


def tensor_table_bytes(tensors: dict[str, np.ndarray]) -> bytes:
    """Serialize ``name -> float32 array`` in insertion order."""
    parts = [struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        parts.append(tensor_header_bytes(name, arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def tensor_header_bytes(name: str, shape: tuple[int, ...]) -> bytes:
    raw = name.encode("utf-8")
    return struct.pack(f"<H{len(raw)}sB{len(shape)}I", len(raw), raw, len(shape), *shape)


class Reader:
    """Cursor over a bytes buffer that raises FormatError on truncation."""

    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if n < 0 or self.pos + n > len(self.data):
            raise FormatError(f"truncated data: wanted {n} bytes at offset {self.pos}")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        fmt = "<" + fmt
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def floats(self, count: int) -> np.ndarray:
        return np.frombuffer(self.take(4 * count), dtype="<f4").astype(np.float32)

    def tensor_header(self) -> tuple[str, tuple[int, ...]]:
        (name_len,) = self.unpack("H")
        name = self.take(name_len).decode("utf-8")
        (rank,) = self.unpack("B")
        shape = self.unpack(f"{rank}I") if rank else ()
        return name, tuple(int(s) for s in shape)

    def done(self) -> bool:
        return self.pos == len(self.data)
