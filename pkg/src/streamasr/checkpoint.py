"""``WKCK`` checkpoint container.

Layout (little-endian)::

    b"WKCK" | u8 version | u32 config_len | config JSON | tensor table

The tensor table is ``u32 count`` followed by, per tensor, ``u16 name_len``,
the UTF-8 name, ``u8 rank``, ``rank x u32`` dims and row-major float32 data.
The weights fingerprint is FNV-1a 64 over the tensor table bytes.
"""

from __future__ import annotations

import json
import os
import struct

from ._binary import Reader, tensor_table_bytes
from .errors import FormatError
from .model import ModelConfig, ModelWeights

MAGIC = b"WKCK"
VERSION = 1


def checkpoint_bytes(weights: ModelWeights) -> bytes:
    cfg = weights.config.to_json()
    return MAGIC + struct.pack("<BI", VERSION, len(cfg)) + cfg + tensor_table_bytes(weights.tensors)


def save_checkpoint(weights: ModelWeights, path: str | os.PathLike) -> int:
    data = checkpoint_bytes(weights)
    with open(path, "wb") as fh:
        fh.write(data)
    return len(data)


def parse_checkpoint(data: bytes) -> ModelWeights:
    r = Reader(data)
    if r.take(4) != MAGIC:
        raise FormatError("not a WKCK checkpoint (bad magic)")
    version, cfg_len = r.unpack("BI")
    if version != VERSION:
        raise FormatError(f"unsupported WKCK version {version}")
    try:
        config = ModelConfig.from_dict(json.loads(r.take(cfg_len)))
    except (ValueError, TypeError, KeyError) as exc:
        raise FormatError(f"bad config block: {exc}") from exc
    (count,) = r.unpack("I")
    tensors = {}
    for _ in range(count):
        name, shape = r.tensor_header()
        n = 1
        for s in shape:
            n *= s
        tensors[name] = r.floats(n).reshape(shape)
    if not r.done():
        raise FormatError("trailing bytes after tensor table")
    try:
        return ModelWeights(config, tensors)
    except ValueError as exc:
        raise FormatError(str(exc)) from exc


def load_checkpoint(path: str | os.PathLike) -> ModelWeights:
    with open(path, "rb") as fh:
        return parse_checkpoint(fh.read())
