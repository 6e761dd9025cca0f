"""Checkpoint container (``VIMC``).

Layout (little-endian)::

    b"VIMC" | u8 version
    u32 n | n bytes UTF-8 config snapshot (key=value lines)
    u32 count | count x (u16 n | name | u64 n | VIMT blob)
    u32 n | n bytes RNG state (JSON)
    u64 step
    u32 CRC32 of every preceding byte
"""

from __future__ import annotations

import json
import os
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .errors import ChecksumError, FormatError, MagicError, VersionError
from .formats import _Reader, read_tensor_from, tensor_to_bytes

MAGIC = b"VIMC"
VERSION = 1


@dataclass
class Checkpoint:
    config: dict[str, str]
    tensors: dict[str, np.ndarray]
    rng_state: dict = field(default_factory=dict)
    step: int = 0
    version: int = VERSION


def checkpoint_to_bytes(ckpt: Checkpoint) -> bytes:
    parts = [MAGIC, struct.pack("<B", VERSION)]
    text = cfgmod.dump_text(ckpt.config).encode("utf-8")
    parts.append(struct.pack("<I", len(text)) + text)
    parts.append(struct.pack("<I", len(ckpt.tensors)))
    for name, arr in ckpt.tensors.items():
        raw_name = name.encode("utf-8")
        blob = tensor_to_bytes(arr)
        parts.append(struct.pack("<H", len(raw_name)) + raw_name + struct.pack("<Q", len(blob)) + blob)
    rng = json.dumps(ckpt.rng_state, sort_keys=True).encode("utf-8")
    parts.append(struct.pack("<I", len(rng)) + rng)
    parts.append(struct.pack("<Q", ckpt.step))
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def checkpoint_from_bytes(buf: bytes) -> Checkpoint:
    r = _Reader(buf, what="checkpoint")
    if r.take(4) != MAGIC:
        raise MagicError("not a VIMC checkpoint (bad magic)")
    (version,) = r.unpack("<B")
    if version != VERSION:
        raise VersionError(f"unsupported checkpoint version {version}")
    # frame everything first so a corrupted payload reports a checksum error, not a decode error
    (n,) = r.unpack("<I")
    config_raw = r.take(n)
    (count,) = r.unpack("<I")
    blobs = []
    for _ in range(count):
        (n,) = r.unpack("<H")
        name_raw = r.take(n)
        (blob_len,) = r.unpack("<Q")
        blobs.append((name_raw, r.take(blob_len)))
    (n,) = r.unpack("<I")
    rng_raw = r.take(n)
    (step,) = r.unpack("<Q")
    body_end = r.pos
    (crc,) = r.unpack("<I")
    if r.pos != len(buf):
        raise FormatError(f"{len(buf) - r.pos} trailing bytes after checkpoint")
    if zlib.crc32(buf[:body_end]) != crc:
        raise ChecksumError("checkpoint CRC32 mismatch")
    config = cfgmod.parse_text(config_raw.decode("utf-8"))
    tensors: dict[str, np.ndarray] = {}
    for name_raw, blob in blobs:
        name = name_raw.decode("utf-8")
        tensors[name] = read_tensor_from(_Reader(blob, what=f"tensor {name!r}"))
    rng_state = json.loads(rng_raw.decode("utf-8"))
    return Checkpoint(config=config, tensors=tensors, rng_state=rng_state, step=step, version=version)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(checkpoint_to_bytes(ckpt))
    os.replace(tmp, path)


def load_checkpoint(path) -> Checkpoint:
    return checkpoint_from_bytes(Path(path).read_bytes())
