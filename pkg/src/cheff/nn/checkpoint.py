"""``CHKP1`` checkpoint container.

Layout (little-endian)::

    b"CHKP1" | u32 version | u8 kind | u32 n + n bytes UTF-8 JSON config
    | u32 entry count | entries | u32 CRC32 of every preceding byte

Each entry is ``u32 name length | UTF-8 name | CTNSR1 tensor block``.
"""

from __future__ import annotations

import io
import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from cheff.errors import (CheckpointChecksumError, CheckpointError, CheckpointKindError,
                          CheckpointMagicError, CheckpointTruncatedError, CheckpointVersionError)
from cheff.io import TensorFormatError, atomic_write, read_tensor, write_tensor

MAGIC = b"CHKP1"
VERSION = 1
KIND_AE, KIND_SDM, KIND_SR, KIND_TXT = 0, 1, 2, 3
KIND_NAMES = {KIND_AE: "AE", KIND_SDM: "SDM", KIND_SR: "SR", KIND_TXT: "TXT"}


@dataclass
class Checkpoint:
    kind: int
    config: dict
    tensors: dict[str, np.ndarray] = field(default_factory=dict)
    version: int = VERSION

    @property
    def kind_name(self) -> str:
        return KIND_NAMES.get(self.kind, str(self.kind))


def save_checkpoint(kind: int, config: dict, tensors: Mapping[str, np.ndarray]) -> bytes:
    if kind not in KIND_NAMES:
        raise CheckpointKindError(f"unknown checkpoint kind {kind}")
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<IB", VERSION, kind))
    blob = json.dumps(config, sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<I", len(blob)))
    buf.write(blob)
    buf.write(struct.pack("<I", len(tensors)))
    for name, array in tensors.items():
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        write_tensor(buf, np.asarray(array))
    body = buf.getvalue()
    return body + struct.pack("<I", zlib.crc32(body))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointTruncatedError(
                f"checkpoint truncated at byte {self.pos} (needed {n} more, {len(self.data) - self.pos} left)")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(data: bytes, expected_kind: int | None = None) -> Checkpoint:
    """Parse and verify a checkpoint.

    Raises distinct :class:`~cheff.errors.CheckpointError` subclasses for a
    wrong magic, truncation, checksum failure, version and kind mismatch.
    """
    if data[:len(MAGIC)] != MAGIC:
        raise CheckpointMagicError(f"bad checkpoint magic {bytes(data[:len(MAGIC)])!r}")
    r = _Reader(data)
    r.take(len(MAGIC))
    version, kind = r.unpack("<IB")
    (blob_len,) = r.unpack("<I")
    blob = r.take(blob_len)
    (count,) = r.unpack("<I")
    entries: list[tuple[bytes, int, int]] = []
    for _ in range(count):
        (name_len,) = r.unpack("<I")
        name = r.take(name_len)
        start = r.pos
        stream = io.BytesIO(data[start:])
        try:
            read_tensor(stream)
        except TensorFormatError as exc:
            if "truncated" in str(exc):
                raise CheckpointTruncatedError(f"tensor {name!r}: {exc}") from exc
            raise CheckpointError(f"tensor {name!r}: {exc}") from exc
        r.pos = start + stream.tell()
        entries.append((name, start, r.pos))
    body_end = r.pos
    (stored_crc,) = r.unpack("<I")
    if zlib.crc32(data[:body_end]) != stored_crc:
        raise CheckpointChecksumError("checkpoint CRC32 mismatch")
    if r.pos != len(data):
        raise CheckpointError(f"{len(data) - r.pos} trailing bytes after checkpoint")
    if version != VERSION:
        raise CheckpointVersionError(f"unsupported checkpoint version {version}")
    if expected_kind is not None and kind != expected_kind:
        raise CheckpointKindError(
            f"checkpoint holds a {KIND_NAMES.get(kind, kind)} model, expected {KIND_NAMES[expected_kind]}")
    try:
        config = json.loads(blob.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable config echo: {exc}") from exc
    tensors = {name.decode("utf-8"): read_tensor(io.BytesIO(data[s:e])) for name, s, e in entries}
    return Checkpoint(kind, config, tensors, version)


def write_checkpoint(path, kind: int, config: dict, tensors: Mapping[str, np.ndarray]) -> bytes:
    data = save_checkpoint(kind, config, tensors)
    atomic_write(path, data)
    return data


def read_checkpoint(path, expected_kind: int | None = None) -> Checkpoint:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    return load_checkpoint(data, expected_kind)
