"""Binary file formats: raw ``CTNSR1`` tensors and PGM ``P5`` images.

``CTNSR1`` layout (all little-endian)::

    b"CTNSR1" | u32 rank | rank x u64 extents | u8 dtype (0=f32, 1=f64) | payload
"""

from __future__ import annotations

import io as _io
import os
import struct
import tempfile
from pathlib import Path
from typing import BinaryIO

import numpy as np

from cheff.errors import DataIOError

TENSOR_MAGIC = b"CTNSR1"
_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_CODE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


class TensorFormatError(DataIOError):
    code = "tensor-format"


def write_tensor(stream: BinaryIO, array: np.ndarray) -> None:
    array = np.asarray(array)
    if array.dtype not in _DTYPE_CODES:
        raise TensorFormatError(f"unsupported dtype {array.dtype}")
    stream.write(TENSOR_MAGIC)
    stream.write(struct.pack("<I", array.ndim))
    for extent in array.shape:
        stream.write(struct.pack("<Q", extent))
    stream.write(struct.pack("<B", _DTYPE_CODES[array.dtype]))
    stream.write(np.ascontiguousarray(array, dtype=array.dtype.newbyteorder("<")).tobytes())


def _read_exact(stream: BinaryIO, n: int) -> bytes:
    data = stream.read(n)
    if len(data) != n:
        raise TensorFormatError(f"truncated tensor: wanted {n} bytes, got {len(data)}")
    return data


def read_tensor(stream: BinaryIO) -> np.ndarray:
    magic = stream.read(len(TENSOR_MAGIC))
    if magic != TENSOR_MAGIC:
        raise TensorFormatError(f"bad tensor magic {magic!r}")
    (rank,) = struct.unpack("<I", _read_exact(stream, 4))
    shape = struct.unpack(f"<{rank}Q", _read_exact(stream, 8 * rank)) if rank else ()
    (code,) = struct.unpack("<B", _read_exact(stream, 1))
    if code not in _CODE_DTYPES:
        raise TensorFormatError(f"unknown dtype code {code}")
    dtype = _CODE_DTYPES[code]
    count = int(np.prod(shape)) if shape else 1
    payload = _read_exact(stream, count * dtype.itemsize)
    return np.frombuffer(payload, dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))


def tensor_to_bytes(array: np.ndarray) -> bytes:
    buf = _io.BytesIO()
    write_tensor(buf, array)
    return buf.getvalue()


def tensor_from_bytes(data: bytes) -> np.ndarray:
    return read_tensor(_io.BytesIO(data))


def save_tensor(path, array: np.ndarray) -> None:
    atomic_write(path, tensor_to_bytes(array))


def load_tensor(path) -> np.ndarray:
    try:
        with open(path, "rb") as fh:
            return read_tensor(fh)
    except OSError as exc:
        raise DataIOError(f"cannot read tensor {path}: {exc}") from exc


def atomic_write(path, data: bytes | str) -> None:
    """Write via a temporary file in the same directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(data, str):
        data = data.encode("utf-8")
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# -- PGM ---------------------------------------------------------------
def _pgm_tokens(data: bytes, count: int) -> tuple[list[bytes], int]:
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < count:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace() and data[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise DataIOError("truncated PGM header")
        tokens.append(data[start:pos])
    return tokens, pos + 1  # single whitespace byte after maxval


def decode_pgm(data: bytes, name: str = "<bytes>") -> np.ndarray:
    """Decode binary PGM to a float64 ``[H, W]`` array scaled to [0, 1]."""
    try:
        tokens, offset = _pgm_tokens(data, 4)
        if tokens[0] != b"P5":
            raise DataIOError(f"{name}: not a binary PGM (magic {tokens[0]!r})")
        width, height, maxval = (int(t) for t in tokens[1:])
    except (ValueError, IndexError) as exc:
        raise DataIOError(f"{name}: malformed PGM header") from exc
    if width < 1 or height < 1 or not 0 < maxval < 65536:
        raise DataIOError(f"{name}: invalid PGM geometry {width}x{height} maxval {maxval}")
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    need = width * height * dtype.itemsize
    payload = data[offset:offset + need]
    if len(payload) != need:
        raise DataIOError(f"{name}: truncated PGM payload ({len(payload)} of {need} bytes)")
    pixels = np.frombuffer(payload, dtype=dtype).reshape(height, width)
    if pixels.max(initial=0) > maxval:
        raise DataIOError(f"{name}: pixel value exceeds maxval {maxval}")
    return pixels.astype(np.float64) / maxval


def encode_pgm(image: np.ndarray, bits: int = 8) -> bytes:
    """Encode a [0, 1] ``[H, W]`` array (values clipped) as binary PGM."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 3 and image.shape[0] == 1:
        image = image[0]
    if image.ndim != 2:
        raise DataIOError(f"PGM needs a single-channel 2-D image, got shape {image.shape}")
    if bits not in (8, 16):
        raise DataIOError(f"PGM bit depth must be 8 or 16, got {bits}")
    maxval = 255 if bits == 8 else 65535
    q = np.rint(np.clip(image, 0.0, 1.0) * maxval)
    dtype = np.dtype("u1") if bits == 8 else np.dtype(">u2")
    h, w = image.shape
    return f"P5\n{w} {h}\n{maxval}\n".encode("ascii") + q.astype(dtype).tobytes()


def read_pgm(path) -> np.ndarray:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise DataIOError(f"cannot read image {path}: {exc}") from exc
    return decode_pgm(data, str(path))


def write_pgm(path, image: np.ndarray, bits: int = 8) -> None:
    atomic_write(path, encode_pgm(image, bits))


def to_model_range(unit: np.ndarray) -> np.ndarray:
    """Map [0, 1] pixels to the [-1, 1] range models consume."""
    return unit * 2.0 - 1.0


def to_unit_range(model: np.ndarray) -> np.ndarray:
    return np.clip((np.asarray(model) + 1.0) / 2.0, 0.0, 1.0)
