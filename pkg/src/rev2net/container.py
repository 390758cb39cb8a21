"""RV2N binary tensor container.

Layout (little-endian)::

    "RV2N" | u8 version | u32 rank | u32 extent * rank | u8 dtype tag |
    raw row-major payload | u32 metadata length | UTF-8 JSON metadata

Dtype tags: 0 = float32, 1 = float64. Clips, flow caches and parameter sets
all use this one format.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError

MAGIC = b"RV2N"
VERSION = 1
MAX_RANK = 8
DTYPE_TAGS = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


def encode(array: np.ndarray, metadata: dict | None = None) -> bytes:
    array = np.asarray(array)
    if array.dtype == np.float32:
        tag = 0
    elif array.dtype == np.float64:
        tag = 1
    else:
        raise FormatError("dtype", f"unsupported array dtype {array.dtype}")
    if not 1 <= array.ndim <= MAX_RANK:
        raise FormatError("rank", f"rank {array.ndim} outside 1..{MAX_RANK}")
    meta = json.dumps(metadata or {}, sort_keys=True).encode("utf-8")
    payload = np.ascontiguousarray(array, dtype=DTYPE_TAGS[tag]).tobytes()
    header = MAGIC + struct.pack("<BI", VERSION, array.ndim)
    header += struct.pack(f"<{array.ndim}I", *array.shape) + struct.pack("<B", tag)
    return header + payload + struct.pack("<I", len(meta)) + meta


def decode(buf: bytes, path=None) -> tuple[np.ndarray, dict]:
    """Parse a container; raises :class:`FormatError` naming the bad field."""
    def need(pos, n, field):
        if pos + n > len(buf):
            raise FormatError(field, f"file truncated ({len(buf)} bytes)", path)

    need(0, 4, "magic")
    if buf[:4] != MAGIC:
        raise FormatError("magic", f"expected {MAGIC!r}, found {bytes(buf[:4])!r}", path)
    need(4, 5, "version")
    version, rank = struct.unpack_from("<BI", buf, 4)
    if version != VERSION:
        raise FormatError("version", f"unsupported version {version}", path)
    if not 1 <= rank <= MAX_RANK:
        raise FormatError("rank", f"rank {rank} outside 1..{MAX_RANK}", path)
    pos = 9
    need(pos, 4 * rank + 1, "extents")
    shape = struct.unpack_from(f"<{rank}I", buf, pos)
    pos += 4 * rank
    if any(s == 0 for s in shape):
        raise FormatError("extents", f"zero extent in {shape}", path)
    (tag,) = struct.unpack_from("<B", buf, pos)
    pos += 1
    if tag not in DTYPE_TAGS:
        raise FormatError("dtype", f"unknown dtype tag {tag}", path)
    dtype = DTYPE_TAGS[tag]
    count = 1
    for s in shape:
        count *= s
    nbytes = count * dtype.itemsize
    if nbytes + 4 > len(buf) - pos:
        raise FormatError("extents", f"declared payload of {nbytes} bytes exceeds file size", path)
    array = np.frombuffer(buf, dtype=dtype, count=count, offset=pos).reshape(shape).astype(dtype.newbyteorder("="))
    pos += nbytes
    (meta_len,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    if pos + meta_len != len(buf):
        raise FormatError("payload", f"declared sizes account for {pos + meta_len} bytes, file has {len(buf)}", path)
    try:
        metadata = json.loads(bytes(buf[pos:]).decode("utf-8")) if meta_len else {}
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError("metadata", str(exc), path) from None
    if not isinstance(metadata, dict):
        raise FormatError("metadata", "metadata must be a JSON object", path)
    return array, metadata


def write(path, array: np.ndarray, metadata: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = encode(array, metadata)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    tmp.replace(path)
    return path


def read(path) -> tuple[np.ndarray, dict]:
    path = Path(path)
    return decode(path.read_bytes(), path)
