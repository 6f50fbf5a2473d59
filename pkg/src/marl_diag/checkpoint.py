"""Binary checkpoint files.

Layout: ``b"MARLCKPT"``, u32 version, then records of
(u32 name length, UTF-8 name, u8 dtype code, u32 rank, u64 extents, raw
little-endian values), then a trailing u64 record count.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CheckpointFormatError, CheckpointIntegrityError

MAGIC = b"MARLCKPT"
VERSION = 1
META_KEY = "__meta__"

_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1, np.dtype("<i8"): 2, np.dtype("u1"): 3}
_DTYPES = {v: k for k, v in _CODES.items()}


@dataclass
class Checkpoint:
    tensors: dict
    meta: dict = field(default_factory=dict)
    version: int = VERSION


def _encode(name: str, arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
    if dt not in _CODES:
        raise TypeError(f"{name}: unsupported dtype {arr.dtype}")
    raw = np.ascontiguousarray(arr, dtype=dt).tobytes()
    nb = name.encode("utf-8")
    head = struct.pack("<I", len(nb)) + nb + struct.pack("<BI", _CODES[dt], arr.ndim)
    head += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + raw


def save_checkpoint(path, tensors: dict, meta: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    records = dict(tensors)
    records[META_KEY] = np.frombuffer(json.dumps(meta or {}, sort_keys=True).encode("utf-8"), dtype=np.uint8)
    parts = [MAGIC, struct.pack("<I", VERSION)]
    parts += [_encode(k, v) for k, v in records.items()]
    parts.append(struct.pack("<Q", len(records)))
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(b"".join(parts))
    tmp.replace(path)
    return path


def load_checkpoint(path) -> Checkpoint:
    buf = Path(path).read_bytes()
    if len(buf) < 12 or buf[:8] != MAGIC:
        raise CheckpointFormatError(f"{path}: bad magic bytes")
    (version,) = struct.unpack_from("<I", buf, 8)
    if version != VERSION:
        raise CheckpointFormatError(f"{path}: unsupported version {version}")
    if len(buf) < 20:
        raise CheckpointIntegrityError(f"{path}: truncated")
    end = len(buf) - 8
    off = 12
    out = {}
    try:
        while off < end:
            (nlen,) = struct.unpack_from("<I", buf, off)
            off += 4
            name = buf[off:off + nlen].decode("utf-8")
            off += nlen
            code, rank = struct.unpack_from("<BI", buf, off)
            off += 5
            shape = struct.unpack_from(f"<{rank}Q", buf, off)
            off += 8 * rank
            dt = _DTYPES[code]
            nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
            if off + nbytes > end:
                raise CheckpointIntegrityError(f"{path}: record {name!r} runs past end of file")
            out[name] = np.frombuffer(buf, dtype=dt, count=nbytes // dt.itemsize, offset=off).reshape(shape).copy()
            off += nbytes
    except (struct.error, KeyError, UnicodeDecodeError) as exc:
        raise CheckpointIntegrityError(f"{path}: corrupt record stream ({exc})") from exc
    (count,) = struct.unpack_from("<Q", buf, end)
    if off != end or count != len(out):
        raise CheckpointIntegrityError(f"{path}: expected {count} records, read {len(out)}")
    meta = json.loads(out.pop(META_KEY).tobytes().decode("utf-8")) if META_KEY in out else {}
    return Checkpoint(out, meta, version)
