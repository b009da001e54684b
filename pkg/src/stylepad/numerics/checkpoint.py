"""Binary tensor container shared by checkpoints, datasets and style stores.

Layout (all integers little-endian)::

    b"DI2S"                 magic
    u32  format version     (currently 1)
    u32  entry count
    per entry:
      u32  name length, then UTF-8 name bytes
      u8   dtype tag        (0 = float64, 1 = int64, 2 = uint8)
      u32  rank
      u64 * rank extents
      raw little-endian values, row-major

An optional JSON metadata blob travels as a uint8 entry named ``__meta__``.
"""
from __future__ import annotations

import json
import os
import struct
from collections import OrderedDict
from pathlib import Path

import numpy as np

MAGIC = b"DI2S"
FORMAT_VERSION = 1
META_KEY = "__meta__"

_TAGS = {np.dtype("<f8"): 0, np.dtype("<i8"): 1, np.dtype("u1"): 2}
_DTYPES = {v: k for k, v in _TAGS.items()}


class ContainerFormatError(ValueError):
    pass


def _normalize(arr) -> np.ndarray:
    arr = np.asarray(arr)
    if arr.dtype.kind == "f":
        return arr.astype("<f8", copy=False)
    if arr.dtype.kind in "iub" and arr.dtype != np.uint8:
        return arr.astype("<i8", copy=False)
    if arr.dtype == np.uint8:
        return arr
    raise TypeError(f"unsupported dtype {arr.dtype}")


def save_tensors(path: str | os.PathLike, tensors: dict, meta: dict | None = None) -> None:
    entries = OrderedDict((k, _normalize(v)) for k, v in tensors.items())
    if meta is not None:
        blob = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
        entries[META_KEY] = np.frombuffer(blob, dtype=np.uint8)
    chunks = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(entries))]
    for name, arr in entries.items():
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<BI", _TAGS[arr.dtype], arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(np.ascontiguousarray(arr).tobytes())
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(b"".join(chunks))
    os.replace(tmp, path)


def load_tensors(path: str | os.PathLike) -> tuple[OrderedDict, dict | None]:
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise ContainerFormatError(f"{path}: bad magic {buf[:4]!r}")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != FORMAT_VERSION:
        raise ContainerFormatError(f"{path}: unsupported format version {version}")
    off = 12
    out: OrderedDict = OrderedDict()
    meta = None
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", buf, off)
        off += 4
        name = buf[off : off + nlen].decode("utf-8")
        off += nlen
        tag, rank = struct.unpack_from("<BI", buf, off)
        off += 5
        if tag not in _DTYPES:
            raise ContainerFormatError(f"{path}: unknown dtype tag {tag} for '{name}'")
        shape = struct.unpack_from(f"<{rank}Q", buf, off)
        off += 8 * rank
        dtype = _DTYPES[tag]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        arr = np.frombuffer(buf, dtype=dtype, count=nbytes // dtype.itemsize, offset=off).reshape(shape).copy()
        off += nbytes
        if name == META_KEY:
            meta = json.loads(arr.tobytes().decode("utf-8"))
        else:
            out[name] = arr
    if off != len(buf):
        raise ContainerFormatError(f"{path}: {len(buf) - off} trailing bytes")
    return out, meta
