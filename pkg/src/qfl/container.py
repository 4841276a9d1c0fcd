"""Binary array container shared by checkpoints and the tile-feature file.

Layout (all integers little-endian)::

    b"QFL1"
    u64 header length, header bytes (canonical JSON, UTF-8)
    records until EOF:
        u32 name length, name (UTF-8)
        u8 dtype tag, u8 rank, rank x u64 extents
        raw array bytes, little-endian, row-major
"""

from __future__ import annotations

import io
import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"QFL1"

_TAGS = {
    np.dtype("<f4"): 1,
    np.dtype("<f8"): 2,
    np.dtype("<i8"): 3,
    np.dtype("|u1"): 4,
    np.dtype("|b1"): 5,
}
_DTYPES = {tag: dt for dt, tag in _TAGS.items()}


class ContainerError(ValueError):
    pass


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def write(path, arrays: dict[str, np.ndarray], header: dict | None = None) -> None:
    buf = io.BytesIO()
    buf.write(MAGIC)
    head = canonical_json(header or {}).encode("utf-8")
    buf.write(struct.pack("<Q", len(head)))
    buf.write(head)
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        if not arr.flags.c_contiguous:
            arr = arr.copy(order="C")  # ascontiguousarray would promote 0-d to 1-d
        if arr.dtype.kind in "fi":
            arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        key = arr.dtype
        if key not in _TAGS:
            raise ContainerError(f"unsupported dtype {arr.dtype} for {name!r}")
        raw_name = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw_name)))
        buf.write(raw_name)
        buf.write(struct.pack("<BB", _TAGS[key], arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(arr.tobytes())
    Path(path).write_bytes(buf.getvalue())


def read(path) -> tuple[dict, dict[str, np.ndarray]]:
    blob = Path(path).read_bytes()
    if blob[:4] != MAGIC:
        raise ContainerError(f"{path}: bad magic {blob[:4]!r}")
    pos = 4
    (hlen,) = struct.unpack_from("<Q", blob, pos)
    pos += 8
    header = json.loads(blob[pos:pos + hlen].decode("utf-8"))
    pos += hlen
    arrays: dict[str, np.ndarray] = {}
    while pos < len(blob):
        (nlen,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        name = blob[pos:pos + nlen].decode("utf-8")
        pos += nlen
        tag, rank = struct.unpack_from("<BB", blob, pos)
        pos += 2
        shape = struct.unpack_from(f"<{rank}Q", blob, pos)
        pos += 8 * rank
        if tag not in _DTYPES:
            raise ContainerError(f"{path}: unknown dtype tag {tag} for {name!r}")
        dt = _DTYPES[tag]
        count = int(np.prod(shape, dtype=np.int64))
        nbytes = count * dt.itemsize
        if pos + nbytes > len(blob):
            raise ContainerError(f"{path}: truncated record {name!r}")
        arr = np.frombuffer(blob, dtype=dt, count=count, offset=pos).reshape(shape).copy()
        arrays[name] = arr.astype(dt.newbyteorder("=")) if dt.kind in "fi" else arr
        pos += nbytes
    return header, arrays
