"""Self-describing binary containers for trained models and window datasets.

Layout (all integers little-endian)::

    magic        8 bytes
    version      uint16
    meta_len     uint32, then meta_len bytes of UTF-8 ``key=value`` lines
                 (sorted by key, LF-terminated)
    n_blobs      uint32
    per blob:
      name_len   uint16, then the UTF-8 name
      dtype      uint8   (1 = float32, 2 = float64, 3 = int64)
      rank       uint8, then rank x uint32 extents
      raw little-endian values in C order
"""
from __future__ import annotations

import struct
from pathlib import Path
from typing import Dict, Tuple

import numpy as np

MODEL_MAGIC = b"WNILMMDL"
DATASET_MAGIC = b"WNILMDS\x00"
FORMAT_VERSION = 1

_DTYPE_CODES = {np.dtype("<f4"): 1, np.dtype("<f8"): 2, np.dtype("<i8"): 3}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


class FormatError(ValueError):
    pass


def encode_meta(meta: Dict[str, str]) -> bytes:
    lines = []
    for key in sorted(meta):
        value = str(meta[key])
        if "\n" in key or "=" in key or "\n" in value:
            raise ValueError(f"meta entry {key!r} cannot contain '=' in the key or newlines")
        lines.append(f"{key}={value}\n")
    return "".join(lines).encode("utf-8")


def decode_meta(raw: bytes) -> Dict[str, str]:
    meta = {}
    for line in raw.decode("utf-8").splitlines():
        if not line:
            continue
        key, _, value = line.partition("=")
        meta[key] = value
    return meta


def to_bytes(magic: bytes, meta: Dict[str, str], arrays: Dict[str, np.ndarray]) -> bytes:
    if len(magic) != 8:
        raise ValueError("magic must be 8 bytes")
    meta_raw = encode_meta(meta)
    parts = [magic, struct.pack("<HI", FORMAT_VERSION, len(meta_raw)), meta_raw,
             struct.pack("<I", len(arrays))]
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        dt = arr.dtype.newbyteorder("<")
        if dt not in _DTYPE_CODES:
            raise TypeError(f"blob {name!r}: unsupported dtype {arr.dtype}")
        name_raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(name_raw)))
        parts.append(name_raw)
        parts.append(struct.pack("<BB", _DTYPE_CODES[dt], arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=dt).tobytes())
    return b"".join(parts)


def from_bytes(raw: bytes, magic: bytes) -> Tuple[Dict[str, str], Dict[str, np.ndarray]]:
    view = memoryview(raw)
    if bytes(view[:8]) != magic:
        raise FormatError(f"bad magic {bytes(view[:8])!r}, expected {magic!r}")
    version, meta_len = struct.unpack_from("<HI", view, 8)
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported format version {version}")
    pos = 14
    meta = decode_meta(bytes(view[pos:pos + meta_len]))
    pos += meta_len
    (n_blobs,) = struct.unpack_from("<I", view, pos)
    pos += 4
    arrays = {}
    for _ in range(n_blobs):
        (name_len,) = struct.unpack_from("<H", view, pos)
        pos += 2
        name = bytes(view[pos:pos + name_len]).decode("utf-8")
        pos += name_len
        code, rank = struct.unpack_from("<BB", view, pos)
        pos += 2
        shape = struct.unpack_from(f"<{rank}I", view, pos)
        pos += 4 * rank
        if code not in _CODE_DTYPES:
            raise FormatError(f"blob {name!r}: unknown dtype code {code}")
        dt = _CODE_DTYPES[code]
        n = int(np.prod(shape)) * dt.itemsize
        if pos + n > len(view):
            raise FormatError(f"blob {name!r} truncated")
        arrays[name] = np.frombuffer(view[pos:pos + n], dtype=dt).reshape(shape).copy()
        pos += n
    if pos != len(view):
        raise FormatError(f"{len(view) - pos} trailing bytes after last blob")
    return meta, arrays


def write_container(path, magic: bytes, meta: Dict[str, str], arrays: Dict[str, np.ndarray]):
    Path(path).write_bytes(to_bytes(magic, meta, arrays))


def read_container(path, magic: bytes):
    return from_bytes(Path(path).read_bytes(), magic)
