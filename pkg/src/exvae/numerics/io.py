"""Binary container for named arrays (checkpoints, optimizer state, cache dumps).

Layout, all integers little-endian::

    b"EXVB"            magic
    u8                 format version (1)
    u32                number of blocks
    per block:
      u16              name length, then UTF-8 name
      u8               dtype code (1 float32, 2 float64, 3 int64, 4 uint8)
      u8               ndim, then ndim x u64 dims
      payload          row-major, little-endian IEEE-754 / integers

Blocks are written in the mapping's iteration order, so equal inputs give
byte-identical files.
"""

from __future__ import annotations

import os
import struct
from typing import Mapping

import numpy as np

from ..errors import FormatError, LengthError

MAGIC = b"EXVB"
VERSION = 1
_CODES = {np.dtype("<f4"): 1, np.dtype("<f8"): 2, np.dtype("<i8"): 3, np.dtype("u1"): 4}
_DTYPES = {v: k for k, v in _CODES.items()}


def dumps(blocks: Mapping[str, np.ndarray]) -> bytes:
    out = [MAGIC, struct.pack("<BI", VERSION, len(blocks))]
    for name, arr in blocks.items():
        arr = np.asarray(arr)
        dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder not in "|" else arr.dtype
        if dt not in _CODES:
            raise FormatError(f"block {name!r}: unsupported dtype {arr.dtype}")
        raw = name.encode("utf-8")
        out.append(struct.pack("<H", len(raw)) + raw)
        out.append(struct.pack("<BB", _CODES[dt], arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype=dt).tobytes())
    return b"".join(out)


def loads(buf: bytes) -> dict[str, np.ndarray]:
    if buf[:4] != MAGIC:
        raise FormatError("not an array container (bad magic)")
    if len(buf) < 9:
        raise LengthError("truncated header")
    version, count = struct.unpack_from("<BI", buf, 4)
    if version != VERSION:
        raise FormatError(f"unsupported container version {version}")
    pos, blocks = 9, {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", buf, pos)
            pos += 2
            name = buf[pos:pos + nlen].decode("utf-8")
            pos += nlen
            code, ndim = struct.unpack_from("<BB", buf, pos)
            pos += 2
            shape = struct.unpack_from(f"<{ndim}Q", buf, pos)
            pos += 8 * ndim
            dt = _DTYPES.get(code)
            if dt is None:
                raise FormatError(f"block {name!r}: unknown dtype code {code}")
            nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
            if pos + nbytes > len(buf):
                raise LengthError(f"block {name!r}: payload truncated")
            blocks[name] = np.frombuffer(buf, dtype=dt, count=nbytes // dt.itemsize, offset=pos).reshape(shape).copy()
            pos += nbytes
    except struct.error as exc:
        raise LengthError(f"truncated container: {exc}") from None
    if pos != len(buf):
        raise LengthError(f"{len(buf) - pos} trailing bytes after last block")
    return blocks


def save(path: str | os.PathLike, blocks: Mapping[str, np.ndarray]) -> None:
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(dumps(blocks))
    os.replace(tmp, path)


def load(path: str | os.PathLike) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        return loads(fh.read())
