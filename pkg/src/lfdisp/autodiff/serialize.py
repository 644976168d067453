"""Flat binary container for named arrays.

Layout (all integers little-endian)::

    b"LFDT"  u32 version
    repeated: u32 name_len, name (UTF-8), u8 dtype tag, u32 rank,
              rank x u64 dims, raw little-endian values
"""
import struct
from typing import BinaryIO, Dict, Mapping, Union
import os

import numpy as np

MAGIC = b"LFDT"
VERSION = 1

_DTYPE_TAGS = {
    np.dtype("<f4"): 1,
    np.dtype("<f8"): 2,
    np.dtype("<i8"): 3,
    np.dtype("<u8"): 4,
    np.dtype("u1"): 5,
}
_TAG_DTYPES = {v: k for k, v in _DTYPE_TAGS.items()}


class ContainerError(ValueError):
    pass


def dumps(arrays: Mapping[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<I", VERSION)]
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder not in ("|",) else arr.dtype
        if dt not in _DTYPE_TAGS:
            raise ContainerError(f"unsupported dtype {arr.dtype} for {name!r}")
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<I", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<BI", _DTYPE_TAGS[dt], arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=dt).tobytes())
    return b"".join(parts)


def loads(buf: bytes) -> Dict[str, np.ndarray]:
    if buf[:4] != MAGIC:
        raise ContainerError("not an LFDT container (bad magic)")
    if len(buf) < 8:
        raise ContainerError("truncated LFDT header")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != VERSION:
        raise ContainerError(f"unsupported LFDT version {version}")
    pos = 8
    out: Dict[str, np.ndarray] = {}
    try:
        while pos < len(buf):
            (nlen,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            name = buf[pos:pos + nlen].decode("utf-8")
            pos += nlen
            tag, rank = struct.unpack_from("<BI", buf, pos)
            pos += 5
            dims = struct.unpack_from(f"<{rank}Q", buf, pos)
            pos += 8 * rank
            dt = _TAG_DTYPES.get(tag)
            if dt is None:
                raise ContainerError(f"unknown dtype tag {tag} for {name!r}")
            nbytes = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
            if pos + nbytes > len(buf):
                raise ContainerError(
                    f"truncated record {name!r}: expected {nbytes} bytes, found {len(buf) - pos}")
            out[name] = np.frombuffer(buf, dtype=dt, count=nbytes // dt.itemsize,
                                      offset=pos).reshape(dims).copy()
            pos += nbytes
    except struct.error as exc:
        raise ContainerError(f"truncated LFDT container at byte {pos}") from exc
    return out


def save(path: Union[str, os.PathLike], arrays: Mapping[str, np.ndarray]) -> None:
    with open(path, "wb") as fh:
        fh.write(dumps(arrays))


def load(path: Union[str, os.PathLike]) -> Dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        return loads(fh.read())
