"""Grayscale PFM (portable float map) reader and writer.

Header ``Pf\\n{W} {H}\\n{scale}\\n`` followed by 32-bit floats, rows stored
bottom to top. A negative scale means little-endian payload.
"""
import os
import re
from typing import Union

import numpy as np

from .lightfield import DisparityMap

PathLike = Union[str, os.PathLike]


class PFMError(ValueError):
    pass


def _read_token_line(buf: bytes, pos: int):
    end = buf.find(b"\n", pos)
    if end < 0:
        raise PFMError("not a PFM: truncated header")
    return buf[pos:end], end + 1


def decode_pfm(buf: bytes) -> np.ndarray:
    magic, pos = _read_token_line(buf, 0)
    magic = magic.strip()
    if magic == b"PF":
        raise PFMError("not a PFM grayscale map: got color 'PF' header, expected 'Pf'")
    if magic != b"Pf":
        raise PFMError(f"not a PFM: bad magic {magic[:8]!r}")
    dims, pos = _read_token_line(buf, pos)
    m = re.fullmatch(rb"\s*(\d+)\s+(\d+)\s*", dims)
    if m is None:
        raise PFMError(f"not a PFM: bad dimension line {dims!r}")
    width, height = int(m.group(1)), int(m.group(2))
    scale_line, pos = _read_token_line(buf, pos)
    try:
        scale = float(scale_line)
    except ValueError as exc:
        raise PFMError(f"not a PFM: bad scale line {scale_line!r}") from exc
    dtype = np.dtype("<f4") if scale < 0 else np.dtype(">f4")
    expected = width * height * 4
    actual = len(buf) - pos
    if actual < expected:
        raise PFMError(f"truncated PFM payload: expected {expected} bytes, got {actual}")
    data = np.frombuffer(buf, dtype=dtype, count=width * height, offset=pos)
    return data.reshape(height, width)[::-1].astype(np.float32)


def encode_pfm(values: np.ndarray) -> bytes:
    values = np.asarray(values)
    if values.ndim != 2:
        raise PFMError(f"PFM maps are 2-D, got shape {values.shape}")
    h, w = values.shape
    header = f"Pf\n{w} {h}\n-1.0\n".encode("ascii")
    payload = np.ascontiguousarray(values[::-1], dtype="<f4").tobytes()
    return header + payload


def read_pfm(path: PathLike) -> DisparityMap:
    with open(path, "rb") as fh:
        return DisparityMap(decode_pfm(fh.read()))


def write_pfm(path: PathLike, dmap) -> None:
    values = dmap.values if isinstance(dmap, DisparityMap) else dmap
    with open(path, "wb") as fh:
        fh.write(encode_pfm(values))
