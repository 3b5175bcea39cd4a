"""Binary container for HeadMaps.

Layout (all integers little-endian)::

    magic      4 bytes  b"KPHM"
    version    uint16   1
    reserved   uint16   0
    height     uint32
    width      uint32
    stride     uint32
    n_groups   uint32
    n_groups x (name_len uint16, name ascii bytes, channels uint32)
    payload    per group in header order, float64 little-endian,
               row-major (height, width, channels)

The five groups are main_center, kp_offsets, dim_residual, orient, conf3d.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .codec import HeadMaps
from .errors import HeadMapsFormatError

MAGIC = b"KPHM"
VERSION = 1
GROUPS = ("main_center", "kp_offsets", "dim_residual", "orient", "conf3d")
_HEADER = struct.Struct("<4sHHIIII")


def dumps(maps: HeadMaps) -> bytes:
    H, W = maps.shape
    parts = [_HEADER.pack(MAGIC, VERSION, 0, H, W, maps.stride, len(GROUPS))]
    for name in GROUPS:
        raw = name.encode("ascii")
        parts.append(struct.pack("<H", len(raw)) + raw + struct.pack("<I", getattr(maps, name).shape[2]))
    for name in GROUPS:
        parts.append(np.ascontiguousarray(getattr(maps, name), dtype="<f8").tobytes())
    return b"".join(parts)


def loads(data: bytes) -> HeadMaps:
    if len(data) < _HEADER.size:
        raise HeadMapsFormatError("truncated header")
    magic, version, _, H, W, stride, n_groups = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise HeadMapsFormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise HeadMapsFormatError(f"unsupported version {version}")
    pos = _HEADER.size
    groups = []
    try:
        for _ in range(n_groups):
            (n,) = struct.unpack_from("<H", data, pos)
            name = data[pos + 2 : pos + 2 + n].decode("ascii")
            (ch,) = struct.unpack_from("<I", data, pos + 2 + n)
            pos += 2 + n + 4
            groups.append((name, ch))
    except (struct.error, UnicodeDecodeError) as exc:
        raise HeadMapsFormatError(f"corrupt group table: {exc}") from None
    arrays = {}
    for name, ch in groups:
        nbytes = H * W * ch * 8
        if pos + nbytes > len(data):
            raise HeadMapsFormatError(f"payload for {name!r} is truncated")
        arrays[name] = np.frombuffer(data, dtype="<f8", count=H * W * ch, offset=pos).reshape(H, W, ch).astype(np.float64)
        pos += nbytes
    if pos != len(data):
        raise HeadMapsFormatError(f"{len(data) - pos} trailing bytes")
    missing = [g for g in GROUPS if g not in arrays]
    if missing:
        raise HeadMapsFormatError(f"missing channel groups {missing}")
    return HeadMaps(**{g: arrays[g] for g in GROUPS}, stride=stride)


def save(maps: HeadMaps, path) -> None:
    Path(path).write_bytes(dumps(maps))


def load(path) -> HeadMaps:
    return loads(Path(path).read_bytes())
