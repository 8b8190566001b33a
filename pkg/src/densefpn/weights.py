"""Binary weight files.

Layout (all integers little-endian)::

    magic    8 bytes  b"DFPNWTS\\0"
    version  u32
    count    u32
    count x  { name_len u16, name utf-8, ndim u8, dims u32[ndim], data f32[prod(dims)] }
    crc32    u32      over every preceding byte
"""

from __future__ import annotations

import struct
import zlib
from pathlib import Path

import numpy as np

from .params import ParamSet

MAGIC = b"DFPNWTS\0"
VERSION = 1


class WeightFileError(ValueError):
    pass


class ChecksumError(WeightFileError):
    pass


class VersionError(WeightFileError):
    pass


def encode_weights(params: ParamSet) -> bytes:
    chunks = [MAGIC, struct.pack("<II", VERSION, len(params))]
    for name, arr in params.arrays():
        raw_name = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(raw_name)) + raw_name)
        chunks.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    body = b"".join(chunks)
    return body + struct.pack("<I", zlib.crc32(body))


def save_weights(params: ParamSet, path) -> None:
    Path(path).write_bytes(encode_weights(params))


def decode_weights(raw: bytes) -> dict[str, np.ndarray]:
    if raw[:8] != MAGIC:
        raise WeightFileError("not a weight file (bad magic)")
    if len(raw) < 20:
        raise ChecksumError("weight file truncated")
    body, (crc,) = raw[:-4], struct.unpack("<I", raw[-4:])
    if zlib.crc32(body) != crc:
        raise ChecksumError("weight file checksum mismatch (corrupt or truncated)")
    version, count = struct.unpack_from("<II", body, 8)
    if version != VERSION:
        raise VersionError(f"weight file version {version}, this build reads version {VERSION}")
    pos = 16
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", body, pos)
        pos += 2
        name = body[pos:pos + nlen].decode("utf-8")
        pos += nlen
        (ndim,) = struct.unpack_from("<B", body, pos)
        pos += 1
        dims = struct.unpack_from(f"<{ndim}I", body, pos)
        pos += 4 * ndim
        n = int(np.prod(dims)) if ndim else 1
        out[name] = np.frombuffer(body, dtype="<f4", count=n, offset=pos).reshape(dims).copy()
        pos += 4 * n
    if pos != len(body):
        raise WeightFileError("trailing bytes after parameter table")
    return out


def load_weights(path, into: ParamSet) -> ParamSet:
    """Fill ``into`` from a weight file; names and shapes must match exactly."""
    table = decode_weights(Path(path).read_bytes())
    unknown = sorted(set(table) - set(into))
    if unknown:
        raise WeightFileError(f"unknown parameter name(s) in weight file: {', '.join(unknown)}")
    missing = sorted(set(into) - set(table))
    if missing:
        raise WeightFileError(f"weight file lacks parameter(s): {', '.join(missing)}")
    for name, arr in table.items():
        into[name].assign(arr)
    return into
