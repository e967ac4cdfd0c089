"""Single-file binary checkpoints.

Layout, all little-endian: magic "HZCK", format version (u32), roster
version (u32), config JSON (u32 length + bytes), then named tensors as
(u32 name length, name bytes, u32 ndims, ndims x u64 dims, float64 data in
C order), and a trailing CRC32 of everything before it.  Saving the result
of a load reproduces the file byte for byte: tensor order is preserved and
the config JSON is stored verbatim.
"""
from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

from .unified_space import ROSTER_VERSION

MAGIC = b"HZCK"
FORMAT_VERSION = 1


class ChecksumMismatch(Exception):
    """Corrupt or truncated checkpoint file."""


class RosterVersionMismatch(Exception):
    """Checkpoint was written against a different shared-space roster."""


def save_checkpoint(path: str | Path, config: dict,
                    tensors: list[tuple[str, np.ndarray]],
                    config_bytes: bytes | None = None):
    buf = bytearray()
    buf += MAGIC
    buf += struct.pack("<II", FORMAT_VERSION, ROSTER_VERSION)
    cj = config_bytes if config_bytes is not None else json.dumps(
        config, sort_keys=True, separators=(",", ":")).encode()
    buf += struct.pack("<I", len(cj))
    buf += cj
    for name, arr in tensors:
        nb = name.encode()
        a = np.ascontiguousarray(arr, dtype="<f8")
        buf += struct.pack("<I", len(nb))
        buf += nb
        buf += struct.pack("<I", a.ndim)
        buf += struct.pack(f"<{a.ndim}Q", *a.shape) if a.ndim else b""
        buf += a.tobytes()
    buf += struct.pack("<I", zlib.crc32(bytes(buf)) & 0xFFFFFFFF)
    Path(path).write_bytes(bytes(buf))


def load_checkpoint(path: str | Path, check_roster: bool = True
                    ) -> tuple[dict, dict[str, np.ndarray], bytes]:
    """Returns (config, ordered name->tensor dict, raw config JSON bytes)."""
    raw = Path(path).read_bytes()
    if len(raw) < 16 or raw[:4] != MAGIC:
        raise ChecksumMismatch(f"{path}: not a checkpoint file")
    stored_crc = struct.unpack("<I", raw[-4:])[0]
    if zlib.crc32(raw[:-4]) & 0xFFFFFFFF != stored_crc:
        raise ChecksumMismatch(f"{path}: CRC32 mismatch")
    fmt, roster = struct.unpack("<II", raw[4:12])
    if fmt != FORMAT_VERSION:
        raise ChecksumMismatch(f"{path}: unsupported format version {fmt}")
    if check_roster and roster != ROSTER_VERSION:
        raise RosterVersionMismatch(
            f"{path}: roster version {roster}, current {ROSTER_VERSION}")
    off = 12
    (clen,) = struct.unpack_from("<I", raw, off)
    off += 4
    config_bytes = raw[off:off + clen]
    off += clen
    try:
        config = json.loads(config_bytes.decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ChecksumMismatch(f"{path}: bad config block: {e}") from e
    tensors: dict[str, np.ndarray] = {}
    end = len(raw) - 4
    while off < end:
        (nlen,) = struct.unpack_from("<I", raw, off)
        off += 4
        name = raw[off:off + nlen].decode()
        off += nlen
        (ndim,) = struct.unpack_from("<I", raw, off)
        off += 4
        dims = struct.unpack_from(f"<{ndim}Q", raw, off) if ndim else ()
        off += 8 * ndim
        count = int(np.prod(dims)) if ndim else 1
        a = np.frombuffer(raw, dtype="<f8", count=count, offset=off)
        off += 8 * count
        tensors[name] = a.reshape(dims).copy()
    if off != end:
        raise ChecksumMismatch(f"{path}: trailing garbage before CRC")
    return config, tensors, bytes(config_bytes)
