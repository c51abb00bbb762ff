"""Binary model container shared by the neural and boosted-tree families.

Layout (all integers little-endian)::

    offset  size  field
    0       4     magic b"SEPW"
    4       2     format version (uint16)
    6       1     family tag (uint8): 1 mlp, 2 lstm, 3 lstm_fcn, 4 gbdt
    7       1     prediction horizon in hours (uint8)
    8       4     metadata length N (uint32)
    12      N     metadata, UTF-8 JSON (sorted keys, compact separators)
    12+N    P     payload
    12+N+P  4     CRC-32C (Castagnoli) of every preceding byte

For neural families the payload is the concatenation of float32 arrays in the
order listed under ``metadata["blocks"]``; the boosted-tree payload layout is
documented in ``pulsegate.boosting``.
"""

from __future__ import annotations

import json
import struct

from .errors import BadMagic, ChecksumMismatch, FormatError, VersionMismatch

MAGIC = b"SEPW"
VERSION = 1
FAMILY_TAGS = {"mlp": 1, "lstm": 2, "lstm_fcn": 3, "gbdt": 4}
TAG_FAMILIES = {v: k for k, v in FAMILY_TAGS.items()}

_PREFIX = struct.Struct("<4sHBBI")
HEADER_FIXED_BYTES = _PREFIX.size
TRAILER_BYTES = 4


def _make_table():
    poly = 0x82F63B78  # reflected Castagnoli polynomial
    table = []
    for n in range(256):
        c = n
        for _ in range(8):
            c = (c >> 1) ^ poly if c & 1 else c >> 1
        table.append(c)
    return tuple(table)


_CRC_TABLE = _make_table()


def crc32c(data: bytes, crc: int = 0) -> int:
    table = _CRC_TABLE
    crc ^= 0xFFFFFFFF
    for byte in data:
        crc = table[(crc ^ byte) & 0xFF] ^ (crc >> 8)
    return crc ^ 0xFFFFFFFF


def encode_meta(meta: dict) -> bytes:
    return json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")


def pack(family: str, horizon: int, meta: dict, payload: bytes) -> bytes:
    meta_bytes = encode_meta(meta)
    body = _PREFIX.pack(MAGIC, VERSION, FAMILY_TAGS[family], horizon, len(meta_bytes)) + meta_bytes + payload
    return body + struct.pack("<I", crc32c(body))


def unpack(data: bytes):
    """Decode a container into ``(family, horizon, meta, payload)``."""
    data = bytes(data)
    if len(data) >= 4 and data[:4] != MAGIC:
        raise BadMagic(f"bad magic {data[:4]!r}")
    if len(data) < HEADER_FIXED_BYTES + TRAILER_BYTES:
        raise ChecksumMismatch(f"container truncated to {len(data)} bytes")
    (stored,) = struct.unpack("<I", data[-4:])
    if crc32c(data[:-4]) != stored:
        raise ChecksumMismatch("CRC-32C does not match container contents")
    _, version, tag, horizon, meta_len = _PREFIX.unpack_from(data)
    if version != VERSION:
        raise VersionMismatch(f"format version {version}, expected {VERSION}")
    if tag not in TAG_FAMILIES:
        raise FormatError(f"unknown family tag {tag}")
    meta_end = HEADER_FIXED_BYTES + meta_len
    if meta_end > len(data) - TRAILER_BYTES:
        raise FormatError("metadata length runs past the payload")
    meta = json.loads(data[HEADER_FIXED_BYTES:meta_end].decode("utf-8"))
    payload = data[meta_end:-4]
    return TAG_FAMILIES[tag], horizon, meta, payload
