"""Weight-store serializer, written against the engine's wire format.

This is a from-scratch encoder, deliberately not a call into the
engine's own save path: the engine's loader is the other half of the
round-trip test, and a shared serializer would make that test
meaningless. Layout, little-endian throughout:

    magic   4 bytes  "ZPWT"
    version u16      1
    count   u32
    per record: name_len u16, name utf-8, dtype u8 (0 fp32, 1 int8,
    2 bin), rank u8, dims rank*u32, scale f32, zero_point i8,
    payload_len u64, payload, crc32 u32 over name_len..payload

Binary payloads pack sign bits along the last logical axis, 64 per
little-endian word, padding bits clear.
"""

import os
import struct
import tempfile
import zlib
from dataclasses import dataclass

import numpy as np

MAGIC = b"ZPWT"
VERSION = 1
_TAGS = {"fp32": 0, "int8": 1, "bin": 2}


@dataclass(frozen=True)
class Record:
    name: str
    dtype: str
    shape: tuple
    scale: float
    zero_point: int
    payload: bytes


def fp32_rec(name, values, scale=1.0, zero_point=0) -> Record:
    arr = np.atleast_1d(np.ascontiguousarray(values, dtype=np.float32))
    return Record(name, "fp32", tuple(arr.shape), float(scale), int(zero_point),
                  arr.astype("<f4").tobytes())


def marker_rec(name, scale, zero_point) -> Record:
    # empty fp32 record; the header fields carry the grid
    return Record(name, "fp32", (), float(scale), int(zero_point), b"")


def int8_rec(name, codes, scale, zero_point=0) -> Record:
    codes = np.ascontiguousarray(codes)
    assert codes.dtype == np.int8
    return Record(name, "int8", tuple(codes.shape), float(scale), int(zero_point),
                  codes.tobytes())


def pack_signs(values) -> tuple:
    """((shape), words) with bit i of word j = (flat run bit 64j+i >= 0)."""
    arr = np.asarray(values)
    bits = np.ascontiguousarray((arr >= 0).reshape(-1, arr.shape[-1]))
    words = -(-arr.shape[-1] // 64)
    packed = np.packbits(bits, axis=1, bitorder="little")
    if packed.shape[1] < words * 8:
        packed = np.concatenate(
            [packed, np.zeros((packed.shape[0], words * 8 - packed.shape[1]), np.uint8)],
            axis=1,
        )
    return tuple(arr.shape), packed.view("<u8")


def bin_rec(name, values) -> Record:
    shape, words = pack_signs(values)
    return Record(name, "bin", shape, 1.0, 0, words.tobytes())


def encode_record(rec: Record) -> bytes:
    name = rec.name.encode("utf-8")
    body = struct.pack("<H", len(name)) + name
    body += struct.pack("<BB", _TAGS[rec.dtype], len(rec.shape))
    if rec.shape:
        body += struct.pack(f"<{len(rec.shape)}I", *rec.shape)
    body += struct.pack("<fb", rec.scale, rec.zero_point)
    body += struct.pack("<Q", len(rec.payload))
    body += rec.payload
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def write_store(records, path):
    blob = MAGIC + struct.pack("<HI", VERSION, len(records))
    blob += b"".join(encode_record(r) for r in records)
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".zpexport-")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(blob)
        os.replace(tmp, path)
    except BaseException:
        os.unlink(tmp)
        raise
