"""Weight container and its binary wire format.

File layout, everything little-endian:

    magic   4 bytes  b"ZPWT"
    version u16      currently 1
    count   u32      number of records
    then per record:
    name_len u16, name (UTF-8), dtype u8 (0 fp32, 1 int8, 2 bin),
    rank u8, dims rank*u32, scale f32, zero_point i8,
    payload_len u64, payload, crc u32

The CRC-32 covers the record from the name_len field through the payload,
so a flipped bit anywhere in a record is caught on load. fp32 payloads are
raw f32; int8 payloads raw bytes; bin payloads are sign bits packed along
the last logical axis, 64 per little-endian word, zero padded (the same
convention the compute kernels consume, so loads need no repacking).

Record naming carries the role. For a layer "enc3":

    enc3.w    kernel (header scale/zp quantize int8 kernels)
    enc3.b    fp32 bias; header = preactivation requant scale/zp
    enc3.g    fp32 per-channel gain for binary kernels
    enc3.p    int8 1x1 residual projection kernel
    enc3.act  empty fp32 record; header = activation output scale/zp
    enc3.in   empty fp32 record; header = input quant scale/zp, present
              only when the producing layer runs in float
"""

import io
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from .._io import atomic_write_bytes
from ..errors import (
    BadMagicError,
    ChecksumError,
    FormatError,
    InvalidInputError,
    TruncatedFileError,
    UnsupportedVersionError,
)
from ..qtensor import BitTensor, QTensor, words_per_run

MAGIC = b"ZPWT"
VERSION = 1

_DTYPE_TAGS = {"fp32": 0, "int8": 1, "bin": 2}
_TAG_DTYPES = {v: k for k, v in _DTYPE_TAGS.items()}


@dataclass(frozen=True)
class WeightRecord:
    name: str
    dtype: str  # fp32 | int8 | bin
    shape: tuple
    scale: float
    zero_point: int
    data: np.ndarray  # f32 / i8 values, or uint64 words for bin

    def __post_init__(self):
        if self.dtype not in _DTYPE_TAGS:
            raise InvalidInputError(f"unknown dtype {self.dtype!r}")
        # the header stores scale as f32; round now so a record holds
        # exactly what a round trip through the file would hold
        object.__setattr__(self, "scale", float(np.float32(self.scale)))
        if self.dtype == "bin":
            if self.data.dtype != np.uint64:
                raise InvalidInputError("bin records store packed uint64 words")
        elif self.dtype == "int8" and self.data.dtype != np.int8:
            raise InvalidInputError("int8 record data must be int8")
        elif self.dtype == "fp32" and self.data.dtype != np.float32:
            raise InvalidInputError("fp32 record data must be float32")

    def as_qtensor(self) -> QTensor:
        if self.dtype != "int8":
            raise InvalidInputError(f"{self.name} is {self.dtype}, not int8")
        return QTensor(self.data.reshape(self.shape), self.scale, self.zero_point)

    def as_bits(self) -> BitTensor:
        if self.dtype != "bin":
            raise InvalidInputError(f"{self.name} is {self.dtype}, not bin")
        runs = int(np.prod(self.shape[:-1])) if len(self.shape) > 1 else 1
        return BitTensor(tuple(self.shape), self.data.reshape(runs, words_per_run(self.shape[-1])))

    def as_array(self) -> np.ndarray:
        if self.dtype != "fp32":
            raise InvalidInputError(f"{self.name} is {self.dtype}, not fp32")
        return self.data.reshape(self.shape) if self.shape else self.data


def fp32_record(name, values, scale=1.0, zero_point=0) -> WeightRecord:
    arr = np.atleast_1d(np.ascontiguousarray(values, dtype=np.float32))
    return WeightRecord(name, "fp32", tuple(arr.shape), float(scale), int(zero_point), arr.ravel())


def marker_record(name, scale, zero_point) -> WeightRecord:
    """Empty fp32 record whose header fields are the payload."""
    return WeightRecord(
        name, "fp32", (), float(scale), int(zero_point), np.empty(0, dtype=np.float32)
    )


def int8_record(name, t: QTensor) -> WeightRecord:
    return WeightRecord(
        name, "int8", tuple(t.shape), t.scale, t.zero_point, np.ascontiguousarray(t.codes).ravel()
    )


def bin_record(name, t: BitTensor) -> WeightRecord:
    return WeightRecord(name, "bin", tuple(t.shape), 1.0, 0, np.ascontiguousarray(t.words).ravel())


@dataclass
class WeightStore:
    """Ordered name -> record mapping."""

    records: dict = field(default_factory=dict)

    def add(self, rec: WeightRecord):
        if rec.name in self.records:
            raise InvalidInputError(f"duplicate record {rec.name!r}")
        self.records[rec.name] = rec

    def __contains__(self, name):
        return name in self.records

    def __getitem__(self, name) -> WeightRecord:
        if name not in self.records:
            raise KeyError(f"no record named {name!r}")
        return self.records[name]

    def __len__(self):
        return len(self.records)

    def names(self):
        return list(self.records)


def _payload_bytes(rec: WeightRecord) -> bytes:
    if rec.dtype == "bin":
        return rec.data.astype("<u8").tobytes()
    if rec.dtype == "int8":
        return rec.data.tobytes()
    return rec.data.astype("<f4").tobytes()


def _expected_payload_len(dtype: str, shape: tuple) -> int:
    if not shape:
        return 0 if dtype == "fp32" else None
    n = int(np.prod(shape))
    if dtype == "fp32":
        return 4 * n
    if dtype == "int8":
        return n
    runs = int(np.prod(shape[:-1])) if len(shape) > 1 else 1
    return runs * words_per_run(shape[-1]) * 8


def _encode_record(rec: WeightRecord) -> bytes:
    name = rec.name.encode("utf-8")
    if not 0 < len(name) < 65536:
        raise InvalidInputError(f"record name length out of range: {rec.name!r}")
    if len(rec.shape) > 255:
        raise InvalidInputError("rank exceeds format limit")
    payload = _payload_bytes(rec)
    head = struct.pack("<H", len(name)) + name
    head += struct.pack("<BB", _DTYPE_TAGS[rec.dtype], len(rec.shape))
    head += struct.pack(f"<{len(rec.shape)}I", *rec.shape) if rec.shape else b""
    head += struct.pack("<fb", rec.scale, rec.zero_point)
    head += struct.pack("<Q", len(payload))
    body = head + payload
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def save_weights(store: WeightStore, path: str):
    """Write atomically: temp file in the target directory, then rename."""
    blob = io.BytesIO()
    blob.write(MAGIC)
    blob.write(struct.pack("<HI", VERSION, len(store)))
    for rec in store.records.values():
        blob.write(_encode_record(rec))
    atomic_write_bytes(path, blob.getvalue())


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedFileError(
                f"needed {n} bytes at offset {self.pos}, file has {len(self.data)}"
            )
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def _decode_record(r: _Reader) -> WeightRecord:
    start = r.pos
    (name_len,) = r.unpack("<H")
    if name_len == 0:
        raise FormatError("empty record name")
    name = r.take(name_len).decode("utf-8")
    tag, rank = r.unpack("<BB")
    if tag not in _TAG_DTYPES:
        raise FormatError(f"record {name!r}: unknown dtype tag {tag}")
    dtype = _TAG_DTYPES[tag]
    shape = tuple(r.unpack(f"<{rank}I")) if rank else ()
    scale, zp = r.unpack("<fb")
    (payload_len,) = r.unpack("<Q")
    want = _expected_payload_len(dtype, shape)
    if want is None or payload_len != want:
        raise FormatError(
            f"record {name!r}: payload of {payload_len} bytes does not match "
            f"dtype {dtype} shape {shape}"
        )
    payload = r.take(payload_len)
    (crc,) = r.unpack("<I")
    calc = zlib.crc32(r.data[start : r.pos - 4]) & 0xFFFFFFFF
    if crc != calc:
        raise ChecksumError(f"record {name!r}: crc {crc:#010x} != computed {calc:#010x}")
    if dtype == "fp32":
        data = np.frombuffer(payload, dtype="<f4").astype(np.float32)
    elif dtype == "int8":
        data = np.frombuffer(payload, dtype=np.int8).copy()
    else:
        data = np.frombuffer(payload, dtype="<u8").astype(np.uint64)
    return WeightRecord(name, dtype, shape, float(scale), int(zp), data)


def load_weights(path: str) -> WeightStore:
    with open(path, "rb") as f:
        data = f.read()
    r = _Reader(data)
    if r.take(4) != MAGIC:
        raise BadMagicError(f"{path}: not a weight file")
    version, count = r.unpack("<HI")
    if version != VERSION:
        raise UnsupportedVersionError(f"{path}: version {version}, reader supports {VERSION}")
    store = WeightStore()
    for _ in range(count):
        rec = _decode_record(r)
        if rec.name in store:
            raise FormatError(f"duplicate record {rec.name!r}")
        store.add(rec)
    if r.pos != len(data):
        raise FormatError(f"{path}: {len(data) - r.pos} trailing bytes after last record")
    return store
